#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mutamark::client::{StubRule, StubScript};
use mutamark::corpus::{load_corpus, Corpus, Problem};
use mutamark::evaluator::{oracle_shim_completion, Probe};
use mutamark::template::{expand, render, DEFAULT_VARIANT_CAP};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn corpus_dir() -> PathBuf {
    fixtures().join("corpus")
}

pub fn stub(name: &str) -> PathBuf {
    fixtures().join("stubs").join(name)
}

pub fn corpus() -> Corpus {
    load_corpus(&corpus_dir()).expect("fixture corpus loads")
}

pub fn mutamark(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mutamark"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn code(output: &Output) -> i32 {
    output.status.code().unwrap_or(-1)
}

pub fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

pub fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

/// A stub script answering every prompt of `corpus` with the source of the
/// oracle that defines its ground truth, arguments pinned.
pub fn oracle_script(corpus: &Corpus) -> StubScript {
    let mut script = StubScript::default();
    for problem in corpus.problems() {
        match problem {
            Problem::Template(t) => {
                let source = std::fs::read_to_string(&t.oracle.program).unwrap();
                for v in expand(&t.template, DEFAULT_VARIANT_CAP, None).unwrap() {
                    let prompt = render(&t.template, &v).unwrap();
                    let completion = oracle_shim_completion(&source, &t.oracle_args(&v));
                    script = script.rule(StubRule::exact(prompt, completion));
                }
            }
            Problem::Document(d) => {
                for probe in Probe::applicable(d) {
                    let (program, args) = match &probe {
                        Probe::DifferentObjectives(label) => {
                            d.substitution_oracle(d.document.substitution(label).unwrap())
                        }
                        _ => (d.oracle.program.clone(), d.oracle.args.clone()),
                    };
                    let source = std::fs::read_to_string(program).unwrap();
                    let prompt = probe.prompt(&d.document).unwrap();
                    script = script.rule(StubRule::exact(prompt, oracle_shim_completion(&source, &args)));
                }
            }
        }
    }
    script
}

/// Copies the fixture corpus so a test can modify it.
pub fn corpus_copy() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    copy_tree(&corpus_dir(), dir.path());
    dir
}

fn copy_tree(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_tree(&entry.path(), &target);
        } else {
            std::fs::copy(entry.path(), target).unwrap();
        }
    }
}
