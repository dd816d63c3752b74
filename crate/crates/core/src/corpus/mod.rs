//! Benchmark corpus: mutation-template problems and sectioned documents.
//!
//! On-disk layout, one directory per problem under the corpus root:
//!
//! ```text
//! <root>/<dir>/problem.json          manifest
//! <root>/<dir>/template.txt          template body   (template problems)
//! <root>/<dir>/document.json         sectioned text  (document problems)
//! <root>/<dir>/oracle/main           reference implementation
//! <root>/<dir>/oracle/variants/<v>   alternative oracles for substitutions
//! <root>/<dir>/inputs/*.txt          predefined inputs, fed on stdin
//! ```
//!
//! Exactly one of `template.txt` and `document.json` must be present.

mod document;
mod validate;

pub use document::{AblationError, ObjectiveSubstitution, ProblemDocument};
pub use validate::{validate_corpus, Finding, FindingKind, ValidationReport};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::template::{
    parse_template, ComparisonMode, MutationPoint, ProblemTemplate, TemplateError, Variant,
};

pub const DEFAULT_MIN_INPUTS: usize = 3;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}:{column}: {message}")]
    ManifestError {
        file: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{file}: {source}")]
    Template {
        file: PathBuf,
        #[source]
        source: TemplateError,
    },
    #[error("problem `{id}` references missing {what}: {path}")]
    DanglingReference {
        id: String,
        what: &'static str,
        path: PathBuf,
    },
    #[error("problem id `{0}` is used by more than one directory")]
    DuplicateProblemId(String),
    #[error("{dir}: expected exactly one of template.txt or document.json")]
    AmbiguousKind { dir: PathBuf },
}

impl CorpusError {
    fn manifest(file: &Path, err: serde_json::Error) -> Self {
        CorpusError::ManifestError {
            file: file.to_path_buf(),
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }

    fn invalid(file: &Path, message: impl Into<String>) -> Self {
        CorpusError::ManifestError {
            file: file.to_path_buf(),
            line: 0,
            column: 0,
            message: message.into(),
        }
    }
}

/// The kind of prompt a record was produced from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptType {
    Full,
    MissingSpecifications,
    MissingObjectives,
    DifferentObjectives,
    TemplateVariant,
}

impl PromptType {
    pub const ALL: [PromptType; 5] = [
        PromptType::Full,
        PromptType::MissingSpecifications,
        PromptType::MissingObjectives,
        PromptType::DifferentObjectives,
        PromptType::TemplateVariant,
    ];

    pub fn slug(self) -> &'static str {
        match self {
            PromptType::Full => "full",
            PromptType::MissingSpecifications => "missing-specifications",
            PromptType::MissingObjectives => "missing-objectives",
            PromptType::DifferentObjectives => "different-objectives",
            PromptType::TemplateVariant => "template-variant",
        }
    }

    /// Row label in summary tables.
    pub fn title(self) -> &'static str {
        match self {
            PromptType::Full => "Full Problems",
            PromptType::MissingSpecifications => "Missing Specifications",
            PromptType::MissingObjectives => "Missing Objectives",
            PromptType::DifferentObjectives => "Different Objectives",
            PromptType::TemplateVariant => "Template Variants",
        }
    }
}

impl fmt::Display for PromptType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

/// A predefined input, held in memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputCase {
    pub name: String,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleSpec {
    pub program: PathBuf,
    /// Fixed leading arguments. Template problems append the variant's
    /// values after these.
    pub args: Vec<String>,
    pub inputs_dir: PathBuf,
    pub inputs: Vec<InputCase>,
    pub min_inputs: usize,
}

#[derive(Debug, Clone)]
pub struct TemplateProblem {
    pub dir: PathBuf,
    pub template: ProblemTemplate,
    pub oracle: OracleSpec,
    /// Per point, a mapping from prompt value to oracle argument.
    oracle_values: Vec<HashMap<String, String>>,
}

impl TemplateProblem {
    pub fn id(&self) -> &str {
        self.template.id()
    }

    /// Oracle command-line arguments for `variant`, in point order.
    pub fn oracle_args(&self, variant: &Variant) -> Vec<String> {
        let mut args = self.oracle.args.clone();
        for ((_, value), map) in variant.assignment().iter().zip(&self.oracle_values) {
            args.push(map.get(value).cloned().unwrap_or_else(|| value.clone()));
        }
        args
    }
}

#[derive(Debug, Clone)]
pub struct DocumentProblem {
    pub dir: PathBuf,
    pub document: ProblemDocument,
    pub oracle: OracleSpec,
    pub comparison_mode: ComparisonMode,
    /// Resolved programs under `oracle/variants/`, keyed by variant name.
    pub variant_oracles: BTreeMap<String, PathBuf>,
    /// Probes the corpus author excluded for this problem.
    pub excluded: BTreeSet<PromptType>,
}

impl DocumentProblem {
    pub fn id(&self) -> &str {
        &self.document.id
    }

    /// Program and arguments of the oracle defining a substitution's ground
    /// truth.
    pub fn substitution_oracle(&self, sub: &ObjectiveSubstitution) -> (PathBuf, Vec<String>) {
        let program = self
            .variant_oracles
            .get(sub.oracle_variant())
            .cloned()
            .unwrap_or_else(|| self.oracle.program.clone());
        (program, sub.oracle_args.clone())
    }
}

#[derive(Debug, Clone)]
pub enum Problem {
    Template(TemplateProblem),
    Document(DocumentProblem),
}

impl Problem {
    pub fn id(&self) -> &str {
        match self {
            Problem::Template(t) => t.id(),
            Problem::Document(d) => d.id(),
        }
    }

    pub fn oracle(&self) -> &OracleSpec {
        match self {
            Problem::Template(t) => &t.oracle,
            Problem::Document(d) => &d.oracle,
        }
    }

    pub fn dir(&self) -> &Path {
        match self {
            Problem::Template(t) => &t.dir,
            Problem::Document(d) => &d.dir,
        }
    }

    pub fn comparison_mode(&self) -> ComparisonMode {
        match self {
            Problem::Template(t) => t.template.comparison_mode(),
            Problem::Document(d) => d.comparison_mode,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    problems: Vec<Problem>,
    content_hash: String,
}

impl Corpus {
    /// Problems sorted by id.
    pub fn problems(&self) -> &[Problem] {
        &self.problems
    }

    pub fn get(&self, id: &str) -> Option<&Problem> {
        self.problems
            .binary_search_by(|p| p.id().cmp(id))
            .ok()
            .map(|i| &self.problems[i])
    }

    pub fn len(&self) -> usize {
        self.problems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.problems.is_empty()
    }

    /// SHA-256 over every corpus file, in sorted relative-path order.
    pub fn content_hash(&self) -> &str {
        &self.content_hash
    }

    /// Keeps only problems accepted by `keep`.
    pub fn retain(&mut self, mut keep: impl FnMut(&Problem) -> bool) {
        self.problems.retain(|p| keep(p));
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PointManifest {
    name: String,
    values: Vec<String>,
    #[serde(default)]
    oracle_values: HashMap<String, String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemManifest {
    id: String,
    #[serde(default)]
    comparison_mode: ComparisonMode,
    #[serde(default)]
    points: Vec<PointManifest>,
    #[serde(default)]
    oracle_args: Vec<String>,
    #[serde(default)]
    min_inputs: Option<usize>,
    #[serde(default)]
    exclude: Vec<PromptType>,
    #[serde(default)]
    #[allow(dead_code)]
    description: Option<String>,
}

fn read(path: &Path) -> Result<Vec<u8>, CorpusError> {
    std::fs::read(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_text(path: &Path) -> Result<String, CorpusError> {
    String::from_utf8(read(path)?)
        .map_err(|_| CorpusError::invalid(path, "file is not valid UTF-8"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, CorpusError> {
    let io = |source| CorpusError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut entries = std::fs::read_dir(dir)
        .map_err(io)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(io)?;
    entries.sort();
    Ok(entries)
}

/// Loads every problem directory under `root`. Directories without a
/// `problem.json` are ignored.
pub fn load_corpus(root: &Path) -> Result<Corpus, CorpusError> {
    let mut problems = Vec::new();
    let mut hasher = Sha256::new();
    for dir in sorted_entries(root)? {
        if !dir.is_dir() || !dir.join("problem.json").is_file() {
            continue;
        }
        problems.push(load_problem(&dir)?);
        hash_tree(root, &dir, &mut hasher)?;
    }
    problems.sort_by(|a, b| a.id().cmp(b.id()));
    if let Some(w) = problems.windows(2).find(|w| w[0].id() == w[1].id()) {
        return Err(CorpusError::DuplicateProblemId(w[0].id().to_string()));
    }
    Ok(Corpus {
        root: root.to_path_buf(),
        problems,
        content_hash: format!("sha256:{}", hex::encode(hasher.finalize())),
    })
}

fn hash_tree(root: &Path, dir: &Path, hasher: &mut Sha256) -> Result<(), CorpusError> {
    for entry in sorted_entries(dir)? {
        if entry.is_dir() {
            hash_tree(root, &entry, hasher)?;
        } else {
            let rel = entry.strip_prefix(root).unwrap_or(&entry);
            let data = read(&entry)?;
            hasher.update(rel.to_string_lossy().as_bytes());
            hasher.update([0]);
            hasher.update((data.len() as u64).to_le_bytes());
            hasher.update(&data);
        }
    }
    Ok(())
}

fn load_problem(dir: &Path) -> Result<Problem, CorpusError> {
    let manifest_path = dir.join("problem.json");
    let manifest: ProblemManifest = serde_json::from_slice(&read(&manifest_path)?)
        .map_err(|e| CorpusError::manifest(&manifest_path, e))?;
    if manifest.id.trim().is_empty() {
        return Err(CorpusError::invalid(&manifest_path, "`id` must be non-empty"));
    }
    let template_path = dir.join("template.txt");
    let document_path = dir.join("document.json");
    let oracle = load_oracle(dir, &manifest, &manifest_path)?;

    match (template_path.is_file(), document_path.is_file()) {
        (true, false) => {
            if manifest.points.iter().any(|p| {
                p.oracle_values.keys().any(|k| !p.values.contains(k))
            }) {
                return Err(CorpusError::invalid(
                    &manifest_path,
                    "`oracle_values` maps a value the point does not declare",
                ));
            }
            let body = read_text(&template_path)?;
            let oracle_values = manifest
                .points
                .iter()
                .map(|p| p.oracle_values.clone())
                .collect();
            let points = manifest
                .points
                .into_iter()
                .map(|p| MutationPoint::new(p.name, p.values))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|source| CorpusError::Template {
                    file: manifest_path.clone(),
                    source,
                })?;
            let template = parse_template(manifest.id, &body, points, manifest.comparison_mode)
                .map_err(|source| CorpusError::Template {
                    file: template_path.clone(),
                    source,
                })?;
            Ok(Problem::Template(TemplateProblem {
                dir: dir.to_path_buf(),
                template,
                oracle,
                oracle_values,
            }))
        }
        (false, true) => {
            if !manifest.points.is_empty() {
                return Err(CorpusError::invalid(
                    &manifest_path,
                    "document problems cannot declare mutation points",
                ));
            }
            let mut document: ProblemDocument =
                serde_json::from_slice(&read(&document_path)?)
                    .map_err(|e| CorpusError::manifest(&document_path, e))?;
            if document.id.is_empty() {
                document.id = manifest.id.clone();
            } else if document.id != manifest.id {
                return Err(CorpusError::invalid(
                    &document_path,
                    format!("id `{}` differs from manifest id `{}`", document.id, manifest.id),
                ));
            }
            if document.statement_sentences.is_empty() {
                return Err(CorpusError::invalid(
                    &document_path,
                    "`statement_sentences` must be non-empty",
                ));
            }
            let mut labels = BTreeSet::new();
            let mut variant_oracles = BTreeMap::new();
            for sub in &document.objective_substitutions {
                if !labels.insert(sub.label.as_str()) {
                    return Err(CorpusError::invalid(
                        &document_path,
                        format!("duplicate substitution label `{}`", sub.label),
                    ));
                }
                let name = sub.oracle_variant();
                let path = dir.join("oracle").join("variants").join(name);
                if !path.is_file() {
                    return Err(CorpusError::DanglingReference {
                        id: manifest.id.clone(),
                        what: "oracle variant",
                        path,
                    });
                }
                variant_oracles.insert(name.to_string(), path);
            }
            Ok(Problem::Document(DocumentProblem {
                dir: dir.to_path_buf(),
                document,
                oracle,
                comparison_mode: manifest.comparison_mode,
                variant_oracles,
                excluded: manifest.exclude.into_iter().collect(),
            }))
        }
        _ => Err(CorpusError::AmbiguousKind {
            dir: dir.to_path_buf(),
        }),
    }
}

fn load_oracle(
    dir: &Path,
    manifest: &ProblemManifest,
    manifest_path: &Path,
) -> Result<OracleSpec, CorpusError> {
    let program = dir.join("oracle").join("main");
    if !program.is_file() {
        return Err(CorpusError::DanglingReference {
            id: manifest.id.clone(),
            what: "oracle",
            path: program,
        });
    }
    let inputs_dir = dir.join("inputs");
    if !inputs_dir.is_dir() {
        return Err(CorpusError::DanglingReference {
            id: manifest.id.clone(),
            what: "inputs directory",
            path: inputs_dir,
        });
    }
    let mut inputs = Vec::new();
    for path in sorted_entries(&inputs_dir)? {
        if path.is_file() && path.extension().is_some_and(|e| e == "txt") {
            inputs.push(InputCase {
                name: path
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                data: read(&path)?,
            });
        }
    }
    let min_inputs = manifest.min_inputs.unwrap_or(DEFAULT_MIN_INPUTS);
    if min_inputs == 0 {
        return Err(CorpusError::invalid(manifest_path, "`min_inputs` must be positive"));
    }
    Ok(OracleSpec {
        program,
        args: manifest.oracle_args.clone(),
        inputs_dir,
        inputs,
        min_inputs,
    })
}

#[cfg(test)]
pub(crate) mod testutil {
    use std::path::Path;

    pub fn write(path: &Path, text: &str) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(path, text).unwrap();
    }

    /// Writes a template problem whose oracle echoes its first argument
    /// followed by stdin.
    pub fn template_problem(root: &Path, dir: &str, id: &str) {
        let d = root.join(dir);
        write(
            &d.join("problem.json"),
            &format!(
                r#"{{"id": "{id}", "points": [{{"name": "op", "values": ["AND", "OR"]}}]}}"#
            ),
        );
        write(&d.join("template.txt"), "\"\"\"Apply {{op}}.\"\"\"\n");
        write(
            &d.join("oracle/main"),
            "import sys\nprint(sys.argv[1] + ':' + sys.stdin.read().strip())\n",
        );
        for i in 1..=3 {
            write(&d.join(format!("inputs/{i}.txt")), &format!("in{i}\n"));
        }
    }
}
