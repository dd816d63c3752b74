use std::fmt;
use std::path::PathBuf;

use serde::Serialize;

use super::{Corpus, Problem};
use crate::compare::{compare_outputs, normalize};
use crate::sandbox::{ExecutionResult, ExitStatus, Job, Outcome, Sandbox};
use crate::template::{expand, TemplateError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FindingKind {
    InputShortfall { found: usize, required: usize },
    VariantCapExceeded { size: u128, cap: usize },
    OracleLaunchFailure { reason: String },
    OracleError { exit: ExitStatus },
    OracleTimeout,
    OracleOutputOverflow,
    Nondeterministic,
    /// The substituted oracle agrees with the original on every input.
    VacuousSubstitution { label: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub problem_id: String,
    /// Which oracle invocation: a variant key, `main`, or `variant:<name>`.
    pub subject: String,
    pub input: Option<String>,
    #[serde(flatten)]
    pub kind: FindingKind,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.problem_id)?;
        if !self.subject.is_empty() {
            write!(f, " [{}]", self.subject)?;
        }
        if let Some(input) = &self.input {
            write!(f, " input {input}")?;
        }
        match &self.kind {
            FindingKind::InputShortfall { found, required } => {
                write!(f, ": {found} inputs, at least {required} required")
            }
            FindingKind::VariantCapExceeded { size, cap } => {
                write!(f, ": {size} variants exceed the cap of {cap}")
            }
            FindingKind::OracleLaunchFailure { reason } => {
                write!(f, ": oracle failed to launch: {reason}")
            }
            FindingKind::OracleError { exit } => write!(f, ": oracle exited with {exit:?}"),
            FindingKind::OracleTimeout => write!(f, ": oracle timed out"),
            FindingKind::OracleOutputOverflow => write!(f, ": oracle output exceeded the limit"),
            FindingKind::Nondeterministic => {
                write!(f, ": oracle output differs between two runs")
            }
            FindingKind::VacuousSubstitution { label } => write!(
                f,
                ": substitution `{label}` agrees with the original oracle on every input"
            ),
        }
    }
}

/// Findings from [`validate_corpus`]; empty means evaluation-ready.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for finding in &self.findings {
            writeln!(f, "{finding}")?;
        }
        Ok(())
    }
}

struct Invocation {
    subject: String,
    program: PathBuf,
    args: Vec<String>,
}

/// Runs every oracle invocation on every input twice and reports anything
/// that would make evaluation results untrustworthy.
pub fn validate_corpus(corpus: &Corpus, sandbox: &Sandbox, cap: usize) -> ValidationReport {
    let mut findings = Vec::new();
    for problem in corpus.problems() {
        validate_problem(problem, sandbox, cap, &mut findings);
    }
    ValidationReport { findings }
}

fn validate_problem(problem: &Problem, sandbox: &Sandbox, cap: usize, findings: &mut Vec<Finding>) {
    let id = problem.id().to_string();
    let oracle = problem.oracle();
    let finding = |subject: &str, input: Option<&str>, kind| Finding {
        problem_id: id.clone(),
        subject: subject.to_string(),
        input: input.map(str::to_string),
        kind,
    };
    if oracle.inputs.len() < oracle.min_inputs {
        findings.push(finding(
            "",
            None,
            FindingKind::InputShortfall {
                found: oracle.inputs.len(),
                required: oracle.min_inputs,
            },
        ));
    }

    let mut invocations = Vec::new();
    match problem {
        Problem::Template(t) => match expand(&t.template, cap, None) {
            Ok(variants) => invocations.extend(variants.iter().map(|v| Invocation {
                subject: v.key(),
                program: oracle.program.clone(),
                args: t.oracle_args(v),
            })),
            Err(TemplateError::VariantCapExceeded { size, cap, .. }) => {
                findings.push(finding("", None, FindingKind::VariantCapExceeded { size, cap }));
            }
            Err(e) => unreachable!("expand on a loaded template: {e}"),
        },
        Problem::Document(d) => {
            invocations.push(Invocation {
                subject: "main".into(),
                program: oracle.program.clone(),
                args: oracle.args.clone(),
            });
            for sub in &d.document.objective_substitutions {
                let (program, args) = d.substitution_oracle(sub);
                invocations.push(Invocation {
                    subject: format!("variant:{}", sub.oracle_variant()),
                    program,
                    args,
                });
            }
        }
    }

    let jobs: Vec<Job> = invocations
        .iter()
        .flat_map(|inv| {
            oracle.inputs.iter().flat_map(move |input| {
                let job = Job {
                    program: inv.program.clone(),
                    args: inv.args.clone(),
                    input: input.data.clone(),
                };
                [job.clone(), job]
            })
        })
        .collect();
    let results = sandbox.run_batch(&jobs);
    let per_invocation = oracle.inputs.len() * 2;
    // First-run output per (invocation, input), or None when the run failed.
    let mut outputs: Vec<Vec<Option<&[u8]>>> = Vec::new();
    for (inv, runs) in invocations
        .iter()
        .zip(results.chunks(per_invocation.max(1)))
    {
        let mut row = Vec::new();
        for (input, pair) in oracle.inputs.iter().zip(runs.chunks(2)) {
            let problem_kind = pair.iter().find_map(failure_kind);
            if let Some(kind) = problem_kind {
                findings.push(finding(&inv.subject, Some(&input.name), kind));
                row.push(None);
            } else if normalize(&pair[0].stdout) != normalize(&pair[1].stdout) {
                findings.push(finding(&inv.subject, Some(&input.name), FindingKind::Nondeterministic));
                row.push(None);
            } else {
                row.push(Some(pair[0].stdout.as_slice()));
            }
        }
        outputs.push(row);
    }

    if let Problem::Document(d) = problem {
        for (i, sub) in d.document.objective_substitutions.iter().enumerate() {
            let (main, variant) = (&outputs[0], &outputs[i + 1]);
            let complete = main.iter().chain(variant).all(Option::is_some);
            let all_agree = main.iter().zip(variant).all(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => compare_outputs(a, b, d.comparison_mode).is_match(),
                _ => false,
            });
            if complete && all_agree {
                findings.push(finding(
                    "",
                    None,
                    FindingKind::VacuousSubstitution {
                        label: sub.label.clone(),
                    },
                ));
            }
        }
    }
}

fn failure_kind(result: &ExecutionResult) -> Option<FindingKind> {
    match result.outcome {
        Outcome::LaunchFailure => Some(FindingKind::OracleLaunchFailure {
            reason: result.launch_error.clone().unwrap_or_default(),
        }),
        Outcome::Timeout => Some(FindingKind::OracleTimeout),
        Outcome::Completed if result.output_truncated => Some(FindingKind::OracleOutputOverflow),
        Outcome::Completed if !result.exit_status.success() => Some(FindingKind::OracleError {
            exit: result.exit_status,
        }),
        Outcome::Completed => None,
    }
}
