//! Differential evaluation of synthesized programs against oracles.
//!
//! For each variant or probe the evaluator renders a prompt, asks the client
//! for up to `k` completions on a temperature schedule, assembles each into a
//! candidate program and runs candidate and oracle on every predefined input.
//! Attempts stop at the first pass. Every attempt is recorded.

use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::client::{ClientError, CompletionClient, GenerationParams};
use crate::compare::{compare_outputs, Comparison};
use crate::corpus::{
    AblationError, DocumentProblem, InputCase, ProblemDocument, PromptType, TemplateProblem,
};
use crate::sandbox::{ExecutionResult, Job, Outcome, Sandbox};
use crate::template::{render, ComparisonMode, TemplateError, Variant};

pub const SCHEMA_VERSION: u32 = 1;

/// Temperatures for attempts 1..=3 when none are configured.
pub const DEFAULT_TEMPERATURES: [f64; 3] = [0.0, 0.4, 0.8];
pub const MAX_ATTEMPTS: usize = 3;

#[derive(Debug, Error)]
pub enum EvalError {
    /// The model backend failed; the record is aborted rather than failed.
    #[error("aborted: {0}")]
    Backend(#[from] ClientError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Ablation(#[from] AblationError),
    #[error("oracle for `{problem}` failed on input {input}: {detail}")]
    Oracle {
        problem: String,
        input: String,
        detail: String,
    },
    #[error("probe {probe} is excluded for problem `{problem}`")]
    Excluded { problem: String, probe: String },
    #[error("cannot write candidate program: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    WrongOutput,
    RuntimeError,
    Timeout,
    EmptyCompletion,
}

impl Verdict {
    pub fn is_pass(self) -> bool {
        self == Verdict::Pass
    }

    /// Aggregation precedence within one attempt; higher wins.
    fn severity(self) -> u8 {
        match self {
            Verdict::Pass => 0,
            Verdict::WrongOutput => 1,
            Verdict::RuntimeError => 2,
            Verdict::Timeout => 3,
            Verdict::EmptyCompletion => 4,
        }
    }

    fn aggregate(per_input: &[InputVerdict]) -> Verdict {
        per_input
            .iter()
            .map(|v| v.verdict)
            .max_by_key(|v| v.severity())
            .unwrap_or(Verdict::Pass)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeClassification {
    /// Passes the original problem's oracle although the prompt asked for
    /// something else or omitted what it needs.
    MemorizedOriginal,
    /// Passes the prompt's own ground truth but not the original.
    Generalized,
    FailsBoth,
    PassesBoth,
}

impl ProbeClassification {
    /// `target` is `None` when the prompt has no ground truth of its own
    /// (ablated prompts), in which case passing the original oracle is the
    /// memorization signal.
    pub fn classify(original: Verdict, target: Option<Verdict>) -> Self {
        match (original.is_pass(), target.map(Verdict::is_pass)) {
            (true, None) | (true, Some(false)) => ProbeClassification::MemorizedOriginal,
            (false, None) | (false, Some(false)) => ProbeClassification::FailsBoth,
            (false, Some(true)) => ProbeClassification::Generalized,
            (true, Some(true)) => ProbeClassification::PassesBoth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputVerdict {
    pub input: String,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diff: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt_index: u32,
    pub temperature: f64,
    pub completion_hash: String,
    pub verdict: Verdict,
    /// Verdict against the original problem's oracle, for probes whose
    /// ground truth differs from it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_verdict: Option<Verdict>,
    pub per_input: Vec<InputVerdict>,
}

/// Wall-clock measurements, kept out of the results file so that it stays
/// byte-identical across replays.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Timing {
    pub total: Duration,
    pub per_attempt: Vec<Duration>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub schema_version: u32,
    pub problem_id: String,
    pub prompt_type: PromptType,
    /// Variant key for template variants, probe label otherwise.
    pub key: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub assignment: Vec<(String, String)>,
    /// Index of the deciding (last run) attempt.
    pub attempt_index: u32,
    pub completion_hash: String,
    pub per_input: Vec<InputVerdict>,
    pub final_verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification: Option<ProbeClassification>,
    pub attempts: Vec<AttemptRecord>,
    #[serde(skip)]
    pub timing: Timing,
}

impl EvaluationRecord {
    /// Verdict of the first attempt only.
    pub fn zero_shot_verdict(&self) -> Verdict {
        self.attempts
            .first()
            .map_or(self.final_verdict, |a| a.verdict)
    }

    /// `(problem, prompt type, key)`, unique within a results file.
    pub fn identity(&self) -> (&str, PromptType, &str) {
        (&self.problem_id, self.prompt_type, &self.key)
    }
}

/// Attempt schedule and candidate assembly settings.
#[derive(Debug, Clone, PartialEq)]
pub struct AttemptsConfig {
    /// One temperature per attempt; its length is the attempt count.
    pub temperatures: Vec<f64>,
    pub params: GenerationParams,
    /// Line prefixes that end a completion during candidate assembly.
    pub stop_markers: Vec<String>,
}

impl Default for AttemptsConfig {
    fn default() -> Self {
        Self {
            temperatures: DEFAULT_TEMPERATURES.to_vec(),
            params: GenerationParams::default(),
            stop_markers: default_stop_markers(),
        }
    }
}

impl AttemptsConfig {
    pub fn zero_shot() -> Self {
        Self {
            temperatures: vec![0.0],
            ..Self::default()
        }
    }

    pub fn with_attempts(attempts: usize) -> Self {
        Self {
            temperatures: DEFAULT_TEMPERATURES[..attempts.clamp(1, MAX_ATTEMPTS)].to_vec(),
            ..Self::default()
        }
    }
}

/// A column-0 line opening a new docstring marks the model drifting into a
/// fresh problem statement.
pub fn default_stop_markers() -> Vec<String> {
    vec!["\"\"\"".to_string(), "'''".to_string()]
}

/// Wraps prompt text in a module docstring.
pub fn docstring_prompt(text: &str) -> String {
    format!("\"\"\"\n{}\n\"\"\"\n", text.replace("\"\"\"", "\\\"\\\"\\\""))
}

/// Concatenates prompt and completion, cutting the completion at the first
/// line that starts with a stop marker.
pub fn assemble_candidate(prompt: &str, completion: &str, stop_markers: &[String]) -> String {
    let mut line_starts = Vec::new();
    if prompt.is_empty() || prompt.ends_with('\n') {
        line_starts.push(0);
    }
    line_starts.extend(completion.match_indices('\n').map(|(i, _)| i + 1));
    let cut = line_starts
        .into_iter()
        .find(|&start| {
            let line = &completion[start..];
            stop_markers
                .iter()
                .any(|m| !m.is_empty() && line.starts_with(m.as_str()))
        })
        .unwrap_or(completion.len());
    format!("{prompt}{}", &completion[..cut])
}

/// Completion that turns the oracle source into a self-contained candidate
/// by pinning its command-line arguments. Only meaningful for Python oracles.
pub fn oracle_shim_completion(oracle_source: &str, args: &[String]) -> String {
    let args = serde_json::to_string(args).expect("strings serialize");
    format!("import sys\nsys.argv[1:] = {args}\n{oracle_source}")
}

pub fn content_hash(text: &str) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(text.as_bytes())))
}

/// A memorization probe over a sectioned document.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Probe {
    Full,
    MissingSpecifications,
    MissingObjectives,
    DifferentObjectives(String),
}

impl Probe {
    pub fn prompt_type(&self) -> PromptType {
        match self {
            Probe::Full => PromptType::Full,
            Probe::MissingSpecifications => PromptType::MissingSpecifications,
            Probe::MissingObjectives => PromptType::MissingObjectives,
            Probe::DifferentObjectives(_) => PromptType::DifferentObjectives,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Probe::DifferentObjectives(label) => label.clone(),
            other => other.prompt_type().slug().to_string(),
        }
    }

    /// The docstring-wrapped prompt sent to the model.
    pub fn prompt(&self, doc: &ProblemDocument) -> Result<String, AblationError> {
        let text = match self {
            Probe::Full => doc.full_text(),
            Probe::MissingSpecifications => doc.ablate_missing_specifications()?,
            Probe::MissingObjectives => doc.ablate_first_sentence().to_string(),
            Probe::DifferentObjectives(label) => doc.ablate_substitute_objective(label)?.0,
        };
        Ok(docstring_prompt(&text))
    }

    /// Probes applicable to a document, honoring its exclusion flags.
    pub fn applicable(problem: &DocumentProblem) -> Vec<Probe> {
        let mut probes = vec![Probe::Full];
        if problem.document.has_specifications() {
            probes.push(Probe::MissingSpecifications);
        }
        probes.push(Probe::MissingObjectives);
        probes.extend(
            problem
                .document
                .objective_substitutions
                .iter()
                .map(|s| Probe::DifferentObjectives(s.label.clone())),
        );
        probes.retain(|p| !problem.excluded.contains(&p.prompt_type()));
        probes
    }
}

/// Expected outputs of one oracle on every input.
struct OracleOutputs(Vec<Vec<u8>>);

pub struct Evaluator<'a> {
    client: &'a dyn CompletionClient,
    sandbox: &'a Sandbox,
    config: &'a AttemptsConfig,
}

impl<'a> Evaluator<'a> {
    pub fn new(
        client: &'a dyn CompletionClient,
        sandbox: &'a Sandbox,
        config: &'a AttemptsConfig,
    ) -> Self {
        Self {
            client,
            sandbox,
            config,
        }
    }

    fn oracle_outputs(
        &self,
        problem_id: &str,
        program: &Path,
        args: &[String],
        inputs: &[InputCase],
    ) -> Result<OracleOutputs, EvalError> {
        let jobs: Vec<Job> = inputs
            .iter()
            .map(|input| Job {
                program: program.to_path_buf(),
                args: args.to_vec(),
                input: input.data.clone(),
            })
            .collect();
        let mut outputs = Vec::with_capacity(jobs.len());
        for (input, result) in inputs.iter().zip(self.sandbox.run_batch(&jobs)) {
            if !result.succeeded() {
                return Err(EvalError::Oracle {
                    problem: problem_id.to_string(),
                    input: input.name.clone(),
                    detail: describe_failure(&result),
                });
            }
            outputs.push(result.stdout);
        }
        Ok(OracleOutputs(outputs))
    }

    /// Runs one candidate source against every input.
    fn run_candidate(&self, source: &str, inputs: &[InputCase]) -> Result<Vec<ExecutionResult>, EvalError> {
        let dir = tempfile::Builder::new().prefix("mutamark-cand-").tempdir()?;
        let path = dir.path().join("candidate");
        std::fs::write(&path, source)?;
        let jobs: Vec<Job> = inputs
            .iter()
            .map(|input| Job {
                program: path.clone(),
                args: Vec::new(),
                input: input.data.clone(),
            })
            .collect();
        Ok(self.sandbox.run_batch(&jobs))
    }

    /// The attempt loop shared by variants and probes. `oracles[0]` defines
    /// the verdict; `oracles[1]`, when present, is the original problem's.
    fn attempt_loop(
        &self,
        prompt: &str,
        inputs: &[InputCase],
        mode: ComparisonMode,
        target: &OracleOutputs,
        original: Option<&OracleOutputs>,
    ) -> Result<(Vec<AttemptRecord>, Timing), EvalError> {
        let started = Instant::now();
        let mut attempts = Vec::new();
        let mut timing = Timing::default();
        for (i, &temperature) in self.config.temperatures.iter().enumerate() {
            let attempt_started = Instant::now();
            let attempt_index = i as u32 + 1;
            let params = self.config.params.with_temperature(temperature);
            let completion = self.client.complete(prompt, &params, attempt_index)?;
            let text = &completion.completion_text;
            let (per_input, original_verdict) = if text.trim().is_empty() {
                let per_input = inputs
                    .iter()
                    .map(|input| InputVerdict {
                        input: input.name.clone(),
                        verdict: Verdict::EmptyCompletion,
                        diff: None,
                    })
                    .collect();
                (per_input, original.map(|_| Verdict::EmptyCompletion))
            } else {
                let source = assemble_candidate(prompt, text, &self.config.stop_markers);
                let results = self.run_candidate(&source, inputs)?;
                let per_input = judge(inputs, &results, target, mode);
                let original_verdict =
                    original.map(|o| Verdict::aggregate(&judge(inputs, &results, o, mode)));
                (per_input, original_verdict)
            };
            let verdict = Verdict::aggregate(&per_input);
            attempts.push(AttemptRecord {
                attempt_index,
                temperature,
                completion_hash: content_hash(text),
                verdict,
                original_verdict,
                per_input,
            });
            timing.per_attempt.push(attempt_started.elapsed());
            if verdict.is_pass() {
                break;
            }
        }
        timing.total = started.elapsed();
        Ok((attempts, timing))
    }

    pub fn evaluate_variant(
        &self,
        problem: &TemplateProblem,
        variant: &Variant,
    ) -> Result<EvaluationRecord, EvalError> {
        let prompt = render(&problem.template, variant)?;
        let oracle = &problem.oracle;
        let expected = self.oracle_outputs(
            problem.id(),
            &oracle.program,
            &problem.oracle_args(variant),
            &oracle.inputs,
        )?;
        let (attempts, timing) = self.attempt_loop(
            &prompt,
            &oracle.inputs,
            problem.template.comparison_mode(),
            &expected,
            None,
        )?;
        Ok(finish(
            problem.id(),
            PromptType::TemplateVariant,
            variant.key(),
            variant.assignment().to_vec(),
            attempts,
            timing,
            None,
        ))
    }

    /// Builds the probe prompt and evaluates it against both the prompt's
    /// ground truth and the original problem's oracle.
    pub fn evaluate_probe(
        &self,
        problem: &DocumentProblem,
        probe: &Probe,
    ) -> Result<(EvaluationRecord, ProbeClassification), EvalError> {
        if problem.excluded.contains(&probe.prompt_type()) {
            return Err(EvalError::Excluded {
                problem: problem.id().to_string(),
                probe: probe.label(),
            });
        }
        let doc = &problem.document;
        let oracle = &problem.oracle;
        let original =
            self.oracle_outputs(problem.id(), &oracle.program, &oracle.args, &oracle.inputs)?;
        let prompt = probe.prompt(doc)?;
        let substituted = match probe {
            Probe::DifferentObjectives(label) => {
                let (program, args) = problem.substitution_oracle(doc.substitution(label)?);
                Some(self.oracle_outputs(problem.id(), &program, &args, &oracle.inputs)?)
            }
            _ => None,
        };
        let (attempts, timing) = match &substituted {
            Some(target) => self.attempt_loop(
                &prompt,
                &oracle.inputs,
                problem.comparison_mode,
                target,
                Some(&original),
            )?,
            None => self.attempt_loop(
                &prompt,
                &oracle.inputs,
                problem.comparison_mode,
                &original,
                None,
            )?,
        };
        let last = attempts.last().expect("at least one attempt");
        let classification = match probe {
            Probe::Full => ProbeClassification::classify(last.verdict, Some(last.verdict)),
            Probe::MissingSpecifications | Probe::MissingObjectives => {
                ProbeClassification::classify(last.verdict, None)
            }
            Probe::DifferentObjectives(_) => ProbeClassification::classify(
                last.original_verdict.expect("substitution tracks the original"),
                Some(last.verdict),
            ),
        };
        let record = finish(
            problem.id(),
            probe.prompt_type(),
            probe.label(),
            Vec::new(),
            attempts,
            timing,
            Some(classification),
        );
        Ok((record, classification))
    }

    /// Evaluates many variants concurrently; results keep input order.
    pub fn evaluate_variants(
        &self,
        jobs: &[(&TemplateProblem, Variant)],
    ) -> Vec<Result<EvaluationRecord, EvalError>> {
        self.sandbox.install(|| {
            jobs.par_iter()
                .map(|(problem, variant)| self.evaluate_variant(problem, variant))
                .collect()
        })
    }

    pub fn evaluate_probes(
        &self,
        jobs: &[(&DocumentProblem, Probe)],
    ) -> Vec<Result<EvaluationRecord, EvalError>> {
        self.sandbox.install(|| {
            jobs.par_iter()
                .map(|(problem, probe)| self.evaluate_probe(problem, probe).map(|(r, _)| r))
                .collect()
        })
    }
}

fn finish(
    problem_id: &str,
    prompt_type: PromptType,
    key: String,
    assignment: Vec<(String, String)>,
    attempts: Vec<AttemptRecord>,
    timing: Timing,
    classification: Option<ProbeClassification>,
) -> EvaluationRecord {
    let last = attempts.last().expect("at least one attempt");
    EvaluationRecord {
        schema_version: SCHEMA_VERSION,
        problem_id: problem_id.to_string(),
        prompt_type,
        key,
        assignment,
        attempt_index: last.attempt_index,
        completion_hash: last.completion_hash.clone(),
        per_input: last.per_input.clone(),
        final_verdict: last.verdict,
        classification,
        attempts,
        timing,
    }
}

fn judge(
    inputs: &[InputCase],
    results: &[ExecutionResult],
    expected: &OracleOutputs,
    mode: ComparisonMode,
) -> Vec<InputVerdict> {
    inputs
        .iter()
        .zip(results)
        .zip(&expected.0)
        .map(|((input, result), expected)| {
            let (verdict, diff) = judge_one(result, expected, mode);
            InputVerdict {
                input: input.name.clone(),
                verdict,
                diff,
            }
        })
        .collect()
}

fn judge_one(
    result: &ExecutionResult,
    expected: &[u8],
    mode: ComparisonMode,
) -> (Verdict, Option<String>) {
    match result.outcome {
        Outcome::Timeout => (Verdict::Timeout, None),
        Outcome::LaunchFailure => (Verdict::RuntimeError, result.launch_error.clone()),
        Outcome::Completed if !result.exit_status.success() && !result.output_truncated => {
            (Verdict::RuntimeError, Some(describe_failure(result)))
        }
        Outcome::Completed if result.output_truncated => (
            Verdict::WrongOutput,
            Some(format!("output exceeded {} bytes", result.stdout.len().max(result.stderr.len()))),
        ),
        Outcome::Completed => match compare_outputs(expected, &result.stdout, mode) {
            Comparison::Match => (Verdict::Pass, None),
            Comparison::Mismatch { line, description } => {
                (Verdict::WrongOutput, Some(format!("line {line}: {description}")))
            }
        },
    }
}

fn describe_failure(result: &ExecutionResult) -> String {
    match result.outcome {
        Outcome::LaunchFailure => result.launch_error.clone().unwrap_or_default(),
        Outcome::Timeout => format!("timed out after {:.1}s", result.wall_time.as_secs_f64()),
        Outcome::Completed if result.output_truncated => "output limit exceeded".to_string(),
        Outcome::Completed => {
            let stderr = String::from_utf8_lossy(&result.stderr);
            let last = stderr.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("");
            format!("exit {:?}: {}", result.exit_status, last.trim())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn markers() -> Vec<String> {
        default_stop_markers()
    }

    #[test]
    fn assembly_is_verbatim_concatenation() {
        let prompt = "def f():\n  \"\"\"doc\"\"\"\n";
        assert_eq!(
            assemble_candidate(prompt, "  return 1\n", &markers()),
            "def f():\n  \"\"\"doc\"\"\"\n  return 1\n"
        );
    }

    #[test]
    fn assembly_stops_at_new_docstring() {
        let prompt = "\"\"\"Add two numbers.\"\"\"\n";
        let completion = "print(1 + 2)\n\n\"\"\"Multiply two numbers.\"\"\"\nprint(2 * 3)\n";
        assert_eq!(
            assemble_candidate(prompt, completion, &markers()),
            "\"\"\"Add two numbers.\"\"\"\nprint(1 + 2)\n\n"
        );
        // indented docstrings belong to the program
        let completion = "def g():\n    \"\"\"helper\"\"\"\n    return 1\n";
        assert_eq!(
            assemble_candidate(prompt, completion, &markers()),
            format!("{prompt}{completion}")
        );
    }

    #[test]
    fn assembly_of_empty_completion_is_prompt() {
        assert_eq!(assemble_candidate("p\n", "", &markers()), "p\n");
    }

    #[test]
    fn completion_continuing_a_line_is_not_a_line_start() {
        assert_eq!(assemble_candidate("x = ", "'''a'''\n", &markers()), "x = '''a'''\n");
    }

    #[test]
    fn classification_matrix() {
        use ProbeClassification::*;
        use Verdict::*;
        assert_eq!(ProbeClassification::classify(Pass, None), MemorizedOriginal);
        assert_eq!(ProbeClassification::classify(WrongOutput, None), FailsBoth);
        assert_eq!(ProbeClassification::classify(Pass, Some(WrongOutput)), MemorizedOriginal);
        assert_eq!(ProbeClassification::classify(WrongOutput, Some(Pass)), Generalized);
        assert_eq!(ProbeClassification::classify(Pass, Some(Pass)), PassesBoth);
        assert_eq!(ProbeClassification::classify(Timeout, Some(RuntimeError)), FailsBoth);
    }

    #[test]
    fn verdict_precedence() {
        let v = |verdict| InputVerdict {
            input: String::new(),
            verdict,
            diff: None,
        };
        use Verdict::*;
        assert_eq!(Verdict::aggregate(&[v(Pass), v(WrongOutput), v(Timeout), v(RuntimeError)]), Timeout);
        assert_eq!(Verdict::aggregate(&[v(WrongOutput), v(RuntimeError)]), RuntimeError);
        assert_eq!(Verdict::aggregate(&[v(Pass), v(Pass)]), Pass);
    }

    #[test]
    fn docstring_wrapping_escapes_quotes() {
        assert_eq!(docstring_prompt("hi"), "\"\"\"\nhi\n\"\"\"\n");
        assert_eq!(docstring_prompt(r#"a """ b"#), "\"\"\"\na \\\"\\\"\\\" b\n\"\"\"\n");
    }

    #[test]
    fn shim_pins_arguments() {
        let shim = oracle_shim_completion("print(1)\n", &["NAND".into(), "a'b".into()]);
        assert_eq!(shim, "import sys\nsys.argv[1:] = [\"NAND\",\"a'b\"]\nprint(1)\n");
    }

    #[test]
    fn record_serialization_omits_timing() {
        let record = finish(
            "p",
            PromptType::TemplateVariant,
            "op=AND".into(),
            vec![("op".into(), "AND".into())],
            vec![AttemptRecord {
                attempt_index: 1,
                temperature: 0.0,
                completion_hash: content_hash(""),
                verdict: Verdict::Pass,
                original_verdict: None,
                per_input: vec![],
            }],
            Timing {
                total: Duration::from_secs(3),
                per_attempt: vec![],
            },
            None,
        );
        let json = serde_json::to_string(&record).unwrap();
        assert!(!json.contains("timing"));
        let back: EvaluationRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back.timing, Timing::default());
        assert_eq!(back.final_verdict, Verdict::Pass);
    }
}
