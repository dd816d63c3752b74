//! Sectioned problem statements and the prompt ablations applied to them.
//!
//! Prompt text is assembled from the document's sections in a fixed order,
//! separated by blank lines, one statement sentence per line. No headings or
//! connective text are added, so every line of every ablated prompt appears
//! verbatim in the source document.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AblationError {
    #[error("document `{0}` has no specification sections to strip")]
    NothingToStrip(String),
    #[error("document `{id}` has no objective substitution labelled `{label}`")]
    UnknownSubstitution { id: String, label: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSubstitution {
    pub label: String,
    pub objective: String,
    /// Name of the program under `oracle/variants/` defining the new ground
    /// truth. Defaults to the label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_variant: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub oracle_args: Vec<String>,
}

impl ObjectiveSubstitution {
    pub fn oracle_variant(&self) -> &str {
        self.oracle_variant.as_deref().unwrap_or(&self.label)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemDocument {
    #[serde(default)]
    pub id: String,
    pub title: String,
    pub statement_sentences: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_spec: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_spec: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraints: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub examples_text: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objective_substitutions: Vec<ObjectiveSubstitution>,
    /// Marks statements paraphrased from fragments rather than copied from
    /// an original source.
    #[serde(default)]
    pub reconstruction: bool,
}

impl ProblemDocument {
    fn compose(&self, objective: Option<&str>, with_specs: bool) -> String {
        let mut sections: Vec<&str> = Vec::new();
        let sentences = self.statement_sentences.join("\n");
        if !self.title.is_empty() {
            sections.push(&self.title);
        }
        if !sentences.is_empty() {
            sections.push(&sentences);
        }
        sections.extend(objective);
        if with_specs {
            sections.extend(self.spec_sections());
        }
        sections.join("\n\n")
    }

    fn spec_sections(&self) -> impl Iterator<Item = &str> {
        [
            &self.input_spec,
            &self.output_spec,
            &self.constraints,
            &self.examples_text,
        ]
        .into_iter()
        .filter_map(|s| s.as_deref())
    }

    pub fn has_specifications(&self) -> bool {
        self.spec_sections().next().is_some()
    }

    /// The unablated prompt.
    pub fn full_text(&self) -> String {
        self.compose(self.objective.as_deref(), true)
    }

    /// The document with every specification section removed.
    pub fn strip_specifications(&self) -> ProblemDocument {
        ProblemDocument {
            input_spec: None,
            output_spec: None,
            constraints: None,
            examples_text: None,
            ..self.clone()
        }
    }

    /// Title, statement and objective only.
    pub fn ablate_missing_specifications(&self) -> Result<String, AblationError> {
        if !self.has_specifications() {
            return Err(AblationError::NothingToStrip(self.id.clone()));
        }
        Ok(self.compose(self.objective.as_deref(), false))
    }

    /// Exactly the first statement sentence.
    pub fn ablate_first_sentence(&self) -> &str {
        self.statement_sentences
            .first()
            .map(String::as_str)
            .unwrap_or_default()
    }

    pub fn substitution(&self, label: &str) -> Result<&ObjectiveSubstitution, AblationError> {
        self.objective_substitutions
            .iter()
            .find(|s| s.label == label)
            .ok_or_else(|| AblationError::UnknownSubstitution {
                id: self.id.clone(),
                label: label.to_string(),
            })
    }

    /// The full prompt with the objective replaced by a substitution.
    pub fn ablate_substitute_objective(
        &self,
        label: &str,
    ) -> Result<(String, &ObjectiveSubstitution), AblationError> {
        let substitution = self.substitution(label)?;
        Ok((self.compose(Some(&substitution.objective), true), substitution))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn students() -> ProblemDocument {
        ProblemDocument {
            id: "hr057".into(),
            title: "Finding the Average".into(),
            statement_sentences: vec![
                "Dr. John Wesley has a spreadsheet containing a list of student IDs, marks, class, and name".into(),
                "The columns can be in any order.".into(),
            ],
            objective: Some("Your task is to print the average of the marks.".into()),
            input_spec: Some("The first line contains N.\nThe second line contains the column names.".into()),
            output_spec: Some("Print the average marks, correct to 2 decimal places.".into()),
            constraints: Some("0 < N <= 100".into()),
            examples_text: None,
            objective_substitutions: vec![ObjectiveSubstitution {
                label: "median".into(),
                objective: "Your task is to print the median of the marks.".into(),
                oracle_variant: None,
                oracle_args: vec![],
            }],
            reconstruction: true,
        }
    }

    #[test]
    fn missing_specifications_drops_spec_text() {
        let doc = students();
        let text = doc.ablate_missing_specifications().unwrap();
        assert!(text.contains("average of the marks"));
        for gone in ["The first line", "column names", "decimal places", "0 < N"] {
            assert!(!text.contains(gone), "{gone}");
        }
    }

    #[test]
    fn nothing_to_strip() {
        let doc = students().strip_specifications();
        assert_eq!(
            doc.ablate_missing_specifications().unwrap_err(),
            AblationError::NothingToStrip("hr057".into())
        );
    }

    #[test]
    fn stripping_is_idempotent() {
        let doc = students();
        let once = doc.strip_specifications();
        assert_eq!(once.full_text(), doc.ablate_missing_specifications().unwrap());
        assert_eq!(once.strip_specifications(), once);
    }

    #[test]
    fn first_sentence() {
        assert_eq!(
            students().ablate_first_sentence(),
            "Dr. John Wesley has a spreadsheet containing a list of student IDs, marks, class, and name"
        );
        let single = ProblemDocument {
            statement_sentences: vec!["Only one.".into()],
            ..students()
        };
        assert_eq!(single.ablate_first_sentence(), "Only one.");
    }

    #[test]
    fn substitution() {
        let doc = students();
        let (text, sub) = doc.ablate_substitute_objective("median").unwrap();
        assert!(text.contains("median of the marks"));
        assert!(!text.contains("average of the marks"));
        assert_eq!(sub.oracle_variant(), "median");
        assert!(matches!(
            doc.ablate_substitute_objective("mode"),
            Err(AblationError::UnknownSubstitution { .. })
        ));
    }

    #[test]
    fn identity_substitution() {
        let mut doc = students();
        doc.objective_substitutions.push(ObjectiveSubstitution {
            label: "same".into(),
            objective: doc.objective.clone().unwrap(),
            oracle_variant: Some("main".into()),
            oracle_args: vec![],
        });
        assert_eq!(doc.ablate_substitute_objective("same").unwrap().0, doc.full_text());
    }

    #[test]
    fn ablations_do_not_fabricate_lines() {
        let doc = students();
        let source = serde_json::to_string(&doc).unwrap();
        let source = source.replace("\\n", "\n");
        for text in [
            doc.full_text(),
            doc.ablate_missing_specifications().unwrap(),
            doc.ablate_first_sentence().to_string(),
        ] {
            for line in text.lines().filter(|l| !l.is_empty()) {
                assert!(source.contains(line), "{line}");
            }
        }
    }
}
