//! Aggregation of evaluation records into pass rates and marginal rates.
//!
//! The marginal success rate of a value at a mutation point is the fraction
//! of passing variants among all variants in which that value appears.

mod report;

pub use report::{emit_report, read_results, Report, ReportFormat, ResultsError, DEFAULT_BRITTLE_THRESHOLD};

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::PromptType;
use crate::evaluator::{EvaluationRecord, Verdict};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AnalyticsError {
    #[error("records span more than one template (`{0}` and `{1}`)")]
    MixedTemplates(String, String),
    #[error("record `{problem_id}` / `{key}` is not a template variant")]
    NotAVariant { problem_id: String, key: String },
    #[error("record {problem_id} / {prompt_type} / `{key}` appears more than once")]
    DuplicateRecord {
        problem_id: String,
        prompt_type: PromptType,
        key: String,
    },
}

/// Which attempt's verdict counts as the outcome of a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum View {
    /// Outcome after all configured attempts.
    Final,
    /// First attempt only.
    ZeroShot,
}

impl View {
    pub fn verdict(self, record: &EvaluationRecord) -> Verdict {
        match self {
            View::Final => record.final_verdict,
            View::ZeroShot => record.zero_shot_verdict(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalRate {
    pub point_name: String,
    pub value: String,
    pub pass_count: usize,
    pub total: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRate {
    pub prompt_type: PromptType,
    pub tested: usize,
    pub passed: usize,
    pub rate: f64,
}

/// Integer percentage, rounded half up.
pub fn percent(passed: usize, tested: usize) -> u64 {
    if tested == 0 {
        return 0;
    }
    let (p, t) = (passed as u128, tested as u128);
    ((200 * p + t) / (2 * t)) as u64
}

/// Per `(point, value)` pass counts over the final records of one template.
///
/// Points are listed in declaration order and values in order of first
/// appearance.
pub fn marginal_rates(
    records: &[EvaluationRecord],
    view: View,
) -> Result<Vec<MarginalRate>, AnalyticsError> {
    let Some(first) = records.first() else {
        return Ok(Vec::new());
    };
    for record in records {
        if record.problem_id != first.problem_id {
            return Err(AnalyticsError::MixedTemplates(
                first.problem_id.clone(),
                record.problem_id.clone(),
            ));
        }
        if record.prompt_type != PromptType::TemplateVariant {
            return Err(AnalyticsError::NotAVariant {
                problem_id: record.problem_id.clone(),
                key: record.key.clone(),
            });
        }
    }

    let mut rows: Vec<MarginalRate> = Vec::new();
    // (point, value) -> index into rows, grouped by point order
    let points: Vec<&str> = first.assignment.iter().map(|(p, _)| p.as_str()).collect();
    let mut per_point: Vec<Vec<MarginalRate>> = vec![Vec::new(); points.len()];
    for record in records {
        let passed = view.verdict(record).is_pass();
        for (name, value) in &record.assignment {
            let slot = match points.iter().position(|p| p == name) {
                Some(i) => i,
                None => {
                    return Err(AnalyticsError::MixedTemplates(
                        first.problem_id.clone(),
                        record.problem_id.clone(),
                    ))
                }
            };
            let bucket = &mut per_point[slot];
            let row = match bucket.iter_mut().position(|r| &r.value == value) {
                Some(i) => &mut bucket[i],
                None => {
                    bucket.push(MarginalRate {
                        point_name: name.clone(),
                        value: value.clone(),
                        pass_count: 0,
                        total: 0,
                        rate: 0.0,
                    });
                    bucket.last_mut().expect("just pushed")
                }
            };
            row.total += 1;
            row.pass_count += usize::from(passed);
        }
    }
    for mut row in per_point.into_iter().flatten() {
        row.rate = row.pass_count as f64 / row.total as f64;
        rows.push(row);
    }
    Ok(rows)
}

/// Tested/passed counts per prompt type present in `records`, in
/// [`PromptType::ALL`] order.
pub fn group_rates(records: &[EvaluationRecord], view: View) -> Vec<GroupRate> {
    PromptType::ALL
        .iter()
        .filter_map(|&prompt_type| {
            let (tested, passed) = records
                .iter()
                .filter(|r| r.prompt_type == prompt_type)
                .fold((0, 0), |(t, p), r| (t + 1, p + usize::from(view.verdict(r).is_pass())));
            (tested > 0).then(|| GroupRate {
                prompt_type,
                tested,
                passed,
                rate: passed as f64 / tested as f64,
            })
        })
        .collect()
}

/// Values whose rate is below `threshold`, worst first; ties broken by
/// point name, then value.
pub fn rank_brittle_values(marginals: &[MarginalRate], threshold: f64) -> Vec<MarginalRate> {
    let mut brittle: Vec<MarginalRate> = marginals
        .iter()
        .filter(|m| m.rate < threshold)
        .cloned()
        .collect();
    brittle.sort_by(|a, b| {
        a.rate
            .total_cmp(&b.rate)
            .then_with(|| a.point_name.cmp(&b.point_name))
            .then_with(|| a.value.cmp(&b.value))
    });
    brittle
}

/// Rejects record sets with repeated `(problem, prompt type, key)`.
pub fn check_unique(records: &[EvaluationRecord]) -> Result<(), AnalyticsError> {
    let mut seen = HashSet::new();
    for record in records {
        if !seen.insert(record.identity()) {
            return Err(AnalyticsError::DuplicateRecord {
                problem_id: record.problem_id.clone(),
                prompt_type: record.prompt_type,
                key: record.key.clone(),
            });
        }
    }
    Ok(())
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn rounding_half_up() {
        assert_eq!(percent(115, 115), 100);
        assert_eq!(percent(84, 100), 84);
        assert_eq!(percent(33, 88), 38);
        assert_eq!(percent(3, 20), 15);
        assert_eq!(percent(1, 8), 13);
        assert_eq!(percent(0, 0), 0);
    }

    #[test]
    fn three_of_four() {
        let records: Vec<_> = (0..4)
            .map(|i| {
                let q = i.to_string();
                variant("t", &[("p", "v"), ("q", &q)], i != 0)
            })
            .collect();
        let rates = marginal_rates(&records, View::Final).unwrap();
        assert_eq!(rates[0].point_name, "p");
        assert_eq!((rates[0].pass_count, rates[0].total), (3, 4));
        assert_eq!(rates[0].rate, 0.75);
        assert_eq!(rates.len(), 5);
    }

    #[test]
    fn all_pass_is_one() {
        let records: Vec<_> = ["a", "b"]
            .iter()
            .map(|v| variant("t", &[("p", v)], true))
            .collect();
        assert!(marginal_rates(&records, View::Final)
            .unwrap()
            .iter()
            .all(|m| m.rate == 1.0));
    }

    #[test]
    fn mixed_templates_rejected() {
        let records = vec![variant("a", &[("p", "x")], true), variant("b", &[("p", "x")], true)];
        assert_eq!(
            marginal_rates(&records, View::Final).unwrap_err(),
            AnalyticsError::MixedTemplates("a".into(), "b".into())
        );
    }

    #[test]
    fn zero_shot_view_uses_first_attempt() {
        let r = record(
            "t",
            PromptType::TemplateVariant,
            "p=x",
            &[("p", "x")],
            &[Verdict::WrongOutput, Verdict::Pass],
        );
        assert_eq!(marginal_rates(std::slice::from_ref(&r), View::Final).unwrap()[0].pass_count, 1);
        assert_eq!(marginal_rates(std::slice::from_ref(&r), View::ZeroShot).unwrap()[0].pass_count, 0);
    }

    #[test]
    fn group_rates_per_type() {
        let mut records = Vec::new();
        for i in 0..4 {
            let key = i.to_string();
            records.push(record("d", PromptType::Full, &key, &[], &[Verdict::Pass]));
            let v = if i < 1 { Verdict::Pass } else { Verdict::WrongOutput };
            records.push(record("d", PromptType::MissingObjectives, &key, &[], &[v]));
        }
        let groups = group_rates(&records, View::Final);
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].prompt_type, PromptType::Full);
        assert_eq!((groups[0].tested, groups[0].passed), (4, 4));
        assert_eq!((groups[1].tested, groups[1].passed, groups[1].rate), (4, 1, 0.25));
        assert!(group_rates(&[], View::Final).is_empty());
    }

    #[test]
    fn brittle_ranking() {
        let m = |p: &str, v: &str, rate| MarginalRate {
            point_name: p.into(),
            value: v.into(),
            pass_count: 0,
            total: 1,
            rate,
        };
        let marginals = vec![m("op", "XOR", 1.0), m("op", "NAND", 0.0), m("b", "z", 0.5), m("a", "y", 0.5)];
        let ranked: Vec<_> = rank_brittle_values(&marginals, 0.9)
            .into_iter()
            .map(|m| m.value)
            .collect();
        assert_eq!(ranked, ["NAND", "y", "z"]);
        assert!(rank_brittle_values(&marginals, 0.0).is_empty());
        let equal = vec![m("b", "2", 0.5), m("a", "9", 0.5), m("a", "1", 0.5)];
        let ranked: Vec<_> = rank_brittle_values(&equal, 1.0)
            .into_iter()
            .map(|m| (m.point_name, m.value))
            .collect();
        assert_eq!(
            ranked,
            [("a".into(), "1".into()), ("a".into(), "9".into()), ("b".into(), "2".into())]
        );
    }

    #[test]
    fn duplicates_detected() {
        let r = variant("t", &[("p", "x")], true);
        assert!(check_unique(std::slice::from_ref(&r)).is_ok());
        assert!(matches!(
            check_unique(&[r.clone(), r]),
            Err(AnalyticsError::DuplicateRecord { .. })
        ));
    }
}
