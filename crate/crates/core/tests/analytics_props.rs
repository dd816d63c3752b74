use std::collections::BTreeMap;

use proptest::prelude::*;

use mutamark::analytics::{group_rates, marginal_rates, percent, rank_brittle_values, View};
use mutamark::corpus::PromptType;
use mutamark::evaluator::{AttemptRecord, EvaluationRecord, Timing, Verdict, SCHEMA_VERSION};

fn record(prompt_type: PromptType, assignment: Vec<(String, String)>, passes: &[bool]) -> EvaluationRecord {
    let verdict = |p: bool| if p { Verdict::Pass } else { Verdict::WrongOutput };
    let attempts: Vec<AttemptRecord> = passes
        .iter()
        .enumerate()
        .map(|(i, &p)| AttemptRecord {
            attempt_index: i as u32 + 1,
            temperature: 0.0,
            completion_hash: String::new(),
            verdict: verdict(p),
            original_verdict: None,
            per_input: Vec::new(),
        })
        .collect();
    EvaluationRecord {
        schema_version: SCHEMA_VERSION,
        problem_id: "t".into(),
        prompt_type,
        key: String::new(),
        assignment,
        attempt_index: passes.len() as u32,
        completion_hash: String::new(),
        per_input: Vec::new(),
        final_verdict: verdict(*passes.last().unwrap()),
        classification: None,
        attempts,
        timing: Timing::default(),
    }
}

fn record_set() -> impl Strategy<Value = Vec<EvaluationRecord>> {
    prop::collection::vec(1usize..5, 1..4).prop_flat_map(|sizes| {
        let one = (
            sizes.iter().map(|&k| 0..k).collect::<Vec<_>>(),
            prop::collection::vec(any::<bool>(), 1..4),
        );
        prop::collection::vec(one, 1..200).prop_map(|rows| {
            rows.into_iter()
                .map(|(choice, passes)| {
                    let assignment = choice
                        .iter()
                        .enumerate()
                        .map(|(p, c)| (format!("p{p}"), format!("v{c}")))
                        .collect();
                    record(PromptType::TemplateVariant, assignment, &passes)
                })
                .collect()
        })
    })
}

proptest! {
    #[test]
    fn marginals_match_recount(records in record_set()) {
        for view in [View::Final, View::ZeroShot] {
            let mut tally: BTreeMap<(String, String), (usize, usize)> = BTreeMap::new();
            for r in &records {
                let pass = view.verdict(r) == Verdict::Pass;
                for (p, v) in &r.assignment {
                    let e = tally.entry((p.clone(), v.clone())).or_default();
                    e.0 += usize::from(pass);
                    e.1 += 1;
                }
            }
            let rates = marginal_rates(&records, view).unwrap();
            let got: BTreeMap<_, _> = rates
                .iter()
                .map(|m| ((m.point_name.clone(), m.value.clone()), (m.pass_count, m.total)))
                .collect();
            prop_assert_eq!(got, tally);
            // Every value of a point sums to the record count.
            for p in records[0].assignment.iter().map(|(p, _)| p) {
                let total: usize = rates.iter().filter(|m| &m.point_name == p).map(|m| m.total).sum();
                prop_assert_eq!(total, records.len());
            }
        }
    }

    #[test]
    fn brittle_values_are_sorted_and_below(records in record_set(), threshold in 0.0f64..=1.0) {
        let rates = marginal_rates(&records, View::Final).unwrap();
        let ranked = rank_brittle_values(&rates, threshold);
        prop_assert!(ranked.iter().all(|m| m.rate < threshold));
        prop_assert_eq!(ranked.len(), rates.iter().filter(|m| m.rate < threshold).count());
        prop_assert!(ranked.windows(2).all(|w| w[0].rate <= w[1].rate));
    }

    #[test]
    fn percent_is_nearest(passed in 0usize..10_000, extra in 0usize..10_000) {
        let tested = passed + extra;
        prop_assume!(tested > 0);
        let exact = 100.0 * passed as f64 / tested as f64;
        let p = percent(passed, tested) as f64;
        prop_assert!((p - exact).abs() <= 0.5 + 1e-9);
        prop_assert!(p >= exact - 0.5);
    }

    #[test]
    fn zero_shot_never_exceeds_final(records in record_set()) {
        // Attempts stop at the first pass, so only the last can pass.
        let records: Vec<EvaluationRecord> = records
            .into_iter()
            .map(|mut r| {
                let n = r.attempts.len();
                for (i, a) in r.attempts.iter_mut().enumerate() {
                    if i + 1 < n { a.verdict = Verdict::WrongOutput; }
                }
                r
            })
            .collect();
        let f = group_rates(&records, View::Final);
        let z = group_rates(&records, View::ZeroShot);
        prop_assert!(z[0].passed <= f[0].passed);
    }
}
