use std::fmt::Write as _;

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use super::{
    check_unique, group_rates, marginal_rates, percent, rank_brittle_values, AnalyticsError,
    GroupRate, MarginalRate, View,
};
use crate::corpus::PromptType;
use crate::evaluator::{EvaluationRecord, ProbeClassification, SCHEMA_VERSION};

pub const DEFAULT_BRITTLE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportFormat {
    Jsonl,
    Csv,
    Markdown,
}

#[derive(Debug, Error)]
pub enum ResultsError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: schema version {found}, expected {SCHEMA_VERSION}")]
    SchemaVersion { line: usize, found: Value },
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
}

/// Parses a results file. A trailing `{"aborted": ...}` object, if any, is
/// returned separately.
pub fn read_results(text: &str) -> Result<(Vec<EvaluationRecord>, Option<Value>), ResultsError> {
    let mut records = Vec::new();
    let mut trailer = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| ResultsError::Parse {
            line: line_no,
            message: e.to_string(),
        };
        let value: Value = serde_json::from_str(line).map_err(parse_err)?;
        if value.get("aborted").is_some() {
            trailer = Some(value);
            continue;
        }
        match value.get("schema_version") {
            Some(v) if v.as_u64() == Some(SCHEMA_VERSION as u64) => {}
            other => {
                return Err(ResultsError::SchemaVersion {
                    line: line_no,
                    found: other.cloned().unwrap_or(Value::Null),
                })
            }
        }
        records.push(serde_json::from_value(value).map_err(parse_err)?);
    }
    check_unique(&records)?;
    Ok((records, trailer))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TemplateMarginals {
    pub problem_id: String,
    pub final_rates: Vec<MarginalRate>,
    pub zero_shot_rates: Vec<MarginalRate>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationCounts {
    pub prompt_type: PromptType,
    pub memorized_original: usize,
    pub generalized: usize,
    pub passes_both: usize,
    pub fails_both: usize,
}

/// Everything a rendered report shows, computed once from a record set.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub records: Vec<EvaluationRecord>,
    pub groups: Vec<GroupRate>,
    pub zero_shot_groups: Vec<GroupRate>,
    pub templates: Vec<TemplateMarginals>,
    pub classifications: Vec<ClassificationCounts>,
    pub brittle_threshold: f64,
    /// `(template, rate)` pairs below the threshold, worst first.
    pub brittle: Vec<(String, MarginalRate)>,
}

impl Report {
    pub fn build(records: Vec<EvaluationRecord>, brittle_threshold: f64) -> Result<Self, AnalyticsError> {
        check_unique(&records)?;
        let mut template_ids: Vec<&str> = records
            .iter()
            .filter(|r| r.prompt_type == PromptType::TemplateVariant)
            .map(|r| r.problem_id.as_str())
            .collect();
        template_ids.sort_unstable();
        template_ids.dedup();

        let mut templates = Vec::new();
        let mut brittle = Vec::new();
        for id in template_ids {
            let subset: Vec<EvaluationRecord> = records
                .iter()
                .filter(|r| r.prompt_type == PromptType::TemplateVariant && r.problem_id == id)
                .cloned()
                .collect();
            let final_rates = marginal_rates(&subset, View::Final)?;
            brittle.extend(
                rank_brittle_values(&final_rates, brittle_threshold)
                    .into_iter()
                    .map(|m| (id.to_string(), m)),
            );
            templates.push(TemplateMarginals {
                problem_id: id.to_string(),
                zero_shot_rates: marginal_rates(&subset, View::ZeroShot)?,
                final_rates,
            });
        }
        brittle.sort_by(|(ta, a), (tb, b)| {
            a.rate
                .total_cmp(&b.rate)
                .then_with(|| ta.cmp(tb))
                .then_with(|| a.point_name.cmp(&b.point_name))
                .then_with(|| a.value.cmp(&b.value))
        });

        let classifications = PromptType::ALL
            .iter()
            .filter_map(|&prompt_type| {
                let mut counts = ClassificationCounts {
                    prompt_type,
                    memorized_original: 0,
                    generalized: 0,
                    passes_both: 0,
                    fails_both: 0,
                };
                let mut any = false;
                for r in records.iter().filter(|r| r.prompt_type == prompt_type) {
                    let Some(c) = r.classification else { continue };
                    any = true;
                    *match c {
                        ProbeClassification::MemorizedOriginal => &mut counts.memorized_original,
                        ProbeClassification::Generalized => &mut counts.generalized,
                        ProbeClassification::PassesBoth => &mut counts.passes_both,
                        ProbeClassification::FailsBoth => &mut counts.fails_both,
                    } += 1;
                }
                any.then_some(counts)
            })
            .collect();

        Ok(Report {
            groups: group_rates(&records, View::Final),
            zero_shot_groups: group_rates(&records, View::ZeroShot),
            records,
            templates,
            classifications,
            brittle_threshold,
            brittle,
        })
    }
}

pub fn emit_report(report: &Report, format: ReportFormat) -> String {
    match format {
        ReportFormat::Jsonl => jsonl(report),
        ReportFormat::Csv => csv_report(report),
        ReportFormat::Markdown => markdown(report),
    }
}

fn pct(passed: usize, total: usize) -> String {
    format!("{}%", percent(passed, total))
}

fn markdown(report: &Report) -> String {
    let mut out = String::new();
    let w = &mut out;
    writeln!(w, "# Evaluation report\n").unwrap();
    writeln!(w, "Records: {}\n", report.records.len()).unwrap();

    for (title, groups) in [
        ("Pass rates (all attempts)", &report.groups),
        ("Pass rates (first attempt only)", &report.zero_shot_groups),
    ] {
        writeln!(w, "## {title}\n").unwrap();
        writeln!(w, "| Prompt Type | Tested | Passed | Pass% |").unwrap();
        writeln!(w, "| :--- | ---: | ---: | ---: |").unwrap();
        for g in groups {
            writeln!(
                w,
                "| {} | {} | {} | {} |",
                g.prompt_type.title(),
                g.tested,
                g.passed,
                pct(g.passed, g.tested)
            )
            .unwrap();
        }
        writeln!(w).unwrap();
    }

    if !report.classifications.is_empty() {
        writeln!(w, "## Probe classifications\n").unwrap();
        writeln!(
            w,
            "| Prompt Type | Memorized original | Generalized | Passes both | Fails both |"
        )
        .unwrap();
        writeln!(w, "| :--- | ---: | ---: | ---: | ---: |").unwrap();
        for c in &report.classifications {
            writeln!(
                w,
                "| {} | {} | {} | {} | {} |",
                c.prompt_type.title(),
                c.memorized_original,
                c.generalized,
                c.passes_both,
                c.fails_both
            )
            .unwrap();
        }
        writeln!(w).unwrap();
    }

    for t in &report.templates {
        writeln!(w, "## Marginal success rates: {}\n", t.problem_id).unwrap();
        writeln!(w, "| Point | Value | Passed | Total | Rate | First-attempt rate |").unwrap();
        writeln!(w, "| :--- | :--- | ---: | ---: | ---: | ---: |").unwrap();
        for (m, z) in t.final_rates.iter().zip(&t.zero_shot_rates) {
            writeln!(
                w,
                "| {} | {} | {} | {} | {} | {} |",
                cell(&m.point_name),
                cell(&m.value),
                m.pass_count,
                m.total,
                pct(m.pass_count, m.total),
                pct(z.pass_count, z.total)
            )
            .unwrap();
        }
        writeln!(w).unwrap();
    }

    if !report.templates.is_empty() {
        writeln!(
            w,
            "## Brittle values (rate below {}%)\n",
            (report.brittle_threshold * 100.0).round()
        )
        .unwrap();
        if report.brittle.is_empty() {
            writeln!(w, "None.\n").unwrap();
        } else {
            writeln!(w, "| Template | Point | Value | Rate |").unwrap();
            writeln!(w, "| :--- | :--- | :--- | ---: |").unwrap();
            for (t, m) in &report.brittle {
                writeln!(
                    w,
                    "| {} | {} | {} | {} |",
                    t,
                    cell(&m.point_name),
                    cell(&m.value),
                    pct(m.pass_count, m.total)
                )
                .unwrap();
            }
            writeln!(w).unwrap();
        }
        writeln!(
            w,
            "Marginal success rate: among all variants of a template in which a value \
             appears at a mutation point, the fraction that passed."
        )
        .unwrap();
    }
    out
}

/// Escapes characters that would break a table cell.
fn cell(text: &str) -> String {
    text.replace('\\', "\\\\")
        .replace('|', "\\|")
        .replace('\n', " ")
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum JsonRow<'a> {
    Group {
        view: View,
        #[serde(flatten)]
        rate: &'a GroupRate,
    },
    Marginal {
        view: View,
        problem_id: &'a str,
        #[serde(flatten)]
        rate: &'a MarginalRate,
    },
    Classification(&'a ClassificationCounts),
    Brittle {
        problem_id: &'a str,
        #[serde(flatten)]
        rate: &'a MarginalRate,
    },
}

fn jsonl(report: &Report) -> String {
    let mut rows = Vec::new();
    for (view, groups) in [(View::Final, &report.groups), (View::ZeroShot, &report.zero_shot_groups)] {
        rows.extend(groups.iter().map(|rate| JsonRow::Group { view, rate }));
    }
    for t in &report.templates {
        for (view, rates) in [(View::Final, &t.final_rates), (View::ZeroShot, &t.zero_shot_rates)] {
            rows.extend(rates.iter().map(|rate| JsonRow::Marginal {
                view,
                problem_id: &t.problem_id,
                rate,
            }));
        }
    }
    rows.extend(report.classifications.iter().map(JsonRow::Classification));
    rows.extend(report.brittle.iter().map(|(t, rate)| JsonRow::Brittle {
        problem_id: t,
        rate,
    }));
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(&row).expect("report rows serialize"));
        out.push('\n');
    }
    out
}

/// One row per record, then one per group and per marginal rate (final
/// view). Group rows leave the problem id empty.
fn csv_report(report: &Report) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let header = [
        "problem_id",
        "prompt_type",
        "variant_key",
        "point_name",
        "value",
        "pass_count",
        "total",
        "rate",
    ];
    writer.write_record(header).unwrap();
    for r in &report.records {
        let passed = usize::from(r.final_verdict.is_pass());
        writer
            .write_record([
                r.problem_id.as_str(),
                r.prompt_type.slug(),
                &r.key,
                "",
                "",
                &passed.to_string(),
                "1",
                &(passed as f64).to_string(),
            ])
            .unwrap();
    }
    for g in &report.groups {
        writer
            .write_record([
                "",
                g.prompt_type.slug(),
                "",
                "",
                "",
                &g.passed.to_string(),
                &g.tested.to_string(),
                &g.rate.to_string(),
            ])
            .unwrap();
    }
    for t in &report.templates {
        for m in &t.final_rates {
            writer
                .write_record([
                    t.problem_id.as_str(),
                    PromptType::TemplateVariant.slug(),
                    "",
                    &m.point_name,
                    &m.value,
                    &m.pass_count.to_string(),
                    &m.total.to_string(),
                    &m.rate.to_string(),
                ])
                .unwrap();
        }
    }
    String::from_utf8(writer.into_inner().expect("in-memory writer")).expect("utf-8 fields")
}
