//! Oracle-versus-candidate output comparison.

use std::borrow::Cow;

use crate::template::ComparisonMode;

/// Absolute tolerance for numeric tokens in [`ComparisonMode::NumericTolerant`].
pub const NUMERIC_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Comparison {
    Match,
    /// First differing line (1-based) with a short description.
    Mismatch { line: usize, description: String },
}

impl Comparison {
    pub fn is_match(&self) -> bool {
        matches!(self, Comparison::Match)
    }
}

/// Strips trailing whitespace from every line and drops trailing blank lines.
pub fn normalize(output: &[u8]) -> Vec<Cow<'_, str>> {
    let text = String::from_utf8_lossy(output);
    let mut lines: Vec<Cow<'_, str>> = match text {
        Cow::Borrowed(s) => s.split('\n').map(|l| Cow::Borrowed(l.trim_end())).collect(),
        Cow::Owned(s) => s
            .split('\n')
            .map(|l| Cow::Owned(l.trim_end().to_string()))
            .collect(),
    };
    while lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    lines
}

pub fn compare_outputs(expected: &[u8], actual: &[u8], mode: ComparisonMode) -> Comparison {
    let want = normalize(expected);
    let got = normalize(actual);
    for i in 0..want.len().max(got.len()) {
        let (w, g) = match (want.get(i), got.get(i)) {
            (Some(w), Some(g)) => (w, g),
            (Some(w), None) => {
                return mismatch(i, format!("expected `{}`, got end of output", clip(w)))
            }
            (None, Some(g)) => {
                return mismatch(i, format!("expected end of output, got `{}`", clip(g)))
            }
            (None, None) => unreachable!(),
        };
        let same = match mode {
            ComparisonMode::ExactNormalized => w == g,
            ComparisonMode::NumericTolerant => lines_match_numeric(w, g),
        };
        if !same {
            return mismatch(i, format!("expected `{}`, got `{}`", clip(w), clip(g)));
        }
    }
    Comparison::Match
}

fn mismatch(index: usize, description: String) -> Comparison {
    Comparison::Mismatch {
        line: index + 1,
        description,
    }
}

fn clip(line: &str) -> Cow<'_, str> {
    const MAX: usize = 80;
    match line.char_indices().nth(MAX) {
        Some((cut, _)) => Cow::Owned(format!("{}...", &line[..cut])),
        None => Cow::Borrowed(line),
    }
}

fn lines_match_numeric(expected: &str, actual: &str) -> bool {
    if expected == actual {
        return true;
    }
    let mut want = expected.split_whitespace();
    let mut got = actual.split_whitespace();
    loop {
        match (want.next(), got.next()) {
            (None, None) => return true,
            (Some(w), Some(g)) => {
                if w == g {
                    continue;
                }
                match (parse_finite(w), parse_finite(g)) {
                    (Some(a), Some(b)) if (a - b).abs() <= NUMERIC_TOLERANCE => {}
                    _ => return false,
                }
            }
            _ => return false,
        }
    }
}

fn parse_finite(token: &str) -> Option<f64> {
    token.parse::<f64>().ok().filter(|v| v.is_finite())
}
