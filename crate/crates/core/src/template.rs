//! Mutation-point templates: parsing, variant-space expansion and rendering.
//!
//! A template body is UTF-8 text containing placeholders of the form
//! `{{name}}`, where `name` matches `[a-z0-9_]{1,64}`. The two-character
//! sequence `\{{` is an escape for a literal `{{`. Any other `{{` that is not
//! followed by an identifier and `}}` is a [`TemplateError::MalformedPlaceholder`].

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Variant cap applied when the caller does not override it.
pub const DEFAULT_VARIANT_CAP: usize = 512;

const MAX_NAME_LEN: usize = 64;
const MAX_VALUE_LEN: usize = 256;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("placeholder `{{{{{0}}}}}` is not declared in the manifest")]
    UndeclaredPlaceholder(String),
    #[error("mutation point `{0}` is declared but never used in the body")]
    UnusedPoint(String),
    #[error("mutation point `{0}` is declared more than once")]
    DuplicatePoint(String),
    #[error("mutation point `{0}` has an empty value list")]
    EmptyValueList(String),
    #[error("mutation point `{point}` lists value `{value}` more than once")]
    DuplicateValue { point: String, value: String },
    #[error("invalid mutation point name `{0}`")]
    InvalidPointName(String),
    #[error("value of mutation point `{point}` must be 1-256 characters, got {len}")]
    InvalidValue { point: String, len: usize },
    #[error("malformed placeholder at byte {offset}")]
    MalformedPlaceholder { offset: usize },
    #[error("template `{template}` has {size} variants, exceeding the cap of {cap}")]
    VariantCapExceeded {
        template: String,
        size: u128,
        cap: usize,
    },
    #[error("variant cap must be at least 1")]
    ZeroCap,
    #[error("variant belongs to template `{found}`, not `{expected}`")]
    ForeignVariant { expected: String, found: String },
    #[error("variant assignment does not match the template's points")]
    InvalidAssignment,
    #[error("cannot parse variant key `{0}`")]
    BadVariantKey(String),
}

/// How candidate output is compared against oracle output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ComparisonMode {
    #[default]
    ExactNormalized,
    NumericTolerant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationPoint {
    name: String,
    values: Vec<String>,
}

impl MutationPoint {
    pub fn new(name: impl Into<String>, values: Vec<String>) -> Result<Self, TemplateError> {
        let name = name.into();
        if !is_identifier(&name) {
            return Err(TemplateError::InvalidPointName(name));
        }
        if values.is_empty() {
            return Err(TemplateError::EmptyValueList(name));
        }
        let mut seen = HashSet::new();
        for value in &values {
            let len = value.chars().count();
            if len == 0 || len > MAX_VALUE_LEN {
                return Err(TemplateError::InvalidValue { point: name, len });
            }
            if !seen.insert(value.as_str()) {
                return Err(TemplateError::DuplicateValue {
                    point: name,
                    value: value.clone(),
                });
            }
        }
        Ok(Self { name, values })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn values(&self) -> &[String] {
        &self.values
    }
}

pub(crate) fn is_identifier(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= MAX_NAME_LEN
        && name
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Placeholder(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProblemTemplate {
    id: String,
    body: String,
    segments: Vec<Segment>,
    points: Vec<MutationPoint>,
    comparison_mode: ComparisonMode,
}

impl ProblemTemplate {
    pub fn id(&self) -> &str {
        &self.id
    }

    /// Raw body text as read from disk.
    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn points(&self) -> &[MutationPoint] {
        &self.points
    }

    pub fn comparison_mode(&self) -> ComparisonMode {
        self.comparison_mode
    }

    /// Number of variants in the full Cartesian product, or `None` on overflow.
    pub fn variant_space_size(&self) -> Option<u128> {
        self.points
            .iter()
            .try_fold(1u128, |acc, p| acc.checked_mul(p.values.len() as u128))
    }

    fn point_index(&self, name: &str) -> Option<usize> {
        self.points.iter().position(|p| p.name == name)
    }
}

/// Parses a template body against its declared mutation points.
pub fn parse_template(
    id: impl Into<String>,
    source_text: &str,
    points: Vec<MutationPoint>,
    comparison_mode: ComparisonMode,
) -> Result<ProblemTemplate, TemplateError> {
    let mut names = HashSet::new();
    for p in &points {
        if !names.insert(p.name.as_str()) {
            return Err(TemplateError::DuplicatePoint(p.name.clone()));
        }
    }
    let index: HashMap<&str, usize> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (p.name.as_str(), i))
        .collect();

    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut used = BTreeSet::new();
    let bytes = source_text.as_bytes();
    let mut i = 0;
    let mut lit_start = 0;
    while i < bytes.len() {
        if bytes[i] == b'\\' && bytes[i + 1..].starts_with(b"{{") {
            literal.push_str(&source_text[lit_start..i]);
            literal.push_str("{{");
            i += 3;
            lit_start = i;
        } else if bytes[i..].starts_with(b"{{") {
            let name_start = i + 2;
            let name_len = bytes[name_start..]
                .iter()
                .take_while(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || **b == b'_')
                .count();
            let name_end = name_start + name_len;
            if name_len == 0
                || name_len > MAX_NAME_LEN
                || !bytes[name_end..].starts_with(b"}}")
            {
                return Err(TemplateError::MalformedPlaceholder { offset: i });
            }
            let name = &source_text[name_start..name_end];
            let Some(&point) = index.get(name) else {
                return Err(TemplateError::UndeclaredPlaceholder(name.to_string()));
            };
            literal.push_str(&source_text[lit_start..i]);
            if !literal.is_empty() {
                segments.push(Segment::Literal(std::mem::take(&mut literal)));
            }
            segments.push(Segment::Placeholder(point));
            used.insert(point);
            i = name_end + 2;
            lit_start = i;
        } else {
            i += 1;
        }
    }
    literal.push_str(&source_text[lit_start..]);
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }

    if let Some(unused) = (0..points.len()).find(|i| !used.contains(i)) {
        return Err(TemplateError::UnusedPoint(points[unused].name.clone()));
    }

    Ok(ProblemTemplate {
        id: id.into(),
        body: source_text.to_string(),
        segments,
        points,
        comparison_mode,
    })
}

/// One full assignment of values to the points of a template.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Variant {
    template_id: String,
    /// Value index per point, in declaration order.
    choice: Vec<usize>,
    assignment: Vec<(String, String)>,
}

impl Variant {
    fn from_choice(template: &ProblemTemplate, choice: Vec<usize>) -> Self {
        let assignment = template
            .points
            .iter()
            .zip(&choice)
            .map(|(p, &c)| (p.name.clone(), p.values[c].clone()))
            .collect();
        Self {
            template_id: template.id.clone(),
            choice,
            assignment,
        }
    }

    /// Builds a variant from explicit `(point, value)` pairs, validating it
    /// against the template.
    pub fn from_assignment(
        template: &ProblemTemplate,
        assignment: &[(String, String)],
    ) -> Result<Self, TemplateError> {
        if assignment.len() != template.points.len() {
            return Err(TemplateError::InvalidAssignment);
        }
        let mut choice = vec![usize::MAX; template.points.len()];
        for (name, value) in assignment {
            let pi = template
                .point_index(name)
                .ok_or(TemplateError::InvalidAssignment)?;
            if choice[pi] != usize::MAX {
                return Err(TemplateError::InvalidAssignment);
            }
            choice[pi] = template.points[pi]
                .values
                .iter()
                .position(|v| v == value)
                .ok_or(TemplateError::InvalidAssignment)?;
        }
        Ok(Self::from_choice(template, choice))
    }

    pub fn template_id(&self) -> &str {
        &self.template_id
    }

    /// `(point, value)` pairs in point declaration order.
    pub fn assignment(&self) -> &[(String, String)] {
        &self.assignment
    }

    pub fn value_of(&self, point: &str) -> Option<&str> {
        self.assignment
            .iter()
            .find(|(n, _)| n == point)
            .map(|(_, v)| v.as_str())
    }

    /// Canonical `name=value;name=value` key. `\`, `;` and `=` inside values
    /// are backslash-escaped so the key is injective.
    pub fn key(&self) -> String {
        let mut out = String::new();
        for (i, (name, value)) in self.assignment.iter().enumerate() {
            if i > 0 {
                out.push(';');
            }
            out.push_str(name);
            out.push('=');
            for c in value.chars() {
                if matches!(c, '\\' | ';' | '=') {
                    out.push('\\');
                }
                out.push(c);
            }
        }
        out
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

/// Reconstructs a variant from its canonical key.
pub fn parse_variant_key(template: &ProblemTemplate, key: &str) -> Result<Variant, TemplateError> {
    let bad = || TemplateError::BadVariantKey(key.to_string());
    let mut pairs = Vec::new();
    if !key.is_empty() {
        let mut current = String::new();
        let mut fields = Vec::new();
        let mut chars = key.chars();
        while let Some(c) = chars.next() {
            match c {
                '\\' => current.push(chars.next().ok_or_else(bad)?),
                ';' => fields.push(std::mem::take(&mut current)),
                // `=` only appears unescaped as the name separator, and names
                // cannot contain escapes, so mark it with a sentinel.
                '=' => current.push('\u{0}'),
                _ => current.push(c),
            }
        }
        fields.push(current);
        for field in fields {
            let (name, value) = field.split_once('\u{0}').ok_or_else(bad)?;
            pairs.push((name.to_string(), value.to_string()));
        }
    }
    Variant::from_assignment(template, &pairs).map_err(|_| bad())
}

/// Optional seeded sampling for [`expand`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    pub count: usize,
    pub seed: u64,
}

/// Enumerates the variant space of `template`.
///
/// Without sampling the full Cartesian product is returned, first point
/// varying slowest. With sampling, `min(count, cap, size)` distinct variants
/// are drawn with a seeded generator and returned in the same lexicographic
/// order.
pub fn expand(
    template: &ProblemTemplate,
    cap: usize,
    sample: Option<Sample>,
) -> Result<Vec<Variant>, TemplateError> {
    if cap == 0 {
        return Err(TemplateError::ZeroCap);
    }
    let size = template.variant_space_size();
    match sample {
        None => {
            let size = size.unwrap_or(u128::MAX);
            if size > cap as u128 {
                return Err(TemplateError::VariantCapExceeded {
                    template: template.id.clone(),
                    size,
                    cap,
                });
            }
            Ok((0..size as usize)
                .map(|i| Variant::from_choice(template, decode_index(template, i)))
                .collect())
        }
        Some(Sample { count, seed }) => {
            let size = size
                .filter(|s| *s <= usize::MAX as u128)
                .ok_or(TemplateError::VariantCapExceeded {
                    template: template.id.clone(),
                    size: size.unwrap_or(u128::MAX),
                    cap,
                })? as usize;
            let amount = count.min(cap).min(size);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = rand::seq::index::sample(&mut rng, size, amount).into_vec();
            picked.sort_unstable();
            Ok(picked
                .into_iter()
                .map(|i| Variant::from_choice(template, decode_index(template, i)))
                .collect())
        }
    }
}

/// Mixed-radix decode of a lexicographic index, last point fastest.
fn decode_index(template: &ProblemTemplate, mut index: usize) -> Vec<usize> {
    let mut choice = vec![0; template.points.len()];
    for (slot, point) in choice.iter_mut().zip(&template.points).rev() {
        let radix = point.values.len();
        *slot = index % radix;
        index /= radix;
    }
    choice
}

/// Substitutes a variant's values into the template body. Values are inserted
/// literally and never re-scanned.
pub fn render(template: &ProblemTemplate, variant: &Variant) -> Result<String, TemplateError> {
    if variant.template_id != template.id {
        return Err(TemplateError::ForeignVariant {
            expected: template.id.clone(),
            found: variant.template_id.clone(),
        });
    }
    if variant.choice.len() != template.points.len()
        || variant
            .choice
            .iter()
            .zip(&template.points)
            .any(|(&c, p)| c >= p.values.len())
    {
        return Err(TemplateError::InvalidAssignment);
    }
    let mut out = String::with_capacity(template.body.len());
    for segment in &template.segments {
        match segment {
            Segment::Literal(text) => out.push_str(text),
            Segment::Placeholder(i) => {
                out.push_str(&template.points[*i].values[variant.choice[*i]])
            }
        }
    }
    Ok(out)
}
