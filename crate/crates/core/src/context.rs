//! Feature schemas and context encoding.
//!
//! A raw request (a flat attribute map) is projected into a fine context
//! block (one-hot categoricals plus raw numerics) and a coarse block (merged
//! categories and binned numerics). The model consumes their concatenation.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Current schema document version.
pub const SCHEMA_VERSION: u32 = 1;

/// Name of the slot that receives unseen categorical values.
pub const OTHER_CATEGORY: &str = "__other__";

/// Value substituted for an absent nullable categorical feature.
pub const MISSING_CATEGORY: &str = "__missing__";

/// A flat JSON attribute map, as received from a caller.
pub type RawRequest = BTreeMap<String, Value>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ContextError {
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("invalid value for feature `{feature}`: {reason}")]
    InvalidValue { feature: String, reason: String },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionError { expected: usize, actual: usize },
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    Categorical {
        categories: Vec<String>,
        /// fine category -> coarse category
        coarse_merge: BTreeMap<String, String>,
        /// Reserve an extra fine and coarse slot for values outside `categories`.
        #[serde(default = "default_true")]
        other_slot: bool,
    },
    Numeric {
        bin_edges: Vec<f64>,
        /// Multiplier applied to the raw value in the fine block.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scale: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDescriptor {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
    #[serde(default)]
    pub nullable: bool,
}

impl FeatureDescriptor {
    pub fn categorical<S: Into<String>>(
        name: S,
        categories: &[&str],
        coarse_merge: &[(&str, &str)],
    ) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Categorical {
                categories: categories.iter().map(|c| c.to_string()).collect(),
                coarse_merge: coarse_merge
                    .iter()
                    .map(|(f, c)| (f.to_string(), c.to_string()))
                    .collect(),
                other_slot: true,
            },
            nullable: false,
        }
    }

    pub fn numeric<S: Into<String>>(name: S, bin_edges: &[f64]) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Numeric {
                bin_edges: bin_edges.to_vec(),
                scale: None,
            },
            nullable: false,
        }
    }

    pub fn without_other_slot(mut self) -> Self {
        if let FeatureKind::Categorical { other_slot, .. } = &mut self.kind {
            *other_slot = false;
        }
        self
    }

    pub fn nullable(mut self) -> Self {
        self.nullable = true;
        self
    }
}

/// Per-feature layout, derived once from the descriptor.
#[derive(Debug, Clone)]
enum Layout {
    Categorical {
        fine_index: HashMap<String, usize>,
        fine_len: usize,
        coarse_of_fine: Vec<usize>,
        coarse_len: usize,
        other: Option<usize>,
    },
    Numeric {
        edges: Vec<f64>,
        scale: f64,
        /// Extra coarse slot for a missing value (nullable only).
        missing_bin: Option<usize>,
    },
}

impl Layout {
    fn fine_len(&self) -> usize {
        match self {
            Layout::Categorical { fine_len, .. } => *fine_len,
            Layout::Numeric { .. } => 1,
        }
    }

    fn coarse_len(&self) -> usize {
        match self {
            Layout::Categorical { coarse_len, .. } => *coarse_len,
            Layout::Numeric {
                edges, missing_bin, ..
            } => edges.len() + 1 + usize::from(missing_bin.is_some()),
        }
    }
}

/// An immutable, validated feature schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "SchemaDocument", into = "SchemaDocument")]
pub struct FeatureSchema {
    features: Vec<FeatureDescriptor>,
    layouts: Vec<Layout>,
    fine_dim: usize,
    coarse_dim: usize,
}

#[derive(Clone, Serialize, Deserialize)]
struct SchemaDocument {
    schema_version: u32,
    features: Vec<FeatureDescriptor>,
}

impl TryFrom<SchemaDocument> for FeatureSchema {
    type Error = ContextError;

    fn try_from(doc: SchemaDocument) -> Result<Self, ContextError> {
        if doc.schema_version != SCHEMA_VERSION {
            return Err(ContextError::InvalidSchema(format!(
                "unsupported schema_version {}",
                doc.schema_version
            )));
        }
        Self::new(doc.features)
    }
}

impl From<FeatureSchema> for SchemaDocument {
    fn from(schema: FeatureSchema) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            features: schema.features,
        }
    }
}

impl FeatureSchema {
    pub fn new(features: Vec<FeatureDescriptor>) -> Result<Self, ContextError> {
        if features.is_empty() {
            return Err(ContextError::InvalidSchema("schema has no features".into()));
        }
        let mut seen = std::collections::HashSet::new();
        let mut layouts = Vec::with_capacity(features.len());
        for feature in &features {
            if !seen.insert(feature.name.as_str()) {
                return Err(ContextError::InvalidSchema(format!(
                    "duplicate feature `{}`",
                    feature.name
                )));
            }
            layouts.push(Self::layout_for(feature)?);
        }
        let fine_dim = layouts.iter().map(Layout::fine_len).sum();
        let coarse_dim = layouts.iter().map(Layout::coarse_len).sum();
        Ok(Self {
            features,
            layouts,
            fine_dim,
            coarse_dim,
        })
    }

    fn layout_for(feature: &FeatureDescriptor) -> Result<Layout, ContextError> {
        let invalid =
            |msg: String| ContextError::InvalidSchema(format!("`{}`: {msg}", feature.name));
        match &feature.kind {
            FeatureKind::Categorical {
                categories,
                coarse_merge,
                other_slot,
            } => {
                if categories.is_empty() {
                    return Err(invalid("no categories".into()));
                }
                let mut fine_index = HashMap::new();
                for (i, c) in categories.iter().enumerate() {
                    if c == OTHER_CATEGORY {
                        return Err(invalid(format!("`{OTHER_CATEGORY}` is reserved")));
                    }
                    if fine_index.insert(c.clone(), i).is_some() {
                        return Err(invalid(format!("duplicate category `{c}`")));
                    }
                }
                if coarse_merge.len() != categories.len() {
                    return Err(invalid(
                        "coarse_merge must map every category exactly once".into(),
                    ));
                }
                // Coarse slots are ordered by first appearance in category order.
                let mut coarse_ids: Vec<&str> = Vec::new();
                let mut coarse_of_fine = Vec::with_capacity(categories.len() + 1);
                for c in categories {
                    let target = coarse_merge.get(c).ok_or_else(|| {
                        invalid(format!("category `{c}` missing from coarse_merge"))
                    })?;
                    let idx = match coarse_ids.iter().position(|t| *t == target.as_str()) {
                        Some(i) => i,
                        None => {
                            coarse_ids.push(target);
                            coarse_ids.len() - 1
                        }
                    };
                    coarse_of_fine.push(idx);
                }
                let mut fine_len = categories.len();
                let mut coarse_len = coarse_ids.len();
                let other = if *other_slot {
                    coarse_of_fine.push(coarse_len);
                    fine_len += 1;
                    coarse_len += 1;
                    Some(fine_len - 1)
                } else {
                    None
                };
                Ok(Layout::Categorical {
                    fine_index,
                    fine_len,
                    coarse_of_fine,
                    coarse_len,
                    other,
                })
            }
            FeatureKind::Numeric { bin_edges, scale } => {
                if bin_edges.is_empty() {
                    return Err(invalid(
                        "numeric feature needs at least one bin edge".into(),
                    ));
                }
                if bin_edges.iter().any(|e| !e.is_finite()) {
                    return Err(invalid("bin edges must be finite".into()));
                }
                if bin_edges.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(invalid("bin edges must be strictly ascending".into()));
                }
                let scale = scale.unwrap_or(1.0);
                if !scale.is_finite() {
                    return Err(invalid("scale must be finite".into()));
                }
                Ok(Layout::Numeric {
                    edges: bin_edges.clone(),
                    scale,
                    missing_bin: feature.nullable.then_some(bin_edges.len() + 1),
                })
            }
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ContextError> {
        let doc: SchemaDocument =
            serde_json::from_str(text).map_err(|e| ContextError::InvalidSchema(e.to_string()))?;
        Self::try_from(doc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn features(&self) -> &[FeatureDescriptor] {
        &self.features
    }

    pub fn fine_dim(&self) -> usize {
        self.fine_dim
    }

    pub fn coarse_dim(&self) -> usize {
        self.coarse_dim
    }

    /// Unified dimension `d`.
    pub fn dimension(&self) -> usize {
        self.fine_dim + self.coarse_dim
    }

    /// True when every fine coordinate is one-hot (no raw numerics), so
    /// encoded vectors are binary and admit Hamming distance.
    pub fn is_binary(&self) -> bool {
        self.layouts
            .iter()
            .all(|l| matches!(l, Layout::Categorical { .. }))
    }

    pub fn encode(&self, raw: &RawRequest) -> Result<ContextVector, ContextError> {
        let mut fine = vec![0.0; self.fine_dim];
        let mut coarse = vec![0.0; self.coarse_dim];
        let (mut fine_off, mut coarse_off) = (0, 0);
        for (feature, layout) in self.features.iter().zip(&self.layouts) {
            let value = raw.get(&feature.name).filter(|v| !v.is_null());
            if value.is_none() && !feature.nullable {
                return Err(ContextError::SchemaViolation(format!(
                    "missing feature `{}`",
                    feature.name
                )));
            }
            match layout {
                Layout::Categorical {
                    fine_index,
                    coarse_of_fine,
                    other,
                    ..
                } => {
                    let label = match value {
                        None => MISSING_CATEGORY.to_string(),
                        Some(Value::String(s)) => s.clone(),
                        Some(Value::Bool(b)) => b.to_string(),
                        Some(Value::Number(n)) => n.to_string(),
                        Some(v) => {
                            return Err(ContextError::InvalidValue {
                                feature: feature.name.clone(),
                                reason: format!("expected a scalar, got {v}"),
                            })
                        }
                    };
                    let slot = match (fine_index.get(&label), other) {
                        (Some(&i), _) => i,
                        (None, Some(o)) => *o,
                        (None, None) => {
                            return Err(ContextError::InvalidValue {
                                feature: feature.name.clone(),
                                reason: format!("unknown category `{label}` and no other slot"),
                            })
                        }
                    };
                    fine[fine_off + slot] = 1.0;
                    coarse[coarse_off + coarse_of_fine[slot]] = 1.0;
                }
                Layout::Numeric {
                    edges,
                    scale,
                    missing_bin,
                } => match value {
                    None => {
                        let bin = missing_bin.expect("nullable numeric has a missing bin");
                        coarse[coarse_off + bin] = 1.0;
                    }
                    Some(v) => {
                        let x = v.as_f64().ok_or_else(|| ContextError::InvalidValue {
                            feature: feature.name.clone(),
                            reason: format!("expected a number, got {v}"),
                        })?;
                        if !x.is_finite() {
                            return Err(ContextError::InvalidValue {
                                feature: feature.name.clone(),
                                reason: "non-finite".into(),
                            });
                        }
                        fine[fine_off] = x * scale;
                        coarse[coarse_off + bin_index(edges, x)] = 1.0;
                    }
                },
            }
            fine_off += layout.fine_len();
            coarse_off += layout.coarse_len();
        }
        Ok(ContextVector::from_parts(fine, coarse))
    }
}

/// Index of the bin holding `x`: the number of edges `<= x`.
fn bin_index(edges: &[f64], x: f64) -> usize {
    edges.partition_point(|&e| e <= x)
}

/// An encoded context: `unified = fine ++ coarse`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextVector {
    unified: Vec<f64>,
    fine_len: usize,
}

impl ContextVector {
    pub fn from_parts(fine: Vec<f64>, coarse: Vec<f64>) -> Self {
        let fine_len = fine.len();
        let mut unified = fine;
        unified.extend(coarse);
        Self { unified, fine_len }
    }

    /// A context with no coarse block; used where callers already hold a
    /// model-ready vector.
    pub fn from_unified(unified: Vec<f64>) -> Self {
        let fine_len = unified.len();
        Self { unified, fine_len }
    }

    pub fn fine(&self) -> &[f64] {
        &self.unified[..self.fine_len]
    }

    pub fn coarse(&self) -> &[f64] {
        &self.unified[self.fine_len..]
    }

    pub fn unified(&self) -> &[f64] {
        &self.unified
    }

    pub fn dimension(&self) -> usize {
        self.unified.len()
    }

    /// Identity key used for cell keying: the exact bit pattern of the
    /// unified vector.
    pub fn key(&self) -> ContextKey {
        ContextKey(self.unified.iter().map(|v| v.to_bits()).collect())
    }
}

/// Byte-exact identity of a unified context vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContextKey(Vec<u64>);

impl ContextKey {
    pub fn to_vector(&self) -> Vec<f64> {
        self.0.iter().map(|b| f64::from_bits(*b)).collect()
    }
}

/// Hamming distance between the unified blocks of two binary contexts.
pub fn hamming(a: &ContextVector, b: &ContextVector) -> Result<u32, ContextError> {
    hamming_slices(a.unified(), b.unified())
}

pub fn hamming_slices(a: &[f64], b: &[f64]) -> Result<u32, ContextError> {
    if a.len() != b.len() {
        return Err(ContextError::DimensionError {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let mut distance = 0;
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        for v in [x, y] {
            if v != 0.0 && v != 1.0 {
                return Err(ContextError::InvalidValue {
                    feature: format!("coordinate {i}"),
                    reason: format!("{v} is not binary"),
                });
            }
        }
        if x != y {
            distance += 1;
        }
    }
    Ok(distance)
}
