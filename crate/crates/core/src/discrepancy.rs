//! Style similarity prior from a pair of backbone embeddings.
//!
//! Embeddings are projected onto the unit sphere, where the squared distance
//! lies in [0, 4]. The score is the similarity `d = 1 - ‖φ_s - φ_c‖² / 4`,
//! so identical styles give 1 and antipodal ones give 0.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util;

pub const NORMALIZATION: &str = "unit-sphere-quartic";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub dim: usize,
    pub values: Vec<f64>,
    pub model_tag: String,
    pub source: String,
}

#[derive(Deserialize)]
struct EmbeddingFile {
    #[serde(default)]
    model: String,
    dim: usize,
    embedding: Vec<f64>,
    #[serde(default = "external")]
    source: String,
}

fn external() -> String {
    "external".into()
}

impl EmbeddingVector {
    /// Validate and L2-normalize raw values.
    pub fn normalized(values: Vec<f64>, model_tag: impl Into<String>, source: impl Into<String>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroVector);
        }
        Ok(Self {
            dim: values.len(),
            values: values.into_iter().map(|v| v / norm).collect(),
            model_tag: model_tag.into(),
            source: source.into(),
        })
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let file: EmbeddingFile = serde_json::from_slice(bytes)?;
        if file.embedding.len() != file.dim {
            return Err(Error::DimMismatch(file.dim, file.embedding.len()));
        }
        Self::normalized(file.embedding, file.model, file.source)
    }
}

pub fn load_embedding(path: impl AsRef<Path>) -> Result<EmbeddingVector> {
    EmbeddingVector::from_json(&util::read_file(path.as_ref())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyScore {
    pub d: f64,
    pub raw_sq_distance: f64,
    pub normalization: String,
}

impl DiscrepancyScore {
    /// A score supplied directly rather than measured.
    pub fn given(d: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&d) {
            return Err(Error::InvalidArgument(format!("d = {d} must lie in [0, 1]")));
        }
        Ok(Self {
            d,
            raw_sq_distance: 4.0 * (1.0 - d),
            normalization: NORMALIZATION.into(),
        })
    }
}

pub fn discrepancy(style: &EmbeddingVector, content: &EmbeddingVector) -> Result<DiscrepancyScore> {
    if style.values.len() != content.values.len() {
        return Err(Error::DimMismatch(style.values.len(), content.values.len()));
    }
    let raw: f64 = style
        .values
        .iter()
        .zip(&content.values)
        .map(|(s, c)| (s - c) * (s - c))
        .sum();
    Ok(DiscrepancyScore {
        d: (1.0 - raw / 4.0).clamp(0.0, 1.0),
        raw_sq_distance: raw,
        normalization: NORMALIZATION.into(),
    })
}
