//! LoRA adapter files: loading, writing, and pairing two adapters by layer.
//!
//! Two key dialects are recognized and normalized to (down = A, up = B):
//! `{prefix}.lora_down.weight` / `{prefix}.lora_up.weight` with an optional
//! `{prefix}.alpha`, and `{prefix}.lora_A.weight` / `{prefix}.lora_B.weight`.
//! Anything else is carried through untouched so a re-write is lossless.

pub mod safetensors;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::util;
pub use safetensors::{DType, TensorRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Content,
    Style,
    /// Produced by baking a schedule step.
    Baked,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Content => "content",
            Role::Style => "style",
            Role::Baked => "baked",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Part {
    Down,
    Up,
    Alpha,
}

fn split_key(name: &str) -> Option<(&str, Part)> {
    const SUFFIXES: [(&str, Part); 5] = [
        (".lora_down.weight", Part::Down),
        (".lora_up.weight", Part::Up),
        (".lora_A.weight", Part::Down),
        (".lora_B.weight", Part::Up),
        (".alpha", Part::Alpha),
    ];
    SUFFIXES
        .iter()
        .find_map(|(suffix, part)| name.strip_suffix(suffix).filter(|p| !p.is_empty()).map(|p| (p, *part)))
}

/// One adapted layer: `ΔW = (alpha / rank) · up · down`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    key: String,
    down: Matrix,
    up: Matrix,
    alpha: f64,
    down_record: TensorRecord,
    up_record: TensorRecord,
    alpha_record: Option<TensorRecord>,
}

fn matrix_of(record: &TensorRecord) -> Result<Matrix> {
    if record.shape.len() != 2 {
        return Err(Error::InvalidShape {
            name: record.name.clone(),
            reason: format!("expected a 2-D factor, got shape {:?}", record.shape),
        });
    }
    Matrix::new(record.shape[0], record.shape[1], record.to_f64_vec())
}

impl LoraLayer {
    /// Build from raw tensor records. Alpha, when present, must be a single element.
    pub fn from_records(
        key: impl Into<String>,
        down_record: TensorRecord,
        up_record: TensorRecord,
        alpha_record: Option<TensorRecord>,
    ) -> Result<Self> {
        let key = key.into();
        let down = matrix_of(&down_record)?;
        let up = matrix_of(&up_record)?;
        if down.rows() == 0 {
            return Err(Error::InvalidShape {
                name: down_record.name.clone(),
                reason: "rank must be at least 1".into(),
            });
        }
        if down.rows() != up.cols() {
            return Err(Error::InvalidShape {
                name: key,
                reason: format!(
                    "down is {:?} and up is {:?}; inner dimensions disagree",
                    down.shape(),
                    up.shape()
                ),
            });
        }
        let alpha = match &alpha_record {
            None => down.rows() as f64,
            Some(rec) => {
                if rec.shape.len() > 1 || rec.numel() != 1 {
                    return Err(Error::InvalidShape {
                        name: rec.name.clone(),
                        reason: format!("alpha must be a scalar, got shape {:?}", rec.shape),
                    });
                }
                let a = rec.to_f64_vec()[0];
                if !a.is_finite() {
                    return Err(Error::NonFinite(rec.name.clone()));
                }
                a
            }
        };
        Ok(Self {
            key,
            down,
            up,
            alpha,
            down_record,
            up_record,
            alpha_record,
        })
    }

    /// Build from f64 factors, stored losslessly as F64 tensors in the
    /// `lora_down`/`lora_up` dialect.
    pub fn from_factors(key: impl Into<String>, down: Matrix, up: Matrix, alpha: Option<f64>) -> Result<Self> {
        let key = key.into();
        let down_record = TensorRecord::from_f64(
            format!("{key}.lora_down.weight"),
            vec![down.rows(), down.cols()],
            down.as_slice(),
        )?;
        let up_record = TensorRecord::from_f64(format!("{key}.lora_up.weight"), vec![up.rows(), up.cols()], up.as_slice())?;
        let alpha_record = alpha
            .map(|a| TensorRecord::from_f64(format!("{key}.alpha"), vec![], &[a]))
            .transpose()?;
        Self::from_records(key, down_record, up_record, alpha_record)
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    /// Input-side factor A, rank × n.
    pub fn down(&self) -> &Matrix {
        &self.down
    }

    /// Output-side factor B, m × rank.
    pub fn up(&self) -> &Matrix {
        &self.up
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn rank(&self) -> usize {
        self.down.rows()
    }

    /// `alpha / rank`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// Shape (m, n) of the effective update.
    pub fn update_shape(&self) -> (usize, usize) {
        (self.up.rows(), self.down.cols())
    }

    /// The tensors this layer was built from, in (down, up, alpha) order.
    pub fn records(&self) -> impl Iterator<Item = &TensorRecord> {
        [&self.down_record, &self.up_record]
            .into_iter()
            .chain(self.alpha_record.as_ref())
    }

    pub fn has_explicit_alpha(&self) -> bool {
        self.alpha_record.is_some()
    }

    /// Dense `(alpha / rank) · up · down`.
    pub fn materialize(&self) -> Matrix {
        self.up
            .matmul(&self.down)
            .expect("inner dimensions checked at construction")
            .scaled(self.scale())
    }

    /// Same layer with its update multiplied by `c` (applied to the up factor).
    pub fn scaled_update(&self, c: f64) -> Result<Self> {
        let up = self.up.scaled(c);
        let up_record = TensorRecord::from_f64(self.up_record.name.clone(), self.up_record.shape.clone(), up.as_slice())?;
        Self::from_records(self.key.clone(), self.down_record.clone(), up_record, self.alpha_record.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub layers: BTreeMap<String, LoraLayer>,
    /// Tensors that are not part of a recognized down/up pair.
    pub passthrough: Vec<TensorRecord>,
    pub metadata: Option<BTreeMap<String, String>>,
    pub source_path: String,
    pub role: Role,
}

impl LoraAdapter {
    pub fn new(layers: impl IntoIterator<Item = LoraLayer>, role: Role) -> Self {
        Self {
            layers: layers.into_iter().map(|l| (l.key.clone(), l)).collect(),
            passthrough: Vec::new(),
            metadata: None,
            source_path: String::new(),
            role,
        }
    }

    /// Decode an in-memory safetensors image.
    pub fn from_bytes(bytes: &[u8], role: Role) -> Result<Self> {
        let st = safetensors::parse(bytes)?;

        #[derive(Default)]
        struct Parts {
            down: Option<TensorRecord>,
            up: Option<TensorRecord>,
            alpha: Option<TensorRecord>,
        }
        let mut groups: BTreeMap<String, Parts> = BTreeMap::new();
        let mut passthrough = Vec::new();
        for rec in st.tensors {
            let Some((prefix, part)) = split_key(&rec.name) else {
                passthrough.push(rec);
                continue;
            };
            let parts = groups.entry(prefix.to_string()).or_default();
            let slot = match part {
                Part::Down => &mut parts.down,
                Part::Up => &mut parts.up,
                Part::Alpha => &mut parts.alpha,
            };
            if let Some(prev) = slot {
                return Err(Error::InvalidArgument(format!(
                    "layer `{prefix}` has two {part:?} tensors: `{}` and `{}`",
                    prev.name, rec.name
                )));
            }
            *slot = Some(rec);
        }

        let mut layers = BTreeMap::new();
        for (key, parts) in groups {
            match (parts.down, parts.up) {
                (Some(down), Some(up)) => {
                    let layer = LoraLayer::from_records(key.clone(), down, up, parts.alpha)?;
                    layers.insert(key, layer);
                }
                (Some(_), None) => {
                    return Err(Error::MissingPartner {
                        key,
                        present: "down",
                        missing: "up",
                    })
                }
                (None, Some(_)) => {
                    return Err(Error::MissingPartner {
                        key,
                        present: "up",
                        missing: "down",
                    })
                }
                (None, None) => passthrough.extend(parts.alpha),
            }
        }
        if layers.is_empty() {
            return Err(Error::NoLoraLayers);
        }
        passthrough.sort_by(|a, b| a.name.cmp(&b.name));
        Ok(Self {
            layers,
            passthrough,
            metadata: st.metadata,
            source_path: String::new(),
            role,
        })
    }

    /// Encode as a safetensors image.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let records: Vec<&TensorRecord> = self
            .layers
            .values()
            .flat_map(LoraLayer::records)
            .chain(&self.passthrough)
            .collect();
        safetensors::serialize(&records, self.metadata.as_ref())
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Every layer's update multiplied by `c`.
    pub fn scaled_updates(&self, c: f64) -> Result<Self> {
        let layers = self
            .layers
            .iter()
            .map(|(k, l)| Ok((k.clone(), l.scaled_update(c)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            ..self.clone()
        })
    }
}

pub fn load_adapter(path: impl AsRef<Path>, role: Role) -> Result<LoraAdapter> {
    let path = path.as_ref();
    let bytes = util::read_file(path)?;
    let mut adapter = LoraAdapter::from_bytes(&bytes, role)?;
    adapter.source_path = path.display().to_string();
    log::debug!("loaded {} layers from {}", adapter.len(), path.display());
    Ok(adapter)
}

pub fn write_adapter(adapter: &LoraAdapter, path: impl AsRef<Path>) -> Result<()> {
    util::write_atomic(path.as_ref(), &adapter.to_bytes()?)
}

/// Content and style adapters restricted to their shared layers, in
/// lexicographic key order.
#[derive(Debug, Clone)]
pub struct AlignedPair {
    ordered_keys: Vec<String>,
    content: LoraAdapter,
    style: LoraAdapter,
    skipped_keys: Vec<String>,
}

impl AlignedPair {
    pub fn ordered_keys(&self) -> &[String] {
        &self.ordered_keys
    }

    pub fn skipped_keys(&self) -> &[String] {
        &self.skipped_keys
    }

    pub fn content(&self) -> &LoraAdapter {
        &self.content
    }

    pub fn style(&self) -> &LoraAdapter {
        &self.style
    }

    pub fn len(&self) -> usize {
        self.ordered_keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ordered_keys.is_empty()
    }

    /// (content, style) layers for the `index`-th shared key.
    pub fn layer_pair(&self, index: usize) -> (&LoraLayer, &LoraLayer) {
        let key = &self.ordered_keys[index];
        (&self.content.layers[key], &self.style.layers[key])
    }

    pub fn layer_pairs(&self) -> impl Iterator<Item = (&str, &LoraLayer, &LoraLayer)> {
        self.ordered_keys
            .iter()
            .map(|k| (k.as_str(), &self.content.layers[k], &self.style.layers[k]))
    }
}

pub fn align(content: LoraAdapter, style: LoraAdapter) -> Result<AlignedPair> {
    if content.is_empty() || style.is_empty() {
        return Err(Error::NoLoraLayers);
    }
    let ck: BTreeSet<&String> = content.layers.keys().collect();
    let sk: BTreeSet<&String> = style.layers.keys().collect();
    let ordered_keys: Vec<String> = ck.intersection(&sk).map(|k| (*k).clone()).collect();
    let skipped_keys: Vec<String> = ck.symmetric_difference(&sk).map(|k| (*k).clone()).collect();
    if ordered_keys.is_empty() {
        return Err(Error::NoSharedLayers);
    }
    for key in &ordered_keys {
        let c = content.layers[key].update_shape();
        let s = style.layers[key].update_shape();
        if c != s {
            return Err(Error::ShapeMismatch {
                key: key.clone(),
                content: c,
                style: s,
            });
        }
    }
    if !skipped_keys.is_empty() {
        log::warn!(
            "{} layer(s) present in only one adapter were skipped (first: {})",
            skipped_keys.len(),
            skipped_keys[0]
        );
    }
    Ok(AlignedPair {
        ordered_keys,
        content,
        style,
        skipped_keys,
    })
}
