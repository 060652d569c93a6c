//! Per-layer update energies `E = ‖ΔW‖²_F` with `ΔW = s · B · A`.
//!
//! The default route never forms the m × n update. With `s = alpha / rank`,
//!
//! ```text
//! ‖s·B·A‖²_F = s² · Tr(Aᵀ Bᵀ B A) = s² · Tr((A Aᵀ)(Bᵀ B))
//! ```
//!
//! and both Gram factors are r × r, so the cost is O(r²(m + n)) instead of
//! O(r·m·n) for the product or O(n³) for a decomposition. The direct and
//! spectral routes are kept as oracles.

use serde::{Deserialize, Serialize};

use crate::adapter::{AlignedPair, LoraLayer};
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::matrix::{pairwise_dot, pairwise_sum_sq, Matrix};
use crate::spectral;
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EnergyMethod {
    /// r × r Gram trace identity.
    #[default]
    Gram,
    /// Materialize ΔW and sum its squares.
    Direct,
    /// Materialize ΔW and sum its squared singular values.
    SvdOracle,
}

/// Sum of squared magnitudes of all elements.
pub fn frobenius_sq(m: &Matrix) -> Result<f64> {
    if !m.is_finite() {
        return Err(Error::NonFinite("matrix".into()));
    }
    Ok(pairwise_sum_sq(m.as_slice()))
}

fn check_finite(layer: &LoraLayer) -> Result<()> {
    if layer.down().is_finite() && layer.up().is_finite() && layer.alpha().is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("layer `{}`", layer.key())))
    }
}

/// `‖ΔW‖²_F` through the Gram trace identity.
pub fn delta_energy(layer: &LoraLayer) -> Result<f64> {
    check_finite(layer)?;
    let down_gram = layer.down().row_gram();
    let up_gram = layer.up().col_gram();
    // Both Grams are symmetric, so Tr(G1·G2) is their elementwise inner product.
    let trace = pairwise_dot(down_gram.as_slice(), up_gram.as_slice());
    let s = layer.scale();
    Ok((s * s * trace).max(0.0))
}

/// `‖ΔW‖²_F` by materializing the update.
pub fn delta_energy_direct(layer: &LoraLayer) -> Result<f64> {
    check_finite(layer)?;
    frobenius_sq(&layer.materialize())
}

/// `Σσᵢ²` of the materialized update.
pub fn delta_energy_svd(layer: &LoraLayer) -> Result<f64> {
    check_finite(layer)?;
    let sv = spectral::singular_values(&layer.materialize())?;
    Ok(pairwise_sum_sq(&sv))
}

pub fn layer_energy(layer: &LoraLayer, method: EnergyMethod) -> Result<f64> {
    match method {
        EnergyMethod::Gram => delta_energy(layer),
        EnergyMethod::Direct => delta_energy_direct(layer),
        EnergyMethod::SvdOracle => delta_energy_svd(layer),
    }
}

/// Sum of the `k` largest `|ΔWᵢⱼ|`. Importance proxy for the Top-K baseline.
///
/// Selection is by partition; the selected values are then summed in
/// descending order so the result is independent of partition internals.
pub fn topk_abs_sum(layer: &LoraLayer, k: usize) -> Result<f64> {
    check_finite(layer)?;
    let mut mags: Vec<f64> = layer.materialize().into_vec().into_iter().map(f64::abs).collect();
    topk_sum_in_place(&mut mags, k)
}

pub(crate) fn topk_sum_in_place(mags: &mut [f64], k: usize) -> Result<f64> {
    let n = mags.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k = {k} outside 1..={n}")));
    }
    let top = if k < n {
        mags.select_nth_unstable_by(n - k, f64::total_cmp);
        &mut mags[n - k..]
    } else {
        &mut mags[..]
    };
    top.sort_unstable_by(|a, b| b.total_cmp(a));
    Ok(top.iter().sum())
}

/// Number of elements the Top-K baseline keeps for an m × n update.
pub fn topk_count(shape: (usize, usize), k_fraction: f64) -> usize {
    let n = shape.0 * shape.1;
    ((k_fraction * n as f64).ceil() as usize).clamp(1, n.max(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEnergyReport {
    pub key: String,
    pub e_content: f64,
    pub e_style: f64,
    #[serde(skip, default)]
    pub method: EnergyMethod,
}

/// Energies for every shared layer, in the pair's key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub layers: Vec<LayerEnergyReport>,
    pub method: EnergyMethod,
}

impl EnergyReport {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let mut report: EnergyReport = serde_json::from_slice(bytes)?;
        for l in &mut report.layers {
            l.method = report.method;
        }
        Ok(report)
    }

    /// SHA-256 of the JSON form.
    pub fn digest(&self) -> Result<String> {
        Ok(util::sha256_hex(&self.to_json()?))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(|l| l.key.as_str())
    }
}

pub fn energy_report(pair: &AlignedPair, method: EnergyMethod) -> Result<EnergyReport> {
    energy_report_with(pair, method, Parallelism::default())
}

pub fn energy_report_with(pair: &AlignedPair, method: EnergyMethod, par: Parallelism) -> Result<EnergyReport> {
    let layers = par.try_map(pair.ordered_keys(), |key| {
        let content = &pair.content().layers[key];
        let style = &pair.style().layers[key];
        Ok(LayerEnergyReport {
            key: key.clone(),
            e_content: layer_energy(content, method)?,
            e_style: layer_energy(style, method)?,
            method,
        })
    })?;
    Ok(EnergyReport { layers, method })
}

/// Top-K absolute-sum importances in place of energies, one k per layer from
/// `k_fraction` of the update's element count.
pub fn topk_report(pair: &AlignedPair, k_fraction: f64, par: Parallelism) -> Result<Vec<LayerEnergyReport>> {
    if !(k_fraction > 0.0 && k_fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!("k_fraction {k_fraction} must be in (0, 1]")));
    }
    par.try_map(pair.ordered_keys(), |key| {
        let content = &pair.content().layers[key];
        let style = &pair.style().layers[key];
        let k = topk_count(content.update_shape(), k_fraction);
        Ok(LayerEnergyReport {
            key: key.clone(),
            e_content: topk_abs_sum(content, k)?,
            e_style: topk_abs_sum(style, k)?,
            method: EnergyMethod::Direct,
        })
    })
}
