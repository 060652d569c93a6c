#![allow(dead_code)]

use est_lora::adapter::TensorRecord;
use est_lora::energy::{EnergyMethod, EnergyReport, LayerEnergyReport};
use est_lora::{align, AlignedPair, LoraAdapter, LoraLayer, Matrix, Role};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_layer(rng: &mut ChaCha8Rng, key: &str, m: usize, n: usize, r: usize) -> LoraLayer {
    let down = random_matrix(rng, r, n);
    let up = random_matrix(rng, m, r);
    let alpha = if rng.gen_bool(0.3) { None } else { Some(rng.gen_range(0.5..32.0)) };
    LoraLayer::from_factors(key, down, up, alpha).unwrap()
}

/// A layer stored as F32 tensors in the `lora_down`/`lora_up` dialect.
pub fn random_f32_layer(rng: &mut ChaCha8Rng, key: &str, m: usize, n: usize, r: usize, alpha: f32) -> LoraLayer {
    let down: Vec<f32> = (0..r * n).map(|_| rng.gen_range(-0.1f32..0.1)).collect();
    let up: Vec<f32> = (0..m * r).map(|_| rng.gen_range(-0.1f32..0.1)).collect();
    LoraLayer::from_records(
        key,
        TensorRecord::from_f32(format!("{key}.lora_down.weight"), vec![r, n], &down).unwrap(),
        TensorRecord::from_f32(format!("{key}.lora_up.weight"), vec![m, r], &up).unwrap(),
        Some(TensorRecord::from_f32(format!("{key}.alpha"), vec![], &[alpha]).unwrap()),
    )
    .unwrap()
}

/// Zero-padded so lexicographic order matches numeric order.
pub fn layer_key(i: usize) -> String {
    format!("unet.block_{i:04}.attn.to_q")
}

pub fn random_pair(rng: &mut ChaCha8Rng, layers: usize, max_dim: usize, max_rank: usize) -> AlignedPair {
    let mut content = Vec::new();
    let mut style = Vec::new();
    for i in 0..layers {
        let key = layer_key(i);
        let m = rng.gen_range(1..=max_dim);
        let n = rng.gen_range(1..=max_dim);
        let (rc, rs) = (rng.gen_range(1..=max_rank), rng.gen_range(1..=max_rank));
        content.push(random_layer(rng, &key, m, n, rc));
        style.push(random_layer(rng, &key, m, n, rs));
    }
    align(LoraAdapter::new(content, Role::Content), LoraAdapter::new(style, Role::Style)).unwrap()
}

/// Pair of tiny placeholder layers; pairs this with a hand-made energy report.
pub fn placeholder_pair(layers: usize) -> AlignedPair {
    let mk = |role| {
        LoraAdapter::new(
            (0..layers).map(|i| LoraLayer::from_factors(layer_key(i), Matrix::zeros(1, 1), Matrix::zeros(1, 1), None).unwrap()),
            role,
        )
    };
    align(mk(Role::Content), mk(Role::Style)).unwrap()
}

pub fn report_from(pair: &AlignedPair, energies: &[(f64, f64)]) -> EnergyReport {
    EnergyReport {
        layers: pair
            .ordered_keys()
            .iter()
            .zip(energies)
            .map(|(k, &(e_content, e_style))| LayerEnergyReport {
                key: k.clone(),
                e_content,
                e_style,
                method: EnergyMethod::Gram,
            })
            .collect(),
        method: EnergyMethod::Gram,
    }
}

/// Energies with log-uniform ratios around 1, and the occasional zero.
pub fn random_energies(rng: &mut ChaCha8Rng, layers: usize) -> Vec<(f64, f64)> {
    (0..layers)
        .map(|_| {
            let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
            let ratio = 10f64.powf(rng.gen_range(-1.5..1.5));
            match rng.gen_range(0..40) {
                0 => (0.0, 0.0),
                1 => (scale, 0.0),
                2 => (0.0, scale),
                _ => (scale * ratio, scale),
            }
        })
        .collect()
}

/// A column is subject (2) for a prefix and style (1) afterwards.
pub fn is_flip_once(column: &[u8]) -> bool {
    let first_style = column.iter().position(|&v| v == 1).unwrap_or(column.len());
    column[..first_style].iter().all(|&v| v == 2) && column[first_style..].iter().all(|&v| v == 1)
}

/// Content/style pair with SDXL-like widths and controlled energy ratios.
pub fn sdxl_shaped_pair(rng: &mut ChaCha8Rng, layers: usize, rank: usize) -> AlignedPair {
    const WIDTHS: [usize; 3] = [320, 640, 1280];
    let mut content = Vec::new();
    let mut style = Vec::new();
    for i in 0..layers {
        let key = layer_key(i);
        let d = WIDTHS[i % 3] / 8;
        content.push(random_f32_layer(rng, &key, d, d, rank, rank as f32));
        let style_alpha = rank as f32 * rng.gen_range(0.5f32..2.0);
        style.push(random_f32_layer(rng, &key, d, d, rank, style_alpha));
    }
    align(LoraAdapter::new(content, Role::Content), LoraAdapter::new(style, Role::Style)).unwrap()
}
