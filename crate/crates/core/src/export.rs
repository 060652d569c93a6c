//! Heatmaps, summary statistics and per-step adapter baking for schedules.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::{AlignedPair, LoraAdapter, Role};
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::gate::{Choice, Onset, SelectionSchedule};
use crate::util;

const STYLE_PIXEL: u8 = 0;
const SUBJECT_PIXEL: u8 = 255;

/// Binary PGM: width = layers, height = steps, row 0 = first denoising step.
/// Style is black, subject is white.
pub fn heatmap_pgm(schedule: &SelectionSchedule) -> Vec<u8> {
    let (w, h) = (schedule.num_layers(), schedule.steps);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.reserve(w * h);
    for row in &schedule.choices {
        out.extend(row.iter().map(|&v| if v == Choice::Style.index() { STYLE_PIXEL } else { SUBJECT_PIXEL }));
    }
    out
}

pub fn render_heatmap(schedule: &SelectionSchedule, path: impl AsRef<Path>) -> Result<()> {
    schedule.validate()?;
    util::write_atomic(path.as_ref(), &heatmap_pgm(schedule))
}

/// Read a heatmap written by [`heatmap_pgm`] back into a choice matrix.
pub fn parse_heatmap(bytes: &[u8]) -> Result<Vec<Vec<u8>>> {
    let bad = |msg: &str| Error::InvalidArgument(format!("pgm: {msg}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number in header"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    let raster = bytes.get(pos..).ok_or_else(|| bad("missing raster"))?;
    if raster.len() != w * h {
        return Err(bad("raster size does not match header"));
    }
    raster
        .chunks(w.max(1))
        .take(h)
        .map(|row| {
            row.iter()
                .map(|&px| match px {
                    STYLE_PIXEL => Ok(Choice::Style.index()),
                    SUBJECT_PIXEL => Ok(Choice::Subject.index()),
                    _ => Err(bad("pixel is neither 0 nor 255")),
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStats {
    pub per_step_style_fraction: Vec<f64>,
    pub overall_style_fraction: f64,
    pub per_layer_onset: BTreeMap<String, Onset>,
}

pub fn stats(schedule: &SelectionSchedule) -> ScheduleStats {
    let l = schedule.num_layers();
    let style = Choice::Style.index();
    let per_step_style_fraction: Vec<f64> = schedule
        .choices
        .iter()
        .map(|row| row.iter().filter(|&&v| v == style).count() as f64 / l as f64)
        .collect();
    let overall_style_fraction = per_step_style_fraction.iter().sum::<f64>() / schedule.steps as f64;
    let per_layer_onset = schedule
        .ordered_keys
        .iter()
        .enumerate()
        .map(|(j, key)| {
            let onset = schedule
                .choices
                .iter()
                .position(|row| row[j] == style)
                .map_or(Onset::Never, Onset::Step);
            (key.clone(), onset)
        })
        .collect();
    ScheduleStats {
        per_step_style_fraction,
        overall_style_fraction,
        per_layer_onset,
    }
}

fn check_keys(pair: &AlignedPair, schedule: &SelectionSchedule) -> Result<()> {
    if pair.ordered_keys() != schedule.ordered_keys.as_slice() {
        return Err(Error::InvalidArgument(
            "schedule layers do not match the shared layers of the adapter pair".into(),
        ));
    }
    Ok(())
}

fn bake_row(pair: &AlignedPair, schedule: &SelectionSchedule, step: usize, schedule_digest: &str) -> LoraAdapter {
    let layers = pair.layer_pairs().enumerate().map(|(j, (_, content, style))| {
        match schedule.choice(step, j) {
            Choice::Subject => content.clone(),
            Choice::Style => style.clone(),
        }
    });
    let mut out = LoraAdapter::new(layers, Role::Baked);
    out.metadata = Some(BTreeMap::from([
        ("est_lora.step".to_string(), step.to_string()),
        ("est_lora.steps".to_string(), schedule.steps.to_string()),
        ("est_lora.schedule_digest".to_string(), schedule_digest.to_string()),
    ]));
    out
}

/// Adapter for one step: every shared layer's factors and alpha are copied
/// unchanged from whichever adapter the schedule selects.
pub fn bake(pair: &AlignedPair, schedule: &SelectionSchedule, step_index: usize) -> Result<LoraAdapter> {
    schedule.validate()?;
    check_keys(pair, schedule)?;
    if step_index >= schedule.steps {
        return Err(Error::StepOutOfRange {
            index: step_index,
            steps: schedule.steps,
        });
    }
    Ok(bake_row(pair, schedule, step_index, &schedule.digest()?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BakeManifest {
    pub steps: usize,
    pub files: Vec<String>,
    pub sha256: Vec<String>,
    pub schedule_digest: String,
}

pub fn step_file_name(step: usize) -> String {
    format!("step_{step}.safetensors")
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Write `step_<i>.safetensors` for every step plus `manifest.json`.
/// Refuses a non-empty `out_dir` unless `force` is set.
pub fn bake_all(pair: &AlignedPair, schedule: &SelectionSchedule, out_dir: impl AsRef<Path>, force: bool) -> Result<BakeManifest> {
    bake_all_with(pair, schedule, out_dir, force, Parallelism::default())
}

pub fn bake_all_with(
    pair: &AlignedPair,
    schedule: &SelectionSchedule,
    out_dir: impl AsRef<Path>,
    force: bool,
    par: Parallelism,
) -> Result<BakeManifest> {
    let out_dir = out_dir.as_ref();
    schedule.validate()?;
    check_keys(pair, schedule)?;
    prepare_dir(out_dir, force)?;
    let digest = schedule.digest()?;

    let written = par.map_range(schedule.steps, |step| -> Result<(String, String)> {
        let bytes = bake_row(pair, schedule, step, &digest).to_bytes()?;
        let name = step_file_name(step);
        util::write_atomic(&out_dir.join(&name), &bytes)?;
        Ok((name, util::sha256_hex(&bytes)))
    });
    let (files, sha256) = written.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    let manifest = BakeManifest {
        steps: schedule.steps,
        files,
        sha256,
        schedule_digest: digest,
    };
    util::write_atomic(&out_dir.join(MANIFEST_NAME), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    match std::fs::read_dir(dir) {
        Ok(mut entries) => {
            if entries.next().is_some() && !force {
                return Err(Error::OutputExists(PathBuf::from(dir)));
            }
            Ok(())
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        Err(e) => Err(Error::io(dir, e)),
    }
}
