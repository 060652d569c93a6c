//! Per-step, per-layer adapter selection.
//!
//! At step `i` of `T` the gate threshold is `γ = α · p + (1 - D)` with
//! denoising progress `p = i / (T - 1)` (0 at the first, noisiest step). A
//! layer keeps the subject adapter while `E_content ≥ γ · E_style` and
//! switches to the style adapter otherwise. Energies do not change across
//! steps, so they are computed once and each layer flips at most once.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::adapter::AlignedPair;
use crate::energy::{self, EnergyReport};
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::util;

pub const DEFAULT_ALPHA: f64 = 1.5;
pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_K_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    /// Energy, style prior and time.
    Est,
    /// Top-K absolute-sum importances with the time term only.
    KloraLike,
    /// Fixed-weight sum of both updates; no per-layer choice.
    DirectMerge,
    StyleOnly,
    SubjectOnly,
    /// Energy and time; the style prior is disabled (D = 1).
    EnergyTime,
    /// Style prior and time over Top-K importances instead of energies.
    StyleTime,
}

impl Selector {
    pub const ALL: [Selector; 7] = [
        Selector::Est,
        Selector::KloraLike,
        Selector::DirectMerge,
        Selector::StyleOnly,
        Selector::SubjectOnly,
        Selector::EnergyTime,
        Selector::StyleTime,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Selector::Est => "est",
            Selector::KloraLike => "klora_like",
            Selector::DirectMerge => "direct_merge",
            Selector::StyleOnly => "style_only",
            Selector::SubjectOnly => "subject_only",
            Selector::EnergyTime => "energy_time",
            Selector::StyleTime => "style_time",
        }
    }

    /// Whether the selector reads the style prior `D`.
    pub fn uses_discrepancy(self) -> bool {
        matches!(self, Selector::Est | Selector::StyleTime)
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Selector::ALL
            .into_iter()
            .find(|sel| sel.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown selector `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TiePolicy {
    /// `E_c = γ · E_s` keeps the subject adapter.
    #[default]
    #[serde(rename = "content-on-tie")]
    ContentOnTie,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub alpha: f64,
    pub steps: usize,
    pub d_score: f64,
    pub tie_policy: TiePolicy,
    pub selector: Selector,
    /// (content, style) weights for `direct_merge`.
    pub direct_weights: (f64, f64),
    pub k_fraction: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            steps: DEFAULT_STEPS,
            d_score: 1.0,
            tie_policy: TiePolicy::ContentOnTie,
            selector: Selector::Est,
            direct_weights: (1.0, 1.0),
            k_fraction: DEFAULT_K_FRACTION,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad(format!("alpha {} must be finite and non-negative", self.alpha));
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.d_score) {
            return bad(format!("d_score {} must lie in [0, 1]", self.d_score));
        }
        let (wc, ws) = self.direct_weights;
        if !(wc.is_finite() && ws.is_finite() && wc >= 0.0 && ws >= 0.0) {
            return bad(format!("direct weights ({wc}, {ws}) must be finite and non-negative"));
        }
        if !(self.k_fraction > 0.0 && self.k_fraction <= 1.0) {
            return bad(format!("k_fraction {} must be in (0, 1]", self.k_fraction));
        }
        Ok(())
    }

    fn with_d(&self, d_score: f64) -> Self {
        Self { d_score, ..self.clone() }
    }
}

/// Denoising progress for step `index` of `steps`.
pub fn progress(index: usize, steps: usize) -> f64 {
    if steps <= 1 {
        0.0
    } else {
        index as f64 / (steps - 1) as f64
    }
}

pub fn gamma(step_index: usize, config: &GateConfig) -> Result<f64> {
    if step_index >= config.steps {
        return Err(Error::StepOutOfRange {
            index: step_index,
            steps: config.steps,
        });
    }
    Ok(gamma_unchecked(step_index, config))
}

fn gamma_unchecked(step_index: usize, config: &GateConfig) -> f64 {
    config.alpha * progress(step_index, config.steps) + (1.0 - config.d_score)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Choice {
    Style = 1,
    Subject = 2,
}

impl Choice {
    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn from_index(v: u8) -> Option<Self> {
        match v {
            1 => Some(Choice::Style),
            2 => Some(Choice::Subject),
            _ => None,
        }
    }
}

pub fn select(e_content: f64, e_style: f64, gamma: f64) -> Choice {
    if e_content >= gamma * e_style {
        Choice::Subject
    } else {
        Choice::Style
    }
}

/// First step at which a layer selects the style adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Onset {
    Step(usize),
    Never,
}

impl Onset {
    pub fn step(self) -> Option<usize> {
        match self {
            Onset::Step(i) => Some(i),
            Onset::Never => None,
        }
    }

    /// Step index, with `Never` mapped to `steps`.
    pub fn or_steps(self, steps: usize) -> usize {
        self.step().unwrap_or(steps)
    }
}

impl Serialize for Onset {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Onset::Step(i) => s.serialize_u64(*i as u64),
            Onset::Never => s.serialize_str("never"),
        }
    }
}

impl<'de> Deserialize<'de> for Onset {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Step(usize),
            Tag(String),
        }
        match Raw::deserialize(d)? {
            Raw::Step(i) => Ok(Onset::Step(i)),
            Raw::Tag(t) if t == "never" => Ok(Onset::Never),
            Raw::Tag(t) => Err(serde::de::Error::custom(format!("expected a step or \"never\", got `{t}`"))),
        }
    }
}

/// Closed-form onset. The layer keeps the subject while
/// `p ≤ (E_c / E_s - (1 - D)) / α`; the estimate is then settled against
/// `select` so it agrees exactly with the scanned schedule.
pub fn onset_step(e_content: f64, e_style: f64, config: &GateConfig) -> Onset {
    let steps = config.steps;
    let style_at = |i: usize| select(e_content, e_style, gamma_unchecked(i, config)) == Choice::Style;
    if e_style == 0.0 || steps == 0 {
        return Onset::Never;
    }

    let prior = 1.0 - config.d_score;
    let ratio = e_content / e_style;
    let mut i = if config.alpha == 0.0 || steps == 1 {
        0
    } else {
        let threshold = (ratio - prior) / config.alpha;
        if threshold < 0.0 {
            0
        } else {
            let est = (threshold * (steps - 1) as f64).floor() + 1.0;
            if est >= steps as f64 {
                steps
            } else {
                est as usize
            }
        }
    };
    while i > 0 && style_at(i - 1) {
        i -= 1;
    }
    while i < steps && !style_at(i) {
        i += 1;
    }
    if i < steps {
        Onset::Step(i)
    } else {
        Onset::Never
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSchedule {
    pub steps: usize,
    #[serde(rename = "layers")]
    pub ordered_keys: Vec<String>,
    /// `steps` rows of `ordered_keys.len()` entries, each 1 (style) or 2 (subject).
    pub choices: Vec<Vec<u8>>,
    #[serde(rename = "gamma")]
    pub gamma_trace: Vec<f64>,
    pub config: GateConfig,
    pub energy_digest: String,
}

impl SelectionSchedule {
    pub fn num_layers(&self) -> usize {
        self.ordered_keys.len()
    }

    pub fn choice(&self, step: usize, layer: usize) -> Choice {
        Choice::from_index(self.choices[step][layer]).expect("validated schedule entry")
    }

    pub fn column(&self, layer: usize) -> Vec<u8> {
        self.choices.iter().map(|row| row[layer]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("schedule: {msg}")));
        if self.choices.len() != self.steps || self.gamma_trace.len() != self.steps {
            return bad(format!(
                "{} rows and {} gamma values for {} steps",
                self.choices.len(),
                self.gamma_trace.len(),
                self.steps
            ));
        }
        if self.steps == 0 || self.ordered_keys.is_empty() {
            return bad("empty".into());
        }
        if self.ordered_keys.windows(2).any(|w| w[0] >= w[1]) {
            return bad("layer keys are not strictly sorted".into());
        }
        for (i, row) in self.choices.iter().enumerate() {
            if row.len() != self.ordered_keys.len() {
                return bad(format!("row {i} has {} entries, expected {}", row.len(), self.ordered_keys.len()));
            }
            if let Some(v) = row.iter().find(|&&v| Choice::from_index(v).is_none()) {
                return bad(format!("row {i} has entry {v}, expected 1 or 2"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let s: SelectionSchedule = serde_json::from_slice(bytes)?;
        s.validate()?;
        Ok(s)
    }

    /// Header row of layer keys, then one row of 1/2 entries per step.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.ordered_keys)?;
        for row in &self.choices {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(buf)
    }

    /// SHA-256 of the JSON form.
    pub fn digest(&self) -> Result<String> {
        Ok(util::sha256_hex(&self.to_json()?))
    }
}

/// Fixed-weight arithmetic merge; the same for every step and layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergePlan {
    pub steps: usize,
    pub layers: Vec<String>,
    pub w_content: f64,
    pub w_style: f64,
    pub config: GateConfig,
    pub energy_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Plan {
    Schedule(SelectionSchedule),
    Merge(MergePlan),
}

impl Plan {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        match self {
            Plan::Schedule(s) => s.to_json(),
            Plan::Merge(m) => Ok(serde_json::to_vec(m)?),
        }
    }

    pub fn schedule(&self) -> Option<&SelectionSchedule> {
        match self {
            Plan::Schedule(s) => Some(s),
            Plan::Merge(_) => None,
        }
    }
}

fn energies_by_key(pair: &AlignedPair, report: &[energy::LayerEnergyReport]) -> Result<Vec<(f64, f64)>> {
    let by_key: BTreeMap<&str, &energy::LayerEnergyReport> = report.iter().map(|l| (l.key.as_str(), l)).collect();
    pair.ordered_keys()
        .iter()
        .map(|k| {
            let l = by_key.get(k.as_str()).ok_or_else(|| Error::MissingEnergy(k.clone()))?;
            for v in [l.e_content, l.e_style] {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::InvalidArgument(format!("layer `{k}`: energy {v} is not a finite non-negative value")));
                }
            }
            Ok((l.e_content, l.e_style))
        })
        .collect()
}

/// Gate every (step, layer) cell from per-layer scores. Rows are step-major.
pub fn schedule_from_scores(
    keys: &[String],
    scores: &[(f64, f64)],
    config: &GateConfig,
    energy_digest: String,
    par: Parallelism,
) -> Result<SelectionSchedule> {
    config.validate()?;
    if keys.len() != scores.len() {
        return Err(Error::DimMismatch(keys.len(), scores.len()));
    }
    let gamma_trace: Vec<f64> = (0..config.steps).map(|i| gamma_unchecked(i, config)).collect();
    let choices = par.map(&gamma_trace, |&g| {
        scores.iter().map(|&(ec, es)| select(ec, es, g).index()).collect()
    });
    Ok(SelectionSchedule {
        steps: config.steps,
        ordered_keys: keys.to_vec(),
        choices,
        gamma_trace,
        config: config.clone(),
        energy_digest,
    })
}

pub fn plan(pair: &AlignedPair, energies: &EnergyReport, config: &GateConfig) -> Result<SelectionSchedule> {
    plan_with(pair, energies, config, Parallelism::default())
}

pub fn plan_with(pair: &AlignedPair, energies: &EnergyReport, config: &GateConfig, par: Parallelism) -> Result<SelectionSchedule> {
    if config.selector != Selector::Est {
        return Err(Error::InvalidConfig(format!("plan expects selector est, got {}", config.selector)));
    }
    let scores = energies_by_key(pair, &energies.layers)?;
    schedule_from_scores(pair.ordered_keys(), &scores, config, energies.digest()?, par)
}

fn constant_schedule(pair: &AlignedPair, config: &GateConfig, choice: Choice, energy_digest: String) -> Result<SelectionSchedule> {
    config.validate()?;
    Ok(SelectionSchedule {
        steps: config.steps,
        ordered_keys: pair.ordered_keys().to_vec(),
        choices: vec![vec![choice.index(); pair.len()]; config.steps],
        gamma_trace: (0..config.steps).map(|i| gamma_unchecked(i, config)).collect(),
        config: config.clone(),
        energy_digest,
    })
}

pub fn plan_baseline(pair: &AlignedPair, energies: &EnergyReport, config: &GateConfig) -> Result<Plan> {
    plan_baseline_with(pair, energies, config, Parallelism::default())
}

pub fn plan_baseline_with(pair: &AlignedPair, energies: &EnergyReport, config: &GateConfig, par: Parallelism) -> Result<Plan> {
    config.validate()?;
    let digest = energies.digest()?;
    let topk_scores = || -> Result<Vec<(f64, f64)>> {
        let report = energy::topk_report(pair, config.k_fraction, par)?;
        Ok(report.iter().map(|l| (l.e_content, l.e_style)).collect())
    };
    let keys = pair.ordered_keys();
    let schedule = match config.selector {
        Selector::Est => {
            return Err(Error::InvalidConfig("est is not a baseline selector; use plan".into()));
        }
        Selector::StyleOnly => constant_schedule(pair, config, Choice::Style, digest)?,
        Selector::SubjectOnly => constant_schedule(pair, config, Choice::Subject, digest)?,
        Selector::DirectMerge => {
            return Ok(Plan::Merge(MergePlan {
                steps: config.steps,
                layers: keys.to_vec(),
                w_content: config.direct_weights.0,
                w_style: config.direct_weights.1,
                config: config.clone(),
                energy_digest: digest,
            }));
        }
        Selector::KloraLike => schedule_from_scores(keys, &topk_scores()?, &config.with_d(1.0), digest, par)?,
        Selector::StyleTime => schedule_from_scores(keys, &topk_scores()?, config, digest, par)?,
        Selector::EnergyTime => {
            let scores = energies_by_key(pair, &energies.layers)?;
            schedule_from_scores(keys, &scores, &config.with_d(1.0), digest, par)?
        }
    };
    Ok(Plan::Schedule(schedule))
}

/// Dispatch on the configured selector.
pub fn build_plan(pair: &AlignedPair, energies: &EnergyReport, config: &GateConfig, par: Parallelism) -> Result<Plan> {
    match config.selector {
        Selector::Est => plan_with(pair, energies, config, par).map(Plan::Schedule),
        _ => plan_baseline_with(pair, energies, config, par),
    }
}
