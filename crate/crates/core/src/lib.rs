//! Training-free LoRA fusion planning.
//!
//! Given a subject (content) adapter and a style adapter, this crate computes
//! per-layer update energies `‖ΔW‖²_F`, turns a pair of backbone embeddings into
//! a bounded similarity prior, and produces a timestep × layer schedule that
//! picks one adapter per layer per denoising step. Schedules can be rendered as
//! PGM heatmaps, summarized, and baked into per-step adapter files.
//!
//! Data-parallel loops (per-layer energies, per-step selection, per-step bake)
//! run on rayon when the `parallel` feature is enabled (the default) and fall
//! back to plain iterators otherwise. Output ordering never depends on the
//! execution mode.

pub mod adapter;
pub mod discrepancy;
pub mod energy;
pub mod error;
pub mod exec;
pub mod export;
pub mod gate;
pub mod matrix;
pub mod spectral;
pub mod util;

pub use adapter::{align, load_adapter, write_adapter, AlignedPair, LoraAdapter, LoraLayer, Role};
pub use discrepancy::{discrepancy, load_embedding, DiscrepancyScore, EmbeddingVector};
pub use energy::{delta_energy, energy_report, frobenius_sq, topk_abs_sum, EnergyMethod, EnergyReport, LayerEnergyReport};
pub use error::{Error, Result};
pub use exec::Parallelism;
pub use export::{bake, bake_all, render_heatmap, stats, BakeManifest, ScheduleStats};
pub use gate::{gamma, onset_step, plan, plan_baseline, select, Choice, GateConfig, MergePlan, Onset, Plan, SelectionSchedule, Selector};
pub use matrix::Matrix;
