//! A desk-scale mixture-of-experts laboratory.
//!
//! The crate contains a small deterministic autodiff substrate
//! ([`numeric`]), a residual MoE tower with top-k routing ([`moe`]), the
//! training objective including the intra-layer specialization and
//! cross-layer coupling regularizers ([`losses`]), executable checkers for
//! the accompanying propositions and theorems ([`theory`]), a synthetic
//! corpus with a planted token-to-expert allocation ([`synth`]), a
//! deterministic AdamW trainer with routing diagnostics ([`trainer`]), and a
//! path-aware expert placement simulator ([`placement`]).

pub mod error;
pub mod losses;
pub mod moe;
pub mod numeric;
pub mod placement;
pub mod synth;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
pub use losses::{LossBreakdown, LossWeights};
pub use moe::{MoeConfig, MoeModel, RoutingTrace};
pub use numeric::{Graph, ParamStore, Rng, Tensor};
pub use placement::{CoActivationGraph, CostReport, Placement};
pub use synth::{Corpus, LatentAllocation, SynthConfig};
pub use theory::BoundReport;
pub use trainer::{MetricsRow, TrainConfig};
