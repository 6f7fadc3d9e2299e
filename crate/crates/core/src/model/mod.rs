//! The three-path enhancement network and its parameters.

pub mod capture;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod layers;
pub mod net;
pub mod params;
pub mod posenc;

pub use capture::{AttentionCapture, AttentionRecord, AttnKind, AttnSite, BranchKind, SaliencyMap};
pub use cost::{count_params, cost_breakdown, estimate_flops, frames_for_seconds, CostBreakdown};
pub use checkpoint::Checkpoint;
pub use config::{Heads, ModelConfig, OutCaOrder};
pub use layers::{Ctx, Mode};
pub use net::{model_forward, BranchState, ForwardOutput, ModelOutput, TridentBlock, TridentNet};
pub use params::{BnUpdate, Bound, Init, ParamBuilder, ParamId, ParamKind, ParameterStore};
pub use posenc::posenc_2d;
