//! EfficientViT-M models on top of `evit-tensor`: layers, the M0-M5 builder,
//! parameter/FLOP counting, BN folding, weights files, and the analysis and
//! benchmark tools that run on them.

pub mod analysis;
pub mod attention;
pub mod bench;
pub mod blocks;
mod error;
pub mod layers;
pub mod model;
pub mod params;
pub mod report;
pub mod spec;
pub mod weights;

pub use attention::{AttentionKind, AttentionTrace, GroupAttention};
pub use error::{ModelError, Result};
pub use model::{BuildOptions, CountReport, ForwardPass, Model};
pub use params::{ParamId, ParamKind, ParamStore};
pub use report::{Format, Report};
pub use spec::{ModelSpec, Variant};
