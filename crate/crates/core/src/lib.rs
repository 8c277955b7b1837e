//! Training-free separation of dynamic and static content in multi-view
//! reconstructions, driven by attention maps, depth, per-pixel confidence and
//! camera poses from a frozen feed-forward reconstruction network.

pub mod attention;
pub mod cli;
pub mod consistency;
pub mod eval;
pub mod fsutil;
pub mod geometry;
pub mod mask;
pub mod pipeline;
pub mod purify;
pub mod scene;
pub mod spatial;
pub mod synth;
pub mod tensor;
