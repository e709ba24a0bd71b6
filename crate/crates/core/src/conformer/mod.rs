//! Dual-branch CNN/transformer classifier with bidirectional feature coupling.

mod config;
pub mod layers;
mod model;
mod params;

pub use config::ConformerConfig;
pub use layers::{Bindings, Ctx, Mode};
pub use model::{combine_logits, combine_logits_graph, AttentionStack, Conformer, ForwardOutput, GraphOutput};
pub use params::ParamStore;

#[cfg(test)]
mod tests;
