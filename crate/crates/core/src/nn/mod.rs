//! Gradient tape, embedding network and optimiser.

pub mod adam;
pub mod net;
pub mod params;
pub mod tape;

pub use adam::{adam_step, lr_schedule, AdamHyper, AdamState};
pub use net::{embed, forward_embeddings, standardize, EmbedNetConfig, EmbeddingMatrix};
pub use params::{ParamGrads, ParamStore, ParamVars};
pub use tape::{Gradients, Tape, Var};
