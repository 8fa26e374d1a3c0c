//! Numerical building blocks for the emissivity networks: a tape-based reverse-mode
//! differentiator over small dense tensors, dense/Fourier/attention layers, a RealNVP flow,
//! Adam, finite-difference gradient checks and a versioned checkpoint format.

pub mod flow;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use flow::{transformed_log_density, FlowConfig, FlowModel};
pub use graph::{Gradients, Graph, Var};
pub use layers::{
    Activation, AttentionConfig, CrossAttention, FnoBlock, FnoBlockConfig, FnoStack, Linear, Mlp,
    MlpConfig, SpectralConv,
};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{Checkpoint, Init, ParamId, ParamStore};
pub use tensor::Tensor;
