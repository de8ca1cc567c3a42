//! Network description and execution.

mod net;
mod spec;

pub use net::{Gradients, Network, ParamKind, ParamView, Tape, LATENT_WEIGHT_CLIP};
pub use spec::{
    build_network, build_network_for, ActivationSite, BlockKind, BlockSpec, Downsample, LayerDesc, LayerOp,
    NetworkSpec, Precision, Scale, Variant,
};
