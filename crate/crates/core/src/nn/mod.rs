//! Layer graphs with forward evaluation and reverse passes.
//!
//! A [`Network`] is an explicit, ordered list of [`LayerSpec`]s. [`forward`]
//! returns the output together with a [`ForwardTrace`] of cached activations;
//! [`backward_input`] and [`backward_params`] turn an output gradient into
//! gradients with respect to the network input or its parameters.

mod activation;
mod batchnorm;
mod layer;
mod network;


pub use activation::{activation, activation_grad, Activation};
pub use batchnorm::{batchnorm_forward, BnMode, BN_EPS, BN_MOMENTUM};
pub use layer::LayerSpec;
pub use network::{
    backward_both, backward_input, backward_params, forward, ForwardTrace, Network, ParamGrads, RunningStats,
    WEIGHT_INIT_STD,
};
