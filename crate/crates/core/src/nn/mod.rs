//! Minimal differentiable function-approximator stack.
//!
//! Everything downstream (the vector-field models, the guidance nets, the SAC
//! actor/critics) is built from [`ParamNet`]: a flat `Vec<f64>` parameter
//! vector plus a layer description. Forward passes record a [`GradTape`];
//! [`ParamNet::backward`] replays it for exact reverse-mode gradients, which
//! the test suite checks against central finite differences.

mod adam;
mod attention;
pub mod encode;
pub mod gradcheck;
mod net;

pub use adam::Adam;
pub use attention::AttnConfig;
pub use net::{sigmoid, softplus, Activation, ArchTag, GradTape, Gradients, LayerSpec, ParamNet};
