//! Weakly-supervised disentanglement of identity and expression for
//! registered 3D face meshes.

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod mesh;
pub mod networks;
pub mod neutral_bank;
pub mod recoupler;
pub mod trainer;

pub use error::{Result, WsdfError};
