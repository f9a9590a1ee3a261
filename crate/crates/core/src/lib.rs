pub mod basesynth;
pub mod diffcore;
pub mod error;
pub mod evalbench;
pub mod grid;
pub mod kvconfig;
pub mod melio;
pub mod melpipe;
pub mod nn;
pub mod reg_baseline;
pub mod residual;
pub mod sampler;
pub mod scorenet;
pub mod seed;
pub mod toy;

pub use error::{Error, Result};
