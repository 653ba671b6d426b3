//! Scalar-conditioned networks by deep parameter interpolation, with
//! baseline conditioning, diffusion and flow-matching training at toy scale.

pub mod autodiff;
pub mod conditioning;
pub mod data;
pub mod diffusion;
pub mod dpi;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod flow;
pub mod interp;
pub mod networks;
pub mod oracle;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use conditioning::Strategy;
pub use dpi::{DualParams, InitScheme};
pub use error::{Error, Result};
pub use interp::{LambdaMode, MonotoneInterpolant};
pub use networks::{ArchSpec, Model, ModelSpec, ScalarCond};
pub use params::{ParamKind, ParamSpec, Scope};
pub use tensor::Tensor;
pub use train::{Checkpoint, LoadedRun, RunConfig, Trainer};
