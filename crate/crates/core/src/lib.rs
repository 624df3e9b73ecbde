pub mod checkpoint;
pub mod convstem;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod fpn;
pub mod imageio;
pub mod params;
pub mod pipeline;
pub mod report;
pub mod sampler;
pub mod tensor;
pub mod transformer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
