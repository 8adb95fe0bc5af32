pub mod attention;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod occlusion_gt;
pub mod oga;
pub mod pdo;
pub mod supervision;
pub mod tensor;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{GoatConfig, GoatModel, GoatOutput, Prediction};
pub use tensor::{Element, Gradients, Tape, Tensor};
