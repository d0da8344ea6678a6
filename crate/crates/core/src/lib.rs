//! Trainable nonlinear reaction-diffusion networks for image restoration.

pub mod data_terms;
pub mod diffusion;
pub mod error;
pub mod filters;
pub mod gradcheck;
pub mod image;
pub mod influence;
pub mod io;
pub mod training;

pub use data_terms::{ProblemKind, QuantBox};
pub use diffusion::{infer, Model, Observation, StageParams};
pub use error::{Result, TnrdError};
pub use filters::{DctBasis, FilterAtom};
pub use image::{Boundary, Image, Kernel};
pub use influence::{InfluenceFunction, RbfKind, RbfSpec};
pub use training::{plain_init, train, Scheme, TrainConfig, TrainingSample};
