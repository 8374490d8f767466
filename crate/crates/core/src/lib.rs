pub mod autodiff;
pub mod data;
pub mod explain;
pub mod graph;
pub mod layers;
pub mod scalar;
pub mod train;

pub use scalar::{Precision, Scalar};

pub type Matrix64 = autodiff::Matrix<f64>;
pub type Matrix32 = autodiff::Matrix<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
pub type ParamStore32 = autodiff::ParamStore<f32>;
pub type Dataset64 = data::DatasetBundle<f64>;
pub type Dataset32 = data::DatasetBundle<f32>;
pub type Checkpoint64 = data::Checkpoint<f64>;
pub type Checkpoint32 = data::Checkpoint<f32>;
