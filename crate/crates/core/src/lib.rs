pub mod codebook;
pub mod corpus;
pub mod embed;
pub mod engine;
pub mod gateway;
pub mod metrics;
pub mod scalar;
pub mod store;
pub mod synth;
pub mod transport;
pub mod util;

pub use scalar::{Rate, Scalar};

pub type Engine = engine::Engine<f64>;
pub type Engine32 = engine::Engine<f32>;
pub type World = engine::World<f64>;
pub type World32 = engine::World<f32>;
