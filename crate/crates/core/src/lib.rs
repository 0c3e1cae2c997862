pub mod cgpnet;
pub mod goinet;
pub mod gtfnet;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod scalar;
pub mod scene;
pub mod training;

pub use scalar::Scalar;

pub type Point64 = scene::Point<f64>;
pub type Scenario64 = scene::Scenario<f64>;
pub type Scenario32 = scene::Scenario<f32>;
pub type Tensor = numerics::NdArray<f64>;
pub type Tensor32 = numerics::NdArray<f32>;
pub type Tape64 = numerics::Tape<f64>;
pub type Tape32 = numerics::Tape<f32>;
pub type ParameterStore64 = numerics::ParameterStore<f64>;
pub type ParameterStore32 = numerics::ParameterStore<f32>;
pub type PreparedScenario64 = model::PreparedScenario<f64>;
pub type EvalRecord64 = metrics::EvalRecord<f64>;
pub type Submission64 = metrics::Submission<f64>;
pub type Checkpoint64 = training::Checkpoint<f64>;
