pub mod analysis;
pub mod checks;
pub mod classifier;
pub mod consistency;
pub mod features;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod routing;
pub mod tensor;
pub mod training;
