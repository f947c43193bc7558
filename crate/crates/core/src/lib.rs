pub mod data;
pub mod experiments;
pub mod generators;
pub mod hw_cost;
pub mod lfsr;
pub mod mask;
pub mod nn;
