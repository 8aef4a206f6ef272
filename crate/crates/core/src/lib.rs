pub mod data;
pub mod drift;
pub mod error;
pub mod eval;
pub mod loss;
pub mod sampling;
pub mod towers;
pub mod trainer;
