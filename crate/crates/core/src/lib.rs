pub mod dialogue;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod seq_model;
pub mod synthetic;
pub mod tensor;
pub mod text;
pub mod train;
