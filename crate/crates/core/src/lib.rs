pub mod accounting;
pub mod data;
pub mod freezing;
pub mod harness;
pub mod model;
pub mod tensor;
pub mod train;
