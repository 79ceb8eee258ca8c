pub mod data;
pub mod error;
pub mod harness;
pub mod ir;
pub mod profile;
pub mod prune;
pub mod quant;
pub mod tensor;
pub mod trainer;
