pub mod adapters;
pub mod backbone;
pub mod bench;
pub mod error;
pub mod harness;
pub mod model;
pub mod optim;
pub mod pdrs;
pub mod spectral;
pub mod tensor;
