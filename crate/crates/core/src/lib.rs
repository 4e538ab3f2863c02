pub mod bench;
pub mod digest;
pub mod dp;
pub mod engine;
pub mod ensemble;
pub mod filter;
pub mod manifest;
pub mod math;
pub mod rng;
pub mod sharding;
pub mod submodel;
pub mod synth;
pub mod workspace;
