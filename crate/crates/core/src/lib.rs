pub mod config;
pub mod cycles;
pub mod dsp;
pub mod eval;
pub mod models;
pub mod rng;
pub mod spectral;
pub mod synth;
