pub mod audio;
pub mod config;
pub mod dsp;
pub mod eval;
pub mod inference;
pub mod model;
pub mod noise;
pub mod synth;
pub mod tensor;
pub mod training;
