pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod train;
pub mod tsa;
