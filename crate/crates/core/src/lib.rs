pub mod attention;
pub mod cli;
pub mod data;
pub mod downstream;
pub mod model;
pub mod pretrain;
pub mod rng;
pub mod tensor;
