pub mod attention;
pub mod cli;
pub mod datapipe;
pub mod encodings;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod training;
