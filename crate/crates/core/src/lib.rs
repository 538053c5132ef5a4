pub mod autodiff;
pub mod discovery;
pub mod gradcheck;
pub mod lbm;
pub mod mask;
pub mod models;
pub mod parallel;
pub mod series;
pub mod synth;
