pub mod nn;
pub mod pksim;
pub mod vae;
pub mod lasso;
pub mod dataset;
pub mod pipeline;
