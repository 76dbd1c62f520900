pub mod artifact;
pub mod bayes;
pub mod channels;
pub mod cognitive;
pub mod config;
pub mod doe;
pub mod hyperband;
pub mod narx;
pub mod pipeline;
pub mod plant;
pub mod sil;
pub mod structure;
