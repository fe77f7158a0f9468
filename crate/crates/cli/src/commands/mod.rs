pub mod crop;
pub mod dataset;
pub mod evaluate;
pub mod train;
