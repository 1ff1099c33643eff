pub mod budget;
pub mod eval;
pub mod gen;
pub mod infer;
pub mod plan;
pub mod train;
