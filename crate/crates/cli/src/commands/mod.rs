pub mod count;
pub mod eval;
pub mod gen;
pub mod preprocess;
pub mod train;
