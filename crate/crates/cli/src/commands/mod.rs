pub mod data;
pub mod eval;
pub mod generate;
pub mod impute;
pub mod selftest;
pub mod sweep;
pub mod train;
