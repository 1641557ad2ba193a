pub mod cthmm;
pub mod ctmc;
pub mod ddouble;
pub mod decode;
pub mod esce;
pub mod harness;
pub mod io;
pub mod matexp;
pub use nalgebra;
