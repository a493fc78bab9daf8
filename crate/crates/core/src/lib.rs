pub mod conic;
pub mod dmp_refine;
pub mod error;
pub mod estimator;
pub mod exec_loop;
pub mod friction;
pub mod pipeline;
pub mod scenario;
pub mod simplant;
mod linalg;
pub mod spatial;
pub mod wrench_opt;

pub use error::{Error, Result};
