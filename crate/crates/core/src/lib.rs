pub mod dataset;
pub mod dynamic_branch;
pub mod evaluation;
pub mod error;
pub mod exemplars;
pub mod io;
pub mod model;
pub mod numeric;
pub mod par;
pub mod static_branch;
pub mod streaming;
pub mod training;

pub use error::{Error, Result};
pub use par::Exec;
