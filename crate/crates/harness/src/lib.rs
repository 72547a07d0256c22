pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod oracle;
pub mod scene;
pub mod slam;

pub use error::{HarnessError, Result};
