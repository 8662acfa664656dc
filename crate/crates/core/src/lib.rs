pub mod backbone;
mod bytes;
pub mod checkpoint;
pub mod controlnet;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod moc;
pub mod nn;
pub mod optim;
pub mod run;
pub mod schedule;
pub mod text;
pub mod train;

pub use error::{Error, Result};
