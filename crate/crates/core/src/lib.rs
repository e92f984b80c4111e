pub mod amp;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod env;
pub mod error;
pub mod gait;
pub mod latents;
pub mod net;
pub mod policy;
pub mod rewards;
pub mod trainer;

pub use error::{Error, Result};
