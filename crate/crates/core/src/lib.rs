pub mod dynamics;
pub mod error;
pub mod estimate;
pub mod harness;
pub mod measure;
pub mod noise;
pub mod qcore;
pub mod randsrc;
pub mod resample;

pub use error::{Result, XpvError};
