pub mod audio;
pub mod beamform;
pub mod cacgmm;
pub mod cli;
pub mod config;
pub mod error;
pub mod manifests;
pub mod numerics;
pub mod scheduler;
pub mod stft;
pub mod synthbench;
pub mod wpe;

pub use error::{Error, Result};
