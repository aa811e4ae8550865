//! Enhancement configuration shared by the scheduler, CLI and FFI.

use serde::{Deserialize, Serialize};

use crate::cacgmm::CacgmmConfig;
use crate::error::{Error, Result};
use crate::stft::StftConfig;
use crate::wpe::WpeConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// Same-speaker segments of a recording concatenated up to the batch cap.
    #[default]
    SuperSegment,
    /// One segment per batch, each with its own context.
    OnePerBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnhanceConfig {
    pub stft: StftConfig,
    pub use_wpe: bool,
    pub wpe: WpeConfig,
    pub bss: CacgmmConfig,
    pub noise_class: bool,
    /// Seconds of context on each side of a batch.
    pub context_duration: f64,
    /// Cap on the summed segment duration of a batch, seconds.
    pub max_batch_duration: f64,
    pub mode: BatchMode,
    /// Channel subset, in recording channel order; all channels when `None`.
    pub channels: Option<Vec<usize>>,
    /// Loader threads; 0 loads synchronously on the compute thread.
    pub workers: usize,
    pub queue_capacity: usize,
    /// Echoed in the run summary; the pipeline itself is deterministic.
    pub seed: u64,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self {
            stft: StftConfig::default(),
            use_wpe: true,
            wpe: WpeConfig::default(),
            bss: CacgmmConfig::default(),
            noise_class: true,
            context_duration: 15.0,
            max_batch_duration: 50.0,
            mode: BatchMode::SuperSegment,
            channels: None,
            workers: 0,
            queue_capacity: 2,
            seed: 0,
        }
    }
}

impl EnhanceConfig {
    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.wpe.validate()?;
        if !(self.context_duration >= 0.0) || !self.context_duration.is_finite() {
            return Err(Error::Config("context duration must be a non-negative number".into()));
        }
        if !(self.max_batch_duration > 0.0) || !self.max_batch_duration.is_finite() {
            return Err(Error::Config("max batch duration must be positive".into()));
        }
        if self.bss.iterations == 0 {
            return Err(Error::Config("bss iterations must be ≥ 1".into()));
        }
        if self.bss.block_size == 0 {
            return Err(Error::Config("bss block size must be ≥ 1".into()));
        }
        if self.queue_capacity == 0 {
            return Err(Error::Config("queue capacity must be ≥ 1".into()));
        }
        if let Some(ch) = &self.channels {
            if ch.is_empty() {
                return Err(Error::Config("channel subset is empty".into()));
            }
            let mut sorted = ch.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != ch.len() {
                return Err(Error::Config("channel subset lists a channel twice".into()));
            }
        }
        Ok(())
    }
}
