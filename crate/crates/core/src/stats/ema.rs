use serde::{Deserialize, Serialize};

use crate::error::{BnError, Result};
use crate::tensor::ChannelStats;

/// How an [`EmaState`] behaves before its first update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaInit {
    /// Start from mean 0, variance 1.
    #[default]
    Standard,
    /// The first update copies the batch statistics verbatim.
    FirstBatch,
}

/// Exponential moving average of batch statistics.
///
/// `mean <- momentum * mean + (1 - momentum) * batch_mean`, likewise for the
/// biased batch variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    momentum: f64,
    update_count: u64,
    init: EmaInit,
    last_count: usize,
}

impl EmaState {
    pub fn new(channels: usize, momentum: f64) -> Result<Self> {
        Self::with_init(channels, momentum, EmaInit::Standard)
    }

    pub fn with_init(channels: usize, momentum: f64, init: EmaInit) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(BnError::InvalidParams(format!("momentum {momentum} outside [0, 1]")));
        }
        Ok(EmaState {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum,
            update_count: 0,
            init,
            last_count: 1,
        })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn update(&mut self, batch: &ChannelStats) -> Result<()> {
        if batch.channels() != self.channels() {
            return Err(BnError::ShapeMismatch(format!(
                "EMA tracks {} channels, batch has {}",
                self.channels(),
                batch.channels()
            )));
        }
        if self.update_count == 0 && self.init == EmaInit::FirstBatch {
            self.mean.copy_from_slice(&batch.mean);
            self.var.copy_from_slice(&batch.var);
        } else {
            let (keep, take) = (self.momentum, 1.0 - self.momentum);
            for (m, b) in self.mean.iter_mut().zip(&batch.mean) {
                *m = keep * *m + take * b;
            }
            for (v, b) in self.var.iter_mut().zip(&batch.var) {
                *v = keep * *v + take * b;
            }
        }
        self.update_count += 1;
        self.last_count = batch.count;
        Ok(())
    }

    /// Current estimate, tagged with the element count of the latest batch.
    pub fn as_stats(&self) -> ChannelStats {
        ChannelStats { mean: self.mean.clone(), var: self.var.clone(), count: self.last_count }
    }
}

/// Pure form of [`EmaState::update`].
pub fn ema_update(state: &EmaState, batch: &ChannelStats) -> Result<EmaState> {
    let mut next = state.clone();
    next.update(batch)?;
    Ok(next)
}
