//! Denoisers: the exact posterior-mean denoiser over a finite support and a
//! trainable noise-predicting MLP, plus the optimizer that trains it.

mod adam;
mod closed_form;
mod mlp;

use std::sync::Arc;

pub use adam::{Adam, AdamState};
pub use closed_form::ClosedFormDenoiser;
pub use mlp::{
    format_checkpoint, load_checkpoint, parse_checkpoint, save_checkpoint, Batch, MlpArch,
    MlpDenoiser, CHECKPOINT_MAGIC,
};

use crate::data::Condition;
use crate::error::Result;

/// Anything that can predict the injected noise for a batch of noisy states
/// sharing one timestep.
pub trait Denoiser: Sync {
    fn dim(&self) -> usize;

    /// Writes `n x d` noise predictions for the row-major states `xt` into `out`.
    fn predict_eps(&self, xt: &[f64], t: usize, cond: Condition, out: &mut [f64]) -> Result<()>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn predict_eps(&self, xt: &[f64], t: usize, cond: Condition, out: &mut [f64]) -> Result<()> {
        (**self).predict_eps(xt, t, cond, out)
    }
}

/// Frozen copy of the parameters at the start of fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainedSnapshot {
    params0: Arc<[f64]>,
}

impl PretrainedSnapshot {
    pub fn new(params: &[f64]) -> Self {
        Self {
            params0: params.into(),
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params0
    }
}
