use super::{Scalar, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize by batch statistics; moving statistics untouched.
    Train,
    /// Normalize by batch statistics and fold them into the moving statistics.
    Recalibrate,
    /// Normalize by the moving statistics.
    Eval,
}

/// Batch-normalization parameters and statistics for one channel-width bucket.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub moving_mean: Vec<T>,
    pub moving_var: Vec<T>,
    pub eps: T,
    pub width_key: usize,
    /// Number of batches folded into the moving statistics since the last reset.
    pub calibrated_batches: usize,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize, width_key: usize) -> Self {
        Self {
            scale: Tensor::full(&[channels], T::one()),
            shift: Tensor::zeros(&[channels]),
            moving_mean: vec![T::zero(); channels],
            moving_var: vec![T::one(); channels],
            eps: T::of(1e-5),
            width_key,
            calibrated_batches: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    pub fn is_calibrated(&self) -> bool {
        self.calibrated_batches > 0
    }

    pub fn reset_statistics(&mut self) {
        self.moving_mean.iter_mut().for_each(|v| *v = T::zero());
        self.moving_var.iter_mut().for_each(|v| *v = T::one());
        self.calibrated_batches = 0;
    }

    /// Cumulative average over batches seen since the last reset.
    fn fold(&mut self, mean: &[T], var: &[T]) {
        let k = self.calibrated_batches;
        let w = T::one() / T::of((k + 1) as f64);
        for (m, &b) in self.moving_mean.iter_mut().zip(mean) {
            *m = if k == 0 { b } else { *m + (b - *m) * w };
        }
        for (m, &b) in self.moving_var.iter_mut().zip(var) {
            *m = if k == 0 { b } else { *m + (b - *m) * w };
        }
        self.calibrated_batches += 1;
    }
}

/// Applies batch normalization to an N×C×H×W value.
///
/// `scale` and `shift` are the tape variables holding `state.scale` and
/// `state.shift`; they are passed separately so callers decide whether they
/// are tracked parameters or constants.
pub fn batch_norm<'t, T: Scalar>(
    x: &Var<'t, T>,
    scale: &Var<'t, T>,
    shift: &Var<'t, T>,
    state: &mut BatchNormState<T>,
    mode: BnMode,
) -> Result<Var<'t, T>> {
    let c = x.shape().get(1).copied().unwrap_or(0);
    if c != state.channels() {
        return Err(Error::shape("batch_norm", &x.shape(), &[state.channels()]));
    }
    match mode {
        BnMode::Train => Ok(x.batch_norm_batch_stats(scale, shift, state.eps)?.0),
        BnMode::Recalibrate => {
            let (y, mean, var) = x.batch_norm_batch_stats(scale, shift, state.eps)?;
            state.fold(&mean, &var);
            Ok(y)
        }
        BnMode::Eval => batch_norm_eval(x, scale, shift, state),
    }
}

/// Eval-mode normalization; only reads the state.
pub fn batch_norm_eval<'t, T: Scalar>(
    x: &Var<'t, T>,
    scale: &Var<'t, T>,
    shift: &Var<'t, T>,
    state: &BatchNormState<T>,
) -> Result<Var<'t, T>> {
    if !state.is_calibrated() {
        return Err(Error::Uncalibrated(format!(
            "batch-norm bucket {} has no moving statistics",
            state.width_key
        )));
    }
    x.batch_norm_fixed(scale, shift, &state.moving_mean, &state.moving_var, state.eps)
}
