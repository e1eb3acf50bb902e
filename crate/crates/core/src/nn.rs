//! Layer-level building blocks on top of the raw op set.
//!
//! A [`FwdCtx`] owns the tape for one forward pass and borrows the parameter
//! and state stores. Batch-norm layers read running statistics from the state
//! store in eval mode; in train mode they use batch statistics and stage the
//! observed (mean, var) so the training loop can fold them into the running
//! estimates once per step.

use rand::Rng;

use crate::error::Result;
use crate::params::{init_conv_weight, init_linear_weight, Mode, ParamStore, StateStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch statistics observed by one batch-norm call in train mode.
pub struct BnStats {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub struct FwdCtx<'a> {
    pub tape: Tape,
    pub store: &'a ParamStore,
    pub state: &'a StateStore,
    pub mode: Mode,
    pub bn_stats: Vec<BnStats>,
}

impl<'a> FwdCtx<'a> {
    pub fn new(store: &'a ParamStore, state: &'a StateStore, mode: Mode) -> Self {
        FwdCtx {
            tape: Tape::new(),
            store,
            state,
            mode,
            bn_stats: Vec::new(),
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        self.tape.param(self.store, name)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    /// x (rows, in) -> (rows, out) through `{prefix}.w` and `{prefix}.b`.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let y = self.tape.matmul(x, w)?;
        let bias_name = format!("{prefix}.b");
        if self.store.contains(&bias_name) {
            let b = self.param(&bias_name)?;
            self.tape.add_row_vec(y, b)
        } else {
            Ok(y)
        }
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        self.tape.layer_norm(x, gamma, beta, LN_EPS)
    }

    /// Batch norm over all axes but the channel (last) axis.
    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        match self.mode {
            Mode::Train => {
                let (mean, var) = self.tape.channel_stats(x);
                self.bn_stats.push(BnStats {
                    prefix: prefix.to_string(),
                    mean: mean.clone(),
                    var: var.clone(),
                });
                self.tape.batch_norm(x, gamma, beta, &mean, &var, BN_EPS, true)
            }
            Mode::Eval => {
                let mean = self.state.get(&format!("{prefix}.running_mean"))?.data().to_vec();
                let var = self.state.get(&format!("{prefix}.running_var"))?.data().to_vec();
                self.tape.batch_norm(x, gamma, beta, &mean, &var, BN_EPS, false)
            }
        }
    }

    pub fn conv2d(&mut self, x: Var, prefix: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let bias_name = format!("{prefix}.b");
        let bias = if self.store.contains(&bias_name) {
            Some(self.param(&bias_name)?)
        } else {
            None
        };
        self.tape.conv2d(x, w, bias, stride, pad)
    }

    pub fn dwconv1d(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        self.tape.dwconv1d(x, w)
    }
}

/// Folds staged batch statistics into the running estimates:
/// running <- (1 - momentum) * running + momentum * batch.
pub fn apply_bn_updates(state: &mut StateStore, stats: &[BnStats]) -> Result<()> {
    for s in stats {
        let rm = state.get_mut(&format!("{}.running_mean", s.prefix))?;
        for (r, b) in rm.data_mut().iter_mut().zip(&s.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        let rv = state.get_mut(&format!("{}.running_var", s.prefix))?;
        for (r, b) in rv.data_mut().iter_mut().zip(&s.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
    Ok(())
}

/// Averages per-sample batch statistics (same layer order required) so the
/// running update is independent of how the batch was parallelized.
pub fn merge_bn_stats(per_sample: Vec<Vec<BnStats>>) -> Vec<BnStats> {
    let mut iter = per_sample.into_iter();
    let mut merged = match iter.next() {
        Some(first) => first,
        None => return Vec::new(),
    };
    let mut count = 1.0;
    for sample in iter {
        debug_assert_eq!(sample.len(), merged.len());
        for (m, s) in merged.iter_mut().zip(sample) {
            debug_assert_eq!(m.prefix, s.prefix);
            for (a, b) in m.mean.iter_mut().zip(&s.mean) {
                *a += b;
            }
            for (a, b) in m.var.iter_mut().zip(&s.var) {
                *a += b;
            }
        }
        count += 1.0;
    }
    for m in merged.iter_mut() {
        m.mean.iter_mut().for_each(|v| *v /= count);
        m.var.iter_mut().for_each(|v| *v /= count);
    }
    merged
}

// ── initialization ───────────────────────────────────────────────────

pub fn init_linear(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    store.register(&format!("{prefix}.w"), init_linear_weight(fan_in, fan_out, rng))?;
    store.register(&format!("{prefix}.b"), Tensor::zeros(&[fan_out]))
}

/// Linear layer whose weights and bias start at zero (residual heads).
pub fn init_linear_zero(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    store.register(&format!("{prefix}.w"), Tensor::zeros(&[fan_in, fan_out]))?;
    store.register(&format!("{prefix}.b"), Tensor::zeros(&[fan_out]))
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<()> {
    store.register(&format!("{prefix}.gamma"), Tensor::ones(&[dim]))?;
    store.register(&format!("{prefix}.beta"), Tensor::zeros(&[dim]))
}

pub fn init_batch_norm(
    store: &mut ParamStore,
    state: &mut StateStore,
    prefix: &str,
    dim: usize,
) -> Result<()> {
    store.register(&format!("{prefix}.gamma"), Tensor::ones(&[dim]))?;
    store.register(&format!("{prefix}.beta"), Tensor::zeros(&[dim]))?;
    state.set(&format!("{prefix}.running_mean"), Tensor::zeros(&[dim]));
    state.set(&format!("{prefix}.running_var"), Tensor::ones(&[dim]));
    Ok(())
}

pub fn init_conv2d(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
    bias: bool,
) -> Result<()> {
    store.register(&format!("{prefix}.w"), init_conv_weight(kh, kw, cin, cout, rng))?;
    if bias {
        store.register(&format!("{prefix}.b"), Tensor::zeros(&[cout]))?;
    }
    Ok(())
}

/// Depth-wise kernel-3 conv weights, identity-leaning init (center tap 1).
pub fn init_dwconv1d(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, dim: usize) -> Result<()> {
    let mut w = Tensor::randn(&[dim, 3], 0.1, rng);
    for c in 0..dim {
        w.data_mut()[c * 3 + 1] += 1.0;
    }
    store.register(&format!("{prefix}.w"), w)
}
