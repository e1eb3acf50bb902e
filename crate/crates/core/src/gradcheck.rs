//! Central finite-difference gradient checking.
//!
//! The project-wide gradient oracle: any scalar function built on a tape can
//! be checked against (f(x+h) - f(x-h)) / (2h) per parameter entry.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

pub struct GradCheckReport {
    /// (parameter name, max relative error, entries checked)
    pub per_tensor: Vec<(String, f64, usize)>,
    pub max_rel_err: f64,
}

pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Entries sampled per tensor; tensors at or below this size are checked
    /// exhaustively.
    pub subsample: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            tol: 1e-4,
            subsample: 64,
            seed: 0x5eed,
        }
    }
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Checks the analytic gradient of `f` (a tape-built scalar) against central
/// finite differences at every parameter of `store`, on a random subsample of
/// at least `opts.subsample` entries per tensor.
pub fn finite_diff_check<F>(
    f: F,
    store: &mut ParamStore,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&opts.h) {
        return Err(Error::invalid(
            "finite_diff_check",
            format!("step {} outside [1e-7, 1e-3]", opts.h),
        ));
    }

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: tape.shape(out).to_vec(),
            });
        }
        let v = tape.value(out).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_diff_check",
            });
        }
        Ok(v)
    };

    // Analytic gradients from one backward pass.
    store.zero_grads();
    {
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        crate::tape::backward(out, &mut tape, store)?;
    }
    let analytic: Vec<(String, Vec<f64>)> = store
        .iter()
        .map(|(n, t)| (n.to_string(), t.grad().unwrap_or(&[]).to_vec()))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut per_tensor = Vec::new();
    let mut max_rel = 0.0f64;

    for (name, grad) in &analytic {
        let numel = grad.len();
        let mut indices: Vec<usize> = (0..numel).collect();
        if numel > opts.subsample {
            indices.shuffle(&mut rng);
            indices.truncate(opts.subsample);
            indices.sort_unstable();
        }
        let mut tensor_max = 0.0f64;
        for &i in &indices {
            let orig = store.get(name)?.data()[i];
            store.get_mut(name)?.data_mut()[i] = orig + opts.h;
            let fp = eval(store)?;
            store.get_mut(name)?.data_mut()[i] = orig - opts.h;
            let fm = eval(store)?;
            store.get_mut(name)?.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * opts.h);
            let denom = grad[i].abs().max(numeric.abs()).max(1e-6);
            let rel = (grad[i] - numeric).abs() / denom;
            tensor_max = tensor_max.max(rel);
        }
        max_rel = max_rel.max(tensor_max);
        per_tensor.push((name.clone(), tensor_max, indices.len()));
    }

    Ok(GradCheckReport {
        per_tensor,
        max_rel_err: max_rel,
    })
}
