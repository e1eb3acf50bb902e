//! Selective-scan state space machinery.
//!
//! A diagonal state matrix is parameterized as A = -exp(A_log) so it stays
//! strictly negative, which keeps |exp(delta*A)| < 1 for any positive step.
//! The per-token step delta, input matrix B and readout C are projected from
//! the token itself; discretization follows the zero-order-hold rule with a
//! Taylor branch for |delta*A| below 1e-6.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{self, FwdCtx};
use crate::ops::{softplus_inv, zoh_phi, UnaryKind};
use crate::params::ParamStore;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanDirection {
    Forward,
    Backward,
}

/// Zero-order-hold discretization of per-channel scalar dynamics:
/// abar = exp(delta*a), bbar = (delta*a)^{-1} (exp(delta*a) - 1) * delta * b.
pub fn zoh_discretize(a: &[f64], b: &[f64], delta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(delta > 0.0) {
        return Err(Error::invalid(
            "zoh_discretize",
            format!("step must be positive, got {delta}"),
        ));
    }
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "zoh_discretize",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: "zoh_discretize",
        });
    }
    let mut abar = Vec::with_capacity(a.len());
    let mut bbar = Vec::with_capacity(a.len());
    for (&ai, &bi) in a.iter().zip(b) {
        let z = delta * ai;
        abar.push(z.exp());
        bbar.push(zoh_phi(z) * delta * bi);
    }
    Ok((abar, bbar))
}

/// Parameter names for one scan direction over `dim` channels with an
/// `n_state`-dimensional latent per channel.
#[derive(Clone, Debug)]
pub struct SsmParams {
    pub prefix: String,
    pub dim: usize,
    pub n_state: usize,
}

impl SsmParams {
    pub fn new(prefix: &str, dim: usize, n_state: usize) -> Self {
        SsmParams {
            prefix: prefix.to_string(),
            dim,
            n_state,
        }
    }

    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        dim: usize,
        n_state: usize,
    ) -> Result<Self> {
        // S4-style: A = -exp(A_log) with A_log over log(1..=N) per channel.
        let mut a_log = Tensor::zeros(&[dim, n_state]);
        for c in 0..dim {
            for n in 0..n_state {
                a_log.data_mut()[c * n_state + n] = ((n + 1) as f64).ln();
            }
        }
        store.register(&format!("{prefix}.a_log"), a_log)?;
        store.register(&format!("{prefix}.d"), Tensor::ones(&[dim]))?;
        store.register(
            &format!("{prefix}.w_b"),
            Tensor::randn(&[dim, n_state], (1.0 / dim as f64).sqrt(), rng),
        )?;
        store.register(
            &format!("{prefix}.w_c"),
            Tensor::randn(&[dim, n_state], (1.0 / dim as f64).sqrt(), rng),
        )?;
        store.register(
            &format!("{prefix}.w_dt"),
            Tensor::randn(&[dim, dim], (1.0 / dim as f64).sqrt() * 0.1, rng),
        )?;
        // softplus(bias) ~ 0.01: small positive steps at init.
        store.register(
            &format!("{prefix}.b_dt"),
            Tensor::full(&[dim], softplus_inv(0.01)),
        )?;
        Ok(SsmParams::new(prefix, dim, n_state))
    }
}

/// Runs the discrete recurrence over a (L, C) sequence with input-dependent
/// delta, B and C. The backward direction scans the reversed sequence and
/// re-reverses its output.
pub fn selective_scan(
    ctx: &mut FwdCtx,
    x: Var,
    p: &SsmParams,
    dir: ScanDirection,
) -> Result<Var> {
    let shape = ctx.tape.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != p.dim {
        return Err(Error::ShapeMismatch {
            op: "selective_scan",
            lhs: shape,
            rhs: vec![0, p.dim],
        });
    }
    let xseq = match dir {
        ScanDirection::Forward => x,
        ScanDirection::Backward => ctx.tape.flip_rows(x)?,
    };
    let a_log = ctx.param(&format!("{}.a_log", p.prefix))?;
    let a_exp = ctx.tape.unary(UnaryKind::Exp, a_log)?;
    let a = ctx.tape.neg(a_exp)?;
    let d = ctx.param(&format!("{}.d", p.prefix))?;
    let w_b = ctx.param(&format!("{}.w_b", p.prefix))?;
    let w_c = ctx.param(&format!("{}.w_c", p.prefix))?;
    let w_dt = ctx.param(&format!("{}.w_dt", p.prefix))?;
    let b_dt = ctx.param(&format!("{}.b_dt", p.prefix))?;

    let dt_raw = ctx.tape.matmul(xseq, w_dt)?;
    let dt_raw = ctx.tape.add_row_vec(dt_raw, b_dt)?;
    let delta = ctx.tape.softplus(dt_raw)?;
    let b = ctx.tape.matmul(xseq, w_b)?;
    let c = ctx.tape.matmul(xseq, w_c)?;

    let y = ctx.tape.ssm_scan(xseq, delta, a, b, c, d)?;
    match dir {
        ScanDirection::Forward => Ok(y),
        ScanDirection::Backward => ctx.tape.flip_rows(y),
    }
}

/// Sum-merge of a forward and a backward scan, each with its own parameters.
pub fn bidirectional_scan(
    ctx: &mut FwdCtx,
    x: Var,
    p_fwd: &SsmParams,
    p_bwd: &SsmParams,
) -> Result<Var> {
    let f = selective_scan(ctx, x, p_fwd, ScanDirection::Forward)?;
    let b = selective_scan(ctx, x, p_bwd, ScanDirection::Backward)?;
    ctx.tape.add(f, b)
}

/// The sequence block scanned inside every decoder stage:
/// Linear(Norm(z)) -> SiLU(DWConv) -> bidirectional scan -> Linear(LayerNorm).
/// The inner width is `ratio * dim`; the gate branch is not used.
#[derive(Clone, Debug)]
pub struct Ss2d {
    pub prefix: String,
    pub dim: usize,
    pub inner: usize,
    pub scan_fwd: SsmParams,
    pub scan_bwd: SsmParams,
}

impl Ss2d {
    pub fn new(prefix: &str, dim: usize, ratio: usize, n_state: usize) -> Self {
        let inner = dim * ratio;
        Ss2d {
            prefix: prefix.to_string(),
            dim,
            inner,
            scan_fwd: SsmParams::new(&format!("{prefix}.scan_fwd"), inner, n_state),
            scan_bwd: SsmParams::new(&format!("{prefix}.scan_bwd"), inner, n_state),
        }
    }

    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        dim: usize,
        ratio: usize,
        n_state: usize,
    ) -> Result<Self> {
        let inner = dim * ratio;
        nn::init_layer_norm(store, &format!("{prefix}.norm_in"), dim)?;
        nn::init_linear(store, rng, &format!("{prefix}.in_proj"), dim, inner)?;
        nn::init_dwconv1d(store, rng, &format!("{prefix}.dwconv"), inner)?;
        SsmParams::init(store, rng, &format!("{prefix}.scan_fwd"), inner, n_state)?;
        SsmParams::init(store, rng, &format!("{prefix}.scan_bwd"), inner, n_state)?;
        nn::init_layer_norm(store, &format!("{prefix}.norm_out"), inner)?;
        nn::init_linear(store, rng, &format!("{prefix}.out_proj"), inner, dim)?;
        Ok(Ss2d::new(prefix, dim, ratio, n_state))
    }

    /// z (J, C) -> (J, C).
    pub fn forward(&self, ctx: &mut FwdCtx, z: Var, bidirectional: bool) -> Result<Var> {
        let z = ctx.layer_norm(z, &format!("{}.norm_in", self.prefix))?;
        let z = ctx.linear(z, &format!("{}.in_proj", self.prefix))?;
        let z = ctx.dwconv1d(z, &format!("{}.dwconv", self.prefix))?;
        let z = ctx.tape.silu(z)?;
        let scanned = if bidirectional {
            bidirectional_scan(ctx, z, &self.scan_fwd, &self.scan_bwd)?
        } else {
            selective_scan(ctx, z, &self.scan_fwd, ScanDirection::Forward)?
        };
        let y = ctx.layer_norm(scanned, &format!("{}.norm_out", self.prefix))?;
        ctx.linear(y, &format!("{}.out_proj", self.prefix))
    }
}

/// SS2D with the residual FFN tail: y' = z + SS2D(z);
/// out = y' + FFN(LayerNorm(y')).
#[derive(Clone, Debug)]
pub struct VssBlock {
    pub prefix: String,
    pub ss2d: Ss2d,
}

impl VssBlock {
    pub fn new(prefix: &str, dim: usize, ssm_ratio: usize, n_state: usize) -> Self {
        VssBlock {
            prefix: prefix.to_string(),
            ss2d: Ss2d::new(&format!("{prefix}.ss2d"), dim, ssm_ratio, n_state),
        }
    }

    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        dim: usize,
        ssm_ratio: usize,
        n_state: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        Ss2d::init(store, rng, &format!("{prefix}.ss2d"), dim, ssm_ratio, n_state)?;
        nn::init_layer_norm(store, &format!("{prefix}.ffn_norm"), dim)?;
        nn::init_linear(store, rng, &format!("{prefix}.ffn.fc1"), dim, dim * mlp_ratio)?;
        nn::init_linear(store, rng, &format!("{prefix}.ffn.fc2"), dim * mlp_ratio, dim)?;
        Ok(VssBlock::new(prefix, dim, ssm_ratio, n_state))
    }

    pub fn forward(&self, ctx: &mut FwdCtx, z: Var, bidirectional: bool) -> Result<Var> {
        let scanned = self.ss2d.forward(ctx, z, bidirectional)?;
        let y1 = ctx.tape.add(z, scanned)?;
        let h = ctx.layer_norm(y1, &format!("{}.ffn_norm", self.prefix))?;
        let h = ctx.linear(h, &format!("{}.ffn.fc1", self.prefix))?;
        let h = ctx.tape.silu(h)?;
        let h = ctx.linear(h, &format!("{}.ffn.fc2", self.prefix))?;
        ctx.tape.add(y1, h)
    }
}
