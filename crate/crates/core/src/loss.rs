//! Training objective and optimizer.
//!
//! The combined loss sums L1 joint terms (2D reprojection and 3D), squared-L2
//! parameter terms when ground-truth parameters are available, and a
//! least-squares adversarial term from 17 small discriminators: one over
//! (theta, beta) jointly and one per articulated joint rotation. Reduction is
//! `sum` within a sample; the training loop averages across the batch.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::hand::{rodrigues, BETA_DIM, IMAGE_H, NUM_ROT_SLOTS, PRINCIPAL, THETA_DIM};
use crate::nn::{self, FwdCtx};
use crate::params::ParamStore;
use crate::synth::SampleGt;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub l2d: f64,
    pub l3d: f64,
    pub theta: f64,
    pub beta: f64,
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l2d: 0.01,
            l3d: 0.05,
            theta: 0.001,
            beta: 0.0005,
            adv: 0.0005,
        }
    }
}

/// Ground-truth annotations with per-sample availability: 2D joints are
/// always present, 3D joints and parameters may be missing.
#[derive(Clone, Debug)]
pub struct GtAnnotations {
    pub joints2d: Tensor,
    pub joints3d: Option<Tensor>,
    pub theta: Option<Tensor>,
    pub beta: Option<Tensor>,
}

impl GtAnnotations {
    pub fn from_sample(gt: &SampleGt) -> Self {
        GtAnnotations {
            joints2d: gt.prediction.joints2d.clone(),
            joints3d: gt.has_3d.then(|| gt.prediction.joints3d.clone()),
            theta: gt.has_params.then(|| gt.prediction.params.theta.clone()),
            beta: gt.has_params.then(|| gt.prediction.params.beta.clone()),
        }
    }
}

/// The prediction pieces the loss consumes.
pub struct LossInputs {
    pub theta: Var,
    pub beta: Var,
    pub joints3d: Var,
    pub joints2d: Var,
    pub local_rots: Vec<Var>,
}

/// Per-term values of one evaluated loss, for logging.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub total: f64,
    pub l2d: f64,
    pub l3d: f64,
    pub theta: f64,
    pub beta: f64,
    pub adv: f64,
}

fn l1_sum(ctx: &mut FwdCtx, a: Var, b: Var) -> Result<Var> {
    let d = ctx.tape.sub(a, b)?;
    let d = ctx.tape.abs(d)?;
    ctx.tape.sum(d)
}

fn sq_sum(ctx: &mut FwdCtx, a: Var, b: Var) -> Result<Var> {
    let d = ctx.tape.sub(a, b)?;
    let d = ctx.tape.mul(d, d)?;
    ctx.tape.sum(d)
}

/// Normalizes pixel 2D joints about the principal point by the image height.
fn normalize_2d(ctx: &mut FwdCtx, j2d: Var) -> Result<Var> {
    let pp = ctx.constant(Tensor::new(vec![2], vec![-PRINCIPAL[0], -PRINCIPAL[1]])?);
    let centered = ctx.tape.add_row_vec(j2d, pp)?;
    ctx.tape.scale(centered, 1.0 / IMAGE_H as f64)
}

/// Combined training objective for one sample. A term whose annotation is
/// unavailable contributes zero. When `disc` is given, the adversarial term
/// pushes every discriminator toward 1 on the prediction.
pub fn total_loss(
    ctx: &mut FwdCtx,
    pred: &LossInputs,
    gt: &GtAnnotations,
    w: &LossWeights,
    disc: Option<&Discriminators>,
) -> Result<(Var, LossTerms)> {
    if gt.joints2d.shape() != [21, 2] {
        return Err(Error::InvalidShape {
            op: "total_loss",
            shape: gt.joints2d.shape().to_vec(),
            reason: "ground-truth 2D joints must be (21, 2)".into(),
        });
    }
    let mut terms = LossTerms::default();
    let mut acc: Option<Var> = None;
    let mut add_term = |ctx: &mut FwdCtx, term: Var, weight: f64, slot: &mut f64| -> Result<()> {
        *slot = ctx.tape.value(term).data()[0];
        let scaled = ctx.tape.scale(term, weight)?;
        acc = Some(match acc {
            Some(a) => ctx.tape.add(a, scaled)?,
            None => scaled,
        });
        Ok(())
    };

    // 2D reprojection, normalized image coordinates.
    let pred2d = normalize_2d(ctx, pred.joints2d)?;
    let gt2d_raw = ctx.constant(gt.joints2d.clone());
    let gt2d = normalize_2d(ctx, gt2d_raw)?;
    let l2d = l1_sum(ctx, pred2d, gt2d)?;
    add_term(ctx, l2d, w.l2d, &mut terms.l2d)?;

    if let Some(j3d) = &gt.joints3d {
        let gt3d = ctx.constant(j3d.clone());
        let l3d = l1_sum(ctx, pred.joints3d, gt3d)?;
        add_term(ctx, l3d, w.l3d, &mut terms.l3d)?;
    }
    if let Some(theta_gt) = &gt.theta {
        let t = ctx.constant(theta_gt.clone());
        let lt = sq_sum(ctx, pred.theta, t)?;
        add_term(ctx, lt, w.theta, &mut terms.theta)?;
    }
    if let Some(beta_gt) = &gt.beta {
        let b = ctx.constant(beta_gt.clone());
        let lb = sq_sum(ctx, pred.beta, b)?;
        add_term(ctx, lb, w.beta, &mut terms.beta)?;
    }
    if let Some(disc) = disc {
        let outputs = disc.forward_prediction(ctx, pred)?;
        let mut adv: Option<Var> = None;
        for d in outputs {
            let shifted = ctx.tape.add_scalar(d, -1.0)?;
            let sq = ctx.tape.mul(shifted, shifted)?;
            let s = ctx.tape.sum(sq)?;
            adv = Some(match adv {
                Some(a) => ctx.tape.add(a, s)?,
                None => s,
            });
        }
        let adv = adv.expect("at least one discriminator");
        add_term(ctx, adv, w.adv, &mut terms.adv)?;
    }

    let total = acc.expect("2D term always present");
    terms.total = ctx.tape.value(total).data()[0];
    Ok((total, terms))
}

// ── adversarial priors ───────────────────────────────────────────────

pub const NUM_DISCRIMINATORS: usize = NUM_ROT_SLOTS + 1;
const DISC_HIDDEN: usize = 32;

/// 17 small MLPs: index 0 judges (theta, beta) jointly from the 58-value
/// concatenation; indices 1..=16 judge one joint rotation each from its
/// flattened 3x3 matrix. Two hidden layers of width 32, sigmoid output.
#[derive(Clone, Debug)]
pub struct Discriminators {
    pub prefix: String,
}

impl Discriminators {
    pub fn new(prefix: &str) -> Self {
        Discriminators {
            prefix: prefix.to_string(),
        }
    }

    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str) -> Result<Self> {
        let joint_in = THETA_DIM + BETA_DIM;
        nn::init_linear(store, rng, &format!("{prefix}.params.fc1"), joint_in, DISC_HIDDEN)?;
        nn::init_linear(store, rng, &format!("{prefix}.params.fc2"), DISC_HIDDEN, DISC_HIDDEN)?;
        nn::init_linear(store, rng, &format!("{prefix}.params.out"), DISC_HIDDEN, 1)?;
        for k in 0..NUM_ROT_SLOTS {
            nn::init_linear(store, rng, &format!("{prefix}.joint{k}.fc1"), 9, DISC_HIDDEN)?;
            nn::init_linear(store, rng, &format!("{prefix}.joint{k}.fc2"), DISC_HIDDEN, DISC_HIDDEN)?;
            nn::init_linear(store, rng, &format!("{prefix}.joint{k}.out"), DISC_HIDDEN, 1)?;
        }
        Ok(Self::new(prefix))
    }

    fn mlp(&self, ctx: &mut FwdCtx, x: Var, sub: &str) -> Result<Var> {
        let h = ctx.linear(x, &format!("{}.{sub}.fc1", self.prefix))?;
        let h = ctx.tape.relu(h)?;
        let h = ctx.linear(h, &format!("{}.{sub}.fc2", self.prefix))?;
        let h = ctx.tape.relu(h)?;
        let o = ctx.linear(h, &format!("{}.{sub}.out", self.prefix))?;
        ctx.tape.sigmoid(o)
    }

    /// All 17 outputs, each (1, 1) in (0, 1), for an on-tape prediction.
    pub fn forward_prediction(&self, ctx: &mut FwdCtx, pred: &LossInputs) -> Result<Vec<Var>> {
        if pred.local_rots.len() != NUM_ROT_SLOTS {
            return Err(Error::invalid(
                "discriminators",
                format!("expected {NUM_ROT_SLOTS} joint rotations"),
            ));
        }
        let theta_row = ctx.tape.reshape(pred.theta, &[1, THETA_DIM])?;
        let beta_row = ctx.tape.reshape(pred.beta, &[1, BETA_DIM])?;
        let both = ctx.tape.concat(&[theta_row, beta_row], 1)?;
        let mut outs = Vec::with_capacity(NUM_DISCRIMINATORS);
        outs.push(self.mlp(ctx, both, "params")?);
        for (k, &rot) in pred.local_rots.iter().enumerate() {
            let flat = ctx.tape.reshape(rot, &[1, 9])?;
            outs.push(self.mlp(ctx, flat, &format!("joint{k}"))?);
        }
        Ok(outs)
    }

    /// Same heads evaluated on detached parameter tensors (the rotations
    /// are recomputed on the tape, but theta/beta enter as constants).
    pub fn forward_params(
        &self,
        ctx: &mut FwdCtx,
        theta: &Tensor,
        beta: &Tensor,
    ) -> Result<Vec<Var>> {
        let theta_var = ctx.constant(theta.clone());
        let beta_var = ctx.constant(beta.clone());
        let mut rots = Vec::with_capacity(NUM_ROT_SLOTS);
        for slot in 0..NUM_ROT_SLOTS {
            let aa = ctx.tape.slice(theta_var, 0, 3 * slot, 3)?;
            rots.push(rodrigues(&mut ctx.tape, aa)?);
        }
        let inputs = LossInputs {
            theta: theta_var,
            beta: beta_var,
            joints3d: theta_var,
            joints2d: theta_var,
            local_rots: rots,
        };
        self.forward_prediction(ctx, &inputs)
    }
}

/// Least-squares discriminator objective: real toward 1, fake toward 0,
/// summed over all heads and averaged over the batch. Fake parameters must
/// already be detached (plain tensors).
pub fn discriminator_loss(
    ctx: &mut FwdCtx,
    disc: &Discriminators,
    real: &[(Tensor, Tensor)],
    fake: &[(Tensor, Tensor)],
) -> Result<Var> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::invalid("discriminator_loss", "empty batch"));
    }
    let mut acc: Option<Var> = None;
    let mut push = |ctx: &mut FwdCtx, v: Var| -> Result<()> {
        acc = Some(match acc {
            Some(a) => ctx.tape.add(a, v)?,
            None => v,
        });
        Ok(())
    };
    for (theta, beta) in real {
        for d in disc.forward_params(ctx, theta, beta)? {
            let shifted = ctx.tape.add_scalar(d, -1.0)?;
            let sq = ctx.tape.mul(shifted, shifted)?;
            let s = ctx.tape.sum(sq)?;
            push(ctx, s)?;
        }
    }
    for (theta, beta) in fake {
        for d in disc.forward_params(ctx, theta, beta)? {
            let sq = ctx.tape.mul(d, d)?;
            let s = ctx.tape.sum(sq)?;
            push(ctx, s)?;
        }
    }
    let total = acc.expect("batches checked non-empty");
    ctx.tape.scale(total, 1.0 / real.len().max(fake.len()) as f64)
}

// ── optimizer ────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Which parameters an optimizer instance owns.
#[derive(Clone, Debug)]
pub enum ParamScope {
    All,
    Prefix(String),
    ExcludePrefix(String),
}

impl ParamScope {
    fn owns(&self, name: &str) -> bool {
        match self {
            ParamScope::All => true,
            ParamScope::Prefix(p) => name.starts_with(p.as_str()),
            ParamScope::ExcludePrefix(p) => !name.starts_with(p.as_str()),
        }
    }
}

/// AdamW with decoupled weight decay. Moments are keyed by parameter name;
/// gradients of owned parameters are cleared after each step.
pub struct AdamW {
    pub cfg: AdamWConfig,
    scope: ParamScope,
    pub step_count: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, scope: ParamScope) -> Self {
        AdamW {
            cfg,
            scope,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count;
        let c = self.cfg;
        let bias1 = 1.0 - c.beta1.powi(t as i32);
        let bias2 = 1.0 - c.beta2.powi(t as i32);
        let owned: Vec<String> = store
            .iter()
            .filter(|(n, _)| self.scope.owns(n))
            .map(|(n, _)| n.to_string())
            .collect();
        for name in owned {
            let param = store.get_mut(&name)?;
            let numel = param.numel();
            if param.grad().is_none() {
                return Err(Error::MissingGrad(name));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; numel]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; numel]);
            // Split borrows: read grad, then update data.
            let grad = param.grad().unwrap().to_vec();
            let data = param.data_mut();
            for i in 0..numel {
                data[i] -= c.lr * c.weight_decay * data[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * grad[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
                let mhat = m[i] / bias1;
                let vhat = v[i] / bias2;
                data[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
            param.zero_grad();
        }
        Ok(())
    }

    /// Deterministic view of the moment state for checkpointing.
    pub fn state(&self) -> (u64, &BTreeMap<String, Vec<f64>>, &BTreeMap<String, Vec<f64>>) {
        (self.step_count, &self.m, &self.v)
    }

    pub fn load_state(
        &mut self,
        step: u64,
        m: BTreeMap<String, Vec<f64>>,
        v: BTreeMap<String, Vec<f64>>,
    ) {
        self.step_count = step;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hand::{predict_from_params, HandParams};
    use crate::params::{Mode, StateStore};
    use crate::synth::{sample_params, GenConfig};
    use crate::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Builds on-tape loss inputs that exactly reproduce a parameter set.
    fn inputs_from_params(ctx: &mut FwdCtx, params: &HandParams) -> LossInputs {
        let theta = ctx.constant(params.theta.clone());
        let beta = ctx.constant(params.beta.clone());
        let cam = ctx.constant(params.cam.clone());
        let fk = crate::hand::forward_kinematics(&mut ctx.tape, theta, beta).unwrap();
        let j2d =
            crate::hand::perspective_project(&mut ctx.tape, fk.joints, crate::hand::FOCAL, cam)
                .unwrap();
        LossInputs {
            theta,
            beta,
            joints3d: fk.joints,
            joints2d: j2d,
            local_rots: fk.local_rots,
        }
    }

    fn gt_from_params(params: &HandParams) -> GtAnnotations {
        let pred = predict_from_params(params).unwrap();
        GtAnnotations {
            joints2d: pred.joints2d,
            joints3d: Some(pred.joints3d),
            theta: Some(params.theta.clone()),
            beta: Some(params.beta.clone()),
        }
    }

    #[test]
    fn exact_prediction_gives_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = sample_params(&mut rng, &GenConfig::default());
        let store = ParamStore::new();
        let state = StateStore::new();
        let mut ctx = FwdCtx::new(&store, &state, Mode::Eval);
        let inputs = inputs_from_params(&mut ctx, &params);
        let gt = gt_from_params(&params);
        let (loss, terms) =
            total_loss(&mut ctx, &inputs, &gt, &LossWeights::default(), None).unwrap();
        assert!(ctx.tape.value(loss).data()[0].abs() < 1e-10);
        assert!(terms.l2d.abs() < 1e-10);
        assert!(terms.l3d.abs() < 1e-10);
    }

    #[test]
    fn single_joint_offset_weights_l3d_term() {
        // One 3D joint off by (1, 0, 0) with everything else exact and the
        // adversarial term off: total = 0.05 * 1.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = sample_params(&mut rng, &GenConfig::default());
        let store = ParamStore::new();
        let state = StateStore::new();
        let mut ctx = FwdCtx::new(&store, &state, Mode::Eval);
        let inputs = inputs_from_params(&mut ctx, &params);
        let mut gt = gt_from_params(&params);
        // Perturb ground truth instead of the prediction: same L1 distance.
        let j3d = gt.joints3d.as_mut().unwrap();
        let v = j3d.at(&[4, 0]) + 1.0;
        j3d.set(&[4, 0], v);
        // Keep 2D consistent with the *unperturbed* prediction so only the
        // 3D term fires.
        let (loss, terms) =
            total_loss(&mut ctx, &inputs, &gt, &LossWeights::default(), None).unwrap();
        let total = ctx.tape.value(loss).data()[0];
        assert!((total - 0.05).abs() < 1e-10, "total {total}");
        assert!((terms.l3d - 1.0).abs() < 1e-10);
    }

    #[test]
    fn zero_weights_zero_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = sample_params(&mut rng, &GenConfig::default());
        let other = sample_params(&mut rng, &GenConfig::default());
        let store = ParamStore::new();
        let state = StateStore::new();
        let mut ctx = FwdCtx::new(&store, &state, Mode::Eval);
        let inputs = inputs_from_params(&mut ctx, &params);
        let gt = gt_from_params(&other);
        let zero = LossWeights {
            l2d: 0.0,
            l3d: 0.0,
            theta: 0.0,
            beta: 0.0,
            adv: 0.0,
        };
        let (loss, _) = total_loss(&mut ctx, &inputs, &gt, &zero, None).unwrap();
        assert_eq!(ctx.tape.value(loss).data()[0], 0.0);
    }

    #[test]
    fn availability_mask_controls_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = sample_params(&mut rng, &GenConfig::default());
        let other = sample_params(&mut rng, &GenConfig::default());
        let store = ParamStore::new();
        let state = StateStore::new();

        let run = |with_3d: bool| -> LossTerms {
            let mut ctx = FwdCtx::new(&store, &state, Mode::Eval);
            let inputs = inputs_from_params(&mut ctx, &params);
            let mut gt = gt_from_params(&other);
            if !with_3d {
                gt.joints3d = None;
            }
            let (_, terms) =
                total_loss(&mut ctx, &inputs, &gt, &LossWeights::default(), None).unwrap();
            terms
        };
        let with3d = run(true);
        let without = run(false);
        assert!(with3d.l3d > 0.0);
        assert_eq!(without.l3d, 0.0);
        assert_eq!(with3d.l2d, without.l2d);
        assert_eq!(with3d.theta, without.theta);
        assert_eq!(with3d.beta, without.beta);
        let expect = with3d.total - 0.05 * with3d.l3d;
        assert!((without.total - expect).abs() < 1e-12);
    }

    #[test]
    fn perfect_discriminator_has_zero_loss_on_real() {
        // If every head outputs exactly 1 on real and 0 on fake the loss is
        // zero; with constant 0.5 it is 17 * (0.25 + 0.25) = 8.5 per sample.
        // Constant outputs are arranged by zeroing all weights and setting
        // the output bias to the sigmoid preimage of the target.
        let mut store = ParamStore::new();
        let state = StateStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let disc = Discriminators::init(&mut store, &mut rng, "disc").unwrap();
        for name in store.names() {
            for v in store.get_mut(&name).unwrap().data_mut() {
                *v = 0.0;
            }
        }
        // sigmoid(0) = 0.5 everywhere.
        let params = sample_params(&mut rng, &GenConfig::default());
        let real = vec![(params.theta.clone(), params.beta.clone())];
        let fake = vec![(params.theta.clone(), params.beta.clone())];
        let mut ctx = FwdCtx::new(&store, &state, Mode::Eval);
        let loss = discriminator_loss(&mut ctx, &disc, &real, &fake).unwrap();
        let v = ctx.tape.value(loss).data()[0];
        assert!((v - 8.5).abs() < 1e-12, "constant-0.5 loss {v}");
    }

    #[test]
    fn discriminator_loss_detaches_generator() {
        // The fake batch enters as plain tensors, so after a backward pass
        // through the discriminator loss only `disc.*` parameters carry
        // gradients.
        let mut store = ParamStore::new();
        let state = StateStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let disc = Discriminators::init(&mut store, &mut rng, "disc").unwrap();
        store
            .register("gen.w", Tensor::randn(&[4], 1.0, &mut rng))
            .unwrap();
        let params = sample_params(&mut rng, &GenConfig::default());
        let real = vec![(params.theta.clone(), params.beta.clone())];
        let fake = vec![(params.theta.clone(), params.beta.clone())];
        let mut ctx = FwdCtx::new(&store, &state, Mode::Eval);
        let loss = discriminator_loss(&mut ctx, &disc, &real, &fake).unwrap();
        let mut tape = std::mem::take(&mut ctx.tape);
        drop(ctx);
        crate::tape::backward(loss, &mut tape, &mut store).unwrap();
        let gen_grad = store.get("gen.w").unwrap().grad().unwrap();
        assert!(gen_grad.iter().all(|&v| v == 0.0));
        let some_disc = store.get("disc.params.fc1.w").unwrap().grad().unwrap();
        assert!(some_disc.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn adv_gradient_reaches_theta() {
        // With a non-constant discriminator, d L_adv / d theta is nonzero.
        let mut store = ParamStore::new();
        let state = StateStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let disc = Discriminators::init(&mut store, &mut rng, "disc").unwrap();
        let params = sample_params(&mut rng, &GenConfig::default());
        store.register("theta", params.theta.clone()).unwrap();
        store.register("beta", params.beta.clone()).unwrap();

        let mut ctx = FwdCtx::new(&store, &state, Mode::Eval);
        let theta = ctx.param("theta").unwrap();
        let beta = ctx.param("beta").unwrap();
        let mut rots = Vec::new();
        for slot in 0..NUM_ROT_SLOTS {
            let aa = ctx.tape.slice(theta, 0, 3 * slot, 3).unwrap();
            rots.push(rodrigues(&mut ctx.tape, aa).unwrap());
        }
        let inputs = LossInputs {
            theta,
            beta,
            joints3d: theta,
            joints2d: theta,
            local_rots: rots,
        };
        let outs = disc.forward_prediction(&mut ctx, &inputs).unwrap();
        let mut acc = None;
        for d in outs {
            let shifted = ctx.tape.add_scalar(d, -1.0).unwrap();
            let sq = ctx.tape.mul(shifted, shifted).unwrap();
            let s = ctx.tape.sum(sq).unwrap();
            acc = Some(match acc {
                Some(a) => ctx.tape.add(a, s).unwrap(),
                None => s,
            });
        }
        let loss = acc.unwrap();
        let mut tape = std::mem::take(&mut ctx.tape);
        drop(ctx);
        crate::tape::backward(loss, &mut tape, &mut store).unwrap();
        let g = store.get("theta").unwrap().grad().unwrap();
        assert!(g.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn adamw_first_step_matches_bias_corrected_update() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::zeros(&[1])).unwrap();
        store.accumulate_grad("w", &[1.0]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), ParamScope::All);
        opt.step(&mut store).unwrap();
        let w = store.get("w").unwrap().data()[0];
        assert!((w + 1e-5).abs() < 1e-12, "w after first step: {w}");
        // Gradients cleared afterward.
        assert_eq!(store.get("w").unwrap().grad().unwrap(), &[0.0]);
    }

    #[test]
    fn adamw_zero_grads_and_no_decay_is_identity() {
        let mut store = ParamStore::new();
        store
            .register("w", Tensor::from_vec(vec![0.5, -0.25]))
            .unwrap();
        store.ensure_grad_slots();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, ParamScope::All);
        opt.step(&mut store).unwrap();
        assert_eq!(store.get("w").unwrap().data(), &[0.5, -0.25]);
    }

    #[test]
    fn adamw_zero_lr_freezes_parameters() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::from_vec(vec![1.0])).unwrap();
        store.accumulate_grad("w", &[3.0]).unwrap();
        let cfg = AdamWConfig {
            lr: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, ParamScope::All);
        opt.step(&mut store).unwrap();
        assert_eq!(store.get("w").unwrap().data(), &[1.0]);
    }

    #[test]
    fn adamw_with_no_decay_equals_plain_adam() {
        // Hand-rolled Adam reference over a few steps.
        let mut store = ParamStore::new();
        store.register("w", Tensor::from_vec(vec![0.8])).unwrap();
        let cfg = AdamWConfig {
            lr: 1e-2,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, ParamScope::All);
        let (mut m, mut v, mut w_ref) = (0.0, 0.0, 0.8);
        for t in 1..=5 {
            let g = 2.0 * w_ref; // d/dw of w^2 at the reference point
            store.zero_grads();
            store.accumulate_grad("w", &[2.0 * store.get("w").unwrap().data()[0]]).unwrap();
            opt.step(&mut store).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mhat = m / (1.0 - 0.9f64.powi(t));
            let vhat = v / (1.0 - 0.999f64.powi(t));
            w_ref -= 1e-2 * mhat / (vhat.sqrt() + 1e-8);
            let w = store.get("w").unwrap().data()[0];
            assert!((w - w_ref).abs() < 1e-12, "step {t}: {w} vs {w_ref}");
        }
    }

    #[test]
    fn adamw_missing_grad_is_error() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::zeros(&[1])).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), ParamScope::All);
        assert!(matches!(
            opt.step(&mut store),
            Err(Error::MissingGrad(_))
        ));
    }

    #[test]
    fn adamw_converges_on_convex_quadratic() {
        // 100 steps on f(w) = sum (w - c)^2: loss strictly decreases after
        // the warmup steps.
        let mut store = ParamStore::new();
        store
            .register("w", Tensor::from_vec(vec![2.0, -1.5, 0.7]))
            .unwrap();
        let target = [0.3, 0.4, -0.2];
        let cfg = AdamWConfig {
            lr: 5e-3,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, ParamScope::All);
        let loss_of = |store: &ParamStore| -> f64 {
            store
                .get("w")
                .unwrap()
                .data()
                .iter()
                .zip(&target)
                .map(|(w, c)| (w - c) * (w - c))
                .sum()
        };
        let mut losses = Vec::new();
        for _ in 0..100 {
            let grads: Vec<f64> = store
                .get("w")
                .unwrap()
                .data()
                .iter()
                .zip(&target)
                .map(|(w, c)| 2.0 * (w - c))
                .collect();
            store.zero_grads();
            store.accumulate_grad("w", &grads).unwrap();
            opt.step(&mut store).unwrap();
            losses.push(loss_of(&store));
        }
        for t in 5..losses.len() {
            assert!(
                losses[t] < losses[t - 1],
                "loss not decreasing at step {t}: {} -> {}",
                losses[t - 1],
                losses[t]
            );
        }
        assert!(losses.last().unwrap() < &(0.6 * losses[0]));
    }

    #[test]
    fn scoped_optimizers_do_not_cross() {
        let mut store = ParamStore::new();
        store.register("disc.w", Tensor::from_vec(vec![1.0])).unwrap();
        store.register("gen.w", Tensor::from_vec(vec![1.0])).unwrap();
        store.zero_grads();
        store.accumulate_grad("disc.w", &[1.0]).unwrap();
        store.accumulate_grad("gen.w", &[1.0]).unwrap();
        let mut gen_opt = AdamW::new(
            AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() },
            ParamScope::ExcludePrefix("disc.".into()),
        );
        gen_opt.step(&mut store).unwrap();
        assert_eq!(store.get("disc.w").unwrap().data(), &[1.0]);
        assert!((store.get("gen.w").unwrap().data()[0] - 0.9).abs() < 1e-9);
    }
}
