//! The graph-guided state-space decoder.
//!
//! Pipeline: encoder stub -> channel downsample -> joints regressor ->
//! token sampler at the regressed 2D joints -> a stack of graph-guided
//! state-space blocks over the 22-token joint sequence (21 joints plus the
//! global mean token) -> fusion of all branches into the parameter heads ->
//! forward kinematics and projection.
//!
//! Every ablation switch maps to one documented sub-path; disabled fusion
//! branches are zero-masked rather than removed so parameter names and
//! checkpoint shapes stay identical across variants.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{hand_adjacency, GcnLayer, NUM_JOINTS};
use crate::hand::{
    forward_kinematics, perspective_project, HandParams, HandPrediction, BETA_DIM, FOCAL, IMAGE_H,
    IMAGE_W, PRINCIPAL, THETA_DIM,
};
use crate::nn::{self, FwdCtx};
use crate::params::{ParamStore, StateStore};
use crate::ssm::VssBlock;
use crate::synth::normalize_image;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Seed for the fixed joint-order shuffle used by the scan-order ablation.
const SHUFFLE_SEED: u64 = 0x6e5;

/// Stage widths. `canonical` follows the published architecture; `desk`
/// shrinks channel widths (not the topology) so training runs on a CPU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub image_h: usize,
    pub image_w: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub backbone_chans: [usize; 3],
    pub backbone_out: usize,
    pub token_dim: usize,
    pub n_state: usize,
    pub ssm_ratio: usize,
    pub mlp_ratio: usize,
    pub jr_blocks: usize,
    pub fusion_hidden: usize,
}

impl ModelDims {
    pub fn canonical() -> Self {
        ModelDims {
            image_h: IMAGE_H,
            image_w: IMAGE_W,
            grid_h: 16,
            grid_w: 12,
            backbone_chans: [32, 64, 128],
            backbone_out: 1280,
            token_dim: 512,
            n_state: 1,
            ssm_ratio: 2,
            mlp_ratio: 4,
            jr_blocks: 4,
            fusion_hidden: 1024,
        }
    }

    pub fn desk() -> Self {
        ModelDims {
            backbone_chans: [8, 16, 32],
            backbone_out: 96,
            token_dim: 48,
            jr_blocks: 2,
            fusion_hidden: 192,
            ..Self::canonical()
        }
    }

    pub fn grid_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Width of the concatenated fusion input:
    /// 22C (decoder tokens) + C (global mean) + 21C (sampled) + 42 (2D joints).
    pub fn fusion_width(&self) -> usize {
        (NUM_JOINTS + 1) * self.token_dim
            + self.token_dim
            + NUM_JOINTS * self.token_dim
            + NUM_JOINTS * 2
    }
}

/// Ablation switches; all true is the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PipelineConfig {
    pub num_gss_blocks: usize,
    pub use_ts_branch: bool,
    pub use_2d_branch: bool,
    pub use_gss_branch: bool,
    pub use_global_branch: bool,
    pub use_token_sampler: bool,
    pub use_bidirectional: bool,
    pub use_gcn: bool,
    pub use_graph_order: bool,
    pub use_mamba: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            num_gss_blocks: 4,
            use_ts_branch: true,
            use_2d_branch: true,
            use_gss_branch: true,
            use_global_branch: true,
            use_token_sampler: true,
            use_bidirectional: true,
            use_gcn: true,
            use_graph_order: true,
            use_mamba: true,
        }
    }
}

pub const ABLATION_NAMES: [&str; 9] = [
    "ts_branch",
    "2d_branch",
    "gss_branch",
    "global_branch",
    "token_sampler",
    "bidirectional",
    "gcn",
    "graph_order",
    "mamba",
];

impl PipelineConfig {
    pub fn full() -> Self {
        Self::default()
    }

    /// Disables the sub-path named by an ablation flag.
    pub fn ablate(&mut self, name: &str) -> Result<()> {
        match name {
            "ts_branch" => self.use_ts_branch = false,
            "2d_branch" => self.use_2d_branch = false,
            "gss_branch" => self.use_gss_branch = false,
            "global_branch" => self.use_global_branch = false,
            "token_sampler" => self.use_token_sampler = false,
            "bidirectional" => self.use_bidirectional = false,
            "gcn" => self.use_gcn = false,
            "graph_order" => self.use_graph_order = false,
            "mamba" => self.use_mamba = false,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation '{other}' (expected one of {ABLATION_NAMES:?})"
                )))
            }
        }
        Ok(())
    }
}

struct GssBlock {
    gcn: GcnLayer,
    vss: VssBlock,
}

pub struct Model {
    pub dims: ModelDims,
    pub cfg: PipelineConfig,
    jr_blocks: Vec<VssBlock>,
    gss_blocks: Vec<GssBlock>,
    adjacency: Tensor,
    shuffle: Vec<usize>,
}

/// Everything computed by one forward pass, as tape handles plus the
/// bookkeeping the tests and benches assert on.
pub struct ForwardOutput {
    pub theta: Var,
    pub beta: Var,
    pub cam: Var,
    pub joints3d: Var,
    pub joints2d: Var,
    pub vertices: Var,
    pub local_rots: Vec<Var>,
    pub jr_theta: Var,
    pub jr_beta: Var,
    pub jr_cam: Var,
    pub jr_joints2d: Var,
    pub backbone_grid: Var,
    pub grid: Var,
    pub global_mean: Var,
    pub sampled: Var,
    pub gss_tokens: Var,
    pub fused_width: usize,
    pub scan_tokens: usize,
}

impl ForwardOutput {
    pub fn loss_inputs(&self) -> crate::loss::LossInputs {
        crate::loss::LossInputs {
            theta: self.theta,
            beta: self.beta,
            joints3d: self.joints3d,
            joints2d: self.joints2d,
            local_rots: self.local_rots.clone(),
        }
    }

    pub fn to_prediction(&self, ctx: &FwdCtx) -> Result<HandPrediction> {
        let params = HandParams::new(
            ctx.tape.value(self.theta).clone(),
            ctx.tape.value(self.beta).clone(),
            ctx.tape.value(self.cam).clone(),
        )?;
        Ok(HandPrediction {
            params,
            joints3d: ctx.tape.value(self.joints3d).clone(),
            joints2d: ctx.tape.value(self.joints2d).clone(),
            vertices: ctx.tape.value(self.vertices).clone(),
        })
    }
}

impl Model {
    /// Builds the module structure without touching any store (checkpoint
    /// loading path).
    pub fn new(dims: ModelDims, cfg: PipelineConfig) -> Self {
        let jr_blocks = (0..dims.jr_blocks)
            .map(|i| {
                VssBlock::new(
                    &format!("jr.block{i}"),
                    dims.token_dim,
                    dims.ssm_ratio,
                    dims.n_state,
                )
            })
            .collect();
        let gss_blocks = (0..cfg.num_gss_blocks)
            .map(|l| GssBlock {
                gcn: GcnLayer::new(&format!("gss{l}.gcn"), dims.token_dim),
                vss: VssBlock::new(
                    &format!("gss{l}.vss"),
                    dims.token_dim,
                    dims.ssm_ratio,
                    dims.n_state,
                ),
            })
            .collect();
        let mut shuffle: Vec<usize> = (0..NUM_JOINTS).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(SHUFFLE_SEED);
        for i in (1..shuffle.len()).rev() {
            let j = rng.gen_range(0..=i);
            shuffle.swap(i, j);
        }
        Model {
            dims,
            cfg,
            jr_blocks,
            gss_blocks,
            adjacency: hand_adjacency(),
            shuffle,
        }
    }

    /// Registers every parameter and buffer and returns the model.
    pub fn init(
        store: &mut ParamStore,
        state: &mut StateStore,
        rng: &mut impl Rng,
        dims: ModelDims,
        cfg: PipelineConfig,
    ) -> Result<Self> {
        let c = dims.token_dim;

        // Encoder stub: four stride-2 stages, 3x3 kernels except the last.
        let chans = dims.backbone_chans;
        nn::init_conv2d(store, rng, "backbone.conv1", 3, 3, 3, chans[0], true)?;
        nn::init_batch_norm(store, state, "backbone.bn1", chans[0])?;
        nn::init_conv2d(store, rng, "backbone.conv2", 3, 3, chans[0], chans[1], true)?;
        nn::init_batch_norm(store, state, "backbone.bn2", chans[1])?;
        nn::init_conv2d(store, rng, "backbone.conv3", 3, 3, chans[1], chans[2], true)?;
        nn::init_batch_norm(store, state, "backbone.bn3", chans[2])?;
        nn::init_conv2d(store, rng, "backbone.conv4", 1, 1, chans[2], dims.backbone_out, true)?;

        // Downsampler: Conv2D(k1) -> BN -> ReLU -> Conv2D(k1).
        nn::init_conv2d(store, rng, "down.conv1", 1, 1, dims.backbone_out, c, true)?;
        nn::init_batch_norm(store, state, "down.bn", c)?;
        nn::init_conv2d(store, rng, "down.conv2", 1, 1, c, c, true)?;

        // Joints regressor: stacked sequence blocks plus three heads.
        for i in 0..dims.jr_blocks {
            VssBlock::init(
                store,
                rng,
                &format!("jr.block{i}"),
                c,
                dims.ssm_ratio,
                dims.n_state,
                dims.mlp_ratio,
            )?;
        }
        nn::init_linear_zero(store, "jr.head_theta", c, THETA_DIM)?;
        nn::init_linear_zero(store, "jr.head_beta", c, BETA_DIM)?;
        nn::init_linear_zero(store, "jr.head_cam", c, 3)?;
        // Start the camera near the middle of the synthetic depth range.
        store
            .get_mut("jr.head_cam.b")?
            .data_mut()
            .copy_from_slice(&[0.0, 0.0, crate::ops::softplus_inv(0.3)]);

        // Token sampler tail: Conv1D(k1) -> BN -> ReLU -> Conv1D(k1).
        nn::init_linear(store, rng, "ts.conv1", c, c)?;
        nn::init_batch_norm(store, state, "ts.bn", c)?;
        nn::init_linear(store, rng, "ts.conv2", c, c)?;

        for l in 0..cfg.num_gss_blocks {
            GcnLayer::init(store, state, rng, &format!("gss{l}.gcn"), c)?;
            VssBlock::init(
                store,
                rng,
                &format!("gss{l}.vss"),
                c,
                dims.ssm_ratio,
                dims.n_state,
                dims.mlp_ratio,
            )?;
        }

        // Fusion trunk and heads.
        nn::init_linear(store, rng, "fusion.fc1", dims.fusion_width(), dims.fusion_hidden)?;
        nn::init_linear(store, rng, "fusion.fc2", dims.fusion_hidden, dims.fusion_hidden)?;
        nn::init_linear_zero(store, "fusion.head_theta", dims.fusion_hidden, THETA_DIM)?;
        nn::init_linear_zero(store, "fusion.head_beta", dims.fusion_hidden, BETA_DIM)?;
        nn::init_linear_zero(store, "fusion.head_cam", dims.fusion_hidden, 3)?;

        Ok(Self::new(dims, cfg))
    }

    /// Full forward pass for one image.
    pub fn forward(&self, ctx: &mut FwdCtx, image: &Tensor) -> Result<ForwardOutput> {
        let dims = &self.dims;
        if image.shape() != [dims.image_h, dims.image_w, 3] {
            return Err(Error::InvalidShape {
                op: "forward",
                shape: image.shape().to_vec(),
                reason: format!("expected {}x{}x3 image", dims.image_h, dims.image_w),
            });
        }
        let c = dims.token_dim;
        let x = ctx.constant(normalize_image(image));

        // Encoder stub (stride-2 x4 = /16).
        let h = ctx.conv2d(x, "backbone.conv1", 2, 1)?;
        let h = ctx.batch_norm(h, "backbone.bn1")?;
        let h = ctx.tape.relu(h)?;
        let h = ctx.conv2d(h, "backbone.conv2", 2, 1)?;
        let h = ctx.batch_norm(h, "backbone.bn2")?;
        let h = ctx.tape.relu(h)?;
        let h = ctx.conv2d(h, "backbone.conv3", 2, 1)?;
        let h = ctx.batch_norm(h, "backbone.bn3")?;
        let h = ctx.tape.relu(h)?;
        let backbone_grid = ctx.conv2d(h, "backbone.conv4", 2, 0)?;

        // Downsample channels to the token width.
        let g = ctx.conv2d(backbone_grid, "down.conv1", 1, 0)?;
        let g = ctx.batch_norm(g, "down.bn")?;
        let g = ctx.tape.relu(g)?;
        let grid = ctx.conv2d(g, "down.conv2", 1, 0)?;

        let n_tokens = dims.grid_tokens();
        let tokens = ctx.tape.reshape(grid, &[n_tokens, c])?;
        let global_mean_vec = ctx.tape.mean_axis(tokens, 0)?;
        let global_mean = ctx.tape.reshape(global_mean_vec, &[1, c])?;

        // Joints regressor over the full token sequence.
        let mut seq = tokens;
        for block in &self.jr_blocks {
            seq = block.forward(ctx, seq, self.cfg.use_bidirectional)?;
        }
        let pooled_vec = ctx.tape.mean_axis(seq, 0)?;
        let pooled = ctx.tape.reshape(pooled_vec, &[1, c])?;
        let jr_theta_row = ctx.linear(pooled, "jr.head_theta")?;
        let jr_theta = ctx.tape.reshape(jr_theta_row, &[THETA_DIM])?;
        let jr_beta_row = ctx.linear(pooled, "jr.head_beta")?;
        let jr_beta = ctx.tape.reshape(jr_beta_row, &[BETA_DIM])?;
        let jr_cam_row = ctx.linear(pooled, "jr.head_cam")?;
        let jr_cam_raw = ctx.tape.reshape(jr_cam_row, &[3])?;
        let jr_cam = camera_from_raw(ctx, jr_cam_raw)?;

        let jr_fk = forward_kinematics(&mut ctx.tape, jr_theta, jr_beta)?;
        let jr_joints2d = perspective_project(&mut ctx.tape, jr_fk.joints, FOCAL, jr_cam)?;

        // Token sampler at the regressed joints (bilinear), or a fixed
        // strided selection when the sampler is ablated away.
        let raw_tokens = if self.cfg.use_token_sampler {
            let coords_px = ctx.tape.scale(jr_joints2d, 1.0 / 16.0)?;
            let coords = ctx.tape.add_scalar(coords_px, -0.5)?;
            ctx.tape.bilinear_sample(grid, coords)?
        } else {
            let mut rows = Vec::with_capacity(NUM_JOINTS);
            for i in 0..NUM_JOINTS {
                let idx = (i * n_tokens + n_tokens / 2) / NUM_JOINTS;
                rows.push(ctx.tape.slice(tokens, 0, idx, 1)?);
            }
            ctx.tape.concat(&rows, 0)?
        };
        let t = ctx.linear(raw_tokens, "ts.conv1")?;
        let t = ctx.batch_norm(t, "ts.bn")?;
        let t = ctx.tape.relu(t)?;
        let sampled = ctx.linear(t, "ts.conv2")?;

        // Graph-guided state-space stack over 22 tokens.
        let mut joint_tokens = sampled;
        let mut global_token = global_mean;
        let mut gss_tokens = ctx.tape.concat(&[joint_tokens, global_token], 0)?;
        for block in &self.gss_blocks {
            let gcn_out = if self.cfg.use_gcn {
                block.gcn.forward(ctx, joint_tokens, &self.adjacency)?
            } else {
                joint_tokens
            };
            let z = ctx.tape.concat(&[gcn_out, global_token], 0)?;
            let out = if self.cfg.use_mamba {
                if self.cfg.use_graph_order {
                    block.vss.forward(ctx, z, self.cfg.use_bidirectional)?
                } else {
                    // Scan-order ablation: shuffle the joint tokens with a
                    // fixed permutation, scan, then restore the order.
                    let shuffled = self.permute_joints(ctx, z, false)?;
                    let scanned = block.vss.forward(ctx, shuffled, self.cfg.use_bidirectional)?;
                    self.permute_joints(ctx, scanned, true)?
                }
            } else {
                z
            };
            joint_tokens = ctx.tape.slice(out, 0, 0, NUM_JOINTS)?;
            global_token = ctx.tape.slice(out, 0, NUM_JOINTS, 1)?;
            gss_tokens = out;
        }

        // Fusion: flatten the branches, zero-mask the disabled ones.
        let mask = |ctx: &mut FwdCtx, v: Var, on: bool| -> Result<Var> {
            if on {
                Ok(v)
            } else {
                ctx.tape.scale(v, 0.0)
            }
        };
        let gss_flat = ctx.tape.reshape(gss_tokens, &[1, (NUM_JOINTS + 1) * c])?;
        let gss_flat = mask(ctx, gss_flat, self.cfg.use_gss_branch)?;
        let glob_flat = ctx.tape.reshape(global_mean, &[1, c])?;
        let glob_flat = mask(ctx, glob_flat, self.cfg.use_global_branch)?;
        let ts_flat = ctx.tape.reshape(sampled, &[1, NUM_JOINTS * c])?;
        let ts_flat = mask(ctx, ts_flat, self.cfg.use_ts_branch)?;
        let pp = ctx.constant(Tensor::new(vec![2], PRINCIPAL.to_vec())?);
        let j2d_neg = ctx.tape.neg(pp)?;
        let j2d_centered = ctx.tape.add_row_vec(jr_joints2d, j2d_neg)?;
        let j2d_norm = ctx.tape.scale(j2d_centered, 1.0 / IMAGE_H as f64)?;
        let j2d_flat = ctx.tape.reshape(j2d_norm, &[1, NUM_JOINTS * 2])?;
        let j2d_flat = mask(ctx, j2d_flat, self.cfg.use_2d_branch)?;

        let fused = ctx
            .tape
            .concat(&[gss_flat, glob_flat, ts_flat, j2d_flat], 1)?;
        let fused_width = ctx.tape.shape(fused)[1];
        let f = ctx.linear(fused, "fusion.fc1")?;
        let f = ctx.tape.relu(f)?;
        let f = ctx.linear(f, "fusion.fc2")?;
        let f = ctx.tape.relu(f)?;

        let theta_row = ctx.linear(f, "fusion.head_theta")?;
        let theta = ctx.tape.reshape(theta_row, &[THETA_DIM])?;
        let beta_row = ctx.linear(f, "fusion.head_beta")?;
        let beta = ctx.tape.reshape(beta_row, &[BETA_DIM])?;
        let dcam_row = ctx.linear(f, "fusion.head_cam")?;
        let dcam = ctx.tape.reshape(dcam_row, &[3])?;
        // The regressor's camera is the residual base for the final head.
        let cam_raw = ctx.tape.add(jr_cam_raw, dcam)?;
        let cam = camera_from_raw(ctx, cam_raw)?;

        let fk = forward_kinematics(&mut ctx.tape, theta, beta)?;
        let joints2d = perspective_project(&mut ctx.tape, fk.joints, FOCAL, cam)?;

        Ok(ForwardOutput {
            theta,
            beta,
            cam,
            joints3d: fk.joints,
            joints2d,
            vertices: fk.vertices,
            local_rots: fk.local_rots,
            jr_theta,
            jr_beta,
            jr_cam,
            jr_joints2d,
            backbone_grid,
            grid,
            global_mean,
            sampled,
            gss_tokens,
            fused_width,
            scan_tokens: NUM_JOINTS + 1,
        })
    }

    /// Applies (or inverts) the fixed joint shuffle to the first 21 rows of
    /// a 22-token sequence; the global token stays in place.
    fn permute_joints(&self, ctx: &mut FwdCtx, z: Var, invert: bool) -> Result<Var> {
        let mut order = vec![0usize; NUM_JOINTS];
        for (dst, &src) in self.shuffle.iter().enumerate() {
            if invert {
                order[src] = dst;
            } else {
                order[dst] = src;
            }
        }
        let mut rows = Vec::with_capacity(NUM_JOINTS + 1);
        for &src in &order {
            rows.push(ctx.tape.slice(z, 0, src, 1)?);
        }
        rows.push(ctx.tape.slice(z, 0, NUM_JOINTS, 1)?);
        ctx.tape.concat(&rows, 0)
    }
}

/// Maps a raw camera head output to a valid translation: xy pass through,
/// depth goes through a softplus with a 0.2 m floor so projection stays
/// well-defined during training.
pub fn camera_from_raw(ctx: &mut FwdCtx, raw: Var) -> Result<Var> {
    let xy = ctx.tape.slice(raw, 0, 0, 2)?;
    let z_raw = ctx.tape.slice(raw, 0, 2, 1)?;
    let z_soft = ctx.tape.softplus(z_raw)?;
    let z = ctx.tape.add_scalar(z_soft, 0.2)?;
    ctx.tape.concat(&[xy, z], 0)
}

/// Analytic multiply-accumulate counts for the decoder (everything after
/// the backbone), per image. Used by the token/efficiency bench.
pub fn decoder_macs(dims: &ModelDims, cfg: &PipelineConfig) -> u64 {
    let c = dims.token_dim as u64;
    let inner = (dims.ssm_ratio * dims.token_dim) as u64;
    let n = dims.n_state as u64;
    let grid = dims.grid_tokens() as u64;
    let j = (NUM_JOINTS + 1) as u64;

    let dirs = if cfg.use_bidirectional { 2 } else { 1 };
    // One sequence block over L tokens.
    let vss = |l: u64| -> u64 {
        let in_proj = l * c * inner;
        let scan_proj = dirs * l * (inner * inner + 2 * inner * n);
        let dwconv = l * inner * 3;
        let scan = dirs * l * inner * n * 6;
        let out_proj = l * inner * c;
        let ffn = 2 * l * c * (dims.mlp_ratio as u64 * c);
        in_proj + scan_proj + dwconv + scan + out_proj + ffn
    };

    let down = grid * (dims.backbone_out as u64 * c + c * c);
    let jr = dims.jr_blocks as u64 * vss(grid) + 3 * c * 61;
    let ts = if cfg.use_token_sampler {
        NUM_JOINTS as u64 * (4 * c + 2 * c * c)
    } else {
        NUM_JOINTS as u64 * 2 * c * c
    };
    let gcn = if cfg.use_gcn {
        NUM_JOINTS as u64 * (NUM_JOINTS as u64 + c) * c
    } else {
        0
    };
    let gss_scan = if cfg.use_mamba { vss(j) } else { 0 };
    let gss = cfg.num_gss_blocks as u64 * (gcn + gss_scan);
    let fusion = dims.fusion_width() as u64 * dims.fusion_hidden as u64
        + (dims.fusion_hidden * dims.fusion_hidden) as u64
        + dims.fusion_hidden as u64 * 61;
    down + jr + ts + gss + fusion
}

/// Token accounting for one decoder variant.
#[derive(Clone, Debug)]
pub struct TokenReport {
    pub variant: String,
    pub scan_tokens: usize,
    pub grid_tokens: usize,
    pub reduction_percent: f64,
    pub decoder_macs: u64,
}

pub fn token_report(dims: &ModelDims, cfg: &PipelineConfig, variant: &str) -> TokenReport {
    let grid = dims.grid_tokens();
    let scan = NUM_JOINTS + 1;
    TokenReport {
        variant: variant.to_string(),
        scan_tokens: scan,
        grid_tokens: grid,
        reduction_percent: 100.0 * (1.0 - scan as f64 / grid as f64),
        decoder_macs: decoder_macs(dims, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Mode;
    use crate::synth::{synth_sample, GenConfig};

    fn tiny_dims() -> ModelDims {
        ModelDims {
            backbone_chans: [4, 6, 8],
            backbone_out: 16,
            token_dim: 12,
            jr_blocks: 1,
            fusion_hidden: 32,
            ..ModelDims::canonical()
        }
    }

    fn build(dims: ModelDims, cfg: PipelineConfig, seed: u64) -> (ParamStore, StateStore, Model) {
        let mut store = ParamStore::new();
        let mut state = StateStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::init(&mut store, &mut state, &mut rng, dims, cfg).unwrap();
        (store, state, model)
    }

    fn sample_image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        synth_sample(&mut rng, &GenConfig::default()).unwrap().0
    }

    #[test]
    fn forward_shapes_trace_the_pipeline() {
        let dims = tiny_dims();
        let (store, state, model) = build(dims, PipelineConfig::full(), 1);
        let image = sample_image(100);
        let mut ctx = FwdCtx::new(&store, &state, Mode::Eval);
        let out = model.forward(&mut ctx, &image).unwrap();

        let c = dims.token_dim;
        assert_eq!(ctx.tape.shape(out.backbone_grid), &[16, 12, dims.backbone_out]);
        assert_eq!(ctx.tape.shape(out.grid), &[16, 12, c]);
        assert_eq!(ctx.tape.shape(out.global_mean), &[1, c]);
        assert_eq!(ctx.tape.shape(out.jr_theta), &[48]);
        assert_eq!(ctx.tape.shape(out.jr_beta), &[10]);
        assert_eq!(ctx.tape.shape(out.jr_cam), &[3]);
        assert_eq!(ctx.tape.shape(out.jr_joints2d), &[21, 2]);
        assert_eq!(ctx.tape.shape(out.sampled), &[21, c]);
        assert_eq!(ctx.tape.shape(out.gss_tokens), &[22, c]);
        assert_eq!(out.fused_width, dims.fusion_width());
        assert_eq!(ctx.tape.shape(out.theta), &[48]);
        assert_eq!(ctx.tape.shape(out.beta), &[10]);
        assert_eq!(ctx.tape.shape(out.cam), &[3]);
        assert_eq!(ctx.tape.shape(out.joints3d), &[21, 3]);
        assert_eq!(ctx.tape.shape(out.joints2d), &[21, 2]);
        assert_eq!(ctx.tape.shape(out.vertices), &[778, 3]);
        assert_eq!(out.scan_tokens, 22);
    }

    #[test]
    fn canonical_fusion_width_is_22570() {
        assert_eq!(ModelDims::canonical().fusion_width(), 22_570);
    }

    #[test]
    fn token_reduction_matches_claim() {
        let dims = ModelDims::canonical();
        let report = token_report(&dims, &PipelineConfig::full(), "full");
        assert_eq!(report.scan_tokens, 22);
        assert_eq!(report.grid_tokens, 192);
        assert!((report.reduction_percent - 88.5).abs() < 0.1);
    }

    #[test]
    fn forward_is_deterministic() {
        let (store, state, model) = build(tiny_dims(), PipelineConfig::full(), 2);
        let image = sample_image(101);
        let run = || {
            let mut ctx = FwdCtx::new(&store, &state, Mode::Eval);
            let out = model.forward(&mut ctx, &image).unwrap();
            out.to_prediction(&ctx).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.joints3d.data(), b.joints3d.data());
        assert_eq!(a.vertices.data(), b.vertices.data());
        assert_eq!(a.joints2d.data(), b.joints2d.data());
    }

    #[test]
    fn ablations_share_the_parameter_set() {
        let full = build(tiny_dims(), PipelineConfig::full(), 3).0.names();
        for name in ABLATION_NAMES {
            let mut cfg = PipelineConfig::full();
            cfg.ablate(name).unwrap();
            let names = build(tiny_dims(), cfg, 3).0.names();
            assert_eq!(full, names, "ablation {name} changed the parameter set");
        }
    }

    #[test]
    fn unknown_ablation_is_rejected() {
        let mut cfg = PipelineConfig::full();
        assert!(cfg.ablate("nonsense").is_err());
    }

    #[test]
    fn every_ablation_variant_runs_and_differs() {
        let dims = tiny_dims();
        let image = sample_image(102);
        let (mut store, state, model) = build(dims, PipelineConfig::full(), 4);
        // Zero-initialized heads would hide branch differences; move them.
        let mut hrng = ChaCha8Rng::seed_from_u64(40);
        for name in store.names() {
            if name.contains("head") {
                for v in store.get_mut(&name).unwrap().data_mut() {
                    *v += 0.05 * hrng.gen_range(-1.0..1.0f64);
                }
            }
        }
        let store = store;
        let mut ctx = FwdCtx::new(&store, &state, Mode::Eval);
        let full_out = model.forward(&mut ctx, &image).unwrap();
        let full_joints = ctx.tape.value(full_out.joints3d).clone();

        for name in ABLATION_NAMES {
            let mut cfg = PipelineConfig::full();
            cfg.ablate(name).unwrap();
            // Same parameters, different topology flags.
            let variant = Model::new(dims, cfg);
            let mut ctx = FwdCtx::new(&store, &state, Mode::Eval);
            let out = variant.forward(&mut ctx, &image).unwrap();
            let joints = ctx.tape.value(out.joints3d);
            let diff = joints.max_abs_diff(&full_joints);
            assert!(
                diff > 0.0,
                "ablation {name} did not change the prediction"
            );
        }
    }

    #[test]
    fn zeroed_fusion_heads_pass_camera_residual_through() {
        // With freshly initialized (zero) heads the final camera equals the
        // regressor's camera and theta/beta are exactly zero.
        let (store, state, model) = build(tiny_dims(), PipelineConfig::full(), 5);
        let image = sample_image(103);
        let mut ctx = FwdCtx::new(&store, &state, Mode::Eval);
        let out = model.forward(&mut ctx, &image).unwrap();
        assert!(ctx.tape.value(out.theta).data().iter().all(|&v| v == 0.0));
        assert!(ctx.tape.value(out.beta).data().iter().all(|&v| v == 0.0));
        let cam = ctx.tape.value(out.cam);
        let jr_cam = ctx.tape.value(out.jr_cam);
        assert!(cam.max_abs_diff(jr_cam) < 1e-15);
    }

    #[test]
    fn spatially_constant_grid_pools_to_constant() {
        let mut tape = crate::tape::Tape::new();
        let g = tape.constant(Tensor::full(&[16, 12, 7], 3.25));
        let t = tape.reshape(g, &[192, 7]).unwrap();
        let m = tape.mean_axis(t, 0).unwrap();
        for &v in tape.value(m).data() {
            assert!((v - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn gss_block_pure_residual_when_branches_zeroed() {
        // Zero the SS2D out-projection and the FFN second linear in block 0:
        // its output must equal its concatenated input.
        let dims = tiny_dims();
        let (mut store, state, model) = build(dims, PipelineConfig::full(), 6);
        for name in ["gss0.vss.ss2d.out_proj.w", "gss0.vss.ffn.fc2.w"] {
            for v in store.get_mut(name).unwrap().data_mut() {
                *v = 0.0;
            }
        }
        let mut ctx = FwdCtx::new(&store, &state, Mode::Eval);
        let c = dims.token_dim;
        let z = ctx.constant(Tensor::randn(
            &[NUM_JOINTS + 1, c],
            1.0,
            &mut ChaCha8Rng::seed_from_u64(9),
        ));
        let out = model.gss_blocks[0]
            .vss
            .forward(&mut ctx, z, true)
            .unwrap();
        let diff = ctx.tape.value(out).max_abs_diff(ctx.tape.value(z));
        assert!(diff < 1e-15, "residual path leaked: {diff}");
    }

    #[test]
    fn gss_block_matches_stepwise_transcription() {
        // Independent recomputation of one full decoder block at toy size:
        // gcn -> concat -> ss2d -> +residual -> LN -> FFN -> +residual.
        let dims = tiny_dims();
        let (store, state, model) = build(dims, PipelineConfig::full(), 7);
        let c = dims.token_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let joint_tokens = Tensor::randn(&[NUM_JOINTS, c], 0.8, &mut rng);
        let global_tok = Tensor::randn(&[1, c], 0.8, &mut rng);

        // Module path.
        let mut ctx = FwdCtx::new(&store, &state, Mode::Eval);
        let jt = ctx.constant(joint_tokens.clone());
        let gt = ctx.constant(global_tok.clone());
        let block = &model.gss_blocks[0];
        let gcn_out = block.gcn.forward(&mut ctx, jt, &model.adjacency).unwrap();
        let z = ctx.tape.concat(&[gcn_out, gt], 0).unwrap();
        let module_out = block.vss.forward(&mut ctx, z, true).unwrap();
        let module_val = ctx.tape.value(module_out).clone();

        // Transcription path on a fresh context, stage by stage.
        let mut ctx2 = FwdCtx::new(&store, &state, Mode::Eval);
        let jt2 = ctx2.constant(joint_tokens);
        let gt2 = ctx2.constant(global_tok);
        let gcn2 = block.gcn.forward(&mut ctx2, jt2, &model.adjacency).unwrap();
        let z2 = ctx2.tape.concat(&[gcn2, gt2], 0).unwrap();
        let ss = block.vss.ss2d.forward(&mut ctx2, z2, true).unwrap();
        let y1 = ctx2.tape.add(z2, ss).unwrap();
        let ln = ctx2.layer_norm(y1, "gss0.vss.ffn_norm").unwrap();
        let f1 = ctx2.linear(ln, "gss0.vss.ffn.fc1").unwrap();
        let f1 = ctx2.tape.silu(f1).unwrap();
        let f2 = ctx2.linear(f1, "gss0.vss.ffn.fc2").unwrap();
        let out2 = ctx2.tape.add(y1, f2).unwrap();
        let val2 = ctx2.tape.value(out2).clone();

        assert!(module_val.max_abs_diff(&val2) < 1e-12);
    }

    #[test]
    fn global_token_split_rejoin_is_lossless() {
        let dims = tiny_dims();
        let (store, state, _) = build(dims, PipelineConfig::full(), 8);
        let mut ctx = FwdCtx::new(&store, &state, Mode::Eval);
        let seq = ctx.constant(Tensor::randn(
            &[NUM_JOINTS + 1, dims.token_dim],
            1.0,
            &mut ChaCha8Rng::seed_from_u64(11),
        ));
        let head = ctx.tape.slice(seq, 0, 0, NUM_JOINTS).unwrap();
        let tail = ctx.tape.slice(seq, 0, NUM_JOINTS, 1).unwrap();
        let rejoined = ctx.tape.concat(&[head, tail], 0).unwrap();
        assert_eq!(
            ctx.tape.value(rejoined).data(),
            ctx.tape.value(seq).data()
        );
    }

    #[test]
    fn dead_parameter_sweep_full_model() {
        // Every parameter must receive a nonzero gradient on at least one
        // random batch when all branches are enabled.
        use crate::loss::{total_loss, GtAnnotations, LossWeights};
        let dims = tiny_dims();
        let (mut store, state, model) = build(dims, PipelineConfig::full(), 12);
        // Move heads off their zero init so gradients reach every path.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for name in store.names() {
            if name.contains("head") {
                let t = store.get_mut(&name).unwrap();
                for v in t.data_mut() {
                    *v += 0.02 * (rng.gen_range(-1.0..1.0f64));
                }
            }
        }
        store.zero_grads();
        let cfg = GenConfig::default();
        for seed in 0..2u64 {
            let mut srng = ChaCha8Rng::seed_from_u64(200 + seed);
            let (image, gt) = synth_sample(&mut srng, &cfg).unwrap();
            let mut ctx = FwdCtx::new(&store, &state, Mode::Train);
            let out = model.forward(&mut ctx, &image).unwrap();
            let ann = GtAnnotations::from_sample(&gt);
            let inputs = out.loss_inputs();
            let (loss, _) = total_loss(&mut ctx, &inputs, &ann, &LossWeights::default(), None).unwrap();
            let mut tape = std::mem::take(&mut ctx.tape);
            drop(ctx);
            crate::tape::backward(loss, &mut tape, &mut store).unwrap();
        }
        let mut dead = Vec::new();
        for (name, t) in store.iter() {
            let g = t.grad().unwrap();
            if g.iter().all(|&v| v == 0.0) {
                dead.push(name.to_string());
            }
        }
        assert!(dead.is_empty(), "dead parameters: {dead:?}");
    }
}
