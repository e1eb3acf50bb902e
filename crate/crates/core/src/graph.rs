//! Semantic graph convolution over the 21-joint hand skeleton.
//!
//! Joint order follows the MANO convention used throughout the pipeline:
//! wrist = 0, then four-joint chains for thumb (1-4), index (5-8),
//! middle (9-12), ring (13-16) and pinky (17-20); the last joint of each
//! chain is the fingertip. The adjacency carries self-loops so every node
//! keeps its own feature under the row-softmax weighting.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{self, FwdCtx};
use crate::params::ParamStore;
use crate::tape::Var;
use crate::tensor::Tensor;

pub const NUM_JOINTS: usize = 21;
pub const WRIST: usize = 0;
pub const FINGER_BASES: [usize; 5] = [1, 5, 9, 13, 17];
pub const FINGERTIPS: [usize; 5] = [4, 8, 12, 16, 20];

/// The 20 undirected bones of the kinematic tree, ordered chain by chain.
pub fn hand_edges() -> Vec<(usize, usize)> {
    let mut edges = Vec::with_capacity(20);
    for &base in &FINGER_BASES {
        edges.push((WRIST, base));
        for j in base..base + 3 {
            edges.push((j, j + 1));
        }
    }
    edges
}

/// Parent of each joint; the wrist is its own parent.
pub fn joint_parents() -> [usize; NUM_JOINTS] {
    let mut parents = [0usize; NUM_JOINTS];
    for (p, c) in hand_edges() {
        parents[c] = p;
    }
    parents[WRIST] = WRIST;
    parents
}

/// Fixed 21x21 binary adjacency of the hand tree with self-loops.
pub fn hand_adjacency() -> Tensor {
    let mut g = Tensor::zeros(&[NUM_JOINTS, NUM_JOINTS]);
    for i in 0..NUM_JOINTS {
        g.set(&[i, i], 1.0);
    }
    for (a, b) in hand_edges() {
        g.set(&[a, b], 1.0);
        g.set(&[b, a], 1.0);
    }
    g
}

/// Row-wise softmax of `m` restricted to the support of the binary
/// adjacency `g`; entries outside the support are exactly zero and every
/// row sums to one.
pub fn masked_softmax_adjacency(m: &Tensor, g: &Tensor) -> Result<Tensor> {
    if m.shape() != g.shape() || m.ndim() != 2 {
        return Err(Error::ShapeMismatch {
            op: "masked_softmax_adjacency",
            lhs: m.shape().to_vec(),
            rhs: g.shape().to_vec(),
        });
    }
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let mut out = Tensor::zeros(&[rows, cols]);
    for r in 0..rows {
        let mut mx = f64::NEG_INFINITY;
        for c in 0..cols {
            if g.at(&[r, c]) > 0.5 {
                mx = mx.max(m.at(&[r, c]));
            }
        }
        if mx == f64::NEG_INFINITY {
            return Err(Error::invalid(
                "masked_softmax_adjacency",
                format!("row {r} has no neighbors"),
            ));
        }
        let mut z = 0.0;
        for c in 0..cols {
            if g.at(&[r, c]) > 0.5 {
                let e = (m.at(&[r, c]) - mx).exp();
                out.set(&[r, c], e);
                z += e;
            }
        }
        for c in 0..cols {
            let v = out.at(&[r, c]) / z;
            out.set(&[r, c], v);
        }
    }
    Ok(out)
}

/// One graph convolution: token mixing over the masked-softmax adjacency,
/// channel mixing by a square weight, then batch norm and ReLU.
///
/// With tokens-first layout X (J, C) the update is
/// relu(bn(P X W)) where P row-stochastically mixes each joint with its
/// 1-hop neighborhood.
#[derive(Clone, Debug)]
pub struct GcnLayer {
    pub prefix: String,
    pub dim: usize,
}

impl GcnLayer {
    pub fn new(prefix: &str, dim: usize) -> Self {
        GcnLayer {
            prefix: prefix.to_string(),
            dim,
        }
    }

    pub fn init(
        store: &mut ParamStore,
        state: &mut crate::params::StateStore,
        rng: &mut impl Rng,
        prefix: &str,
        dim: usize,
    ) -> Result<Self> {
        store.register(
            &format!("{prefix}.weight"),
            crate::params::init_linear_weight(dim, dim, rng),
        )?;
        // Zero mask logits: uniform attention over each neighborhood.
        store.register(
            &format!("{prefix}.mask"),
            Tensor::zeros(&[NUM_JOINTS, NUM_JOINTS]),
        )?;
        nn::init_batch_norm(store, state, &format!("{prefix}.bn"), dim)?;
        Ok(GcnLayer::new(prefix, dim))
    }

    /// x (21, C) -> (21, C).
    pub fn forward(&self, ctx: &mut FwdCtx, x: Var, graph: &Tensor) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != NUM_JOINTS || shape[1] != self.dim {
            return Err(Error::ShapeMismatch {
                op: "semantic_graph_conv",
                lhs: shape,
                rhs: vec![NUM_JOINTS, self.dim],
            });
        }
        let m = ctx.param(&format!("{}.mask", self.prefix))?;
        let p = ctx.tape.masked_softmax(m, graph)?;
        let mixed = ctx.tape.matmul(p, x)?;
        let w = ctx.param(&format!("{}.weight", self.prefix))?;
        let projected = ctx.tape.matmul(mixed, w)?;
        let normed = ctx.batch_norm(projected, &format!("{}.bn", self.prefix))?;
        ctx.tape.relu(normed)
    }
}
