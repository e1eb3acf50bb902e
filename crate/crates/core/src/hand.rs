//! Simplified parametric hand.
//!
//! Pose theta holds 16 axis-angle rotations (48 values, slot 0 is the global
//! orientation); shape beta scales bone lengths through a fixed 20x10 basis;
//! the camera translation is applied only at projection time. Joints follow
//! the MANO order defined in [`crate::graph`]; the 778 mesh vertices are
//! distributed over per-bone capsules rigidly attached to their bone frames.
//!
//! 2D points are (row, col) pixels in the 256x192 frame: row = F*x/z + 128,
//! col = F*y/z + 96.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::graph::{hand_edges, NUM_JOINTS};
use crate::ops::UnaryKind;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const NUM_VERTICES: usize = 778;
pub const NUM_BONES: usize = 20;
pub const NUM_ROT_SLOTS: usize = 16;
pub const THETA_DIM: usize = 48;
pub const BETA_DIM: usize = 10;
pub const SHAPE_GAIN: f64 = 0.05;

pub const FOCAL: f64 = 5000.0;
pub const IMAGE_H: usize = 256;
pub const IMAGE_W: usize = 192;
pub const PRINCIPAL: [f64; 2] = [128.0, 96.0];

/// Pose, shape and camera translation: the regression target.
#[derive(Clone, Debug)]
pub struct HandParams {
    pub theta: Tensor,
    pub beta: Tensor,
    pub cam: Tensor,
}

impl HandParams {
    pub fn new(theta: Tensor, beta: Tensor, cam: Tensor) -> Result<Self> {
        if theta.shape() != [THETA_DIM] || beta.shape() != [BETA_DIM] || cam.shape() != [3] {
            return Err(Error::InvalidShape {
                op: "HandParams",
                shape: theta.shape().to_vec(),
                reason: "expected theta (48,), beta (10,), cam (3,)".into(),
            });
        }
        for t in [&theta, &beta, &cam] {
            t.check_finite("HandParams")?;
        }
        Ok(HandParams { theta, beta, cam })
    }

    pub fn rest() -> Self {
        HandParams {
            theta: Tensor::zeros(&[THETA_DIM]),
            beta: Tensor::zeros(&[BETA_DIM]),
            cam: Tensor::new(vec![3], vec![0.0, 0.0, 0.6]).unwrap(),
        }
    }
}

/// A full prediction: parameters plus the geometry they generate.
#[derive(Clone, Debug)]
pub struct HandPrediction {
    pub params: HandParams,
    pub joints3d: Tensor,
    pub joints2d: Tensor,
    pub vertices: Tensor,
}

/// One capsule-mesh vertex in its bone frame: an axial fraction along the
/// rest bone vector (which scales with shape) plus a fixed radial offset.
#[derive(Clone, Debug)]
struct VertexLocal {
    axial: [f64; 3],
    radial: [f64; 3],
}

pub struct HandTemplate {
    pub rest_joints: Vec<[f64; 3]>,
    pub bones: Vec<(usize, usize)>,
    pub shape_basis: Tensor,
    pub radii: Vec<f64>,
    pub verts_per_bone: Vec<usize>,
    vertex_local: Vec<Vec<VertexLocal>>,
    pub faces: Vec<[usize; 3]>,
    /// theta slot per joint; fingertips carry no rotation.
    pub rot_slot: Vec<Option<usize>>,
}

static TEMPLATE: OnceLock<HandTemplate> = OnceLock::new();

impl HandTemplate {
    pub fn get() -> &'static HandTemplate {
        TEMPLATE.get_or_init(|| {
            Self::parse(include_str!("../assets/hand_template_v1.txt"))
                .expect("bundled hand template is valid")
        })
    }

    fn parse(text: &str) -> Result<HandTemplate> {
        let tokens: Vec<&str> = text
            .lines()
            .filter(|l| !l.trim_start().starts_with('#'))
            .flat_map(|l| l.split_whitespace())
            .collect();
        let mut pos = 0usize;

        fn expect(tokens: &[&str], pos: &mut usize, word: &str) -> Result<()> {
            match tokens.get(*pos) {
                Some(&t) if t == word => {
                    *pos += 1;
                    Ok(())
                }
                other => Err(Error::format(
                    "hand_template",
                    format!("expected '{word}', found {other:?}"),
                )),
            }
        }
        fn numbers(tokens: &[&str], pos: &mut usize, count: usize) -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                let t = tokens
                    .get(*pos)
                    .ok_or_else(|| Error::format("hand_template", "unexpected end of data"))?;
                *pos += 1;
                out.push(t.parse::<f64>().map_err(|e| {
                    Error::format("hand_template", format!("bad number {t}: {e}"))
                })?);
            }
            Ok(out)
        }

        expect(&tokens, &mut pos, "version")?;
        let version = numbers(&tokens, &mut pos, 1)?[0] as u32;
        if version != 1 {
            return Err(Error::format(
                "hand_template",
                format!("unsupported version {version}"),
            ));
        }
        expect(&tokens, &mut pos, "joints")?;
        let dims = numbers(&tokens, &mut pos, 2)?;
        if dims != [NUM_JOINTS as f64, 3.0] {
            return Err(Error::format("hand_template", "joint table must be 21x3"));
        }
        let jdata = numbers(&tokens, &mut pos, NUM_JOINTS * 3)?;
        expect(&tokens, &mut pos, "basis")?;
        let dims = numbers(&tokens, &mut pos, 2)?;
        if dims != [NUM_BONES as f64, BETA_DIM as f64] {
            return Err(Error::format("hand_template", "basis must be 20x10"));
        }
        let basis = numbers(&tokens, &mut pos, NUM_BONES * BETA_DIM)?;
        expect(&tokens, &mut pos, "radii")?;
        let dims = numbers(&tokens, &mut pos, 1)?;
        if dims != [NUM_BONES as f64] {
            return Err(Error::format("hand_template", "radii must have 20 entries"));
        }
        let radii = numbers(&tokens, &mut pos, NUM_BONES)?;

        let rest_joints: Vec<[f64; 3]> = jdata
            .chunks(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        let bones = hand_edges();

        // theta slots: wrist then each finger's three articulated joints.
        let mut rot_slot = vec![None; NUM_JOINTS];
        rot_slot[0] = Some(0);
        let mut slot = 1;
        for &base in &crate::graph::FINGER_BASES {
            for j in base..base + 3 {
                rot_slot[j] = Some(slot);
                slot += 1;
            }
        }
        debug_assert_eq!(slot, NUM_ROT_SLOTS);

        // Distribute 778 vertices over 20 capsules: the index/middle/ring
        // palm bones (longest) get 44, the rest 38.
        let mut verts_per_bone = vec![38usize; NUM_BONES];
        for b in [4usize, 8, 12] {
            verts_per_bone[b] = 44;
        }
        debug_assert_eq!(verts_per_bone.iter().sum::<usize>(), NUM_VERTICES);

        let mut vertex_local = Vec::with_capacity(NUM_BONES);
        let mut faces = Vec::new();
        let mut base_index = 0;
        for (b, &(p, c)) in bones.iter().enumerate() {
            let count = verts_per_bone[b];
            let rings = (count - 2) / 6;
            let bvec = [
                rest_joints[c][0] - rest_joints[p][0],
                rest_joints[c][1] - rest_joints[p][1],
                rest_joints[c][2] - rest_joints[p][2],
            ];
            let (n1, n2) = orthonormal_frame(bvec);
            let r = radii[b];
            let mut locals = Vec::with_capacity(count);
            // start cap on the axis
            locals.push(VertexLocal {
                axial: [0.0; 3],
                radial: [0.0; 3],
            });
            for ring in 0..rings {
                let u = (ring as f64 + 0.5) / rings as f64;
                for a in 0..6 {
                    let phi = std::f64::consts::TAU * (a as f64 / 6.0 + ring as f64 / 12.0);
                    let radial = [
                        r * (phi.cos() * n1[0] + phi.sin() * n2[0]),
                        r * (phi.cos() * n1[1] + phi.sin() * n2[1]),
                        r * (phi.cos() * n1[2] + phi.sin() * n2[2]),
                    ];
                    locals.push(VertexLocal {
                        axial: [u * bvec[0], u * bvec[1], u * bvec[2]],
                        radial,
                    });
                }
            }
            // end cap on the axis
            locals.push(VertexLocal {
                axial: bvec,
                radial: [0.0; 3],
            });

            // faces: cap fans plus quad bands between rings
            let cap0 = base_index;
            let cap1 = base_index + count - 1;
            let ring_start = |ring: usize| base_index + 1 + 6 * ring;
            for a in 0..6 {
                faces.push([cap0, ring_start(0) + a, ring_start(0) + (a + 1) % 6]);
            }
            for ring in 0..rings.saturating_sub(1) {
                for a in 0..6 {
                    let v0 = ring_start(ring) + a;
                    let v1 = ring_start(ring) + (a + 1) % 6;
                    let w0 = ring_start(ring + 1) + a;
                    let w1 = ring_start(ring + 1) + (a + 1) % 6;
                    faces.push([v0, w0, w1]);
                    faces.push([v0, w1, v1]);
                }
            }
            for a in 0..6 {
                faces.push([cap1, ring_start(rings - 1) + (a + 1) % 6, ring_start(rings - 1) + a]);
            }

            vertex_local.push(locals);
            base_index += count;
        }

        Ok(HandTemplate {
            rest_joints,
            bones,
            shape_basis: Tensor::new(vec![NUM_BONES, BETA_DIM], basis)?,
            radii: radii.to_vec(),
            verts_per_bone,
            vertex_local,
            faces,
            rot_slot,
        })
    }

    pub fn rest_bone_vec(&self, bone: usize) -> [f64; 3] {
        let (p, c) = self.bones[bone];
        [
            self.rest_joints[c][0] - self.rest_joints[p][0],
            self.rest_joints[c][1] - self.rest_joints[p][1],
            self.rest_joints[c][2] - self.rest_joints[p][2],
        ]
    }

    pub fn rest_bone_len(&self, bone: usize) -> f64 {
        let v = self.rest_bone_vec(bone);
        (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
    }
}

fn orthonormal_frame(dir: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let len = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    let d = [dir[0] / len, dir[1] / len, dir[2] / len];
    // cross with z unless nearly parallel
    let up = if d[2].abs() < 0.9 {
        [0.0, 0.0, 1.0]
    } else {
        [1.0, 0.0, 0.0]
    };
    let mut n1 = [
        d[1] * up[2] - d[2] * up[1],
        d[2] * up[0] - d[0] * up[2],
        d[0] * up[1] - d[1] * up[0],
    ];
    let l1 = (n1[0] * n1[0] + n1[1] * n1[1] + n1[2] * n1[2]).sqrt();
    n1 = [n1[0] / l1, n1[1] / l1, n1[2] / l1];
    let n2 = [
        d[1] * n1[2] - d[2] * n1[1],
        d[2] * n1[0] - d[0] * n1[2],
        d[0] * n1[1] - d[1] * n1[0],
    ];
    (n1, n2)
}

/// Flattened skew-symmetric generators: row i is the 3x3 matrix E_i with
/// (E_i v) = e_i x v, so that aa . SKEW = skew(aa) flattened.
const SKEW_BASIS: [f64; 27] = [
    0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0, // e_x
    0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, // e_y
    0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, // e_z
];

/// Rodrigues rotation from an axis-angle 3-vector, differentiable on the
/// tape and well-behaved at zero angle via the even-power series.
pub fn rodrigues(tape: &mut Tape, aa: Var) -> Result<Var> {
    if tape.shape(aa) != [3] {
        return Err(Error::InvalidShape {
            op: "rodrigues",
            shape: tape.shape(aa).to_vec(),
            reason: "expected an axis-angle 3-vector".into(),
        });
    }
    let sq = tape.mul(aa, aa)?;
    let s2 = tape.sum(sq)?;
    let coeff_a = tape.unary(UnaryKind::RotA, s2)?;
    let coeff_b = tape.unary(UnaryKind::RotB, s2)?;
    let aa_row = tape.reshape(aa, &[1, 3])?;
    let basis = tape.constant(Tensor::new(vec![3, 9], SKEW_BASIS.to_vec())?);
    let k_flat = tape.matmul(aa_row, basis)?;
    let k = tape.reshape(k_flat, &[3, 3])?;
    let k2 = tape.matmul(k, k)?;
    let eye = tape.constant(Tensor::eye(3));
    let term_a = tape.scale_by(coeff_a, k)?;
    let term_b = tape.scale_by(coeff_b, k2)?;
    let partial = tape.add(eye, term_a)?;
    tape.add(partial, term_b)
}

pub struct FkOutput {
    /// (21, 3) joint positions, wrist-rooted, meters.
    pub joints: Var,
    /// (778, 3) capsule-mesh vertices.
    pub vertices: Var,
    /// Local rotation matrices per theta slot, (3, 3) each.
    pub local_rots: Vec<Var>,
}

/// Poses the template: rotations compose down the kinematic tree, bone
/// lengths scale as 1 + 0.05 * (basis . beta), vertices ride their bone
/// frames. The global orientation (slot 0) rotates the whole hand about
/// the origin.
pub fn forward_kinematics(tape: &mut Tape, theta: Var, beta: Var) -> Result<FkOutput> {
    if tape.shape(theta) != [THETA_DIM] || tape.shape(beta) != [BETA_DIM] {
        return Err(Error::ShapeMismatch {
            op: "forward_kinematics",
            lhs: tape.shape(theta).to_vec(),
            rhs: tape.shape(beta).to_vec(),
        });
    }
    tape.value(theta).check_finite("forward_kinematics")?;
    tape.value(beta).check_finite("forward_kinematics")?;
    let tmpl = HandTemplate::get();

    // Local rotation per articulated slot.
    let mut local_rots = Vec::with_capacity(NUM_ROT_SLOTS);
    for slot in 0..NUM_ROT_SLOTS {
        let aa = tape.slice(theta, 0, 3 * slot, 3)?;
        local_rots.push(rodrigues(tape, aa)?);
    }

    // Per-bone length scale (20, 1): 1 + gain * (basis . beta).
    let basis = tape.constant(tmpl.shape_basis.clone());
    let beta_col = tape.reshape(beta, &[BETA_DIM, 1])?;
    let mix = tape.matmul(basis, beta_col)?;
    let scaled = tape.scale(mix, SHAPE_GAIN)?;
    let bone_scale = tape.add_scalar(scaled, 1.0)?;

    // Kinematic tree traversal. Positions as (1, 3) rows, global rotations
    // as (3, 3) per articulated joint.
    let mut joint_pos: Vec<Option<Var>> = vec![None; NUM_JOINTS];
    let mut global_rot: Vec<Option<Var>> = vec![None; NUM_JOINTS];
    let mut global_rot_t: Vec<Option<Var>> = vec![None; NUM_JOINTS];

    let root_rot = local_rots[0];
    let root_rot_t = tape.transpose(root_rot)?;
    let rest0 = tape.constant(Tensor::new(vec![1, 3], tmpl.rest_joints[0].to_vec())?);
    joint_pos[0] = Some(tape.matmul(rest0, root_rot_t)?);
    global_rot[0] = Some(root_rot);
    global_rot_t[0] = Some(root_rot_t);

    for (b, &(p, c)) in tmpl.bones.iter().enumerate() {
        let s_b = tape.slice(bone_scale, 0, b, 1)?;
        let bvec = tape.constant(Tensor::new(vec![1, 3], tmpl.rest_bone_vec(b).to_vec())?);
        let scaled_bone = tape.scale_by(s_b, bvec)?;
        let parent_rot_t = global_rot_t[p].expect("parent visited before child");
        let offset = tape.matmul(scaled_bone, parent_rot_t)?;
        let parent_pos = joint_pos[p].unwrap();
        joint_pos[c] = Some(tape.add(parent_pos, offset)?);
        if let Some(slot) = tmpl.rot_slot[c] {
            let parent_rot = global_rot[p].unwrap();
            let composed = tape.matmul(parent_rot, local_rots[slot])?;
            global_rot[c] = Some(composed);
            global_rot_t[c] = Some(tape.transpose(composed)?);
        } else {
            global_rot[c] = global_rot[p];
            global_rot_t[c] = global_rot_t[p];
        }
    }

    let rows: Vec<Var> = joint_pos.iter().map(|p| p.unwrap()).collect();
    let joints = tape.concat(&rows, 0)?;

    // Vertices: per bone, scale the axial components, add the fixed radial
    // offsets, rotate by the parent frame and translate to the parent joint.
    let mut groups = Vec::with_capacity(NUM_BONES);
    for (b, &(p, _)) in tmpl.bones.iter().enumerate() {
        let locals = &tmpl.vertex_local[b];
        let k = locals.len();
        let mut axial = Vec::with_capacity(k * 3);
        let mut radial = Vec::with_capacity(k * 3);
        for v in locals {
            axial.extend_from_slice(&v.axial);
            radial.extend_from_slice(&v.radial);
        }
        let axial = tape.constant(Tensor::new(vec![k, 3], axial)?);
        let radial = tape.constant(Tensor::new(vec![k, 3], radial)?);
        let s_b = tape.slice(bone_scale, 0, b, 1)?;
        let axial_scaled = tape.scale_by(s_b, axial)?;
        let local = tape.add(axial_scaled, radial)?;
        let rot_t = global_rot_t[p].unwrap();
        let rotated = tape.matmul(local, rot_t)?;
        let origin = joint_pos[p].unwrap();
        let origin_flat = tape.reshape(origin, &[3])?;
        groups.push(tape.add_row_vec(rotated, origin_flat)?);
    }
    let vertices = tape.concat(&groups, 0)?;

    Ok(FkOutput {
        joints,
        vertices,
        local_rots,
    })
}

/// Pinhole projection of (N, 3) camera-frame points translated by `cam`.
/// Errors if any point lands at or behind the camera plane.
pub fn perspective_project(tape: &mut Tape, points: Var, focal: f64, cam: Var) -> Result<Var> {
    let shape = tape.shape(points).to_vec();
    if shape.len() != 2 || shape[1] != 3 || tape.shape(cam) != [3] {
        return Err(Error::ShapeMismatch {
            op: "perspective_project",
            lhs: shape,
            rhs: tape.shape(cam).to_vec(),
        });
    }
    let shifted = tape.add_row_vec(points, cam)?;
    for (i, row) in (0..shape[0]).map(|i| (i, tape.value(shifted).row(i).to_vec())) {
        if row[2] <= 0.0 {
            return Err(Error::BehindCamera { index: i, z: row[2] });
        }
    }
    let xy = tape.slice(shifted, 1, 0, 2)?;
    let z = tape.slice(shifted, 1, 2, 1)?;
    let zz = tape.concat(&[z, z], 1)?;
    let unit = tape.div(xy, zz)?;
    let scaled = tape.scale(unit, focal)?;
    let principal = tape.constant(Tensor::new(vec![2], PRINCIPAL.to_vec())?);
    tape.add_row_vec(scaled, principal)
}

/// Convenience: pose the hand and project on a scratch tape.
pub fn fk_eval(theta: &Tensor, beta: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let t = tape.constant(theta.clone());
    let b = tape.constant(beta.clone());
    let out = forward_kinematics(&mut tape, t, b)?;
    Ok((
        tape.value(out.joints).clone(),
        tape.value(out.vertices).clone(),
    ))
}

/// Full evaluation of a parameter set into a prediction.
pub fn predict_from_params(params: &HandParams) -> Result<HandPrediction> {
    let mut tape = Tape::new();
    let t = tape.constant(params.theta.clone());
    let b = tape.constant(params.beta.clone());
    let c = tape.constant(params.cam.clone());
    let fk = forward_kinematics(&mut tape, t, b)?;
    let j2d = perspective_project(&mut tape, fk.joints, FOCAL, c)?;
    Ok(HandPrediction {
        params: params.clone(),
        joints3d: tape.value(fk.joints).clone(),
        joints2d: tape.value(j2d).clone(),
        vertices: tape.value(fk.vertices).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn template_loads_with_expected_counts() {
        let t = HandTemplate::get();
        assert_eq!(t.rest_joints.len(), 21);
        assert_eq!(t.bones.len(), 20);
        assert_eq!(t.verts_per_bone.iter().sum::<usize>(), NUM_VERTICES);
        assert!(!t.faces.is_empty());
        for f in &t.faces {
            assert!(f.iter().all(|&v| v < NUM_VERTICES));
        }
    }

    #[test]
    fn rest_pose_reproduces_template_exactly() {
        let (joints, verts) = fk_eval(&Tensor::zeros(&[48]), &Tensor::zeros(&[10])).unwrap();
        let t = HandTemplate::get();
        for j in 0..21 {
            for a in 0..3 {
                assert!(
                    (joints.at(&[j, a]) - t.rest_joints[j][a]).abs() < 1e-12,
                    "joint {j} axis {a}"
                );
            }
        }
        assert_eq!(verts.shape(), &[778, 3]);
    }

    #[test]
    fn global_half_turn_about_z_rotates_template() {
        let mut theta = Tensor::zeros(&[48]);
        theta.set(&[2], std::f64::consts::PI);
        let (joints, _) = fk_eval(&theta, &Tensor::zeros(&[10])).unwrap();
        let t = HandTemplate::get();
        for j in 0..21 {
            let expect = [
                -t.rest_joints[j][0],
                -t.rest_joints[j][1],
                t.rest_joints[j][2],
            ];
            for a in 0..3 {
                assert!(
                    (joints.at(&[j, a]) - expect[a]).abs() < 1e-12,
                    "joint {j} axis {a}: {} vs {}",
                    joints.at(&[j, a]),
                    expect[a]
                );
            }
        }
    }

    #[test]
    fn beta0_scales_bones_by_basis_column() {
        let t = HandTemplate::get();
        let mut beta = Tensor::zeros(&[10]);
        beta.set(&[0], 1.0);
        let (joints, _) = fk_eval(&Tensor::zeros(&[48]), &beta).unwrap();
        for (b, &(p, c)) in t.bones.iter().enumerate() {
            let len: f64 = (0..3)
                .map(|a| (joints.at(&[c, a]) - joints.at(&[p, a])).powi(2))
                .sum::<f64>()
                .sqrt();
            let expect = t.rest_bone_len(b) * (1.0 + SHAPE_GAIN * t.shape_basis.at(&[b, 0]));
            assert!((len - expect).abs() < 1e-12, "bone {b}: {len} vs {expect}");
        }
    }

    #[test]
    fn bone_lengths_invariant_under_pose() {
        let t = HandTemplate::get();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let theta = Tensor::randn(&[48], 0.6, &mut rng);
            let beta = Tensor::randn(&[10], 1.0, &mut rng);
            let (joints, _) = fk_eval(&theta, &beta).unwrap();
            for (b, &(p, c)) in t.bones.iter().enumerate() {
                let len: f64 = (0..3)
                    .map(|a| (joints.at(&[c, a]) - joints.at(&[p, a])).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let mut scale = 1.0;
                for k in 0..BETA_DIM {
                    scale += SHAPE_GAIN * t.shape_basis.at(&[b, k]) * beta.data()[k];
                }
                let expect = t.rest_bone_len(b) * scale;
                assert!((len - expect).abs() < 1e-10, "bone {b}");
            }
        }
    }

    #[test]
    fn vertices_stay_on_their_capsules() {
        let t = HandTemplate::get();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..3 {
            let theta = Tensor::randn(&[48], 0.7, &mut rng);
            let beta = Tensor::randn(&[10], 1.0, &mut rng);
            let (joints, verts) = fk_eval(&theta, &beta).unwrap();
            let mut v0 = 0;
            for (b, &(p, c)) in t.bones.iter().enumerate() {
                let a: Vec<f64> = (0..3).map(|k| joints.at(&[p, k])).collect();
                let bb: Vec<f64> = (0..3).map(|k| joints.at(&[c, k])).collect();
                for v in v0..v0 + t.verts_per_bone[b] {
                    let pt: Vec<f64> = (0..3).map(|k| verts.at(&[v, k])).collect();
                    let d = point_segment_distance(&pt, &a, &bb);
                    assert!(
                        d <= 1.2 * t.radii[b] + 1e-12,
                        "bone {b} vertex {v}: {d} vs {}",
                        t.radii[b]
                    );
                }
                v0 += t.verts_per_bone[b];
            }
        }
    }

    fn point_segment_distance(p: &[f64], a: &[f64], b: &[f64]) -> f64 {
        let ab: Vec<f64> = (0..3).map(|k| b[k] - a[k]).collect();
        let ap: Vec<f64> = (0..3).map(|k| p[k] - a[k]).collect();
        let denom: f64 = ab.iter().map(|v| v * v).sum();
        let t = if denom > 0.0 {
            (ab.iter().zip(&ap).map(|(x, y)| x * y).sum::<f64>() / denom).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (0..3)
            .map(|k| (p[k] - (a[k] + t * ab[k])).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn projection_optical_axis_and_similar_triangles() {
        let mut tape = Tape::new();
        let pts = tape.constant(Tensor::new(vec![2, 3], vec![0.0, 0.0, 0.0, 0.1, 0.0, 0.0]).unwrap());
        let cam1 = tape.constant(Tensor::new(vec![3], vec![0.0, 0.0, 0.5]).unwrap());
        let p1 = perspective_project(&mut tape, pts, FOCAL, cam1).unwrap();
        assert!((tape.value(p1).at(&[0, 0]) - 128.0).abs() < 1e-12);
        assert!((tape.value(p1).at(&[0, 1]) - 96.0).abs() < 1e-12);

        let mut tape = Tape::new();
        let pts = tape.constant(Tensor::new(vec![1, 3], vec![0.1, 0.0, 0.0]).unwrap());
        let cam = tape.constant(Tensor::new(vec![3], vec![0.0, 0.0, 10.0]).unwrap());
        let p = perspective_project(&mut tape, pts, FOCAL, cam).unwrap();
        assert!((tape.value(p).at(&[0, 0]) - 178.0).abs() < 1e-12);
        assert!((tape.value(p).at(&[0, 1]) - 96.0).abs() < 1e-12);
    }

    #[test]
    fn projection_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut data = Vec::new();
        for _ in 0..10 {
            data.push(rng.gen_range(-0.2..0.2));
            data.push(rng.gen_range(-0.2..0.2));
            data.push(rng.gen_range(0.5..2.0));
        }
        let pts = Tensor::new(vec![10, 3], data.clone()).unwrap();
        let doubled = Tensor::new(vec![10, 3], data.iter().map(|v| 2.0 * v).collect()).unwrap();
        let zero_cam = Tensor::zeros(&[3]);

        let project = |p: &Tensor| -> Tensor {
            let mut tape = Tape::new();
            let pv = tape.constant(p.clone());
            let c = tape.constant(zero_cam.clone());
            let out = perspective_project(&mut tape, pv, FOCAL, c).unwrap();
            tape.value(out).clone()
        };
        let a = project(&pts);
        let b = project(&doubled);
        assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn behind_camera_is_structured_error() {
        let mut tape = Tape::new();
        let pts = tape.constant(Tensor::new(vec![1, 3], vec![0.0, 0.0, -0.5]).unwrap());
        let cam = tape.constant(Tensor::new(vec![3], vec![0.0, 0.0, 0.2]).unwrap());
        match perspective_project(&mut tape, pts, FOCAL, cam) {
            Err(Error::BehindCamera { index: 0, z }) => assert!(z <= 0.0),
            other => panic!("expected BehindCamera, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn fk_and_projection_pass_gradient_check() {
        use crate::gradcheck::{finite_diff_check, GradCheckOptions};
        use crate::params::ParamStore;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        store
            .register("theta", Tensor::randn(&[48], 0.4, &mut rng))
            .unwrap();
        store
            .register("beta", Tensor::randn(&[10], 0.8, &mut rng))
            .unwrap();
        store
            .register("cam", Tensor::new(vec![3], vec![0.002, -0.001, 0.55]).unwrap())
            .unwrap();
        let opts = GradCheckOptions {
            subsample: 32,
            ..Default::default()
        };
        let report = finite_diff_check(
            |tape, store| {
                let theta = tape.param(store, "theta")?;
                let beta = tape.param(store, "beta")?;
                let cam = tape.param(store, "cam")?;
                let fk = forward_kinematics(tape, theta, beta)?;
                let j2d = perspective_project(tape, fk.joints, FOCAL, cam)?;
                let w1 = tape.constant(Tensor::randn(&[21, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
                let w2 = tape.constant(Tensor::randn(&[21, 2], 0.01, &mut ChaCha8Rng::seed_from_u64(2)));
                let w3 = tape.constant(Tensor::randn(&[778, 3], 0.1, &mut ChaCha8Rng::seed_from_u64(3)));
                let a = tape.mul(fk.joints, w1)?;
                let a = tape.sum(a)?;
                let b = tape.mul(j2d, w2)?;
                let b = tape.sum(b)?;
                let c = tape.mul(fk.vertices, w3)?;
                let c = tape.sum(c)?;
                let ab = tape.add(a, b)?;
                tape.add(ab, c)
            },
            &mut store,
            &opts,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn rodrigues_matches_quaternion_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for _ in 0..20 {
            let aa: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut tape = Tape::new();
            let v = tape.constant(Tensor::new(vec![3], aa.clone()).unwrap());
            let r = rodrigues(&mut tape, v).unwrap();
            let got = tape.value(r);

            // Reference via nalgebra.
            let axis = nalgebra::Vector3::new(aa[0], aa[1], aa[2]);
            let reference = nalgebra::Rotation3::from_scaled_axis(axis);
            for i in 0..3 {
                for j in 0..3 {
                    assert!(
                        (got.at(&[i, j]) - reference[(i, j)]).abs() < 1e-12,
                        "{:?}",
                        aa
                    );
                }
            }
        }
    }
}
