//! Synthetic training data.
//!
//! Poses are drawn from a flexion-biased prior over the articulated joints,
//! shapes from a clipped normal, and the camera from a bounded depth range
//! with small lateral jitter. Rendering is deliberately information-rich:
//! per-bone capsule silhouettes plus per-joint Gaussian blobs in distinct
//! channel mixtures over a procedural noise background, so a small encoder
//! can learn at desk scale. Every sample carries exact ground truth.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{FINGER_BASES, NUM_JOINTS};
use crate::hand::{
    predict_from_params, HandParams, HandPrediction, HandTemplate, BETA_DIM, FOCAL, IMAGE_H,
    IMAGE_W, THETA_DIM,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GenConfig {
    pub z_range: (f64, f64),
    pub xy_jitter: f64,
    pub beta_clip: f64,
    pub blob_sigma: f64,
    pub min_in_frame_frac: f64,
    pub max_attempts: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            z_range: (0.3, 0.9),
            xy_jitter: 0.004,
            beta_clip: 3.0,
            blob_sigma: 3.0,
            min_in_frame_frac: 0.9,
            max_attempts: 100,
        }
    }
}

/// Ground truth attached to a rendered sample.
#[derive(Clone, Debug)]
pub struct SampleGt {
    pub prediction: HandPrediction,
    pub has_3d: bool,
    pub has_params: bool,
}

fn clipped_gaussian(rng: &mut impl Rng, std: f64, clip: f64) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    let g = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    (g * std).clamp(-clip, clip)
}

/// Draws pose, shape and camera from the generator prior. This is also the
/// "real" distribution the adversarial discriminators are trained against.
pub fn sample_params(rng: &mut impl Rng, cfg: &GenConfig) -> HandParams {
    let mut theta = vec![0.0; THETA_DIM];

    // Global orientation: uniform axis, bounded angle.
    let axis = {
        let mut v;
        loop {
            v = [
                rng.gen_range(-1.0..1.0f64),
                rng.gen_range(-1.0..1.0f64),
                rng.gen_range(-1.0..1.0f64),
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-3 && n <= 1.0 {
                v = [v[0] / n, v[1] / n, v[2] / n];
                break;
            }
        }
        v
    };
    let angle = rng.gen_range(0.0..2.4);
    for a in 0..3 {
        theta[a] = axis[a] * angle;
    }

    // Finger joints: flexion-biased about the x axis, small abduction at the
    // base joints, little twist. The thumb gets wider abduction.
    let mut slot = 1;
    for (finger, &_base) in FINGER_BASES.iter().enumerate() {
        for depth in 0..3 {
            let (flex, abd, twist) = if finger == 0 {
                (
                    rng.gen_range(-0.3..0.9),
                    clipped_gaussian(rng, 0.20, 0.5),
                    clipped_gaussian(rng, 0.05, 0.15),
                )
            } else {
                (
                    rng.gen_range(-0.15..1.3),
                    if depth == 0 {
                        clipped_gaussian(rng, 0.08, 0.25)
                    } else {
                        0.0
                    },
                    clipped_gaussian(rng, 0.03, 0.1),
                )
            };
            theta[3 * slot] = flex;
            theta[3 * slot + 1] = abd;
            theta[3 * slot + 2] = twist;
            slot += 1;
        }
    }

    let beta: Vec<f64> = (0..BETA_DIM)
        .map(|_| clipped_gaussian(rng, 1.0, cfg.beta_clip))
        .collect();

    let cam = vec![
        rng.gen_range(-cfg.xy_jitter..cfg.xy_jitter),
        rng.gen_range(-cfg.xy_jitter..cfg.xy_jitter),
        rng.gen_range(cfg.z_range.0..cfg.z_range.1),
    ];

    HandParams::new(
        Tensor::from_vec(theta),
        Tensor::from_vec(beta),
        Tensor::from_vec(cam),
    )
    .expect("prior draws are finite")
}

fn in_frame(row: f64, col: f64) -> bool {
    (0.0..IMAGE_H as f64).contains(&row) && (0.0..IMAGE_W as f64).contains(&col)
}

/// One rendered sample with exact ground truth. Rejects and redraws until at
/// least `min_in_frame_frac` of the joints project inside the frame.
pub fn synth_sample(rng: &mut impl Rng, cfg: &GenConfig) -> Result<(Tensor, SampleGt)> {
    let needed = (cfg.min_in_frame_frac * NUM_JOINTS as f64).ceil() as usize;
    for _ in 0..cfg.max_attempts {
        let params = sample_params(rng, cfg);
        let pred = predict_from_params(&params)?;
        let visible = (0..NUM_JOINTS)
            .filter(|&j| in_frame(pred.joints2d.at(&[j, 0]), pred.joints2d.at(&[j, 1])))
            .count();
        if visible < needed {
            continue;
        }
        let image = render(rng, cfg, &pred);
        return Ok((
            image,
            SampleGt {
                prediction: pred,
                has_3d: true,
                has_params: true,
            },
        ));
    }
    Err(Error::PlacementFailed(cfg.max_attempts))
}

/// Deterministic channel mixture for joint blobs, distinct per joint.
fn joint_channel_weight(joint: usize, chan: usize) -> f64 {
    let h = ((joint * 3 + chan) as u64)
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(0x2545f4914f6cdd1d);
    let unit = ((h >> 11) as f64) / ((1u64 << 53) as f64);
    0.3 + 0.7 * unit
}

fn render(rng: &mut impl Rng, cfg: &GenConfig, pred: &HandPrediction) -> Tensor {
    let (h, w) = (IMAGE_H, IMAGE_W);
    let mut img = vec![0.0f64; h * w * 3];

    // Coarse value-noise background, bilinearly upsampled.
    const GH: usize = 8;
    const GW: usize = 6;
    let mut coarse = [[0.0f64; 3]; GH * GW];
    for cell in coarse.iter_mut() {
        for c in cell.iter_mut() {
            *c = rng.gen_range(0.0..0.25);
        }
    }
    for y in 0..h {
        for x in 0..w {
            let fy = (y as f64 / h as f64) * (GH - 1) as f64;
            let fx = (x as f64 / w as f64) * (GW - 1) as f64;
            let (y0, x0) = (fy as usize, fx as usize);
            let (y1, x1) = ((y0 + 1).min(GH - 1), (x0 + 1).min(GW - 1));
            let (ay, ax) = (fy - y0 as f64, fx - x0 as f64);
            for c in 0..3 {
                let v = (1.0 - ay) * (1.0 - ax) * coarse[y0 * GW + x0][c]
                    + (1.0 - ay) * ax * coarse[y0 * GW + x1][c]
                    + ay * (1.0 - ax) * coarse[y1 * GW + x0][c]
                    + ay * ax * coarse[y1 * GW + x1][c];
                img[(y * w + x) * 3 + c] = v;
            }
        }
    }
    // Fine per-pixel noise.
    for v in img.iter_mut() {
        *v += rng.gen_range(0.0..0.02);
    }

    // Capsule silhouettes: each bone as a 2-d segment with a projected
    // radius, soft one-pixel edge.
    let tmpl = HandTemplate::get();
    let cam_z = pred.params.cam.data()[2];
    for (b, &(p, c)) in tmpl.bones.iter().enumerate() {
        let a = [pred.joints2d.at(&[p, 0]), pred.joints2d.at(&[p, 1])];
        let bb = [pred.joints2d.at(&[c, 0]), pred.joints2d.at(&[c, 1])];
        let z_mid = (pred.joints3d.at(&[p, 2]) + pred.joints3d.at(&[c, 2])) / 2.0 + cam_z;
        let r_px = (tmpl.radii[b] * FOCAL / z_mid).max(0.8);
        let (lo_y, hi_y) = segment_bounds(a[0], bb[0], r_px + 1.5, h);
        let (lo_x, hi_x) = segment_bounds(a[1], bb[1], r_px + 1.5, w);
        for y in lo_y..hi_y {
            for x in lo_x..hi_x {
                let d = point_segment_dist_2d(y as f64 + 0.5, x as f64 + 0.5, a, bb);
                let cover = (r_px + 0.5 - d).clamp(0.0, 1.0);
                if cover > 0.0 {
                    for ch in 0..3 {
                        img[(y * w + x) * 3 + ch] += 0.35 * cover;
                    }
                }
            }
        }
    }

    // Joint blobs: Gaussian bumps in distinct channel mixtures.
    let sigma = cfg.blob_sigma;
    let ext = (4.0 * sigma).ceil() as isize;
    for j in 0..NUM_JOINTS {
        let (jy, jx) = (pred.joints2d.at(&[j, 0]), pred.joints2d.at(&[j, 1]));
        if !jy.is_finite() || !jx.is_finite() {
            continue;
        }
        let (cy, cx) = (jy.round() as isize, jx.round() as isize);
        for dy in -ext..=ext {
            let y = cy + dy;
            if y < 0 || y >= h as isize {
                continue;
            }
            for dx in -ext..=ext {
                let x = cx + dx;
                if x < 0 || x >= w as isize {
                    continue;
                }
                let py = y as f64 + 0.5 - jy;
                let px = x as f64 + 0.5 - jx;
                let g = (-(py * py + px * px) / (2.0 * sigma * sigma)).exp();
                for ch in 0..3 {
                    img[(y as usize * w + x as usize) * 3 + ch] +=
                        0.6 * g * joint_channel_weight(j, ch);
                }
            }
        }
    }

    for v in img.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(vec![h, w, 3], img).expect("image buffer sized correctly")
}

fn segment_bounds(a: f64, b: f64, margin: f64, limit: usize) -> (usize, usize) {
    let lo = (a.min(b) - margin).floor().max(0.0) as usize;
    let hi = ((a.max(b) + margin).ceil() as usize).min(limit);
    (lo.min(limit), hi)
}

fn point_segment_dist_2d(py: f64, px: f64, a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [py - a[0], px - a[1]];
    let denom = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if denom > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / denom).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let dy = py - (a[0] + t * ab[0]);
    let dx = px - (a[1] + t * ab[1]);
    (dy * dy + dx * dx).sqrt()
}

/// Standardizes an image per channel to zero mean, unit variance: the
/// model-input convention.
pub fn normalize_image(image: &Tensor) -> Tensor {
    let chans = *image.shape().last().unwrap();
    let n = (image.numel() / chans) as f64;
    let mut mean = vec![0.0; chans];
    for (i, v) in image.data().iter().enumerate() {
        mean[i % chans] += v;
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; chans];
    for (i, v) in image.data().iter().enumerate() {
        let d = v - mean[i % chans];
        var[i % chans] += d * d;
    }
    var.iter_mut().for_each(|v| *v /= n);
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| (v - mean[i % chans]) / (var[i % chans].sqrt() + 1e-6))
        .collect();
    Tensor::new(image.shape().to_vec(), data).unwrap()
}
