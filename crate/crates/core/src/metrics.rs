//! Evaluation metrics and test-time augmentation.
//!
//! Position errors are reported after closed-form similarity (Procrustes)
//! alignment of the prediction onto the ground truth: centroid removal, SVD
//! of the cross-covariance with a reflection fix, and the trace-ratio scale.
//! F-scores, PCK and AUC follow the conventions of the hand-reconstruction
//! evaluation lineage; all distances are millimeters.

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::hand::{HandParams, HandPrediction, FOCAL, IMAGE_H, IMAGE_W, PRINCIPAL};
use crate::tensor::Tensor;

pub const MM_PER_M: f64 = 1000.0;

#[derive(Clone, Debug)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        SimilarityTransform {
            scale: 1.0,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn apply(&self, points: &Tensor) -> Tensor {
        let n = points.shape()[0];
        let mut out = Tensor::zeros(&[n, 3]);
        for i in 0..n {
            let p = [points.at(&[i, 0]), points.at(&[i, 1]), points.at(&[i, 2])];
            for a in 0..3 {
                let mut v = self.translation[a];
                for b in 0..3 {
                    v += self.scale * self.rotation[a][b] * p[b];
                }
                out.set(&[i, a], v);
            }
        }
        out
    }

    /// Orthonormality and determinant checks at 1e-9.
    pub fn is_valid(&self) -> bool {
        let r = Matrix3::from_fn(|i, j| self.rotation[i][j]);
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        ortho < 1e-9 && (r.determinant() - 1.0).abs() < 1e-9 && self.scale > 0.0
    }
}

fn centroid(points: &Tensor) -> [f64; 3] {
    let n = points.shape()[0] as f64;
    let mut c = [0.0; 3];
    for i in 0..points.shape()[0] {
        for a in 0..3 {
            c[a] += points.at(&[i, a]) / n;
        }
    }
    c
}

/// Optimal similarity alignment of `pred` onto `gt` minimizing the summed
/// squared distances. Returns the aligned points and the transform.
pub fn procrustes_align(pred: &Tensor, gt: &Tensor) -> Result<(Tensor, SimilarityTransform)> {
    if pred.shape() != gt.shape() || pred.ndim() != 2 || pred.shape()[1] != 3 {
        return Err(Error::ShapeMismatch {
            op: "procrustes_align",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    let n = pred.shape()[0];
    if n < 3 {
        return Err(Error::invalid("procrustes_align", "need at least 3 points"));
    }
    let mu_p = centroid(pred);
    let mu_g = centroid(gt);

    // Cross-covariance C = (1/N) sum (g - mu_g)(p - mu_p)^T and the spread
    // of the prediction.
    let mut c = Matrix3::zeros();
    let mut var_p = 0.0;
    for i in 0..n {
        let p = [
            pred.at(&[i, 0]) - mu_p[0],
            pred.at(&[i, 1]) - mu_p[1],
            pred.at(&[i, 2]) - mu_p[2],
        ];
        let g = [
            gt.at(&[i, 0]) - mu_g[0],
            gt.at(&[i, 1]) - mu_g[1],
            gt.at(&[i, 2]) - mu_g[2],
        ];
        for a in 0..3 {
            for b in 0..3 {
                c[(a, b)] += g[a] * p[b] / n as f64;
            }
        }
        var_p += (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]) / n as f64;
    }
    if var_p < 1e-18 {
        return Err(Error::invalid(
            "procrustes_align",
            "degenerate: prediction points coincide",
        ));
    }

    let svd = c.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::invalid("procrustes_align", "svd failed"))?;
    let v_t = svd.v_t.ok_or_else(|| Error::invalid("procrustes_align", "svd failed"))?;
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    let d = svd.singular_values;
    let scale = (d[0] * s[(0, 0)] + d[1] * s[(1, 1)] + d[2] * s[(2, 2)]) / var_p;

    let mut rotation = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            rotation[a][b] = r[(a, b)];
        }
    }
    let mut translation = [0.0; 3];
    for a in 0..3 {
        translation[a] = mu_g[a] - scale * (0..3).map(|b| rotation[a][b] * mu_p[b]).sum::<f64>();
    }
    let transform = SimilarityTransform {
        scale,
        rotation,
        translation,
    };
    Ok((transform.apply(pred), transform))
}

/// Mean Euclidean distance between matched points, in millimeters.
pub fn mean_point_error_mm(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.shape()[0];
    let mut total = 0.0;
    for i in 0..n {
        let d: f64 = (0..3)
            .map(|k| (a.at(&[i, k]) - b.at(&[i, k])).powi(2))
            .sum();
        total += d.sqrt();
    }
    MM_PER_M * total / n as f64
}

/// Procrustes-aligned mean per-point position error in millimeters. Used
/// for both joints (21 points) and vertices (778 points).
pub fn pa_mpjpe(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (aligned, _) = procrustes_align(pred, gt)?;
    Ok(mean_point_error_mm(&aligned, gt))
}

pub fn pa_mpvpe(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    pa_mpjpe(pred, gt)
}

/// F-score at threshold `tau_mm` between two (already aligned) point sets:
/// harmonic mean of precision and recall under nearest-neighbor distance.
pub fn f_score(pred: &Tensor, gt: &Tensor, tau_mm: f64) -> Result<f64> {
    if pred.ndim() != 2 || gt.ndim() != 2 || pred.shape()[1] != 3 || gt.shape()[1] != 3 {
        return Err(Error::ShapeMismatch {
            op: "f_score",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    let (np, ng) = (pred.shape()[0], gt.shape()[0]);
    if np == 0 || ng == 0 {
        return Err(Error::invalid("f_score", "empty point set"));
    }
    let tau_m = tau_mm / MM_PER_M;
    let nearest_within = |from: &Tensor, to: &Tensor| -> usize {
        let (nf, nt) = (from.shape()[0], to.shape()[0]);
        let mut hits = 0;
        for i in 0..nf {
            let mut best = f64::INFINITY;
            for j in 0..nt {
                let d: f64 = (0..3)
                    .map(|k| (from.at(&[i, k]) - to.at(&[j, k])).powi(2))
                    .sum();
                best = best.min(d);
            }
            if best.sqrt() <= tau_m {
                hits += 1;
            }
        }
        hits
    };
    let precision = nearest_within(pred, gt) as f64 / np as f64;
    let recall = nearest_within(gt, pred) as f64 / ng as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Tight 2-d box around a point set, rows/cols in pixels.
#[derive(Clone, Copy, Debug)]
pub struct Bbox {
    pub min_row: f64,
    pub min_col: f64,
    pub max_row: f64,
    pub max_col: f64,
}

impl Bbox {
    pub fn tight(points2d: &Tensor) -> Self {
        let n = points2d.shape()[0];
        let mut b = Bbox {
            min_row: f64::INFINITY,
            min_col: f64::INFINITY,
            max_row: f64::NEG_INFINITY,
            max_col: f64::NEG_INFINITY,
        };
        for i in 0..n {
            let (r, c) = (points2d.at(&[i, 0]), points2d.at(&[i, 1]));
            b.min_row = b.min_row.min(r);
            b.max_row = b.max_row.max(r);
            b.min_col = b.min_col.min(c);
            b.max_col = b.max_col.max(c);
        }
        b
    }

    pub fn max_side(&self) -> f64 {
        (self.max_row - self.min_row).max(self.max_col - self.min_col)
    }
}

/// Percentage of correct 2D keypoints: fraction with distance at most
/// `tau_frac` times the longest box side. An optional mask restricts the
/// count to a visibility subset.
pub fn pck(
    pred2d: &Tensor,
    gt2d: &Tensor,
    bbox: &Bbox,
    tau_frac: f64,
    mask: Option<&[bool]>,
) -> Result<f64> {
    if pred2d.shape() != gt2d.shape() || pred2d.ndim() != 2 || pred2d.shape()[1] != 2 {
        return Err(Error::ShapeMismatch {
            op: "pck",
            lhs: pred2d.shape().to_vec(),
            rhs: gt2d.shape().to_vec(),
        });
    }
    if !(tau_frac > 0.0) {
        return Err(Error::invalid("pck", "threshold fraction must be positive"));
    }
    let side = bbox.max_side();
    if side <= 0.0 {
        return Err(Error::invalid("pck", "zero-area bounding box"));
    }
    let n = pred2d.shape()[0];
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::invalid("pck", "mask length mismatch"));
        }
    }
    let limit = tau_frac * side;
    let mut hits = 0usize;
    let mut counted = 0usize;
    for i in 0..n {
        if let Some(m) = mask {
            if !m[i] {
                continue;
            }
        }
        counted += 1;
        let d = ((pred2d.at(&[i, 0]) - gt2d.at(&[i, 0])).powi(2)
            + (pred2d.at(&[i, 1]) - gt2d.at(&[i, 1])).powi(2))
        .sqrt();
        if d <= limit {
            hits += 1;
        }
    }
    if counted == 0 {
        return Err(Error::invalid("pck", "no keypoints selected"));
    }
    Ok(hits as f64 / counted as f64)
}

/// Area under the 3D-PCK curve over thresholds 0..`max_mm` in steps of
/// `step_mm` (trapezoidal, normalized by the range). Inputs must already be
/// aligned; errors are per matched point.
pub fn auc(pred: &Tensor, gt: &Tensor, max_mm: f64, step_mm: f64) -> Result<f64> {
    if pred.shape() != gt.shape() || pred.ndim() != 2 || pred.shape()[1] != 3 {
        return Err(Error::ShapeMismatch {
            op: "auc",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    let n = pred.shape()[0];
    let errors_mm: Vec<f64> = (0..n)
        .map(|i| {
            MM_PER_M
                * (0..3)
                    .map(|k| (pred.at(&[i, k]) - gt.at(&[i, k])).powi(2))
                    .sum::<f64>()
                    .sqrt()
        })
        .collect();
    Ok(auc_of_errors(&errors_mm, max_mm, step_mm))
}

/// AUC from precomputed per-point errors (mm).
pub fn auc_of_errors(errors_mm: &[f64], max_mm: f64, step_mm: f64) -> f64 {
    let steps = (max_mm / step_mm).round() as usize;
    let pck_at = |tau: f64| -> f64 {
        errors_mm.iter().filter(|&&e| e <= tau).count() as f64 / errors_mm.len() as f64
    };
    let mut area = 0.0;
    for i in 0..steps {
        let t0 = i as f64 * step_mm;
        let t1 = (i + 1) as f64 * step_mm;
        area += (pck_at(t0) + pck_at(t1)) / 2.0 * step_mm;
    }
    area / max_mm
}

// ── aggregate evaluation ─────────────────────────────────────────────

#[derive(Clone, Debug, Default)]
pub struct MetricsReport {
    pub pa_mpjpe_mm: f64,
    pub pa_mpvpe_mm: f64,
    pub f5: f64,
    pub f15: f64,
    pub auc_j: f64,
    pub auc_v: f64,
    /// (threshold fraction, pck)
    pub pck: Vec<(f64, f64)>,
    pub samples: usize,
}

impl MetricsReport {
    /// Structured text form, one `key=value` per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("samples={}\n", self.samples));
        out.push_str(&format!("pa_mpjpe_mm={:.6}\n", self.pa_mpjpe_mm));
        out.push_str(&format!("pa_mpvpe_mm={:.6}\n", self.pa_mpvpe_mm));
        out.push_str(&format!("f@5mm={:.6}\n", self.f5));
        out.push_str(&format!("f@15mm={:.6}\n", self.f15));
        out.push_str(&format!("auc_j={:.6}\n", self.auc_j));
        out.push_str(&format!("auc_v={:.6}\n", self.auc_v));
        for (frac, v) in &self.pck {
            out.push_str(&format!("pck@{frac}={v:.6}\n"));
        }
        out
    }
}

pub const PCK_FRACTIONS: [f64; 3] = [0.05, 0.1, 0.15];

/// Full metric suite over matched prediction/ground-truth pairs.
pub fn evaluate_pairs(pairs: &[(HandPrediction, HandPrediction)]) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("evaluate_pairs", "no samples"));
    }
    let mut report = MetricsReport {
        samples: pairs.len(),
        ..Default::default()
    };
    let mut joint_errors = Vec::new();
    let mut vertex_errors = Vec::new();
    let mut pck_hits = vec![0usize; PCK_FRACTIONS.len()];
    let mut pck_total = 0usize;

    for (pred, gt) in pairs {
        let (aj, _) = procrustes_align(&pred.joints3d, &gt.joints3d)?;
        report.pa_mpjpe_mm += mean_point_error_mm(&aj, &gt.joints3d) / pairs.len() as f64;
        for i in 0..aj.shape()[0] {
            let e = MM_PER_M
                * (0..3)
                    .map(|k| (aj.at(&[i, k]) - gt.joints3d.at(&[i, k])).powi(2))
                    .sum::<f64>()
                    .sqrt();
            joint_errors.push(e);
        }
        let (av, _) = procrustes_align(&pred.vertices, &gt.vertices)?;
        report.pa_mpvpe_mm += mean_point_error_mm(&av, &gt.vertices) / pairs.len() as f64;
        for i in 0..av.shape()[0] {
            let e = MM_PER_M
                * (0..3)
                    .map(|k| (av.at(&[i, k]) - gt.vertices.at(&[i, k])).powi(2))
                    .sum::<f64>()
                    .sqrt();
            vertex_errors.push(e);
        }
        report.f5 += f_score(&av, &gt.vertices, 5.0)? / pairs.len() as f64;
        report.f15 += f_score(&av, &gt.vertices, 15.0)? / pairs.len() as f64;

        let bbox = Bbox::tight(&gt.joints2d);
        let n = gt.joints2d.shape()[0];
        pck_total += n;
        for (k, frac) in PCK_FRACTIONS.iter().enumerate() {
            let v = pck(&pred.joints2d, &gt.joints2d, &bbox, *frac, None)?;
            pck_hits[k] += (v * n as f64).round() as usize;
        }
    }
    report.auc_j = auc_of_errors(&joint_errors, 50.0, 0.5);
    report.auc_v = auc_of_errors(&vertex_errors, 50.0, 0.5);
    report.pck = PCK_FRACTIONS
        .iter()
        .zip(&pck_hits)
        .map(|(f, h)| (*f, *h as f64 / pck_total as f64))
        .collect();
    Ok(report)
}

// ── test-time augmentation ───────────────────────────────────────────

/// -90 to 90 degrees every 10.
pub fn tta_rotations() -> Vec<f64> {
    (0..19).map(|i| -90.0 + 10.0 * i as f64).collect()
}

pub const TTA_SCALES: [f64; 5] = [0.7, 0.8, 0.9, 1.0, 1.1];

/// Rotation (degrees) about the optical axis composed with a zoom about the
/// principal point; bilinear resampling with border clamp.
pub fn augment_image(image: &Tensor, rot_deg: f64, scale: f64) -> Tensor {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let a = rot_deg.to_radians();
    let (cos, sin) = (a.cos(), a.sin());
    let mut out = Tensor::zeros(&[h, w, c]);
    for r in 0..h {
        for col in 0..w {
            let dr = r as f64 + 0.5 - PRINCIPAL[0];
            let dc = col as f64 + 0.5 - PRINCIPAL[1];
            // inverse map: rotate by -a, unscale
            let sr = (cos * dr + sin * dc) / scale + PRINCIPAL[0] - 0.5;
            let sc = (-sin * dr + cos * dc) / scale + PRINCIPAL[1] - 0.5;
            let sr = sr.clamp(0.0, (h - 1) as f64);
            let sc = sc.clamp(0.0, (w - 1) as f64);
            let (r0, c0) = (sr.floor() as usize, sc.floor() as usize);
            let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
            let (fr, fc) = (sr - r0 as f64, sc - c0 as f64);
            for ch in 0..c {
                let v = (1.0 - fr) * (1.0 - fc) * image.at(&[r0, c0, ch])
                    + (1.0 - fr) * fc * image.at(&[r0, c1, ch])
                    + fr * (1.0 - fc) * image.at(&[r1, c0, ch])
                    + fr * fc * image.at(&[r1, c1, ch]);
                out.set(&[r, col, ch], v);
            }
        }
    }
    out
}

fn rot_z(rad: f64) -> [[f64; 3]; 3] {
    let (c, s) = (rad.cos(), rad.sin());
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn rotate_points_z(points: &Tensor, rad: f64) -> Tensor {
    let r = rot_z(rad);
    let n = points.shape()[0];
    let mut out = Tensor::zeros(&[n, 3]);
    for i in 0..n {
        let p = [points.at(&[i, 0]), points.at(&[i, 1]), points.at(&[i, 2])];
        for a in 0..3 {
            out.set(&[i, a], (0..3).map(|b| r[a][b] * p[b]).sum());
        }
    }
    out
}

fn axis_angle_to_matrix(aa: &[f64]) -> [[f64; 3]; 3] {
    let r = nalgebra::Rotation3::from_scaled_axis(nalgebra::Vector3::new(aa[0], aa[1], aa[2]));
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = r[(i, j)];
        }
    }
    out
}

fn matrix_to_axis_angle(m: &[[f64; 3]; 3]) -> [f64; 3] {
    let r = nalgebra::Rotation3::from_matrix_unchecked(nalgebra::Matrix3::from_fn(|i, j| m[i][j]));
    let v = r.scaled_axis();
    [v[0], v[1], v[2]]
}

/// The forward action of an augmentation on a prediction: what an exactly
/// equivariant model would output for the augmented image.
pub fn transform_prediction(pred: &HandPrediction, rot_deg: f64, scale: f64) -> HandPrediction {
    let rad = rot_deg.to_radians();
    let rz = rot_z(rad);
    let mut theta = pred.params.theta.clone();
    let root = axis_angle_to_matrix(&theta.data()[..3]);
    let new_root = matrix_to_axis_angle(&mat3_mul(&rz, &root));
    theta.data_mut()[..3].copy_from_slice(&new_root);
    let cam = pred.params.cam.data();
    let new_cam = Tensor::new(
        vec![3],
        vec![
            rz[0][0] * cam[0] + rz[0][1] * cam[1],
            rz[1][0] * cam[0] + rz[1][1] * cam[1],
            cam[2] / scale,
        ],
    )
    .unwrap();
    let joints3d = rotate_points_z(&pred.joints3d, rad);
    let vertices = rotate_points_z(&pred.vertices, rad);
    let joints2d = project_tensor(&joints3d, &new_cam);
    HandPrediction {
        params: HandParams::new(theta, pred.params.beta.clone(), new_cam).unwrap(),
        joints3d,
        joints2d,
        vertices,
    }
}

fn project_tensor(points: &Tensor, cam: &Tensor) -> Tensor {
    let n = points.shape()[0];
    let mut out = Tensor::zeros(&[n, 2]);
    for i in 0..n {
        let x = points.at(&[i, 0]) + cam.data()[0];
        let y = points.at(&[i, 1]) + cam.data()[1];
        let z = points.at(&[i, 2]) + cam.data()[2];
        out.set(&[i, 0], FOCAL * x / z + PRINCIPAL[0]);
        out.set(&[i, 1], FOCAL * y / z + PRINCIPAL[1]);
    }
    out
}

/// Inverse of [`transform_prediction`]: maps an augmented-frame prediction
/// back to the canonical frame.
fn map_back(pred: &HandPrediction, rot_deg: f64, scale: f64) -> HandPrediction {
    transform_prediction(pred, -rot_deg, 1.0 / scale)
}

/// Test-time augmentation: runs the predictor on every rotation/scale
/// variant, maps each prediction back to the canonical frame, averages the
/// geometry arithmetically, and recomputes the 2D joints from the averaged
/// geometry and camera.
pub fn tta_predict<F>(predict: F, image: &Tensor) -> Result<HandPrediction>
where
    F: Fn(&Tensor) -> Result<HandPrediction>,
{
    let rotations = tta_rotations();
    let mut acc: Option<HandPrediction> = None;
    let mut count = 0.0;
    for &rot in &rotations {
        for &scale in &TTA_SCALES {
            let aug = augment_image(image, rot, scale);
            let pred = predict(&aug)?;
            let back = map_back(&pred, rot, scale);
            count += 1.0;
            acc = Some(match acc {
                None => back,
                Some(mut a) => {
                    add_into(&mut a.joints3d, &back.joints3d);
                    add_into(&mut a.vertices, &back.vertices);
                    add_into(&mut a.params.theta, &back.params.theta);
                    add_into(&mut a.params.beta, &back.params.beta);
                    add_into(&mut a.params.cam, &back.params.cam);
                    a
                }
            });
        }
    }
    let mut avg = acc.expect("non-empty grid");
    for t in [
        &mut avg.joints3d,
        &mut avg.vertices,
        &mut avg.params.theta,
        &mut avg.params.beta,
        &mut avg.params.cam,
    ] {
        for v in t.data_mut() {
            *v /= count;
        }
    }
    avg.joints2d = project_tensor(&avg.joints3d, &avg.params.cam);
    Ok(avg)
}

/// Number of augmentation variants the TTA protocol runs.
pub fn tta_variant_count() -> usize {
    tta_rotations().len() * TTA_SCALES.len()
}
