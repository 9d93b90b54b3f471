//! Robust camera pose from 2D-3D correspondences: P3P hypotheses with a
//! fourth-point check, soft-inlier scoring and Levenberg-Marquardt refinement.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Matrix6, Vector2, Vector3, Vector6};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    orthonormalize, pixel_ray, project, CameraIntrinsics, Projection, RigidPose, SceneCoordinate,
};

/// Residual assigned to points behind the camera.
pub const BEHIND_CAMERA_ERROR: f64 = 1e6;

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error("{pixels} pixels but {coords} scene coordinates")]
    LengthMismatch { pixels: usize, coords: usize },
    #[error("need at least 4 correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error("pixel ({0:.2}, {1:.2}) lies outside the image")]
    PixelOutOfBounds(f64, f64),
    #[error("degenerate minimal sample: {0}")]
    Degenerate(&'static str),
    #[error("no valid hypothesis after {attempts} minimal-solver attempts")]
    NoHypothesis { attempts: usize },
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
}

/// Parallel arrays of image points and the scene coordinates they observe.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrespondenceSet {
    pub pixels: Vec<Vector2<f64>>,
    pub coords: Vec<SceneCoordinate>,
}

impl CorrespondenceSet {
    pub fn new(pixels: Vec<Vector2<f64>>, coords: Vec<SceneCoordinate>) -> Result<Self, SolverError> {
        if pixels.len() != coords.len() {
            return Err(SolverError::LengthMismatch { pixels: pixels.len(), coords: coords.len() });
        }
        Ok(Self { pixels, coords })
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn validate(&self, k: &CameraIntrinsics) -> Result<(), SolverError> {
        if self.pixels.len() != self.coords.len() {
            return Err(SolverError::LengthMismatch { pixels: self.pixels.len(), coords: self.coords.len() });
        }
        if self.len() < 4 {
            return Err(SolverError::TooFewCorrespondences(self.len()));
        }
        if let Some(p) = self.pixels.iter().find(|p| !k.contains(p)) {
            return Err(SolverError::PixelOutOfBounds(p.x, p.y));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub hypotheses: usize,
    /// Inlier threshold in pixels.
    pub inlier_threshold: f64,
    /// Sigmoid slope of the soft inlier count, per pixel.
    pub softness: f64,
    pub max_refine_iterations: usize,
    /// Refinement stops once the update norm falls below this.
    pub refine_convergence: f64,
    pub seed: u64,
    /// Minimal-solver attempts per hypothesis before it is dropped.
    pub max_retries: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            hypotheses: 256,
            inlier_threshold: 10.0,
            softness: 0.5,
            max_refine_iterations: 100,
            refine_convergence: 1e-6,
            seed: 0,
            max_retries: 16,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if self.hypotheses == 0 || self.max_retries == 0 {
            return Err(SolverError::InvalidConfig("hypotheses and max_retries must be >= 1".into()));
        }
        if !(self.inlier_threshold > 0.0 && self.softness > 0.0) {
            return Err(SolverError::InvalidConfig(format!(
                "threshold {} and softness {} must be positive",
                self.inlier_threshold, self.softness
            )));
        }
        Ok(())
    }
}

/// Pixel distance between the observed pixel and the projection of `coord`.
pub fn reprojection_error(pixel: &Vector2<f64>, coord: &SceneCoordinate, pose: &RigidPose, k: &CameraIntrinsics) -> f64 {
    match project(coord, pose, k) {
        Projection::Visible(p) => (p - pixel).norm(),
        Projection::BehindCamera => BEHIND_CAMERA_ERROR,
    }
}

pub fn residuals(corrs: &CorrespondenceSet, pose: &RigidPose, k: &CameraIntrinsics) -> Vec<f64> {
    corrs.pixels.iter().zip(&corrs.coords).map(|(p, y)| reprojection_error(p, y, pose, k)).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Sum over correspondences of `sigmoid(softness * (threshold - r))`.
pub fn soft_inlier_count(corrs: &CorrespondenceSet, pose: &RigidPose, k: &CameraIntrinsics, cfg: &RansacConfig) -> f64 {
    corrs
        .pixels
        .iter()
        .zip(&corrs.coords)
        .map(|(p, y)| sigmoid(cfg.softness * (cfg.inlier_threshold - reprojection_error(p, y, pose, k))))
        .sum()
}

/// Real roots of `c[0] x^n + ... + c[n]`, Newton-polished.
fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let scale = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if !(scale > 0.0 && scale.is_finite()) {
        return Vec::new();
    }
    let lead = coeffs.iter().position(|c| c.abs() > 1e-14 * scale).unwrap_or(coeffs.len());
    let c = &coeffs[lead..];
    let n = c.len().saturating_sub(1);
    if n == 0 {
        return Vec::new();
    }
    let mut companion = DMatrix::zeros(n, n);
    for j in 0..n {
        companion[(0, j)] = -c[j + 1] / c[0];
    }
    for i in 1..n {
        companion[(i, i - 1)] = 1.0;
    }
    let eval = |x: f64| c.iter().fold((0.0, 0.0), |(p, d), &a| (p * x + a, d * x + p));
    companion
        .complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
        .map(|z| {
            let mut x = z.re;
            for _ in 0..8 {
                let (p, d) = eval(x);
                if d == 0.0 {
                    break;
                }
                let step = p / d;
                x -= step;
                if step.abs() <= 1e-15 * (1.0 + x.abs()) {
                    break;
                }
            }
            x
        })
        .collect()
}

/// Rigid transform mapping `from[i]` onto `to[i]` in the least-squares sense.
fn kabsch(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> Option<RigidPose> {
    let n = from.len() as f64;
    let cf = from.iter().sum::<Vector3<f64>>() / n;
    let ct = to.iter().sum::<Vector3<f64>>() / n;
    let h: Matrix3<f64> = from.iter().zip(to).map(|(f, t)| (f - cf) * (t - ct).transpose()).sum();
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let d = (v_t.transpose() * u.transpose()).determinant().signum();
    let r = v_t.transpose() * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    Some(RigidPose { rotation: r, translation: ct - r * cf })
}

/// All P3P solutions for three correspondences, as camera-to-world poses.
pub fn p3p(pixels: &[Vector2<f64>; 3], coords: &[SceneCoordinate; 3], k: &CameraIntrinsics) -> Result<Vec<RigidPose>, SolverError> {
    let [p1, p2, p3] = coords;
    let a2 = (p2 - p3).norm_squared();
    let b2 = (p1 - p3).norm_squared();
    let c2 = (p1 - p2).norm_squared();
    let longest = a2.max(b2).max(c2);
    if !(longest > 0.0) || a2.min(b2).min(c2) <= 1e-12 * longest {
        return Err(SolverError::Degenerate("coincident scene points"));
    }
    if (p2 - p1).cross(&(p3 - p1)).norm() <= 1e-9 * longest {
        return Err(SolverError::Degenerate("collinear scene points"));
    }
    let j: Vec<Vector3<f64>> = pixels.iter().map(|p| pixel_ray(p, k)).collect();
    let cos_a = j[1].dot(&j[2]);
    let cos_b = j[0].dot(&j[2]);
    let cos_g = j[0].dot(&j[1]);
    if j[0].cross(&j[1]).dot(&j[2]).abs() <= 1e-12 || [cos_a, cos_b, cos_g].iter().any(|c| *c > 1.0 - 1e-12) {
        return Err(SolverError::Degenerate("coplanar or parallel bearings"));
    }

    // Grunert's system with s2 = u s1, s3 = v s1, reduced to a quartic in v.
    let q = (a2 - c2) / b2;
    let p = (a2 + c2) / b2;
    let (ca2, cb2, cg2) = (cos_a * cos_a, cos_b * cos_b, cos_g * cos_g);
    let a4 = (q - 1.0).powi(2) - 4.0 * c2 / b2 * ca2;
    let a3 = 4.0 * (q * (1.0 - q) * cos_b - (1.0 - p) * cos_a * cos_g + 2.0 * c2 / b2 * ca2 * cos_b);
    let a2c = 2.0
        * (q * q - 1.0 + 2.0 * q * q * cb2 + 2.0 * (b2 - c2) / b2 * ca2 - 4.0 * p * cos_a * cos_b * cos_g
            + 2.0 * (b2 - a2) / b2 * cg2);
    let a1 = 4.0 * (-q * (1.0 + q) * cos_b + 2.0 * a2 / b2 * cg2 * cos_b - (1.0 - p) * cos_a * cos_g);
    let a0 = (1.0 + q).powi(2) - 4.0 * a2 / b2 * cg2;

    let mut poses = Vec::new();
    for v in real_roots(&[a4, a3, a2c, a1, a0]) {
        if !(v > 0.0) {
            continue;
        }
        let denom = 1.0 + v * v - 2.0 * v * cos_b;
        if !(denom > 0.0) {
            continue;
        }
        let s1 = (b2 / denom).sqrt();
        let s3 = v * s1;
        // s2 from the c-equation; keep the root that best satisfies the a-equation.
        let disc = s1 * s1 * cos_g * cos_g - s1 * s1 + c2;
        if disc < -1e-9 * c2 {
            continue;
        }
        let root = disc.max(0.0).sqrt();
        let a_residual = |s2: f64| (s2 * s2 + s3 * s3 - 2.0 * s2 * s3 * cos_a - a2).abs();
        let s2 = [s1 * cos_g + root, s1 * cos_g - root]
            .into_iter()
            .filter(|s| *s > 0.0)
            .min_by(|x, y| a_residual(*x).total_cmp(&a_residual(*y)));
        let Some(s2) = s2 else { continue };
        let mut s = Vector3::new(s1, s2, s3);
        polish_depths(&mut s, [a2, b2, c2], [cos_a, cos_b, cos_g]);
        if s.iter().any(|x| !(*x > 0.0)) || a_residual(s[1]).max(0.0) > 1e-3 * a2 + 1e-9 {
            continue;
        }
        let cam: Vec<Vector3<f64>> = (0..3).map(|i| j[i] * s[i]).collect();
        if let Some(pose) = kabsch(&cam, coords) {
            poses.push(pose);
        }
    }
    Ok(poses)
}

/// Gauss-Newton on the three law-of-cosines equations.
fn polish_depths(s: &mut Vector3<f64>, [a2, b2, c2]: [f64; 3], [ca, cb, cg]: [f64; 3]) {
    for _ in 0..5 {
        let f = Vector3::new(
            s[1] * s[1] + s[2] * s[2] - 2.0 * s[1] * s[2] * ca - a2,
            s[0] * s[0] + s[2] * s[2] - 2.0 * s[0] * s[2] * cb - b2,
            s[0] * s[0] + s[1] * s[1] - 2.0 * s[0] * s[1] * cg - c2,
        );
        let jac = Matrix3::new(
            0.0,
            2.0 * (s[1] - s[2] * ca),
            2.0 * (s[2] - s[1] * ca),
            2.0 * (s[0] - s[2] * cb),
            0.0,
            2.0 * (s[2] - s[0] * cb),
            2.0 * (s[0] - s[1] * cg),
            2.0 * (s[1] - s[0] * cg),
            0.0,
        );
        let Some(step) = jac.lu().solve(&f) else { return };
        let next = *s - step;
        if !next.iter().all(|x| x.is_finite()) {
            return;
        }
        *s = next;
        if step.norm() <= 1e-15 * s.norm() {
            return;
        }
    }
}

/// P3P on the first three correspondences, disambiguated by the fourth.
pub fn solve_minimal(pixels: &[Vector2<f64>; 4], coords: &[SceneCoordinate; 4], k: &CameraIntrinsics) -> Result<RigidPose, SolverError> {
    for i in 0..4 {
        for j in i + 1..4 {
            if pixels[i] == pixels[j] {
                return Err(SolverError::Degenerate("duplicated pixel"));
            }
        }
    }
    let candidates = p3p(&[pixels[0], pixels[1], pixels[2]], &[coords[0], coords[1], coords[2]], k)?;
    candidates
        .into_iter()
        .map(|pose| (reprojection_error(&pixels[3], &coords[3], &pose, k), pose))
        .filter(|(e, _)| e.is_finite())
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, pose)| pose)
        .ok_or(SolverError::Degenerate("no real solution"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: RigidPose,
    /// Soft inlier count of the refined pose.
    pub score: f64,
    /// Soft inlier count of the selected hypothesis before refinement.
    pub hypothesis_score: f64,
    /// Hard inliers (residual below threshold) of the refined pose.
    pub inliers: Vec<bool>,
    /// Refinement iterations performed.
    pub iterations: usize,
    /// Hypotheses that produced a pose.
    pub valid_hypotheses: usize,
    /// Minimal-solver calls across all hypotheses.
    pub attempts: usize,
}

impl PoseEstimate {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

/// Random stream for hypothesis `index`; independent of evaluation order.
fn hypothesis_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Draws a pose for one hypothesis slot, retrying failed minimal samples.
fn draw_hypothesis(corrs: &CorrespondenceSet, k: &CameraIntrinsics, cfg: &RansacConfig, index: usize) -> (Option<RigidPose>, usize) {
    let mut rng = hypothesis_rng(cfg.seed, index);
    for attempt in 1..=cfg.max_retries {
        let idx = sample(&mut rng, corrs.len(), 4);
        let px = [0, 1, 2, 3].map(|i| corrs.pixels[idx.index(i)]);
        let ys = [0, 1, 2, 3].map(|i| corrs.coords[idx.index(i)]);
        if let Ok(pose) = solve_minimal(&px, &ys, k) {
            return (Some(pose), attempt);
        }
    }
    (None, cfg.max_retries)
}

/// Hypothesize, score, select and refine.
pub fn estimate_pose(corrs: &CorrespondenceSet, k: &CameraIntrinsics, cfg: &RansacConfig) -> Result<PoseEstimate, SolverError> {
    cfg.validate()?;
    corrs.validate(k)?;
    let scored: Vec<(Option<(RigidPose, f64)>, usize)> = (0..cfg.hypotheses)
        .into_par_iter()
        .map(|h| {
            let (pose, attempts) = draw_hypothesis(corrs, k, cfg, h);
            (pose.map(|p| (p, soft_inlier_count(corrs, &p, k, cfg))), attempts)
        })
        .collect();
    let attempts = scored.iter().map(|s| s.1).sum();
    let valid: Vec<(RigidPose, f64)> = scored.into_iter().filter_map(|s| s.0).collect();
    // First maximum wins ties, so the choice does not depend on scheduling.
    let best = valid.iter().fold(None::<&(RigidPose, f64)>, |best, cand| match best {
        Some(b) if b.1 >= cand.1 => Some(b),
        _ => Some(cand),
    });
    let Some(&(hypothesis, hypothesis_score)) = best else {
        return Err(SolverError::NoHypothesis { attempts });
    };
    let (pose, iterations) = refine_pose(corrs, &hypothesis, k, cfg);
    let res = residuals(corrs, &pose, k);
    Ok(PoseEstimate {
        pose,
        score: soft_inlier_count(corrs, &pose, k, cfg),
        hypothesis_score,
        inliers: res.iter().map(|&r| r < cfg.inlier_threshold).collect(),
        iterations,
        valid_hypotheses: valid.len(),
        attempts,
    })
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// World-to-camera transform with a left-multiplied axis-angle update.
#[derive(Clone, Copy)]
struct WorldToCamera {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl WorldToCamera {
    fn from_pose(pose: &RigidPose) -> Self {
        let inv = pose.inverse();
        Self { rotation: inv.rotation, translation: inv.translation }
    }

    fn to_pose(self) -> RigidPose {
        RigidPose { rotation: orthonormalize(&self.rotation), translation: self.translation }.inverse()
    }

    fn updated(&self, delta: &Vector6<f64>) -> Self {
        let omega = Vector3::new(delta[0], delta[1], delta[2]);
        let r = *nalgebra::Rotation3::new(omega).matrix();
        Self {
            rotation: r * self.rotation,
            translation: r * self.translation + Vector3::new(delta[3], delta[4], delta[5]),
        }
    }

    fn residual(&self, pixel: &Vector2<f64>, y: &Vector3<f64>, k: &CameraIntrinsics) -> Option<Vector2<f64>> {
        let x = self.rotation * y + self.translation;
        (x.z > crate::geometry::MIN_DEPTH)
            .then(|| Vector2::new(k.fx * x.x / x.z + k.cx - pixel.x, k.fy * x.y / x.z + k.cy - pixel.y))
    }
}

fn hard_inliers(corrs: &CorrespondenceSet, w2c: &WorldToCamera, k: &CameraIntrinsics, tau: f64) -> Vec<bool> {
    corrs
        .pixels
        .iter()
        .zip(&corrs.coords)
        .map(|(p, y)| w2c.residual(p, y, k).is_some_and(|r| r.norm() < tau))
        .collect()
}

fn sum_squares(corrs: &CorrespondenceSet, mask: &[bool], w2c: &WorldToCamera, k: &CameraIntrinsics) -> f64 {
    (0..corrs.len())
        .filter(|&i| mask[i])
        .map(|i| w2c.residual(&corrs.pixels[i], &corrs.coords[i], k).map_or(f64::INFINITY, |r| r.norm_squared()))
        .sum()
}

/// Levenberg-Marquardt on the hard inliers of the current pose. A step is
/// accepted only if it lowers the squared error on the current inlier set
/// without losing inliers. Returns the pose and the iterations used.
pub fn refine_pose(corrs: &CorrespondenceSet, initial: &RigidPose, k: &CameraIntrinsics, cfg: &RansacConfig) -> (RigidPose, usize) {
    let mut w2c = WorldToCamera::from_pose(initial);
    let mut mask = hard_inliers(corrs, &w2c, k, cfg.inlier_threshold);
    let mut lambda = 1e-3;
    let mut iterations = 0;
    while iterations < cfg.max_refine_iterations {
        let count = mask.iter().filter(|&&b| b).count();
        if count < 3 {
            break;
        }
        iterations += 1;
        let mut jtj = Matrix6::zeros();
        let mut jtr = Vector6::zeros();
        for i in (0..corrs.len()).filter(|&i| mask[i]) {
            let x = w2c.rotation * corrs.coords[i] + w2c.translation;
            let Some(r) = w2c.residual(&corrs.pixels[i], &corrs.coords[i], k) else { continue };
            let iz = 1.0 / x.z;
            let dproj = nalgebra::Matrix2x3::new(
                k.fx * iz,
                0.0,
                -k.fx * x.x * iz * iz,
                0.0,
                k.fy * iz,
                -k.fy * x.y * iz * iz,
            );
            let mut dx = nalgebra::Matrix3x6::zeros();
            dx.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&x)));
            dx.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
            let jac = dproj * dx;
            jtj += jac.transpose() * jac;
            jtr += jac.transpose() * r;
        }
        let base = sum_squares(corrs, &mask, &w2c, k);
        let mut damped = jtj;
        for d in 0..6 {
            damped[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
        }
        let Some(delta) = damped.cholesky().map(|c| -c.solve(&jtr)) else {
            lambda *= 10.0;
            continue;
        };
        let cand = w2c.updated(&delta);
        let cand_err = sum_squares(corrs, &mask, &cand, k);
        let cand_mask = hard_inliers(corrs, &cand, k, cfg.inlier_threshold);
        let cand_count = cand_mask.iter().filter(|&&b| b).count();
        if cand_err <= base && cand_count >= count {
            w2c = cand;
            lambda = (lambda / 10.0).max(1e-12);
            let fixed = cand_mask == mask;
            mask = cand_mask;
            if fixed && delta.norm() < cfg.refine_convergence {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 || delta.norm() < cfg.refine_convergence {
                break;
            }
        }
    }
    (w2c.to_pose(), iterations)
}

/// Writes `u,v,x,y,z,residual,inlier` rows for every correspondence.
pub fn write_correspondence_dump(
    out: impl Write,
    corrs: &CorrespondenceSet,
    pose: &RigidPose,
    k: &CameraIntrinsics,
    threshold: f64,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["u", "v", "x", "y", "z", "residual", "inlier"])?;
    for (p, y) in corrs.pixels.iter().zip(&corrs.coords) {
        let r = reprojection_error(p, y, pose, k);
        w.serialize((p.x, p.y, y.x, y.y, y.z, r, u8::from(r < threshold)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_correspondence_dump(
    path: impl AsRef<Path>,
    corrs: &CorrespondenceSet,
    pose: &RigidPose,
    k: &CameraIntrinsics,
    threshold: f64,
) -> Result<(), csv::Error> {
    write_correspondence_dump(std::fs::File::create(path)?, corrs, pose, k, threshold)
}
