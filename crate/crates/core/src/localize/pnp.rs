//! P3P minimal solver, RANSAC and Levenberg-Marquardt pose refinement.

use nalgebra::{Matrix3, Matrix6, Rotation3, Vector3, Vector6};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::LocalizeError;
use crate::geometry::{CameraIntrinsics, Keypoint, Pose, SceneCoordinate};
use crate::numeric::RngStream;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence2D3D {
    pub keypoint: Keypoint,
    pub coordinate: SceneCoordinate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacConfig {
    pub max_iterations: usize,
    /// Pixels.
    pub inlier_threshold: f64,
    pub min_inliers: usize,
    pub refinement_iterations: usize,
    /// Early-exit confidence for the adaptive iteration bound.
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            inlier_threshold: 10.0,
            min_inliers: 8,
            refinement_iterations: 10,
            confidence: 0.999,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), LocalizeError> {
        if self.max_iterations == 0 || self.min_inliers == 0 || !(self.inlier_threshold > 0.0) {
            return Err(LocalizeError::InvalidConfig(
                "iterations, threshold and min inliers must be positive".into(),
            ));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(LocalizeError::InvalidConfig("confidence must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Output of a single PnP solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PnpSolution {
    pub pose: Pose,
    pub inlier_count: usize,
    pub mean_inlier_residual: f64,
}

/// World-to-camera rigid transform `x_cam = r * x_world + t`.
#[derive(Debug, Clone, Copy)]
struct Extrinsics {
    r: Matrix3<f64>,
    t: Vector3<f64>,
}

impl Extrinsics {
    fn residual(&self, c: &Correspondence2D3D, k: &CameraIntrinsics) -> Option<f64> {
        let p = self.r * c.coordinate.coords + self.t;
        if p.z <= crate::geometry::MIN_PROJECTION_DEPTH {
            return None;
        }
        let u = k.fx * p.x / p.z + k.cx;
        let v = k.fy * p.y / p.z + k.cy;
        Some(((u - c.keypoint.u).powi(2) + (v - c.keypoint.v).powi(2)).sqrt())
    }

    /// Canonical so that a results file reproduces the pose exactly.
    fn pose(&self) -> Pose {
        Pose::from_world_to_camera(&self.r, &self.t).canonical()
    }
}

fn bearing(kp: Keypoint, k: &CameraIntrinsics) -> Vector3<f64> {
    k.ray(kp).normalize()
}

/// Real roots of `c[0] x^n + ... + c[n]`, leading coefficients that vanish
/// relative to the largest one are dropped.
fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let scale = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let c: Vec<f64> = coeffs.iter().map(|v| v / scale).collect();
    let lead = c.iter().position(|v| v.abs() > 1e-12).unwrap_or(c.len());
    let c = &c[lead..];
    let deg = c.len().saturating_sub(1);
    let mut roots = match deg {
        0 => return Vec::new(),
        1 => vec![-c[1] / c[0]],
        _ => {
            let mut comp = nalgebra::DMatrix::zeros(deg, deg);
            for j in 0..deg {
                comp[(0, j)] = -c[j + 1] / c[0];
            }
            for i in 1..deg {
                comp[(i, i - 1)] = 1.0;
            }
            comp.complex_eigenvalues()
                .iter()
                .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
                .map(|z| z.re)
                .collect::<Vec<_>>()
        }
    };
    for r in roots.iter_mut() {
        for _ in 0..3 {
            let (mut f, mut df) = (0.0, 0.0);
            for &a in c {
                df = df * *r + f;
                f = f * *r + a;
            }
            if df.abs() < 1e-300 {
                break;
            }
            *r -= f / df;
        }
    }
    roots
}

/// Rigid transform mapping `world` onto `cam` in the least-squares sense.
fn kabsch(world: &[Vector3<f64>], cam: &[Vector3<f64>]) -> Option<Extrinsics> {
    let n = world.len() as f64;
    let wc = world.iter().sum::<Vector3<f64>>() / n;
    let cc = cam.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (w, c) in world.iter().zip(cam) {
        h += (w - wc) * (c - cc).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u?;
    let v = svd.v_t?.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    Some(Extrinsics { r, t: cc - r * wc })
}

/// All poses consistent with three correspondences (up to four).
fn p3p(corr: &[Correspondence2D3D; 3], k: &CameraIntrinsics) -> Vec<Extrinsics> {
    let [p1, p2, p3] = corr.map(|c| c.coordinate.coords);
    let [j1, j2, j3] = corr.map(|c| bearing(c.keypoint, k));
    let a2 = (p2 - p3).norm_squared();
    let b2 = (p1 - p3).norm_squared();
    let c2 = (p1 - p2).norm_squared();
    if a2 < 1e-12 || b2 < 1e-12 || c2 < 1e-12 {
        return Vec::new();
    }
    let ca = j2.dot(&j3);
    let cb = j1.dot(&j3);
    let cg = j1.dot(&j2);

    let amc = (a2 - c2) / b2;
    let apc = (a2 + c2) / b2;
    let bmc = (b2 - c2) / b2;
    let bma = (b2 - a2) / b2;
    let a4 = (amc - 1.0).powi(2) - 4.0 * c2 / b2 * ca * ca;
    let a3 = 4.0 * (amc * (1.0 - amc) * cb - (1.0 - apc) * ca * cg + 2.0 * c2 / b2 * ca * ca * cb);
    let a2c = 2.0
        * (amc * amc - 1.0 + 2.0 * amc * amc * cb * cb + 2.0 * bmc * ca * ca - 4.0 * apc * ca * cb * cg
            + 2.0 * bma * cg * cg);
    let a1 = 4.0 * (-amc * (1.0 + amc) * cb + 2.0 * a2 / b2 * cg * cg * cb - (1.0 - apc) * ca * cg);
    let a0 = (1.0 + amc).powi(2) - 4.0 * a2 / b2 * cg * cg;

    let world = [p1, p2, p3];
    let mut out = Vec::new();
    for v in real_roots(&[a4, a3, a2c, a1, a0]) {
        let denom = 2.0 * (cg - v * ca);
        if denom.abs() < 1e-12 {
            continue;
        }
        let u = ((amc - 1.0) * v * v - 2.0 * amc * cb * v + 1.0 + amc) / denom;
        let q = 1.0 + v * v - 2.0 * v * cb;
        if !(q > 0.0) {
            continue;
        }
        let s1 = (b2 / q).sqrt();
        let (s2, s3) = (u * s1, v * s1);
        if !(s1 > 0.0 && s2 > 0.0 && s3 > 0.0) {
            continue;
        }
        let cam = [j1 * s1, j2 * s2, j3 * s3];
        if let Some(e) = kabsch(&world, &cam) {
            if e.r.iter().chain(e.t.iter()).all(|x| x.is_finite()) {
                out.push(e);
            }
        }
    }
    out
}

fn score(e: &Extrinsics, corr: &[Correspondence2D3D], k: &CameraIntrinsics, thr: f64) -> (usize, f64) {
    let mut count = 0;
    let mut sum = 0.0;
    for c in corr {
        if let Some(r) = e.residual(c, k) {
            if r <= thr {
                count += 1;
                sum += r;
            }
        }
    }
    (count, if count > 0 { sum / count as f64 } else { f64::INFINITY })
}

fn better(a: (usize, f64), b: (usize, f64)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Sum of squared reprojection errors; points behind the camera are
/// penalised with a large constant so the optimiser moves away from them.
fn cost(e: &Extrinsics, corr: &[&Correspondence2D3D], k: &CameraIntrinsics) -> f64 {
    corr.iter().map(|c| e.residual(c, k).map_or(1e12, |r| r * r)).sum()
}

/// Levenberg-Marquardt on the reprojection error with the left-multiplied
/// update `r <- exp(w) r`, `t <- exp(w) t + dt`.
fn refine(init: Extrinsics, corr: &[&Correspondence2D3D], k: &CameraIntrinsics, iterations: usize) -> Extrinsics {
    let mut e = init;
    let mut current = cost(&e, corr, k);
    let mut lambda = 1e-3;
    for _ in 0..iterations {
        let mut jtj = Matrix6::zeros();
        let mut jtr = Vector6::zeros();
        for c in corr {
            let p = e.r * c.coordinate.coords + e.t;
            if p.z <= crate::geometry::MIN_PROJECTION_DEPTH {
                continue;
            }
            let iz = 1.0 / p.z;
            let ru = k.fx * p.x * iz + k.cx - c.keypoint.u;
            let rv = k.fy * p.y * iz + k.cy - c.keypoint.v;
            let du = Vector3::new(k.fx * iz, 0.0, -k.fx * p.x * iz * iz);
            let dv = Vector3::new(0.0, k.fy * iz, -k.fy * p.y * iz * iz);
            // d p / d w = -[p]x, d p / d t = I
            let skew = p.cross_matrix();
            let ju = Vector6::from_iterator((-skew.transpose() * du).iter().copied().chain(du.iter().copied()));
            let jv = Vector6::from_iterator((-skew.transpose() * dv).iter().copied().chain(dv.iter().copied()));
            jtj += ju * ju.transpose() + jv * jv.transpose();
            jtr += ju * ru + jv * rv;
        }
        let mut improved = false;
        for _ in 0..10 {
            let mut damped = jtj;
            for i in 0..6 {
                damped[(i, i)] += lambda * jtj[(i, i)].max(1e-9);
            }
            let Some(delta) = damped.cholesky().map(|ch| ch.solve(&(-jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let rot = Rotation3::new(delta.fixed_rows::<3>(0).into_owned()).into_inner();
            let cand = Extrinsics {
                r: rot * e.r,
                t: rot * e.t + delta.fixed_rows::<3>(3),
            };
            let c = cost(&cand, corr, k);
            if c < current {
                let step = delta.norm();
                e = cand;
                current = c;
                lambda = (lambda * 0.1).max(1e-12);
                improved = true;
                if step < 1e-12 {
                    return e;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    e
}

fn required_iterations(inlier_ratio: f64, confidence: f64, cap: usize) -> usize {
    let w4 = inlier_ratio.powi(4);
    if w4 >= 1.0 {
        return 1;
    }
    if w4 <= 0.0 {
        return cap;
    }
    let k = (1.0 - confidence).ln() / (1.0 - w4).ln();
    if k.is_finite() {
        (k.ceil() as usize).clamp(1, cap)
    } else {
        cap
    }
}

/// Robust pose from 2D-3D correspondences.
///
/// Minimal samples of four: P3P on the first three, the fourth picks among
/// the candidate solutions. The best hypothesis is refined on its inliers;
/// the reported inlier count is recomputed from the returned pose.
pub fn solve_pnp_ransac(
    corr: &[Correspondence2D3D],
    k: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<PnpSolution, LocalizeError> {
    cfg.validate()?;
    if corr.len() < 4 {
        return Err(LocalizeError::TooFewCorrespondences(corr.len()));
    }
    if corr
        .iter()
        .any(|c| !(c.keypoint.u.is_finite() && c.keypoint.v.is_finite()) || c.coordinate.iter().any(|v| !v.is_finite()))
    {
        return Err(LocalizeError::NonFiniteInput);
    }
    let mut rng = RngStream::new(cfg.seed, "ransac");
    let thr = cfg.inlier_threshold;
    let mut best: Option<(Extrinsics, (usize, f64))> = None;
    let mut limit = cfg.max_iterations;
    let mut it = 0;
    while it < limit {
        it += 1;
        let idx = sample(&mut rng, corr.len(), 4).into_vec();
        let minimal = [corr[idx[0]], corr[idx[1]], corr[idx[2]]];
        let fourth = &corr[idx[3]];
        let chosen = p3p(&minimal, k)
            .into_iter()
            .filter_map(|e| e.residual(fourth, k).map(|r| (e, r)))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        let Some((e, r4)) = chosen else { continue };
        if r4 > thr {
            continue;
        }
        let s = score(&e, corr, k, thr);
        if best.as_ref().is_none_or(|(_, b)| better(s, *b)) {
            best = Some((e, s));
            limit = limit.min(required_iterations(
                s.0 as f64 / corr.len() as f64,
                cfg.confidence,
                cfg.max_iterations,
            ));
        }
    }
    let Some((mut e, mut s)) = best else {
        return Err(LocalizeError::NoPose);
    };
    if s.0 < cfg.min_inliers {
        return Err(LocalizeError::NoPose);
    }
    // Refine on the inlier set and re-collect inliers while the set grows.
    for _ in 0..3 {
        let inliers: Vec<&Correspondence2D3D> = corr
            .iter()
            .filter(|c| e.residual(c, k).is_some_and(|r| r <= thr))
            .collect();
        let cand = refine(e, &inliers, k, cfg.refinement_iterations);
        let cs = score(&cand, corr, k, thr);
        if cs.0 < s.0 {
            break;
        }
        let grew = cs.0 > s.0;
        e = cand;
        s = cs;
        if !grew {
            break;
        }
    }
    let pose = e.pose();
    // Recount against the returned pose so the statistics are reproducible from it.
    let ext = Extrinsics {
        r: pose.rotation().transpose(),
        t: -(pose.rotation().transpose() * pose.translation()),
    };
    let (count, mean) = score(&ext, corr, k, thr);
    if count < cfg.min_inliers {
        return Err(LocalizeError::NoPose);
    }
    Ok(PnpSolution {
        pose,
        inlier_count: count,
        mean_inlier_residual: mean,
    })
}
