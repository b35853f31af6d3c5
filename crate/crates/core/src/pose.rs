//! Two-view pose refinement by model selection: an essential-matrix pose and
//! a rotation-only pose are estimated from masked flow correspondences with
//! RANSAC, the branch with more inliers wins, and the external translation
//! scale is preserved on the essential branch.

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::Intrinsics;

#[derive(Debug, Error)]
pub enum PoseError {
    #[error("need at least {need} correspondences, got {got}")]
    InsufficientCorrespondences { got: usize, need: usize },
    #[error("no hypothesis reached the inlier floor")]
    NoConsensus,
}

/// Pixel correspondences between two frames sharing one intrinsic matrix.
#[derive(Debug, Clone)]
pub struct CorrespondenceSet {
    pub pairs: Vec<(Vector2<f64>, Vector2<f64>)>,
    pub intrinsics: Intrinsics,
}

impl CorrespondenceSet {
    /// K-normalized image coordinates of both frames.
    fn normalized(&self) -> (Vec<Vector2<f64>>, Vec<Vector2<f64>>) {
        let kinv = self.intrinsics.inverse_matrix();
        let map = |p: &Vector2<f64>| {
            let v = kinv * Vector3::new(p.x, p.y, 1.0);
            Vector2::new(v.x / v.z, v.y / v.z)
        };
        (
            self.pairs.iter().map(|(a, _)| map(a)).collect(),
            self.pairs.iter().map(|(_, b)| map(b)).collect(),
        )
    }

    /// Unit bearing vectors of both frames.
    fn bearings(&self) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
        let kinv = self.intrinsics.inverse_matrix();
        let map = |p: &Vector2<f64>| (kinv * Vector3::new(p.x, p.y, 1.0)).normalize();
        (
            self.pairs.iter().map(|(a, _)| map(a)).collect(),
            self.pairs.iter().map(|(_, b)| map(b)).collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoseModel {
    Essential,
    RotHomography,
}

/// Relative pose hypothesis mapping frame-1 camera coordinates to frame-2:
/// `X2 = R X1 + t`.
#[derive(Debug, Clone)]
pub struct PoseHypothesis {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub inliers: usize,
    pub model: PoseModel,
}

#[derive(Debug, Clone, Copy)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Sampson threshold in normalized image coordinates (squared units).
    pub sampson_threshold: f64,
    /// Angular inlier threshold for the rotation-only model, radians.
    pub angular_threshold: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            sampson_threshold: 1e-4,
            angular_threshold: 0.5f64.to_radians(),
            seed: 0,
        }
    }
}

fn sampson_normalized(x1: Vector2<f64>, x2: Vector2<f64>, e: &Matrix3<f64>) -> f64 {
    let h1 = Vector3::new(x1.x, x1.y, 1.0);
    let h2 = Vector3::new(x2.x, x2.y, 1.0);
    let e1 = e * h1;
    let e2 = e.transpose() * h2;
    let num = h2.dot(&e1);
    let den = e1.x * e1.x + e1.y * e1.y + e2.x * e2.x + e2.y * e2.y;
    if den == 0.0 {
        return f64::INFINITY;
    }
    num * num / den
}

/// Hartley-normalized 8-point estimate over the given index set, projected
/// onto the essential manifold.
fn eight_point(
    x1: &[Vector2<f64>],
    x2: &[Vector2<f64>],
    idx: &[usize],
) -> Option<Matrix3<f64>> {
    let normalize = |pts: &[Vector2<f64>], idx: &[usize]| {
        let mut mean = Vector2::zeros();
        for &i in idx {
            mean += pts[i];
        }
        mean /= idx.len() as f64;
        let mut scale = 0.0;
        for &i in idx {
            scale += (pts[i] - mean).norm();
        }
        scale /= idx.len() as f64;
        if scale < 1e-12 {
            return None;
        }
        let s = std::f64::consts::SQRT_2 / scale;
        Some(Matrix3::new(s, 0.0, -s * mean.x, 0.0, s, -s * mean.y, 0.0, 0.0, 1.0))
    };
    let t1 = normalize(x1, idx)?;
    let t2 = normalize(x2, idx)?;
    let mut a = DMatrix::<f64>::zeros(idx.len(), 9);
    for (r, &i) in idx.iter().enumerate() {
        let p = t1 * Vector3::new(x1[i].x, x1[i].y, 1.0);
        let q = t2 * Vector3::new(x2[i].x, x2[i].y, 1.0);
        let (u, v) = (p.x / p.z, p.y / p.z);
        let (up, vp) = (q.x / q.z, q.y / q.z);
        let row = [up * u, up * v, up, vp * u, vp * v, vp, u, v, 1.0];
        for (c, val) in row.into_iter().enumerate() {
            a[(r, c)] = val;
        }
    }
    // null vector of A via the smallest eigenvector of A^T A
    let ata = a.transpose() * &a;
    let eig = ata.symmetric_eigen();
    let mut min_i = 0;
    for i in 1..9 {
        if eig.eigenvalues[i] < eig.eigenvalues[min_i] {
            min_i = i;
        }
    }
    let f = eig.eigenvectors.column(min_i);
    let fmat = Matrix3::new(f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8]);
    let fmat = t2.transpose() * fmat * t1;
    // essential manifold projection: equal singular values, zero third
    let svd = fmat.svd(true, true);
    let u = svd.u?;
    let vt = svd.v_t?;
    let s = (svd.singular_values[0] + svd.singular_values[1]) * 0.5;
    let e = u * Matrix3::from_diagonal(&Vector3::new(s, s, 0.0)) * vt;
    Some(e / e.norm())
}

/// Midpoint cheirality test for a candidate `(R, t)`: both camera-frame
/// depths of the triangulated point must be positive.
fn cheirality_ok(r: &Matrix3<f64>, t: &Vector3<f64>, x1: Vector2<f64>, x2: Vector2<f64>) -> bool {
    let d1 = Vector3::new(x1.x, x1.y, 1.0);
    let c2 = -r.transpose() * t;
    let d2 = r.transpose() * Vector3::new(x2.x, x2.y, 1.0);
    let b = c2;
    let a11 = d1.dot(&d1);
    let a12 = -d1.dot(&d2);
    let a22 = -d2.dot(&d2);
    let det = a11 * a22 + a12 * a12;
    if det.abs() < 1e-15 {
        return false;
    }
    let r1 = b.dot(&d1);
    let r2 = b.dot(&d2);
    let s = (r1 * a22 - a12 * r2) / det;
    let w = (a11 * r2 - r1 * (-a12)) / det;
    let m = 0.5 * ((d1 * s) + (c2 + d2 * w));
    let z1 = m.z;
    let z2 = (r * m + t).z;
    z1 > 0.0 && z2 > 0.0
}

/// Decomposes an essential matrix into the four `(R, t)` candidates and
/// picks the one winning the cheirality vote over the inlier set.
fn decompose_essential(
    e: &Matrix3<f64>,
    x1: &[Vector2<f64>],
    x2: &[Vector2<f64>],
    inliers: &[usize],
) -> Option<(Matrix3<f64>, Vector3<f64>)> {
    let svd = e.svd(true, true);
    let mut u = svd.u?;
    let mut vt = svd.v_t?;
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * vt;
    let r2 = u * w.transpose() * vt;
    let tvec = u.column(2).into_owned();
    let mut best: Option<(usize, Matrix3<f64>, Vector3<f64>)> = None;
    for (r, t) in [(r1, tvec), (r1, -tvec), (r2, tvec), (r2, -tvec)] {
        let votes = inliers.iter().filter(|&&i| cheirality_ok(&r, &t, x1[i], x2[i])).count();
        if best.as_ref().map_or(true, |(bv, _, _)| votes > *bv) {
            best = Some((votes, r, t));
        }
    }
    let (_, r, t) = best?;
    let norm = t.norm();
    if norm < 1e-15 {
        return None;
    }
    Some((r, t / norm))
}

/// Normalized 8-point estimation inside RANSAC with a final inlier refit;
/// `|t| = 1` on return.
pub fn estimate_essential(cs: &CorrespondenceSet, cfg: &RansacConfig) -> Result<PoseHypothesis, PoseError> {
    let n = cs.pairs.len();
    if n < 8 {
        return Err(PoseError::InsufficientCorrespondences { got: n, need: 8 });
    }
    let (x1, x2) = cs.normalized();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xe55e);
    let mut best: Option<(usize, f64, Matrix3<f64>)> = None;
    let mut idx = [0usize; 8];
    for _ in 0..cfg.iterations {
        // distinct sample
        let mut chosen = 0;
        let mut guard = 0;
        while chosen < 8 && guard < 1000 {
            guard += 1;
            let c = rng.gen_range(0..n);
            if !idx[..chosen].contains(&c) {
                idx[chosen] = c;
                chosen += 1;
            }
        }
        if chosen < 8 {
            break;
        }
        let Some(e) = eight_point(&x1, &x2, &idx) else { continue };
        let mut count = 0usize;
        let mut resid = 0.0;
        for i in 0..n {
            let r = sampson_normalized(x1[i], x2[i], &e);
            if r <= cfg.sampson_threshold {
                count += 1;
                resid += r;
            }
        }
        if best.as_ref().map_or(true, |(bc, br, _)| count > *bc || (count == *bc && resid < *br)) {
            best = Some((count, resid, e));
        }
    }
    let (count, _, e) = best.ok_or(PoseError::NoConsensus)?;
    if count < 8 {
        return Err(PoseError::NoConsensus);
    }
    // iterated consensus refit with a tightening gate: the final rounds shed
    // outliers that sit near the epipolar line of the rough hypothesis
    let gate_of = |e: &Matrix3<f64>, thr: f64| -> Vec<usize> {
        (0..n).filter(|&i| sampson_normalized(x1[i], x2[i], e) <= thr).collect()
    };
    let mut use_e = e;
    let mut use_inliers = gate_of(&use_e, cfg.sampson_threshold);
    for round in 0..4 {
        if use_inliers.len() < 8 {
            break;
        }
        let Some(refined) = eight_point(&x1, &x2, &use_inliers) else { break };
        // decaying threshold: full gate first, then half of the median
        // inlier residual, floored well above numerical noise
        let thr = if round == 0 {
            cfg.sampson_threshold
        } else {
            let mut res: Vec<f64> =
                use_inliers.iter().map(|&i| sampson_normalized(x1[i], x2[i], &refined)).collect();
            res.sort_by(|a, b| a.partial_cmp(b).unwrap());
            (res[res.len() / 2] * 4.0).max(cfg.sampson_threshold * 0.05)
        };
        let next = gate_of(&refined, thr);
        if next.len() < 8 {
            break;
        }
        use_e = refined;
        use_inliers = next;
    }
    // report consensus against the configured gate
    let reported_inliers = gate_of(&use_e, cfg.sampson_threshold);
    let use_inliers = if reported_inliers.len() >= 8 { reported_inliers } else { use_inliers };
    if use_inliers.len() < 8 {
        return Err(PoseError::NoConsensus);
    }
    let (r, t) = decompose_essential(&use_e, &x1, &x2, &use_inliers).ok_or(PoseError::NoConsensus)?;
    Ok(PoseHypothesis { rotation: r, translation: t, inliers: use_inliers.len(), model: PoseModel::Essential })
}

/// Orthogonal-Procrustes rotation from bearing pairs.
fn kabsch(b1: &[Vector3<f64>], b2: &[Vector3<f64>], idx: &[usize]) -> Option<Matrix3<f64>> {
    let mut c = Matrix3::zeros();
    for &i in idx {
        c += b2[i] * b1[i].transpose();
    }
    let svd = c.svd(true, true);
    let u = svd.u?;
    let vt = svd.v_t?;
    let d = (u * vt).determinant();
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum())) * vt;
    Some(r)
}

/// Minimal 2-point rotation fits inside RANSAC, inliers by angular residual;
/// translation is identically zero.
pub fn estimate_rot_homography(cs: &CorrespondenceSet, cfg: &RansacConfig) -> Result<PoseHypothesis, PoseError> {
    let n = cs.pairs.len();
    if n < 2 {
        return Err(PoseError::InsufficientCorrespondences { got: n, need: 2 });
    }
    let (b1, b2) = cs.bearings();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5070);
    let cos_thr = cfg.angular_threshold.cos();
    let mut best: Option<(usize, f64, Matrix3<f64>)> = None;
    for _ in 0..cfg.iterations {
        let i = rng.gen_range(0..n);
        let mut j = rng.gen_range(0..n);
        let mut guard = 0;
        while j == i && guard < 100 {
            j = rng.gen_range(0..n);
            guard += 1;
        }
        if j == i {
            break;
        }
        let Some(r) = kabsch(&b1, &b2, &[i, j]) else { continue };
        let mut count = 0;
        let mut resid = 0.0;
        for k in 0..n {
            let c = (r * b1[k]).dot(&b2[k]).clamp(-1.0, 1.0);
            if c >= cos_thr {
                count += 1;
                resid += 1.0 - c;
            }
        }
        if best.as_ref().map_or(true, |(bc, br, _)| count > *bc || (count == *bc && resid < *br)) {
            best = Some((count, resid, r));
        }
    }
    let (count, _, r) = best.ok_or(PoseError::NoConsensus)?;
    if count < 2 {
        return Err(PoseError::NoConsensus);
    }
    let inliers: Vec<usize> = (0..n)
        .filter(|&k| (r * b1[*&k]).dot(&b2[*&k]).clamp(-1.0, 1.0) >= cos_thr)
        .collect();
    let refined = kabsch(&b1, &b2, &inliers).unwrap_or(r);
    let final_count = (0..n)
        .filter(|&k| (refined * b1[k]).dot(&b2[k]).clamp(-1.0, 1.0) >= cos_thr)
        .count();
    let (use_r, use_count) = if final_count >= count { (refined, final_count) } else { (r, count) };
    Ok(PoseHypothesis {
        rotation: use_r,
        translation: Vector3::zeros(),
        inliers: use_count,
        model: PoseModel::RotHomography,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefineBranch {
    Essential,
    RotHomography,
    /// Both estimators failed; the initial pose passed through.
    Fallback,
}

#[derive(Debug, Clone)]
pub struct RefinedPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub branch: RefineBranch,
    pub warning: bool,
    pub essential_inliers: usize,
    pub homography_inliers: usize,
}

/// Model selection over the two estimates: the essential branch keeps the
/// rotation and rescales its unit translation to the initial translation's
/// length; the rotation branch zeroes the translation; ties favor the
/// lower-parameter rotation model. A total function: if both estimators
/// fail, the initial pose is returned with a warning flag.
pub fn refine_pose(
    initial_rotation: Matrix3<f64>,
    initial_translation: Vector3<f64>,
    cs: &CorrespondenceSet,
    cfg: &RansacConfig,
) -> RefinedPose {
    let ess = estimate_essential(cs, cfg);
    let rot = estimate_rot_homography(cs, cfg);
    let n_e = ess.as_ref().map_or(0, |h| h.inliers);
    let n_r = rot.as_ref().map_or(0, |h| h.inliers);
    match (ess, rot) {
        (Ok(e), rot_res) if n_e > n_r => RefinedPose {
            rotation: e.rotation,
            translation: e.translation * initial_translation.norm(),
            branch: RefineBranch::Essential,
            warning: false,
            essential_inliers: n_e,
            homography_inliers: rot_res.map_or(0, |h| h.inliers),
        },
        (_, Ok(r)) => RefinedPose {
            rotation: r.rotation,
            translation: Vector3::zeros(),
            branch: RefineBranch::RotHomography,
            warning: false,
            essential_inliers: n_e,
            homography_inliers: n_r,
        },
        (Ok(e), Err(_)) => RefinedPose {
            rotation: e.rotation,
            translation: e.translation * initial_translation.norm(),
            branch: RefineBranch::Essential,
            warning: false,
            essential_inliers: n_e,
            homography_inliers: 0,
        },
        (Err(_), Err(_)) => RefinedPose {
            rotation: initial_rotation,
            translation: initial_translation,
            branch: RefineBranch::Fallback,
            warning: true,
            essential_inliers: 0,
            homography_inliers: 0,
        },
    }
}
