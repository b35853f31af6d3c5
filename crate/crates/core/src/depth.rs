//! Consistent depth estimation: per-pixel mid-point triangulation from flow
//! across neighbor frames, then a masked robust affine fit aligning the
//! monocular prior to the triangulated scale.

use thiserror::Error;

use crate::geometry::{triangulate_midpoint, Camera, DepthMap};
use crate::masking::{FlowField, MaskImage};
use nalgebra::Vector2;

#[derive(Debug, Error)]
pub enum DepthError {
    #[error("prior depth is (near-)constant on the support; affine fit is rank deficient")]
    DegenerateDepth,
    #[error("intersection mask covers {got} pixels, need at least {need}")]
    InsufficientSupport { got: usize, need: usize },
    #[error("missing camera for frame {0}")]
    MissingCamera(usize),
    #[error("triangulated set is empty")]
    EmptySet,
}

/// Per-frame affine depth correction `d_hat = alpha * d_prior + beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleShift {
    pub alpha: f64,
    pub beta: f64,
    pub frame_index: usize,
}

/// Triangulated depth maps toward `2K` neighbors with their per-pair
/// reliability masks.
#[derive(Debug, Clone)]
pub struct TriangulatedDepthSet {
    pub maps: Vec<DepthMap>,
    pub masks: Vec<MaskImage>,
    pub neighbor_offsets: Vec<i32>,
}

impl TriangulatedDepthSet {
    pub fn new(maps: Vec<DepthMap>, masks: Vec<MaskImage>, neighbor_offsets: Vec<i32>) -> Self {
        assert_eq!(maps.len(), masks.len());
        assert_eq!(maps.len(), neighbor_offsets.len());
        assert!(neighbor_offsets.iter().all(|&k| k != 0), "offsets must be nonzero");
        let mut sorted = neighbor_offsets.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), neighbor_offsets.len(), "offsets must be distinct");
        Self { maps, masks, neighbor_offsets }
    }

    /// Intersection of the per-pair masks.
    pub fn intersection_mask(&self) -> MaskImage {
        let mut m = self.masks[0].clone();
        for other in &self.masks[1..] {
            m.intersect_with(other);
        }
        m
    }
}

/// Per-pixel mid-point triangulation of frame `t` against neighbor `t + k`
/// along the flow field `f_{t->t+k}`. Invalid where flow is missing, the
/// landing leaves the raster, or the two-ray geometry degenerates.
pub fn triangulated_depth_map(
    flow: &FlowField,
    cam_t: &Camera,
    cam_t2: &Camera,
) -> DepthMap {
    DepthMap::from_fn(flow.width, flow.height, |x, y| {
        let f = flow.get(x, y)?;
        let p = Vector2::new(x as f64, y as f64);
        let landing = Vector2::new(x as f64 + f[0], y as f64 + f[1]);
        if !cam_t2.intrinsics.contains(landing) {
            return None;
        }
        let (d, ok) = triangulate_midpoint(p, landing, cam_t, cam_t2);
        if ok && d.is_finite() {
            Some(d)
        } else {
            None
        }
    })
}

/// Result of the robust affine fit, with enough trace for logs and the
/// monotonicity checks.
#[derive(Debug, Clone)]
pub struct ScaleShiftSolve {
    pub scale_shift: ScaleShift,
    pub support_pixels: usize,
    /// Masked L1 objective after each accepted IRLS iterate (element 0 is the
    /// least-squares initialization).
    pub objective_history: Vec<f64>,
}

impl ScaleShiftSolve {
    pub fn final_objective(&self) -> f64 {
        *self.objective_history.last().unwrap()
    }
}

const MIN_SUPPORT: usize = 50;
const IRLS_ITERATIONS: usize = 10;
const IRLS_FLOOR: f64 = 1e-6;

/// Minimizes `sum_k sum_p in M |dbar_k(p) - (alpha d'(p) + beta)|` over the
/// intersection mask by iteratively reweighted least squares (weights
/// `1/max(|r|, 1e-6)`, 10 iterations, least-squares initialization). The
/// objective never increases across accepted iterates.
pub fn solve_scale_shift(
    d_prior: &DepthMap,
    tri: &TriangulatedDepthSet,
    frame_index: usize,
) -> Result<ScaleShiftSolve, DepthError> {
    if tri.maps.is_empty() {
        return Err(DepthError::EmptySet);
    }
    let mask = tri.intersection_mask();

    // Gather (prior, triangulated) samples over the masked support, row-major
    // then by neighbor order so reductions are order-deterministic.
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut support = vec![false; d_prior.values.len()];
    for (ki, map) in tri.maps.iter().enumerate() {
        debug_assert_eq!(map.width, d_prior.width);
        for y in 0..d_prior.height {
            for x in 0..d_prior.width {
                if !mask.get(x, y) {
                    continue;
                }
                let (Some(xp), Some(yt)) = (d_prior.get(x, y), map.get(x, y)) else { continue };
                xs.push(xp);
                ys.push(yt);
                if ki == 0 {
                    support[y * d_prior.width + x] = true;
                } else {
                    support[y * d_prior.width + x] = true;
                }
            }
        }
    }
    let support_pixels = support.iter().filter(|&&s| s).count();
    if support_pixels < MIN_SUPPORT {
        return Err(DepthError::InsufficientSupport { got: support_pixels, need: MIN_SUPPORT });
    }

    // Variance gate on the prior over the support.
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let var_x = xs.iter().map(|x| (x - mean_x) * (x - mean_x)).sum::<f64>() / n;
    if var_x <= 1e-8 {
        return Err(DepthError::DegenerateDepth);
    }

    let objective = |alpha: f64, beta: f64| -> f64 {
        xs.iter().zip(&ys).map(|(&x, &y)| (y - alpha * x - beta).abs()).sum()
    };

    let weighted_fit = |weights: Option<&[f64]>| -> Option<(f64, f64)> {
        let mut sw = 0.0;
        let mut swx = 0.0;
        let mut swy = 0.0;
        let mut swxx = 0.0;
        let mut swxy = 0.0;
        for i in 0..xs.len() {
            let w = weights.map_or(1.0, |ws| ws[i]);
            sw += w;
            swx += w * xs[i];
            swy += w * ys[i];
            swxx += w * xs[i] * xs[i];
            swxy += w * xs[i] * ys[i];
        }
        let det = swxx * sw - swx * swx;
        if det.abs() < 1e-12 {
            return None;
        }
        Some(((swxy * sw - swx * swy) / det, (swxx * swy - swx * swxy) / det))
    };

    let (mut alpha, mut beta) = weighted_fit(None).ok_or(DepthError::DegenerateDepth)?;
    let mut history = vec![objective(alpha, beta)];
    let mut weights = vec![0.0f64; xs.len()];
    for _ in 0..IRLS_ITERATIONS {
        for i in 0..xs.len() {
            let r = (ys[i] - alpha * xs[i] - beta).abs();
            weights[i] = 1.0 / r.max(IRLS_FLOOR);
        }
        let Some((a, b)) = weighted_fit(Some(&weights)) else { break };
        let obj = objective(a, b);
        if obj > *history.last().unwrap() {
            break; // guard: keep the best iterate, objective stays monotone
        }
        alpha = a;
        beta = b;
        history.push(obj);
    }

    Ok(ScaleShiftSolve {
        scale_shift: ScaleShift { alpha: alpha.max(1e-9), beta, frame_index },
        support_pixels,
        objective_history: history,
    })
}

/// `d_hat = alpha * d' + beta`; pixels mapping to a nonpositive depth become
/// invalid.
pub fn apply_scale_shift(d_prior: &DepthMap, s: &ScaleShift) -> DepthMap {
    assert!(s.alpha > 0.0);
    DepthMap::from_fn(d_prior.width, d_prior.height, |x, y| {
        let d = d_prior.get(x, y)?;
        let v = s.alpha * d + s.beta;
        if v > 0.0 && v.is_finite() {
            Some(v)
        } else {
            None
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{MaskImage, MaskKind};
    use crate::oracle::{corrupt_depth, generate, SceneSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn full_mask(w: usize, h: usize) -> MaskImage {
        MaskImage::new(w, h, true, MaskKind::Final)
    }

    #[test]
    fn triangulated_depth_matches_analytic_on_static_scene() {
        let bundle = generate(&SceneSpec::static_scene(2)).unwrap();
        let flow = bundle.flow(4, 2);
        let tri = triangulated_depth_map(&flow, bundle.camera(4), bundle.camera(6));
        let gt = &bundle.frames[4].depth;
        let mut checked = 0;
        for y in 0..tri.height {
            for x in 0..tri.width {
                if let (Some(d), Some(g)) = (tri.get(x, y), gt.get(x, y)) {
                    assert!((d - g).abs() / g < 1e-6, "({x},{y}): {d} vs {g}");
                    checked += 1;
                }
            }
        }
        assert!(checked > tri.width * tri.height / 2);
    }

    #[test]
    fn triangulated_depth_zero_baseline_all_invalid() {
        let bundle = generate(&SceneSpec::static_scene(2)).unwrap();
        let flow = FlowField::constant(bundle.spec.width, bundle.spec.height, 0.0, 0.0);
        let cam = bundle.camera(3);
        let tri = triangulated_depth_map(&flow, cam, cam);
        assert_eq!(tri.valid_count(), 0);
    }

    #[test]
    fn dynamic_pixels_triangulate_wrong() {
        // Epipolar-violating motion makes triangulation disagree with truth,
        // which is exactly why the dynamic mask exists.
        let bundle = generate(&SceneSpec::desk_default(8)).unwrap();
        let flow = bundle.flow(4, 2);
        let tri = triangulated_depth_map(&flow, bundle.camera(4), bundle.camera(6));
        let gt = &bundle.frames[4].depth;
        let seg = bundle.segmentation(4);
        let mut worst = 0.0f64;
        for y in 0..tri.height {
            for x in 0..tri.width {
                if !seg.get(x, y) {
                    continue;
                }
                if let (Some(d), Some(g)) = (tri.get(x, y), gt.get(x, y)) {
                    worst = worst.max((d - g).abs() / g);
                }
            }
        }
        assert!(worst > 0.05, "dynamic sphere should break triangulation, worst rel err {worst}");
    }

    #[test]
    fn solve_exact_affine_relation() {
        let w = 20;
        let h = 15;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d_prior = DepthMap::from_fn(w, h, |_, _| Some(rng.gen_range(1.0..6.0)));
        let dbar = DepthMap::from_fn(w, h, |x, y| Some(2.0 * d_prior.get(x, y).unwrap() + 1.0));
        let tri = TriangulatedDepthSet::new(vec![dbar], vec![full_mask(w, h)], vec![1]);
        let solve = solve_scale_shift(&d_prior, &tri, 0).unwrap();
        assert!((solve.scale_shift.alpha - 2.0).abs() < 1e-6);
        assert!((solve.scale_shift.beta - 1.0).abs() < 1e-6);
        assert_eq!(solve.support_pixels, w * h);
    }

    /// Brute-force 2-parameter grid refinement oracle for the masked L1 fit.
    fn grid_oracle(xs: &[f64], ys: &[f64]) -> (f64, f64) {
        let objective = |a: f64, b: f64| -> f64 {
            xs.iter().zip(ys).map(|(&x, &y)| (y - a * x - b).abs()).sum()
        };
        let (mut a0, mut a1) = (0.1, 6.0);
        let (mut b0, mut b1) = (-3.0, 3.0);
        let (mut best_a, mut best_b) = (1.0, 0.0);
        for _ in 0..12 {
            let mut best = f64::INFINITY;
            for i in 0..41 {
                for j in 0..41 {
                    let a = a0 + (a1 - a0) * i as f64 / 40.0;
                    let b = b0 + (b1 - b0) * j as f64 / 40.0;
                    let o = objective(a, b);
                    if o < best {
                        best = o;
                        best_a = a;
                        best_b = b;
                    }
                }
            }
            let da = (a1 - a0) / 8.0;
            let db = (b1 - b0) / 8.0;
            a0 = best_a - da;
            a1 = best_a + da;
            b0 = best_b - db;
            b1 = best_b + db;
        }
        (best_a, best_b)
    }

    #[test]
    fn solve_with_masked_outliers_matches_grid_oracle() {
        let w = 40;
        let h = 30;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let d_prior = DepthMap::from_fn(w, h, |_, _| Some(rng.gen_range(1.0..6.0)));
        let mut mask = full_mask(w, h);
        let mut dbar = DepthMap::new_invalid(w, h);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let d = d_prior.get(x, y).unwrap();
                if rng.gen_bool(0.3) {
                    // contaminated pixel, excluded by the mask
                    dbar.set(x, y, d * 10.0 + rng.gen_range(0.0..5.0));
                    mask.set(x, y, false);
                } else {
                    dbar.set(x, y, 2.0 * d + 1.0);
                    xs.push(d);
                    ys.push(2.0 * d + 1.0);
                }
            }
        }
        let tri = TriangulatedDepthSet::new(vec![dbar], vec![mask], vec![1]);
        let solve = solve_scale_shift(&d_prior, &tri, 3).unwrap();
        let (oa, ob) = grid_oracle(&xs, &ys);
        assert!((solve.scale_shift.alpha - 2.0).abs() < 1e-3, "alpha {}", solve.scale_shift.alpha);
        assert!((solve.scale_shift.beta - 1.0).abs() < 1e-3, "beta {}", solve.scale_shift.beta);
        assert!((solve.scale_shift.alpha - oa).abs() < 5e-2);
        assert!((solve.scale_shift.beta - ob).abs() < 5e-2);
        assert_eq!(solve.scale_shift.frame_index, 3);
    }

    #[test]
    fn solve_rejects_constant_prior() {
        let d_prior = DepthMap::constant(20, 20, 3.0);
        let dbar = DepthMap::constant(20, 20, 7.0);
        let tri = TriangulatedDepthSet::new(vec![dbar], vec![full_mask(20, 20)], vec![1]);
        assert!(matches!(solve_scale_shift(&d_prior, &tri, 0), Err(DepthError::DegenerateDepth)));
    }

    #[test]
    fn solve_rejects_insufficient_support() {
        let d_prior = DepthMap::constant(10, 4, 3.0);
        let dbar = DepthMap::constant(10, 4, 7.0);
        let mut mask = MaskImage::new(10, 4, false, MaskKind::Final);
        mask.set(1, 1, true);
        let tri = TriangulatedDepthSet::new(vec![dbar], vec![mask], vec![1]);
        assert!(matches!(
            solve_scale_shift(&d_prior, &tri, 0),
            Err(DepthError::InsufficientSupport { got: 1, need: 50 })
        ));
    }

    #[test]
    fn irls_objective_monotone_on_noisy_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..20 {
            let w = 30;
            let h = 20;
            let d_prior = DepthMap::from_fn(w, h, |_, _| Some(rng.gen_range(0.5..8.0)));
            let dbar = DepthMap::from_fn(w, h, |x, y| {
                let d = d_prior.get(x, y).unwrap();
                let noise = rng.gen_range(-0.5..0.5);
                let v: f64 = 1.5 * d + 0.3 + noise + if rng.gen_bool(0.1) { 5.0 } else { 0.0 };
                Some(v.max(0.01))
            });
            let tri = TriangulatedDepthSet::new(vec![dbar], vec![full_mask(w, h)], vec![1]);
            let solve = solve_scale_shift(&d_prior, &tri, trial).unwrap();
            for win in solve.objective_history.windows(2) {
                assert!(win[1] <= win[0] + 1e-9, "objective increased: {:?}", solve.objective_history);
            }
        }
    }

    #[test]
    fn mask_shrink_never_increases_subset_objective() {
        // The optimum on the full support, restricted to a subset, can only
        // be matched or improved by solving on the subset directly.
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let w = 30;
        let h = 20;
        let d_prior = DepthMap::from_fn(w, h, |_, _| Some(rng.gen_range(0.5..8.0)));
        let dbar = DepthMap::from_fn(w, h, |x, y| {
            let d = d_prior.get(x, y).unwrap();
            Some((1.8 * d - 0.2 + rng.gen_range(-0.3..0.3f64)).max(0.01))
        });
        let mut submask = full_mask(w, h);
        for y in 0..h {
            for x in 0..w {
                if (x + y) % 3 == 0 {
                    submask.set(x, y, false);
                }
            }
        }
        let tri_full = TriangulatedDepthSet::new(vec![dbar.clone()], vec![full_mask(w, h)], vec![1]);
        let tri_sub = TriangulatedDepthSet::new(vec![dbar.clone()], vec![submask.clone()], vec![1]);
        let full = solve_scale_shift(&d_prior, &tri_full, 0).unwrap();
        let sub = solve_scale_shift(&d_prior, &tri_sub, 0).unwrap();
        let subset_objective = |a: f64, b: f64| -> f64 {
            let mut s = 0.0;
            for y in 0..h {
                for x in 0..w {
                    if submask.get(x, y) {
                        s += (dbar.get(x, y).unwrap() - a * d_prior.get(x, y).unwrap() - b).abs();
                    }
                }
            }
            s
        };
        let on_sub_from_full = subset_objective(full.scale_shift.alpha, full.scale_shift.beta);
        let on_sub = subset_objective(sub.scale_shift.alpha, sub.scale_shift.beta);
        assert!(on_sub <= on_sub_from_full + 1e-6);
    }

    #[test]
    fn apply_identity_and_arithmetic() {
        let d = DepthMap::constant(4, 4, 3.0);
        let id = apply_scale_shift(&d, &ScaleShift { alpha: 1.0, beta: 0.0, frame_index: 0 });
        assert_eq!(id, d);
        let out = apply_scale_shift(&d, &ScaleShift { alpha: 2.0, beta: 1.0, frame_index: 0 });
        assert_eq!(out.get(2, 2), Some(7.0));
        // negative results invalidate
        let neg = apply_scale_shift(&d, &ScaleShift { alpha: 1.0, beta: -5.0, frame_index: 0 });
        assert_eq!(neg.valid_count(), 0);
    }

    #[test]
    fn corrupt_then_solve_recovers_ground_truth_depth() {
        let bundle = generate(&SceneSpec::static_scene(21)).unwrap();
        let gt = &bundle.frames[5].depth;
        let (alpha_true, beta_true) = (1.7, 0.6);
        let prior = corrupt_depth(gt, alpha_true, beta_true, 0.0, 99).unwrap();
        // Triangulated set from two neighbors with exact flow.
        let mut maps = Vec::new();
        let mut masks = Vec::new();
        for &k in &[-1i32, 1] {
            let flow = bundle.flow(5, k);
            let t2 = (5 + k) as usize;
            let tri = triangulated_depth_map(&flow, bundle.camera(5), bundle.camera(t2));
            let mask = MaskImage::from_bits(
                tri.width,
                tri.height,
                tri.validity.clone(),
                MaskKind::Final,
            );
            maps.push(tri);
            masks.push(mask);
        }
        let tri = TriangulatedDepthSet::new(maps, masks, vec![-1, 1]);
        let solve = solve_scale_shift(&prior, &tri, 5).unwrap();
        assert!((solve.scale_shift.alpha - alpha_true).abs() / alpha_true < 1e-3);
        assert!((solve.scale_shift.beta - beta_true).abs() / beta_true < 1e-3);
        let dhat = apply_scale_shift(&prior, &solve.scale_shift);
        let mut worst = 0.0f64;
        for y in 0..gt.height {
            for x in 0..gt.width {
                if let (Some(a), Some(b)) = (dhat.get(x, y), gt.get(x, y)) {
                    worst = worst.max((a - b).abs() / b);
                }
            }
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }
}
