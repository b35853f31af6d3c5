//! Controlled corruptions of oracle channels: affine scale/shift depth
//! distortion emulating monocular priors, and flow outlier injection for
//! stress-testing masks and pose refinement.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::DepthMap;
use crate::masking::FlowField;

use super::OracleError;

/// Inverse affine distortion `d' = (d - beta) / alpha + N(0, sigma)`, so that
/// the scale/shift solver should recover `(alpha, beta)` from it.
pub fn corrupt_depth(
    d_true: &DepthMap,
    alpha: f64,
    beta: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<DepthMap, OracleError> {
    if alpha <= 0.0 {
        return Err(OracleError::NonPositiveScale(alpha));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DepthMap::new_invalid(d_true.width, d_true.height);
    for y in 0..d_true.height {
        for x in 0..d_true.width {
            // Draw per pixel regardless of validity to keep the stream
            // aligned with the pixel grid.
            let n: f64 = if noise_sigma > 0.0 { gaussian(&mut rng) * noise_sigma } else { 0.0 };
            if let Some(d) = d_true.get(x, y) {
                let v = (d - beta) / alpha + n;
                if v > 0.0 && v.is_finite() {
                    out.set(x, y, v);
                }
            }
        }
    }
    Ok(out)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream deterministic.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Flow with a seeded pixel subset knocked off by `magnitude` pixels in a
/// random direction. Returns the corrupted field plus per-pixel bookkeeping
/// for precision/recall scoring.
pub fn corrupt_flow(
    f_true: &FlowField,
    outlier_fraction: f64,
    magnitude: f64,
    seed: u64,
) -> (FlowField, Vec<bool>) {
    assert!((0.0..=1.0).contains(&outlier_fraction), "fraction must be in [0, 1]");
    let n = f_true.width * f_true.height;
    let mut corrupted = vec![false; n];
    let mut out = f_true.clone();
    let count = (outlier_fraction * n as f64).round() as usize;
    if count == 0 {
        return (out, corrupted);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    // Fisher-Yates with the seeded stream.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    for &i in order.iter().take(count) {
        if !f_true.validity[i] {
            continue;
        }
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        out.vectors[i][0] += magnitude * angle.cos();
        out.vectors[i][1] += magnitude * angle.sin();
        corrupted[i] = true;
    }
    (out, corrupted)
}
