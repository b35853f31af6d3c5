//! Sinusoidal positional encoding with an analytic Jacobian so gradients can
//! flow through encoded inputs (needed when composing flow steps).

use std::f64::consts::PI;

/// `L` frequency octaves, optionally prepending the raw input. Output layout
/// per input vector: `[x..] ++ for l in 0..L: [sin(2^l pi x)..] ++ [cos(2^l pi x)..]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodingConfig {
    pub num_frequencies: usize,
    pub include_input: bool,
}

impl EncodingConfig {
    pub fn new(num_frequencies: usize, include_input: bool) -> Self {
        assert!(num_frequencies <= 16, "frequency count capped at 16");
        Self { num_frequencies, include_input }
    }

    pub fn output_width(&self, input_dim: usize) -> usize {
        input_dim * (usize::from(self.include_input) + 2 * self.num_frequencies)
    }

    pub fn encode_into(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        debug_assert_eq!(out.len(), self.output_width(d));
        let mut o = 0;
        if self.include_input {
            out[..d].copy_from_slice(x);
            o = d;
        }
        for l in 0..self.num_frequencies {
            let f = (1u64 << l) as f64 * PI;
            for (i, &xi) in x.iter().enumerate() {
                let (s, c) = (f * xi).sin_cos();
                out[o + i] = s;
                out[o + d + i] = c;
            }
            o += 2 * d;
        }
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_width(x.len())];
        self.encode_into(x, &mut out);
        out
    }

    /// Accumulates `dL/dx += J^T * upstream` for the encoding Jacobian at `x`.
    pub fn backprop_into(&self, x: &[f64], upstream: &[f64], dx: &mut [f64]) {
        let d = x.len();
        debug_assert_eq!(upstream.len(), self.output_width(d));
        debug_assert_eq!(dx.len(), d);
        let mut o = 0;
        if self.include_input {
            for i in 0..d {
                dx[i] += upstream[i];
            }
            o = d;
        }
        for l in 0..self.num_frequencies {
            let f = (1u64 << l) as f64 * PI;
            for (i, &xi) in x.iter().enumerate() {
                let (s, c) = (f * xi).sin_cos();
                dx[i] += upstream[o + i] * f * c;
                dx[i] -= upstream[o + d + i] * f * s;
            }
            o += 2 * d;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_vector_l2_with_input() {
        let cfg = EncodingConfig::new(2, true);
        let out = cfg.encode(&[0.0, 0.0, 0.0]);
        let expect = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        assert_eq!(out, expect);
    }

    #[test]
    fn l0_with_input_is_identity() {
        let cfg = EncodingConfig::new(0, true);
        assert_eq!(cfg.encode(&[0.3, -0.7]), vec![0.3, -0.7]);
    }

    #[test]
    fn quarter_period_scalar() {
        let cfg = EncodingConfig::new(1, true);
        let out = cfg.encode(&[0.5]);
        assert_eq!(out.len(), 3);
        assert!((out[0] - 0.5).abs() < 1e-15);
        assert!((out[1] - 1.0).abs() < 1e-15);
        assert!(out[2].abs() < 1e-15);
    }

    #[test]
    fn injective_on_unit_interval_with_input() {
        // With include_input the raw coordinates ride along, so distinct
        // inputs in [-1, 1) stay distinct.
        let cfg = EncodingConfig::new(3, true);
        let a = cfg.encode(&[0.25, -0.5]);
        let b = cfg.encode(&[0.250001, -0.5]);
        assert_ne!(a, b);
        assert_eq!(a[..2], [0.25, -0.5]);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let cfg = EncodingConfig::new(4, true);
        let x = [0.37, -0.81, 0.12];
        let w = cfg.output_width(3);
        let h = 1e-6;
        // random-ish fixed upstream
        let upstream: Vec<f64> = (0..w).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.5).collect();
        let mut dx = vec![0.0; 3];
        cfg.backprop_into(&x, &upstream, &mut dx);
        for i in 0..3 {
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            let fp: f64 = cfg.encode(&xp).iter().zip(&upstream).map(|(a, b)| a * b).sum();
            let fm: f64 = cfg.encode(&xm).iter().zip(&upstream).map(|(a, b)| a * b).sum();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-6, "component {i}: {fd} vs {}", dx[i]);
        }
    }
}
