//! Seeded band-limited value noise used to texture the analytic scenes.
//! Smooth enough for photometric learning, structured enough that local
//! gradient descriptors carry signal.

use nalgebra::Vector3;

#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn lattice(ix: i64, iy: i64, iz: i64, seed: u64) -> f64 {
    let h = splitmix64(
        seed ^ splitmix64(ix as u64 ^ splitmix64(iy as u64 ^ splitmix64(iz as u64))),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64
}

#[inline]
fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Trilinearly interpolated lattice noise in `[0, 1]`.
pub fn value_noise(p: Vector3<f64>, seed: u64) -> f64 {
    let xf = p.x.floor();
    let yf = p.y.floor();
    let zf = p.z.floor();
    let (ix, iy, iz) = (xf as i64, yf as i64, zf as i64);
    let tx = smoothstep(p.x - xf);
    let ty = smoothstep(p.y - yf);
    let tz = smoothstep(p.z - zf);
    let mut acc = 0.0;
    for dz in 0..2i64 {
        for dy in 0..2i64 {
            for dx in 0..2i64 {
                let w = (if dx == 1 { tx } else { 1.0 - tx })
                    * (if dy == 1 { ty } else { 1.0 - ty })
                    * (if dz == 1 { tz } else { 1.0 - tz });
                acc += w * lattice(ix + dx, iy + dy, iz + dz, seed);
            }
        }
    }
    acc
}

/// Three-octave fractal sum in `[0, 1]`.
pub fn fbm(p: Vector3<f64>, seed: u64, octaves: u32) -> f64 {
    let mut amp = 0.5;
    let mut freq = 1.0;
    let mut total = 0.0;
    let mut norm = 0.0;
    for o in 0..octaves {
        total += amp * value_noise(p * freq, seed.wrapping_add(o as u64 * 0x9e37));
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    total / norm
}

/// Per-channel texture color at an object-space point.
pub fn surface_color(local: Vector3<f64>, base: [f64; 3], scale: f64, seed: u64) -> [f32; 3] {
    let p = local * scale;
    let mut out = [0.0f32; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let n = fbm(p, seed ^ (c as u64).wrapping_mul(0x517c_c1b7_2722_0a95), 3);
        *o = (base[c] * (0.55 + 0.65 * n)).clamp(0.0, 1.0) as f32;
    }
    out
}
