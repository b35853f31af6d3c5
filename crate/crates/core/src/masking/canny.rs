//! Canny edge detection over a surface-normal map: per-channel Sobel, the
//! per-pixel maximum channel magnitude, non-maximum suppression, and
//! hysteresis thresholding.

use crate::geometry::NormalMap;

/// Binary edge map (true = edge pixel).
pub fn canny_on_normals(normals: &NormalMap, low: f64, high: f64) -> Vec<bool> {
    let (w, h) = (normals.width, normals.height);
    let n = w * h;

    // Sobel over the three normal channels; a window touching an invalid
    // normal produces no gradient (and therefore no edge) there.
    let mut mag = vec![0.0f64; n];
    let mut dir = vec![(0.0f64, 0.0f64); n];
    for y in 0..h {
        for x in 0..w {
            let mut ok = true;
            let mut chan = [[0.0f64; 9]; 3];
            let mut k = 0;
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let sx = (x as i32 + dx).clamp(0, w as i32 - 1) as usize;
                    let sy = (y as i32 + dy).clamp(0, h as i32 - 1) as usize;
                    match normals.get(sx, sy) {
                        Some(v) => {
                            chan[0][k] = v.x;
                            chan[1][k] = v.y;
                            chan[2][k] = v.z;
                        }
                        None => ok = false,
                    }
                    k += 1;
                }
            }
            if !ok {
                continue;
            }
            let mut best = 0.0;
            let mut best_g = (0.0, 0.0);
            for c in 0..3 {
                let v = &chan[c];
                // window laid out row-major: indices 0..9 over (dy, dx)
                let gx = (v[2] + 2.0 * v[5] + v[8]) - (v[0] + 2.0 * v[3] + v[6]);
                let gy = (v[6] + 2.0 * v[7] + v[8]) - (v[0] + 2.0 * v[1] + v[2]);
                let m = gx.hypot(gy);
                if m > best {
                    best = m;
                    best_g = (gx, gy);
                }
            }
            let i = y * w + x;
            mag[i] = best;
            dir[i] = best_g;
        }
    }

    // Non-maximum suppression along the quantized gradient direction.
    let mut thin = vec![0.0f64; n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if mag[i] == 0.0 {
                continue;
            }
            let (gx, gy) = dir[i];
            let angle = gy.atan2(gx);
            let sector = ((angle / std::f64::consts::PI * 4.0).round() as i64).rem_euclid(4);
            let (dx, dy) = match sector {
                0 => (1i32, 0i32),  // horizontal gradient
                1 => (1, 1),        // diagonal
                2 => (0, 1),        // vertical
                _ => (-1, 1),       // anti-diagonal
            };
            let fetch = |xx: i32, yy: i32| -> f64 {
                if xx < 0 || yy < 0 || xx >= w as i32 || yy >= h as i32 {
                    0.0
                } else {
                    mag[yy as usize * w + xx as usize]
                }
            };
            let a = fetch(x as i32 + dx, y as i32 + dy);
            let b = fetch(x as i32 - dx, y as i32 - dy);
            if mag[i] >= a && mag[i] >= b {
                thin[i] = mag[i];
            }
        }
    }

    // Hysteresis: strong seeds flood through 8-connected weak pixels.
    let mut edges = vec![false; n];
    let mut stack = Vec::new();
    for i in 0..n {
        if thin[i] >= high && !edges[i] {
            edges[i] = true;
            stack.push(i);
            while let Some(j) = stack.pop() {
                let (jx, jy) = (j % w, j / w);
                for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let nx = jx as i32 + dx;
                        let ny = jy as i32 + dy;
                        if nx < 0 || ny < 0 || nx >= w as i32 || ny >= h as i32 {
                            continue;
                        }
                        let k = ny as usize * w + nx as usize;
                        if !edges[k] && thin[k] >= low {
                            edges[k] = true;
                            stack.push(k);
                        }
                    }
                }
            }
        }
    }
    edges
}
