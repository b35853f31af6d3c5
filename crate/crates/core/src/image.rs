//! Linear RGB raster with the sampling and gradient helpers the point-cloud
//! and rendering stages need.

use nalgebra::Vector2;

/// Row-major RGB image, channels interleaved, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, f(x, y));
            }
        }
        img
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }

    /// Clamped pixel fetch; coordinates may be off the raster.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> [f32; 3] {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.get(xc, yc)
    }

    pub fn sample_bilinear(&self, p: Vector2<f64>) -> Option<[f32; 3]> {
        if !(p.x >= 0.0 && p.y >= 0.0 && p.x <= (self.width - 1) as f64 && p.y <= (self.height - 1) as f64) {
            return None;
        }
        let x0 = (p.x.floor() as usize).min(self.width - 1);
        let y0 = (p.y.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = (p.x - x0 as f64) as f32;
        let fy = (p.y - y0 as f64) as f32;
        let a = self.get(x0, y0);
        let b = self.get(x1, y0);
        let c = self.get(x0, y1);
        let d = self.get(x1, y1);
        let mut out = [0.0f32; 3];
        for ch in 0..3 {
            out[ch] = a[ch] * (1.0 - fx) * (1.0 - fy)
                + b[ch] * fx * (1.0 - fy)
                + c[ch] * (1.0 - fx) * fy
                + d[ch] * fx * fy;
        }
        Some(out)
    }

    /// 3x3 Sobel gradients of one channel at a pixel, replicate-padded.
    pub fn sobel_at(&self, x: usize, y: usize, channel: usize) -> (f32, f32) {
        let v = |dx: isize, dy: isize| self.get_clamped(x as isize + dx, y as isize + dy)[channel];
        let gx = (v(1, -1) + 2.0 * v(1, 0) + v(1, 1)) - (v(-1, -1) + 2.0 * v(-1, 0) + v(-1, 1));
        let gy = (v(-1, 1) + 2.0 * v(0, 1) + v(1, 1)) - (v(-1, -1) + 2.0 * v(0, -1) + v(1, -1));
        (gx, gy)
    }

    /// Halves resolution by block-averaging; odd trailing rows/columns fall
    /// into partial blocks.
    pub fn downsample_half(&self) -> RgbImage {
        let w = self.width.div_ceil(2);
        let h = self.height.div_ceil(2);
        RgbImage::from_fn(w, h, |x, y| {
            let mut acc = [0.0f32; 3];
            let mut n = 0u32;
            for dy in 0..2 {
                for dx in 0..2 {
                    let sx = x * 2 + dx;
                    let sy = y * 2 + dy;
                    if sx < self.width && sy < self.height {
                        let p = self.get(sx, sy);
                        for ch in 0..3 {
                            acc[ch] += p[ch];
                        }
                        n += 1;
                    }
                }
            }
            [acc[0] / n as f32, acc[1] / n as f32, acc[2] / n as f32]
        })
    }
}
