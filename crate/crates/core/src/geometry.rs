//! Pinhole cameras, projection, mid-point triangulation, surface normals and
//! epipolar residuals shared by every pipeline stage.
//!
//! Conventions: camera-to-world pose `[R | t]`, right-handed camera frame with
//! +z forward, pixels addressed as homogeneous `(u, v, 1)` at integer centers.

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("pixel ({0}, {1}) outside image bounds {2}x{3}")]
    OutOfBounds(f64, f64, usize, usize),
    #[error("point behind camera (z = {0})")]
    BehindCamera(f64),
    #[error("camera centers coincide; epipolar geometry undefined")]
    CoincidentCenters,
    #[error("rotation is not orthonormal within 1e-9")]
    InvalidRotation,
    #[error("depth map has no usable valid region")]
    EmptyDepthMap,
}

/// Pinhole intrinsics in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        assert!(width >= 1 && height >= 1, "image must be at least 1x1");
        Self { fx, fy, cx, cy, width, height }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Continuous in-bounds test over `[0, w-1] x [0, h-1]`.
    pub fn contains(&self, p: Vector2<f64>) -> bool {
        p.x >= 0.0
            && p.y >= 0.0
            && p.x <= (self.width - 1) as f64
            && p.y <= (self.height - 1) as f64
    }

    /// Camera ray direction through pixel `p` in the camera frame (unit z).
    pub fn bearing(&self, p: Vector2<f64>) -> Vector3<f64> {
        Vector3::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy, 1.0)
    }
}

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    /// Validates orthonormality and det = +1 within 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let gram = rotation.transpose() * rotation;
        if (gram - Matrix3::identity()).norm() > 1e-9 {
            return Err(GeometryError::InvalidRotation);
        }
        if (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(GeometryError::InvalidRotation);
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Camera placed at `eye` with +z toward `target`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let x = up.cross(&z).normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_columns(&[x, y, z]);
        Self { rotation, translation: eye }
    }

    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn world_to_camera(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn camera_to_world(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

/// A camera at a given frame time; `viewpoint_tag` distinguishes the capture
/// trajectory from held-out query views.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub frame_index: usize,
    pub viewpoint_tag: String,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, pose: Pose, frame_index: usize, viewpoint_tag: &str) -> Self {
        Self { intrinsics, pose, frame_index, viewpoint_tag: viewpoint_tag.to_string() }
    }

    /// Lifts pixel `p` at z-depth `depth` to a world point: `R K^-1 d p + t`.
    pub fn unproject(&self, p: Vector2<f64>, depth: f64) -> Result<Vector3<f64>, GeometryError> {
        if depth <= 0.0 {
            return Err(GeometryError::NonPositiveDepth(depth));
        }
        if !self.intrinsics.contains(p) {
            return Err(GeometryError::OutOfBounds(
                p.x,
                p.y,
                self.intrinsics.width,
                self.intrinsics.height,
            ));
        }
        Ok(self.pose.camera_to_world(self.intrinsics.bearing(p) * depth))
    }

    /// Projects a world point to `(pixel, z-depth)`; the pixel may fall
    /// outside the image (callers bound-check where it matters).
    pub fn project(&self, point: Vector3<f64>) -> Result<(Vector2<f64>, f64), GeometryError> {
        let pc = self.pose.world_to_camera(point);
        if pc.z <= 0.0 {
            return Err(GeometryError::BehindCamera(pc.z));
        }
        let u = self.intrinsics.fx * pc.x / pc.z + self.intrinsics.cx;
        let v = self.intrinsics.fy * pc.y / pc.z + self.intrinsics.cy;
        Ok((Vector2::new(u, v), pc.z))
    }

    /// World-space viewing ray through pixel `p` (direction not normalized).
    pub fn ray(&self, p: Vector2<f64>) -> (Vector3<f64>, Vector3<f64>) {
        (self.pose.center(), self.pose.rotation * self.intrinsics.bearing(p))
    }
}

/// Per-pixel z-depth with validity. Invalid pixels carry no depth meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub validity: Vec<bool>,
}

impl DepthMap {
    pub fn new_invalid(width: usize, height: usize) -> Self {
        Self { width, height, values: vec![f64::NAN; width * height], validity: vec![false; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Option<f64>) -> Self {
        let mut m = Self::new_invalid(width, height);
        for y in 0..height {
            for x in 0..width {
                if let Some(d) = f(x, y) {
                    m.set(x, y, d);
                }
            }
        }
        m
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, values: vec![value; width * height], validity: vec![true; width * height] }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = self.idx(x, y);
        if self.validity[i] {
            Some(self.values[i])
        } else {
            None
        }
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        let i = self.idx(x, y);
        debug_assert!(value > 0.0 && value.is_finite(), "depth must be positive finite");
        self.values[i] = value;
        self.validity[i] = true;
    }

    #[inline]
    pub fn invalidate(&mut self, x: usize, y: usize) {
        let i = self.idx(x, y);
        self.values[i] = f64::NAN;
        self.validity[i] = false;
    }

    pub fn valid_count(&self) -> usize {
        self.validity.iter().filter(|&&v| v).count()
    }

    /// Bilinear sample at a continuous pixel position, interpolating in
    /// inverse depth (exact on planar surfaces). `None` if out of bounds or
    /// any stencil corner is invalid.
    pub fn sample_bilinear(&self, p: Vector2<f64>) -> Option<f64> {
        if !(p.x >= 0.0 && p.y >= 0.0) {
            return None;
        }
        let wm = (self.width - 1) as f64;
        let hm = (self.height - 1) as f64;
        if p.x > wm || p.y > hm {
            return None;
        }
        let x0 = (p.x.floor() as usize).min(self.width - 1);
        let y0 = (p.y.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = p.x - x0 as f64;
        let fy = p.y - y0 as f64;
        let d00 = self.get(x0, y0)?;
        let d10 = self.get(x1, y0)?;
        let d01 = self.get(x0, y1)?;
        let d11 = self.get(x1, y1)?;
        let inv = (1.0 / d00) * (1.0 - fx) * (1.0 - fy)
            + (1.0 / d10) * fx * (1.0 - fy)
            + (1.0 / d01) * (1.0 - fx) * fy
            + (1.0 / d11) * fx * fy;
        if inv <= 0.0 {
            return None;
        }
        Some(1.0 / inv)
    }

    pub fn median_valid(&self) -> Option<f64> {
        let mut vals: Vec<f64> = self
            .values
            .iter()
            .zip(&self.validity)
            .filter(|(_, &v)| v)
            .map(|(&d, _)| d)
            .collect();
        if vals.is_empty() {
            return None;
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Some(vals[vals.len() / 2])
    }
}

/// Unit surface normals in the camera frame; `n.z > 0` by construction.
#[derive(Debug, Clone)]
pub struct NormalMap {
    pub width: usize,
    pub height: usize,
    pub vectors: Vec<Vector3<f64>>,
    pub validity: Vec<bool>,
}

impl NormalMap {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<Vector3<f64>> {
        let i = y * self.width + x;
        if self.validity[i] {
            Some(self.vectors[i])
        } else {
            None
        }
    }
}

/// Depth of the common-perpendicular midpoint of the two viewing rays,
/// expressed as z in `cam_t`. The flag is false for near-parallel rays
/// (sine < 1e-3), coincident centers, or a midpoint behind either camera.
pub fn triangulate_midpoint(
    p_t: Vector2<f64>,
    p_t2: Vector2<f64>,
    cam_t: &Camera,
    cam_t2: &Camera,
) -> (f64, bool) {
    let (o1, d1) = cam_t.ray(p_t);
    let (o2, d2) = cam_t2.ray(p_t2);
    if (o2 - o1).norm() < 1e-12 {
        return (0.0, false);
    }
    let cross = d1.cross(&d2);
    let sin = cross.norm() / (d1.norm() * d2.norm());
    if sin < 1e-3 {
        return (0.0, false);
    }
    // [ d1.d1  -d1.d2 ] [s]   [ b.d1 ]
    // [ d1.d2  -d2.d2 ] [t] = [ b.d2 ]
    let b = o2 - o1;
    let a11 = d1.dot(&d1);
    let a12 = -d1.dot(&d2);
    let a21 = -a12;
    let a22 = -d2.dot(&d2);
    let r1 = b.dot(&d1);
    let r2 = b.dot(&d2);
    let det = a11 * a22 - a12 * a21;
    let s = (r1 * a22 - a12 * r2) / det;
    let t = (a11 * r2 - r1 * a21) / det;
    let midpoint = 0.5 * ((o1 + d1 * s) + (o2 + d2 * t));
    let z1 = cam_t.pose.world_to_camera(midpoint).z;
    let z2 = cam_t2.pose.world_to_camera(midpoint).z;
    (z1, z1 > 0.0 && z2 > 0.0)
}

/// Surface normal map `n = (-dz/dx, -dz/dy, 1) / |.|` from pixel-metric depth
/// gradients: central differences in the interior, one-sided at borders.
/// Pixels adjacent to invalid depth become invalid.
pub fn normal_map(depth: &DepthMap, _intr: &Intrinsics) -> Result<NormalMap, GeometryError> {
    let (w, h) = (depth.width, depth.height);
    let mut vectors = vec![Vector3::new(0.0, 0.0, 1.0); w * h];
    let mut validity = vec![false; w * h];
    let mut any = false;

    // Central difference in the interior, one-sided only at the image border;
    // a missing (invalid) neighbor invalidates the pixel.
    let grad = |lo: Option<f64>, c: f64, hi: Option<f64>, at_lo_border: bool, at_hi_border: bool| -> Option<f64> {
        match (lo, hi) {
            (Some(a), Some(b)) => Some((b - a) * 0.5),
            (None, Some(b)) if at_lo_border => Some(b - c),
            (Some(a), None) if at_hi_border => Some(c - a),
            _ => None,
        }
    };

    for y in 0..h {
        for x in 0..w {
            let Some(center) = depth.get(x, y) else { continue };
            let gx = grad(
                if x > 0 { depth.get(x - 1, y) } else { None },
                center,
                if x + 1 < w { depth.get(x + 1, y) } else { None },
                x == 0,
                x + 1 == w,
            );
            let gy = grad(
                if y > 0 { depth.get(x, y - 1) } else { None },
                center,
                if y + 1 < h { depth.get(x, y + 1) } else { None },
                y == 0,
                y + 1 == h,
            );
            if let (Some(gx), Some(gy)) = (gx, gy) {
                let n = Vector3::new(-gx, -gy, 1.0);
                let i = y * w + x;
                vectors[i] = n / n.norm();
                validity[i] = true;
                any = true;
            }
        }
    }
    if !any {
        return Err(GeometryError::EmptyDepthMap);
    }
    Ok(NormalMap { width: w, height: h, vectors, validity })
}

fn skew(v: Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Fundamental matrix mapping pixels of `cam_t` to epipolar lines in
/// `cam_t2`, normalized to unit Frobenius norm with a deterministic sign.
pub fn fundamental_from_cameras(cam_t: &Camera, cam_t2: &Camera) -> Result<Matrix3<f64>, GeometryError> {
    let r_rel = cam_t2.pose.rotation.transpose() * cam_t.pose.rotation;
    let t_rel = cam_t2.pose.rotation.transpose() * (cam_t.pose.center() - cam_t2.pose.center());
    if t_rel.norm() < 1e-12 {
        return Err(GeometryError::CoincidentCenters);
    }
    let essential = skew(t_rel) * r_rel;
    let f = cam_t2.intrinsics.inverse_matrix().transpose() * essential * cam_t.intrinsics.inverse_matrix();
    let mut f = f / f.norm();
    let mut pivot = 0.0f64;
    for v in f.iter() {
        if v.abs() > pivot.abs() {
            pivot = *v;
        }
    }
    if pivot < 0.0 {
        f = -f;
    }
    Ok(f)
}

/// First-order epipolar residual of a correspondence. Returns `+inf` when
/// the gradient denominator vanishes.
pub fn sampson_error(p: Vector2<f64>, p2: Vector2<f64>, f: &Matrix3<f64>) -> f64 {
    let ph = Vector3::new(p.x, p.y, 1.0);
    let p2h = Vector3::new(p2.x, p2.y, 1.0);
    let fp = f * ph;
    let ftp2 = f.transpose() * p2h;
    let num = p2h.dot(&fp);
    let den = fp.x * fp.x + fp.y * fp.y + ftp2.x * ftp2.x + ftp2.y * ftp2.y;
    if den == 0.0 {
        return f64::INFINITY;
    }
    num * num / den
}
