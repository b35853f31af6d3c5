//! Analytic dynamic-scene generator: textured planes and rigidly moving
//! primitives ray-cast into mutually consistent RGB, depth, optic flow,
//! scene flow, segmentation and camera channels. Stands in for the
//! pretrained perception networks real captures would require, and produces
//! controlled corruptions for negative tests.

mod corrupt;
mod texture;

pub use corrupt::{corrupt_depth, corrupt_flow};
pub use texture::{fbm, surface_color, value_noise};

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{Camera, DepthMap, Intrinsics, Pose};
use crate::image::RgbImage;
use crate::masking::{FlowField, Segmentation};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("object {object} behind camera at frame {frame}")]
    BehindCamera { object: usize, frame: usize },
    #[error("scale must be positive, got {0}")]
    NonPositiveScale(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Finite textured patch `origin + s*edge_u + t*edge_v`, `s, t` in `[0,1]`.
    Rect { origin: Vector3<f64>, edge_u: Vector3<f64>, edge_v: Vector3<f64> },
    Sphere { center: Vector3<f64>, radius: f64 },
    /// Axis-aligned box.
    Cuboid { min: Vector3<f64>, max: Vector3<f64> },
}

impl Shape {
    fn reference_point(&self) -> Vector3<f64> {
        match *self {
            Shape::Rect { origin, edge_u, edge_v } => origin + 0.5 * edge_u + 0.5 * edge_v,
            Shape::Sphere { center, .. } => center,
            Shape::Cuboid { min, max } => 0.5 * (min + max),
        }
    }

    /// Nearest intersection with a ray, returning the ray parameter and the
    /// outward surface normal. The ray direction need not be unit length.
    fn intersect(&self, origin: Vector3<f64>, dir: Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        match *self {
            Shape::Rect { origin: o, edge_u, edge_v } => {
                let n = edge_u.cross(&edge_v);
                let denom = dir.dot(&n);
                if denom.abs() < 1e-15 {
                    return None;
                }
                let t = (o - origin).dot(&n) / denom;
                if t <= 1e-9 {
                    return None;
                }
                let hit = origin + dir * t - o;
                let uu = edge_u.dot(&edge_u);
                let vv = edge_v.dot(&edge_v);
                let uv = edge_u.dot(&edge_v);
                let hu = hit.dot(&edge_u);
                let hv = hit.dot(&edge_v);
                let det = uu * vv - uv * uv;
                let s = (hu * vv - hv * uv) / det;
                let w = (hv * uu - hu * uv) / det;
                if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&w) {
                    return None;
                }
                let normal = if denom < 0.0 { n.normalize() } else { -n.normalize() };
                Some((t, normal))
            }
            Shape::Sphere { center, radius } => {
                let oc = origin - center;
                let a = dir.dot(&dir);
                let b = 2.0 * oc.dot(&dir);
                let c = oc.dot(&oc) - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t0 = (-b - sq) / (2.0 * a);
                let t1 = (-b + sq) / (2.0 * a);
                let t = if t0 > 1e-9 { t0 } else if t1 > 1e-9 { t1 } else { return None };
                let normal = (origin + dir * t - center).normalize();
                Some((t, normal))
            }
            Shape::Cuboid { min, max } => {
                let mut t_enter = f64::NEG_INFINITY;
                let mut t_exit = f64::INFINITY;
                let mut axis_enter = 0;
                for a in 0..3 {
                    if dir[a].abs() < 1e-15 {
                        if origin[a] < min[a] || origin[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let mut t0 = (min[a] - origin[a]) / dir[a];
                    let mut t1 = (max[a] - origin[a]) / dir[a];
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                    }
                    if t0 > t_enter {
                        t_enter = t0;
                        axis_enter = a;
                    }
                    t_exit = t_exit.min(t1);
                }
                if t_enter > t_exit || t_enter <= 1e-9 {
                    return None;
                }
                let mut normal = Vector3::zeros();
                normal[axis_enter] = -dir[axis_enter].signum();
                Some((t_enter, normal))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Trajectory {
    Static,
    ConstantVelocity { velocity: Vector3<f64> },
    /// Rigid translation along a parameterized circle.
    Circle { axis_a: Vector3<f64>, axis_b: Vector3<f64>, omega: f64 },
}

impl Trajectory {
    /// Displacement from the base placement at (fractional) frame time `t`.
    pub fn offset(&self, t: f64) -> Vector3<f64> {
        match *self {
            Trajectory::Static => Vector3::zeros(),
            Trajectory::ConstantVelocity { velocity } => velocity * t,
            Trajectory::Circle { axis_a, axis_b, omega } => {
                axis_a * ((omega * t).cos() - 1.0) + axis_b * (omega * t).sin()
            }
        }
    }

    pub fn is_static(&self) -> bool {
        matches!(self, Trajectory::Static)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SurfaceStyle {
    pub base_color: [f64; 3],
    pub texture_scale: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SceneObject {
    pub shape: Shape,
    pub trajectory: Trajectory,
    pub style: SurfaceStyle,
}

/// Camera path of the capture trajectory.
#[derive(Debug, Clone, Copy)]
pub enum CameraPath {
    /// Pure translation, rotation fixed at identity.
    Translate { start: Vector3<f64>, step: Vector3<f64> },
    /// Eyes on a line, each looking at a fixed target (orbit-like arc).
    LookAtLine { start: Vector3<f64>, step: Vector3<f64>, target: Vector3<f64> },
}

impl CameraPath {
    fn pose(&self, t: f64) -> Pose {
        match *self {
            CameraPath::Translate { start, step } => Pose { rotation: nalgebra::Matrix3::identity(), translation: start + step * t },
            CameraPath::LookAtLine { start, step, target } => {
                Pose::look_at(start + step * t, target, Vector3::new(0.0, 1.0, 0.0))
            }
        }
    }
}

/// Complete description of a synthetic capture: geometry, motion, cameras,
/// resolution and seed.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub fx: f64,
    pub fy: f64,
    pub objects: Vec<SceneObject>,
    pub camera_path: CameraPath,
    /// Held-out query view: frame index plus eye offset from that frame's
    /// capture camera (same look direction for translate paths).
    pub query_frame: usize,
    pub query_offset: Vector3<f64>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::new(
            self.fx,
            self.fy,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
            self.width,
            self.height,
        )
    }

    pub fn camera(&self, frame: usize) -> Camera {
        Camera::new(self.intrinsics(), self.camera_path.pose(frame as f64), frame, "c")
    }

    pub fn query_camera(&self) -> Camera {
        let base = self.camera_path.pose(self.query_frame as f64);
        let pose = match self.camera_path {
            CameraPath::Translate { .. } => Pose { rotation: base.rotation, translation: base.translation + self.query_offset },
            CameraPath::LookAtLine { target, .. } => {
                Pose::look_at(base.translation + self.query_offset, target, Vector3::new(0.0, 1.0, 0.0))
            }
        };
        Camera::new(self.intrinsics(), pose, self.query_frame, "q")
    }

    /// Default desk-scale capture: a moving textured sphere over a ground
    /// plane with a back wall, twelve frames, camera arcing with baseline.
    pub fn desk_default(seed: u64) -> Self {
        SceneSpec {
            width: 160,
            height: 120,
            frames: 12,
            fx: 150.0,
            fy: 150.0,
            objects: vec![
                SceneObject {
                    // ground plane
                    shape: Shape::Rect {
                        origin: Vector3::new(-4.0, -0.8, 1.2),
                        edge_u: Vector3::new(8.0, 0.0, 0.0),
                        edge_v: Vector3::new(0.0, 0.0, 4.85),
                    },
                    trajectory: Trajectory::Static,
                    style: SurfaceStyle { base_color: [0.85, 0.7, 0.5], texture_scale: 2.1 },
                },
                SceneObject {
                    // back wall
                    shape: Shape::Rect {
                        origin: Vector3::new(-5.0, -3.0, 6.0),
                        edge_u: Vector3::new(10.0, 0.0, 0.0),
                        edge_v: Vector3::new(0.0, 8.0, 0.0),
                    },
                    trajectory: Trajectory::Static,
                    style: SurfaceStyle { base_color: [0.55, 0.68, 0.9], texture_scale: 1.7 },
                },
                SceneObject {
                    shape: Shape::Sphere { center: Vector3::new(-0.45, -0.25, 2.6), radius: 0.75 },
                    trajectory: Trajectory::ConstantVelocity { velocity: Vector3::new(0.085, 0.03, 0.0) },
                    style: SurfaceStyle { base_color: [0.9, 0.45, 0.4], texture_scale: 3.2 },
                },
            ],
            camera_path: CameraPath::LookAtLine {
                start: Vector3::new(-0.66, 0.0, 0.0),
                step: Vector3::new(0.12, 0.0, 0.0),
                target: Vector3::new(0.0, -0.15, 3.4),
            },
            query_frame: 5,
            query_offset: Vector3::new(0.06, 0.22, 0.0),
            seed,
        }
    }

    /// All-planar variant (slanted floor, fronto-parallel wall, moving box):
    /// every surface is exactly planar, so grid-sampled depth and flow are
    /// interpolation-exact and cross-channel identities hold to 1e-9.
    pub fn planar(seed: u64) -> Self {
        SceneSpec {
            width: 160,
            height: 120,
            frames: 12,
            fx: 150.0,
            fy: 150.0,
            objects: vec![
                SceneObject {
                    // slanted floor
                    shape: Shape::Rect {
                        origin: Vector3::new(-4.0, -0.75, 1.2),
                        edge_u: Vector3::new(8.0, 0.0, 0.0),
                        edge_v: Vector3::new(0.0, -0.35, 4.4),
                    },
                    trajectory: Trajectory::Static,
                    style: SurfaceStyle { base_color: [0.8, 0.72, 0.5], texture_scale: 2.0 },
                },
                SceneObject {
                    shape: Shape::Rect {
                        origin: Vector3::new(-5.0, -3.2, 5.6),
                        edge_u: Vector3::new(10.0, 0.0, 0.0),
                        edge_v: Vector3::new(0.0, 8.0, 0.0),
                    },
                    trajectory: Trajectory::Static,
                    style: SurfaceStyle { base_color: [0.5, 0.66, 0.88], texture_scale: 1.6 },
                },
                SceneObject {
                    shape: Shape::Cuboid {
                        min: Vector3::new(-0.95, -0.55, 2.4),
                        max: Vector3::new(-0.1, 0.12, 3.0),
                    },
                    trajectory: Trajectory::ConstantVelocity { velocity: Vector3::new(0.07, 0.045, 0.0) },
                    style: SurfaceStyle { base_color: [0.88, 0.5, 0.42], texture_scale: 2.8 },
                },
            ],
            camera_path: CameraPath::Translate {
                start: Vector3::new(-0.66, 0.05, 0.0),
                step: Vector3::new(0.12, 0.0, 0.0),
            },
            query_frame: 5,
            query_offset: Vector3::new(0.06, 0.2, 0.0),
            seed,
        }
    }

    /// Static variant of the desk scene (sphere parked).
    pub fn static_scene(seed: u64) -> Self {
        let mut spec = Self::desk_default(seed);
        for obj in &mut spec.objects {
            obj.trajectory = Trajectory::Static;
        }
        spec
    }

    /// Narrow-field close-up of a large translating ball; curvature per pixel
    /// is tiny, so even grid-interpolated identities hold to 1e-6.
    pub fn zoom_ball(seed: u64) -> Self {
        SceneSpec {
            width: 120,
            height: 100,
            frames: 8,
            fx: 1500.0,
            fy: 1500.0,
            objects: vec![
                SceneObject {
                    shape: Shape::Rect {
                        origin: Vector3::new(-6.0, -4.0, 7.0),
                        edge_u: Vector3::new(12.0, 0.0, 0.0),
                        edge_v: Vector3::new(0.0, 8.0, 0.0),
                    },
                    trajectory: Trajectory::Static,
                    style: SurfaceStyle { base_color: [0.6, 0.6, 0.75], texture_scale: 1.5 },
                },
                SceneObject {
                    shape: Shape::Sphere { center: Vector3::new(0.0, 0.0, 3.0), radius: 1.5 },
                    trajectory: Trajectory::ConstantVelocity { velocity: Vector3::new(0.1, 0.0, 0.0) },
                    style: SurfaceStyle { base_color: [0.85, 0.5, 0.4], texture_scale: 2.5 },
                },
            ],
            camera_path: CameraPath::Translate {
                start: Vector3::new(-0.28, 0.0, 0.0),
                step: Vector3::new(0.08, 0.0, 0.0),
            },
            query_frame: 3,
            query_offset: Vector3::new(0.04, 0.1, 0.0),
            seed,
        }
    }
}

/// One rendered frame plus the per-pixel hit records every derived channel
/// is computed from.
#[derive(Debug, Clone)]
pub struct OracleFrame {
    pub camera: Camera,
    pub image: RgbImage,
    pub depth: DepthMap,
    /// Index into `SceneSpec::objects`, -1 where no surface was hit.
    pub hit_object: Vec<i32>,
    /// Hit point in object-local coordinates (world minus trajectory offset).
    pub hit_local: Vec<Vector3<f64>>,
    /// Analytic outward surface normal (world frame).
    pub hit_normal: Vec<Vector3<f64>>,
}

/// Fully consistent synthetic capture: frames, a held-out query view, and
/// analytic accessors for flow, scene flow, occlusion and segmentation.
#[derive(Debug, Clone)]
pub struct OracleBundle {
    pub spec: SceneSpec,
    pub frames: Vec<OracleFrame>,
    pub query_camera: Camera,
    pub query_image: RgbImage,
    pub query_depth: DepthMap,
}

/// Continuous-position hit test used for analytic round trips.
fn cast(spec: &SceneSpec, origin: Vector3<f64>, dir: Vector3<f64>, time: f64) -> Option<(usize, f64, Vector3<f64>)> {
    let mut best: Option<(usize, f64, Vector3<f64>)> = None;
    for (i, obj) in spec.objects.iter().enumerate() {
        let ofs = obj.trajectory.offset(time);
        if let Some((t, n)) = obj.shape.intersect(origin - ofs, dir) {
            if best.map_or(true, |(_, bt, _)| t < bt) {
                best = Some((i, t, n));
            }
        }
    }
    best
}

fn render_view(spec: &SceneSpec, camera: &Camera, time: f64) -> OracleFrame {
    let (w, h) = (spec.width, spec.height);
    let rows: Vec<_> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut img_row = vec![[0.0f32; 3]; w];
            let mut depth_row = vec![f64::NAN; w];
            let mut obj_row = vec![-1i32; w];
            let mut local_row = vec![Vector3::zeros(); w];
            let mut normal_row = vec![Vector3::zeros(); w];
            for x in 0..w {
                let p = Vector2::new(x as f64, y as f64);
                // direction with unit camera-frame z: ray parameter == z-depth
                let (o, d) = camera.ray(p);
                if let Some((i, t, n)) = cast(spec, o, d, time) {
                    let obj = &spec.objects[i];
                    let world = o + d * t;
                    let local = world - obj.trajectory.offset(time);
                    img_row[x] = surface_color(
                        local,
                        obj.style.base_color,
                        obj.style.texture_scale,
                        spec.seed ^ (i as u64).wrapping_mul(0xd134_2543_de82_ef95),
                    );
                    depth_row[x] = t;
                    obj_row[x] = i as i32;
                    local_row[x] = local;
                    normal_row[x] = n;
                }
            }
            (img_row, depth_row, obj_row, local_row, normal_row)
        })
        .collect();

    let mut image = RgbImage::new(w, h);
    let mut depth = DepthMap::new_invalid(w, h);
    let mut hit_object = vec![-1i32; w * h];
    let mut hit_local = vec![Vector3::zeros(); w * h];
    let mut hit_normal = vec![Vector3::zeros(); w * h];
    for (y, (img_row, depth_row, obj_row, local_row, normal_row)) in rows.into_iter().enumerate() {
        for x in 0..w {
            image.set(x, y, img_row[x]);
            if depth_row[x].is_finite() {
                depth.set(x, y, depth_row[x]);
            }
            hit_object[y * w + x] = obj_row[x];
            hit_local[y * w + x] = local_row[x];
            hit_normal[y * w + x] = normal_row[x];
        }
    }
    OracleFrame { camera: camera.clone(), image, depth, hit_object, hit_local, hit_normal }
}

/// Ray-casts every capture frame and the query view. Deterministic given the
/// spec (including its seed).
pub fn generate(spec: &SceneSpec) -> Result<OracleBundle, OracleError> {
    if spec.frames < 2 {
        return Err(OracleError::InvalidSpec("need at least 2 frames".into()));
    }
    if spec.query_frame >= spec.frames {
        return Err(OracleError::InvalidSpec("query frame out of range".into()));
    }
    // Every object must stay in front of every camera (and the query view).
    let mut cams: Vec<Camera> = (0..spec.frames).map(|t| spec.camera(t)).collect();
    cams.push(spec.query_camera());
    for (frame, cam) in cams.iter().enumerate() {
        for (i, obj) in spec.objects.iter().enumerate() {
            let time = cam.frame_index as f64;
            let p = obj.shape.reference_point() + obj.trajectory.offset(time);
            if cam.pose.world_to_camera(p).z <= 0.0 {
                return Err(OracleError::BehindCamera { object: i, frame: frame.min(spec.frames - 1) });
            }
        }
    }

    let frames: Vec<OracleFrame> = (0..spec.frames)
        .map(|t| render_view(spec, &spec.camera(t), t as f64))
        .collect();
    let qcam = spec.query_camera();
    let qframe = render_view(spec, &qcam, spec.query_frame as f64);
    Ok(OracleBundle {
        spec: spec.clone(),
        frames,
        query_camera: qcam,
        query_image: qframe.image,
        query_depth: qframe.depth,
    })
}

impl OracleBundle {
    pub fn camera(&self, t: usize) -> &Camera {
        &self.frames[t].camera
    }

    /// World position of the surface point seen at integer pixel `(x, y)` of
    /// frame `t`, displaced to (fractional) time `time`.
    pub fn moved_point(&self, t: usize, x: usize, y: usize, time: f64) -> Option<Vector3<f64>> {
        let f = &self.frames[t];
        let i = y * f.depth.width + x;
        let obj = f.hit_object[i];
        if obj < 0 {
            return None;
        }
        Some(f.hit_local[i] + self.spec.objects[obj as usize].trajectory.offset(time))
    }

    /// Exact optic flow from frame `t` to frame `t + k`. Invalid where the
    /// moved point falls behind the destination camera.
    pub fn flow(&self, t: usize, k: i32) -> FlowField {
        let t2 = (t as i64 + k as i64) as usize;
        let f = &self.frames[t];
        let cam2 = &self.frames[t2].camera;
        let (w, h) = (f.depth.width, f.depth.height);
        FlowField::from_fn(w, h, |x, y| {
            let moved = self.moved_point(t, x, y, t2 as f64)?;
            let (p2, _) = cam2.project(moved).ok()?;
            Some([p2.x - x as f64, p2.y - y as f64])
        })
    }

    /// Exact 3D scene flow from frame `t` to `t + k` per pixel.
    pub fn scene_flow(&self, t: usize, k: i32) -> Vec<Option<Vector3<f64>>> {
        let t2 = t as i64 + k as i64;
        let f = &self.frames[t];
        let (w, h) = (f.depth.width, f.depth.height);
        let mut out = vec![None; w * h];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let obj = f.hit_object[i];
                if obj < 0 {
                    continue;
                }
                let traj = &self.spec.objects[obj as usize].trajectory;
                out[i] = Some(traj.offset(t2 as f64) - traj.offset(t as f64));
            }
        }
        out
    }

    /// Analytic flow round-trip residual in pixels: forward to the landing
    /// position, then the *analytic* backward flow of the surface visible
    /// there. Zero (to rounding) exactly when the forward correspondence is
    /// unoccluded; `None` when the forward flow itself is undefined or the
    /// landing leaves the destination raster.
    pub fn roundtrip_residual(&self, t: usize, k: i32, x: usize, y: usize) -> Option<f64> {
        let t2 = (t as i64 + k as i64) as usize;
        let cam2 = &self.frames[t2].camera;
        let moved = self.moved_point(t, x, y, t2 as f64)?;
        let (p2, _) = cam2.project(moved).ok()?;
        if !cam2.intrinsics.contains(p2) {
            return None;
        }
        // Surface actually visible at the landing position in frame t2.
        let (o, d) = cam2.ray(p2);
        let (obj, hit_t, _) = cast(&self.spec, o, d, t2 as f64)?;
        let traj = &self.spec.objects[obj].trajectory;
        let local = (o + d * hit_t) - traj.offset(t2 as f64);
        let back = local + traj.offset(t as f64);
        let (p_back, _) = self.frames[t].camera.project(back).ok()?;
        Some((p_back - Vector2::new(x as f64, y as f64)).norm())
    }

    /// Pixels of frame `t` whose correspondence in `t + k` is occluded,
    /// off-raster, or undefined. Defined as analytic round trip > 1e-6 px.
    pub fn occlusion(&self, t: usize, k: i32) -> Vec<bool> {
        let f = &self.frames[t];
        let (w, h) = (f.depth.width, f.depth.height);
        let mut out = vec![true; w * h];
        for y in 0..h {
            for x in 0..w {
                if let Some(r) = self.roundtrip_residual(t, k, x, y) {
                    out[y * w + x] = r > 1e-6;
                }
            }
        }
        out
    }

    /// Dynamic-object footprint of frame `t` (true = dynamic).
    pub fn segmentation(&self, t: usize) -> Segmentation {
        let f = &self.frames[t];
        let bits = f
            .hit_object
            .iter()
            .map(|&o| o >= 0 && !self.spec.objects[o as usize].trajectory.is_static())
            .collect();
        Segmentation { width: f.depth.width, height: f.depth.height, bits }
    }

    /// Pixels adjacent to an analytic geometric edge: object-id change,
    /// normal crease, or a relative depth jump.
    pub fn geometric_edges(&self, t: usize) -> Vec<bool> {
        let f = &self.frames[t];
        let (w, h) = (f.depth.width, f.depth.height);
        let mut out = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let here_obj = f.hit_object[i];
                let here_d = f.depth.values[i];
                let here_n = f.hit_normal[i];
                let mut edge = false;
                for (dx, dy) in [(1i32, 0i32), (0, 1), (-1, 0), (0, -1)] {
                    let nx = x as i32 + dx;
                    let ny = y as i32 + dy;
                    if nx < 0 || ny < 0 || nx >= w as i32 || ny >= h as i32 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if f.hit_object[j] != here_obj {
                        edge = true;
                        break;
                    }
                    if here_d.is_finite() && f.depth.values[j].is_finite() {
                        let rel = (f.depth.values[j] - here_d).abs() / here_d.max(1e-9);
                        if rel > 0.02 {
                            edge = true;
                            break;
                        }
                    }
                    if here_n.dot(&f.hit_normal[j]) < (10.0f64).to_radians().cos() {
                        edge = true;
                        break;
                    }
                }
                out[i] = edge;
            }
        }
        out
    }

    /// True depth-discontinuity pixels only (no creases): object-id change or
    /// a relative depth jump against a 4-neighbor.
    pub fn depth_discontinuities(&self, t: usize) -> Vec<bool> {
        let f = &self.frames[t];
        let (w, h) = (f.depth.width, f.depth.height);
        let mut out = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let here_obj = f.hit_object[i];
                let here_d = f.depth.values[i];
                for (dx, dy) in [(1i32, 0i32), (0, 1), (-1, 0), (0, -1)] {
                    let nx = x as i32 + dx;
                    let ny = y as i32 + dy;
                    if nx < 0 || ny < 0 || nx >= w as i32 || ny >= h as i32 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    let rel_jump = here_d.is_finite()
                        && f.depth.values[j].is_finite()
                        && (f.depth.values[j] - here_d).abs() / here_d.max(1e-9) > 0.05;
                    if f.hit_object[j] != here_obj || rel_jump {
                        out[i] = true;
                        break;
                    }
                }
            }
        }
        out
    }

    /// Support set on which the grid-sampled 3D correspondence identity is
    /// exact: unoccluded, landing in bounds, and the landing's bilinear cell
    /// lying on a single surface.
    pub fn grid_exact_support(&self, t: usize, k: i32) -> Vec<bool> {
        let t2 = (t as i64 + k as i64) as usize;
        let f = &self.frames[t];
        let f2 = &self.frames[t2];
        let (w, h) = (f.depth.width, f.depth.height);
        let mut out = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let Some(r) = self.roundtrip_residual(t, k, x, y) else { continue };
                if r > 1e-6 {
                    continue;
                }
                let Some(moved) = self.moved_point(t, x, y, t2 as f64) else { continue };
                let Ok((p2, _)) = f2.camera.project(moved) else { continue };
                if !f2.camera.intrinsics.contains(p2) {
                    continue;
                }
                let x0 = p2.x.floor().max(0.0) as usize;
                let y0 = p2.y.floor().max(0.0) as usize;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let o = f2.hit_object[y0 * w + x0];
                let same = o >= 0
                    && f2.hit_object[y0 * w + x1] == o
                    && f2.hit_object[y1 * w + x0] == o
                    && f2.hit_object[y1 * w + x1] == o;
                out[y * w + x] = same;
            }
        }
        out
    }

    /// Ground-truth training frames for the scene-flow stage: exact depth,
    /// exact flows to every in-range neighbor within `k_max`, and masks
    /// derived from the analytic occlusion/edge/segmentation channels.
    pub fn ground_truth_scene_flow_frames(&self, k_max: usize) -> Vec<crate::scene_flow::SceneFlowFrame> {
        use crate::masking::{MaskImage, MaskKind};
        let t_count = self.frames.len();
        let (w, h) = (self.spec.width, self.spec.height);
        (0..t_count)
            .map(|t| {
                let mut flows = Vec::new();
                let mut mc = Vec::new();
                let mut md = Vec::new();
                for k in (1..=k_max as i32).flat_map(|k| [k, -k]) {
                    let t2 = t as i64 + k as i64;
                    if t2 < 0 || t2 >= t_count as i64 {
                        continue;
                    }
                    flows.push((k, self.flow(t, k)));
                    let occ = self.occlusion(t, k);
                    mc.push((k, MaskImage::from_bits(w, h, occ.iter().map(|o| !o).collect(), MaskKind::Correspondence)));
                    let seg = self.segmentation(t);
                    md.push((k, MaskImage::from_bits(w, h, seg.bits.iter().map(|d| !d).collect(), MaskKind::DynamicStatic)));
                }
                let edges = self.geometric_edges(t);
                let mg = MaskImage::from_bits(w, h, edges.iter().map(|e| !e).collect(), MaskKind::Geometric);
                crate::scene_flow::SceneFlowFrame {
                    camera: self.frames[t].camera.clone(),
                    depth: self.frames[t].depth.clone(),
                    flows,
                    mc,
                    mg,
                    md,
                }
            })
            .collect()
    }

    /// Random on-surface points of frame `t` (cast at subpixel positions),
    /// restricted to dynamic objects when `dynamic_only`.
    pub fn sample_surface_points(
        &self,
        t: usize,
        n: usize,
        dynamic_only: bool,
        seed: u64,
    ) -> Vec<Vector3<f64>> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let cam = &self.frames[t].camera;
        let (w, h) = (self.spec.width, self.spec.height);
        let mut points = Vec::with_capacity(n);
        let mut guard = 0;
        while points.len() < n && guard < n * 1000 {
            guard += 1;
            let p = Vector2::new(rng.gen_range(0.0..(w - 1) as f64), rng.gen_range(0.0..(h - 1) as f64));
            let (o, d) = cam.ray(p);
            if let Some((i, hit_t, _)) = cast(&self.spec, o, d, t as f64) {
                let dynamic = !self.spec.objects[i].trajectory.is_static();
                if dynamic_only && !dynamic {
                    continue;
                }
                points.push(o + d * hit_t);
            }
        }
        points
    }
}
