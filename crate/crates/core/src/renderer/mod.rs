//! Point-based volume rendering: query points shaded from neighboring neural
//! points through feature/density/color subnetworks with inverse-distance ×
//! confidence weighting, composited along rays by exponential transmittance.

mod splat;
pub mod train;

pub use splat::splat_image;
pub use train::{train_renderer, RenderTrainConfig, RenderTrainLogEntry};

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{Camera, DepthMap};
use crate::image::RgbImage;
use crate::nn::{Activation, EncodingConfig, Mat, MlpCache, MlpParams};
use crate::points::{NeuralPointCloud, FEATURE_DIM};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("ray bounds invalid: near {near} >= far {far}")]
    InvalidBounds { near: f64, far: f64 },
    #[error("cloud is empty")]
    EmptyCloud,
    #[error("missing cloud for frame {0}")]
    MissingCloud(usize),
}

/// The three shading subnetworks plus input encodings.
#[derive(Debug, Clone)]
pub struct RenderNet {
    pub feature_net: MlpParams,
    pub density_net: MlpParams,
    pub color_net: MlpParams,
    pub offset_encoding: EncodingConfig,
    pub dir_encoding: EncodingConfig,
    pub feature_width: usize,
}

impl RenderNet {
    /// Three fully connected layers per subnet at the given hidden width.
    pub fn init(hidden: usize, seed: u64) -> Self {
        let offset_encoding = EncodingConfig::new(4, true);
        let dir_encoding = EncodingConfig::new(4, true);
        let feat_in = FEATURE_DIM + offset_encoding.output_width(3);
        let color_in = hidden + dir_encoding.output_width(3);
        let relu2 = [Activation::Relu, Activation::Relu, Activation::None];
        RenderNet {
            feature_net: MlpParams::init(&[feat_in, hidden, hidden, hidden], &relu2, seed ^ 0x00f1),
            density_net: MlpParams::init(&[hidden, hidden, hidden, 1], &relu2, seed ^ 0x00f2),
            color_net: MlpParams::init(&[color_in, hidden, hidden, 3], &relu2, seed ^ 0x00f3),
            offset_encoding,
            dir_encoding,
            feature_width: hidden,
        }
    }

    pub fn param_count(&self) -> usize {
        self.feature_net.param_count() + self.density_net.param_count() + self.color_net.param_count()
    }
}

/// Shaded density and color at one query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShadingResult {
    pub sigma: f64,
    pub color: [f64; 3],
    pub neighbors_used: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct RenderConfig {
    pub samples_per_ray: usize,
    pub background: [f64; 3],
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { samples_per_ray: 64, background: [0.0; 3] }
    }
}

pub const DIST_FLOOR: f64 = 1e-6;

/// Confidence-over-distance weights, normalized to sum one.
pub fn inverse_distance_weights(confidences: &[f64], distances: &[f64]) -> Vec<f64> {
    debug_assert_eq!(confidences.len(), distances.len());
    let raw: Vec<f64> = confidences
        .iter()
        .zip(distances)
        .map(|(&g, &d)| g / (d + DIST_FLOOR))
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|u| u / total).collect()
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Exponential-transmittance compositing of ordered samples
/// `(depth, sigma, rgb)`; the residual transmittance takes the background
/// color and the `far` depth. Returns `(color, depth, weight sum)`.
pub fn composite(
    samples: &[(f64, f64, [f64; 3])],
    far: f64,
    background: [f64; 3],
) -> ([f64; 3], f64, f64) {
    let mut transmittance = 1.0;
    let mut color = [0.0f64; 3];
    let mut depth = 0.0;
    let mut wsum = 0.0;
    for (j, &(z, sigma, rgb)) in samples.iter().enumerate() {
        let delta = if j + 1 < samples.len() { samples[j + 1].0 - z } else { far - z };
        let att = (-sigma * delta).exp();
        let alpha = 1.0 - att;
        let w = transmittance * alpha;
        for c in 0..3 {
            color[c] += w * rgb[c];
        }
        depth += w * z;
        wsum += w;
        transmittance *= att;
    }
    for c in 0..3 {
        color[c] += transmittance * background[c];
    }
    depth += transmittance * far;
    (color, depth, wsum)
}

/// One ray prepared for evaluation.
#[derive(Debug, Clone)]
pub struct RaySpec {
    pub origin: Vector3<f64>,
    /// Unit direction.
    pub direction: Vector3<f64>,
    pub near: f64,
    pub far: f64,
    /// Stratification jitter, one uniform in [0,1) per sample.
    pub jitter: Vec<f64>,
    /// Supervision color when training.
    pub target: Option<[f32; 3]>,
}

/// A batch of rays sharing the sample count; mirrors what the renderer
/// consumes during training and evaluation.
#[derive(Debug, Clone, Default)]
pub struct RayBatch {
    pub rays: Vec<RaySpec>,
    pub samples_per_ray: usize,
}

/// Cached forward evaluation of a ray batch against one cloud; everything
/// the training backward pass needs.
pub struct ForwardPass {
    pub n_rays: usize,
    pub n_samples: usize,
    /// t parameter per (ray, sample), row-major.
    pub t_values: Vec<f64>,
    /// occupied-slot id per (ray, sample); u32::MAX marks empty space.
    pub slot_of: Vec<u32>,
    /// per occupied slot: range into the occurrence arrays.
    pub slot_ranges: Vec<(u32, u32)>,
    /// per occurrence: cloud point index, normalized weight, raw weight sum share
    pub occ_point: Vec<u32>,
    pub occ_weight: Vec<f64>,
    pub occ_dist: Vec<f64>,
    pub feat_out: Mat,
    pub feat_cache: MlpCache,
    pub dens_out: Mat,
    pub dens_cache: MlpCache,
    pub color_cache: MlpCache,
    pub sigma_raw: Vec<f64>,
    pub sigma: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    pub fbar: Mat,
    pub ray_color: Vec<[f64; 3]>,
    pub ray_depth: Vec<f64>,
    pub ray_wsum: Vec<f64>,
}

fn encode_offset(net: &RenderNet, offset: Vector3<f64>, radius: f64, out: &mut [f64]) {
    // offsets expressed in units of the query radius so the encoding sees
    // O(1) coordinates
    let scaled = [offset.x / radius, offset.y / radius, offset.z / radius];
    net.offset_encoding.encode_into(&scaled, out);
}

/// Full cached evaluation of a ray batch. Occupied samples run through the
/// subnetworks as one batched matrix per net.
pub fn eval_rays(
    cloud: &NeuralPointCloud,
    net: &RenderNet,
    batch: &RayBatch,
    background: [f64; 3],
) -> Result<ForwardPass, RenderError> {
    if cloud.is_empty() {
        return Err(RenderError::EmptyCloud);
    }
    let n_rays = batch.rays.len();
    let n = batch.samples_per_ray;
    let mut t_values = vec![0.0f64; n_rays * n];
    let mut slot_of = vec![u32::MAX; n_rays * n];
    let mut slot_ranges: Vec<(u32, u32)> = Vec::new();
    let mut occ_point: Vec<u32> = Vec::new();
    let mut occ_weight: Vec<f64> = Vec::new();
    let mut occ_dist: Vec<f64> = Vec::new();
    let mut slot_ray_dir: Vec<(u32, Vector3<f64>)> = Vec::new();
    let mut slot_query: Vec<Vector3<f64>> = Vec::new();

    for (ri, ray) in batch.rays.iter().enumerate() {
        if !(ray.near < ray.far) {
            return Err(RenderError::InvalidBounds { near: ray.near, far: ray.far });
        }
        debug_assert_eq!(ray.jitter.len(), n);
        let span = ray.far - ray.near;
        for j in 0..n {
            let t = ray.near + span * ((j as f64 + ray.jitter[j]) / n as f64);
            t_values[ri * n + j] = t;
            let q = ray.origin + ray.direction * t;
            let neighbors = cloud.radius_query(q);
            if neighbors.is_empty() {
                continue;
            }
            let start = occ_point.len() as u32;
            let gammas: Vec<f64> =
                neighbors.iter().map(|&(i, _)| sigmoid(cloud.points[i as usize].confidence_logit)).collect();
            let dists: Vec<f64> = neighbors.iter().map(|&(_, d)| d).collect();
            let weights = inverse_distance_weights(&gammas, &dists);
            for (k, &(pi, d)) in neighbors.iter().enumerate() {
                occ_point.push(pi);
                occ_weight.push(weights[k]);
                occ_dist.push(d);
            }
            slot_of[ri * n + j] = slot_ranges.len() as u32;
            slot_ranges.push((start, occ_point.len() as u32));
            slot_ray_dir.push((ri as u32, ray.direction));
            slot_query.push(q);
        }
    }

    let n_occ = occ_point.len();
    let n_slots = slot_ranges.len();
    let feat_in_width = net.feature_net.input_width();

    // feature net over all neighbor occurrences
    let mut feat_in = Mat::zeros(n_occ.max(1), feat_in_width);
    let mut slot_cursor = 0usize;
    for (slot, &(s, e)) in slot_ranges.iter().enumerate() {
        let q = slot_query[slot];
        for o in s..e {
            let p = &cloud.points[occ_point[o as usize] as usize];
            let row = feat_in.row_mut(o as usize);
            for (c, f) in p.feature.iter().enumerate() {
                row[c] = *f as f64;
            }
            encode_offset(net, p.position - q, cloud.radius, &mut row[FEATURE_DIM..]);
        }
        slot_cursor += 1;
    }
    debug_assert_eq!(slot_cursor, n_slots);

    let (feat_out, feat_cache) = net.feature_net.forward(&feat_in).expect("feature net width");
    let (dens_out, dens_cache) = net.density_net.forward(&feat_out).expect("density net width");

    // per-slot aggregation
    let fw = net.feature_width;
    let mut fbar = Mat::zeros(n_slots.max(1), fw);
    let mut sigma_raw = vec![0.0f64; n_slots];
    for (slot, &(s, e)) in slot_ranges.iter().enumerate() {
        let row = fbar.row_mut(slot);
        for o in s as usize..e as usize {
            let w = occ_weight[o];
            sigma_raw[slot] += w * dens_out.get(o, 0);
            for (c, item) in row.iter_mut().enumerate() {
                *item += w * feat_out.get(o, c);
            }
        }
    }
    let sigma: Vec<f64> = sigma_raw.iter().map(|&x| softplus(x)).collect();

    // color net over occupied slots
    let color_in_width = net.color_net.input_width();
    let mut color_in = Mat::zeros(n_slots.max(1), color_in_width);
    for slot in 0..n_slots {
        let row = color_in.row_mut(slot);
        row[..fw].copy_from_slice(fbar.row(slot));
        let d = slot_ray_dir[slot].1;
        net.dir_encoding.encode_into(&[d.x, d.y, d.z], &mut row[fw..]);
    }
    let (color_raw, color_cache) = net.color_net.forward(&color_in).expect("color net width");
    let color: Vec<[f64; 3]> = (0..n_slots)
        .map(|s| {
            let r = color_raw.row(s);
            [sigmoid(r[0]), sigmoid(r[1]), sigmoid(r[2])]
        })
        .collect();

    // composite each ray
    let mut ray_color = vec![[0.0f64; 3]; n_rays];
    let mut ray_depth = vec![0.0f64; n_rays];
    let mut ray_wsum = vec![0.0f64; n_rays];
    let mut samples: Vec<(f64, f64, [f64; 3])> = Vec::with_capacity(n);
    for ri in 0..n_rays {
        samples.clear();
        for j in 0..n {
            let slot = slot_of[ri * n + j];
            let (sg, col) = if slot == u32::MAX {
                (0.0, background)
            } else {
                (sigma[slot as usize], color[slot as usize])
            };
            samples.push((t_values[ri * n + j], sg, col));
        }
        let (c, d, w) = composite(&samples, batch.rays[ri].far, background);
        ray_color[ri] = c;
        ray_depth[ri] = d;
        ray_wsum[ri] = w;
    }

    Ok(ForwardPass {
        n_rays,
        n_samples: n,
        t_values,
        slot_of,
        slot_ranges,
        occ_point,
        occ_weight,
        occ_dist,
        feat_out,
        feat_cache,
        dens_out,
        dens_cache,
        color_cache,
        sigma_raw,
        sigma,
        color,
        fbar,
        ray_color,
        ray_depth,
        ray_wsum,
    })
}

/// Shades one query point from its (already gathered) neighbors.
pub fn shade_point(
    q: Vector3<f64>,
    direction: Vector3<f64>,
    neighbors: &[(crate::points::NeuralPoint, f64)],
    net: &RenderNet,
    radius: f64,
    background: [f64; 3],
) -> ShadingResult {
    if neighbors.is_empty() {
        return ShadingResult { sigma: 0.0, color: background, neighbors_used: 0 };
    }
    let m = neighbors.len();
    let mut feat_in = Mat::zeros(m, net.feature_net.input_width());
    for (i, (p, _)) in neighbors.iter().enumerate() {
        let row = feat_in.row_mut(i);
        for (c, f) in p.feature.iter().enumerate() {
            row[c] = *f as f64;
        }
        encode_offset(net, p.position - q, radius, &mut row[FEATURE_DIM..]);
    }
    let (feat_out, _) = net.feature_net.forward(&feat_in).expect("feature width");
    let (dens_out, _) = net.density_net.forward(&feat_out).expect("density width");
    let gammas: Vec<f64> = neighbors.iter().map(|(p, _)| sigmoid(p.confidence_logit)).collect();
    let dists: Vec<f64> = neighbors.iter().map(|&(_, d)| d).collect();
    let weights = inverse_distance_weights(&gammas, &dists);
    let mut sigma_raw = 0.0;
    let fw = net.feature_width;
    let mut fbar = vec![0.0f64; fw];
    for i in 0..m {
        sigma_raw += weights[i] * dens_out.get(i, 0);
        for c in 0..fw {
            fbar[c] += weights[i] * feat_out.get(i, c);
        }
    }
    let mut color_in = Mat::zeros(1, net.color_net.input_width());
    {
        let row = color_in.row_mut(0);
        row[..fw].copy_from_slice(&fbar);
        net.dir_encoding.encode_into(&[direction.x, direction.y, direction.z], &mut row[fw..]);
    }
    let (out, _) = net.color_net.forward(&color_in).expect("color width");
    let r = out.row(0);
    ShadingResult {
        sigma: softplus(sigma_raw),
        color: [sigmoid(r[0]), sigmoid(r[1]), sigmoid(r[2])],
        neighbors_used: m,
    }
}

/// Evaluates one ray (stratified by the provided jitter) against the cloud.
pub fn render_ray(
    cloud: &NeuralPointCloud,
    net: &RenderNet,
    origin: Vector3<f64>,
    direction: Vector3<f64>,
    near: f64,
    far: f64,
    cfg: &RenderConfig,
    jitter: &[f64],
) -> Result<([f64; 3], f64, f64), RenderError> {
    let batch = RayBatch {
        rays: vec![RaySpec { origin, direction, near, far, jitter: jitter.to_vec(), target: None }],
        samples_per_ray: cfg.samples_per_ray,
    };
    let pass = eval_rays(cloud, net, &batch, cfg.background)?;
    Ok((pass.ray_color[0], pass.ray_depth[0], pass.ray_wsum[0]))
}

/// Distance range from a camera position to the cloud bounding box inflated
/// by 5%; `near` clamps to 1e-3 when the camera is inside.
pub fn camera_depth_bounds(cloud: &NeuralPointCloud, cam_center: Vector3<f64>) -> (f64, f64) {
    let center = 0.5 * (cloud.bounds_min + cloud.bounds_max);
    let half = 0.5 * (cloud.bounds_max - cloud.bounds_min) * 1.05;
    let lo = center - half;
    let hi = center + half;
    // nearest point of the box
    let clamp = Vector3::new(
        cam_center.x.clamp(lo.x, hi.x),
        cam_center.y.clamp(lo.y, hi.y),
        cam_center.z.clamp(lo.z, hi.z),
    );
    let near = (clamp - cam_center).norm().max(1e-3);
    let mut far = 0.0f64;
    for &x in &[lo.x, hi.x] {
        for &y in &[lo.y, hi.y] {
            for &z in &[lo.z, hi.z] {
                far = far.max((Vector3::new(x, y, z) - cam_center).norm());
            }
        }
    }
    (near, far.max(near + 1e-3))
}

#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Per-pixel stratification jitter, seeded independently of traversal order.
pub fn pixel_jitter(seed: u64, x: usize, y: usize, n: usize) -> Vec<f64> {
    (0..n)
        .map(|j| {
            let h = splitmix64(seed ^ splitmix64((x as u64) << 24 ^ (y as u64) << 4 ^ j as u64));
            (h >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect()
}

/// Renders a full image, one ray per pixel center, depth reported as camera
/// z. Deterministic given the seed.
pub fn render_image(
    cloud: &NeuralPointCloud,
    cam: &Camera,
    net: &RenderNet,
    cfg: &RenderConfig,
    seed: u64,
) -> Result<(RgbImage, DepthMap), RenderError> {
    if cloud.is_empty() {
        return Err(RenderError::EmptyCloud);
    }
    let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
    let (near, far) = camera_depth_bounds(cloud, cam.pose.center());
    let forward = cam.pose.rotation * Vector3::new(0.0, 0.0, 1.0);

    let rows: Vec<Vec<([f64; 3], f64)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut out = Vec::with_capacity(w);
            for x in 0..w {
                let p = Vector2::new(x as f64, y as f64);
                let (origin, dir_raw) = cam.ray(p);
                let direction = dir_raw.normalize();
                let jitter = pixel_jitter(seed, x, y, cfg.samples_per_ray);
                let batch = RayBatch {
                    rays: vec![RaySpec { origin, direction, near, far, jitter, target: None }],
                    samples_per_ray: cfg.samples_per_ray,
                };
                let pass = eval_rays(cloud, net, &batch, cfg.background).expect("bounds valid");
                let cosine = direction.dot(&forward);
                out.push((pass.ray_color[0], pass.ray_depth[0] * cosine));
            }
            out
        })
        .collect();

    let mut image = RgbImage::new(w, h);
    let mut depth = DepthMap::new_invalid(w, h);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (c, d)) in row.into_iter().enumerate() {
            image.set(x, y, [c[0] as f32, c[1] as f32, c[2] as f32]);
            if d > 0.0 {
                depth.set(x, y, d);
            }
        }
    }
    Ok((image, depth))
}
