//! Photometric training of the rendering networks and per-point confidence
//! logits: sampled rays, exact hand-derived gradients through compositing,
//! weighting, and the three subnetworks.

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::{adam_step, cosine_lr, AdamState, Mat, MlpGrads};
use crate::points::{FrameData, NeuralPointCloud};

use super::{
    camera_depth_bounds, eval_rays, sigmoid, ForwardPass, RayBatch, RaySpec, RenderError, RenderNet,
};

/// Gradients of one batch: the three subnets plus per-point confidence
/// logits of the cloud the batch was drawn from.
pub struct RenderGrads {
    pub feature: MlpGrads,
    pub density: MlpGrads,
    pub color: MlpGrads,
    pub logits: Vec<f64>,
}

/// Backward pass through compositing, aggregation and the subnetworks given
/// `d loss / d ray_color`.
pub fn backward_rays(
    cloud: &NeuralPointCloud,
    net: &RenderNet,
    batch: &RayBatch,
    pass: &ForwardPass,
    d_ray_color: &[[f64; 3]],
    background: [f64; 3],
) -> RenderGrads {
    let n = pass.n_samples;
    let n_slots = pass.slot_ranges.len();
    let mut d_sigma = vec![0.0f64; n_slots];
    let mut d_color = vec![[0.0f64; 3]; n_slots];

    // compositing backward, per ray in reverse sample order
    for ri in 0..pass.n_rays {
        let dc = d_ray_color[ri];
        if dc == [0.0; 3] {
            continue;
        }
        let far = batch.rays[ri].far;
        // forward transmittances
        let mut trans = vec![1.0f64; n + 1];
        for j in 0..n {
            let slot = pass.slot_of[ri * n + j];
            let sigma = if slot == u32::MAX { 0.0 } else { pass.sigma[slot as usize] };
            let z = pass.t_values[ri * n + j];
            let z_next = if j + 1 < n { pass.t_values[ri * n + j + 1] } else { far };
            trans[j + 1] = trans[j] * (-sigma * (z_next - z)).exp();
        }
        // suffix of weighted colors (background rides at the end)
        let mut suffix = [trans[n] * background[0], trans[n] * background[1], trans[n] * background[2]];
        for j in (0..n).rev() {
            let slot = pass.slot_of[ri * n + j];
            let z = pass.t_values[ri * n + j];
            let z_next = if j + 1 < n { pass.t_values[ri * n + j + 1] } else { far };
            let delta = z_next - z;
            if slot != u32::MAX {
                let s = slot as usize;
                let sigma = pass.sigma[s];
                let att = (-sigma * delta).exp();
                let alpha = 1.0 - att;
                let w = trans[j] * alpha;
                let rgb = pass.color[s];
                for c in 0..3 {
                    d_color[s][c] += w * dc[c];
                }
                // d sigma: own alpha rises, everything behind attenuates
                let mut g = 0.0;
                for c in 0..3 {
                    g += (trans[j] * att * rgb[c] - suffix[c]) * dc[c];
                }
                d_sigma[s] += delta * g;
                for c in 0..3 {
                    suffix[c] += w * rgb[c];
                }
            }
            // empty samples: alpha = 0 and sigma is not parameterized; the
            // suffix is unchanged
        }
    }

    // activation backward
    let mut d_sigma_raw = vec![0.0f64; n_slots];
    let mut d_color_raw = Mat::zeros(n_slots.max(1), 3);
    for s in 0..n_slots {
        d_sigma_raw[s] = d_sigma[s] * sigmoid(pass.sigma_raw[s]);
        for c in 0..3 {
            let col = pass.color[s][c];
            d_color_raw.set(s, c, d_color[s][c] * col * (1.0 - col));
        }
    }

    // color net backward; input gradient splits into d fbar (dir part unused)
    let (color_grads, d_color_in) = net.color_net.backward(&pass.color_cache, &d_color_raw).expect("cache");
    let fw = net.feature_width;

    // aggregation backward into occurrences
    let n_occ = pass.occ_point.len();
    let mut d_dens_out = Mat::zeros(n_occ.max(1), 1);
    let mut d_feat_out = Mat::zeros(n_occ.max(1), fw);
    let mut d_logits = vec![0.0f64; cloud.points.len()];
    for (s, &(start, end)) in pass.slot_ranges.iter().enumerate() {
        let dfbar = &d_color_in.row(s)[..fw];
        let occ = start as usize..end as usize;
        // dw_m = sigma_m * d_sigma_raw + fhat_m . dfbar
        let mut dw = Vec::with_capacity(occ.len());
        for o in occ.clone() {
            let mut g = pass.dens_out.get(o, 0) * d_sigma_raw[s];
            for c in 0..fw {
                g += pass.feat_out.get(o, c) * dfbar[c];
            }
            dw.push(g);
        }
        // normalized-weight backward: w = u / U
        let wsum_dot: f64 = (occ.clone()).zip(&dw).map(|(o, &g)| pass.occ_weight[o] * g).sum();
        let u_total: f64 = occ
            .clone()
            .map(|o| {
                let p = &cloud.points[pass.occ_point[o] as usize];
                sigmoid(p.confidence_logit) / (pass.occ_dist[o] + super::DIST_FLOOR)
            })
            .sum();
        for (oi, o) in occ.clone().enumerate() {
            let w = pass.occ_weight[o];
            d_dens_out.set(o, 0, w * d_sigma_raw[s]);
            for c in 0..fw {
                d_feat_out.set(o, c, w * dfbar[c]);
            }
            let du = (dw[oi] - wsum_dot) / u_total;
            let pid = pass.occ_point[o] as usize;
            let gamma = sigmoid(cloud.points[pid].confidence_logit);
            let dgamma = du / (pass.occ_dist[o] + super::DIST_FLOOR);
            d_logits[pid] += dgamma * gamma * (1.0 - gamma);
        }
    }

    // density backward feeds extra gradient into the feature outputs
    let (density_grads, d_dens_in) = net.density_net.backward(&pass.dens_cache, &d_dens_out).expect("cache");
    for o in 0..n_occ {
        let row = d_dens_in.row(o);
        let out = d_feat_out.row_mut(o);
        for c in 0..fw {
            out[c] += row[c];
        }
    }
    let (feature_grads, _) = net.feature_net.backward(&pass.feat_cache, &d_feat_out).expect("cache");

    RenderGrads { feature: feature_grads, density: density_grads, color: color_grads, logits: d_logits }
}

/// Mean squared error over rays and channels plus its gradient w.r.t. the
/// rendered colors.
pub fn photometric_loss(pass: &ForwardPass, batch: &RayBatch) -> (f64, Vec<[f64; 3]>) {
    let b = batch.rays.len() as f64;
    let mut loss = 0.0;
    let mut d = vec![[0.0f64; 3]; batch.rays.len()];
    for (ri, ray) in batch.rays.iter().enumerate() {
        let target = ray.target.expect("training ray needs a target");
        for c in 0..3 {
            let diff = pass.ray_color[ri][c] - target[c] as f64;
            loss += diff * diff / (3.0 * b);
            d[ri][c] = 2.0 * diff / (3.0 * b);
        }
    }
    (loss, d)
}

#[derive(Debug, Clone)]
pub struct RenderTrainConfig {
    pub iterations: usize,
    pub rays_per_batch: usize,
    pub samples_per_ray: usize,
    pub learning_rate: f64,
    pub lr_floor: f64,
    pub background: [f64; 3],
    pub seed: u64,
}

impl Default for RenderTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            rays_per_batch: 256,
            samples_per_ray: 64,
            learning_rate: 1e-3,
            lr_floor: 1e-4,
            background: [0.0; 3],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RenderTrainLogEntry {
    pub iteration: usize,
    pub loss: f64,
    pub learning_rate: f64,
}

/// Trains the shading networks and per-cloud confidence logits against the
/// observed frames. Each iteration draws rays from one frame (cycling) and
/// supervises rendered colors with the L2 photometric loss.
pub fn train_renderer(
    clouds: &mut [NeuralPointCloud],
    frames: &[FrameData],
    net: &mut RenderNet,
    cfg: &RenderTrainConfig,
) -> Result<Vec<RenderTrainLogEntry>, RenderError> {
    if clouds.len() != frames.len() {
        return Err(RenderError::MissingCloud(clouds.len().min(frames.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e3779b97f4a7c15);
    let mut feat_params = net.feature_net.flatten();
    let mut dens_params = net.density_net.flatten();
    let mut color_params = net.color_net.flatten();
    let mut feat_adam = AdamState::new(feat_params.len(), cfg.learning_rate);
    let mut dens_adam = AdamState::new(dens_params.len(), cfg.learning_rate);
    let mut color_adam = AdamState::new(color_params.len(), cfg.learning_rate);
    let mut logit_adams: Vec<AdamState> =
        clouds.iter().map(|c| AdamState::new(c.len(), cfg.learning_rate)).collect();
    let mut log = Vec::new();

    for it in 0..cfg.iterations {
        let fi = it % frames.len();
        let frame = &frames[fi];
        let cloud = &clouds[fi];
        let cam = &frame.camera;
        let (near, far) = camera_depth_bounds(cloud, cam.pose.center());
        let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);

        let mut rays = Vec::with_capacity(cfg.rays_per_batch);
        for _ in 0..cfg.rays_per_batch {
            let x = rng.gen_range(0..w);
            let y = rng.gen_range(0..h);
            let (origin, dir_raw) = cam.ray(Vector2::new(x as f64, y as f64));
            let jitter: Vec<f64> = (0..cfg.samples_per_ray).map(|_| rng.gen::<f64>()).collect();
            rays.push(RaySpec {
                origin,
                direction: dir_raw.normalize(),
                near,
                far,
                jitter,
                target: Some(frame.image.get(x, y)),
            });
        }
        let batch = RayBatch { rays, samples_per_ray: cfg.samples_per_ray };
        let pass = eval_rays(cloud, net, &batch, cfg.background)?;
        let (loss, d_colors) = photometric_loss(&pass, &batch);
        let grads = backward_rays(cloud, net, &batch, &pass, &d_colors, cfg.background);

        let lr = cosine_lr(cfg.learning_rate, cfg.lr_floor, it, cfg.iterations);
        feat_adam.learning_rate = lr;
        dens_adam.learning_rate = lr;
        color_adam.learning_rate = lr;
        adam_step(&mut feat_params, &grads.feature.flatten(), &mut feat_adam).expect("shape");
        adam_step(&mut dens_params, &grads.density.flatten(), &mut dens_adam).expect("shape");
        adam_step(&mut color_params, &grads.color.flatten(), &mut color_adam).expect("shape");
        net.feature_net.assign_flat(&feat_params);
        net.density_net.assign_flat(&dens_params);
        net.color_net.assign_flat(&color_params);

        let cloud = &mut clouds[fi];
        let mut logits: Vec<f64> = cloud.points.iter().map(|p| p.confidence_logit).collect();
        logit_adams[fi].learning_rate = lr;
        adam_step(&mut logits, &grads.logits, &mut logit_adams[fi]).expect("shape");
        for (p, l) in cloud.points.iter_mut().zip(&logits) {
            p.confidence_logit = *l;
        }

        if it % 100 == 0 || it + 1 == cfg.iterations {
            log.push(RenderTrainLogEntry { iteration: it, loss, learning_rate: lr });
        }
    }
    Ok(log)
}
