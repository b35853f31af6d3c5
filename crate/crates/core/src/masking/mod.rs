//! Per-pixel reliability masks gating the triangulated depth: forward/backward
//! flow consistency, geometric edges of the normal map, and dynamic-object
//! detection from segmentation plus epipolar residuals.

mod canny;

pub use canny::canny_on_normals;

use nalgebra::{Matrix3, Vector2};
use thiserror::Error;

use crate::geometry::{sampson_error, NormalMap};

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("mask semantics mismatch: expected {expected:?}, got {got:?}")]
    SemanticsMismatch { expected: MaskKind, got: MaskKind },
    #[error("normal map has no valid region")]
    InvalidNormals,
}

/// Dense 2D optic flow `(du, dv)` in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub vectors: Vec<[f64; 2]>,
    pub validity: Vec<bool>,
}

impl FlowField {
    pub fn new_invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            vectors: vec![[f64::NAN; 2]; width * height],
            validity: vec![false; width * height],
        }
    }

    pub fn constant(width: usize, height: usize, du: f64, dv: f64) -> Self {
        Self { width, height, vectors: vec![[du, dv]; width * height], validity: vec![true; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Option<[f64; 2]>) -> Self {
        let mut flow = Self::new_invalid(width, height);
        for y in 0..height {
            for x in 0..width {
                if let Some(v) = f(x, y) {
                    flow.set(x, y, v);
                }
            }
        }
        flow
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<[f64; 2]> {
        let i = y * self.width + x;
        if self.validity[i] {
            Some(self.vectors[i])
        } else {
            None
        }
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: [f64; 2]) {
        let i = y * self.width + x;
        self.vectors[i] = v;
        self.validity[i] = true;
    }

    /// Bilinear sample at a continuous position; `None` out of bounds or if
    /// any stencil corner is invalid.
    pub fn sample_bilinear(&self, p: Vector2<f64>) -> Option<[f64; 2]> {
        if !(p.x >= 0.0 && p.y >= 0.0 && p.x <= (self.width - 1) as f64 && p.y <= (self.height - 1) as f64) {
            return None;
        }
        let x0 = (p.x.floor() as usize).min(self.width - 1);
        let y0 = (p.y.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = p.x - x0 as f64;
        let fy = p.y - y0 as f64;
        let a = self.get(x0, y0)?;
        let b = self.get(x1, y0)?;
        let c = self.get(x0, y1)?;
        let d = self.get(x1, y1)?;
        Some([
            a[0] * (1.0 - fx) * (1.0 - fy) + b[0] * fx * (1.0 - fy) + c[0] * (1.0 - fx) * fy + d[0] * fx * fy,
            a[1] * (1.0 - fx) * (1.0 - fy) + b[1] * fx * (1.0 - fy) + c[1] * (1.0 - fx) * fy + d[1] * fx * fy,
        ])
    }
}

/// What a mask's set bit means; fixed at creation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// 1 = flow round-trip consistent
    Correspondence,
    /// 1 = away from geometric edges
    Geometric,
    /// 1 = static
    DynamicStatic,
    /// 1 = reliable under all criteria
    Final,
}

/// Binary per-pixel mask; 1 means "reliable" (for [`MaskKind::DynamicStatic`],
/// 1 means static).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskImage {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
    pub kind: MaskKind,
}

impl MaskImage {
    pub fn new(width: usize, height: usize, value: bool, kind: MaskKind) -> Self {
        Self { width, height, bits: vec![value; width * height], kind }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>, kind: MaskKind) -> Self {
        assert_eq!(bits.len(), width * height);
        Self { width, height, bits, kind }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn not(&self) -> MaskImage {
        MaskImage { bits: self.bits.iter().map(|b| !b).collect(), ..self.clone() }
    }

    pub fn intersect_with(&mut self, other: &MaskImage) {
        assert_eq!(self.bits.len(), other.bits.len());
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a &= *b;
        }
    }
}

/// Candidate-dynamic segmentation (true = flagged dynamic). Kept distinct
/// from [`MaskImage`] because its set bit marks the *unreliable* class.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Segmentation {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    pub fn all_dynamic(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![true; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }
}

/// Thresholds and structuring radii for the three reliability masks.
#[derive(Debug, Clone, Copy)]
pub struct MaskConfig {
    /// Flow round-trip threshold in pixels.
    pub eps_c: f64,
    /// Hysteresis thresholds in normal-channel gradient units.
    pub canny_low: f64,
    pub canny_high: f64,
    pub edge_dilate_radius: usize,
    pub erode_radius: usize,
    pub sampson_threshold: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            eps_c: 1.0,
            canny_low: 0.1,
            canny_high: 0.2,
            edge_dilate_radius: 2,
            erode_radius: 2,
            sampson_threshold: 1.0,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) {
        assert!(self.eps_c > 0.0, "eps_c must be positive");
        assert!(self.canny_low < self.canny_high, "canny_low must be below canny_high");
    }
}

fn check_dims(aw: usize, ah: usize, bw: usize, bh: usize) -> Result<(), MaskError> {
    if aw != bw || ah != bh {
        return Err(MaskError::DimensionMismatch(aw, ah, bw, bh));
    }
    Ok(())
}

/// Flow round-trip consistency: pixel p is reliable iff
/// `|f_fwd(p) + f_bwd(p + f_fwd(p))| <= eps_c`, with the backward field
/// sampled bilinearly at the landing point. Out-of-bounds landings and
/// invalid flow entries are unreliable.
pub fn correspondence_mask(
    f_fwd: &FlowField,
    f_bwd: &FlowField,
    cfg: &MaskConfig,
) -> Result<MaskImage, MaskError> {
    cfg.validate();
    check_dims(f_fwd.width, f_fwd.height, f_bwd.width, f_bwd.height)?;
    let (w, h) = (f_fwd.width, f_fwd.height);
    let mut mask = MaskImage::new(w, h, false, MaskKind::Correspondence);
    for y in 0..h {
        for x in 0..w {
            let Some(fwd) = f_fwd.get(x, y) else { continue };
            let landing = Vector2::new(x as f64 + fwd[0], y as f64 + fwd[1]);
            let Some(bwd) = f_bwd.sample_bilinear(landing) else { continue };
            let rx = fwd[0] + bwd[0];
            let ry = fwd[1] + bwd[1];
            if rx.hypot(ry) <= cfg.eps_c {
                mask.set(x, y, true);
            }
        }
    }
    Ok(mask)
}

/// Canny edges of the normal map dilated by `edge_dilate_radius`; the result
/// is 1 on non-edge (reliable) pixels.
pub fn geometric_edge_mask(normals: &NormalMap, cfg: &MaskConfig) -> Result<MaskImage, MaskError> {
    cfg.validate();
    if !normals.validity.iter().any(|&v| v) {
        return Err(MaskError::InvalidNormals);
    }
    let edges = canny_on_normals(normals, cfg.canny_low, cfg.canny_high);
    let edge_mask = MaskImage::from_bits(normals.width, normals.height, edges, MaskKind::Geometric);
    let dilated = morphology(&edge_mask, MorphOp::Dilate, cfg.edge_dilate_radius);
    Ok(MaskImage { bits: dilated.bits.iter().map(|e| !e).collect(), ..dilated })
}

/// Static-object mask: a pixel is dynamic when the segmentation flags it or
/// its flow correspondence violates the epipolar constraint by more than
/// `sampson_threshold`; the static set is then eroded by `erode_radius`.
pub fn dynamic_mask(
    seg: &Segmentation,
    flow: &FlowField,
    fundamental: &Matrix3<f64>,
    cfg: &MaskConfig,
) -> Result<MaskImage, MaskError> {
    cfg.validate();
    check_dims(seg.width, seg.height, flow.width, flow.height)?;
    let (w, h) = (seg.width, seg.height);
    let mut mask = MaskImage::new(w, h, true, MaskKind::DynamicStatic);
    for y in 0..h {
        for x in 0..w {
            let mut dynamic = seg.get(x, y);
            if !dynamic {
                if let Some(f) = flow.get(x, y) {
                    let p = Vector2::new(x as f64, y as f64);
                    let p2 = Vector2::new(x as f64 + f[0], y as f64 + f[1]);
                    dynamic = sampson_error(p, p2, fundamental) > cfg.sampson_threshold;
                }
            }
            if dynamic {
                mask.set(x, y, false);
            }
        }
    }
    Ok(morphology(&mask, MorphOp::Erode, cfg.erode_radius))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MorphOp {
    Erode,
    Dilate,
}

/// Square structuring element of side `2*radius + 1`; radius 0 is identity.
/// Windows are clamped to the raster, which keeps both erosion/dilation
/// duality and `closing ⊇ original` valid up to the border.
pub fn morphology(mask: &MaskImage, op: MorphOp, radius: usize) -> MaskImage {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width, mask.height);
    let r = radius as i32;
    let mut out = mask.clone();
    for y in 0..h as i32 {
        for x in 0..w as i32 {
            let mut acc = match op {
                MorphOp::Erode => true,
                MorphOp::Dilate => false,
            };
            'window: for dy in -r..=r {
                for dx in -r..=r {
                    let sx = x + dx;
                    let sy = y + dy;
                    if sx < 0 || sy < 0 || sx >= w as i32 || sy >= h as i32 {
                        continue;
                    }
                    let bit = mask.get(sx as usize, sy as usize);
                    match op {
                        MorphOp::Erode => {
                            if !bit {
                                acc = false;
                                break 'window;
                            }
                        }
                        MorphOp::Dilate => {
                            if bit {
                                acc = true;
                                break 'window;
                            }
                        }
                    }
                }
            }
            out.set(x as usize, y as usize, acc);
        }
    }
    out
}

/// Intersection `M_c & M_g & M_d`, tagged final.
pub fn final_mask(mc: &MaskImage, mg: &MaskImage, md: &MaskImage) -> Result<MaskImage, MaskError> {
    for (mask, expected) in [
        (mc, MaskKind::Correspondence),
        (mg, MaskKind::Geometric),
        (md, MaskKind::DynamicStatic),
    ] {
        if mask.kind != expected {
            return Err(MaskError::SemanticsMismatch { expected, got: mask.kind });
        }
    }
    check_dims(mc.width, mc.height, mg.width, mg.height)?;
    check_dims(mc.width, mc.height, md.width, md.height)?;
    let bits = (0..mc.bits.len()).map(|i| mc.bits[i] && mg.bits[i] && md.bits[i]).collect();
    Ok(MaskImage::from_bits(mc.width, mc.height, bits, MaskKind::Final))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{fundamental_from_cameras, normal_map, Camera, DepthMap, Intrinsics, Pose};
    use nalgebra::{Matrix3, Vector3};
    use proptest::{prop_assert, prop_assert_eq, proptest};

    #[test]
    fn correspondence_exact_inverse_flow_all_ones() {
        let fwd = FlowField::constant(16, 12, 2.0, -1.0);
        let bwd = FlowField::constant(16, 12, -2.0, 1.0);
        let mask = correspondence_mask(&fwd, &bwd, &MaskConfig::default()).unwrap();
        for y in 0..12 {
            for x in 0..16 {
                // pixels whose landing leaves the raster are 0 by contract
                let landing_in = (x as f64 + 2.0) <= 15.0 && (y as f64 - 1.0) >= 0.0;
                assert_eq!(mask.get(x, y), landing_in, "at ({x},{y})");
            }
        }
    }

    #[test]
    fn correspondence_boundary_threshold_inclusive() {
        let eps = 1.0;
        let cfg = MaskConfig { eps_c: eps, ..MaskConfig::default() };
        // Residual is exactly eps_c: forward (1, 0), backward (eps - 1, 0).
        let fwd = FlowField::constant(8, 8, 1.0, 0.0);
        let bwd = FlowField::constant(8, 8, eps - 1.0, 0.0);
        let mask = correspondence_mask(&fwd, &bwd, &cfg).unwrap();
        assert!(mask.get(3, 3), "residual == eps_c must be reliable");

        // One ulp above the threshold flips the bit.
        let above = f64::from_bits(eps.to_bits() + 1);
        let bwd2 = FlowField::constant(8, 8, above - 1.0, 0.0);
        let mask2 = correspondence_mask(&fwd, &bwd2, &cfg).unwrap();
        assert!(!mask2.get(3, 3), "residual eps_c + ulp must be unreliable");
    }

    #[test]
    fn correspondence_occluded_region_detected() {
        // A patch with a 3 px round-trip error at eps_c = 1 goes to 0.
        let fwd = FlowField::constant(20, 20, 1.0, 0.0);
        let bwd = FlowField::from_fn(20, 20, |x, y| {
            if (4..12).contains(&x) && (4..12).contains(&y) {
                Some([2.0, 0.0])
            } else {
                Some([-1.0, 0.0])
            }
        });
        let mask = correspondence_mask(&fwd, &bwd, &MaskConfig::default()).unwrap();
        for y in 5..11 {
            for x in 5..10 {
                assert!(!mask.get(x, y), "occluded pixel ({x},{y}) marked reliable");
            }
        }
        assert!(mask.get(15, 15));
    }

    #[test]
    fn correspondence_rejects_dimension_mismatch() {
        let fwd = FlowField::constant(8, 8, 0.0, 0.0);
        let bwd = FlowField::constant(9, 8, 0.0, 0.0);
        assert!(matches!(
            correspondence_mask(&fwd, &bwd, &MaskConfig::default()),
            Err(MaskError::DimensionMismatch(..))
        ));
    }

    #[test]
    fn geometric_mask_constant_plane_all_ones() {
        let depth = DepthMap::constant(24, 18, 4.0);
        let intr = Intrinsics::new(50.0, 50.0, 12.0, 9.0, 24, 18);
        let normals = normal_map(&depth, &intr).unwrap();
        let mask = geometric_edge_mask(&normals, &MaskConfig::default()).unwrap();
        assert_eq!(mask.count_ones(), 24 * 18);
    }

    #[test]
    fn geometric_mask_dilation_monotone() {
        // A depth step produces an edge; a larger dilation radius can only
        // grow the zero set.
        let depth = DepthMap::from_fn(24, 18, |x, _| Some(if x < 12 { 2.0 } else { 4.0 }));
        let intr = Intrinsics::new(50.0, 50.0, 12.0, 9.0, 24, 18);
        let normals = normal_map(&depth, &intr).unwrap();
        let m0 = geometric_edge_mask(&normals, &MaskConfig { edge_dilate_radius: 0, ..MaskConfig::default() }).unwrap();
        let m2 = geometric_edge_mask(&normals, &MaskConfig { edge_dilate_radius: 2, ..MaskConfig::default() }).unwrap();
        assert!(m0.count_ones() > 0, "edge must not swallow the whole frame");
        assert!(m0.count_ones() < 24 * 18, "step edge must be detected");
        for i in 0..m0.bits.len() {
            if !m0.bits[i] {
                assert!(!m2.bits[i], "radius-2 zero set must contain radius-0 zeros");
            }
        }
        assert!(m2.count_ones() < m0.count_ones());
    }

    fn translated_cameras() -> (Camera, Camera) {
        let intr = Intrinsics::new(60.0, 60.0, 16.0, 12.0, 32, 24);
        let c1 = Camera::new(intr, Pose::identity(), 0, "c");
        let c2 = Camera::new(
            intr,
            Pose::new(Matrix3::identity(), Vector3::new(0.3, 0.0, 0.0)).unwrap(),
            1,
            "c",
        );
        (c1, c2)
    }

    /// Exact static flow between the two test cameras for a plane at depth z.
    fn static_flow(c1: &Camera, c2: &Camera, z: f64) -> FlowField {
        let intr = c1.intrinsics;
        FlowField::from_fn(intr.width, intr.height, |x, y| {
            let p = nalgebra::Vector2::new(x as f64, y as f64);
            let world = c1.unproject(p, z).ok()?;
            let (p2, _) = c2.project(world).ok()?;
            Some([(p2 - p).x, (p2 - p).y])
        })
    }

    #[test]
    fn dynamic_mask_static_scene_all_ones() {
        let (c1, c2) = translated_cameras();
        let flow = static_flow(&c1, &c2, 5.0);
        let f = fundamental_from_cameras(&c1, &c2).unwrap();
        let seg = Segmentation::empty(32, 24);
        let cfg = MaskConfig { erode_radius: 0, ..MaskConfig::default() };
        let mask = dynamic_mask(&seg, &flow, &f, &cfg).unwrap();
        assert_eq!(mask.count_ones(), 32 * 24);
    }

    #[test]
    fn dynamic_mask_detects_epipolar_violation() {
        let (c1, c2) = translated_cameras();
        let mut flow = static_flow(&c1, &c2, 5.0);
        // Vertical motion on a patch: impossible under pure x-translation.
        for y in 8..16 {
            for x in 10..20 {
                let v = flow.get(x, y).unwrap();
                flow.set(x, y, [v[0], v[1] + 4.0]);
            }
        }
        let f = fundamental_from_cameras(&c1, &c2).unwrap();
        let seg = Segmentation::empty(32, 24);
        let cfg = MaskConfig { erode_radius: 0, ..MaskConfig::default() };
        let mask = dynamic_mask(&seg, &flow, &f, &cfg).unwrap();
        for y in 8..16 {
            for x in 10..20 {
                assert!(!mask.get(x, y), "violating pixel ({x},{y}) kept static");
            }
        }
        assert!(mask.get(2, 2));
    }

    #[test]
    fn dynamic_mask_segmentation_dominates() {
        let (c1, c2) = translated_cameras();
        let flow = static_flow(&c1, &c2, 5.0);
        let f = fundamental_from_cameras(&c1, &c2).unwrap();
        let seg = Segmentation::all_dynamic(32, 24);
        let mask = dynamic_mask(&seg, &flow, &f, &MaskConfig::default()).unwrap();
        assert_eq!(mask.count_ones(), 0);
    }

    #[test]
    fn morphology_radius_zero_is_identity() {
        let mut m = MaskImage::new(9, 9, false, MaskKind::Final);
        m.set(4, 4, true);
        m.set(1, 7, true);
        assert_eq!(morphology(&m, MorphOp::Erode, 0), m);
        assert_eq!(morphology(&m, MorphOp::Dilate, 0), m);
    }

    #[test]
    fn morphology_erosion_removes_singletons() {
        let mut m = MaskImage::new(9, 9, false, MaskKind::Final);
        m.set(4, 4, true);
        let eroded = morphology(&m, MorphOp::Erode, 1);
        assert_eq!(eroded.count_ones(), 0);
    }

    fn random_mask(seed: u64, w: usize, h: usize) -> MaskImage {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        MaskImage::from_bits(w, h, (0..w * h).map(|_| rng.gen_bool(0.5)).collect(), MaskKind::Final)
    }

    proptest! {
        #[test]
        fn morphology_closing_contains_original(seed in 0u64..200, r in 0usize..3) {
            let m = random_mask(seed, 12, 10);
            let closed = morphology(&morphology(&m, MorphOp::Dilate, r), MorphOp::Erode, r);
            for i in 0..m.bits.len() {
                prop_assert!(!m.bits[i] || closed.bits[i]);
            }
        }

        #[test]
        fn erosion_dilation_duality(seed in 0u64..200, r in 0usize..4) {
            let m = random_mask(seed, 14, 11);
            let a = morphology(&m, MorphOp::Erode, r);
            let b = morphology(&m.not(), MorphOp::Dilate, r).not();
            prop_assert_eq!(&a.bits, &b.bits);
        }
    }

    #[test]
    fn final_mask_matches_bruteforce_conjunction() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut mk = |kind| {
            MaskImage::from_bits(7, 5, (0..35).map(|_| rng.gen_bool(0.5)).collect::<Vec<_>>(), kind)
        };
        let mc = mk(MaskKind::Correspondence);
        let mg = mk(MaskKind::Geometric);
        let md = mk(MaskKind::DynamicStatic);
        let f = final_mask(&mc, &mg, &md).unwrap();
        assert_eq!(f.kind, MaskKind::Final);
        for y in 0..5 {
            for x in 0..7 {
                assert_eq!(f.get(x, y), mc.get(x, y) && mg.get(x, y) && md.get(x, y));
            }
        }
        // Absorbing element and all-ones behavior.
        let ones = |kind| MaskImage::new(7, 5, true, kind);
        let zero = MaskImage::new(7, 5, false, MaskKind::Correspondence);
        let all = final_mask(&ones(MaskKind::Correspondence), &ones(MaskKind::Geometric), &ones(MaskKind::DynamicStatic)).unwrap();
        assert_eq!(all.count_ones(), 35);
        let none = final_mask(&zero, &ones(MaskKind::Geometric), &ones(MaskKind::DynamicStatic)).unwrap();
        assert_eq!(none.count_ones(), 0);
    }

    #[test]
    fn final_mask_rejects_wrong_tags() {
        let mc = MaskImage::new(4, 4, true, MaskKind::Geometric);
        let mg = MaskImage::new(4, 4, true, MaskKind::Geometric);
        let md = MaskImage::new(4, 4, true, MaskKind::DynamicStatic);
        assert!(matches!(final_mask(&mc, &mg, &md), Err(MaskError::SemanticsMismatch { .. })));
    }
}
