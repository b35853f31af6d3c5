//! Non-learned forward point splat with z-buffering: the comparison floor
//! for the trained renderer. Each point lands on its nearest pixel carrying
//! the RGB channels of its descriptor; uncovered pixels take the background.

use crate::geometry::Camera;
use crate::image::RgbImage;
use crate::points::NeuralPointCloud;

pub fn splat_image(cloud: &NeuralPointCloud, cam: &Camera, background: [f32; 3]) -> RgbImage {
    let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut image = RgbImage::from_fn(w, h, |_, _| background);
    for p in &cloud.points {
        let Ok((px, z)) = cam.project(p.position) else { continue };
        let x = px.x.round();
        let y = px.y.round();
        if x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
            continue;
        }
        let (x, y) = (x as usize, y as usize);
        let i = y * w + x;
        if z < zbuf[i] {
            zbuf[i] = z;
            image.set(x, y, [p.feature[0], p.feature[1], p.feature[2]]);
        }
    }
    image
}
