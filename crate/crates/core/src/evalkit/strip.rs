use crate::error::{Error, Result};
use crate::image::Image;
use crate::renderer::CameraPose;

/// Ordered camera poses with a label per view.
#[derive(Clone, Debug)]
pub struct CameraPath {
    poses: Vec<CameraPose>,
    labels: Vec<String>,
}

impl CameraPath {
    pub fn new(poses: Vec<CameraPose>, labels: Vec<String>) -> Result<Self> {
        if poses.len() < 2 {
            return Err(Error::invalid(format!("a camera path needs at least 2 views, got {}", poses.len())));
        }
        if labels.len() != poses.len() {
            return Err(Error::invalid("one label per view is required"));
        }
        for p in &poses {
            p.validate()?;
        }
        Ok(Self { poses, labels })
    }

    /// `views` poses evenly spaced in yaw over `[−half_range, half_range]`
    /// degrees at fixed pitch, looking at the origin.
    pub fn yaw_sweep(views: usize, half_range_deg: f64, pitch_deg: f64, radius: f64, fov_deg: f64, size: usize) -> Result<Self> {
        if views < 2 {
            return Err(Error::invalid(format!("a camera path needs at least 2 views, got {views}")));
        }
        let poses = (0..views)
            .map(|i| {
                let yaw = -half_range_deg + 2.0 * half_range_deg * i as f64 / (views - 1) as f64;
                CameraPose::orbit(yaw.to_radians(), pitch_deg.to_radians(), radius, fov_deg, size)
            })
            .collect();
        let labels = (0..views).map(|i| format!("view_{i:03}")).collect();
        Self::new(poses, labels)
    }

    pub fn poses(&self) -> &[CameraPose] {
        &self.poses
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Bilinear sample at continuous pixel coordinates; pixel `(x, y)` sits at
/// integer `(x, y)`.
fn bilinear(img: &Image, x: f64, y: f64) -> [f64; 3] {
    let x0 = (x.floor() as usize).min(img.width() - 1);
    let y0 = (y.floor() as usize).min(img.height() - 1);
    let x1 = (x0 + 1).min(img.width() - 1);
    let y1 = (y0 + 1).min(img.height() - 1);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let (a, b, c, d) = (img.pixel(x0, y0), img.pixel(x1, y0), img.pixel(x0, y1), img.pixel(x1, y1));
    std::array::from_fn(|k| {
        let top = if fx == 0.0 { a[k] } else { a[k] + fx * (b[k] - a[k]) };
        let bot = if fx == 0.0 { c[k] } else { c[k] + fx * (d[k] - c[k]) };
        if fy == 0.0 { top } else { top + fy * (bot - top) }
    })
}

/// Stacks `samples` bilinear samples along the segment `p0 → p1` (pixel
/// coordinates, `[x, y]`) of each image: row `v` comes from image `v`.
pub fn spatiotemporal_texture(images: &[Image], p0: [f64; 2], p1: [f64; 2], samples: usize) -> Result<Image> {
    if images.len() < 2 {
        return Err(Error::invalid("a spatiotemporal texture needs at least 2 images"));
    }
    if samples == 0 {
        return Err(Error::invalid("at least one sample along the segment is required"));
    }
    let (w, h) = (images[0].width(), images[0].height());
    if images.iter().any(|i| i.width() != w || i.height() != h) {
        return Err(Error::Shape("all images of a strip must share a size".into()));
    }
    let inside = |p: [f64; 2]| p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= (w - 1) as f64 && p[1] <= (h - 1) as f64;
    if !inside(p0) || !inside(p1) {
        return Err(Error::invalid(format!("segment {p0:?} → {p1:?} leaves the {w}×{h} frame")));
    }
    let mut strip = Image::filled(samples, images.len(), [0.0; 3]);
    for (v, img) in images.iter().enumerate() {
        for s in 0..samples {
            let f = if samples == 1 { 0.0 } else { s as f64 / (samples - 1) as f64 };
            let x = p0[0] + f * (p1[0] - p0[0]);
            let y = p0[1] + f * (p1[1] - p0[1]);
            strip.set_pixel(s, v, bilinear(img, x, y));
        }
    }
    Ok(strip)
}

/// Mean squared difference between consecutive rows (views) of a strip.
pub fn consistency_score(strip: &Image) -> Result<f64> {
    let (m, v) = (strip.width(), strip.height());
    if v < 2 || m == 0 {
        return Err(Error::invalid("consistency needs a strip with at least 2 rows"));
    }
    let d = strip.data();
    let row = m * 3;
    let mut acc = 0.0;
    for r in 0..v - 1 {
        for i in 0..row {
            let e = d[(r + 1) * row + i] - d[r * row + i];
            acc += e * e;
        }
    }
    Ok(acc / ((v - 1) * row) as f64)
}
