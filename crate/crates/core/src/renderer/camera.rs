use crate::error::{Error, Result};

/// Pinhole camera. `rotation` is camera-to-world with the camera x, y, z
/// axes as columns; the camera looks along its −z axis and image rows grow
/// downwards (−y). `position` is the camera centre in world units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub rotation: [[f64; 3]; 3],
    pub position: [f64; 3],
    pub focal: f64,
    pub principal: [f64; 2],
    pub size: usize,
}

/// Pixel window `[u0, u0 + width) × [v0, v0 + height)` of an `F × F` frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSpec {
    pub u0: usize,
    pub v0: usize,
    pub width: usize,
    pub height: usize,
    pub full: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

impl CameraPose {
    /// Camera on a sphere of `radius` around the origin, looking at it.
    /// `yaw = pitch = 0` sits at `(0, 0, radius)` with identity rotation;
    /// positive yaw moves towards +x, positive pitch towards +y.
    pub fn orbit(yaw: f64, pitch: f64, radius: f64, fov_deg: f64, size: usize) -> Self {
        let position = [radius * pitch.cos() * yaw.sin(), radius * pitch.sin(), radius * pitch.cos() * yaw.cos()];
        let z = normalize(position);
        let x = normalize(cross([0.0, 1.0, 0.0], z));
        let y = cross(z, x);
        let focal = 0.5 * size as f64 / (0.5 * fov_deg.to_radians()).tan();
        Self {
            rotation: [[x[0], y[0], z[0]], [x[1], y[1], z[1]], [x[2], y[2], z[2]]],
            position,
            focal,
            principal: [0.5 * size as f64, 0.5 * size as f64],
            size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let col = |j: usize| [r[0][j], r[1][j], r[2][j]];
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot(col(i), col(j)) - want).abs() > 1e-9 {
                    return Err(Error::invalid("camera rotation is not orthonormal"));
                }
            }
        }
        if (dot(cross(col(0), col(1)), col(2)) - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("camera rotation has determinant -1"));
        }
        if !(self.focal > 0.0 && self.focal.is_finite()) || self.size == 0 {
            return Err(Error::invalid(format!("focal {} / size {} invalid", self.focal, self.size)));
        }
        if !self.position.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("camera position is not finite"));
        }
        Ok(())
    }

    /// Unit world-space ray through the centre of pixel `(u, v)`.
    pub fn ray(&self, u: usize, v: usize) -> Ray {
        let d = [
            (u as f64 + 0.5 - self.principal[0]) / self.focal,
            -(v as f64 + 0.5 - self.principal[1]) / self.focal,
            -1.0,
        ];
        let r = &self.rotation;
        let w = [dot(r[0], d), dot(r[1], d), dot(r[2], d)];
        Ray { origin: self.position, dir: normalize(w) }
    }
}

impl PatchSpec {
    pub fn new(u0: usize, v0: usize, width: usize, height: usize, full: usize) -> Result<Self> {
        if width == 0 || height == 0 || u0 + width > full || v0 + height > full {
            return Err(Error::invalid(format!(
                "patch {width}×{height} at ({u0}, {v0}) does not fit a {full}×{full} frame"
            )));
        }
        Ok(Self { u0, v0, width, height, full })
    }

    pub fn square(u0: usize, v0: usize, side: usize, full: usize) -> Result<Self> {
        Self::new(u0, v0, side, side, full)
    }

    pub fn full(size: usize) -> Self {
        Self { u0: 0, v0: 0, width: size, height: size, full: size }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// Frame coordinates of the `i`-th pixel in row-major patch order.
    pub fn frame_pixel(&self, i: usize) -> (usize, usize) {
        (self.u0 + i % self.width, self.v0 + i / self.width)
    }
}

/// One ray per patch pixel, row-major.
pub fn generate_rays(cam: &CameraPose, patch: &PatchSpec) -> Result<Vec<Ray>> {
    cam.validate()?;
    if patch.full != cam.size {
        return Err(Error::invalid(format!("patch frame {} vs camera size {}", patch.full, cam.size)));
    }
    Ok((0..patch.pixels())
        .map(|i| {
            let (u, v) = patch.frame_pixel(i);
            cam.ray(u, v)
        })
        .collect())
}

/// Entry and exit distances of a ray through the cube `[-1, 1]³`, clipped
/// to `t ≥ 0`. `None` when the ray misses.
pub fn ray_aabb(ray: &Ray) -> Option<(f64, f64)> {
    let mut near = 0.0f64;
    let mut far = f64::INFINITY;
    for a in 0..3 {
        let (o, d) = (ray.origin[a], ray.dir[a]);
        if d.abs() < 1e-15 {
            if o.abs() > 1.0 {
                return None;
            }
            continue;
        }
        let t0 = (-1.0 - o) / d;
        let t1 = (1.0 - o) / d;
        near = near.max(t0.min(t1));
        far = far.min(t0.max(t1));
    }
    (far > near + 1e-9).then_some((near, far))
}
