use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::point::Point3;

pub type Mat3 = [[f64; 3]; 3];

pub(crate) fn mat_vec(m: &Mat3, v: &Point3) -> Point3 {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

pub(crate) fn mat_t_vec(m: &Mat3, v: &Point3) -> Point3 {
    [0, 1, 2].map(|i| m[0][i] * v[0] + m[1][i] * v[1] + m[2][i] * v[2])
}

pub(crate) fn sub(a: &Point3, b: &Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn add(a: &Point3, b: &Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn scale(a: &Point3, s: f64) -> Point3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn dot(a: &Point3, b: &Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: &Point3, b: &Point3) -> Point3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn norm(a: &Point3) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn normalize(a: &Point3) -> Point3 {
    scale(a, 1.0 / norm(a))
}

fn det(m: &Mat3) -> f64 {
    dot(&m[0], &cross(&m[1], &m[2]))
}

/// Pinhole camera. Camera frame: x right, y down, z forward; `p_cam = R p + t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub focal: f64,
    /// `(cx, cy)` in pixels; pixel `(row, col)` has its center at `(col, row)`.
    pub principal_point: [f64; 2],
    pub height: usize,
    pub width: usize,
    pub rotation: Mat3,
    pub translation: Point3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Front { row: f64, col: f64, depth: f64 },
    Behind,
}

impl Projection {
    /// Nearest pixel when it lies inside a `height x width` image.
    pub fn pixel(&self, height: usize, width: usize) -> Option<(usize, usize)> {
        match *self {
            Projection::Front { row, col, .. } => {
                let (r, c) = (row.round(), col.round());
                (r >= 0.0 && c >= 0.0 && r < height as f64 && c < width as f64).then_some((r as usize, c as usize))
            }
            Projection::Behind => None,
        }
    }
}

impl CameraModel {
    pub fn new(
        focal: f64,
        principal_point: [f64; 2],
        height: usize,
        width: usize,
        rotation: Mat3,
        translation: Point3,
    ) -> Result<Self> {
        let cam = CameraModel { focal, principal_point, height, width, rotation, translation };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) || self.height == 0 || self.width == 0 {
            return Err(Error::invalid("camera", "focal and image size must be positive"));
        }
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot(&r[i], &r[j]) - want).abs() > 1e-9 {
                    return Err(Error::invalid("camera", "rotation is not orthonormal"));
                }
            }
        }
        if (det(r) - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("camera", format!("rotation determinant {}", det(r))));
        }
        if self.principal_point.iter().chain(&self.translation).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("camera".into()));
        }
        Ok(())
    }

    /// Camera looking along `forward` (world frame) with image-up closest to
    /// world +z, placed at `center`.
    pub fn look(focal: f64, height: usize, width: usize, center: Point3, forward: Point3) -> Result<Self> {
        let f = normalize(&forward);
        let right = cross(&f, &[0.0, 0.0, 1.0]);
        if norm(&right) < 1e-9 {
            return Err(Error::invalid("camera", "forward is vertical"));
        }
        let right = normalize(&right);
        let down = cross(&f, &right);
        let rotation = [right, down, f];
        let translation = scale(&mat_vec(&rotation, &center), -1.0);
        let principal = [(width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0];
        Self::new(focal, principal, height, width, rotation, translation)
    }

    pub fn center(&self) -> Point3 {
        scale(&mat_t_vec(&self.rotation, &self.translation), -1.0)
    }

    pub fn to_camera(&self, p: &Point3) -> Point3 {
        add(&mat_vec(&self.rotation, p), &self.translation)
    }

    pub fn project_point(&self, p: &Point3) -> Projection {
        let [x, y, z] = self.to_camera(p);
        if z <= 0.0 {
            return Projection::Behind;
        }
        Projection::Front {
            row: self.focal * y / z + self.principal_point[1],
            col: self.focal * x / z + self.principal_point[0],
            depth: z,
        }
    }

    /// Unit world-frame direction of the ray through continuous pixel
    /// coordinates `(row, col)`.
    pub fn ray_direction(&self, row: f64, col: f64) -> Point3 {
        let d = [
            (col - self.principal_point[0]) / self.focal,
            (row - self.principal_point[1]) / self.focal,
            1.0,
        ];
        normalize(&mat_t_vec(&self.rotation, &d))
    }
}
