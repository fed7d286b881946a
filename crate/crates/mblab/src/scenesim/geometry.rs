//! Minimal 3-D vector/box geometry and the pinhole camera used by the
//! rasterizer and the ground-truth detector.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn scale(self, c: f64) -> Vec3 {
        Vec3::new(c * self.x, c * self.y, c * self.z)
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn lerp(self, o: Vec3, t: f64) -> Vec3 {
        self.add(o.sub(self).scale(t))
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Aabb { min, max }
    }

    pub fn center(&self) -> Vec3 {
        self.min.add(self.max).scale(0.5)
    }

    pub fn translated(&self, offset: Vec3) -> Aabb {
        Aabb { min: self.min.add(offset), max: self.max.add(offset) }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let (a, b) = (self.min, self.max);
        [
            Vec3::new(a.x, a.y, a.z),
            Vec3::new(b.x, a.y, a.z),
            Vec3::new(a.x, b.y, a.z),
            Vec3::new(b.x, b.y, a.z),
            Vec3::new(a.x, a.y, b.z),
            Vec3::new(b.x, a.y, b.z),
            Vec3::new(a.x, b.y, b.z),
            Vec3::new(b.x, b.y, b.z),
        ]
    }

    /// Slab test: does the closed segment `p0..p1` touch the box?
    pub fn segment_intersects(&self, p0: Vec3, p1: Vec3) -> bool {
        self.clip_segment(p0, p1).is_some()
    }

    /// Returns the parametric interval `[t_enter, t_exit]` of the segment
    /// inside the box, if any.
    pub fn clip_segment(&self, p0: Vec3, p1: Vec3) -> Option<(f64, f64)> {
        let d = p1.sub(p0);
        let mut t_min: f64 = 0.0;
        let mut t_max: f64 = 1.0;
        for (o, dir, lo, hi) in [
            (p0.x, d.x, self.min.x, self.max.x),
            (p0.y, d.y, self.min.y, self.max.y),
            (p0.z, d.z, self.min.z, self.max.z),
        ] {
            if dir.abs() < 1e-300 {
                if o < lo || o > hi {
                    return None;
                }
            } else {
                let mut t1 = (lo - o) / dir;
                let mut t2 = (hi - o) / dir;
                if t1 > t2 {
                    std::mem::swap(&mut t1, &mut t2);
                }
                t_min = t_min.max(t1);
                t_max = t_max.min(t2);
                if t_min > t_max {
                    return None;
                }
            }
        }
        Some((t_min, t_max))
    }

    /// First hit parameter of the ray `origin + t * dir` for `t > 0`.
    pub fn ray_hit(&self, origin: Vec3, dir: Vec3) -> Option<f64> {
        let mut t_min: f64 = 0.0;
        let mut t_max = f64::INFINITY;
        for (o, d, lo, hi) in [
            (origin.x, dir.x, self.min.x, self.max.x),
            (origin.y, dir.y, self.min.y, self.max.y),
            (origin.z, dir.z, self.min.z, self.max.z),
        ] {
            if d.abs() < 1e-300 {
                if o < lo || o > hi {
                    return None;
                }
            } else {
                let mut t1 = (lo - o) / d;
                let mut t2 = (hi - o) / d;
                if t1 > t2 {
                    std::mem::swap(&mut t1, &mut t2);
                }
                t_min = t_min.max(t1);
                t_max = t_max.min(t2);
                if t_min > t_max {
                    return None;
                }
            }
        }
        (t_max > 0.0).then_some(t_min.max(0.0))
    }
}

/// Pinhole camera: yaw-oriented in the horizontal plane, z up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraConfig {
    pub height_px: usize,
    pub width_px: usize,
    /// Horizontal field of view in radians, within `(0, π)`.
    pub fov_h: f64,
    pub position: Vec3,
    pub yaw: f64,
}

impl CameraConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.height_px < 8 || self.width_px < 8 {
            return Err(format!(
                "image must be at least 8x8 pixels, got {}x{}",
                self.height_px, self.width_px
            ));
        }
        if !(self.fov_h > 0.0 && self.fov_h < std::f64::consts::PI) {
            return Err(format!("horizontal FoV {} outside (0, pi)", self.fov_h));
        }
        Ok(())
    }

    pub fn forward(&self) -> Vec3 {
        Vec3::new(self.yaw.cos(), self.yaw.sin(), 0.0)
    }

    pub fn right(&self) -> Vec3 {
        Vec3::new(self.yaw.sin(), -self.yaw.cos(), 0.0)
    }

    pub fn up(&self) -> Vec3 {
        Vec3::new(0.0, 0.0, 1.0)
    }

    pub fn tan_half_fov_h(&self) -> f64 {
        (self.fov_h / 2.0).tan()
    }

    /// Vertical half-FoV tangent for square pixels.
    pub fn tan_half_fov_v(&self) -> f64 {
        self.tan_half_fov_h() * self.height_px as f64 / self.width_px as f64
    }

    /// World-space ray direction through pixel `(row, col)` centers; row 0
    /// is the top of the image.
    pub fn pixel_ray(&self, row: usize, col: usize) -> Vec3 {
        let ndc_x = 2.0 * (col as f64 + 0.5) / self.width_px as f64 - 1.0;
        let ndc_y = 1.0 - 2.0 * (row as f64 + 0.5) / self.height_px as f64;
        self.forward()
            .add(self.right().scale(ndc_x * self.tan_half_fov_h()))
            .add(self.up().scale(ndc_y * self.tan_half_fov_v()))
    }

    /// Projects a world point to normalized image coordinates `(u, v)` in
    /// `[0, 1]^2` when visible; `None` when at or behind the camera plane.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        let rel = p.sub(self.position);
        let depth = rel.dot(self.forward());
        if depth <= 1e-9 {
            return None;
        }
        let sx = rel.dot(self.right()) / (depth * self.tan_half_fov_h());
        let sy = rel.dot(self.up()) / (depth * self.tan_half_fov_v());
        Some(((sx + 1.0) / 2.0, (1.0 - sy) / 2.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_through_box_intersects() {
        let b = Aabb::new(Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0));
        assert!(b.segment_intersects(Vec3::new(-5.0, 0.0, 0.0), Vec3::new(5.0, 0.0, 0.0)));
        assert!(!b.segment_intersects(Vec3::new(-5.0, 2.0, 0.0), Vec3::new(5.0, 2.0, 0.0)));
        // Segment ending before the box.
        assert!(!b.segment_intersects(Vec3::new(-5.0, 0.0, 0.0), Vec3::new(-2.0, 0.0, 0.0)));
        // Degenerate direction along one axis, inside the slab.
        assert!(b.segment_intersects(Vec3::new(0.5, -3.0, 0.0), Vec3::new(0.5, 3.0, 0.0)));
    }

    #[test]
    fn segment_test_is_symmetric_in_endpoints() {
        let b = Aabb::new(Vec3::new(0.0, 0.0, 0.0), Vec3::new(2.0, 3.0, 4.0));
        let cases = [
            (Vec3::new(-1.0, 1.0, 1.0), Vec3::new(3.0, 1.0, 1.0)),
            (Vec3::new(-1.0, -1.0, 1.0), Vec3::new(3.0, 5.0, 1.0)),
            (Vec3::new(-1.0, 4.0, 1.0), Vec3::new(3.0, 6.0, 1.0)),
        ];
        for (p0, p1) in cases {
            assert_eq!(b.segment_intersects(p0, p1), b.segment_intersects(p1, p0));
        }
    }

    #[test]
    fn ray_hit_reports_nearest_entry() {
        let b = Aabb::new(Vec3::new(3.0, -1.0, -1.0), Vec3::new(5.0, 1.0, 1.0));
        let t = b.ray_hit(Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)).unwrap();
        assert!((t - 3.0).abs() < 1e-12);
        assert!(b.ray_hit(Vec3::new(0.0, 0.0, 0.0), Vec3::new(-1.0, 0.0, 0.0)).is_none());
    }

    #[test]
    fn projection_centers_boresight_point() {
        let cam = CameraConfig {
            height_px: 32,
            width_px: 32,
            fov_h: 1.2,
            position: Vec3::new(0.0, 0.0, 2.0),
            yaw: 0.0,
        };
        let (u, v) = cam.project(Vec3::new(10.0, 0.0, 2.0)).unwrap();
        assert!((u - 0.5).abs() < 1e-12 && (v - 0.5).abs() < 1e-12);
        assert!(cam.project(Vec3::new(-1.0, 0.0, 2.0)).is_none());
    }

    #[test]
    fn pixel_rays_span_the_fov() {
        let cam = CameraConfig {
            height_px: 16,
            width_px: 16,
            fov_h: 1.0,
            position: Vec3::new(0.0, 0.0, 0.0),
            yaw: std::f64::consts::FRAC_PI_2,
        };
        let left = cam.pixel_ray(8, 0);
        let right = cam.pixel_ray(8, 15);
        // Both rays lean toward +y (the boresight) and mirror in x.
        assert!(left.y > 0.0 && right.y > 0.0);
        assert!((left.x + right.x).abs() < 1e-9);
    }
}
