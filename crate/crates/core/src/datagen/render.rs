//! Depth z-buffer rasterization of object crops and back-projection of the
//! visible surface into camera-frame points.

use nalgebra::Vector3;
use ndarray::{Array2, Array3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::pose::Pose9D;

use super::mesh::TriMesh;

/// Pinhole camera for one object crop. Pixel `(row, col)` centers are at
/// `(col + 0.5, row + 0.5)`; `u = cx + fx X/Z`, `v = cy - fy Y/Z` (+Y up).
#[derive(Debug, Clone, Copy)]
pub struct CropCamera {
    pub size: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CropCamera {
    /// Camera whose principal point centers the object and whose focal length
    /// makes the bounding sphere fill `fill` of the half-frame.
    pub fn fit(center: &Vector3<f64>, bound_radius: f64, size: usize, fill: f64) -> Result<Self> {
        if center[2] <= bound_radius {
            return Err(Error::InvalidInput(
                "object behind or intersecting the camera plane".into(),
            ));
        }
        let f = fill * (size as f64 / 2.0) * center[2] / bound_radius;
        Ok(CropCamera {
            size,
            fx: f,
            fy: f,
            cx: size as f64 / 2.0 - f * center[0] / center[2],
            cy: size as f64 / 2.0 + f * center[1] / center[2],
        })
    }

    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (
            self.cx + self.fx * p[0] / p[2],
            self.cy - self.fy * p[1] / p[2],
        )
    }

    /// Camera-frame point of the pixel-center ray `(col+0.5, row+0.5)` at
    /// depth `z`.
    pub fn back_project(&self, row: usize, col: usize, z: f64) -> Vector3<f64> {
        let u = col as f64 + 0.5;
        let v = row as f64 + 0.5;
        Vector3::new(
            (u - self.cx) / self.fx * z,
            -(v - self.cy) / self.fy * z,
            z,
        )
    }
}

/// Raster output: shaded image, exact mask, and per-pixel depth.
pub struct Raster {
    pub image: Array3<f64>,
    pub mask: Array2<bool>,
    pub depth: Array2<f64>,
}

const NEAR_PLANE: f64 = 0.05;
const LIGHT_DIR: [f64; 3] = [-0.37139067635410367, 0.5570860145311555, -0.7427813527082073];

/// Flat-shaded z-buffer rasterization of `mesh` under `pose`.
///
/// Depth at a covered pixel comes from the exact ray/triangle-plane
/// intersection, so back-projected points lie on the surface to machine
/// precision.
pub fn rasterize(mesh: &TriMesh, pose: &Pose9D, cam: &CropCamera, albedo: [f64; 3]) -> Raster {
    let n = cam.size;
    let mut depth = Array2::from_elem((n, n), f64::INFINITY);
    let mut mask = Array2::from_elem((n, n), false);
    let mut image = Array3::zeros((3, n, n));
    // background gradient
    for row in 0..n {
        let shade = 0.08 + 0.05 * row as f64 / n as f64;
        for col in 0..n {
            for ch in 0..3 {
                image[(ch, row, col)] = shade;
            }
        }
    }
    let light = Vector3::new(LIGHT_DIR[0], LIGHT_DIR[1], LIGHT_DIR[2]);
    let verts: Vec<Vector3<f64>> = mesh
        .vertices
        .iter()
        .map(|v| pose.transform_point(*v))
        .collect();
    for (ti, tri) in mesh.triangles.iter().enumerate() {
        let a = verts[tri[0]];
        let b = verts[tri[1]];
        let c = verts[tri[2]];
        if a[2] < NEAR_PLANE || b[2] < NEAR_PLANE || c[2] < NEAR_PLANE {
            continue;
        }
        let pa = cam.project(&a);
        let pb = cam.project(&b);
        let pc = cam.project(&c);
        let min_u = pa.0.min(pb.0).min(pc.0).floor().max(0.0) as usize;
        let max_u = (pa.0.max(pb.0).max(pc.0).ceil() as isize).min(n as isize - 1);
        let min_v = pa.1.min(pb.1).min(pc.1).floor().max(0.0) as usize;
        let max_v = (pa.1.max(pb.1).max(pc.1).ceil() as isize).min(n as isize - 1);
        if max_u < min_u as isize || max_v < min_v as isize {
            continue;
        }
        // camera-frame plane of the triangle
        let normal = (b - a).cross(&(c - a));
        if normal.norm() < 1e-18 {
            continue;
        }
        let plane_d = normal.dot(&a);
        let n_unit = normal.normalize();
        let lambert = 0.25 + 0.75 * n_unit.dot(&light).abs();
        let shade = [
            (albedo[0] * lambert).clamp(0.0, 1.0),
            (albedo[1] * lambert).clamp(0.0, 1.0),
            (albedo[2] * lambert).clamp(0.0, 1.0),
        ];
        // mesh triangle normal for a lighting wink keyed to the face id, so
        // flat regions still carry a little texture
        let tint = 1.0 - 0.06 * ((ti * 2654435761) % 7) as f64 / 7.0;

        let edge = |p: (f64, f64), q: (f64, f64), x: f64, y: f64| {
            (q.0 - p.0) * (y - p.1) - (q.1 - p.1) * (x - p.0)
        };
        let area = edge(pa, pb, pc.0, pc.1);
        if area.abs() < 1e-12 {
            continue;
        }
        for row in min_v as usize..=max_v as usize {
            for col in min_u..=max_u as usize {
                let x = col as f64 + 0.5;
                let y = row as f64 + 0.5;
                let w0 = edge(pb, pc, x, y) / area;
                let w1 = edge(pc, pa, x, y) / area;
                let w2 = edge(pa, pb, x, y) / area;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                // exact ray-plane depth along the pixel-center ray
                let dir = Vector3::new((x - cam.cx) / cam.fx, -(y - cam.cy) / cam.fy, 1.0);
                let denom = normal.dot(&dir);
                if denom.abs() < 1e-15 {
                    continue;
                }
                let z = plane_d / denom;
                if z < NEAR_PLANE || z >= depth[(row, col)] {
                    continue;
                }
                depth[(row, col)] = z;
                mask[(row, col)] = true;
                for ch in 0..3 {
                    image[(ch, row, col)] = shade[ch] * tint;
                }
            }
        }
    }
    Raster { image, mask, depth }
}

/// Farthest-point ordering of `candidates`, seeded at index 0. The returned
/// indices have the property that every prefix is itself a farthest-point
/// sample, so truncating keeps good coverage.
pub fn farthest_point_order(candidates: &[Vector3<f64>], count: usize) -> Vec<usize> {
    if candidates.is_empty() {
        return Vec::new();
    }
    let take = count.min(candidates.len());
    let mut order = Vec::with_capacity(take);
    let mut min_d2 = vec![f64::INFINITY; candidates.len()];
    let mut current = 0usize;
    order.push(current);
    for _ in 1..take {
        let picked = candidates[current];
        let mut best = (0usize, f64::NEG_INFINITY);
        for (i, p) in candidates.iter().enumerate() {
            let d2 = (p - picked).norm_squared();
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
            if min_d2[i] > best.1 {
                best = (i, min_d2[i]);
            }
        }
        current = best.0;
        order.push(current);
    }
    order
}

/// Visible-surface point sample of one rasterized object.
///
/// Returns exactly `count` camera-frame points in farthest-point order
/// (cycled if fewer pixels are visible) before any depth noise.
pub fn sample_visible_points(
    raster: &Raster,
    cam: &CropCamera,
    count: usize,
) -> Result<Vec<Vector3<f64>>> {
    let mut candidates = Vec::new();
    for row in 0..cam.size {
        for col in 0..cam.size {
            if raster.mask[(row, col)] {
                candidates.push(cam.back_project(row, col, raster.depth[(row, col)]));
            }
        }
    }
    if candidates.is_empty() {
        return Err(Error::InvalidInput("object not visible in the crop".into()));
    }
    let order = farthest_point_order(&candidates, count);
    let mut pts: Vec<Vector3<f64>> = order.iter().map(|&i| candidates[i]).collect();
    let mut i = 0;
    while pts.len() < count {
        pts.push(pts[i]);
        i += 1;
    }
    Ok(pts)
}

/// Applies Gaussian depth noise along the viewing ray.
pub fn apply_depth_noise(points: &mut [Vector3<f64>], sigma: f64, rng: &mut impl Rng) {
    if sigma <= 0.0 {
        return;
    }
    for p in points.iter_mut() {
        let delta: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * sigma;
        let z = p[2];
        if z > 1e-9 {
            *p *= (z + delta) / z;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::mesh::box_mesh;
    use crate::pose::Rotation3;

    fn test_pose(z: f64) -> Pose9D {
        Pose9D::new(
            Vector3::new(0.0, 0.0, z),
            Rotation3::identity(),
            Vector3::new(0.1, 0.1, 0.1),
        )
        .unwrap()
    }

    #[test]
    fn projection_roundtrip() {
        let cam = CropCamera {
            size: 64,
            fx: 120.0,
            fy: 120.0,
            cx: 32.0,
            cy: 32.0,
        };
        let p = Vector3::new(0.03, -0.04, 0.6);
        let (u, v) = cam.project(&p);
        // reconstruct from continuous coordinates
        let q = Vector3::new((u - cam.cx) / cam.fx * 0.6, -(v - cam.cy) / cam.fy * 0.6, 0.6);
        assert!((p - q).norm() < 1e-12);
    }

    #[test]
    fn raster_points_lie_on_surface() {
        let mesh = box_mesh(0.1, 0.1, 0.1);
        let pose = test_pose(0.6);
        let cam = CropCamera::fit(&pose.translation, 0.09, 64, 0.7).unwrap();
        let raster = rasterize(&mesh, &pose, &cam, [0.8, 0.3, 0.2]);
        let pts = sample_visible_points(&raster, &cam, 256).unwrap();
        // transform back to canonical frame and check against the mesh
        for p in &pts {
            let local = pose.rotation.matrix().transpose() * (p - pose.translation);
            assert!(
                mesh.distance_to_surface(&local) < 1e-6,
                "point {local:?} off surface by {}",
                mesh.distance_to_surface(&local)
            );
        }
    }

    #[test]
    fn mask_matches_depth() {
        let mesh = box_mesh(0.08, 0.12, 0.06);
        let pose = test_pose(0.5);
        let cam = CropCamera::fit(&pose.translation, 0.08, 48, 0.7).unwrap();
        let raster = rasterize(&mesh, &pose, &cam, [0.5, 0.5, 0.5]);
        let mut hits = 0;
        for row in 0..48 {
            for col in 0..48 {
                assert_eq!(raster.mask[(row, col)], raster.depth[(row, col)].is_finite());
                if raster.mask[(row, col)] {
                    hits += 1;
                }
            }
        }
        assert!(hits > 200, "object should cover a good crop fraction, got {hits}");
    }

    #[test]
    fn farthest_point_prefix_property() {
        let pts: Vec<Vector3<f64>> = (0..100)
            .map(|i| Vector3::new((i % 10) as f64, (i / 10) as f64, 0.0))
            .collect();
        let order = farthest_point_order(&pts, 100);
        assert_eq!(order.len(), 100);
        let mut seen = std::collections::HashSet::new();
        for i in order {
            assert!(seen.insert(i), "duplicate index {i}");
        }
    }
}
