//! Procedural triangle meshes for the toy object categories plus surface
//! sampling utilities.
//!
//! Meshes live in the canonical object frame with the bounding box centered
//! at the origin; the symmetry axis of rotationally symmetric shapes is +Y.

use nalgebra::Vector3;
use rand::Rng;

/// Indexed triangle mesh.
#[derive(Debug, Clone)]
pub struct TriMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }

    /// Translates all vertices so the bounding box is centered at the origin.
    pub fn center_to_bbox(&mut self) -> Vector3<f64> {
        let (lo, hi) = self.bounds();
        let center = (lo + hi) / 2.0;
        for v in &mut self.vertices {
            *v -= center;
        }
        center
    }

    pub fn triangle(&self, i: usize) -> [Vector3<f64>; 3] {
        let t = self.triangles[i];
        [self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]]]
    }

    pub fn triangle_area(&self, i: usize) -> f64 {
        let [a, b, c] = self.triangle(i);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn triangle_normal(&self, i: usize) -> Vector3<f64> {
        let [a, b, c] = self.triangle(i);
        let n = (b - a).cross(&(c - a));
        let len = n.norm();
        if len > 1e-18 {
            n / len
        } else {
            Vector3::new(0.0, 1.0, 0.0)
        }
    }

    /// Area-weighted surface samples; points lie exactly on triangle planes.
    pub fn sample_surface(&self, count: usize, rng: &mut impl Rng) -> Vec<Vector3<f64>> {
        let areas: Vec<f64> = (0..self.triangles.len())
            .map(|i| self.triangle_area(i))
            .collect();
        let total: f64 = areas.iter().sum();
        let mut cumulative = Vec::with_capacity(areas.len());
        let mut acc = 0.0;
        for a in &areas {
            acc += a;
            cumulative.push(acc);
        }
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let target = rng.gen_range(0.0..total);
            let idx = cumulative
                .partition_point(|&c| c < target)
                .min(self.triangles.len() - 1);
            let [a, b, c] = self.triangle(idx);
            let mut u: f64 = rng.gen();
            let mut v: f64 = rng.gen();
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            out.push(a + (b - a) * u + (c - a) * v);
        }
        out
    }

    /// Distance from `p` to the closest triangle (used by generator checks).
    pub fn distance_to_surface(&self, p: &Vector3<f64>) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.triangles.len() {
            let [a, b, c] = self.triangle(i);
            best = best.min(point_triangle_distance(p, &a, &b, &c));
        }
        best
    }

    fn push_quad(&mut self, a: usize, b: usize, c: usize, d: usize) {
        self.triangles.push([a, b, c]);
        self.triangles.push([a, c, d]);
    }
}

/// Closest distance between a point and a triangle (Ericson's method).
pub fn point_triangle_distance(
    p: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
) -> f64 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return ap.norm();
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return bp.norm();
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (ap - ab * v).norm();
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return cp.norm();
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (ap - ac * w).norm();
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        let proj = b + (c - b) * w;
        return (p - proj).norm();
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    let proj = a + ab * v + ac * w;
    (p - proj).norm()
}

/// Axis-aligned box with extents `(ex, ey, ez)` centered at the origin.
pub fn box_mesh(ex: f64, ey: f64, ez: f64) -> TriMesh {
    let (hx, hy, hz) = (ex / 2.0, ey / 2.0, ez / 2.0);
    let mut m = TriMesh {
        vertices: Vec::new(),
        triangles: Vec::new(),
    };
    for &sz in &[-hz, hz] {
        for &sy in &[-hy, hy] {
            for &sx in &[-hx, hx] {
                m.vertices.push(Vector3::new(sx, sy, sz));
            }
        }
    }
    // vertex index: x + 2y + 4z (0/1 per axis)
    m.push_quad(0, 1, 3, 2); // z = -hz
    m.push_quad(4, 6, 7, 5); // z = +hz
    m.push_quad(0, 4, 5, 1); // y = -hy
    m.push_quad(2, 3, 7, 6); // y = +hy
    m.push_quad(0, 2, 6, 4); // x = -hx
    m.push_quad(1, 5, 7, 3); // x = +hx
    m
}

/// Offsets every vertex of `addition` by `offset` and merges it into `base`.
pub fn merge_meshes(base: &mut TriMesh, addition: &TriMesh, offset: Vector3<f64>) {
    let start = base.vertices.len();
    base.vertices
        .extend(addition.vertices.iter().map(|v| v + offset));
    base.triangles
        .extend(addition.triangles.iter().map(|t| [t[0] + start, t[1] + start, t[2] + start]));
}

/// Surface of revolution around +Y. The profile is a polyline of
/// `(radius, y)` pairs from bottom to top; zero radii become pole fans.
pub fn lathe_mesh(profile: &[(f64, f64)], segments: usize) -> TriMesh {
    let mut m = TriMesh {
        vertices: Vec::new(),
        triangles: Vec::new(),
    };
    // Ring (or pole vertex) per profile point.
    let mut rings: Vec<Vec<usize>> = Vec::new();
    for &(r, y) in profile {
        if r.abs() < 1e-12 {
            let idx = m.vertices.len();
            m.vertices.push(Vector3::new(0.0, y, 0.0));
            rings.push(vec![idx]);
        } else {
            let mut ring = Vec::with_capacity(segments);
            for k in 0..segments {
                let th = 2.0 * std::f64::consts::PI * k as f64 / segments as f64;
                ring.push(m.vertices.len());
                m.vertices.push(Vector3::new(r * th.cos(), y, r * th.sin()));
            }
            rings.push(ring);
        }
    }
    for w in 0..profile.len() - 1 {
        let (r0, r1) = (&rings[w], &rings[w + 1]);
        match (r0.len(), r1.len()) {
            (1, 1) => {}
            (1, _) => {
                for k in 0..segments {
                    let k1 = (k + 1) % segments;
                    m.triangles.push([r0[0], r1[k1], r1[k]]);
                }
            }
            (_, 1) => {
                for k in 0..segments {
                    let k1 = (k + 1) % segments;
                    m.triangles.push([r0[k], r0[k1], r1[0]]);
                }
            }
            _ => {
                for k in 0..segments {
                    let k1 = (k + 1) % segments;
                    m.triangles.push([r0[k], r0[k1], r1[k1]]);
                    m.triangles.push([r0[k], r1[k1], r1[k]]);
                }
            }
        }
    }
    m
}

/// Cylinder body with a narrower top cylinder (a crude bottle). The distinct
/// ends make the axis direction observable from geometry.
pub fn canister_mesh(radius: f64, height: f64, segments: usize) -> TriMesh {
    let shoulder_y = height / 2.0 - 0.28 * height;
    let neck_r = 0.55 * radius;
    let profile = [
        (0.0, -height / 2.0),
        (radius, -height / 2.0),
        (radius, shoulder_y),
        (neck_r, shoulder_y),
        (neck_r, height / 2.0),
        (0.0, height / 2.0),
    ];
    let mut m = lathe_mesh(&profile, segments);
    m.center_to_bbox();
    m
}

/// Open hemispherical shell with the rim up (+Y); concave interior.
pub fn bowl_mesh(radius: f64, wall: f64, segments: usize, rings: usize) -> TriMesh {
    let inner = (radius - wall).max(radius * 0.5);
    let mut profile = Vec::new();
    // outer surface: bottom pole to rim
    for i in 0..=rings {
        let phi = std::f64::consts::FRAC_PI_2 * i as f64 / rings as f64;
        profile.push((radius * phi.sin(), -radius * phi.cos()));
    }
    // rim annulus then inner surface back down
    for i in (0..=rings).rev() {
        let phi = std::f64::consts::FRAC_PI_2 * i as f64 / rings as f64;
        profile.push((inner * phi.sin(), -inner * phi.cos()));
    }
    let mut m = lathe_mesh(&profile, segments);
    m.center_to_bbox();
    m
}

/// Main box plus a half-size ridge on one top corner; no rotational symmetry.
pub fn block_mesh(ex: f64, ey: f64, ez: f64) -> TriMesh {
    let mut m = box_mesh(ex, ey, ez);
    let ridge = box_mesh(ex / 2.0, ey / 2.0, ez / 3.0);
    merge_meshes(
        &mut m,
        &ridge,
        Vector3::new(ex / 4.0, ey / 2.0 + ey / 4.0, -ez / 2.0 + ez / 6.0),
    );
    m.center_to_bbox();
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn box_bounds_and_area() {
        let m = box_mesh(1.0, 2.0, 3.0);
        let (lo, hi) = m.bounds();
        assert_eq!(lo, Vector3::new(-0.5, -1.0, -1.5));
        assert_eq!(hi, Vector3::new(0.5, 1.0, 1.5));
        let area: f64 = (0..m.triangles.len()).map(|i| m.triangle_area(i)).sum();
        let expected = 2.0 * (1.0 * 2.0 + 2.0 * 3.0 + 1.0 * 3.0);
        assert!((area - expected).abs() < 1e-12);
    }

    #[test]
    fn samples_lie_on_surface() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        for mesh in [
            box_mesh(0.1, 0.12, 0.08),
            canister_mesh(0.04, 0.12, 24),
            bowl_mesh(0.06, 0.01, 24, 6),
            block_mesh(0.1, 0.06, 0.08),
        ] {
            for p in mesh.sample_surface(200, &mut rng) {
                assert!(mesh.distance_to_surface(&p) < 1e-9);
            }
        }
    }

    #[test]
    fn unit_box_samples_span_half_cube() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let m = box_mesh(1.0, 1.0, 1.0);
        let pts = m.sample_surface(2000, &mut rng);
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        let mut on_face = 0;
        for p in &pts {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
                if p[k].abs() == 0.5 {
                    on_face += 1;
                }
            }
        }
        // Every sample sits on some face plane exactly.
        assert_eq!(on_face, pts.len());
        assert!(hi.amax() <= 0.5 && lo.amin() >= -0.5);
    }

    #[test]
    fn bowl_is_concave_shell() {
        let m = bowl_mesh(0.06, 0.008, 24, 6);
        let (lo, hi) = m.bounds();
        // height is roughly the radius, footprint the diameter
        assert!((hi[0] - lo[0] - 0.12).abs() < 1e-9);
        assert!((hi[1] - lo[1] - 0.06).abs() < 1e-9);
        // interior point just below the rim center must be close to the inner
        // surface, not embedded in solid material
        let interior = Vector3::new(0.0,(hi[1] + lo[1]) / 2.0 + 0.02, 0.0);
        assert!(m.distance_to_surface(&interior) < 0.06);
    }

    #[test]
    fn block_breaks_rotational_symmetry() {
        let m = block_mesh(0.1, 0.06, 0.08);
        // Rotating samples 180 deg about any principal axis must leave points
        // off the surface (the ridge moves).
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let pts = m.sample_surface(400, &mut rng);
        for axis in [Vector3::x(), Vector3::y(), Vector3::z()] {
            let rot = nalgebra::Rotation3::from_axis_angle(
                &nalgebra::Unit::new_normalize(axis),
                std::f64::consts::PI,
            );
            let max_dev = pts
                .iter()
                .map(|p| m.distance_to_surface(&(rot * p)))
                .fold(0.0f64, f64::max);
            assert!(
                max_dev > 0.005,
                "180 deg about {axis:?} leaves the shape invariant (max dev {max_dev})"
            );
        }
    }
}
