//! Condition extraction: time-step embedding, image and point-cloud encoders,
//! the two-branch shape estimator/encoder, and the shape losses.
//!
//! The condition vector is the fixed-order concatenation
//! `c = [c_timestep, c_rgb, c_point, c_shape]`. Ablation flags zero individual
//! slots while preserving the overall width.

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    self, global_mean_pool, global_mean_pool_backward, max_pool_groups, max_pool_groups_backward,
    relu, relu_backward, Conv2d, ConvCache, Linear, ParamView,
};

/// Per-slot widths of the condition vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionDims {
    pub timestep: usize,
    pub rgb: usize,
    pub point: usize,
    pub shape: usize,
}

impl ConditionDims {
    /// Paper-scale widths: 256 + 512 + 512 + 256 = 1536.
    pub fn full() -> Self {
        ConditionDims {
            timestep: 256,
            rgb: 512,
            point: 512,
            shape: 256,
        }
    }

    /// Desk-scale widths: 64 + 128 + 128 + 64 = 384.
    pub fn desk() -> Self {
        ConditionDims {
            timestep: 64,
            rgb: 128,
            point: 128,
            shape: 64,
        }
    }

    pub fn total(&self) -> usize {
        self.timestep + self.rgb + self.point + self.shape
    }

    /// Slot offsets `[timestep, rgb, point, shape, end]` inside `c`.
    pub fn offsets(&self) -> [usize; 5] {
        let a = self.timestep;
        let b = a + self.rgb;
        let c = b + self.point;
        [0, a, b, c, c + self.shape]
    }
}

/// Width of the per-point local features fed to the shape estimator.
pub const LOCAL_DIM: usize = 64;

/// Inference-time ablation switches; each zeroes one slot of `c`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub drop_rgb: bool,
    pub drop_point: bool,
    pub drop_shape: bool,
    /// Test-only: removes the time-step condition the sampler relies on.
    pub drop_timestep: bool,
}

/// One observed object: an RGB crop, the sampled point cloud, and the
/// category id.
#[derive(Debug, Clone)]
pub struct ObservationBatch {
    /// `(3, H, W)`, values in `[0, 1]`.
    pub image: Array3<f64>,
    /// `(n, 3)` meters, camera frame.
    pub points: Array2<f64>,
    pub category_id: usize,
}

impl ObservationBatch {
    pub fn new(image: Array3<f64>, points: Array2<f64>, category_id: usize) -> Result<Self> {
        if points.ncols() != 3 || points.nrows() == 0 {
            return Err(Error::ShapeMismatch {
                expected: "(n, 3) points".into(),
                got: format!("{:?}", points.dim()),
            });
        }
        if image.dim().0 != 3 {
            return Err(Error::ShapeMismatch {
                expected: "(3, H, W) image".into(),
                got: format!("{:?}", image.dim()),
            });
        }
        if !image.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("image values outside [0, 1]".into()));
        }
        if !points.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite points".into()));
        }
        Ok(ObservationBatch {
            image,
            points,
            category_id,
        })
    }
}

/// Condition vector and its four parts.
#[derive(Debug, Clone)]
pub struct ConditionVector {
    pub c_timestep: Array1<f64>,
    pub c_rgb: Array1<f64>,
    pub c_point: Array1<f64>,
    pub c_shape: Array1<f64>,
    /// Concatenation in the fixed slot order.
    pub c: Array1<f64>,
}

/// Estimated canonical shape and NOCS shape, one row per input point.
#[derive(Debug, Clone)]
pub struct ShapeOutputs {
    /// `(n, 3)` canonical-frame shape, meters.
    pub r_s: Array2<f64>,
    /// `(n, 3)` NOCS coordinates, nominally inside `[-0.5, 0.5]^3`.
    pub n_s: Array2<f64>,
}

/// Soft bound on NOCS outputs; exceeding it is logged, not an error.
pub const NOCS_SOFT_BOUND: f64 = 0.6;

// ---------------------------------------------------------------------------
// Time-step embedding
// ---------------------------------------------------------------------------

/// Sinusoidal features of the time step followed by a two-layer map.
pub struct TimestepEmbed {
    pub sin_dim: usize,
    pub out_dim: usize,
    pub t_max: usize,
    lin1: Linear,
    lin2: Linear,
}

pub struct TimestepCache {
    feats: Array2<f64>,
    h_pre: Array2<f64>,
}

impl TimestepEmbed {
    pub fn new(out_dim: usize, t_max: usize, rng: &mut impl Rng) -> Self {
        let sin_dim = (out_dim / 2).max(16);
        TimestepEmbed {
            sin_dim,
            out_dim,
            t_max,
            lin1: Linear::new("t_embed.lin1", sin_dim, out_dim, rng),
            lin2: Linear::new("t_embed.lin2", out_dim, out_dim, rng),
        }
    }

    fn sin_features(&self, t: usize) -> Array1<f64> {
        let half = self.sin_dim / 2;
        let mut out = Array1::zeros(self.sin_dim);
        for k in 0..half {
            let freq = (10_000f64).powf(-(k as f64) / half as f64);
            let angle = t as f64 * freq;
            out[2 * k] = angle.sin();
            out[2 * k + 1] = angle.cos();
        }
        out
    }

    pub fn forward_batch(&self, ts: &[usize]) -> Result<(Array2<f64>, TimestepCache)> {
        for &t in ts {
            if t < 1 || t > self.t_max {
                return Err(Error::StepOutOfRange {
                    t,
                    t_max: self.t_max,
                });
            }
        }
        let mut feats = Array2::zeros((ts.len(), self.sin_dim));
        for (i, &t) in ts.iter().enumerate() {
            feats.row_mut(i).assign(&self.sin_features(t));
        }
        let h_pre = self.lin1.forward(&feats);
        let h = nn::gelu(&h_pre);
        let y = self.lin2.forward(&h);
        Ok((y, TimestepCache { feats, h_pre }))
    }

    pub fn backward(&mut self, cache: &TimestepCache, gy: &Array2<f64>) {
        let h = nn::gelu(&cache.h_pre);
        let gh = self.lin2.backward(&h, gy);
        let gh_pre = nn::gelu_backward(&cache.h_pre, &gh);
        self.lin1.backward(&cache.feats, &gh_pre);
    }

    /// Single-step embedding (the `embed_timestep` operation).
    pub fn embed(&self, t: usize) -> Result<Array1<f64>> {
        let (y, _) = self.forward_batch(&[t])?;
        Ok(y.row(0).to_owned())
    }

    pub fn params(&mut self) -> Vec<ParamView<'_>> {
        let mut p = self.lin1.params();
        p.extend(self.lin2.params());
        p
    }
}

// ---------------------------------------------------------------------------
// Image encoder
// ---------------------------------------------------------------------------

/// Four stride-2 conv blocks with ReLU, global mean pooling, and a final
/// projection to the RGB condition width.
pub struct ImageEncoder {
    pub image_size: usize,
    pub out_dim: usize,
    convs: Vec<Conv2d>,
    fc: Linear,
}

pub struct ImageCache {
    conv_caches: Vec<ConvCache>,
    pre_acts: Vec<Array4<f64>>,
    pooled: Array2<f64>,
    final_hw: (usize, usize),
}

impl ImageEncoder {
    pub fn new(image_size: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        // Channel ramp keyed to the output width: 512 -> (16, 32, 64, 128).
        let base = (out_dim / 32).max(4);
        let chans = [base, base * 2, base * 4, base * 8];
        let mut convs = Vec::new();
        let mut c_in = 3;
        for (i, &c_out) in chans.iter().enumerate() {
            convs.push(Conv2d::new(&format!("img.conv{i}"), c_in, c_out, rng));
            c_in = c_out;
        }
        let fc = Linear::new("img.fc", chans[3], out_dim, rng);
        ImageEncoder {
            image_size,
            out_dim,
            convs,
            fc,
        }
    }

    /// `(B, 3, H, W)` -> `(B, out_dim)`.
    pub fn forward(&self, x: &Array4<f64>) -> Result<(Array2<f64>, ImageCache)> {
        let (_, c, h, w) = x.dim();
        if c != 3 || h != self.image_size || w != self.image_size {
            return Err(Error::ShapeMismatch {
                expected: format!("(B, 3, {0}, {0}) image batch", self.image_size),
                got: format!("{:?}", x.dim()),
            });
        }
        let mut cur = x.clone();
        let mut conv_caches = Vec::new();
        let mut pre_acts = Vec::new();
        for conv in &self.convs {
            let (y, cache) = conv.forward(&cur);
            conv_caches.push(cache);
            pre_acts.push(y.clone());
            cur = y.mapv(|v| v.max(0.0));
        }
        let (_, _, fh, fw) = cur.dim();
        let pooled = global_mean_pool(&cur);
        let out = self.fc.forward(&pooled);
        Ok((
            out,
            ImageCache {
                conv_caches,
                pre_acts,
                pooled,
                final_hw: (fh, fw),
            },
        ))
    }

    pub fn backward(&mut self, cache: &ImageCache, gy: &Array2<f64>) {
        let gpool = self.fc.backward(&cache.pooled, gy);
        let mut g = global_mean_pool_backward(&gpool, cache.final_hw.0, cache.final_hw.1);
        for i in (0..self.convs.len()).rev() {
            // ReLU backward on the pre-activation.
            let mut gz = g.clone();
            gz.zip_mut_with(&cache.pre_acts[i], |gv, &pre| {
                if pre <= 0.0 {
                    *gv = 0.0;
                }
            });
            g = self.convs[i].backward(&cache.conv_caches[i], &gz);
        }
    }

    pub fn params(&mut self) -> Vec<ParamView<'_>> {
        let mut p = Vec::new();
        for c in &mut self.convs {
            p.extend(c.params());
        }
        p.extend(self.fc.params());
        p
    }
}

// ---------------------------------------------------------------------------
// Point encoder
// ---------------------------------------------------------------------------

/// Shared per-point map with max pooling: `3 -> 64 (local) -> 128 -> out`.
pub struct PointEncoder {
    pub out_dim: usize,
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

pub struct PointCache {
    points: Array2<f64>,
    z1: Array2<f64>,
    local: Array2<f64>,
    z2: Array2<f64>,
    h2: Array2<f64>,
    pre_pool: Array2<f64>,
    argmax: Array2<usize>,
}

/// Global and per-point features of a point cloud batch.
pub struct PointFeatures {
    /// `(B, out_dim)`
    pub global: Array2<f64>,
    /// `(B * n, LOCAL_DIM)`
    pub local: Array2<f64>,
}

impl PointEncoder {
    pub fn new(out_dim: usize, rng: &mut impl Rng) -> Self {
        PointEncoder {
            out_dim,
            l1: Linear::new("pt.l1", 3, LOCAL_DIM, rng),
            l2: Linear::new("pt.l2", LOCAL_DIM, 128, rng),
            l3: Linear::new("pt.l3", 128, out_dim, rng),
        }
    }

    /// `points` is `(B * n, 3)` with a fixed `n` per sample.
    pub fn forward(
        &self,
        points: &Array2<f64>,
        n_per_sample: usize,
    ) -> Result<(PointFeatures, PointCache)> {
        if points.ncols() != 3 {
            return Err(Error::ShapeMismatch {
                expected: "(B*n, 3)".into(),
                got: format!("{:?}", points.dim()),
            });
        }
        if n_per_sample == 0 || points.nrows() % n_per_sample != 0 {
            return Err(Error::ShapeMismatch {
                expected: format!("row count divisible by n={n_per_sample}"),
                got: format!("{}", points.nrows()),
            });
        }
        let z1 = self.l1.forward(points);
        let local = relu(&z1);
        let z2 = self.l2.forward(&local);
        let h2 = relu(&z2);
        let pre_pool = self.l3.forward(&h2);
        let (global, argmax) = max_pool_groups(&pre_pool, n_per_sample);
        Ok((
            PointFeatures {
                global,
                local: local.clone(),
            },
            PointCache {
                points: points.clone(),
                z1,
                local,
                z2,
                h2,
                pre_pool,
                argmax,
            },
        ))
    }

    /// `g_global` flows from the condition slot, `g_local` from the shape
    /// estimator; both may be zero arrays.
    pub fn backward(&mut self, cache: &PointCache, g_global: &Array2<f64>, g_local: &Array2<f64>) {
        let g_pre_pool = max_pool_groups_backward(&cache.argmax, g_global, cache.pre_pool.nrows());
        let gh2 = self.l3.backward(&cache.h2, &g_pre_pool);
        let gz2 = relu_backward(&cache.z2, &gh2);
        let mut glocal_total = self.l2.backward(&cache.local, &gz2);
        glocal_total += g_local;
        let gz1 = relu_backward(&cache.z1, &glocal_total);
        self.l1.backward(&cache.points, &gz1);
    }

    pub fn params(&mut self) -> Vec<ParamView<'_>> {
        let mut p = self.l1.params();
        p.extend(self.l2.params());
        p.extend(self.l3.params());
        p
    }
}

// ---------------------------------------------------------------------------
// Shape estimator / encoder
// ---------------------------------------------------------------------------

struct ShapeBranch {
    d1: Linear,
    d2: Linear,
    d3: Linear,
    e1: Linear,
    e2: Linear,
}

struct ShapeBranchCache {
    feat: Array2<f64>,
    z1: Array2<f64>,
    h1: Array2<f64>,
    z2: Array2<f64>,
    h2: Array2<f64>,
    pts: Array2<f64>,
    ez: Array2<f64>,
    eh: Array2<f64>,
    pre_pool: Array2<f64>,
    argmax: Array2<usize>,
}

impl ShapeBranch {
    fn new(
        name: &str,
        dim_in: usize,
        hidden: usize,
        enc_hidden: usize,
        enc_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        ShapeBranch {
            d1: Linear::new(&format!("{name}.d1"), dim_in, hidden, rng),
            d2: Linear::new(&format!("{name}.d2"), hidden, hidden / 2, rng),
            d3: Linear::new(&format!("{name}.d3"), hidden / 2, 3, rng),
            e1: Linear::new(&format!("{name}.e1"), 3, enc_hidden, rng),
            e2: Linear::new(&format!("{name}.e2"), enc_hidden, enc_out, rng),
        }
    }

    /// `feat` is `(B*n, dim_in)`; returns predicted points `(B*n, 3)` and the
    /// pooled encoding `(B, enc_out)`.
    fn forward(
        &self,
        feat: &Array2<f64>,
        n_per_sample: usize,
    ) -> (Array2<f64>, Array2<f64>, ShapeBranchCache) {
        let z1 = self.d1.forward(feat);
        let h1 = relu(&z1);
        let z2 = self.d2.forward(&h1);
        let h2 = relu(&z2);
        let pts = self.d3.forward(&h2);
        let ez = self.e1.forward(&pts);
        let eh = relu(&ez);
        let pre_pool = self.e2.forward(&eh);
        let (pooled, argmax) = max_pool_groups(&pre_pool, n_per_sample);
        (
            pts.clone(),
            pooled,
            ShapeBranchCache {
                feat: feat.clone(),
                z1,
                h1,
                z2,
                h2,
                pts,
                ez,
                eh,
                pre_pool,
                argmax,
            },
        )
    }

    /// `g_pts` is the loss gradient on the predicted points, `g_pooled` the
    /// gradient flowing back from the condition slot. Returns the gradient on
    /// the input features.
    fn backward(
        &mut self,
        cache: &ShapeBranchCache,
        g_pts: &Array2<f64>,
        g_pooled: &Array2<f64>,
    ) -> Array2<f64> {
        let g_pre_pool = max_pool_groups_backward(&cache.argmax, g_pooled, cache.pre_pool.nrows());
        let geh = self.e2.backward(&cache.eh, &g_pre_pool);
        let gez = relu_backward(&cache.ez, &geh);
        let mut g_pts_total = self.e1.backward(&cache.pts, &gez);
        g_pts_total += g_pts;
        let gh2 = self.d3.backward(&cache.h2, &g_pts_total);
        let gz2 = relu_backward(&cache.z2, &gh2);
        let gh1 = self.d2.backward(&cache.h1, &gz2);
        let gz1 = relu_backward(&cache.z1, &gh1);
        self.d1.backward(&cache.feat, &gz1)
    }

    fn params(&mut self) -> Vec<ParamView<'_>> {
        let mut p = self.d1.params();
        p.extend(self.d2.params());
        p.extend(self.d3.params());
        p.extend(self.e1.params());
        p.extend(self.e2.params());
        p
    }
}

/// Two parallel branches estimating the canonical shape and the NOCS shape
/// from per-point `[local, c_rgb]` features; their pooled encodings form
/// `c_shape`.
pub struct ShapeEstimator {
    pub dim_in: usize,
    pub enc_out: usize,
    rs: ShapeBranch,
    ns: ShapeBranch,
}

pub struct ShapeCache {
    rs: ShapeBranchCache,
    ns: ShapeBranchCache,
    n_per_sample: usize,
}

impl ShapeEstimator {
    pub fn new(rgb_dim: usize, shape_dim: usize, rng: &mut impl Rng) -> Self {
        assert!(shape_dim % 2 == 0, "c_shape splits into two halves");
        let dim_in = LOCAL_DIM + rgb_dim;
        let hidden = (rgb_dim * 2).max(64);
        let enc_out = shape_dim / 2;
        let enc_hidden = enc_out.max(32);
        ShapeEstimator {
            dim_in,
            enc_out,
            rs: ShapeBranch::new("shape.rs", dim_in, hidden, enc_hidden, enc_out, rng),
            ns: ShapeBranch::new("shape.ns", dim_in, hidden, enc_hidden, enc_out, rng),
        }
    }

    /// `local` is `(B*n, LOCAL_DIM)`, `c_rgb` is `(B, rgb_dim)`.
    /// Returns flat shape outputs `(B*n, 3)` and `c_shape` `(B, 2*enc_out)`.
    pub fn forward(
        &self,
        local: &Array2<f64>,
        c_rgb: &Array2<f64>,
        n_per_sample: usize,
    ) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>, ShapeCache)> {
        let b = c_rgb.nrows();
        if local.nrows() != b * n_per_sample || local.ncols() != LOCAL_DIM {
            return Err(Error::ShapeMismatch {
                expected: format!("({} x {LOCAL_DIM}) local features", b * n_per_sample),
                got: format!("{:?}", local.dim()),
            });
        }
        let mut feat = Array2::zeros((b * n_per_sample, self.dim_in));
        for bi in 0..b {
            let rgb_row = c_rgb.row(bi);
            for i in 0..n_per_sample {
                let r = bi * n_per_sample + i;
                feat.row_mut(r)
                    .slice_mut(ndarray::s![..LOCAL_DIM])
                    .assign(&local.row(r));
                feat.row_mut(r)
                    .slice_mut(ndarray::s![LOCAL_DIM..])
                    .assign(&rgb_row);
            }
        }
        let (r_s, rs_pool, rs_cache) = self.rs.forward(&feat, n_per_sample);
        let (n_s, ns_pool, ns_cache) = self.ns.forward(&feat, n_per_sample);
        let c_shape =
            ndarray::concatenate(Axis(1), &[rs_pool.view(), ns_pool.view()]).expect("concat");
        let exceed = n_s.iter().filter(|v| v.abs() > NOCS_SOFT_BOUND).count();
        if exceed > 0 {
            log::debug!(
                "NOCS outputs exceed the soft bound {NOCS_SOFT_BOUND} in {exceed}/{} entries",
                n_s.len()
            );
        }
        Ok((
            r_s,
            n_s,
            c_shape,
            ShapeCache {
                rs: rs_cache,
                ns: ns_cache,
                n_per_sample,
            },
        ))
    }

    /// Returns `(g_local, g_rgb)`.
    pub fn backward(
        &mut self,
        cache: &ShapeCache,
        g_rs: &Array2<f64>,
        g_ns: &Array2<f64>,
        g_cshape: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let (g_rs_pool, g_ns_pool) = {
            let a = g_cshape.slice(ndarray::s![.., ..self.enc_out]).to_owned();
            let b = g_cshape.slice(ndarray::s![.., self.enc_out..]).to_owned();
            (a, b)
        };
        let g_feat_rs = self.rs.backward(&cache.rs, g_rs, &g_rs_pool);
        let g_feat_ns = self.ns.backward(&cache.ns, g_ns, &g_ns_pool);
        let g_feat = g_feat_rs + g_feat_ns;
        let n = cache.n_per_sample;
        let b = g_feat.nrows() / n;
        let g_local = g_feat.slice(ndarray::s![.., ..LOCAL_DIM]).to_owned();
        let mut g_rgb = Array2::zeros((b, self.dim_in - LOCAL_DIM));
        for bi in 0..b {
            for i in 0..n {
                let row = g_feat.row(bi * n + i);
                for (j, g) in row.iter().skip(LOCAL_DIM).enumerate() {
                    g_rgb[(bi, j)] += g;
                }
            }
        }
        (g_local, g_rgb)
    }

    pub fn params(&mut self) -> Vec<ParamView<'_>> {
        let mut p = self.rs.params();
        p.extend(self.ns.params());
        p
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Symmetric Chamfer distance with the 1/(2n) prefactor.
pub fn chamfer_loss(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    Ok(chamfer_loss_with_grad(a, b)?.0)
}

/// Chamfer loss plus its gradient with respect to `a`.
pub fn chamfer_loss_with_grad(a: &Array2<f64>, b: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::InvalidInput("chamfer on empty point set".into()));
    }
    if a.ncols() != 3 || b.ncols() != 3 || a.nrows() != b.nrows() {
        return Err(Error::ShapeMismatch {
            expected: "two (n, 3) point sets".into(),
            got: format!("{:?} vs {:?}", a.dim(), b.dim()),
        });
    }
    let n = a.nrows();
    let mut grad = Array2::zeros((n, 3));
    let mut total = 0.0;
    // a -> b
    for i in 0..n {
        let (j, d2) = nearest(b, a.row(i));
        total += d2;
        for k in 0..3 {
            grad[(i, k)] += 2.0 * (a[(i, k)] - b[(j, k)]);
        }
    }
    // b -> a
    for j in 0..n {
        let (i, d2) = nearest(a, b.row(j));
        total += d2;
        for k in 0..3 {
            grad[(i, k)] += 2.0 * (a[(i, k)] - b[(j, k)]);
        }
    }
    let scale = 1.0 / (2.0 * n as f64);
    Ok((total * scale, grad * scale))
}

fn nearest(set: &Array2<f64>, q: ndarray::ArrayView1<f64>) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (i, row) in set.rows().into_iter().enumerate() {
        let mut d2 = 0.0;
        for k in 0..3 {
            let d = row[k] - q[k];
            d2 += d * d;
        }
        if d2 < best.1 {
            best = (i, d2);
        }
    }
    best
}

/// Smooth-L1 with knee at 0.1: `5x^2` for `x <= 0.1`, `x - 0.05` above, summed
/// over coordinates and averaged over points.
pub fn smooth_l1_nocs_loss(n_s: &Array2<f64>, m_ns: &Array2<f64>) -> Result<f64> {
    Ok(smooth_l1_with_grad(n_s, m_ns)?.0)
}

pub fn smooth_l1_with_grad(n_s: &Array2<f64>, m_ns: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    if n_s.dim() != m_ns.dim() || n_s.ncols() != 3 {
        return Err(Error::ShapeMismatch {
            expected: format!("matching (n, 3) sets, lhs {:?}", n_s.dim()),
            got: format!("{:?}", m_ns.dim()),
        });
    }
    if n_s.nrows() == 0 {
        return Err(Error::InvalidInput("smooth-L1 on empty point set".into()));
    }
    let n = n_s.nrows() as f64;
    let mut total = 0.0;
    let mut grad = Array2::zeros(n_s.dim());
    for i in 0..n_s.nrows() {
        for k in 0..3 {
            let diff = n_s[(i, k)] - m_ns[(i, k)];
            let x = diff.abs();
            if x <= 0.1 {
                total += 5.0 * x * x;
                grad[(i, k)] = 10.0 * diff / n;
            } else {
                total += x - 0.05;
                grad[(i, k)] = diff.signum() / n;
            }
        }
    }
    Ok((total / n, grad))
}

// ---------------------------------------------------------------------------
// Conditioner: the assembled condition extractor
// ---------------------------------------------------------------------------

/// All condition encoders plus the slot-assembly logic.
pub struct Conditioner {
    pub dims: ConditionDims,
    pub t_embed: TimestepEmbed,
    pub image_enc: ImageEncoder,
    pub point_enc: PointEncoder,
    pub shape_est: ShapeEstimator,
}

/// Forward caches plus the assembled condition batch.
pub struct ConditionForward {
    pub c: Array2<f64>,
    pub c_shape_aux: ShapeOutputsFlat,
    /// Per-sample, per-slot keep masks (ablation and condition dropout).
    pub slot_mask: Array2<f64>,
    t_cache: TimestepCache,
    img_cache: ImageCache,
    pt_cache: PointCache,
    shape_cache: ShapeCache,
}

/// Flat `(B*n, 3)` shape outputs for the loss side.
pub struct ShapeOutputsFlat {
    pub r_s: Array2<f64>,
    pub n_s: Array2<f64>,
}

impl Conditioner {
    pub fn new(dims: ConditionDims, image_size: usize, t_max: usize, rng: &mut impl Rng) -> Self {
        Conditioner {
            dims,
            t_embed: TimestepEmbed::new(dims.timestep, t_max, rng),
            image_enc: ImageEncoder::new(image_size, dims.rgb, rng),
            point_enc: PointEncoder::new(dims.point, rng),
            shape_est: ShapeEstimator::new(dims.rgb, dims.shape, rng),
        }
    }

    /// Batched forward. `slot_drop` gives per-sample keep masks (1 = keep,
    /// columns `[timestep, rgb, point, shape]`) for condition dropout;
    /// ablation flags zero whole slots. The returned `c` has masks applied.
    pub fn forward(
        &self,
        ts: &[usize],
        images: &Array4<f64>,
        points: &Array2<f64>,
        n_per_sample: usize,
        flags: &AblationFlags,
        slot_drop: Option<&Array2<f64>>,
    ) -> Result<ConditionForward> {
        let b = ts.len();
        let (c_ts, t_cache) = self.t_embed.forward_batch(ts)?;
        let (c_rgb, img_cache) = self.image_enc.forward(images)?;
        let (pt_feats, pt_cache) = self.point_enc.forward(points, n_per_sample)?;
        let (r_s, n_s, c_shape, shape_cache) =
            self.shape_est
                .forward(&pt_feats.local, &c_rgb, n_per_sample)?;

        // keep masks per slot: [timestep, rgb, point, shape]
        let mut slot_mask = Array2::ones((b, 4));
        if flags.drop_timestep {
            slot_mask.column_mut(0).fill(0.0);
        }
        if flags.drop_rgb {
            slot_mask.column_mut(1).fill(0.0);
        }
        if flags.drop_point {
            slot_mask.column_mut(2).fill(0.0);
        }
        if flags.drop_shape {
            slot_mask.column_mut(3).fill(0.0);
        }
        if let Some(drop) = slot_drop {
            slot_mask.zip_mut_with(drop, |m, &d| *m *= d);
        }

        let off = self.dims.offsets();
        let mut c = Array2::zeros((b, self.dims.total()));
        for bi in 0..b {
            let m = slot_mask.row(bi);
            for (j, v) in c_ts.row(bi).iter().enumerate() {
                c[(bi, off[0] + j)] = v * m[0];
            }
            for (j, v) in c_rgb.row(bi).iter().enumerate() {
                c[(bi, off[1] + j)] = v * m[1];
            }
            for (j, v) in pt_feats.global.row(bi).iter().enumerate() {
                c[(bi, off[2] + j)] = v * m[2];
            }
            for (j, v) in c_shape.row(bi).iter().enumerate() {
                c[(bi, off[3] + j)] = v * m[3];
            }
        }

        Ok(ConditionForward {
            c,
            c_shape_aux: ShapeOutputsFlat { r_s, n_s },
            slot_mask,
            t_cache,
            img_cache,
            pt_cache,
            shape_cache,
        })
    }

    /// Backward from the condition gradient `g_c` plus loss gradients on the
    /// shape outputs.
    pub fn backward(
        &mut self,
        fwd: &ConditionForward,
        g_c: &Array2<f64>,
        g_rs: &Array2<f64>,
        g_ns: &Array2<f64>,
    ) {
        let off = self.dims.offsets();
        let b = g_c.nrows();
        let mut g_ts = Array2::zeros((b, self.dims.timestep));
        let mut g_rgb_slot = Array2::zeros((b, self.dims.rgb));
        let mut g_point = Array2::zeros((b, self.dims.point));
        let mut g_shape = Array2::zeros((b, self.dims.shape));
        for bi in 0..b {
            let m = fwd.slot_mask.row(bi);
            for j in 0..self.dims.timestep {
                g_ts[(bi, j)] = g_c[(bi, off[0] + j)] * m[0];
            }
            for j in 0..self.dims.rgb {
                g_rgb_slot[(bi, j)] = g_c[(bi, off[1] + j)] * m[1];
            }
            for j in 0..self.dims.point {
                g_point[(bi, j)] = g_c[(bi, off[2] + j)] * m[2];
            }
            for j in 0..self.dims.shape {
                g_shape[(bi, j)] = g_c[(bi, off[3] + j)] * m[3];
            }
        }

        let (g_local, g_rgb_shape) = self
            .shape_est
            .backward(&fwd.shape_cache, g_rs, g_ns, &g_shape);
        self.point_enc.backward(&fwd.pt_cache, &g_point, &g_local);
        let g_rgb_total = &g_rgb_slot + &g_rgb_shape;
        self.image_enc.backward(&fwd.img_cache, &g_rgb_total);
        self.t_embed.backward(&fwd.t_cache, &g_ts);
    }

    pub fn params(&mut self) -> Vec<ParamView<'_>> {
        let mut p = self.t_embed.params();
        p.extend(self.image_enc.params());
        p.extend(self.point_enc.params());
        p.extend(self.shape_est.params());
        p
    }

    /// Single-observation condition vector (the `build_condition` operation).
    pub fn build_condition(
        &self,
        t: usize,
        obs: &ObservationBatch,
        flags: &AblationFlags,
    ) -> Result<ConditionVector> {
        let enc = self.encode_observation(obs)?;
        self.condition_from_encoding(t, &enc, flags)
    }

    /// Precomputes the time-independent part of the condition.
    pub fn encode_observation(&self, obs: &ObservationBatch) -> Result<SceneEncoding> {
        let (_, h, w) = obs.image.dim();
        let images = obs
            .image
            .clone()
            .into_shape_with_order((1, 3, h, w))
            .expect("image reshape");
        let n = obs.points.nrows();
        let (c_rgb, _) = self.image_enc.forward(&images)?;
        let (pt_feats, _) = self.point_enc.forward(&obs.points, n)?;
        let (r_s, n_s, c_shape, _) = self.shape_est.forward(&pt_feats.local, &c_rgb, n)?;
        Ok(SceneEncoding {
            c_rgb: c_rgb.row(0).to_owned(),
            c_point: pt_feats.global.row(0).to_owned(),
            c_shape: c_shape.row(0).to_owned(),
            shapes: ShapeOutputs { r_s, n_s },
        })
    }

    /// Assembles `c` for one time step from a cached scene encoding.
    pub fn condition_from_encoding(
        &self,
        t: usize,
        enc: &SceneEncoding,
        flags: &AblationFlags,
    ) -> Result<ConditionVector> {
        let c_timestep = self.t_embed.embed(t)?;
        let zero_if = |cond: bool, v: &Array1<f64>| {
            if cond {
                Array1::zeros(v.len())
            } else {
                v.clone()
            }
        };
        let c_timestep = zero_if(flags.drop_timestep, &c_timestep);
        let c_rgb = zero_if(flags.drop_rgb, &enc.c_rgb);
        let c_point = zero_if(flags.drop_point, &enc.c_point);
        let c_shape = zero_if(flags.drop_shape, &enc.c_shape);
        let mut c = Array1::zeros(self.dims.total());
        let off = self.dims.offsets();
        c.slice_mut(ndarray::s![off[0]..off[1]]).assign(&c_timestep);
        c.slice_mut(ndarray::s![off[1]..off[2]]).assign(&c_rgb);
        c.slice_mut(ndarray::s![off[2]..off[3]]).assign(&c_point);
        c.slice_mut(ndarray::s![off[3]..off[4]]).assign(&c_shape);
        Ok(ConditionVector {
            c_timestep,
            c_rgb,
            c_point,
            c_shape,
            c,
        })
    }
}

/// Time-independent condition features of one observation.
#[derive(Debug, Clone)]
pub struct SceneEncoding {
    pub c_rgb: Array1<f64>,
    pub c_point: Array1<f64>,
    pub c_shape: Array1<f64>,
    pub shapes: ShapeOutputs,
}
