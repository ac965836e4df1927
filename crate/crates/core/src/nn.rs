//! Minimal dense-layer toolkit: linear, 3x3 strided convolution, layer norm,
//! activations, pooling, and Adam, all in f64 with hand-written backward
//! passes.
//!
//! Forward passes return plain arrays; callers keep whatever inputs the
//! matching `backward` needs. Gradients accumulate into each layer's `g*`
//! buffers until [`zero_grads`](Adam) or a manual reset.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Mutable view of one parameter group and its gradient buffer.
pub struct ParamView<'a> {
    pub name: String,
    pub value: &'a mut [f64],
    pub grad: &'a mut [f64],
}

/// Deterministic RNG derived from a seed and a purpose label so independent
/// components get independent streams.
pub fn seeded_rng(seed: u64, label: &str) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(label));
    rng
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn uniform_init(rng: &mut impl Rng, shape: (usize, usize), fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn(shape, |_| rng.gen_range(-bound..bound))
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Fully connected layer `y = x W + b` over rows of `x`.
pub struct Linear {
    pub name: String,
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub gw: Array2<f64>,
    pub gb: Array1<f64>,
}

impl Linear {
    pub fn new(name: &str, dim_in: usize, dim_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (dim_in as f64).sqrt();
        Linear {
            name: name.to_string(),
            w: uniform_init(rng, (dim_in, dim_out), dim_in),
            b: Array1::from_shape_fn(dim_out, |_| rng.gen_range(-bound..bound)),
            gw: Array2::zeros((dim_in, dim_out)),
            gb: Array1::zeros(dim_out),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Array2<f64>, gy: &Array2<f64>) -> Array2<f64> {
        self.gw += &x.t().dot(gy);
        self.gb += &gy.sum_axis(Axis(0));
        gy.dot(&self.w.t())
    }

    pub fn params(&mut self) -> Vec<ParamView<'_>> {
        vec![
            ParamView {
                name: format!("{}.w", self.name),
                value: self.w.as_slice_mut().expect("contiguous"),
                grad: self.gw.as_slice_mut().expect("contiguous"),
            },
            ParamView {
                name: format!("{}.b", self.name),
                value: self.b.as_slice_mut().expect("contiguous"),
                grad: self.gb.as_slice_mut().expect("contiguous"),
            },
        ]
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(x: &Array2<f64>, gy: &Array2<f64>) -> Array2<f64> {
    let mut gx = gy.clone();
    gx.zip_mut_with(x, |g, &v| {
        if v <= 0.0 {
            *g = 0.0;
        }
    });
    gx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Smooth GELU (tanh form).
pub fn gelu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
}

pub fn gelu_backward(x: &Array2<f64>, gy: &Array2<f64>) -> Array2<f64> {
    let mut gx = gy.clone();
    gx.zip_mut_with(x, |g, &v| {
        let u = GELU_C * (v + GELU_A * v * v * v);
        let t = u.tanh();
        let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
        *g *= d;
    });
    gx
}

// ---------------------------------------------------------------------------
// Layer norm
// ---------------------------------------------------------------------------

const LN_EPS: f64 = 1e-5;

/// Layer normalization over the feature (last) axis with learned gain/bias.
pub struct LayerNorm {
    pub name: String,
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
    pub ggain: Array1<f64>,
    pub gbias: Array1<f64>,
}

/// Cache for the layer-norm backward pass.
pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_sigma: Array1<f64>,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        LayerNorm {
            name: name.to_string(),
            gain: Array1::ones(dim),
            bias: Array1::zeros(dim),
            ggain: Array1::zeros(dim),
            gbias: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let n = x.ncols() as f64;
        let mean = x.mean_axis(Axis(1)).expect("non-empty");
        let mut xhat = x.clone();
        for (mut row, &m) in xhat.rows_mut().into_iter().zip(mean.iter()) {
            row.mapv_inplace(|v| v - m);
        }
        let var = xhat.mapv(|v| v * v).sum_axis(Axis(1)) / n;
        let inv_sigma = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
        for (mut row, &s) in xhat.rows_mut().into_iter().zip(inv_sigma.iter()) {
            row.mapv_inplace(|v| v * s);
        }
        let y = &xhat * &self.gain + &self.bias;
        (y, LayerNormCache { xhat, inv_sigma })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, gy: &Array2<f64>) -> Array2<f64> {
        let n = gy.ncols() as f64;
        self.ggain += &(gy * &cache.xhat).sum_axis(Axis(0));
        self.gbias += &gy.sum_axis(Axis(0));
        let dxhat = gy * &self.gain;
        let mean_dxhat = dxhat.mean_axis(Axis(1)).expect("non-empty");
        let mean_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / n;
        let mut gx = dxhat;
        for ((mut row, xh_row), ((&m1, &m2), &inv_s)) in gx
            .rows_mut()
            .into_iter()
            .zip(cache.xhat.rows())
            .zip(mean_dxhat.iter().zip(mean_dxhat_xhat.iter()).zip(cache.inv_sigma.iter()))
        {
            for (g, &xh) in row.iter_mut().zip(xh_row.iter()) {
                *g = (*g - m1 - xh * m2) * inv_s;
            }
        }
        gx
    }

    pub fn params(&mut self) -> Vec<ParamView<'_>> {
        vec![
            ParamView {
                name: format!("{}.gain", self.name),
                value: self.gain.as_slice_mut().expect("contiguous"),
                grad: self.ggain.as_slice_mut().expect("contiguous"),
            },
            ParamView {
                name: format!("{}.bias", self.name),
                value: self.bias.as_slice_mut().expect("contiguous"),
                grad: self.gbias.as_slice_mut().expect("contiguous"),
            },
        ]
    }
}

// ---------------------------------------------------------------------------
// 3x3 stride-2 convolution (pad 1) via im2col
// ---------------------------------------------------------------------------

pub struct Conv2d {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    /// (9 * c_in, c_out)
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub gw: Array2<f64>,
    pub gb: Array1<f64>,
}

pub struct ConvCache {
    col: Array2<f64>,
    h_in: usize,
    w_in: usize,
    batch: usize,
}

const K: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;

impl Conv2d {
    pub fn new(name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let fan_in = K * K * c_in;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Conv2d {
            name: name.to_string(),
            c_in,
            c_out,
            w: uniform_init(rng, (fan_in, c_out), fan_in),
            b: Array1::from_shape_fn(c_out, |_| rng.gen_range(-bound..bound)),
            gw: Array2::zeros((fan_in, c_out)),
            gb: Array1::zeros(c_out),
        }
    }

    pub fn out_hw(h: usize, w: usize) -> (usize, usize) {
        ((h + 2 * PAD - K) / STRIDE + 1, (w + 2 * PAD - K) / STRIDE + 1)
    }

    /// Input `(B, C_in, H, W)` -> output `(B, C_out, OH, OW)`.
    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, ConvCache) {
        let (batch, c_in, h, w) = x.dim();
        assert_eq!(c_in, self.c_in, "conv {}: channel mismatch", self.name);
        let (oh, ow) = Self::out_hw(h, w);
        let mut col = Array2::zeros((batch * oh * ow, K * K * c_in));
        for b in 0..batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (b * oh + oy) * ow + ox;
                    let mut col_row = col.row_mut(row);
                    for c in 0..c_in {
                        for ky in 0..K {
                            let iy = (oy * STRIDE + ky).wrapping_sub(PAD);
                            for kx in 0..K {
                                let ix = (ox * STRIDE + kx).wrapping_sub(PAD);
                                if iy < h && ix < w {
                                    col_row[c * K * K + ky * K + kx] = x[(b, c, iy, ix)];
                                }
                            }
                        }
                    }
                }
            }
        }
        let flat = col.dot(&self.w) + &self.b;
        let mut y = Array4::zeros((batch, self.c_out, oh, ow));
        for b in 0..batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (b * oh + oy) * ow + ox;
                    for c in 0..self.c_out {
                        y[(b, c, oy, ox)] = flat[(row, c)];
                    }
                }
            }
        }
        (
            y,
            ConvCache {
                col,
                h_in: h,
                w_in: w,
                batch,
            },
        )
    }

    pub fn backward(&mut self, cache: &ConvCache, gy: &Array4<f64>) -> Array4<f64> {
        let (batch, c_out, oh, ow) = gy.dim();
        assert_eq!(c_out, self.c_out);
        assert_eq!(batch, cache.batch);
        let mut gy_flat = Array2::zeros((batch * oh * ow, c_out));
        for b in 0..batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (b * oh + oy) * ow + ox;
                    for c in 0..c_out {
                        gy_flat[(row, c)] = gy[(b, c, oy, ox)];
                    }
                }
            }
        }
        self.gw += &cache.col.t().dot(&gy_flat);
        self.gb += &gy_flat.sum_axis(Axis(0));
        let gcol = gy_flat.dot(&self.w.t());
        let (h, w) = (cache.h_in, cache.w_in);
        let mut gx = Array4::zeros((batch, self.c_in, h, w));
        for b in 0..batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (b * oh + oy) * ow + ox;
                    let gcol_row = gcol.row(row);
                    for c in 0..self.c_in {
                        for ky in 0..K {
                            let iy = (oy * STRIDE + ky).wrapping_sub(PAD);
                            for kx in 0..K {
                                let ix = (ox * STRIDE + kx).wrapping_sub(PAD);
                                if iy < h && ix < w {
                                    gx[(b, c, iy, ix)] += gcol_row[c * K * K + ky * K + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        gx
    }

    pub fn params(&mut self) -> Vec<ParamView<'_>> {
        vec![
            ParamView {
                name: format!("{}.w", self.name),
                value: self.w.as_slice_mut().expect("contiguous"),
                grad: self.gw.as_slice_mut().expect("contiguous"),
            },
            ParamView {
                name: format!("{}.b", self.name),
                value: self.b.as_slice_mut().expect("contiguous"),
                grad: self.gb.as_slice_mut().expect("contiguous"),
            },
        ]
    }
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// Feature-wise max over fixed-size groups of rows. `x` is
/// `(groups * group_size, F)`; returns `(groups, F)` plus argmax rows.
///
/// `fold` order is fixed (ascending row index), so ties resolve to the first
/// maximal row and the result is bitwise permutation-invariant in values.
pub fn max_pool_groups(x: &Array2<f64>, group_size: usize) -> (Array2<f64>, Array2<usize>) {
    let rows = x.nrows();
    assert!(group_size > 0 && rows % group_size == 0, "bad group size");
    let groups = rows / group_size;
    let f = x.ncols();
    let mut out = Array2::from_elem((groups, f), f64::NEG_INFINITY);
    let mut arg = Array2::zeros((groups, f));
    for g in 0..groups {
        for i in 0..group_size {
            let row = x.row(g * group_size + i);
            for j in 0..f {
                if row[j] > out[(g, j)] {
                    out[(g, j)] = row[j];
                    arg[(g, j)] = g * group_size + i;
                }
            }
        }
    }
    (out, arg)
}

pub fn max_pool_groups_backward(
    arg: &Array2<usize>,
    gy: &Array2<f64>,
    rows: usize,
) -> Array2<f64> {
    let mut gx = Array2::zeros((rows, gy.ncols()));
    for g in 0..gy.nrows() {
        for j in 0..gy.ncols() {
            gx[(arg[(g, j)], j)] += gy[(g, j)];
        }
    }
    gx
}

/// Spatial mean over `(B, C, H, W)` -> `(B, C)`.
pub fn global_mean_pool(x: &Array4<f64>) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let mut out = Array2::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let mut s = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    s += x[(bi, ci, y, xx)];
                }
            }
            out[(bi, ci)] = s / (h * w) as f64;
        }
    }
    out
}

pub fn global_mean_pool_backward(gy: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
    let (b, c) = gy.dim();
    let scale = 1.0 / (h * w) as f64;
    Array4::from_shape_fn((b, c, h, w), |(bi, ci, _, _)| gy[(bi, ci)] * scale)
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// First-order adaptive-moment optimizer with bias correction.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Adam {
    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over all parameter groups; `params` must be enumerated in a
    /// stable order across calls.
    pub fn step(&mut self, params: &mut [ParamView<'_>], lr: f64) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        }
        assert_eq!(self.m.len(), params.len(), "parameter group count changed");
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (idx, p) in params.iter_mut().enumerate() {
            assert_eq!(self.m[idx].len(), p.value.len(), "parameter size changed");
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.value[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    /// Raw moment buffers for checkpointing.
    pub fn state(&self) -> (u64, &[Vec<f64>], &[Vec<f64>]) {
        (self.step_count, &self.m, &self.v)
    }

    pub fn restore(&mut self, step_count: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) {
        self.step_count = step_count;
        self.m = m;
        self.v = v;
    }
}

pub fn zero_grads(params: &mut [ParamView<'_>]) {
    for p in params.iter_mut() {
        for g in p.grad.iter_mut() {
            *g = 0.0;
        }
    }
}

// ---------------------------------------------------------------------------
// Gradient checking helpers
// ---------------------------------------------------------------------------

/// Flattens all parameter values into one vector.
pub fn flatten_params(params: &[ParamView<'_>]) -> Vec<f64> {
    params.iter().flat_map(|p| p.value.iter().copied()).collect()
}

pub fn set_flat_params(params: &mut [ParamView<'_>], flat: &[f64]) {
    let mut i = 0;
    for p in params.iter_mut() {
        p.value.copy_from_slice(&flat[i..i + p.value.len()]);
        i += p.value.len();
    }
    assert_eq!(i, flat.len());
}

pub fn flatten_grads(params: &[ParamView<'_>]) -> Vec<f64> {
    params.iter().flat_map(|p| p.grad.iter().copied()).collect()
}

/// Relative error between an analytic directional derivative and a central
/// finite difference along `dir`.
///
/// `eval` must recompute the loss (and, when `with_grad`, the gradients) at
/// the current parameters.
pub struct DirectionalCheck {
    pub analytic: f64,
    pub numeric: f64,
}

impl DirectionalCheck {
    pub fn rel_err(&self) -> f64 {
        let denom = self.analytic.abs().max(self.numeric.abs()).max(1e-12);
        (self.analytic - self.numeric).abs() / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn rand_array(rng: &mut impl Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = seeded_rng(0, "lin-test");
        let mut lin = Linear::new("lin", 4, 3, &mut rng);
        let x = rand_array(&mut rng, 5, 4);
        let target = rand_array(&mut rng, 5, 3);
        // loss = 0.5 sum (y - target)^2
        let loss_of = |lin: &Linear, x: &Array2<f64>| {
            let y = lin.forward(x);
            0.5 * (&y - &target).mapv(|v| v * v).sum()
        };
        let y = lin.forward(&x);
        let gy = &y - &target;
        let gx = lin.backward(&x, &gy);

        let h = 1e-6;
        // weight grads
        for idx in [(0usize, 0usize), (1, 2), (3, 1)] {
            let orig = lin.w[idx];
            lin.w[idx] = orig + h;
            let lp = loss_of(&lin, &x);
            lin.w[idx] = orig - h;
            let lm = loss_of(&lin, &x);
            lin.w[idx] = orig;
            let num = (lp - lm) / (2.0 * h);
            assert!((num - lin.gw[idx]).abs() < 1e-6, "{num} vs {}", lin.gw[idx]);
        }
        // input grads
        let idx = (2usize, 3usize);
        let mut xp = x.clone();
        xp[idx] += h;
        let mut xm = x.clone();
        xm[idx] -= h;
        let num = (loss_of(&lin, &xp) - loss_of(&lin, &xm)) / (2.0 * h);
        assert!((num - gx[idx]).abs() < 1e-6);
    }

    #[test]
    fn layernorm_gradients_match_finite_differences() {
        let mut rng = seeded_rng(1, "ln-test");
        let mut ln = LayerNorm::new("ln", 6);
        ln.gain.mapv_inplace(|_| rng.gen_range(0.5..1.5));
        ln.bias.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        let x = rand_array(&mut rng, 4, 6);
        let target = rand_array(&mut rng, 4, 6);
        let loss_of = |ln: &LayerNorm, x: &Array2<f64>| {
            let (y, _) = ln.forward(x);
            0.5 * (&y - &target).mapv(|v| v * v).sum()
        };
        let (y, cache) = ln.forward(&x);
        let gy = &y - &target;
        let gx = ln.backward(&cache, &gy);

        let h = 1e-6;
        for idx in [(0usize, 0usize), (2, 3), (3, 5)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let num = (loss_of(&ln, &xp) - loss_of(&ln, &xm)) / (2.0 * h);
            assert!(
                (num - gx[idx]).abs() < 1e-5,
                "input grad {num} vs {}",
                gx[idx]
            );
        }
        for i in [0usize, 4] {
            let orig = ln.gain[i];
            ln.gain[i] = orig + h;
            let lp = loss_of(&ln, &x);
            ln.gain[i] = orig - h;
            let lm = loss_of(&ln, &x);
            ln.gain[i] = orig;
            let num = (lp - lm) / (2.0 * h);
            assert!((num - ln.ggain[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn conv_matches_direct_convolution_and_gradients() {
        let mut rng = seeded_rng(2, "conv-test");
        let mut conv = Conv2d::new("c", 2, 3, &mut rng);
        let x = Array4::from_shape_fn((2, 2, 6, 6), |_| rng.gen_range(-1.0..1.0));
        let (y, cache) = conv.forward(&x);
        assert_eq!(y.dim(), (2, 3, 3, 3));

        // Direct evaluation of one output element.
        let (b, co, oy, ox) = (1usize, 2usize, 1usize, 2usize);
        let mut direct = conv.b[co];
        for ci in 0..2 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let iy = (oy * 2 + ky) as isize - 1;
                    let ix = (ox * 2 + kx) as isize - 1;
                    if iy >= 0 && iy < 6 && ix >= 0 && ix < 6 {
                        direct += x[(b, ci, iy as usize, ix as usize)]
                            * conv.w[(ci * 9 + ky * 3 + kx, co)];
                    }
                }
            }
        }
        assert!((direct - y[(b, co, oy, ox)]).abs() < 1e-12);

        let target = Array4::from_shape_fn(y.dim(), |_| rng.gen_range(-1.0..1.0));
        let loss_of = |conv: &Conv2d, x: &Array4<f64>| {
            let (y, _) = conv.forward(x);
            0.5 * (&y - &target).mapv(|v| v * v).sum()
        };
        let gy = &y - &target;
        let gx = conv.backward(&cache, &gy);
        let h = 1e-6;
        let widx = (5usize, 1usize);
        let orig = conv.w[widx];
        conv.w[widx] = orig + h;
        let lp = loss_of(&conv, &x);
        conv.w[widx] = orig - h;
        let lm = loss_of(&conv, &x);
        conv.w[widx] = orig;
        let num = (lp - lm) / (2.0 * h);
        assert!((num - conv.gw[widx]).abs() < 1e-5);

        let xidx = (0usize, 1usize, 3usize, 4usize);
        let mut xp = x.clone();
        xp[xidx] += h;
        let mut xm = x.clone();
        xm[xidx] -= h;
        let num = (loss_of(&conv, &xp) - loss_of(&conv, &xm)) / (2.0 * h);
        assert!((num - gx[xidx]).abs() < 1e-5);
    }

    #[test]
    fn gelu_derivative() {
        let x = array![[-2.0, -0.3, 0.0, 0.4, 1.7]];
        let gy = Array2::ones((1, 5));
        let g = gelu_backward(&x, &gy);
        let h = 1e-6;
        for i in 0..5 {
            let mut xp = x.clone();
            xp[(0, i)] += h;
            let mut xm = x.clone();
            xm[(0, i)] -= h;
            let num = (gelu(&xp).sum() - gelu(&xm).sum()) / (2.0 * h);
            assert!((num - g[(0, i)]).abs() < 1e-8);
        }
    }

    #[test]
    fn max_pool_groups_forward_backward() {
        let x = array![[1.0, 5.0], [3.0, 2.0], [0.0, 7.0], [4.0, 1.0]];
        let (y, arg) = max_pool_groups(&x, 2);
        assert_eq!(y, array![[3.0, 5.0], [4.0, 7.0]]);
        let gy = array![[1.0, 2.0], [3.0, 4.0]];
        let gx = max_pool_groups_backward(&arg, &gy, 4);
        assert_eq!(gx, array![[0.0, 2.0], [1.0, 0.0], [0.0, 4.0], [3.0, 0.0]]);
    }

    #[test]
    fn adam_reduces_quadratic() {
        let mut rng = seeded_rng(3, "adam-test");
        let mut lin = Linear::new("q", 3, 1, &mut rng);
        let mut adam = Adam::default();
        let x = rand_array(&mut rng, 8, 3);
        let truth = Linear::new("truth", 3, 1, &mut rng);
        let target = truth.forward(&x);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..200 {
            zero_grads(&mut lin.params());
            let y = lin.forward(&x);
            let gy = &y - &target;
            last = 0.5 * gy.mapv(|v| v * v).sum();
            first.get_or_insert(last);
            lin.backward(&x, &gy);
            adam.step(&mut lin.params(), 0.05);
        }
        assert!(last < 0.01 * first.unwrap(), "{last} vs {first:?}");
    }
}
