//! Self-attention denoiser: predicts the pose noise ε̂(x_t, t, c) from the
//! concatenated condition and pose features.
//!
//! The input vector `D_i = [c, F_pose]` (width 1792 at paper scale) is
//! reshaped to 16 tokens after each Q/K/V map and attention runs across the
//! token axis with scale `1/sqrt(head_dim)`. A plain sequence reading of a
//! single 1792-vector would have sequence length 1 and degenerate attention;
//! the 16-segment reading is the one consistent with 16 heads of width
//! 1792/16 = 112 while still letting every segment interact with every other.
//!
//! Blocks `1..=SC` save their outputs; each of the last `SC` blocks consumes
//! one saved output (outermost pairing: the last block consumes the first
//! saved output), concatenated to 2x width and reduced back by a learned map.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::condition::ConditionVector;
use crate::error::{Error, Result};
use crate::nn::{self, Linear, LayerNorm, LayerNormCache, ParamView};
use crate::pose::PoseVec15;
use crate::schedule::STATE_DIM;

/// Architecture of the denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Total width of `D_i` (condition width + pose feature width).
    pub width: usize,
    /// Pose feature width inside `width`.
    pub pose_dim: usize,
    /// Number of transformer blocks `T_b`.
    pub num_blocks: usize,
    /// Token count the width is segmented into for attention.
    pub tokens: usize,
}

impl DenoiserConfig {
    /// Paper-scale: width 1792 = 16 x 112, seven blocks, three skips.
    pub fn full(cond_width: usize) -> Self {
        DenoiserConfig {
            width: cond_width + 256,
            pose_dim: 256,
            num_blocks: 7,
            tokens: 16,
        }
    }

    /// Desk-scale: width 448 = 16 x 28, three blocks, one skip.
    pub fn desk(cond_width: usize) -> Self {
        DenoiserConfig {
            width: cond_width + 64,
            pose_dim: 64,
            num_blocks: 3,
            tokens: 16,
        }
    }

    /// Skip-connection count `SC = floor(T_b / 2)`.
    pub fn num_skips(&self) -> usize {
        self.num_blocks / 2
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.tokens
    }

    pub fn validate(&self) -> Result<()> {
        if self.width % self.tokens != 0 {
            return Err(Error::Config(format!(
                "width {} must be divisible by token count {}",
                self.width, self.tokens
            )));
        }
        if self.pose_dim == 0 || self.pose_dim >= self.width {
            return Err(Error::Config("pose_dim must be in (0, width)".into()));
        }
        if self.num_blocks < 1 {
            return Err(Error::Config("need at least one block".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Transformer block
// ---------------------------------------------------------------------------

struct TransformerBlock {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    mlp1: Linear,
    mlp2: Linear,
    tokens: usize,
    head_dim: usize,
}

struct BlockCache {
    x: Array2<f64>,
    ln1: LayerNormCache,
    h1: Array2<f64>,
    q: Array3<f64>,
    k: Array3<f64>,
    v: Array3<f64>,
    attn: Array3<f64>,
    sa_flat: Array2<f64>,
    y1: Array2<f64>,
    ln2: LayerNormCache,
    h2: Array2<f64>,
    mlp_pre: Array2<f64>,
}

impl TransformerBlock {
    fn new(name: &str, width: usize, tokens: usize, rng: &mut impl Rng) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(&format!("{name}.ln1"), width),
            wq: Linear::new(&format!("{name}.wq"), width, width, rng),
            wk: Linear::new(&format!("{name}.wk"), width, width, rng),
            wv: Linear::new(&format!("{name}.wv"), width, width, rng),
            wo: Linear::new(&format!("{name}.wo"), width, width, rng),
            ln2: LayerNorm::new(&format!("{name}.ln2"), width),
            mlp1: Linear::new(&format!("{name}.mlp1"), width, 2 * width, rng),
            mlp2: Linear::new(&format!("{name}.mlp2"), 2 * width, width, rng),
            tokens,
            head_dim: width / tokens,
        }
    }

    fn to_tokens(&self, x: &Array2<f64>) -> Array3<f64> {
        let b = x.nrows();
        x.to_owned()
            .into_shape_with_order((b, self.tokens, self.head_dim))
            .expect("token reshape")
    }

    fn from_tokens(&self, x: &Array3<f64>) -> Array2<f64> {
        let b = x.dim().0;
        x.to_owned()
            .into_shape_with_order((b, self.tokens * self.head_dim))
            .expect("token flatten")
    }

    /// Row-wise softmax over the last axis.
    fn softmax(scores: &mut Array3<f64>) {
        for mut mat in scores.axis_iter_mut(Axis(0)) {
            for mut row in mat.rows_mut() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
        }
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, BlockCache) {
        let b = x.nrows();
        let (h1, ln1_cache) = self.ln1.forward(x);
        let q = self.to_tokens(&self.wq.forward(&h1));
        let k = self.to_tokens(&self.wk.forward(&h1));
        let v = self.to_tokens(&self.wv.forward(&h1));
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut attn = Array3::zeros((b, self.tokens, self.tokens));
        for bi in 0..b {
            let qb = q.index_axis(Axis(0), bi);
            let kb = k.index_axis(Axis(0), bi);
            let mut scores = qb.dot(&kb.t());
            scores *= scale;
            attn.index_axis_mut(Axis(0), bi).assign(&scores);
        }
        Self::softmax(&mut attn);
        let mut sa = Array3::zeros((b, self.tokens, self.head_dim));
        for bi in 0..b {
            let ab = attn.index_axis(Axis(0), bi);
            let vb = v.index_axis(Axis(0), bi);
            sa.index_axis_mut(Axis(0), bi).assign(&ab.dot(&vb));
        }
        let sa_flat = self.from_tokens(&sa);
        let o = self.wo.forward(&sa_flat);
        let y1 = x + &o;
        let (h2, ln2_cache) = self.ln2.forward(&y1);
        let mlp_pre = self.mlp1.forward(&h2);
        let mlp_act = nn::gelu(&mlp_pre);
        let mlp_out = self.mlp2.forward(&mlp_act);
        let y = &y1 + &mlp_out;
        (
            y,
            BlockCache {
                x: x.clone(),
                ln1: ln1_cache,
                h1,
                q,
                k,
                v,
                attn,
                sa_flat,
                y1,
                ln2: ln2_cache,
                h2,
                mlp_pre,
            },
        )
    }

    fn backward(&mut self, cache: &BlockCache, gy: &Array2<f64>) -> Array2<f64> {
        // y = y1 + mlp2(gelu(mlp1(ln2(y1))))
        let mlp_act = nn::gelu(&cache.mlp_pre);
        let g_mlp_act = self.mlp2.backward(&mlp_act, gy);
        let g_mlp_pre = nn::gelu_backward(&cache.mlp_pre, &g_mlp_act);
        let g_h2 = self.mlp1.backward(&cache.h2, &g_mlp_pre);
        let mut g_y1 = self.ln2.backward(&cache.ln2, &g_h2);
        g_y1 += gy;

        // y1 = x + wo(flatten(attn . v))
        let g_o = g_y1.clone();
        let g_sa_flat = self.wo.backward(&cache.sa_flat, &g_o);
        let b = gy.nrows();
        let g_sa = g_sa_flat
            .into_shape_with_order((b, self.tokens, self.head_dim))
            .expect("reshape");
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut g_q = Array3::zeros(cache.q.dim());
        let mut g_k = Array3::zeros(cache.k.dim());
        let mut g_v = Array3::zeros(cache.v.dim());
        for bi in 0..b {
            let a = cache.attn.index_axis(Axis(0), bi);
            let v = cache.v.index_axis(Axis(0), bi);
            let gsa = g_sa.index_axis(Axis(0), bi);
            // sa = a . v
            let g_a = gsa.dot(&v.t());
            g_v.index_axis_mut(Axis(0), bi).assign(&a.t().dot(&gsa));
            // softmax backward, row-wise
            let mut g_scores = Array2::zeros((self.tokens, self.tokens));
            for r in 0..self.tokens {
                let arow = a.row(r);
                let garow = g_a.row(r);
                let dot: f64 = arow.iter().zip(garow.iter()).map(|(p, g)| p * g).sum();
                for cidx in 0..self.tokens {
                    g_scores[(r, cidx)] = arow[cidx] * (garow[cidx] - dot);
                }
            }
            g_scores *= scale;
            let q = cache.q.index_axis(Axis(0), bi);
            let k = cache.k.index_axis(Axis(0), bi);
            g_q.index_axis_mut(Axis(0), bi).assign(&g_scores.dot(&k));
            g_k.index_axis_mut(Axis(0), bi)
                .assign(&g_scores.t().dot(&q));
        }
        let g_h1 = self.wq.backward(&cache.h1, &self.from_tokens(&g_q))
            + self.wk.backward(&cache.h1, &self.from_tokens(&g_k))
            + self.wv.backward(&cache.h1, &self.from_tokens(&g_v));
        let mut gx = self.ln1.backward(&cache.ln1, &g_h1);
        gx += &g_y1;
        gx
    }

    fn params(&mut self) -> Vec<ParamView<'_>> {
        let mut p = self.ln1.params();
        p.extend(self.wq.params());
        p.extend(self.wk.params());
        p.extend(self.wv.params());
        p.extend(self.wo.params());
        p.extend(self.ln2.params());
        p.extend(self.mlp1.params());
        p.extend(self.mlp2.params());
        p
    }

    /// Attention weights for one input row; used by tests.
    #[cfg(test)]
    fn attention_matrix(&self, x: &Array2<f64>) -> Array2<f64> {
        let (_, cache) = self.forward(x);
        cache.attn.index_axis(Axis(0), 0).to_owned()
    }
}

// ---------------------------------------------------------------------------
// Denoiser
// ---------------------------------------------------------------------------

/// Pose-noise predictor over `D_i = [c, F_pose]`.
pub struct Denoiser {
    pub config: DenoiserConfig,
    pose_embed1: Linear,
    pose_embed2: Linear,
    blocks: Vec<TransformerBlock>,
    skip_reducers: Vec<Linear>,
    head: Linear,
    calls: std::cell::Cell<u64>,
}

pub struct DenoiserForward {
    pub eps_hat: Array2<f64>,
    x: Array2<f64>,
    pose_pre: Array2<f64>,
    block_caches: Vec<BlockCache>,
    reducer_inputs: Vec<Option<Array2<f64>>>,
    final_out: Array2<f64>,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::new();
        for i in 0..config.num_blocks {
            blocks.push(TransformerBlock::new(
                &format!("blk{i}"),
                config.width,
                config.tokens,
                rng,
            ));
        }
        let mut skip_reducers = Vec::new();
        for i in 0..config.num_skips() {
            skip_reducers.push(Linear::new(
                &format!("skip{i}"),
                2 * config.width,
                config.width,
                rng,
            ));
        }
        Ok(Denoiser {
            pose_embed1: Linear::new("pose.lin1", STATE_DIM, config.pose_dim, rng),
            pose_embed2: Linear::new("pose.lin2", config.pose_dim, config.pose_dim, rng),
            blocks,
            skip_reducers,
            head: Linear::new("head", config.width, STATE_DIM, rng),
            config,
            calls: std::cell::Cell::new(0),
        })
    }

    /// Two-layer pose feature map (the `embed_pose` operation).
    pub fn embed_pose(&self, x: &PoseVec15) -> Array1<f64> {
        let row = Array2::from_shape_fn((1, STATE_DIM), |(_, j)| x.0[j]);
        let pre = self.pose_embed1.forward(&row);
        let act = nn::gelu(&pre);
        self.pose_embed2.forward(&act).row(0).to_owned()
    }

    /// Number of transformer-block applications so far (diagnostics).
    pub fn block_invocations(&self) -> u64 {
        self.calls.get()
    }

    pub fn reset_block_invocations(&self) {
        self.calls.set(0);
    }

    /// Batched forward pass. `x` is `(B, 15)`, `c` is `(B, cond_width)`.
    pub fn forward(&self, x: &Array2<f64>, c: &Array2<f64>) -> Result<DenoiserForward> {
        self.forward_inner(x, c, false)
    }

    fn forward_inner(&self, x: &Array2<f64>, c: &Array2<f64>, disable_skips: bool) -> Result<DenoiserForward> {
        let b = x.nrows();
        let cond_width = self.config.width - self.config.pose_dim;
        if x.ncols() != STATE_DIM || c.ncols() != cond_width || c.nrows() != b {
            return Err(Error::ShapeMismatch {
                expected: format!("x (B, {STATE_DIM}) and c (B, {cond_width})"),
                got: format!("{:?} and {:?}", x.dim(), c.dim()),
            });
        }
        let pose_pre = self.pose_embed1.forward(x);
        let pose_act = nn::gelu(&pose_pre);
        let pose_x = self.pose_embed2.forward(&pose_act);
        let mut d_i = Array2::zeros((b, self.config.width));
        d_i.slice_mut(ndarray::s![.., ..cond_width]).assign(c);
        d_i.slice_mut(ndarray::s![.., cond_width..]).assign(&pose_x);

        let sc = self.config.num_skips();
        let tb = self.config.num_blocks;
        let mut cur = d_i.clone();
        let mut saved: Vec<Array2<f64>> = Vec::with_capacity(sc);
        let mut block_caches = Vec::with_capacity(tb);
        let mut reducer_inputs: Vec<Option<Array2<f64>>> = vec![None; tb];
        for bi in 0..tb {
            // Blocks are 1-based in the pairing: block tb+1-k consumes the
            // output saved by block k.
            let block_no = bi + 1;
            if block_no > tb - sc {
                let skip_idx = tb - block_no; // tb -> 0, tb-1 -> 1, ...
                if !disable_skips {
                    let skip = &saved[skip_idx];
                    let concat =
                        ndarray::concatenate(Axis(1), &[cur.view(), skip.view()]).expect("concat");
                    reducer_inputs[bi] = Some(concat.clone());
                    cur = self.skip_reducers[skip_idx].forward(&concat);
                } else {
                    let zeros = Array2::zeros(cur.dim());
                    let concat =
                        ndarray::concatenate(Axis(1), &[cur.view(), zeros.view()]).expect("concat");
                    reducer_inputs[bi] = Some(concat.clone());
                    cur = self.skip_reducers[skip_idx].forward(&concat);
                }
            }
            let (y, cache) = self.blocks[bi].forward(&cur);
            block_caches.push(cache);
            cur = y;
            if block_no <= sc {
                saved.push(cur.clone());
            }
            self.calls.set(self.calls.get() + 1);
        }
        let eps_hat = self.head.forward(&cur);
        if !eps_hat.iter().all(|v| v.is_finite()) {
            return Err(Error::DenoiserDiverged(
                "non-finite activations in eps head".into(),
            ));
        }
        Ok(DenoiserForward {
            eps_hat,
            x: x.clone(),
            pose_pre,
            block_caches,
            reducer_inputs,
            final_out: cur,
        })
    }

    /// Backward pass from the gradient on ε̂; accumulates parameter gradients
    /// and returns the gradient on the condition batch.
    pub fn backward(&mut self, fwd: &DenoiserForward, g_eps: &Array2<f64>) -> Array2<f64> {
        let sc = self.config.num_skips();
        let tb = self.config.num_blocks;
        let cond_width = self.config.width - self.config.pose_dim;
        let mut g = self.head.backward(&fwd.final_out, g_eps);
        // Gradients flowing into each saved skip output (by skip index).
        let mut g_saved: Vec<Array2<f64>> = (0..sc)
            .map(|_| Array2::zeros((g_eps.nrows(), self.config.width)))
            .collect();
        for bi in (0..tb).rev() {
            let block_no = bi + 1;
            if block_no <= sc {
                g += &g_saved[block_no - 1];
            }
            g = self.blocks[bi].backward(&fwd.block_caches[bi], &g);
            if block_no > tb - sc {
                let skip_idx = tb - block_no;
                let concat = fwd.reducer_inputs[bi].as_ref().expect("reducer input");
                let g_concat = self.skip_reducers[skip_idx].backward(concat, &g);
                g = g_concat
                    .slice(ndarray::s![.., ..self.config.width])
                    .to_owned();
                let g_skip = g_concat
                    .slice(ndarray::s![.., self.config.width..])
                    .to_owned();
                g_saved[skip_idx] += &g_skip;
            }
        }
        // g is now the gradient on D_i.
        let g_c = g.slice(ndarray::s![.., ..cond_width]).to_owned();
        let g_pose = g.slice(ndarray::s![.., cond_width..]).to_owned();
        let pose_act = nn::gelu(&fwd.pose_pre);
        let g_pose_act = self.pose_embed2.backward(&pose_act, &g_pose);
        let g_pose_pre = nn::gelu_backward(&fwd.pose_pre, &g_pose_act);
        // The input gradient on x is discarded; x_t is data, not a parameter.
        let _ = self.pose_embed1.backward(&fwd.x, &g_pose_pre);
        g_c
    }

    /// Single-sample denoise (the `denoise` operation).
    pub fn denoise(&self, x_t: &PoseVec15, t: usize, c: &ConditionVector) -> Result<[f64; STATE_DIM]> {
        let _ = t; // the time step enters through c_timestep
        let x = Array2::from_shape_fn((1, STATE_DIM), |(_, j)| x_t.0[j]);
        let cb = Array2::from_shape_fn((1, c.c.len()), |(_, j)| c.c[j]);
        let fwd = self.forward(&x, &cb)?;
        let mut out = [0.0; STATE_DIM];
        for i in 0..STATE_DIM {
            out[i] = fwd.eps_hat[(0, i)];
        }
        Ok(out)
    }

    #[cfg(test)]
    fn denoise_without_skips(&self, x_t: &PoseVec15, c: &Array1<f64>) -> [f64; STATE_DIM] {
        let x = Array2::from_shape_fn((1, STATE_DIM), |(_, j)| x_t.0[j]);
        let cb = Array2::from_shape_fn((1, c.len()), |(_, j)| c[j]);
        let fwd = self.forward_inner(&x, &cb, true).unwrap();
        let mut out = [0.0; STATE_DIM];
        for i in 0..STATE_DIM {
            out[i] = fwd.eps_hat[(0, i)];
        }
        out
    }

    pub fn params(&mut self) -> Vec<ParamView<'_>> {
        let mut p = self.pose_embed1.params();
        p.extend(self.pose_embed2.params());
        for b in &mut self.blocks {
            p.extend(b.params());
        }
        for r in &mut self.skip_reducers {
            p.extend(r.params());
        }
        p.extend(self.head.params());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;

    fn toy_config() -> DenoiserConfig {
        DenoiserConfig {
            width: 32,
            pose_dim: 8,
            num_blocks: 3,
            tokens: 4,
        }
    }

    fn rand_cond(rng: &mut impl Rng, width: usize) -> Array2<f64> {
        Array2::from_shape_fn((1, width), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn config_invariants() {
        let full = DenoiserConfig::full(1536);
        assert_eq!(full.width, 1792);
        assert_eq!(full.head_dim(), 112);
        assert_eq!(full.tokens * full.head_dim(), full.width);
        assert_eq!(full.num_skips(), 3);
        let desk = DenoiserConfig::desk(384);
        assert_eq!(desk.width, 448);
        assert_eq!(desk.head_dim(), 28);
        assert_eq!(desk.num_skips(), 1);
        let bad = DenoiserConfig {
            width: 30,
            pose_dim: 8,
            num_blocks: 3,
            tokens: 4,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = seeded_rng(1, "attn");
        let blk = TransformerBlock::new("b", 32, 4, &mut rng);
        let x = rand_cond(&mut rng, 32);
        let attn = blk.attention_matrix(&x);
        assert_eq!(attn.dim(), (4, 4));
        for row in attn.rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
        }
    }

    #[test]
    fn zero_input_finite() {
        let mut rng = seeded_rng(2, "zero");
        let cfg = toy_config();
        let den = Denoiser::new(cfg, &mut rng).unwrap();
        let x = Array2::zeros((1, STATE_DIM));
        let c = Array2::zeros((1, cfg.width - cfg.pose_dim));
        let fwd = den.forward(&x, &c).unwrap();
        assert!(fwd.eps_hat.iter().all(|v| v.is_finite()));
        assert_eq!(fwd.eps_hat.ncols(), STATE_DIM);
    }

    #[test]
    fn block_count_instrumented() {
        let mut rng = seeded_rng(3, "count");
        let cfg = toy_config();
        let den = Denoiser::new(cfg, &mut rng).unwrap();
        let x = Array2::zeros((2, STATE_DIM));
        let c = Array2::zeros((2, cfg.width - cfg.pose_dim));
        den.reset_block_invocations();
        den.forward(&x, &c).unwrap();
        assert_eq!(den.block_invocations(), cfg.num_blocks as u64);
    }

    #[test]
    fn embed_pose_properties() {
        let mut rng = seeded_rng(4, "pose");
        let cfg = toy_config();
        let den = Denoiser::new(cfg, &mut rng).unwrap();
        let a = den.embed_pose(&PoseVec15([0.1; STATE_DIM]));
        assert_eq!(a.len(), cfg.pose_dim);
        assert!(a.iter().all(|v| v.is_finite()));
        let b = den.embed_pose(&PoseVec15([0.2; STATE_DIM]));
        assert!((&a - &b).mapv(f64::abs).sum() > 1e-9, "distinct inputs must differ");
        let a2 = den.embed_pose(&PoseVec15([0.1; STATE_DIM]));
        assert_eq!(a, a2);
    }

    #[test]
    fn skip_connections_are_live() {
        let mut rng = seeded_rng(5, "skip");
        let cfg = toy_config();
        let den = Denoiser::new(cfg, &mut rng).unwrap();
        let mut rng2 = seeded_rng(6, "skip-in");
        let x = PoseVec15([0.3; STATE_DIM]);
        let c = Array1::from_shape_fn(cfg.width - cfg.pose_dim, |_| rng2.gen_range(-1.0..1.0));
        let cv = ConditionVector {
            c_timestep: Array1::zeros(0),
            c_rgb: Array1::zeros(0),
            c_point: Array1::zeros(0),
            c_shape: Array1::zeros(0),
            c: c.clone(),
        };
        let with = den.denoise(&x, 1, &cv).unwrap();
        let without = den.denoise_without_skips(&x, &c);
        let diff: f64 = with
            .iter()
            .zip(without.iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-9, "zeroing skips must change the output");
    }

    #[test]
    fn deterministic_given_parameters() {
        let mut rng = seeded_rng(7, "det");
        let cfg = toy_config();
        let den = Denoiser::new(cfg, &mut rng).unwrap();
        let mut rng2 = seeded_rng(8, "det-in");
        let x = Array2::from_shape_fn((3, STATE_DIM), |_| rng2.gen_range(-1.0..1.0));
        let c = Array2::from_shape_fn((3, cfg.width - cfg.pose_dim), |_| rng2.gen_range(-1.0..1.0));
        let a = den.forward(&x, &c).unwrap().eps_hat;
        let b = den.forward(&x, &c).unwrap().eps_hat;
        assert_eq!(a, b);
    }

    #[test]
    fn gradients_match_finite_differences() {
        // || eps - denoise(x, c) ||^2 gradient against central differences on
        // the width-32, 3-block toy config.
        let mut rng = seeded_rng(9, "grad");
        let cfg = toy_config();
        let mut den = Denoiser::new(cfg, &mut rng).unwrap();
        let mut rng2 = seeded_rng(10, "grad-in");
        let x = Array2::from_shape_fn((2, STATE_DIM), |_| rng2.gen_range(-1.0..1.0));
        let c = Array2::from_shape_fn((2, cfg.width - cfg.pose_dim), |_| rng2.gen_range(-1.0..1.0));
        let target = Array2::from_shape_fn((2, STATE_DIM), |_| rng2.gen_range(-1.0..1.0));

        let loss_of = |den: &Denoiser| {
            let fwd = den.forward(&x, &c).unwrap();
            (&fwd.eps_hat - &target).mapv(|v| v * v).sum()
        };

        nn::zero_grads(&mut den.params());
        let fwd = den.forward(&x, &c).unwrap();
        let g_eps = (&fwd.eps_hat - &target) * 2.0;
        den.backward(&fwd, &g_eps);
        let grads = nn::flatten_grads(&den.params());
        let base = nn::flatten_params(&den.params());

        let mut dir_rng = seeded_rng(11, "dirs");
        let h = 1e-6;
        let mut checked = 0;
        for _ in 0..8 {
            let dir: Vec<f64> = base.iter().map(|_| dir_rng.gen_range(-1.0..1.0)).collect();
            let analytic: f64 = grads.iter().zip(&dir).map(|(g, d)| g * d).sum();
            let plus: Vec<f64> = base.iter().zip(&dir).map(|(p, d)| p + h * d).collect();
            nn::set_flat_params(&mut den.params(), &plus);
            let lp = loss_of(&den);
            let minus: Vec<f64> = base.iter().zip(&dir).map(|(p, d)| p - h * d).collect();
            nn::set_flat_params(&mut den.params(), &minus);
            let lm = loss_of(&den);
            nn::set_flat_params(&mut den.params(), &base);
            let numeric = (lp - lm) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(1e-9);
            let rel = (analytic - numeric).abs() / denom;
            assert!(rel < 1e-3, "rel err {rel} (analytic {analytic}, numeric {numeric})");
            checked += 1;
        }
        assert_eq!(checked, 8);
    }

    #[test]
    fn condition_gradient_matches_finite_differences() {
        let mut rng = seeded_rng(12, "cgrad");
        let cfg = toy_config();
        let mut den = Denoiser::new(cfg, &mut rng).unwrap();
        let mut rng2 = seeded_rng(13, "cgrad-in");
        let x = Array2::from_shape_fn((1, STATE_DIM), |_| rng2.gen_range(-1.0..1.0));
        let c = Array2::from_shape_fn((1, cfg.width - cfg.pose_dim), |_| rng2.gen_range(-1.0..1.0));

        let loss_of = |den: &Denoiser, c: &Array2<f64>| {
            let fwd = den.forward(&x, c).unwrap();
            fwd.eps_hat.mapv(|v| v * v).sum()
        };
        nn::zero_grads(&mut den.params());
        let fwd = den.forward(&x, &c).unwrap();
        let g_eps = &fwd.eps_hat * 2.0;
        let g_c = den.backward(&fwd, &g_eps);
        let h = 1e-6;
        for j in [0usize, 5, 17, 23] {
            let mut cp = c.clone();
            cp[(0, j)] += h;
            let mut cm = c.clone();
            cm[(0, j)] -= h;
            let num = (loss_of(&den, &cp) - loss_of(&den, &cm)) / (2.0 * h);
            assert!(
                (num - g_c[(0, j)]).abs() < 1e-5,
                "cond grad {num} vs {}",
                g_c[(0, j)]
            );
        }
    }
}
