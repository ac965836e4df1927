//! Variance schedule, closed-form forward noising, and DDPM/DDIM reverse steps
//! over the 15-value pose state.
//!
//! Time steps are 1-based: `t` ranges over `[1, T]`, `alpha_bar(0)` is defined
//! as 1 so the final reverse step is deterministic.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::PoseVec15;

pub const STATE_DIM: usize = 15;

/// Default linear-schedule endpoints; exposed through configuration.
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// β/α/ᾱ tables over `T` steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSchedule {
    t_steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn t_steps(&self) -> usize {
        self.t_steps
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_steps {
            return Err(Error::StepOutOfRange {
                t,
                t_max: self.t_steps,
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// ᾱ_t with the boundary convention ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }
}

/// Linearly spaced β in `[beta_start, beta_end]` over `T` steps.
pub fn make_linear_schedule(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_steps < 1 {
        return Err(Error::Config("T must be >= 1".into()));
    }
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let mut beta = Vec::with_capacity(t_steps);
    if t_steps == 1 {
        beta.push(beta_start);
    } else {
        let step = (beta_end - beta_start) / (t_steps - 1) as f64;
        for i in 0..t_steps {
            beta.push(beta_start + step * i as f64);
        }
    }
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_steps);
    let mut prod = 1.0;
    for a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule {
        t_steps,
        beta,
        alpha,
        alpha_bar,
    })
}

/// Closed-form forward noising: `x_t = sqrt(ᾱ_t) x0 + sqrt(1-ᾱ_t) ε`.
pub fn add_noise(x0: &PoseVec15, t: usize, eps: &[f64; STATE_DIM], sched: &NoiseSchedule) -> Result<PoseVec15> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = [0.0; STATE_DIM];
    for i in 0..STATE_DIM {
        out[i] = a * x0.0[i] + b * eps[i];
    }
    Ok(PoseVec15(out))
}

/// One Markov forward step: `x_t = sqrt(β_t) ε_t + sqrt(1-β_t) x_{t-1}`.
pub fn single_step_noise(
    x_prev: &PoseVec15,
    t: usize,
    eps_t: &[f64; STATE_DIM],
    sched: &NoiseSchedule,
) -> Result<PoseVec15> {
    sched.check_t(t)?;
    let b = sched.beta(t);
    let (sb, sa) = (b.sqrt(), (1.0 - b).sqrt());
    let mut out = [0.0; STATE_DIM];
    for i in 0..STATE_DIM {
        out[i] = sb * eps_t[i] + sa * x_prev.0[i];
    }
    Ok(PoseVec15(out))
}

/// Posterior variance of `p(x_{t-1} | x_t, x_0)`:
/// `(1-ᾱ_{t-1}) / (1-ᾱ_t) * β_t`, zero at `t = 1`.
pub fn posterior_variance(t: usize, sched: &NoiseSchedule) -> Result<f64> {
    sched.check_t(t)?;
    Ok((1.0 - sched.alpha_bar(t - 1)) / (1.0 - sched.alpha_bar(t)) * sched.beta(t))
}

/// Inverts the closed form: `x0 = (x_t - sqrt(1-ᾱ_t) ε̂) / sqrt(ᾱ_t)`.
pub fn predict_x0(
    x_t: &PoseVec15,
    eps_hat: &[f64; STATE_DIM],
    t: usize,
    sched: &NoiseSchedule,
) -> Result<PoseVec15> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = [0.0; STATE_DIM];
    for i in 0..STATE_DIM {
        out[i] = (x_t.0[i] - sb * eps_hat[i]) / sa;
    }
    Ok(PoseVec15(out))
}

/// One DDPM reverse step: posterior mean from the predicted noise plus
/// `sqrt(posterior_variance) * noise`. The variance vanishes at `t = 1`, so
/// the final step is deterministic regardless of `noise`.
pub fn ddpm_step(
    x_t: &PoseVec15,
    eps_hat: &[f64; STATE_DIM],
    t: usize,
    noise: &[f64; STATE_DIM],
    sched: &NoiseSchedule,
) -> Result<PoseVec15> {
    sched.check_t(t)?;
    let a = sched.alpha(t);
    let ab = sched.alpha_bar(t);
    let mean_scale = 1.0 / a.sqrt();
    let eps_scale = (1.0 - a) / (1.0 - ab).sqrt();
    let sigma = posterior_variance(t, sched)?.sqrt();
    let mut out = [0.0; STATE_DIM];
    for i in 0..STATE_DIM {
        let mu = mean_scale * (x_t.0[i] - eps_scale * eps_hat[i]);
        out[i] = mu + sigma * noise[i];
    }
    Ok(PoseVec15(out))
}

/// Subsampled reverse schedule: `S` ascending time indices ending at `T` and
/// the per-index noise scale σ_τi.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DdimPlan {
    taus: Vec<usize>,
    sigmas: Vec<f64>,
    eta: f64,
}

impl DdimPlan {
    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    pub fn taus(&self) -> &[usize] {
        &self.taus
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// τ_{i-1} for the 1-based plan index `i`; τ_0 is 0 (ᾱ_0 = 1).
    fn tau_prev(&self, i: usize) -> usize {
        if i >= 2 {
            self.taus[i - 2]
        } else {
            0
        }
    }
}

/// Evenly spaced subsampling `τ_i = ceil(i T / S)`, anchored at `τ_S = T`,
/// with `σ²_τi = (1-ᾱ_{τ_{i-1}}) / (1-ᾱ_{τ_i}) β_{τ_i}` scaled by `eta`.
pub fn make_ddim_plan(sched: &NoiseSchedule, s: usize) -> Result<DdimPlan> {
    make_ddim_plan_with_eta(sched, s, 1.0)
}

pub fn make_ddim_plan_with_eta(sched: &NoiseSchedule, s: usize, eta: f64) -> Result<DdimPlan> {
    let t_steps = sched.t_steps();
    if s < 1 || s > t_steps {
        return Err(Error::Config(format!(
            "S must be in [1, T]; got S={s}, T={t_steps}"
        )));
    }
    if !(eta.is_finite() && eta >= 0.0) {
        return Err(Error::Config(format!("eta must be >= 0, got {eta}")));
    }
    let taus: Vec<usize> = (1..=s).map(|i| (i * t_steps).div_ceil(s)).collect();
    let mut sigmas = Vec::with_capacity(s);
    for (idx, &tau) in taus.iter().enumerate() {
        let tau_prev = if idx == 0 { 0 } else { taus[idx - 1] };
        let var =
            (1.0 - sched.alpha_bar(tau_prev)) / (1.0 - sched.alpha_bar(tau)) * sched.beta(tau);
        sigmas.push(eta * var.sqrt());
    }
    Ok(DdimPlan { taus, sigmas, eta })
}

/// One DDIM reverse step from `x_{τ_i}` to `x_{τ_{i-1}}` (`i` is the 1-based
/// plan index).
pub fn ddim_step(
    x_tau: &PoseVec15,
    eps_hat: &[f64; STATE_DIM],
    i: usize,
    noise: &[f64; STATE_DIM],
    plan: &DdimPlan,
    sched: &NoiseSchedule,
) -> Result<PoseVec15> {
    if i < 1 || i > plan.len() {
        return Err(Error::StepOutOfRange {
            t: i,
            t_max: plan.len(),
        });
    }
    let tau = plan.taus[i - 1];
    let tau_prev = plan.tau_prev(i);
    let sigma = plan.sigmas[i - 1];
    let ab = sched.alpha_bar(tau);
    let ab_prev = sched.alpha_bar(tau_prev);
    let x0 = predict_x0(x_tau, eps_hat, tau, sched)?;
    let mut dir_coef_sq = 1.0 - ab_prev - sigma * sigma;
    if dir_coef_sq < 0.0 {
        log::warn!(
            "ddim_step: 1 - alpha_bar(tau_prev) - sigma^2 = {dir_coef_sq:.3e} < 0 \
             (degenerate schedule, eta = {}); clamping to 0",
            plan.eta
        );
        dir_coef_sq = 0.0;
    }
    let dir_coef = dir_coef_sq.sqrt();
    let denom = (1.0 - ab).sqrt();
    let sa_prev = ab_prev.sqrt();
    let sa = ab.sqrt();
    let mut out = [0.0; STATE_DIM];
    for k in 0..STATE_DIM {
        let dir = (x_tau.0[k] - sa * x0.0[k]) / denom;
        out[k] = sa_prev * x0.0[k] + dir_coef * dir + sigma * noise[k];
    }
    Ok(PoseVec15(out))
}

/// Draws a standard-normal 15-vector.
pub fn standard_normal(rng: &mut impl rand::Rng) -> [f64; STATE_DIM] {
    let mut out = [0.0; STATE_DIM];
    for v in &mut out {
        *v = rng.sample(rand_distr::StandardNormal);
    }
    out
}

/// Runs the full reverse chain: start from seeded Gaussian noise and apply
/// [`ddim_step`] for `i = S..1`. Calls `denoise` exactly `S` times.
///
/// `denoise` maps `(x, t, condition)` to the predicted noise ε̂.
pub fn sample_loop<C, F>(
    mut denoise: F,
    condition: &C,
    plan: &DdimPlan,
    sched: &NoiseSchedule,
    rng_seed: u64,
) -> Result<PoseVec15>
where
    F: FnMut(&PoseVec15, usize, &C) -> Result<[f64; STATE_DIM]>,
{
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    let mut x = PoseVec15(standard_normal(&mut rng));
    for i in (1..=plan.len()).rev() {
        let tau = plan.taus[i - 1];
        let eps_hat = denoise(&x, tau, condition)?;
        let noise = if i > 1 {
            standard_normal(&mut rng)
        } else {
            [0.0; STATE_DIM]
        };
        x = ddim_step(&x, &eps_hat, i, &noise, plan, sched)?;
        if !x.is_finite() {
            return Err(Error::SamplerDiverged { step: i });
        }
    }
    Ok(x)
}
