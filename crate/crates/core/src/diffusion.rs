//! Latent DDPM: noise schedule, closed-form forward noising, the
//! ε-prediction objective and a strided deterministic (η = 0) sampler.

pub mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserLayout};
use crate::error::{ensure, Result};
use crate::rng;
use crate::tensor_grad::{Bound, Graph, Tensor, Var};
use crate::text_mamba::TextEmbedding;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { timesteps: 1000, beta_start: 8.5e-4, beta_end: 0.012 }
    }
}

/// Linear variance schedule with its cumulative products.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(config: &ScheduleConfig) -> Result<Self> {
        let t = config.timesteps;
        ensure!(t >= 2, "schedule needs at least two steps, got {t}");
        ensure!(
            0.0 < config.beta_start && config.beta_start < config.beta_end && config.beta_end < 1.0,
            "betas must satisfy 0 < start < end < 1, got {} and {}",
            config.beta_start,
            config.beta_end
        );
        let betas: Vec<f64> = (0..t)
            .map(|i| config.beta_start + (config.beta_end - config.beta_start) * i as f64 / (t - 1) as f64)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(t);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alphas, alpha_bars })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        ensure!(t < self.timesteps(), "timestep {t} out of range [0, {})", self.timesteps());
        Ok(self.alpha_bars[t])
    }
}

/// `z_t = √ᾱ_t · z0 + √(1 − ᾱ_t) · ε`.
pub fn q_sample(z0: &Tensor, t: usize, eps: &Tensor, schedule: &DiffusionSchedule) -> Result<Tensor> {
    ensure!(z0.shape() == eps.shape(), "noise shape {:?} does not match {:?}", eps.shape(), z0.shape());
    let ab = schedule.alpha_bar(t)?;
    let (s0, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_map(eps, |z, e| s0 * z + s1 * e)
}

/// Anything that predicts the noise in `z_t`.
pub trait EpsModel {
    fn predict_eps(&self, z_t: &Tensor, t: usize, cond: &TextEmbedding, schedule: &DiffusionSchedule) -> Result<Tensor>;
}

impl EpsModel for Denoiser {
    fn predict_eps(&self, z_t: &Tensor, t: usize, cond: &TextEmbedding, schedule: &DiffusionSchedule) -> Result<Tensor> {
        self.denoise_eps(z_t, t, cond, schedule)
    }
}

/// One training example: a clean latent and its sentence embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub z0: Tensor,
    pub cond: TextEmbedding,
}

/// Timestep and noise drawn for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Tensor,
}

/// Draws `(t, ε)` for each example in order: `t` uniform over the schedule, `ε` standard normal.
pub fn draw_noise(rng: &mut impl Rng, batch: &[&Example], timesteps: usize) -> Vec<NoiseDraw> {
    batch
        .iter()
        .map(|ex| {
            let t = rng.random_range(0..timesteps);
            let eps = rng::normal_tensor(rng, ex.z0.shape(), 1.0);
            NoiseDraw { t, eps }
        })
        .collect()
}

/// Batch mean of `‖ε − ε_θ(z_t, t, f_t)‖²`.
pub fn training_loss(
    batch: &[&Example],
    model: &impl EpsModel,
    schedule: &DiffusionSchedule,
    rng: &mut impl Rng,
) -> Result<f64> {
    ensure!(!batch.is_empty(), "training batch is empty");
    let draws = draw_noise(rng, batch, schedule.timesteps());
    let mut total = 0.0;
    for (ex, d) in batch.iter().zip(&draws) {
        let z_t = q_sample(&ex.z0, d.t, &d.eps, schedule)?;
        let pred = model.predict_eps(&z_t, d.t, &ex.cond, schedule)?;
        ensure!(pred.shape() == d.eps.shape(), "model output shape {:?}", pred.shape());
        total += pred.zip_map(&d.eps, |p, e| p - e)?.sum_sq();
    }
    Ok(total / batch.len() as f64)
}

/// Builds the same objective as [`training_loss`] on a graph, for given draws.
pub fn training_loss_node(
    g: &mut Graph,
    b: &Bound,
    layout: &DenoiserLayout,
    batch: &[&Example],
    draws: &[NoiseDraw],
    schedule: &DiffusionSchedule,
) -> Result<Var> {
    ensure!(!batch.is_empty(), "training batch is empty");
    ensure!(batch.len() == draws.len(), "{} examples but {} noise draws", batch.len(), draws.len());
    let mut total: Option<Var> = None;
    for (ex, d) in batch.iter().zip(draws) {
        let z_t = g.constant(q_sample(&ex.z0, d.t, &d.eps, schedule)?);
        let f_t = g.constant(ex.cond.as_tensor().clone());
        let target = g.constant(d.eps.clone());
        let pred = layout.forward_eps(g, b, z_t, d.t, f_t, schedule.alpha_bar(d.t)?)?;
        let mse = g.mse(pred, target)?;
        let term = g.scale(mse, d.eps.len() as f64 / batch.len() as f64)?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("nonempty batch"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub inference_steps: usize,
    /// Classifier-free guidance weight against the zero embedding; `None` disables it.
    pub guidance_scale: Option<f64>,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { inference_steps: 50, guidance_scale: None, seed: 0 }
    }
}

/// Evenly spaced timesteps from `T − 1` down to `0`.
pub fn strided_timesteps(timesteps: usize, steps: usize) -> Result<Vec<usize>> {
    ensure!(steps >= 2, "need at least two inference steps, got {steps}");
    ensure!(steps <= timesteps, "{steps} inference steps exceed {timesteps} diffusion steps");
    let last = (timesteps - 1) as f64;
    let mut ts: Vec<usize> =
        (0..steps).map(|i| (last * (steps - 1 - i) as f64 / (steps - 1) as f64).round() as usize).collect();
    ts.dedup();
    Ok(ts)
}

/// Deterministic DDIM sampling from seeded Gaussian noise.
pub fn sample(
    f_t: &TextEmbedding,
    model: &impl EpsModel,
    schedule: &DiffusionSchedule,
    sampler: &SamplerConfig,
    shape: &[usize],
) -> Result<Tensor> {
    let z_init = rng::normal_tensor(&mut rng::stream(sampler.seed, "sample-noise"), shape, 1.0);
    sample_from(z_init, f_t, model, schedule, sampler)
}

/// DDIM (η = 0) from a given `z_T`; returns the final `ẑ_0`.
pub fn sample_from(
    z_init: Tensor,
    f_t: &TextEmbedding,
    model: &impl EpsModel,
    schedule: &DiffusionSchedule,
    sampler: &SamplerConfig,
) -> Result<Tensor> {
    let ts = strided_timesteps(schedule.timesteps(), sampler.inference_steps)?;
    let unconditional = sampler.guidance_scale.map(|_| TextEmbedding::zeros(f_t.width()));
    let mut z = z_init;
    let mut z0_hat = z.clone();
    for (i, &t) in ts.iter().enumerate() {
        let mut eps = model.predict_eps(&z, t, f_t, schedule)?;
        if let (Some(w), Some(uncond)) = (sampler.guidance_scale, unconditional.as_ref()) {
            let eps_u = model.predict_eps(&z, t, uncond, schedule)?;
            eps = eps.zip_map(&eps_u, |c, u| (1.0 + w) * c - w * u)?;
        }
        let ab = schedule.alpha_bar(t)?;
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        z0_hat = z.zip_map(&eps, |zv, e| (zv - sn * e) / sa)?;
        if let Some(&next) = ts.get(i + 1) {
            let abn = schedule.alpha_bar(next)?;
            let (na, nn) = (abn.sqrt(), (1.0 - abn).sqrt());
            z = z0_hat.zip_map(&eps, |x0, e| na * x0 + nn * e)?;
        }
    }
    ensure!(z0_hat.is_finite(), "sampling produced non-finite values");
    Ok(z0_hat)
}
