//! AdamW training of the denoiser on the ε-prediction objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::diffusion::{draw_noise, training_loss_node, DiffusionSchedule, Example};
use crate::error::{ensure, Error, Result};
use crate::rng;
use crate::tensor_grad::{Graph, ParameterSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled decay, applied as `lr · weight_decay · θ`.
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size > 0, "batch_size must be positive");
        ensure!(self.learning_rate >= 0.0 && self.learning_rate.is_finite(), "learning_rate must be finite and >= 0");
        ensure!((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2), "betas must lie in [0, 1)");
        ensure!(self.epsilon > 0.0, "epsilon must be positive");
        ensure!(self.weight_decay >= 0.0, "weight_decay must be >= 0");
        Ok(())
    }
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: ParameterSet,
    pub v: ParameterSet,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &ParameterSet) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    pub fn update(&mut self, cfg: &TrainConfig, params: &mut ParameterSet, grads: &ParameterSet) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powf(self.t as f64);
        let bc2 = 1.0 - cfg.beta2.powf(self.t as f64);
        let lr = cfg.learning_rate;
        let frozen: Vec<String> = params.names().filter(|n| params.is_frozen(n)).map(str::to_string).collect();
        for (name, p) in params.values_mut() {
            if frozen.iter().any(|f| f == name) {
                continue;
            }
            let g = grads.get(name).ok_or_else(|| crate::error::contract(format!("no gradient for `{name}`")))?;
            let m = self.m.get_mut(name).ok_or_else(|| crate::error::contract(format!("no moment for `{name}`")))?;
            let v = self.v.get_mut(name).expect("moments share names");
            ensure!(g.shape() == p.shape(), "gradient shape mismatch for `{name}`");
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
                vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
                let step = (md[i] / bc1) / ((vd[i] / bc2).sqrt() + cfg.epsilon);
                pd[i] -= lr * (step + cfg.weight_decay * pd[i]);
            }
        }
        Ok(())
    }
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Denoiser,
    pub optimizer: AdamW,
    pub root_seed: u64,
    /// Optimizer steps taken.
    pub step: u64,
    /// Batch loss before each update.
    pub loss_trace: Vec<f64>,
}

impl TrainState {
    pub fn new(model: Denoiser, root_seed: u64) -> Self {
        let optimizer = AdamW::new(&model.params);
        Self { model, optimizer, root_seed, step: 0, loss_trace: Vec::new() }
    }
}

/// Loss and gradient for one batch.
pub fn batch_gradient(
    model: &Denoiser,
    batch: &[&Example],
    rng: &mut impl Rng,
    schedule: &DiffusionSchedule,
) -> Result<(f64, ParameterSet)> {
    let draws = draw_noise(rng, batch, schedule.timesteps());
    let mut g = Graph::new();
    let bound = g.bind(&model.params);
    let loss = training_loss_node(&mut g, &bound, &model.layout, batch, &draws, schedule)?;
    let value = g.value(loss).item()?;
    let mut grads = g.backward(loss)?;
    let mut out = ParameterSet::new();
    for (name, var) in bound.iter() {
        out.insert(name, grads.take(var))?;
    }
    Ok((value, out))
}

/// Runs `steps` optimizer updates. Step `k` draws its batch, timesteps and
/// noise from a stream keyed by `(root_seed, k)`, so a resumed run matches an
/// uninterrupted one.
pub fn train_steps(
    state: &mut TrainState,
    data: &[Example],
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    steps: u64,
    mut on_step: impl FnMut(u64, f64),
) -> Result<()> {
    cfg.validate()?;
    ensure!(!data.is_empty(), "training corpus is empty");
    let shape = [state.model.config().latent_length, state.model.config().latent_dim];
    for ex in data {
        ensure!(ex.z0.shape() == shape, "corpus sample shape {:?} does not match model {:?}", ex.z0.shape(), shape);
        ensure!(
            ex.cond.width() == state.model.config().text_dim,
            "text embedding width {} does not match model {}",
            ex.cond.width(),
            state.model.config().text_dim
        );
    }
    for _ in 0..steps {
        let mut r = rng::indexed_stream(state.root_seed, "train-step", state.step);
        let batch: Vec<&Example> = (0..cfg.batch_size).map(|_| &data[r.random_range(0..data.len())]).collect();
        let (loss, grads) = match batch_gradient(&state.model, &batch, &mut r, schedule) {
            Ok(v) => v,
            Err(Error::Numeric { op, detail }) => {
                return Err(Error::Numeric {
                    op,
                    detail: format!("step {}: {detail}; trace has {} entries", state.step, state.loss_trace.len()),
                })
            }
            Err(e) => return Err(e),
        };
        state.optimizer.update(cfg, &mut state.model.params, &grads)?;
        state.loss_trace.push(loss);
        on_step(state.step, loss);
        state.step += 1;
    }
    Ok(())
}
