//! The noise-prediction network `ε_θ(z_t, t, f_t)`: FTMamba layers stacked in
//! encoder, middle and decoder stages at constant width, with additive skips
//! between mirrored encoder and decoder stages.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionSchedule;
use crate::error::{ensure, Result};
use crate::freq_mamba::FreqMambaBlock;
use crate::layers::{dwconv, eval_with, init_dwconv, init_linear, join, linear};
use crate::rng;
use crate::tensor_grad::{Bound, Graph, ParameterSet, Tensor, Var};
use crate::text_mamba::{TextEmbedding, TextMambaBlock};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Frames per latent sequence; must be even.
    pub latent_length: usize,
    /// Width of the latent frames the network consumes and predicts.
    pub latent_dim: usize,
    /// Internal channel width.
    pub channels: usize,
    /// SSM states per channel.
    pub states: usize,
    /// Width of the sentence embedding.
    pub text_dim: usize,
    pub time_embed_dim: usize,
    pub layers_per_stage: usize,
    pub encoder_stages: usize,
    pub middle_stages: usize,
    /// Must equal `encoder_stages` so every decoder stage has a mirrored skip.
    pub decoder_stages: usize,
    /// Run FreqMamba forward and backward in time.
    pub bidirectional: bool,
    /// Number of diffusion steps the time embedding accepts.
    pub timesteps: usize,
    /// Initialize the output head to zero so an untrained model predicts zero noise.
    pub zero_init_head: bool,
    /// Add each stage's input to its output, giving the head a linear path
    /// back to `in_proj(z_t)`.
    pub stage_residual: bool,
    /// Predict `ε̂ = √(1 − ᾱ_t)·z_t + √ᾱ_t·head(…)`. The fixed term is the
    /// optimal predictor for standard-normal data; the scaled network term
    /// learns the correction, whose spread is about `√ᾱ_t`.
    pub noise_skip: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_length: 16,
            latent_dim: 32,
            channels: 32,
            states: 8,
            text_dim: 64,
            time_embed_dim: 32,
            layers_per_stage: 1,
            encoder_stages: 1,
            middle_stages: 1,
            decoder_stages: 1,
            bidirectional: true,
            timesteps: 1000,
            zero_init_head: true,
            stage_residual: true,
            noise_skip: true,
        }
    }
}

impl DenoiserConfig {
    /// Full-width configuration: 256 channels, two layers per stage.
    pub fn paper_scale() -> Self {
        Self { latent_dim: 256, channels: 256, states: 16, text_dim: 256, time_embed_dim: 256, layers_per_stage: 2, ..Self::default() }
    }

    /// Smallest configuration used for full-model gradient audits.
    pub fn tiny() -> Self {
        Self { latent_length: 8, latent_dim: 8, channels: 8, states: 4, text_dim: 8, time_embed_dim: 8, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("latent_length", self.latent_length),
            ("latent_dim", self.latent_dim),
            ("channels", self.channels),
            ("states", self.states),
            ("text_dim", self.text_dim),
            ("time_embed_dim", self.time_embed_dim),
            ("layers_per_stage", self.layers_per_stage),
            ("timesteps", self.timesteps),
        ] {
            ensure!(v > 0, "{name} must be positive");
        }
        ensure!(self.latent_length % 2 == 0, "latent_length must be even, got {}", self.latent_length);
        ensure!(self.time_embed_dim % 2 == 0, "time_embed_dim must be even, got {}", self.time_embed_dim);
        ensure!(
            self.encoder_stages == self.decoder_stages,
            "decoder_stages ({}) must mirror encoder_stages ({})",
            self.decoder_stages,
            self.encoder_stages
        );
        ensure!(self.encoder_stages + self.middle_stages > 0, "the network needs at least one stage");
        Ok(())
    }
}

/// Sinusoidal embedding of an integer step: `[sin(t·ω_i) ‖ cos(t·ω_i)]` with
/// `ω_i = 10000^(−i/half)`.
pub fn time_embedding(t: usize, dim: usize, timesteps: usize) -> Result<Tensor> {
    ensure!(t < timesteps, "timestep {t} out of range [0, {timesteps})");
    ensure!(dim >= 2 && dim % 2 == 0, "embedding width must be even and at least 2, got {dim}");
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Tensor::vector(out)
}

/// One FTMamba layer:
///
/// ```text
/// f_m = TimeInConv(z_t, t)
/// f_n = FreqMamba(f_m)
/// f_v = TextMamba(z_t + f_n, f_t)
/// z'  = f_n + f_v
/// ```
///
/// `TimeInConv` is a linear map of `z_t` plus a broadcast projection of the
/// time embedding, followed by a causal 3-tap depthwise convolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FtMambaLayer {
    pub prefix: String,
    pub channels: usize,
    pub time_embed_dim: usize,
    pub freq: FreqMambaBlock,
    pub text: TextMambaBlock,
}

impl FtMambaLayer {
    pub fn new(prefix: impl Into<String>, cfg: &DenoiserConfig) -> Self {
        let prefix = prefix.into();
        Self {
            freq: FreqMambaBlock::new(join(&prefix, "freq"), cfg.channels, cfg.states, cfg.bidirectional),
            text: TextMambaBlock::new(join(&prefix, "text"), cfg.channels, cfg.states, cfg.text_dim),
            channels: cfg.channels,
            time_embed_dim: cfg.time_embed_dim,
            prefix,
        }
    }

    fn name(&self, n: &str) -> String {
        join(&self.prefix, n)
    }

    pub fn init(&self, ps: &mut ParameterSet, rng: &mut impl Rng) -> Result<()> {
        let c = self.channels;
        init_linear(ps, &self.name("time_in"), c, c, 1.0 / (c as f64).sqrt(), rng)?;
        ps.insert(
            self.name("time_in.wt"),
            rng::normal_tensor(rng, &[self.time_embed_dim, c], 1.0 / (self.time_embed_dim as f64).sqrt()),
        )?;
        init_dwconv(ps, &self.name("time_in.conv"), c, rng)?;
        self.freq.init(ps, rng)?;
        self.text.init(ps, rng)
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, z_t: Var, t_emb: Var, f_t: Var) -> Result<Var> {
        let u = linear(g, b, &self.name("time_in"), z_t)?;
        let tproj = g.linear(t_emb, b.var(&self.name("time_in.wt"))?, None)?;
        let u = g.add_row(u, tproj)?;
        let f_m = dwconv(g, b, &self.name("time_in.conv"), u, 1)?;
        let f_n = self.freq.forward(g, b, f_m)?;
        let f_u = g.add(z_t, f_n)?;
        let f_v = self.text.forward(g, b, f_u, f_t)?;
        g.add(f_n, f_v)
    }

    /// Zeroes both output projections so the layer emits exactly zero.
    pub fn silence(&self, ps: &mut ParameterSet) -> Result<()> {
        for block in [&self.freq.prefix, &self.text.prefix] {
            let out = join(block, "out");
            let w = ps.get(&join(&out, "w")).expect("initialized").shape().to_vec();
            ps.set(&join(&out, "w"), Tensor::zeros(&w))?;
            ps.set(&join(&out, "b"), Tensor::zeros(&[self.channels]))?;
        }
        Ok(())
    }

    pub fn apply(&self, ps: &ParameterSet, z_t: &Tensor, t_emb: &Tensor, f_t: &TextEmbedding) -> Result<Tensor> {
        eval_with(ps, |g, b| {
            let z = g.constant(z_t.clone());
            let te = g.constant(t_emb.clone());
            let f = g.constant(f_t.as_tensor().clone());
            self.forward(g, b, z, te, f)
        })
    }
}

/// Which part of the network a stage belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageKind {
    Encoder,
    Middle,
    Decoder,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stage {
    pub kind: StageKind,
    pub layers: Vec<FtMambaLayer>,
}

/// Layout of the full network. Parameters live in a separate [`ParameterSet`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenoiserLayout {
    pub config: DenoiserConfig,
    pub stages: Vec<Stage>,
}

/// Stage outputs recorded during a forward pass.
#[derive(Debug)]
pub struct ForwardTrace {
    pub stage_outputs: Vec<Var>,
    pub output: Var,
}

impl DenoiserLayout {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::new();
        let mut push = |kind: StageKind, tag: &str, count: usize| {
            for s in 0..count {
                let layers = (0..config.layers_per_stage)
                    .map(|l| FtMambaLayer::new(format!("{tag}{s}.layer{l}"), &config))
                    .collect();
                stages.push(Stage { kind, layers });
            }
        };
        push(StageKind::Encoder, "enc", config.encoder_stages);
        push(StageKind::Middle, "mid", config.middle_stages);
        push(StageKind::Decoder, "dec", config.decoder_stages);
        Ok(Self { config, stages })
    }

    /// Fresh parameters; every tensor draws from its own stream under `root_seed`.
    pub fn init(&self, root_seed: u64) -> Result<ParameterSet> {
        let cfg = &self.config;
        let mut ps = ParameterSet::new();
        let mut r = rng::stream(root_seed, "in_proj");
        init_linear(&mut ps, "in_proj", cfg.latent_dim, cfg.channels, 1.0 / (cfg.latent_dim as f64).sqrt(), &mut r)?;
        for stage in &self.stages {
            for layer in &stage.layers {
                layer.init(&mut ps, &mut rng::stream(root_seed, &layer.prefix))?;
            }
        }
        let head_std = if cfg.zero_init_head { 0.0 } else { 1.0 / (cfg.channels as f64).sqrt() };
        init_linear(&mut ps, "head", cfg.channels, cfg.latent_dim, head_std, &mut rng::stream(root_seed, "head"))?;
        Ok(ps)
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, z_t: Var, t: usize, f_t: Var) -> Result<Var> {
        Ok(self.forward_traced(g, b, z_t, t, f_t)?.output)
    }

    pub fn forward_traced(&self, g: &mut Graph, b: &Bound, z_t: Var, t: usize, f_t: Var) -> Result<ForwardTrace> {
        let cfg = &self.config;
        ensure!(
            g.shape(z_t) == [cfg.latent_length, cfg.latent_dim],
            "latent shape {:?} does not match [{}, {}]",
            g.shape(z_t),
            cfg.latent_length,
            cfg.latent_dim
        );
        let t_emb = g.constant(time_embedding(t, cfg.time_embed_dim, cfg.timesteps)?);
        let mut h = linear(g, b, "in_proj", z_t)?;
        let mut skips = Vec::new();
        let mut stage_outputs = Vec::new();
        for stage in &self.stages {
            let entry = h;
            for layer in &stage.layers {
                h = layer.forward(g, b, h, t_emb, f_t)?;
            }
            if cfg.stage_residual {
                h = g.add(h, entry)?;
            }
            match stage.kind {
                StageKind::Encoder => skips.push(h),
                StageKind::Middle => {}
                StageKind::Decoder => {
                    let skip = skips.pop().expect("decoder stages mirror encoder stages");
                    h = g.add(h, skip)?;
                }
            }
            stage_outputs.push(h);
        }
        let output = linear(g, b, "head", h)?;
        Ok(ForwardTrace { stage_outputs, output })
    }

    /// Noise prediction at a step with cumulative signal level `alpha_bar`:
    /// the network output, plus `√(1 − ᾱ)·z_t` when `noise_skip` is set.
    pub fn forward_eps(&self, g: &mut Graph, b: &Bound, z_t: Var, t: usize, f_t: Var, alpha_bar: f64) -> Result<Var> {
        let out = self.forward(g, b, z_t, t, f_t)?;
        if !self.config.noise_skip {
            return Ok(out);
        }
        ensure!(alpha_bar > 0.0 && alpha_bar <= 1.0, "alpha_bar must lie in (0, 1], got {alpha_bar}");
        let skip = g.scale(z_t, (1.0 - alpha_bar).sqrt())?;
        g.add(out, skip)
    }
}

/// A layout together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub layout: DenoiserLayout,
    pub params: ParameterSet,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, root_seed: u64) -> Result<Self> {
        let layout = DenoiserLayout::new(config)?;
        let params = layout.init(root_seed)?;
        Ok(Self { layout, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.layout.config
    }

    /// Noise prediction `ε_θ(z_t, t, f_t)` under `schedule`.
    pub fn denoise_eps(&self, z_t: &Tensor, t: usize, f_t: &TextEmbedding, schedule: &DiffusionSchedule) -> Result<Tensor> {
        ensure!(
            schedule.timesteps() == self.config().timesteps,
            "schedule has {} steps but the model embeds {}",
            schedule.timesteps(),
            self.config().timesteps
        );
        let alpha_bar = schedule.alpha_bar(t)?;
        eval_with(&self.params, |g, b| {
            let z = g.constant(z_t.clone());
            let f = g.constant(f_t.as_tensor().clone());
            self.layout.forward_eps(g, b, z, t, f, alpha_bar)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_grad::grad_check;

    fn embedding(seed: u64, width: usize) -> TextEmbedding {
        TextEmbedding::new(rng::normal_tensor(&mut rng::stream(seed, "f"), &[width], 1.0).into_data()).unwrap()
    }

    #[test]
    fn time_embedding_values() {
        let e0 = time_embedding(0, 8, 1000).unwrap();
        assert_eq!(e0.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let e1 = time_embedding(1, 8, 1000).unwrap();
        let freqs = [1.0, 0.1, 0.01, 0.001];
        for (i, f) in freqs.iter().enumerate() {
            assert!((e1.data()[i] - f64::sin(*f)).abs() < 1e-15);
            assert!((e1.data()[4 + i] - f64::cos(*f)).abs() < 1e-15);
        }
        assert!(time_embedding(1000, 8, 1000).is_err());
        assert!(time_embedding(3, 7, 1000).is_err());
    }

    #[test]
    fn time_embeddings_are_distinct() {
        let all: Vec<Tensor> = (0..1000).map(|t| time_embedding(t, 32, 1000).unwrap()).collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert!(all[i].max_abs_diff(&all[j]) > 0.0, "{i} vs {j}");
            }
        }
    }

    #[test]
    fn layer_preserves_shape_and_is_deterministic() {
        let cfg = DenoiserConfig { channels: 16, states: 4, text_dim: 8, time_embed_dim: 8, ..Default::default() };
        let layer = FtMambaLayer::new("l", &cfg);
        let mut ps = ParameterSet::new();
        layer.init(&mut ps, &mut rng::stream(1, "l")).unwrap();
        let z = rng::normal_tensor(&mut rng::stream(1, "z"), &[16, 16], 1.0);
        let te = time_embedding(17, 8, 1000).unwrap();
        let f = embedding(1, 8);
        let a = layer.apply(&ps, &z, &te, &f).unwrap();
        let b = layer.apply(&ps, &z, &te, &f).unwrap();
        assert_eq!(a.shape(), &[16, 16]);
        assert_eq!(a, b);
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let cfg = DenoiserConfig::tiny();
        let layer = FtMambaLayer::new("l", &cfg);
        let mut ps = ParameterSet::new();
        layer.init(&mut ps, &mut rng::stream(2, "l")).unwrap();
        ps.set("l.freq.ssm_fwd.alpha", Tensor::scalar(0.2)).unwrap();
        ps.set("l.freq.ssm_bwd.beta", Tensor::scalar(-0.2)).unwrap();
        let z = rng::normal_tensor(&mut rng::stream(2, "z"), &[8, 8], 1.0);
        let w = rng::normal_tensor(&mut rng::stream(2, "w"), &[8, 8], 1.0);
        let te = time_embedding(5, 8, 1000).unwrap();
        let f = embedding(2, 8);
        let loss = |g: &mut Graph, b: &Bound| {
            let zv = g.constant(z.clone());
            let tv = g.constant(te.clone());
            let fv = g.constant(f.as_tensor().clone());
            let y = layer.forward(g, b, zv, tv, fv)?;
            g.dot_const(y, w.clone())
        };
        let report = grad_check(&loss, &ps, 1e-4, 1e-8).unwrap();
        assert!(report.passed, "{:?}", report.worst_failure());
    }

    fn schedule() -> DiffusionSchedule {
        DiffusionSchedule::new(&crate::diffusion::ScheduleConfig::default()).unwrap()
    }

    #[test]
    fn zero_head_predicts_only_the_skip_term() {
        let s = schedule();
        let z = rng::normal_tensor(&mut rng::stream(3, "z"), &[8, 8], 1.0);
        let plain = DenoiserConfig { noise_skip: false, ..DenoiserConfig::tiny() };
        let model = Denoiser::new(plain, 3).unwrap();
        let skipped = Denoiser::new(DenoiserConfig::tiny(), 3).unwrap();
        for t in [0, 10, 999] {
            let eps = model.denoise_eps(&z, t, &embedding(t as u64, 8), &s).unwrap();
            assert_eq!(eps.shape(), &[8, 8]);
            assert!(eps.data().iter().all(|&v| v == 0.0));
            let c = (1.0 - s.alpha_bar(t).unwrap()).sqrt();
            let eps = skipped.denoise_eps(&z, t, &embedding(t as u64, 8), &s).unwrap();
            assert!(eps.max_abs_diff(&z.map(|v| c * v)) < 1e-15);
        }
        let cfg = DenoiserConfig { zero_init_head: false, noise_skip: false, ..DenoiserConfig::tiny() };
        let model = Denoiser::new(cfg, 3).unwrap();
        let eps = model.denoise_eps(&z, 4, &embedding(4, 8), &s).unwrap();
        assert_eq!(eps.shape(), &[8, 8]);
        assert!(eps.max_abs() > 0.0);
        let short = DiffusionSchedule::new(&crate::diffusion::ScheduleConfig { timesteps: 10, ..Default::default() }).unwrap();
        assert!(model.denoise_eps(&z, 4, &embedding(4, 8), &short).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(DenoiserLayout::new(DenoiserConfig { latent_length: 15, ..Default::default() }).is_err());
        assert!(DenoiserLayout::new(DenoiserConfig { decoder_stages: 2, ..Default::default() }).is_err());
        assert!(DenoiserLayout::new(DenoiserConfig::paper_scale()).is_ok());
    }

    #[test]
    fn silenced_decoder_stage_passes_the_skip_through() {
        let cfg = DenoiserConfig { zero_init_head: false, ..DenoiserConfig::tiny() };
        let mut model = Denoiser::new(cfg, 4).unwrap();
        for layer in &model.layout.stages[2].layers {
            layer.silence(&mut model.params).unwrap();
        }
        let z = rng::normal_tensor(&mut rng::stream(4, "z"), &[8, 8], 1.0);
        let f = embedding(4, 8);
        let mut g = Graph::new();
        let b = g.bind_constants(&model.params);
        let zv = g.constant(z);
        let fv = g.constant(f.as_tensor().clone());
        let trace = model.layout.forward_traced(&mut g, &b, zv, 7, fv).unwrap();
        let encoder_out = g.value(trace.stage_outputs[0]).clone();
        let middle_out = g.value(trace.stage_outputs[1]).clone();
        // Residual path (middle output) plus the mirrored skip (encoder output).
        let expected = middle_out.zip_map(&encoder_out, |m, e| m + e).unwrap();
        assert!(g.value(trace.stage_outputs[2]).max_abs_diff(&expected) < 1e-15);

        let cfg = DenoiserConfig { zero_init_head: false, stage_residual: false, ..DenoiserConfig::tiny() };
        let mut model = Denoiser::new(cfg, 4).unwrap();
        for layer in &model.layout.stages[2].layers {
            layer.silence(&mut model.params).unwrap();
        }
        let mut g = Graph::new();
        let b = g.bind_constants(&model.params);
        let zv = g.constant(rng::normal_tensor(&mut rng::stream(4, "z"), &[8, 8], 1.0));
        let fv = g.constant(f.as_tensor().clone());
        let trace = model.layout.forward_traced(&mut g, &b, zv, 7, fv).unwrap();
        let encoder_out = g.value(trace.stage_outputs[0]).clone();
        assert_eq!(g.value(trace.stage_outputs[2]), &encoder_out);
    }

    #[test]
    fn full_denoiser_gradients_match_finite_differences() {
        let cfg = DenoiserConfig { zero_init_head: false, ..DenoiserConfig::tiny() };
        let model = Denoiser::new(cfg, 5).unwrap();
        let z = rng::normal_tensor(&mut rng::stream(5, "z"), &[8, 8], 1.0);
        let eps = rng::normal_tensor(&mut rng::stream(5, "e"), &[8, 8], 1.0);
        let f = embedding(5, 8);
        let loss = |g: &mut Graph, b: &Bound| {
            let zv = g.constant(z.clone());
            let fv = g.constant(f.as_tensor().clone());
            let target = g.constant(eps.clone());
            let pred = model.layout.forward_eps(g, b, zv, 123, fv, 0.4)?;
            g.mse(pred, target)
        };
        let report = grad_check(&loss, &model.params, 1e-4, 1e-8).unwrap();
        assert!(report.passed, "{:?}", report.worst_failure());
    }
}
