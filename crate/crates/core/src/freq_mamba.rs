//! FreqSSM and the FreqMamba block.
//!
//! FreqSSM splits its input into Haar low/high bands, enhances each band with
//! a 3-tap convolution, and lets the enhanced bands shift the continuous
//! state-transition rates before discretization:
//!
//! ```text
//! (f_low, f_high) = Conv(DWT(x))
//! m_b[t, d]       = repeat(f_b · W_mod + b_mod)          (b ∈ {low, high})
//! A_n[t, d, n]    = A[d, n] + α·m_low[t, d] + β·m_high[t, d]
//! y               = scan(x; A_n, B, C, Δ) + IDWT(f_low, f_high)
//! ```
//!
//! `Δ·A_n` is clamped to at most `-1e-6` so every discrete transition stays in
//! `(0, 1)`. No `D·x` skip term is used here.

use rand::Rng;

use crate::error::{ensure, Result};
use crate::layers::{dwconv, eval_with, init_dwconv, init_linear, join, linear};
use crate::rng;
use crate::ssm_core::{scan_node, ScanOptions};
use crate::tensor_grad::{Bound, Graph, ParameterSet, Tensor, Var};
use crate::wavelet::{dwt_node, idwt_node, repeat_node};

/// Upper bound on `Δ·A_n`.
pub const TRANSITION_CLAMP: f64 = -1e-6;

/// Dilations of the cascaded depthwise convolution.
pub const CDW_DILATIONS: [usize; 3] = [1, 2, 4];

/// Frames an impulse can reach through the cascade: `1 + 2·(1 + 2 + 4)`.
pub const CDW_RECEPTIVE_FIELD: usize = 15;

/// Cascaded depthwise convolution: three causal 3-tap stages with dilations 1, 2, 4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdwConv {
    pub prefix: String,
    pub channels: usize,
}

impl CdwConv {
    pub fn new(prefix: impl Into<String>, channels: usize) -> Self {
        Self { prefix: prefix.into(), channels }
    }

    fn stage(&self, i: usize) -> String {
        join(&self.prefix, &format!("stage{i}"))
    }

    pub fn init(&self, ps: &mut ParameterSet, rng: &mut impl Rng) -> Result<()> {
        for i in 0..CDW_DILATIONS.len() {
            init_dwconv(ps, &self.stage(i), self.channels, rng)?;
        }
        Ok(())
    }

    /// Sets every stage to the identity kernel with zero bias.
    pub fn set_identity(&self, ps: &mut ParameterSet) -> Result<()> {
        let mut w = Tensor::zeros(&[3, self.channels]);
        w.data_mut()[2 * self.channels..].fill(1.0);
        for i in 0..CDW_DILATIONS.len() {
            ps.set(&join(&self.stage(i), "w"), w.clone())?;
            ps.set(&join(&self.stage(i), "b"), Tensor::zeros(&[self.channels]))?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &dilation) in CDW_DILATIONS.iter().enumerate() {
            h = dwconv(g, b, &self.stage(i), h, dilation)?;
        }
        Ok(h)
    }

    pub fn apply(&self, ps: &ParameterSet, x: &Tensor) -> Result<Tensor> {
        eval_with(ps, |g, b| {
            let x = g.constant(x.clone());
            self.forward(g, b, x)
        })
    }
}

/// Shared selective-parameter projections of both SSM variants.
///
/// Layout under `prefix`: `a_log` (`D×N`, `A = −exp(a_log)`), `w_b`, `w_c`
/// (`D×N`, bias-free input projections to `B`, `C`), `delta.{w,b}` (`D×D`,
/// `Δ = softplus(x·W + b)`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectiveProjections {
    pub prefix: String,
    pub channels: usize,
    pub states: usize,
}

/// Output of [`SelectiveProjections::forward`].
pub(crate) struct Projected {
    pub a: Var,
    pub b: Var,
    pub c: Var,
    pub delta: Var,
}

impl SelectiveProjections {
    pub fn init(&self, ps: &mut ParameterSet, rng: &mut impl Rng) -> Result<()> {
        let (d, n) = (self.channels, self.states);
        let a_log: Vec<f64> = (0..d).flat_map(|_| (1..=n).map(|k| (k as f64).ln())).collect();
        ps.insert(join(&self.prefix, "a_log"), Tensor::new(vec![d, n], a_log)?)?;
        let std = 1.0 / (d as f64).sqrt();
        ps.insert(join(&self.prefix, "w_b"), rng::normal_tensor(rng, &[d, n], std))?;
        ps.insert(join(&self.prefix, "w_c"), rng::normal_tensor(rng, &[d, n], std))?;
        ps.insert(join(&self.prefix, "delta.w"), rng::normal_tensor(rng, &[d, d], 0.1 * std))?;
        // Step sizes log-uniform in [1e-3, 1e-1], stored through the inverse softplus.
        let bias: Vec<f64> = (0..d)
            .map(|_| {
                let dt = (rng.random_range(1e-3f64.ln()..1e-1f64.ln())).exp();
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        ps.insert(join(&self.prefix, "delta.b"), Tensor::new(vec![d], bias)?)
    }

    pub(crate) fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Projected> {
        let a_log = b.var(&join(&self.prefix, "a_log"))?;
        let a = g.neg_exp(a_log)?;
        let bs = g.linear(x, b.var(&join(&self.prefix, "w_b"))?, None)?;
        let cs = g.linear(x, b.var(&join(&self.prefix, "w_c"))?, None)?;
        let pre = linear(g, b, &join(&self.prefix, "delta"), x)?;
        let delta = g.softplus(pre)?;
        Ok(Projected { a, b: bs, c: cs, delta })
    }
}

/// Frequency-modulated selective SSM.
///
/// Extra layout under `prefix`: `alpha`, `beta` (scalars), `conv_low`,
/// `conv_high` (3-tap band enhancers), `band_to_mod.{w,b}` (`D×D`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreqSsm {
    pub prefix: String,
    pub proj: SelectiveProjections,
}

impl FreqSsm {
    pub fn new(prefix: impl Into<String>, channels: usize, states: usize) -> Self {
        let prefix = prefix.into();
        Self { proj: SelectiveProjections { prefix: prefix.clone(), channels, states }, prefix }
    }

    fn name(&self, n: &str) -> String {
        join(&self.prefix, n)
    }

    pub fn init(&self, ps: &mut ParameterSet, rng: &mut impl Rng) -> Result<()> {
        let d = self.proj.channels;
        self.proj.init(ps, rng)?;
        ps.insert(self.name("alpha"), Tensor::scalar(0.0))?;
        ps.insert(self.name("beta"), Tensor::scalar(0.0))?;
        init_dwconv(ps, &self.name("conv_low"), d, rng)?;
        init_dwconv(ps, &self.name("conv_high"), d, rng)?;
        init_linear(ps, &self.name("band_to_mod"), d, d, 1.0 / (d as f64).sqrt(), rng)
    }

    /// Zeroes `α`, `β` and both band-enhancement convolutions (weights and bias),
    /// reducing the block to a plain selective scan.
    pub fn set_vanilla(&self, ps: &mut ParameterSet) -> Result<()> {
        let d = self.proj.channels;
        ps.set(&self.name("alpha"), Tensor::scalar(0.0))?;
        ps.set(&self.name("beta"), Tensor::scalar(0.0))?;
        for band in ["conv_low", "conv_high"] {
            ps.set(&join(&self.name(band), "w"), Tensor::zeros(&[3, d]))?;
            ps.set(&join(&self.name(band), "b"), Tensor::zeros(&[d]))?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_traced(g, b, x)?.output)
    }

    pub fn forward_traced(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<FreqTrace> {
        let len = g.shape(x)[0];
        ensure!(len >= 2, "FreqSSM needs at least 2 frames, got {len}");
        let (raw_low, raw_high) = dwt_node(g, x)?;
        let f_low = dwconv(g, b, &self.name("conv_low"), raw_low, 1)?;
        let f_high = dwconv(g, b, &self.name("conv_high"), raw_high, 1)?;

        let mod_low = linear(g, b, &self.name("band_to_mod"), f_low)?;
        let mod_high = linear(g, b, &self.name("band_to_mod"), f_high)?;
        let m_low = repeat_node(g, mod_low, len)?;
        let m_high = repeat_node(g, mod_high, len)?;
        let lo = g.scale_by(b.var(&self.name("alpha"))?, m_low)?;
        let hi = g.scale_by(b.var(&self.name("beta"))?, m_high)?;
        let a_mod = g.add(lo, hi)?;

        let p = self.proj.forward(g, b, x)?;
        let opts = ScanOptions { a_mod: Some(a_mod), d_skip: None, clamp_max: Some(TRANSITION_CLAMP) };
        let scanned = scan_node(g, x, p.delta, p.a, p.b, p.c, opts)?;
        let residual = idwt_node(g, f_low, f_high, len)?;
        let output = g.add(scanned, residual)?;
        Ok(FreqTrace { m_low, m_high, output })
    }

    pub fn apply(&self, ps: &ParameterSet, x: &Tensor) -> Result<Tensor> {
        eval_with(ps, |g, b| {
            let x = g.constant(x.clone());
            self.forward(g, b, x)
        })
    }
}

/// Intermediate nodes of a FreqSSM evaluation.
#[derive(Clone, Copy, Debug)]
pub struct FreqTrace {
    pub m_low: Var,
    pub m_high: Var,
    pub output: Var,
}

/// The FreqMamba block:
///
/// ```text
/// f_lin  = Linear_in(f_mo)
/// f_freq = FS(σ(CDWConv(f_lin)))          (bidirectional: forward + reversed backward)
/// f_n    = Linear_out(f_freq ⊙ σ(f_lin))
/// ```
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreqMambaBlock {
    pub prefix: String,
    pub channels: usize,
    pub bidirectional: bool,
    pub cdw: CdwConv,
    pub fwd: FreqSsm,
    pub bwd: FreqSsm,
}

impl FreqMambaBlock {
    pub fn new(prefix: impl Into<String>, channels: usize, states: usize, bidirectional: bool) -> Self {
        let prefix = prefix.into();
        Self {
            cdw: CdwConv::new(join(&prefix, "cdw"), channels),
            fwd: FreqSsm::new(join(&prefix, "ssm_fwd"), channels, states),
            bwd: FreqSsm::new(join(&prefix, "ssm_bwd"), channels, states),
            channels,
            bidirectional,
            prefix,
        }
    }

    pub fn init(&self, ps: &mut ParameterSet, rng: &mut impl Rng) -> Result<()> {
        let d = self.channels;
        let std = 1.0 / (d as f64).sqrt();
        init_linear(ps, &join(&self.prefix, "in"), d, d, std, rng)?;
        self.cdw.init(ps, rng)?;
        self.fwd.init(ps, rng)?;
        if self.bidirectional {
            self.bwd.init(ps, rng)?;
        }
        init_linear(ps, &join(&self.prefix, "out"), d, d, std, rng)
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, f_mo: Var) -> Result<Var> {
        let f_lin = linear(g, b, &join(&self.prefix, "in"), f_mo)?;
        let conv = self.cdw.forward(g, b, f_lin)?;
        let u = g.sigmoid(conv)?;
        let mut f_freq = self.fwd.forward(g, b, u)?;
        if self.bidirectional {
            let rev = g.reverse_time(u)?;
            let back = self.bwd.forward(g, b, rev)?;
            let back = g.reverse_time(back)?;
            f_freq = g.add(f_freq, back)?;
        }
        let gate = g.sigmoid(f_lin)?;
        let selected = g.mul(f_freq, gate)?;
        linear(g, b, &join(&self.prefix, "out"), selected)
    }

    pub fn apply(&self, ps: &ParameterSet, x: &Tensor) -> Result<Tensor> {
        eval_with(ps, |g, b| {
            let x = g.constant(x.clone());
            self.forward(g, b, x)
        })
    }
}
