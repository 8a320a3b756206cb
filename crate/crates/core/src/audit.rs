//! Finite-difference audit of every differentiable block.
//!
//! Each block is evaluated on a small seeded instance with its input treated
//! as a parameter, reduced to a scalar by a fixed random weighting.

use std::time::Instant;

use serde::Serialize;

use crate::denoiser::{time_embedding, Denoiser, DenoiserConfig, FtMambaLayer};
use crate::error::Result;
use crate::freq_mamba::{CdwConv, FreqSsm};
use crate::rng;
use crate::tensor_grad::{grad_check, Bound, CheckReport, Graph, ParameterSet, Primitive, Tensor, Var};
use crate::text_mamba::TextSsm;

pub const BLOCKS: [&str; 5] = ["cdwconv", "freq_ssm", "text_ssm", "ftmamba_layer", "denoiser"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockResult {
    pub block: String,
    pub passed: bool,
    pub parameters: usize,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Name and relative error of the worst failing parameter.
    pub worst: Option<(String, f64)>,
    pub seconds: f64,
}

impl BlockResult {
    fn from_report(block: &str, report: &CheckReport, seconds: f64) -> Self {
        Self {
            block: block.to_string(),
            passed: report.passed,
            parameters: report.params.len(),
            entries: report.params.iter().map(|p| p.numel).sum(),
            max_rel_error: report.max_rel_error(),
            max_abs_error: report.max_abs_error(),
            worst: report.worst_failure().map(|p| (p.name.clone(), p.max_rel_error)),
            seconds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditReport {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub seed: u64,
    pub blocks: Vec<BlockResult>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }
}

const L: usize = 8;
const C: usize = 4;
const N: usize = 4;
const E: usize = 6;
/// Signal level used when auditing the full denoiser with its skip term.
const ALPHA_BAR: f64 = 0.4;

fn weighted(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = rng::normal_tensor(&mut rng::stream(seed, "audit-weights"), &shape, 1.0);
    g.dot_const(y, w)
}

fn input(ps: &mut ParameterSet, seed: u64, shape: &[usize]) -> Result<()> {
    ps.insert("input", rng::normal_tensor(&mut rng::stream(seed, "audit-input"), shape, 1.0))
}

fn text(seed: u64, width: usize) -> Tensor {
    rng::normal_tensor(&mut rng::stream(seed, "audit-text"), &[width], 1.0)
}

fn check_block(block: &str, seed: u64, rel_tol: f64, abs_tol: f64) -> Result<CheckReport> {
    let mut ps = ParameterSet::new();
    let mut r = rng::stream(seed, block);
    match block {
        "cdwconv" => {
            let conv = CdwConv::new("cdw", C);
            conv.init(&mut ps, &mut r)?;
            input(&mut ps, seed, &[L, C])?;
            let loss = |g: &mut Graph, b: &Bound| {
                let y = conv.forward(g, b, b.var("input")?)?;
                weighted(g, y, seed)
            };
            grad_check(&loss, &ps, rel_tol, abs_tol)
        }
        "freq_ssm" => {
            let ssm = FreqSsm::new("fs", C, N);
            ssm.init(&mut ps, &mut r)?;
            // Nonzero band weights so the modulation path carries gradient.
            ps.set("fs.alpha", Tensor::scalar(0.3))?;
            ps.set("fs.beta", Tensor::scalar(-0.2))?;
            input(&mut ps, seed, &[L, C])?;
            let loss = |g: &mut Graph, b: &Bound| {
                let y = ssm.forward(g, b, b.var("input")?)?;
                weighted(g, y, seed)
            };
            grad_check(&loss, &ps, rel_tol, abs_tol)
        }
        "text_ssm" => {
            let ssm = TextSsm::new("ts", C, N, E);
            ssm.init(&mut ps, &mut r)?;
            input(&mut ps, seed, &[L, C])?;
            let f = text(seed, E);
            let loss = |g: &mut Graph, b: &Bound| {
                let fv = g.constant(f.clone());
                let y = ssm.forward(g, b, b.var("input")?, fv)?;
                weighted(g, y, seed)
            };
            grad_check(&loss, &ps, rel_tol, abs_tol)
        }
        "ftmamba_layer" => {
            let cfg = DenoiserConfig::tiny();
            let layer = FtMambaLayer::new("layer", &cfg);
            layer.init(&mut ps, &mut r)?;
            ps.set("layer.freq.ssm_fwd.alpha", Tensor::scalar(0.2))?;
            ps.set("layer.freq.ssm_bwd.beta", Tensor::scalar(-0.2))?;
            input(&mut ps, seed, &[cfg.latent_length, cfg.channels])?;
            let te = time_embedding(5, cfg.time_embed_dim, cfg.timesteps)?;
            let f = text(seed, cfg.text_dim);
            let loss = |g: &mut Graph, b: &Bound| {
                let tv = g.constant(te.clone());
                let fv = g.constant(f.clone());
                let y = layer.forward(g, b, b.var("input")?, tv, fv)?;
                weighted(g, y, seed)
            };
            grad_check(&loss, &ps, rel_tol, abs_tol)
        }
        "denoiser" => {
            // A nonzero head so that gradients reach every layer.
            let cfg = DenoiserConfig { zero_init_head: false, ..DenoiserConfig::tiny() };
            let model = Denoiser::new(cfg.clone(), seed)?;
            let mut ps = model.params.clone();
            input(&mut ps, seed, &[cfg.latent_length, cfg.latent_dim])?;
            let f = text(seed, cfg.text_dim);
            let loss = |g: &mut Graph, b: &Bound| {
                let fv = g.constant(f.clone());
                let y = model.layout.forward_eps(g, b, b.var("input")?, 123, fv, ALPHA_BAR)?;
                weighted(g, y, seed)
            };
            grad_check(&loss, &ps, rel_tol, abs_tol)
        }
        other => Err(crate::error::contract(format!("unknown block `{other}`; expected one of {BLOCKS:?}"))),
    }
}

pub fn audit_block(block: &str, seed: u64, rel_tol: f64, abs_tol: f64) -> Result<BlockResult> {
    let start = Instant::now();
    let report = check_block(block, seed, rel_tol, abs_tol)?;
    Ok(BlockResult::from_report(block, &report, start.elapsed().as_secs_f64()))
}

pub fn run_audit(seed: u64, rel_tol: f64, abs_tol: f64) -> Result<AuditReport> {
    let blocks = BLOCKS.iter().map(|b| audit_block(b, seed, rel_tol, abs_tol)).collect::<Result<Vec<_>>>()?;
    Ok(AuditReport { rel_tol, abs_tol, seed, blocks })
}

/// Matrix product whose weight adjoint is scaled by `1 + error`.
struct SkewedMatmul {
    error: f64,
}

impl Primitive for SkewedMatmul {
    fn name(&self) -> &'static str {
        "skewed_matmul"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (x, w) = (inputs[0], inputs[1]);
        let (l, k) = x.dims2()?;
        let m = w.cols();
        let mut out = vec![0.0; l * m];
        for i in 0..l {
            for p in 0..k {
                for j in 0..m {
                    out[i * m + j] += x.at2(i, p) * w.at2(p, j);
                }
            }
        }
        Tensor::new(vec![l, m], out)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad_out: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (l, k) = (x.rows(), x.cols());
        let m = w.cols();
        let gx = needs[0].then(|| {
            let mut gx = vec![0.0; l * k];
            for i in 0..l {
                for p in 0..k {
                    gx[i * k + p] = (0..m).map(|j| grad_out[i * m + j] * w.at2(p, j)).sum();
                }
            }
            gx
        });
        let gw = needs[1].then(|| {
            let mut gw = vec![0.0; k * m];
            for p in 0..k {
                for j in 0..m {
                    let s: f64 = (0..l).map(|i| x.at2(i, p) * grad_out[i * m + j]).sum();
                    gw[p * m + j] = s * (1.0 + self.error);
                }
            }
            gw
        });
        vec![gx, gw]
    }
}

/// Negative control: a block with a deliberately wrong weight adjoint. The
/// audit must fail and name `fixture.w`.
pub fn corrupted_adjoint_fixture(seed: u64, error: f64, rel_tol: f64, abs_tol: f64) -> Result<BlockResult> {
    let start = Instant::now();
    let mut ps = ParameterSet::new();
    ps.insert("fixture.w", rng::normal_tensor(&mut rng::stream(seed, "fixture-w"), &[C, C], 1.0))?;
    input(&mut ps, seed, &[L, C])?;
    let loss = |g: &mut Graph, b: &Bound| {
        let y = g.apply(Box::new(SkewedMatmul { error }), &[b.var("input")?, b.var("fixture.w")?])?;
        let y = g.sigmoid(y)?;
        weighted(g, y, seed)
    };
    let report = grad_check(&loss, &ps, rel_tol, abs_tol)?;
    Ok(BlockResult::from_report("corrupted_adjoint", &report, start.elapsed().as_secs_f64()))
}
