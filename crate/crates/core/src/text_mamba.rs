//! TextSSM and the TextMamba block.
//!
//! The sentence embedding is projected into state space and added to the
//! input-dependent output matrix at every timestep; the state update itself
//! is untouched:
//!
//! ```text
//! C_s[t] = C[t] + f_t · W_text + b_text
//! h[t]   = Ā[t] ⊙ h[t−1] + B̄[t]·x[t]
//! y[t,d] = Σₙ C_s[t,n]·h[t,d,n] + D[d]·x[t,d]
//! ```

use rand::Rng;

use crate::error::{ensure, Result};
use crate::freq_mamba::{CdwConv, SelectiveProjections};
use crate::layers::{eval_with, init_linear, join, linear};
use crate::ssm_core::{scan_node, ScanOptions};
use crate::tensor_grad::{Bound, Graph, ParameterSet, Tensor, Var};

/// Sentence-level conditioning vector.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    vector: Tensor,
}

impl TextEmbedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        ensure!(!values.is_empty(), "text embedding must be nonempty");
        Ok(Self { vector: Tensor::vector(values)? })
    }

    pub fn zeros(width: usize) -> Self {
        Self { vector: Tensor::zeros(&[width]) }
    }

    pub fn width(&self) -> usize {
        self.vector.len()
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.vector
    }

    pub fn values(&self) -> &[f64] {
        self.vector.data()
    }

    /// Linear combination `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        Ok(Self { vector: self.vector.zip_map(&other.vector, |x, y| a * x + b * y)? })
    }
}

/// Text-conditioned selective SSM.
///
/// Extra layout under `prefix`: `d_skip` (`D`), `text_proj.{w,b}` (`E×N`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextSsm {
    pub prefix: String,
    pub text_dim: usize,
    pub proj: SelectiveProjections,
}

impl TextSsm {
    pub fn new(prefix: impl Into<String>, channels: usize, states: usize, text_dim: usize) -> Self {
        let prefix = prefix.into();
        Self { proj: SelectiveProjections { prefix: prefix.clone(), channels, states }, text_dim, prefix }
    }

    pub fn init(&self, ps: &mut ParameterSet, rng: &mut impl Rng) -> Result<()> {
        self.proj.init(ps, rng)?;
        ps.insert(join(&self.prefix, "d_skip"), Tensor::full(&[self.proj.channels], 1.0))?;
        let std = 1.0 / (self.text_dim as f64).sqrt();
        init_linear(ps, &join(&self.prefix, "text_proj"), self.text_dim, self.proj.states, std, rng)
    }

    /// Text shift of the output matrix, a length-`N` node.
    pub fn text_shift(&self, g: &mut Graph, b: &Bound, f_t: Var) -> Result<Var> {
        let width = g.shape(f_t).iter().product::<usize>();
        ensure!(
            width == self.text_dim,
            "text embedding width {width} does not match expected {}",
            self.text_dim
        );
        linear(g, b, &join(&self.prefix, "text_proj"), f_t)
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var, f_t: Var) -> Result<Var> {
        let shift = self.text_shift(g, b, f_t)?;
        let p = self.proj.forward(g, b, x)?;
        let c_s = g.add_row(p.c, shift)?;
        let opts = ScanOptions { a_mod: None, d_skip: Some(b.var(&join(&self.prefix, "d_skip"))?), clamp_max: None };
        scan_node(g, x, p.delta, p.a, p.b, c_s, opts)
    }

    pub fn apply(&self, ps: &ParameterSet, x: &Tensor, f_t: &TextEmbedding) -> Result<Tensor> {
        eval_with(ps, |g, b| {
            let x = g.constant(x.clone());
            let f = g.constant(f_t.as_tensor().clone());
            self.forward(g, b, x, f)
        })
    }
}

/// The TextMamba block (unidirectional):
///
/// ```text
/// f_lin  = Linear_in(f_u)
/// f_text = TS(σ(CDWConv(f_lin)), f_t)
/// f_v    = Linear_out(f_text ⊙ σ(f_lin))
/// ```
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextMambaBlock {
    pub prefix: String,
    pub channels: usize,
    pub cdw: CdwConv,
    pub ssm: TextSsm,
}

impl TextMambaBlock {
    pub fn new(prefix: impl Into<String>, channels: usize, states: usize, text_dim: usize) -> Self {
        let prefix = prefix.into();
        Self {
            cdw: CdwConv::new(join(&prefix, "cdw"), channels),
            ssm: TextSsm::new(join(&prefix, "ssm"), channels, states, text_dim),
            channels,
            prefix,
        }
    }

    pub fn init(&self, ps: &mut ParameterSet, rng: &mut impl Rng) -> Result<()> {
        let d = self.channels;
        let std = 1.0 / (d as f64).sqrt();
        init_linear(ps, &join(&self.prefix, "in"), d, d, std, rng)?;
        self.cdw.init(ps, rng)?;
        self.ssm.init(ps, rng)?;
        init_linear(ps, &join(&self.prefix, "out"), d, d, std, rng)
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, f_u: Var, f_t: Var) -> Result<Var> {
        let f_lin = linear(g, b, &join(&self.prefix, "in"), f_u)?;
        let conv = self.cdw.forward(g, b, f_lin)?;
        let u = g.sigmoid(conv)?;
        let f_text = self.ssm.forward(g, b, u, f_t)?;
        let gate = g.sigmoid(f_lin)?;
        let selected = g.mul(f_text, gate)?;
        linear(g, b, &join(&self.prefix, "out"), selected)
    }

    pub fn apply(&self, ps: &ParameterSet, x: &Tensor, f_t: &TextEmbedding) -> Result<Tensor> {
        eval_with(ps, |g, b| {
            let x = g.constant(x.clone());
            let f = g.constant(f_t.as_tensor().clone());
            self.forward(g, b, x, f)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::ssm_core::{discretize_zoh, scan_recurrent, HiddenState, SelectiveSSMParams};
    use crate::tensor_grad::{grad_check, gradient, softplus};
    use proptest::prelude::*;

    const E: usize = 6;

    fn setup(seed: u64, d: usize, n: usize) -> (TextSsm, ParameterSet) {
        let ssm = TextSsm::new("ts", d, n, E);
        let mut ps = ParameterSet::new();
        ssm.init(&mut ps, &mut rng::stream(seed, "init")).unwrap();
        ps.set("ts.d_skip", rng::normal_tensor(&mut rng::stream(seed, "skip"), &[d], 1.0)).unwrap();
        (ssm, ps)
    }

    fn embedding(seed: u64) -> TextEmbedding {
        TextEmbedding::new(rng::normal_tensor(&mut rng::stream(seed, "emb"), &[E], 1.0).into_data()).unwrap()
    }

    fn matmul(x: &Tensor, w: &Tensor) -> Tensor {
        let (l, k) = x.dims2().unwrap();
        let m = w.cols();
        let mut out = Tensor::zeros(&[l, m]);
        for t in 0..l {
            for j in 0..m {
                out.data_mut()[t * m + j] = (0..k).map(|i| x.at2(t, i) * w.at2(i, j)).sum();
            }
        }
        out
    }

    /// Plain selective parameters for the block's unconditioned path.
    fn plain(ps: &ParameterSet, x: &Tensor) -> SelectiveSSMParams {
        let db = ps.get("ts.delta.b").unwrap();
        let mut delta = matmul(x, ps.get("ts.delta.w").unwrap());
        let d = delta.cols();
        for (i, v) in delta.data_mut().iter_mut().enumerate() {
            *v = softplus(*v + db.data()[i % d]);
        }
        SelectiveSSMParams {
            a: ps.get("ts.a_log").unwrap().map(|v| -v.exp()),
            b_seq: matmul(x, ps.get("ts.w_b").unwrap()),
            c_seq: matmul(x, ps.get("ts.w_c").unwrap()),
            d_skip: ps.get("ts.d_skip").unwrap().clone(),
            delta_seq: delta,
        }
    }

    #[test]
    fn zero_conditioning_reduces_to_plain_scan() {
        let (ssm, mut ps) = setup(1, 4, 8);
        ps.set("ts.text_proj.b", Tensor::zeros(&[8])).unwrap();
        let x = rng::uniform_tensor(&mut rng::stream(1, "x"), &[16, 4], 0.0, 1.0);
        let y = ssm.apply(&ps, &x, &TextEmbedding::zeros(E)).unwrap();
        let p = plain(&ps, &x);
        let (reference, _) =
            scan_recurrent(&discretize_zoh(&p).unwrap(), &p.c_seq, &p.d_skip, &x, &HiddenState::zeros(4, 8)).unwrap();
        assert!(y.max_abs_diff(&reference) <= 1e-12);
    }

    #[test]
    fn conditioning_adds_projected_inner_product_with_states() {
        let (ssm, mut ps) = setup(2, 3, 5);
        ps.set("ts.text_proj.b", Tensor::zeros(&[5])).unwrap();
        let x = rng::uniform_tensor(&mut rng::stream(2, "x"), &[10, 3], 0.0, 1.0);
        let f = embedding(2);
        let diff = ssm
            .apply(&ps, &x, &f)
            .unwrap()
            .zip_map(&ssm.apply(&ps, &x, &TextEmbedding::zeros(E)).unwrap(), |a, b| a - b)
            .unwrap();

        // Recompute every hidden state with the reference scan by reading out
        // one state at a time through a unit output matrix.
        let p = plain(&ps, &x);
        let disc = discretize_zoh(&p).unwrap();
        let w = ps.get("ts.text_proj.w").unwrap();
        let shift: Vec<f64> = (0..5).map(|n| (0..E).map(|e| f.values()[e] * w.at2(e, n)).sum()).collect();
        let mut expect = Tensor::zeros(&[10, 3]);
        for s in 0..5 {
            let mut c = Tensor::zeros(&[10, 5]);
            for t in 0..10 {
                c.data_mut()[t * 5 + s] = 1.0;
            }
            let (h_s, _) = scan_recurrent(&disc, &c, &Tensor::zeros(&[3]), &x, &HiddenState::zeros(3, 5)).unwrap();
            for (e, h) in expect.data_mut().iter_mut().zip(h_s.data()) {
                *e += shift[s] * h;
            }
        }
        assert!(diff.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let (ssm, ps) = setup(3, 2, 3);
        let x = Tensor::zeros(&[4, 2]);
        assert!(ssm.apply(&ps, &x, &TextEmbedding::zeros(E + 1)).is_err());
    }

    #[test]
    fn text_ssm_gradients_reach_the_projection() {
        let (ssm, mut ps) = setup(4, 3, 4);
        ps.insert("x", rng::uniform_tensor(&mut rng::stream(4, "x"), &[8, 3], 0.0, 1.0)).unwrap();
        let f = embedding(4);
        let w = rng::normal_tensor(&mut rng::stream(4, "w"), &[8, 3], 1.0);
        let loss = |g: &mut Graph, b: &Bound| {
            let fv = g.constant(f.as_tensor().clone());
            let y = ssm.forward(g, b, b.var("x")?, fv)?;
            g.dot_const(y, w.clone())
        };
        let report = grad_check(&loss, &ps, 1e-4, 1e-8).unwrap();
        assert!(report.passed, "{:?}", report.worst_failure());
        let grads = gradient(&loss, &ps).unwrap();
        assert!(grads.get("ts.text_proj.w").unwrap().max_abs() > 0.0);
        assert!(grads.get("ts.text_proj.b").unwrap().max_abs() > 0.0);
    }

    fn block(seed: u64) -> (TextMambaBlock, ParameterSet) {
        let blk = TextMambaBlock::new("tm", 4, 4, E);
        let mut ps = ParameterSet::new();
        blk.init(&mut ps, &mut rng::stream(seed, "init")).unwrap();
        (blk, ps)
    }

    #[test]
    fn closed_gate_and_shape() {
        let (blk, mut ps) = block(5);
        let x = rng::normal_tensor(&mut rng::stream(5, "x"), &[8, 4], 1.0);
        assert_eq!(blk.apply(&ps, &x, &embedding(5)).unwrap().shape(), &[8, 4]);
        ps.set("tm.in.b", Tensor::full(&[4], -800.0)).unwrap();
        let bias = ps.get("tm.out.b").unwrap().clone();
        let y = blk.apply(&ps, &x, &embedding(5)).unwrap();
        for t in 0..8 {
            for (v, b) in y.row(t).iter().zip(bias.data()) {
                assert!((v - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn distinct_embeddings_give_distinct_outputs() {
        let (blk, ps) = block(6);
        let x = rng::normal_tensor(&mut rng::stream(6, "x"), &[8, 4], 1.0);
        let y1 = blk.apply(&ps, &x, &embedding(61)).unwrap();
        let y2 = blk.apply(&ps, &x, &embedding(62)).unwrap();
        assert!(y1.max_abs_diff(&y2) > 0.0);
    }

    #[test]
    fn zero_conditioning_matches_unconditioned_block() {
        let (blk, mut ps) = block(7);
        ps.set("tm.ssm.text_proj.b", Tensor::zeros(&[4])).unwrap();
        let x = rng::normal_tensor(&mut rng::stream(7, "x"), &[8, 4], 1.0);
        let y = blk.apply(&ps, &x, &TextEmbedding::zeros(E)).unwrap();
        // Zeroing the projection weights leaves no text path at all.
        let mut unconditioned = ps.clone();
        unconditioned.set("tm.ssm.text_proj.w", Tensor::zeros(&[E, 4])).unwrap();
        let y0 = blk.apply(&unconditioned, &x, &embedding(7)).unwrap();
        assert!(y.max_abs_diff(&y0) <= 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn conditioning_enters_linearly(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let (ssm, mut ps) = setup(seed, 3, 4);
            ps.set("ts.text_proj.b", Tensor::zeros(&[4])).unwrap();
            let x = rng::uniform_tensor(&mut rng::stream(seed, "x"), &[8, 3], 0.0, 1.0);
            let (f1, f2) = (embedding(seed ^ 1), embedding(seed ^ 2));
            let y0 = ssm.apply(&ps, &x, &TextEmbedding::zeros(E)).unwrap();
            let dy = |f: &TextEmbedding| ssm.apply(&ps, &x, f).unwrap().zip_map(&y0, |u, v| u - v).unwrap();
            let lhs = dy(&f1.combine(a, &f2, b).unwrap());
            let rhs = dy(&f1).zip_map(&dy(&f2), |u, v| a * u + b * v).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
        }
    }
}
