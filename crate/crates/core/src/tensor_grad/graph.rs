//! Tensor-level reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes. Each operation is
//! a [`Primitive`] carrying its own forward kernel and vector-Jacobian product,
//! so domain kernels (the selective scan, the Haar transform) plug in next to
//! the built-in arithmetic without the graph knowing about them.

use std::fmt;

use super::tensor::Tensor;
use crate::error::{contract, ensure, Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// A differentiable operation.
///
/// `forward` may stash intermediates on `self`; `backward` is called at most
/// once, after `forward`, with the same inputs.
pub trait Primitive: Send {
    fn name(&self) -> &'static str;

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// Returns one gradient per input. Entries whose `needs` flag is false
    /// may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    prim: Option<Box<dyn Primitive>>,
    requires_grad: bool,
}

/// Recording of one forward evaluation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    first_nonfinite: Option<(usize, &'static str)>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}

/// Gradients of a scalar with respect to every node that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, zero-filled when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    pub(crate) fn take(&mut self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.grads[v.0].take() {
            Some(g) => Tensor::from_parts(shape, g),
            None => Tensor::zeros(&shape),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, inputs: Vec::new(), prim: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of the first operation whose output contained a non-finite value.
    pub fn first_nonfinite_op(&self) -> Option<&'static str> {
        self.first_nonfinite.map(|(_, name)| name)
    }

    /// Applies `prim` to `inputs` and records it.
    pub fn apply(&mut self, mut prim: Box<dyn Primitive>, inputs: &[Var]) -> Result<Var> {
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            prim.forward(&vals)?
        };
        if self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some((self.nodes.len(), prim.name()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, inputs: inputs.to_vec(), prim: Some(prim), requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_val = &self.nodes[loss.0].value;
        ensure!(loss_val.len() == 1, "loss must be a scalar, got shape {:?}", loss_val.shape());
        if !loss_val.data()[0].is_finite() {
            let op = self.first_nonfinite_op().unwrap_or("leaf");
            return Err(Error::Numeric {
                op: op.to_string(),
                detail: format!("loss evaluated to {}", loss_val.data()[0]),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(prim) = node.prim.as_ref() else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g_out) = grads[idx].take() else { continue };
            let needs: Vec<bool> =
                node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let in_grads = prim.backward(&inputs, &node.value, &g_out, &needs);
            for ((input, g), need) in node.inputs.iter().zip(in_grads).zip(&needs) {
                let (Some(g), true) = (g, *need) else { continue };
                debug_assert_eq!(g.len(), self.nodes[input.0].value.len(), "{}", prim.name());
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            // Keep the gradient of leaves only; interior buffers were taken above.
        }
        grads.resize(self.nodes.len(), None);
        for (i, node) in self.nodes.iter().enumerate() {
            if node.prim.is_some() {
                grads[i] = None;
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    // ---- built-in primitives -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Box::new(Binary::Add), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Box::new(Binary::Sub), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Box::new(Binary::Mul), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.apply(Box::new(Scale(factor)), &[a])
    }

    /// Multiplies every entry of `x` by the one-element tensor `s`.
    pub fn scale_by(&mut self, s: Var, x: Var) -> Result<Var> {
        self.apply(Box::new(ScaleBy), &[s, x])
    }

    /// Adds the vector `row` to every row of the rank-2 `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.apply(Box::new(AddRow), &[x, row])
    }

    /// `x · w (+ b)` for `x: R×K`, `w: K×M`, `b: M`. A rank-1 `x` is a single row.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        match b {
            Some(b) => self.apply(Box::new(Linear), &[x, w, b]),
            None => self.apply(Box::new(Linear), &[x, w]),
        }
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Box::new(Unary::Sigmoid), &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.apply(Box::new(Unary::Softplus), &[x])
    }

    /// `-exp(x)`, the structural parameterization of negative decay rates.
    pub fn neg_exp(&mut self, x: Var) -> Result<Var> {
        self.apply(Box::new(Unary::NegExp), &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.apply(Box::new(Unary::Square), &[x])
    }

    /// Causal depthwise convolution with a kernel of `w.rows()` taps.
    ///
    /// `y[t,c] = b[c] + Σ_k w[k,c]·x[t − (K−1−k)·dilation, c]`, zero left padding.
    /// The last tap (`k = K−1`) reads the current frame.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Result<Var> {
        ensure!(dilation >= 1, "dilation must be positive");
        match b {
            Some(b) => self.apply(Box::new(DepthwiseConv { dilation }), &[x, w, b]),
            None => self.apply(Box::new(DepthwiseConv { dilation }), &[x, w]),
        }
    }

    /// Reverses the time (leading) axis.
    pub fn reverse_time(&mut self, x: Var) -> Result<Var> {
        self.apply(Box::new(ReverseTime), &[x])
    }

    /// Mean of squared entries, a scalar.
    pub fn mean_square(&mut self, x: Var) -> Result<Var> {
        self.apply(Box::new(Reduce::MeanSquare), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Box::new(Reduce::Sum), &[x])
    }

    /// Mean squared difference between `a` and `b`, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        self.mean_square(d)
    }

    /// `Σ x ⊙ weights` against a constant tensor.
    pub fn dot_const(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        self.apply(Box::new(DotConst(weights)), &[x])
    }
}

fn same_shape(name: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(contract(format!("{name}: shape mismatch {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

enum Binary {
    Add,
    Sub,
    Mul,
}

impl Primitive for Binary {
    fn name(&self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (a, b) = (inputs[0], inputs[1]);
        same_shape(self.name(), a, b)?;
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| match self {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
            })
            .collect();
        Ok(Tensor::from_parts(a.shape().to_vec(), data))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        match self {
            Binary::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
            Binary::Sub => vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())],
            Binary::Mul => {
                let ga = needs[0].then(|| g.iter().zip(inputs[1].data()).map(|(g, b)| g * b).collect());
                let gb = needs[1].then(|| g.iter().zip(inputs[0].data()).map(|(g, a)| g * a).collect());
                vec![ga, gb]
            }
        }
    }
}

struct Scale(f64);

impl Primitive for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(inputs[0].map(|v| v * self.0))
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().map(|v| v * self.0).collect())]
    }
}

struct ScaleBy;

impl Primitive for ScaleBy {
    fn name(&self) -> &'static str {
        "scale_by"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let s = inputs[0].item()?;
        Ok(inputs[1].map(|v| v * s))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let s = inputs[0].data()[0];
        let gs = needs[0].then(|| vec![g.iter().zip(inputs[1].data()).map(|(g, x)| g * x).sum()]);
        let gx = needs[1].then(|| g.iter().map(|g| g * s).collect());
        vec![gs, gx]
    }
}

struct AddRow;

impl Primitive for AddRow {
    fn name(&self) -> &'static str {
        "add_row"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (x, row) = (inputs[0], inputs[1]);
        let (_, c) = x.dims2()?;
        ensure!(row.len() == c, "add_row: row of width {} for {c} columns", row.len());
        let mut out = x.clone();
        for chunk in out.data_mut().chunks_mut(c) {
            chunk.iter_mut().zip(row.data()).for_each(|(o, r)| *o += r);
        }
        Ok(out)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let c = inputs[0].cols();
        let grow = needs[1].then(|| {
            let mut acc = vec![0.0; c];
            for chunk in g.chunks(c) {
                acc.iter_mut().zip(chunk).for_each(|(a, v)| *a += v);
            }
            acc
        });
        vec![Some(g.to_vec()), grow]
    }
}

struct Linear;

/// Dot product with four independent partial sums.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl Linear {
    fn dims(x: &Tensor) -> (usize, usize) {
        match x.shape() {
            [k] => (1, *k),
            [r, k] => (*r, *k),
            _ => (0, 0),
        }
    }
}

impl Primitive for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (x, w) = (inputs[0], inputs[1]);
        ensure!(x.shape().len() <= 2 && !x.shape().is_empty(), "linear: input must be rank 1 or 2");
        let (r, k) = Self::dims(x);
        let (wk, m) = w.dims2()?;
        ensure!(wk == k, "linear: input width {k} does not match weight rows {wk}");
        let mut out = vec![0.0; r * m];
        if let Some(b) = inputs.get(2) {
            ensure!(b.len() == m, "linear: bias width {} does not match {m}", b.len());
            for row in out.chunks_mut(m) {
                row.copy_from_slice(b.data());
            }
        }
        let wd = w.data();
        for (i, orow) in out.chunks_mut(m).enumerate() {
            let xrow = &x.data()[i * k..(i + 1) * k];
            for (kk, &xv) in xrow.iter().enumerate() {
                let wrow = &wd[kk * m..(kk + 1) * m];
                orow.iter_mut().zip(wrow).for_each(|(o, w)| *o += xv * w);
            }
        }
        let shape = if x.shape().len() == 1 { vec![m] } else { vec![r, m] };
        Ok(Tensor::from_parts(shape, out))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (r, k) = Self::dims(x);
        let m = w.cols();
        let wd = w.data();
        let gx = needs[0].then(|| {
            let mut gx = vec![0.0; r * k];
            for i in 0..r {
                let grow = &g[i * m..(i + 1) * m];
                for kk in 0..k {
                    let wrow = &wd[kk * m..(kk + 1) * m];
                    gx[i * k + kk] = dot(grow, wrow);
                }
            }
            gx
        });
        let gw = needs[1].then(|| {
            let mut gw = vec![0.0; k * m];
            for i in 0..r {
                let grow = &g[i * m..(i + 1) * m];
                let xrow = &x.data()[i * k..(i + 1) * k];
                for (kk, &xv) in xrow.iter().enumerate() {
                    gw[kk * m..(kk + 1) * m].iter_mut().zip(grow).for_each(|(o, gv)| *o += xv * gv);
                }
            }
            gw
        });
        let mut out = vec![gx, gw];
        if inputs.len() == 3 {
            out.push(needs[2].then(|| {
                let mut gb = vec![0.0; m];
                for grow in g.chunks(m) {
                    gb.iter_mut().zip(grow).for_each(|(a, v)| *a += v);
                }
                gb
            }));
        }
        out
    }
}

#[derive(Clone, Copy)]
enum Unary {
    Sigmoid,
    Softplus,
    NegExp,
    Square,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl Primitive for Unary {
    fn name(&self) -> &'static str {
        match self {
            Unary::Sigmoid => "sigmoid",
            Unary::Softplus => "softplus",
            Unary::NegExp => "neg_exp",
            Unary::Square => "square",
        }
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(match self {
            Unary::Sigmoid => inputs[0].map(sigmoid),
            Unary::Softplus => inputs[0].map(softplus),
            Unary::NegExp => inputs[0].map(|v| -v.exp()),
            Unary::Square => inputs[0].map(|v| v * v),
        })
    }

    fn backward(&self, inputs: &[&Tensor], out: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0].data();
        let y = out.data();
        let gx = g
            .iter()
            .enumerate()
            .map(|(i, &gv)| {
                gv * match self {
                    Unary::Sigmoid => y[i] * (1.0 - y[i]),
                    Unary::Softplus => sigmoid(x[i]),
                    Unary::NegExp => y[i],
                    Unary::Square => 2.0 * x[i],
                }
            })
            .collect();
        vec![Some(gx)]
    }
}

struct DepthwiseConv {
    dilation: usize,
}

impl Primitive for DepthwiseConv {
    fn name(&self) -> &'static str {
        "depthwise_conv"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (x, w) = (inputs[0], inputs[1]);
        let (l, c) = x.dims2()?;
        let (taps, wc) = w.dims2()?;
        ensure!(wc == c, "depthwise_conv: kernel width {wc} for {c} channels");
        let mut out = vec![0.0; l * c];
        if let Some(b) = inputs.get(2) {
            ensure!(b.len() == c, "depthwise_conv: bias width {} for {c} channels", b.len());
            for row in out.chunks_mut(c) {
                row.copy_from_slice(b.data());
            }
        }
        for t in 0..l {
            for k in 0..taps {
                let back = (taps - 1 - k) * self.dilation;
                if back > t {
                    continue;
                }
                let src = &x.data()[(t - back) * c..(t - back + 1) * c];
                let wrow = w.row(k);
                let orow = &mut out[t * c..(t + 1) * c];
                for ch in 0..c {
                    orow[ch] += wrow[ch] * src[ch];
                }
            }
        }
        Ok(Tensor::from_parts(vec![l, c], out))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (l, c) = (x.rows(), x.cols());
        let taps = w.rows();
        let mut gx = vec![0.0; l * c];
        let mut gw = vec![0.0; taps * c];
        for t in 0..l {
            let grow = &g[t * c..(t + 1) * c];
            for k in 0..taps {
                let back = (taps - 1 - k) * self.dilation;
                if back > t {
                    continue;
                }
                let s = t - back;
                for ch in 0..c {
                    gx[s * c + ch] += grow[ch] * w.data()[k * c + ch];
                    gw[k * c + ch] += grow[ch] * x.data()[s * c + ch];
                }
            }
        }
        let mut out = vec![needs[0].then_some(gx), needs[1].then_some(gw)];
        if inputs.len() == 3 {
            out.push(needs[2].then(|| {
                let mut gb = vec![0.0; c];
                for grow in g.chunks(c) {
                    gb.iter_mut().zip(grow).for_each(|(a, v)| *a += v);
                }
                gb
            }));
        }
        out
    }
}

struct ReverseTime;

impl Primitive for ReverseTime {
    fn name(&self) -> &'static str {
        "reverse_time"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        inputs[0].dims2()?;
        Ok(inputs[0].reverse_rows())
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let gt = Tensor::from_parts(inputs[0].shape().to_vec(), g.to_vec());
        vec![Some(gt.reverse_rows().into_data())]
    }
}

enum Reduce {
    Sum,
    MeanSquare,
}

impl Primitive for Reduce {
    fn name(&self) -> &'static str {
        match self {
            Reduce::Sum => "sum",
            Reduce::MeanSquare => "mean_square",
        }
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        ensure!(!x.is_empty(), "{}: empty input", self.name());
        Ok(Tensor::scalar(match self {
            Reduce::Sum => x.data().iter().sum(),
            Reduce::MeanSquare => x.sum_sq() / x.len() as f64,
        }))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0];
        let gv = g[0];
        let n = x.len() as f64;
        vec![Some(match self {
            Reduce::Sum => vec![gv; x.len()],
            Reduce::MeanSquare => x.data().iter().map(|v| gv * 2.0 * v / n).collect(),
        })]
    }
}

struct DotConst(Tensor);

impl Primitive for DotConst {
    fn name(&self) -> &'static str {
        "dot_const"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        same_shape("dot_const", inputs[0], &self.0)?;
        Ok(Tensor::scalar(inputs[0].data().iter().zip(self.0.data()).map(|(a, b)| a * b).sum()))
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(self.0.data().iter().map(|w| w * g[0]).collect())]
    }
}
