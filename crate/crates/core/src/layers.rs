//! Parameter-layout helpers shared by the blocks. Parameters live in a flat
//! [`ParameterSet`] under dotted names; a block is described by its prefix.

use rand::Rng;

use crate::error::Result;
use crate::rng;
use crate::tensor_grad::{Bound, Graph, ParameterSet, Tensor, Var};

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Affine map `x·W + b` stored as `{prefix}.w` (`in × out`) and `{prefix}.b`.
pub(crate) fn init_linear(
    ps: &mut ParameterSet,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    std: f64,
    rng: &mut impl Rng,
) -> Result<()> {
    ps.insert(join(prefix, "w"), rng::normal_tensor(rng, &[fan_in, fan_out], std))?;
    ps.insert(join(prefix, "b"), Tensor::zeros(&[fan_out]))
}

pub(crate) fn linear(g: &mut Graph, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = b.var(&join(prefix, "w"))?;
    let bias = b.var(&join(prefix, "b"))?;
    g.linear(x, w, Some(bias))
}

/// Three-tap causal depthwise kernel `{prefix}.w` (`3 × C`) with bias `{prefix}.b`.
///
/// Initialized near identity: the current-frame tap is one, the delayed taps
/// are small random values.
pub(crate) fn init_dwconv(ps: &mut ParameterSet, prefix: &str, channels: usize, rng: &mut impl Rng) -> Result<()> {
    let mut w = rng::normal_tensor(rng, &[3, channels], 0.05);
    for v in &mut w.data_mut()[2 * channels..] {
        *v += 1.0;
    }
    ps.insert(join(prefix, "w"), w)?;
    ps.insert(join(prefix, "b"), Tensor::zeros(&[channels]))
}

pub(crate) fn dwconv(g: &mut Graph, b: &Bound, prefix: &str, x: Var, dilation: usize) -> Result<Var> {
    let w = b.var(&join(prefix, "w"))?;
    let bias = b.var(&join(prefix, "b"))?;
    g.depthwise_conv(x, w, Some(bias), dilation)
}

/// Evaluates a graph-building closure once on constant parameters.
pub(crate) fn eval_with(
    params: &ParameterSet,
    build: impl FnOnce(&mut Graph, &Bound) -> Result<Var>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = g.bind_constants(params);
    let out = build(&mut g, &bound)?;
    Ok(g.value(out).clone())
}
