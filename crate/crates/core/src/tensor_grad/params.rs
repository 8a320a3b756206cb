use std::collections::{BTreeMap, BTreeSet};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{contract, ensure, Error, Result};

/// Named parameters with deterministic (lexicographic) iteration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    params: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        ensure!(!self.params.contains_key(&name), "duplicate parameter name `{name}`");
        self.params.insert(name, value);
        Ok(())
    }

    /// Replaces the value of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| contract(format!("unknown parameter `{name}`")))?;
        ensure!(
            slot.shape() == value.shape(),
            "shape mismatch for `{name}`: {:?} vs {:?}",
            slot.shape(),
            value.shape()
        );
        *slot = value;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn freeze(&mut self, name: &str) -> Result<()> {
        ensure!(self.params.contains_key(name), "unknown parameter `{name}`");
        self.frozen.insert(name.to_string());
        Ok(())
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            params: self.params.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect(),
            frozen: BTreeSet::new(),
        }
    }

    /// `self += factor · other` over matching names.
    pub fn add_scaled(&mut self, other: &Self, factor: f64) -> Result<()> {
        for (name, t) in self.params.iter_mut() {
            let o = other.params.get(name).ok_or_else(|| contract(format!("missing `{name}`")))?;
            ensure!(o.shape() == t.shape(), "shape mismatch for `{name}`");
            t.data_mut().iter_mut().zip(o.data()).for_each(|(a, b)| *a += factor * b);
        }
        Ok(())
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub(crate) fn values_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }
}

/// Graph handles for a bound [`ParameterSet`].
#[derive(Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| contract(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl Graph {
    /// Places every parameter on the graph; frozen ones become constants.
    pub fn bind(&mut self, params: &ParameterSet) -> Bound {
        let vars = params
            .params
            .iter()
            .map(|(name, value)| {
                let v = if params.is_frozen(name) {
                    self.constant(value.clone())
                } else {
                    self.param(value.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

impl Graph {
    /// Places every parameter on the graph as a constant (inference).
    pub fn bind_constants(&mut self, params: &ParameterSet) -> Bound {
        let vars = params.params.iter().map(|(name, value)| (name.clone(), self.constant(value.clone()))).collect();
        Bound { vars }
    }
}

/// Builds a scalar loss on a fresh graph from bound parameters.
pub trait LossFn: Fn(&mut Graph, &Bound) -> Result<Var> {}
impl<F: Fn(&mut Graph, &Bound) -> Result<Var>> LossFn for F {}

fn scalar_of(graph: &Graph, loss: Var) -> Result<f64> {
    let value = graph.value(loss);
    ensure!(value.len() == 1, "loss must be a scalar, got shape {:?}", value.shape());
    let v = value.data()[0];
    if !v.is_finite() {
        return Err(Error::Numeric {
            op: graph.first_nonfinite_op().unwrap_or("leaf").to_string(),
            detail: format!("loss evaluated to {v}"),
        });
    }
    Ok(v)
}

/// Evaluates the loss without differentiating.
pub fn evaluate(loss_fn: &impl LossFn, params: &ParameterSet) -> Result<f64> {
    let mut g = Graph::new();
    let bound = g.bind(params);
    let loss = loss_fn(&mut g, &bound)?;
    scalar_of(&g, loss)
}

/// Loss value and reverse-mode gradient for every parameter.
///
/// Frozen parameters receive zero gradients.
pub fn value_and_gradient(loss_fn: &impl LossFn, params: &ParameterSet) -> Result<(f64, ParameterSet)> {
    let mut g = Graph::new();
    let bound = g.bind(params);
    let loss = loss_fn(&mut g, &bound)?;
    let value = scalar_of(&g, loss)?;
    let mut grads = g.backward(loss)?;
    let mut out = ParameterSet::new();
    for (name, var) in bound.iter() {
        let gt = if params.is_frozen(name) { Tensor::zeros(g.shape(var)) } else { grads.take(var) };
        out.insert(name, gt)?;
    }
    Ok((value, out))
}

pub fn gradient(loss_fn: &impl LossFn, params: &ParameterSet) -> Result<ParameterSet> {
    value_and_gradient(loss_fn, params).map(|(_, g)| g)
}

/// Finite-difference formula used to estimate a partial derivative.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+ε) − f(x−ε)) / 2ε`
    Central,
    /// `(8(f(x+ε) − f(x−ε)) − (f(x+2ε) − f(x−2ε))) / 12ε`, error O(ε⁴).
    Central4,
    /// `(45·d₁ − 9·d₂ + d₃) / 60ε` with `dₖ = f(x+kε) − f(x−kε)`, error O(ε⁶).
    Central6,
    /// Ridders' extrapolation over central differences at ε, ε/2, ε/4, ε/8,
    /// keeping the tableau entry with the smallest internal error estimate.
    /// Large steps win where roundoff dominates, small ones near kinks.
    Ridders,
}

/// Central differences `(f(x+ε) − f(x−ε)) / 2ε` for every unfrozen entry.
pub fn finite_difference_gradient(
    loss_fn: &impl LossFn,
    params: &ParameterSet,
    epsilon: f64,
) -> Result<ParameterSet> {
    finite_difference_gradient_with(loss_fn, params, epsilon, Stencil::Central)
}

pub fn finite_difference_gradient_with(
    loss_fn: &impl LossFn,
    params: &ParameterSet,
    epsilon: f64,
    stencil: Stencil,
) -> Result<ParameterSet> {
    ensure!(epsilon > 0.0 && epsilon.is_finite(), "epsilon must be positive, got {epsilon}");
    let mut out = params.zeros_like();
    let mut work = params.clone();
    for (name, value) in params.iter() {
        if params.is_frozen(name) {
            continue;
        }
        let mut grad = vec![0.0; value.len()];
        for (i, slot) in grad.iter_mut().enumerate() {
            let orig = value.data()[i];
            let mut at = |offset: f64| -> Result<f64> {
                work.get_mut(name).expect("present").data_mut()[i] = orig + offset;
                evaluate(loss_fn, &work)
            };
            let d1 = at(epsilon)? - at(-epsilon)?;
            *slot = match stencil {
                Stencil::Central => d1 / (2.0 * epsilon),
                Stencil::Central4 => {
                    let d2 = at(2.0 * epsilon)? - at(-2.0 * epsilon)?;
                    (8.0 * d1 - d2) / (12.0 * epsilon)
                }
                Stencil::Central6 => {
                    let d2 = at(2.0 * epsilon)? - at(-2.0 * epsilon)?;
                    let d3 = at(3.0 * epsilon)? - at(-3.0 * epsilon)?;
                    (45.0 * d1 - 9.0 * d2 + d3) / (60.0 * epsilon)
                }
                Stencil::Ridders => {
                    const LEVELS: usize = 4;
                    let mut table = [[0.0; LEVELS]; LEVELS];
                    table[0][0] = d1 / (2.0 * epsilon);
                    let (mut best, mut best_err) = (table[0][0], f64::INFINITY);
                    let mut h = epsilon;
                    for i in 1..LEVELS {
                        h /= 2.0;
                        table[0][i] = (at(h)? - at(-h)?) / (2.0 * h);
                        let mut fac = 4.0;
                        for j in 1..=i {
                            table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
                            fac *= 4.0;
                            let err = (table[j][i] - table[j - 1][i])
                                .abs()
                                .max((table[j][i] - table[j - 1][i - 1]).abs());
                            if err <= best_err {
                                best_err = err;
                                best = table[j][i];
                            }
                        }
                        if (table[i][i] - table[i - 1][i - 1]).abs() >= 2.0 * best_err {
                            break;
                        }
                    }
                    best
                }
            };
            work.get_mut(name).expect("present").data_mut()[i] = orig;
        }
        out.set(name, Tensor::from_parts(value.shape().to_vec(), grad))?;
    }
    Ok(out)
}

/// Agreement between analytic and central-difference gradients for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    /// Largest relative error over entries with |g| > abs_tol.
    pub max_rel_error: f64,
    /// Largest absolute error over the remaining entries.
    pub max_abs_error: f64,
    /// Flat index of the worst entry and its (analytic, numeric) values.
    pub worst: Option<(usize, f64, f64)>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub params: Vec<ParamCheck>,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub passed: bool,
}

impl CheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn max_abs_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_abs_error).fold(0.0, f64::max)
    }

    /// Failing parameter with the largest relative error, if any.
    pub fn worst_failure(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .filter(|p| !p.passed)
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub const DEFAULT_FD_EPSILON: f64 = 1e-5;
/// Initial step of the Ridders extrapolation used by [`grad_check`].
pub const CHECK_FD_EPSILON: f64 = 2e-2;

/// Compares [`gradient`] against a Ridders-extrapolated central-difference estimate.
///
/// An entry whose analytic magnitude exceeds `abs_tol` must agree to within
/// `rel_tol` relative error; smaller entries must agree to within `abs_tol`.
pub fn grad_check(
    loss_fn: &impl LossFn,
    params: &ParameterSet,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<CheckReport> {
    ensure!(rel_tol > 0.0 && abs_tol > 0.0, "tolerances must be positive");
    let analytic = gradient(loss_fn, params)?;
    let numeric = finite_difference_gradient_with(loss_fn, params, CHECK_FD_EPSILON, Stencil::Ridders)?;
    let mut checks = Vec::new();
    for (name, g) in analytic.iter() {
        if params.is_frozen(name) {
            continue;
        }
        let fd = numeric.get(name).expect("same names");
        let mut check = ParamCheck {
            name: name.to_string(),
            numel: g.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst: None,
            passed: true,
        };
        let mut worst_score = -1.0;
        for (i, (&a, &n)) in g.data().iter().zip(fd.data()).enumerate() {
            let diff = (a - n).abs();
            // Score each entry against its own tolerance so the worst one is reported.
            let score = if a.abs() > abs_tol {
                let rel = diff / a.abs().max(n.abs());
                check.max_rel_error = check.max_rel_error.max(rel);
                rel / rel_tol
            } else {
                check.max_abs_error = check.max_abs_error.max(diff);
                diff / abs_tol
            };
            if score > worst_score {
                worst_score = score;
                check.worst = Some((i, a, n));
            }
        }
        check.passed = check.max_rel_error <= rel_tol && check.max_abs_error <= abs_tol;
        checks.push(check);
    }
    let passed = checks.iter().all(|c| c.passed);
    Ok(CheckReport { params: checks, rel_tol, abs_tol, passed })
}
