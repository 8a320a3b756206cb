//! One-level orthonormal Haar transform along the time axis.
//!
//! Odd-length inputs are right-padded by replicating the last frame; the
//! inverse crops the pad frame back off using the recorded original length.

use std::f64::consts::FRAC_1_SQRT_2;

use crate::error::{ensure, Result};
use crate::tensor_grad::{Graph, Primitive, Tensor, Var};

/// Approximation and detail coefficients of a `(L × D)` sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct FreqBands {
    pub low: Tensor,
    pub high: Tensor,
    pub original_length: usize,
}

impl FreqBands {
    pub fn new(low: Tensor, high: Tensor, original_length: usize) -> Result<Self> {
        ensure!(
            low.shape() == high.shape(),
            "band extents differ: {:?} vs {:?}",
            low.shape(),
            high.shape()
        );
        let (half, _) = low.dims2()?;
        ensure!(
            original_length.div_ceil(2) == half && original_length >= 2,
            "original length {original_length} is inconsistent with {half} coefficient frames"
        );
        Ok(Self { low, high, original_length })
    }

    /// Squared norm of both bands.
    pub fn energy(&self) -> (f64, f64) {
        (self.low.sum_sq(), self.high.sum_sq())
    }
}

fn pair(x: &[f64], l: usize, d: usize, k: usize) -> (&[f64], &[f64]) {
    let a = &x[2 * k * d..(2 * k + 1) * d];
    // Odd lengths replicate the last frame.
    let b = if 2 * k + 1 < l { &x[(2 * k + 1) * d..(2 * k + 2) * d] } else { a };
    (a, b)
}

fn split(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>, usize, usize)> {
    let (l, d) = x.dims2()?;
    ensure!(l >= 2, "the Haar transform needs at least 2 frames, got {l}");
    let half = l.div_ceil(2);
    let mut low = Vec::with_capacity(half * d);
    let mut high = Vec::with_capacity(half * d);
    for k in 0..half {
        let (a, b) = pair(x.data(), l, d, k);
        for c in 0..d {
            low.push((a[c] + b[c]) * FRAC_1_SQRT_2);
            high.push((a[c] - b[c]) * FRAC_1_SQRT_2);
        }
    }
    Ok((low, high, half, d))
}

/// Forward transform: `low[k] = (x[2k] + x[2k+1])/√2`, `high[k] = (x[2k] − x[2k+1])/√2`.
pub fn dwt_haar(x: &Tensor) -> Result<FreqBands> {
    let (low, high, half, d) = split(x)?;
    Ok(FreqBands {
        low: Tensor::from_parts(vec![half, d], low),
        high: Tensor::from_parts(vec![half, d], high),
        original_length: x.rows(),
    })
}

fn merge(low: &[f64], high: &[f64], half: usize, d: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; 2 * half * d];
    for k in 0..half {
        for c in 0..d {
            let (lo, hi) = (low[k * d + c], high[k * d + c]);
            out[2 * k * d + c] = (lo + hi) * FRAC_1_SQRT_2;
            out[(2 * k + 1) * d + c] = (lo - hi) * FRAC_1_SQRT_2;
        }
    }
    out.truncate(len * d);
    out
}

/// Inverse transform, dropping the pad frame of odd-length originals.
pub fn idwt_haar(bands: &FreqBands) -> Result<Tensor> {
    let bands = FreqBands::new(bands.low.clone(), bands.high.clone(), bands.original_length)?;
    let (half, d) = bands.low.dims2()?;
    let len = bands.original_length;
    Ok(Tensor::from_parts(vec![len, d], merge(bands.low.data(), bands.high.data(), half, d, len)))
}

/// Frame repetition from `ceil(L/2)` frames back to `L`.
pub fn upsample_repeat(x: &Tensor, len: usize) -> Result<Tensor> {
    let (half, d) = x.dims2()?;
    ensure!(len.div_ceil(2) == half, "cannot repeat {half} frames to length {len}");
    let mut out = Vec::with_capacity(len * d);
    for t in 0..len {
        out.extend_from_slice(x.row(t / 2));
    }
    Ok(Tensor::from_parts(vec![len, d], out))
}

// ---- graph primitives --------------------------------------------------------

struct HaarBand {
    high: bool,
}

impl Primitive for HaarBand {
    fn name(&self) -> &'static str {
        if self.high {
            "haar_high"
        } else {
            "haar_low"
        }
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (low, high, half, d) = split(inputs[0])?;
        Ok(Tensor::from_parts(vec![half, d], if self.high { high } else { low }))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (l, d) = (inputs[0].rows(), inputs[0].cols());
        let half = l.div_ceil(2);
        let sign = if self.high { -1.0 } else { 1.0 };
        let mut gx = vec![0.0; l * d];
        for k in 0..half {
            let b = if 2 * k + 1 < l { 2 * k + 1 } else { 2 * k };
            for c in 0..d {
                let gv = g[k * d + c] * FRAC_1_SQRT_2;
                gx[2 * k * d + c] += gv;
                gx[b * d + c] += sign * gv;
            }
        }
        vec![Some(gx)]
    }
}

struct HaarInverse {
    len: usize,
}

impl Primitive for HaarInverse {
    fn name(&self) -> &'static str {
        "haar_inverse"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let bands = FreqBands::new(inputs[0].clone(), inputs[1].clone(), self.len)?;
        idwt_haar(&bands)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (half, d) = (inputs[0].rows(), inputs[0].cols());
        let mut gl = vec![0.0; half * d];
        let mut gh = vec![0.0; half * d];
        for k in 0..half {
            for c in 0..d {
                let a = g[2 * k * d + c];
                let b = if 2 * k + 1 < self.len { g[(2 * k + 1) * d + c] } else { 0.0 };
                gl[k * d + c] = (a + b) * FRAC_1_SQRT_2;
                gh[k * d + c] = (a - b) * FRAC_1_SQRT_2;
            }
        }
        vec![Some(gl), Some(gh)]
    }
}

struct RepeatFrames {
    len: usize,
}

impl Primitive for RepeatFrames {
    fn name(&self) -> &'static str {
        "repeat_frames"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        upsample_repeat(inputs[0], self.len)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let d = inputs[0].cols();
        let mut gx = vec![0.0; inputs[0].len()];
        for t in 0..self.len {
            let k = t / 2;
            for c in 0..d {
                gx[k * d + c] += g[t * d + c];
            }
        }
        vec![Some(gx)]
    }
}

/// Graph form of [`dwt_haar`], returning `(low, high)` nodes.
pub fn dwt_node(g: &mut Graph, x: Var) -> Result<(Var, Var)> {
    let low = g.apply(Box::new(HaarBand { high: false }), &[x])?;
    let high = g.apply(Box::new(HaarBand { high: true }), &[x])?;
    Ok((low, high))
}

/// Graph form of [`idwt_haar`].
pub fn idwt_node(g: &mut Graph, low: Var, high: Var, original_length: usize) -> Result<Var> {
    g.apply(Box::new(HaarInverse { len: original_length }), &[low, high])
}

/// Graph form of [`upsample_repeat`].
pub fn repeat_node(g: &mut Graph, x: Var, len: usize) -> Result<Var> {
    g.apply(Box::new(RepeatFrames { len }), &[x])
}
