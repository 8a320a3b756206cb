//! Diagonal selective state-space model: zero-order-hold discretization, the
//! recurrent scan, the LTI convolution-kernel form and bidirectional
//! composition.
//!
//! Every channel `d` owns `N` independent diagonal states. With
//! `z = Δ[t,d]·A[d,n]` the ZOH step is
//!
//! ```text
//! Ā[t,d,n] = exp(z)
//! B̄[t,d,n] = Δ[t,d] · φ(z) · B[t,n],   φ(z) = (eᶻ − 1) / z
//! h[t]     = Ā[t] ⊙ h[t−1] + B̄[t] · x[t]
//! y[t,d]   = Σₙ C[t,n]·h[t,d,n] + D[d]·x[t,d]
//! ```

use crate::error::{contract, ensure, Result};
use crate::tensor_grad::{Graph, Primitive, Tensor, Var};

/// Below this magnitude `φ(z)` switches to its series expansion.
const PHI_SERIES_CUTOFF: f64 = 1e-8;

/// `(eᶻ − 1)/z`, continuous through `z = 0`.
pub fn phi(z: f64) -> f64 {
    if z.abs() < PHI_SERIES_CUTOFF {
        1.0 + 0.5 * z
    } else {
        z.exp_m1() / z
    }
}

/// `dφ/dz`.
pub fn phi_prime(z: f64) -> f64 {
    if z.abs() < 0.1 {
        // Σ_{k≥1} k z^{k−1} / (k+1)!
        let mut sum = 0.0;
        let mut zp = 1.0;
        let mut fact = 2.0;
        for k in 1..=12 {
            sum += k as f64 * zp / fact;
            zp *= z;
            fact *= (k + 2) as f64;
        }
        sum
    } else {
        let em1 = z.exp_m1();
        (z * em1 + z - em1) / (z * z)
    }
}

/// `φ'(z)` given `eᶻ` and `φ(z)`: `(eᶻ − φ)/z` away from zero.
/// Below `1e-3` the cancellation costs more than five series terms.
#[inline]
fn phi_prime_from(z: f64, exp_z: f64, phi_z: f64) -> f64 {
    if z.abs() < 1e-3 {
        // 1/2 + z/3 + z²/8 + z³/30 + z⁴/144
        0.5 + z * (1.0 / 3.0 + z * (0.125 + z * (1.0 / 30.0 + z * (1.0 / 144.0))))
    } else {
        (exp_z - phi_z) / z
    }
}

/// ZOH coefficients `(Ā, Δ·φ(ΔA))` for one `(Δ, A)` pair.
#[inline]
pub fn zoh_coefficients(delta: f64, a: f64) -> (f64, f64) {
    let z = delta * a;
    (z.exp(), delta * phi(z))
}

/// Continuous-time selective parameters of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveSSMParams {
    /// `D × N`, strictly negative.
    pub a: Tensor,
    /// `L × N`.
    pub b_seq: Tensor,
    /// `L × N`.
    pub c_seq: Tensor,
    /// `D`.
    pub d_skip: Tensor,
    /// `L × D`, strictly positive.
    pub delta_seq: Tensor,
}

impl SelectiveSSMParams {
    pub fn channels(&self) -> usize {
        self.a.rows()
    }

    pub fn states(&self) -> usize {
        self.a.cols()
    }

    pub fn len(&self) -> usize {
        self.delta_seq.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks shapes and the sign constraints on `A` and `Δ`.
    pub fn validate(&self) -> Result<()> {
        let (d, n) = self.a.dims2()?;
        let (l, dd) = self.delta_seq.dims2()?;
        ensure!(dd == d, "delta has {dd} channels, A has {d}");
        ensure!(self.b_seq.shape() == [l, n], "B_seq shape {:?} != [{l}, {n}]", self.b_seq.shape());
        ensure!(self.c_seq.shape() == [l, n], "C_seq shape {:?} != [{l}, {n}]", self.c_seq.shape());
        ensure!(self.d_skip.shape() == [d], "D_skip shape {:?} != [{d}]", self.d_skip.shape());
        if let Some(i) = self.a.data().iter().position(|&v| v >= 0.0) {
            return Err(contract(format!(
                "A must be strictly negative; A[{}, {}] = {}",
                i / n,
                i % n,
                self.a.data()[i]
            )));
        }
        if let Some(i) = self.delta_seq.data().iter().position(|&v| v <= 0.0) {
            return Err(contract(format!(
                "delta must be strictly positive; delta[{}, {}] = {}",
                i / d,
                i % d,
                self.delta_seq.data()[i]
            )));
        }
        Ok(())
    }

    /// True when `B`, `C` and `Δ` are identical at every timestep.
    pub fn is_time_invariant(&self) -> bool {
        let constant = |t: &Tensor| (1..t.rows()).all(|r| t.row(r) == t.row(0));
        constant(&self.b_seq) && constant(&self.c_seq) && constant(&self.delta_seq)
    }
}

/// Discretized transition and input coefficients, `L × D × N` each.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSSMParams {
    pub a_bar: Tensor,
    pub b_bar: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    /// `D × N`.
    pub h: Tensor,
}

impl HiddenState {
    pub fn zeros(channels: usize, states: usize) -> Self {
        Self { h: Tensor::zeros(&[channels, states]) }
    }
}

pub fn discretize_zoh(params: &SelectiveSSMParams) -> Result<DiscreteSSMParams> {
    params.validate()?;
    let (l, d, n) = (params.len(), params.channels(), params.states());
    let mut a_bar = Vec::with_capacity(l * d * n);
    let mut b_bar = Vec::with_capacity(l * d * n);
    for t in 0..l {
        let b_row = params.b_seq.row(t);
        for ch in 0..d {
            let delta = params.delta_seq.at2(t, ch);
            for (s, &b) in b_row.iter().enumerate() {
                let (ab, coef) = zoh_coefficients(delta, params.a.at2(ch, s));
                a_bar.push(ab);
                b_bar.push(coef * b);
            }
        }
    }
    Ok(DiscreteSSMParams {
        a_bar: Tensor::from_parts(vec![l, d, n], a_bar),
        b_bar: Tensor::from_parts(vec![l, d, n], b_bar),
    })
}

/// Left-to-right recurrence from `h0`. Returns the output and the final state.
pub fn scan_recurrent(
    disc: &DiscreteSSMParams,
    c_seq: &Tensor,
    d_skip: &Tensor,
    x: &Tensor,
    h0: &HiddenState,
) -> Result<(Tensor, HiddenState)> {
    let (l, d, n) = match disc.a_bar.shape() {
        [l, d, n] => (*l, *d, *n),
        s => return Err(contract(format!("A_bar must be L×D×N, got {s:?}"))),
    };
    ensure!(disc.b_bar.shape() == disc.a_bar.shape(), "A_bar and B_bar shapes differ");
    ensure!(x.shape() == [l, d], "x shape {:?} != [{l}, {d}]", x.shape());
    ensure!(c_seq.shape() == [l, n], "C_seq shape {:?} != [{l}, {n}]", c_seq.shape());
    ensure!(d_skip.shape() == [d], "D_skip shape {:?} != [{d}]", d_skip.shape());
    ensure!(h0.h.shape() == [d, n], "h0 shape {:?} != [{d}, {n}]", h0.h.shape());
    let mut h = h0.h.data().to_vec();
    let mut y = vec![0.0; l * d];
    for t in 0..l {
        let c_row = c_seq.row(t);
        for ch in 0..d {
            let xv = x.at2(t, ch);
            let base = (t * d + ch) * n;
            let mut acc = 0.0;
            for s in 0..n {
                let hs = &mut h[ch * n + s];
                *hs = disc.a_bar.data()[base + s] * *hs + disc.b_bar.data()[base + s] * xv;
                acc += c_row[s] * *hs;
            }
            y[t * d + ch] = acc + d_skip.data()[ch] * xv;
        }
    }
    Ok((Tensor::from_parts(vec![l, d], y), HiddenState { h: Tensor::from_parts(vec![d, n], h) }))
}

/// Discretize-then-scan from a zero state.
pub fn selective_scan(params: &SelectiveSSMParams, x: &Tensor) -> Result<Tensor> {
    let disc = discretize_zoh(params)?;
    let h0 = HiddenState::zeros(params.channels(), params.states());
    scan_recurrent(&disc, &params.c_seq, &params.d_skip, x, &h0).map(|(y, _)| y)
}

/// Convolution kernel `K̄[m, d] = Σₙ C[n]·Ā[d,n]^m·B̄[d,n]` for `m < len`.
pub fn convolution_kernel(params: &SelectiveSSMParams, len: usize) -> Result<Tensor> {
    params.validate()?;
    ensure!(params.is_time_invariant(), "convolution kernel requires time-invariant B, C and delta");
    let (d, n) = (params.channels(), params.states());
    let mut k = vec![0.0; len * d];
    for ch in 0..d {
        let delta = params.delta_seq.at2(0, ch);
        for s in 0..n {
            let (ab, coef) = zoh_coefficients(delta, params.a.at2(ch, s));
            let mut term = params.c_seq.at2(0, s) * coef * params.b_seq.at2(0, s);
            for m in 0..len {
                k[m * d + ch] += term;
                term *= ab;
            }
        }
    }
    Ok(Tensor::from_parts(vec![len, d], k))
}

/// `y = x ∗ K̄ + D·x` for a time-invariant system started from rest.
pub fn kernel_convolution(params: &SelectiveSSMParams, x: &Tensor) -> Result<Tensor> {
    let (l, d) = x.dims2()?;
    ensure!(params.len() == l && params.channels() == d, "x shape {:?} does not match params", x.shape());
    let k = convolution_kernel(params, l)?;
    let mut y = vec![0.0; l * d];
    for t in 0..l {
        for ch in 0..d {
            let mut acc = 0.0;
            for m in 0..=t {
                acc += k.at2(m, ch) * x.at2(t - m, ch);
            }
            y[t * d + ch] = acc + params.d_skip.data()[ch] * x.at2(t, ch);
        }
    }
    Ok(Tensor::from_parts(vec![l, d], y))
}

/// Forward scan plus the time-reversed scan of the time-reversed input.
pub fn scan_bidirectional(fwd: &SelectiveSSMParams, bwd: &SelectiveSSMParams, x: &Tensor) -> Result<Tensor> {
    ensure!(
        fwd.len() == bwd.len() && fwd.channels() == bwd.channels(),
        "forward and backward parameters disagree on L or D"
    );
    let forward = selective_scan(fwd, x)?;
    let backward = selective_scan(bwd, &x.reverse_rows())?.reverse_rows();
    forward.zip_map(&backward, |a, b| a + b)
}

// ---- differentiable fused scan ----------------------------------------------

/// Optional pieces of a [`scan_node`] call.
#[derive(Clone, Copy, Debug, Default)]
pub struct ScanOptions {
    /// `L × D` additive modulation of the continuous `A` (broadcast over states).
    pub a_mod: Option<Var>,
    /// Per-channel skip `D`.
    pub d_skip: Option<Var>,
    /// Upper bound on `Δ·A`; entries above it are clamped (zero gradient in `z`).
    pub clamp_max: Option<f64>,
}

struct SelectiveScanOp {
    has_mod: bool,
    has_skip: bool,
    clamp_max: Option<f64>,
    dims: (usize, usize, usize),
    /// States `h[0..=L]`, `h[0] = 0`.
    states: Vec<f64>,
    /// `exp(z)` and `φ(z)` per `(t, ch, s)`.
    a_bar: Vec<f64>,
    phi: Vec<f64>,
}

struct ScanView<'a> {
    x: &'a [f64],
    delta: &'a [f64],
    a: &'a [f64],
    b: &'a [f64],
    c: &'a [f64],
    a_mod: Option<&'a [f64]>,
    d_skip: Option<&'a [f64]>,
}

impl SelectiveScanOp {
    fn view<'a>(&self, inputs: &[&'a Tensor]) -> ScanView<'a> {
        let mut i = 5;
        let a_mod = self.has_mod.then(|| {
            i += 1;
            inputs[i - 1].data()
        });
        let d_skip = self.has_skip.then(|| inputs[i].data());
        ScanView {
            x: inputs[0].data(),
            delta: inputs[1].data(),
            a: inputs[2].data(),
            b: inputs[3].data(),
            c: inputs[4].data(),
            a_mod,
            d_skip,
        }
    }

    /// Returns `(z, clamped)` for step `t`, channel `ch`, state `s`.
    #[inline]
    fn z(&self, v: &ScanView, t: usize, ch: usize, s: usize) -> (f64, bool) {
        let (_, d, n) = self.dims;
        let delta = v.delta[t * d + ch];
        let a = v.a[ch * n + s] + v.a_mod.map_or(0.0, |m| m[t * d + ch]);
        let z = delta * a;
        match self.clamp_max {
            Some(max) if z > max => (max, true),
            _ => (z, false),
        }
    }
}

impl Primitive for SelectiveScanOp {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (l, d) = inputs[0].dims2()?;
        let (ad, n) = inputs[2].dims2()?;
        ensure!(ad == d, "selective_scan: A has {ad} channels, x has {d}");
        ensure!(inputs[1].shape() == [l, d], "selective_scan: delta shape {:?}", inputs[1].shape());
        ensure!(inputs[3].shape() == [l, n], "selective_scan: B shape {:?}", inputs[3].shape());
        ensure!(inputs[4].shape() == [l, n], "selective_scan: C shape {:?}", inputs[4].shape());
        let mut i = 5;
        if self.has_mod {
            ensure!(inputs[i].shape() == [l, d], "selective_scan: A modulation shape {:?}", inputs[i].shape());
            i += 1;
        }
        if self.has_skip {
            ensure!(inputs[i].shape() == [d], "selective_scan: D_skip shape {:?}", inputs[i].shape());
        }
        self.dims = (l, d, n);
        let v = self.view(inputs);
        let mut states = vec![0.0; (l + 1) * d * n];
        let mut a_bar = vec![0.0; l * d * n];
        let mut phis = vec![0.0; l * d * n];
        let mut y = vec![0.0; l * d];
        for t in 0..l {
            let (prev, next) = states.split_at_mut((t + 1) * d * n);
            let prev = &prev[t * d * n..];
            for ch in 0..d {
                let xv = v.x[t * d + ch];
                let delta = v.delta[t * d + ch];
                let mut acc = 0.0;
                for s in 0..n {
                    let (z, _) = self.z(&v, t, ch, s);
                    let ab = z.exp();
                    let ph = phi(z);
                    let bb = delta * ph * v.b[t * n + s];
                    let h = ab * prev[ch * n + s] + bb * xv;
                    a_bar[(t * d + ch) * n + s] = ab;
                    phis[(t * d + ch) * n + s] = ph;
                    next[ch * n + s] = h;
                    acc += v.c[t * n + s] * h;
                }
                y[t * d + ch] = acc + v.d_skip.map_or(0.0, |ds| ds[ch] * xv);
            }
        }
        self.states = states;
        self.a_bar = a_bar;
        self.phi = phis;
        Ok(Tensor::from_parts(vec![l, d], y))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, gy: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (l, d, n) = self.dims;
        let v = self.view(inputs);
        let mut gx = vec![0.0; l * d];
        let mut gdelta = vec![0.0; l * d];
        let mut ga = vec![0.0; d * n];
        let mut gb = vec![0.0; l * n];
        let mut gc = vec![0.0; l * n];
        let mut gmod = vec![0.0; if self.has_mod { l * d } else { 0 }];
        let mut gskip = vec![0.0; if self.has_skip { d } else { 0 }];
        let mut gh = vec![0.0; d * n];
        for t in (0..l).rev() {
            let h_t = &self.states[(t + 1) * d * n..(t + 2) * d * n];
            let h_prev = &self.states[t * d * n..(t + 1) * d * n];
            let b_t = &v.b[t * n..(t + 1) * n];
            let c_t = &v.c[t * n..(t + 1) * n];
            for ch in 0..d {
                let td = t * d + ch;
                let g = gy[td];
                let xv = v.x[td];
                let delta = v.delta[td];
                if let Some(ds) = v.d_skip {
                    gx[td] += g * ds[ch];
                    gskip[ch] += g * xv;
                }
                let a_shift = v.a_mod.map_or(0.0, |m| m[td]);
                let a_row = &v.a[ch * n..(ch + 1) * n];
                let ab_row = &self.a_bar[td * n..(td + 1) * n];
                let ph_row = &self.phi[td * n..(td + 1) * n];
                let gh_row = &mut gh[ch * n..(ch + 1) * n];
                let ga_row = &mut ga[ch * n..(ch + 1) * n];
                let gc_t = &mut gc[t * n..(t + 1) * n];
                let gb_t = &mut gb[t * n..(t + 1) * n];
                let (mut gx_acc, mut gdelta_acc, mut gmod_acc) = (0.0, 0.0, 0.0);
                for s in 0..n {
                    gc_t[s] += g * h_t[ch * n + s];
                    let ghs = gh_row[s] + g * c_t[s];
                    let (ab, ph, bv) = (ab_row[s], ph_row[s], b_t[s]);
                    let g_ab = ghs * h_prev[ch * n + s];
                    let g_bb = ghs * xv;
                    gx_acc += ghs * delta * ph * bv;
                    gb_t[s] += g_bb * delta * ph;
                    gdelta_acc += g_bb * ph * bv;
                    let a_n = a_row[s] + a_shift;
                    let z = delta * a_n;
                    let clamped = matches!(self.clamp_max, Some(max) if z > max);
                    if !clamped {
                        let gz = g_ab * ab + g_bb * delta * bv * phi_prime_from(z, ab, ph);
                        gdelta_acc += gz * a_n;
                        ga_row[s] += gz * delta;
                        gmod_acc += gz * delta;
                    }
                    gh_row[s] = ghs * ab;
                }
                gx[td] += gx_acc;
                gdelta[td] += gdelta_acc;
                if self.has_mod {
                    gmod[td] += gmod_acc;
                }
            }
        }
        let mut out = vec![
            needs[0].then_some(gx),
            needs[1].then_some(gdelta),
            needs[2].then_some(ga),
            needs[3].then_some(gb),
            needs[4].then_some(gc),
        ];
        let mut i = 5;
        if self.has_mod {
            out.push(needs[i].then_some(gmod));
            i += 1;
        }
        if self.has_skip {
            out.push(needs[i].then_some(gskip));
        }
        out
    }
}

/// Differentiable selective scan from a zero state.
///
/// `x, delta: L×D`, `a: D×N` (continuous, negative), `b, c: L×N`.
pub fn scan_node(g: &mut Graph, x: Var, delta: Var, a: Var, b: Var, c: Var, opts: ScanOptions) -> Result<Var> {
    let mut inputs = vec![x, delta, a, b, c];
    inputs.extend(opts.a_mod);
    inputs.extend(opts.d_skip);
    let op = SelectiveScanOp {
        has_mod: opts.a_mod.is_some(),
        has_skip: opts.d_skip.is_some(),
        clamp_max: opts.clamp_max,
        dims: (0, 0, 0),
        states: Vec::new(),
        a_bar: Vec::new(),
        phi: Vec::new(),
    };
    g.apply(Box::new(op), &inputs)
}
