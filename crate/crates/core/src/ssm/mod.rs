//! State-space numerics: ZOH discretization, sequential and parallel
//! selective scans, and a convolution-kernel oracle for static parameters.

pub mod kernel;

use crate::error::{shape_err, Error, Result};
use crate::ndtensor::{Element, Op, Tape, Tensor, Var};
use crate::params::{Bound, Initializer, ParamId, ParamStore};

pub use kernel::SERIES_THRESHOLD;

/// Zero-order-hold discretization of one scalar mode.
///
/// Returns `(exp(delta a), (exp(delta a) - 1) / a * b)`; the second term
/// falls back to a series when `|delta a|` is tiny so `a == 0` is exact.
pub fn discretize_zoh(a: f64, b: f64, delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::InvalidArgument(format!("delta must be positive, got {delta}")));
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite input a={a}, b={b}")));
    }
    let (a_bar, phi) = kernel::zoh(a, delta);
    Ok((a_bar, phi * b))
}

/// Single-channel recurrence `h_t = a_bar_t * h_{t-1} + b_bar_t x_t`,
/// `y_t = C_t . h_t`, with `h_0 = 0`.
pub fn ssm_scan_sequential<T: Element>(
    x: &Tensor<T>,
    a_bar: &Tensor<T>,
    b_bar: &Tensor<T>,
    c: &Tensor<T>,
) -> Result<Tensor<T>> {
    if x.ndim() != 1 || a_bar.ndim() != 2 {
        return shape_err(format!(
            "ssm_scan_sequential expects x [L] and a_bar [L,N]; got {:?}, {:?}",
            x.shape(),
            a_bar.shape()
        ));
    }
    let (l, n) = (a_bar.shape()[0], a_bar.shape()[1]);
    if x.shape()[0] != l || b_bar.shape() != a_bar.shape() || c.shape() != a_bar.shape() {
        return shape_err(format!(
            "ssm_scan_sequential shapes disagree: x {:?}, a_bar {:?}, b_bar {:?}, C {:?}",
            x.shape(),
            a_bar.shape(),
            b_bar.shape(),
            c.shape()
        ));
    }
    let (ab, bb, cd) = (a_bar.data(), b_bar.data(), c.data());
    let mut h = vec![T::zero(); n];
    let mut y = Vec::with_capacity(l);
    for (t, &xt) in x.data().iter().enumerate() {
        let mut acc = T::zero();
        for k in 0..n {
            h[k] = ab[t * n + k] * h[k] + bb[t * n + k] * xt;
            acc += cd[t * n + k] * h[k];
        }
        y.push(acc);
    }
    Tensor::new(vec![l], y)
}

/// Static-parameter path: builds `K = (C.B, C.A B, ..., C.A^{L-1} B)` and
/// returns the causal convolution of `x` with it.
pub fn ssm_conv_oracle<T: Element>(
    a_bar: &Tensor<T>,
    b_bar: &Tensor<T>,
    c: &Tensor<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    if x.ndim() != 1 || x.numel() < 1 {
        return shape_err(format!("ssm_conv_oracle expects x [L] with L >= 1, got {:?}", x.shape()));
    }
    if a_bar.ndim() != 1 || b_bar.shape() != a_bar.shape() || c.shape() != a_bar.shape() {
        return shape_err(format!(
            "ssm_conv_oracle expects A, B, C of shape [N]; got {:?}, {:?}, {:?}",
            a_bar.shape(),
            b_bar.shape(),
            c.shape()
        ));
    }
    let l = x.numel();
    let mut power: Vec<T> = vec![T::one(); a_bar.numel()];
    let mut kernel = Vec::with_capacity(l);
    for _ in 0..l {
        kernel.push(
            power
                .iter()
                .zip(b_bar.data())
                .zip(c.data())
                .map(|((&p, &b), &cv)| cv * p * b)
                .sum::<T>(),
        );
        power.iter_mut().zip(a_bar.data()).for_each(|(p, &a)| *p *= a);
    }
    let xd = x.data();
    let y = (0..l)
        .map(|t| (0..=t).map(|k| kernel[k] * xd[t - k]).sum())
        .collect();
    Tensor::new(vec![l], y)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanMode {
    Sequential,
    Parallel,
}

/// Sizes of one selective-scan branch: inner channels, state size, Δ-rank.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SsmDims {
    pub inner: usize,
    pub state: usize,
    pub rank: usize,
}

impl SsmDims {
    pub fn new(inner: usize, state: usize, rank: usize) -> Result<Self> {
        if inner == 0 || state == 0 || rank == 0 {
            return Err(Error::InvalidArgument(format!(
                "ssm dims must be >= 1, got E={inner} N={state} R={rank}"
            )));
        }
        Ok(SsmDims { inner, state, rank })
    }

    pub fn param_count(&self) -> usize {
        let (e, n, r) = (self.inner, self.state, self.rank);
        e * n + e + e * (r + 2 * n) + r * e + e
    }
}

/// Handles to one branch's selective-scan parameters in a [`ParamStore`].
#[derive(Clone, Copy, Debug)]
pub struct SsmParams {
    pub dims: SsmDims,
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub w_x: ParamId,
    pub w_dt: ParamId,
    pub b_dt: ParamId,
}

/// `softplus^{-1}(y) = y + ln(1 - e^{-y})`.
fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl SsmParams {
    /// Registers parameters under `prefix`: `A = -(n+1)`, `D = 1`, uniform
    /// fan-in projections, and `softplus(b_dt)` uniform in `[0.001, 0.1]`.
    pub fn init<T: Element>(
        store: &mut ParamStore<T>,
        init: &Initializer,
        prefix: &str,
        dims: SsmDims,
    ) -> Result<Self> {
        let SsmDims { inner: e, state: n, rank: r } = dims;
        let a_log: Vec<f64> = (0..e * n).map(|i| ((i % n) as f64 + 1.0).ln()).collect();
        let a_log = store.add(format!("{prefix}.a_log"), Tensor::from_f64(vec![e, n], &a_log)?)?;
        let d_skip = store.add(format!("{prefix}.d_skip"), Tensor::full(vec![e], 1.0)?)?;
        let name = format!("{prefix}.w_x");
        let w_x = store.add(&name, init.uniform(&name, &[e, r + 2 * n], 1.0 / (e as f64).sqrt())?)?;
        let name = format!("{prefix}.w_dt");
        let w_dt = store.add(&name, init.uniform(&name, &[r, e], 1.0 / (r as f64).sqrt())?)?;
        let name = format!("{prefix}.b_dt");
        let dt: Tensor<f64> = init.uniform_range(&name, &[e], 0.001, 0.1)?;
        let b: Vec<f64> = dt.data().iter().map(|&v| inverse_softplus(v)).collect();
        let b_dt = store.add(&name, Tensor::from_f64(vec![e], &b)?)?;
        Ok(SsmParams {
            dims,
            a_log,
            d_skip,
            w_x,
            w_dt,
            b_dt,
        })
    }
}

/// Input-dependent quantities of one scan: `(delta, A, B, C)`.
pub struct ScanInputs {
    pub delta: Var,
    pub a: Var,
    pub b: Var,
    pub c: Var,
}

/// Projects `u [B,L,E]` to Δ, B and C and builds `A = -exp(A_log)`.
pub fn scan_inputs<T: Element>(tape: &Tape<T>, bound: &Bound, u: Var, p: &SsmParams) -> Result<ScanInputs> {
    let shape = tape.shape(u)?;
    let SsmDims { inner: e, state: n, rank: r } = p.dims;
    if shape.len() != 3 || shape[2] != e {
        return shape_err(format!("selective_scan expects u [B,L,{e}], got {shape:?}"));
    }
    let x_dbl = tape.matmul(u, bound.get(p.w_x))?;
    let dt_feat = tape.narrow(x_dbl, 2, 0, r)?;
    let b = tape.narrow(x_dbl, 2, r, n)?;
    let c = tape.narrow(x_dbl, 2, r + n, n)?;
    let dt = tape.matmul(dt_feat, bound.get(p.w_dt))?;
    let dt = tape.add(dt, bound.get(p.b_dt))?;
    let delta = tape.softplus(dt)?;
    let a = tape.exp(bound.get(p.a_log))?;
    let a = tape.neg(a)?;
    Ok(ScanInputs { delta, a, b, c })
}

fn run<T: Element>(tape: &Tape<T>, bound: &Bound, u: Var, p: &SsmParams, parallel: bool) -> Result<Var> {
    let s = scan_inputs(tape, bound, u, p)?;
    let y = tape.apply(Op::SelectiveScan { parallel }, &[u, s.delta, s.a, s.b, s.c])?;
    let skip = tape.mul(u, bound.get(p.d_skip))?;
    tape.add(y, skip)
}

/// `y = scan(u) + D ⊙ u` over `u [B,L,E]`, using the sequential recurrence.
pub fn selective_scan<T: Element>(tape: &Tape<T>, bound: &Bound, u: Var, p: &SsmParams) -> Result<Var> {
    run(tape, bound, u, p, false)
}

/// Same result as [`selective_scan`] through an associative up/down sweep.
pub fn selective_scan_parallel<T: Element>(tape: &Tape<T>, bound: &Bound, u: Var, p: &SsmParams) -> Result<Var> {
    run(tape, bound, u, p, true)
}

pub fn selective_scan_with<T: Element>(
    tape: &Tape<T>,
    bound: &Bound,
    u: Var,
    p: &SsmParams,
    mode: ScanMode,
) -> Result<Var> {
    run(tape, bound, u, p, mode == ScanMode::Parallel)
}
