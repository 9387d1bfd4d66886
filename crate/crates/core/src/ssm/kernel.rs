//! Fused selective-scan primitive: ZOH discretization, recurrence and
//! readout in one node, with a hand-derived reverse pass.
//!
//! Per batch `b`, channel `e` and state `n`:
//!
//! ```text
//! z      = delta[t,e] * a[e,n]
//! a_bar  = exp(z)
//! phi    = (exp(z) - 1) / a[e,n]          (-> delta as a -> 0)
//! h[t]   = a_bar * h[t-1] + phi * b[t,n] * u[t,e]
//! y[t,e] = sum_n c[t,n] * h[t]
//! ```

use crate::error::{shape_err, Result};
use crate::ndtensor::{Element, Tensor};

/// Below this `|delta * a|` the ZOH input gain uses its Taylor series.
pub const SERIES_THRESHOLD: f64 = 1e-6;

/// `(exp(z), expm1(z))` with one transcendental call. `1 + expm1(z)` is
/// accurate for `|z| <= 1`; beyond that `exp(z) - 1` has no cancellation.
#[inline]
fn exps<T: Element>(z: T) -> (T, T) {
    if z.abs() > T::one() {
        let e = z.exp();
        (e, e - T::one())
    } else {
        let m = z.exp_m1();
        (m + T::one(), m)
    }
}

#[inline]
fn phi_of<T: Element>(a: T, delta: T, z: T, em1: T) -> T {
    if z.abs().as_f64() < SERIES_THRESHOLD {
        let half = T::from_f64(0.5);
        let sixth = T::from_f64(1.0 / 6.0);
        delta * (T::one() + z * half + z * z * sixth)
    } else {
        em1 / a
    }
}

/// `(a_bar, phi)` with `b_bar = phi * b`.
#[inline]
pub fn zoh<T: Element>(a: T, delta: T) -> (T, T) {
    let z = delta * a;
    let (a_bar, em1) = exps(z);
    (a_bar, phi_of(a, delta, z, em1))
}

/// `d phi / d a = delta^2 * psi(z)`, `psi(z) = (z e^z - (e^z - 1)) / z^2`.
#[inline]
fn psi<T: Element>(z: T, em1: T) -> T {
    if z.abs().as_f64() < 1e-2 {
        let c = |v: f64| T::from_f64(v);
        c(0.5) + z * (c(1.0 / 3.0) + z * (c(1.0 / 8.0) + z * (c(1.0 / 30.0) + z * c(1.0 / 144.0))))
    } else {
        (em1 * (z - T::one()) + z) / (z * z)
    }
}

struct Dims {
    batch: usize,
    len: usize,
    inner: usize,
    state: usize,
}

fn dims<T: Element>(
    u: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
) -> Result<Dims> {
    if u.ndim() != 3 || a.ndim() != 2 {
        return shape_err(format!(
            "selective_scan expects u [B,L,E] and a [E,N]; got {:?}, {:?}",
            u.shape(),
            a.shape()
        ));
    }
    let (batch, len, inner) = (u.shape()[0], u.shape()[1], u.shape()[2]);
    let state = a.shape()[1];
    if delta.shape() != u.shape()
        || a.shape()[0] != inner
        || b.shape() != [batch, len, state]
        || c.shape() != [batch, len, state]
    {
        return shape_err(format!(
            "selective_scan shapes disagree: u {:?}, delta {:?}, a {:?}, b {:?}, c {:?}",
            u.shape(),
            delta.shape(),
            a.shape(),
            b.shape(),
            c.shape()
        ));
    }
    Ok(Dims {
        batch,
        len,
        inner,
        state,
    })
}

/// Per-element discretization cache: `a_bar` and `expm1(delta * a)`.
struct Discretized<T> {
    a_bar: Vec<T>,
    em1: Vec<T>,
}

/// Runs the recurrence sequentially and returns every state `h[b,t,e,n]`,
/// plus the discretization when `keep` is set.
fn states<T: Element>(d: &Dims, u: &[T], delta: &[T], a: &[T], b: &[T], keep: bool) -> (Vec<T>, Option<Discretized<T>>) {
    let (l, e, n) = (d.len, d.inner, d.state);
    let total = d.batch * l * e * n;
    let mut hs = vec![T::zero(); total];
    let mut cache = keep.then(|| Discretized {
        a_bar: vec![T::zero(); total],
        em1: vec![T::zero(); total],
    });
    for bi in 0..d.batch {
        for t in 0..l {
            let row = bi * l + t;
            let (prev, cur) = hs.split_at_mut(row * e * n);
            let cur = &mut cur[..e * n];
            let prev = (t > 0).then(|| &prev[(row - 1) * e * n..]);
            for ei in 0..e {
                let ue = u[row * e + ei];
                let de = delta[row * e + ei];
                for ni in 0..n {
                    let av = a[ei * n + ni];
                    let z = de * av;
                    let (a_bar, em1) = exps(z);
                    let phi = phi_of(av, de, z, em1);
                    let bx = phi * b[row * n + ni] * ue;
                    let hp = prev.map_or(T::zero(), |p| p[ei * n + ni]);
                    cur[ei * n + ni] = a_bar * hp + bx;
                    if let Some(c) = cache.as_mut() {
                        let at = (row * e + ei) * n + ni;
                        c.a_bar[at] = a_bar;
                        c.em1[at] = em1;
                    }
                }
            }
        }
    }
    (hs, cache)
}

/// Associative combine for the affine recurrence: `first` then `second`.
#[inline]
pub fn combine<T: Element>(first: (T, T), second: (T, T)) -> (T, T) {
    (first.0 * second.0, second.0 * first.1 + second.1)
}

/// In-place inclusive scan with [`combine`], Blelloch up/down sweep over a
/// power-of-two padded buffer.
pub fn blelloch_inclusive<T: Element>(xs: &mut [(T, T)]) {
    let n = xs.len();
    if n <= 1 {
        return;
    }
    let size = n.next_power_of_two();
    let identity = (T::one(), T::zero());
    let mut buf = xs.to_vec();
    buf.resize(size, identity);
    let mut stride = 1;
    while stride < size {
        let mut i = 2 * stride - 1;
        while i < size {
            buf[i] = combine(buf[i - stride], buf[i]);
            i += 2 * stride;
        }
        stride *= 2;
    }
    buf[size - 1] = identity;
    stride = size / 2;
    while stride >= 1 {
        let mut i = 2 * stride - 1;
        while i < size {
            let left = buf[i - stride];
            buf[i - stride] = buf[i];
            buf[i] = combine(buf[i], left);
            i += 2 * stride;
        }
        stride /= 2;
    }
    // buf now holds exclusive prefixes
    for (x, excl) in xs.iter_mut().zip(&buf) {
        *x = combine(*excl, *x);
    }
}

fn parallel_states<T: Element>(d: &Dims, u: &[T], delta: &[T], a: &[T], b: &[T]) -> Vec<T> {
    let (l, e, n) = (d.len, d.inner, d.state);
    let mut hs = vec![T::zero(); d.batch * l * e * n];
    let mut seq = Vec::with_capacity(l);
    for bi in 0..d.batch {
        for ei in 0..e {
            for ni in 0..n {
                seq.clear();
                for t in 0..l {
                    let row = bi * l + t;
                    let (a_bar, phi) = zoh(a[ei * n + ni], delta[row * e + ei]);
                    seq.push((a_bar, phi * b[row * n + ni] * u[row * e + ei]));
                }
                blelloch_inclusive(&mut seq);
                for (t, &(_, h)) in seq.iter().enumerate() {
                    hs[((bi * l + t) * e + ei) * n + ni] = h;
                }
            }
        }
    }
    hs
}

pub fn forward<T: Element>(
    u: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    parallel: bool,
) -> Result<Tensor<T>> {
    let d = dims(u, delta, a, b, c)?;
    if delta.data().iter().any(|v| *v <= T::zero()) {
        return Err(crate::Error::InvalidArgument(
            "selective_scan requires delta > 0".into(),
        ));
    }
    let hs = if parallel {
        parallel_states(&d, u.data(), delta.data(), a.data(), b.data())
    } else {
        states(&d, u.data(), delta.data(), a.data(), b.data(), false).0
    };
    let (l, e, n) = (d.len, d.inner, d.state);
    let cd = c.data();
    let mut y = vec![T::zero(); u.numel()];
    for row in 0..d.batch * l {
        let crow = &cd[row * n..(row + 1) * n];
        for ei in 0..e {
            let h = &hs[(row * e + ei) * n..(row * e + ei + 1) * n];
            y[row * e + ei] = h.iter().zip(crow).map(|(&hv, &cv)| cv * hv).sum();
        }
    }
    Tensor::new(u.shape().to_vec(), y)
}

/// Gradients w.r.t. `(u, delta, a, b, c)`.
pub fn backward<T: Element>(
    u: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    g: &[T],
) -> Result<Vec<Vec<T>>> {
    let d = dims(u, delta, a, b, c)?;
    let (l, e, n) = (d.len, d.inner, d.state);
    let (ud, dd, ad, bd, cd) = (u.data(), delta.data(), a.data(), b.data(), c.data());
    let (hs, cache) = states(&d, ud, dd, ad, bd, true);
    let cache = cache.expect("kept");
    let mut du = vec![T::zero(); ud.len()];
    let mut ddelta = vec![T::zero(); dd.len()];
    let mut da = vec![T::zero(); ad.len()];
    let mut db = vec![T::zero(); bd.len()];
    let mut dc = vec![T::zero(); cd.len()];
    let mut gh = vec![T::zero(); e * n];
    for bi in 0..d.batch {
        gh.iter_mut().for_each(|v| *v = T::zero());
        for t in (0..l).rev() {
            let row = bi * l + t;
            for ei in 0..e {
                let gy = g[row * e + ei];
                let ue = ud[row * e + ei];
                let de = dd[row * e + ei];
                let mut du_acc = T::zero();
                let mut dde_acc = T::zero();
                for ni in 0..n {
                    let k = ei * n + ni;
                    let av = ad[k];
                    let bv = bd[row * n + ni];
                    let cv = cd[row * n + ni];
                    let h_t = hs[(row * e + ei) * n + ni];
                    let h_prev = if t > 0 {
                        hs[((row - 1) * e + ei) * n + ni]
                    } else {
                        T::zero()
                    };
                    let mut ghv = gh[k] + gy * cv;
                    dc[row * n + ni] += gy * h_t;
                    let at = (row * e + ei) * n + ni;
                    let (a_bar, em1) = (cache.a_bar[at], cache.em1[at]);
                    let z = de * av;
                    let phi = phi_of(av, de, z, em1);
                    let d_abar = ghv * h_prev;
                    du_acc += ghv * phi * bv;
                    db[row * n + ni] += ghv * phi * ue;
                    let dphi = ghv * bv * ue;
                    dde_acc += (d_abar * av + dphi) * a_bar;
                    da[k] += d_abar * a_bar * de + dphi * de * de * psi(z, em1);
                    ghv *= a_bar;
                    gh[k] = ghv;
                }
                du[row * e + ei] += du_acc;
                ddelta[row * e + ei] += dde_acc;
            }
        }
    }
    Ok(vec![du, ddelta, da, db, dc])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psi_series_meets_closed_form() {
        for &z in &[-0.0099f64, -0.0101, 0.0099, 0.0101, -0.5] {
            let closed = (z * z.exp() - z.exp_m1()) / (z * z);
            assert!((psi(z, z.exp_m1()) - closed).abs() < 1e-10, "z={z}");
        }
    }

    #[test]
    fn blelloch_matches_fold() {
        let xs: Vec<(f64, f64)> = (0..13).map(|i| (0.5 + 0.03 * i as f64, (i as f64).sin())).collect();
        let mut scanned = xs.clone();
        blelloch_inclusive(&mut scanned);
        let mut h = 0.0;
        for (i, &(a, b)) in xs.iter().enumerate() {
            h = a * h + b;
            assert!((scanned[i].1 - h).abs() < 1e-14);
        }
    }

    #[test]
    fn two_step_operator() {
        let (a1, b1, a2, b2) = (0.3f64, 0.7, 0.9, -0.2);
        let mut xs = [(a1, b1), (a2, b2)];
        blelloch_inclusive(&mut xs);
        assert_eq!(xs[1].1, a2 * (a1 * 0.0 + b1) + b2);
    }
}
