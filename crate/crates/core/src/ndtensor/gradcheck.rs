//! Central finite-difference gradient verification.

use super::tape::{Tape, Var};
use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

/// Finite-difference settings. `max_elems_per_param` limits the number of
/// probed coordinates per tensor (evenly spaced) for large parameter sets.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub eps: f64,
    pub tol: f64,
    pub max_elems_per_param: Option<usize>,
}

impl GradCheck {
    pub fn new(eps: f64, tol: f64) -> Self {
        GradCheck {
            eps,
            tol,
            max_elems_per_param: None,
        }
    }

    pub fn sampled(mut self, per_param: usize) -> Self {
        self.max_elems_per_param = Some(per_param.max(1));
        self
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (parameter index, element index) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub pass: bool,
}

fn eval_loss<T: Element, F>(f: &F, params: &[Tensor<T>]) -> Result<f64>
where
    F: Fn(&Tape<T>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&tape, &vars)?;
    let v = tape.value(out)?;
    if v.numel() != 1 {
        return Err(Error::InvalidArgument(format!(
            "grad_check function must return a scalar, got shape {:?}",
            v.shape()
        )));
    }
    let x = v.data()[0].as_f64();
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "grad_check".into() });
    }
    Ok(x)
}

/// Compares tape gradients of `f` against central differences
/// `(f(p + eps e_i) - f(p - eps e_i)) / (2 eps)` with
/// `rel = |a - n| / (|a| + |n| + 1e-12)`.
pub fn grad_check<T: Element, F>(f: F, params: &[Tensor<T>], opts: GradCheck) -> Result<GradCheckReport>
where
    F: Fn(&Tape<T>, &[Var]) -> Result<Var>,
{
    if !(opts.eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {}", opts.eps)));
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::InvalidArgument("grad_check parameters must be finite".into()));
    }
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&tape, &vars)?;
    if tape.value(loss)?.numel() != 1 {
        return Err(Error::InvalidArgument("grad_check function must return a scalar".into()));
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| grads.wrt(v)).collect::<Result<_>>()?;
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        pass: true,
    };
    let mut probe = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let picks: Vec<usize> = match opts.max_elems_per_param {
            Some(m) if m < n => (0..m).map(|k| k * n / m + (n / m) / 2).collect(),
            _ => (0..n).collect(),
        };
        for ei in picks {
            let orig = p.data()[ei];
            probe[pi].data_mut()[ei] = T::from_f64(orig.as_f64() + opts.eps);
            let up = eval_loss(&f, &probe)?;
            probe[pi].data_mut()[ei] = T::from_f64(orig.as_f64() - opts.eps);
            let down = eval_loss(&f, &probe)?;
            probe[pi].data_mut()[ei] = orig;
            let num = (up - down) / (2.0 * opts.eps);
            let ana = analytic[pi].data()[ei].as_f64();
            let rel = (ana - num).abs() / (ana.abs() + num.abs() + 1e-12);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((pi, ei));
                report.analytic = ana;
                report.numeric = num;
            }
        }
    }
    report.pass = report.max_rel_err < opts.tol;
    Ok(report)
}
