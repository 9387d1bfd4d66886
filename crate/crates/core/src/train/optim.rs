//! AdamW with decoupled weight decay and a warmup-cosine schedule.

use crate::error::{Error, Result};
use crate::ndtensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Optimizer state: first/second moments per parameter and a step count.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Which parameters receive weight decay.
    pub decay: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient was missing or non-finite; nothing changed.
    Skipped,
}

impl<T: Element> AdamW<T> {
    pub fn new(params: &[Tensor<T>], cfg: AdamWConfig, decay: Vec<bool>) -> Result<Self> {
        if decay.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "decay mask has {} entries for {} parameters",
                decay.len(),
                params.len()
            )));
        }
        let zeros = |p: &Tensor<T>| Tensor::zeros(p.shape().to_vec());
        Ok(AdamW {
            cfg,
            step: 0,
            m: params.iter().map(zeros).collect::<Result<_>>()?,
            v: params.iter().map(zeros).collect::<Result<_>>()?,
            decay,
        })
    }

    /// One update from each parameter's stored gradient.
    pub fn step(&mut self, params: &mut [Tensor<T>], lr: f64) -> Result<StepOutcome> {
        if params.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        if !(lr >= 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be >= 0, got {lr}")));
        }
        for (p, m) in params.iter().zip(&self.m) {
            if p.shape() != m.shape() {
                return Err(Error::Shape(format!(
                    "parameter shape {:?} differs from its moment {:?}",
                    p.shape(),
                    m.shape()
                )));
            }
            match p.grad() {
                Some(g) if g.iter().all(|v| v.is_finite()) => {}
                _ => return Ok(StepOutcome::Skipped),
            }
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (ob1, ob2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        for (i, p) in params.iter_mut().enumerate() {
            let g = p.grad().expect("checked above").to_vec();
            let decay = if self.decay[i] { lr * c.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let data = p.data_mut();
            for k in 0..data.len() {
                m[k] = b1 * m[k] + ob1 * g[k];
                v[k] = b2 * v[k] + ob2 * g[k] * g[k];
                let mhat = m[k].as_f64() / bc1;
                let vhat = v[k].as_f64() / bc2;
                let mut x = data[k].as_f64();
                x -= decay * x;
                x -= lr * mhat / (vhat.sqrt() + c.eps);
                data[k] = T::from_f64(x);
            }
        }
        Ok(StepOutcome::Applied)
    }
}

/// Linear warmup from 0 to `base_lr`, then half-cosine down to 0.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, warmup_steps: usize) -> Result<f64> {
    if step > total_steps || (warmup_steps >= total_steps && total_steps > 0) {
        return Err(Error::InvalidArgument(format!(
            "cosine_lr needs step <= total and warmup < total; got step {step}, total {total_steps}, warmup {warmup_steps}"
        )));
    }
    if total_steps == 0 {
        return Ok(0.0);
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(p: f64, g: f64) -> Vec<Tensor<f64>> {
        let mut t = Tensor::from_f64(vec![1], &[p]).unwrap();
        t.set_grad(vec![g]).unwrap();
        vec![t]
    }

    #[test]
    fn first_step_by_hand() {
        let mut ps = one(1.0, 1.0);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(&ps, cfg, vec![true]).unwrap();
        opt.step(&mut ps, 0.1).unwrap();
        assert!((ps[0].data()[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_still_updates_moments() {
        let mut ps = one(2.0, 0.5);
        let mut opt = AdamW::new(&ps, AdamWConfig::default(), vec![true]).unwrap();
        opt.step(&mut ps, 0.0).unwrap();
        assert_eq!(ps[0].data()[0], 2.0);
        assert!(opt.m[0].data()[0] != 0.0 && opt.v[0].data()[0] != 0.0);
    }

    #[test]
    fn decoupled_decay() {
        let mut ps = one(3.0, 0.0);
        let cfg = AdamWConfig { weight_decay: 0.1, ..Default::default() };
        let mut opt = AdamW::new(&ps, cfg, vec![true]).unwrap();
        opt.step(&mut ps, 0.01).unwrap();
        assert!((ps[0].data()[0] - (3.0 - 0.01 * 0.1 * 3.0)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_grad_skips() {
        let mut ps = one(1.0, f64::NAN);
        let mut opt = AdamW::new(&ps, AdamWConfig::default(), vec![true]).unwrap();
        assert_eq!(opt.step(&mut ps, 0.1).unwrap(), StepOutcome::Skipped);
        assert_eq!(ps[0].data()[0], 1.0);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn schedule_landmarks() {
        assert_eq!(cosine_lr(10, 110, 1e-3, 10).unwrap(), 1e-3);
        assert!(cosine_lr(110, 110, 1e-3, 10).unwrap().abs() < 1e-12);
        assert!((cosine_lr(60, 110, 1e-3, 10).unwrap() - 5e-4).abs() < 1e-15);
        assert!(cosine_lr(111, 110, 1e-3, 10).is_err());
        assert!(cosine_lr(0, 10, 1e-3, 10).is_err());
    }
}
