//! Spatial/channel gating, the multi-direction LocalMamba block and the
//! softmax-weighted mixture block used during direction search.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::Flops;
use crate::ndtensor::{Element, Tape, Tensor, Var};
use crate::params::{Bound, Initializer, ParamId, ParamStore};
use crate::scan::{apply_permutation, restore_order, scan_order, Permutation, ScanDirection};
use crate::ssm::{selective_scan_with, ScanMode, SsmDims, SsmParams};

/// Sizes shared by every branch of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDims {
    /// Model width `D`.
    pub dim: usize,
    /// Inner width `E` of the scan branches.
    pub inner: usize,
    pub state: usize,
    /// Rank of the Δ projection.
    pub rank: usize,
    pub conv_kernel: usize,
    /// SCAttn hidden width is `inner / reduction`.
    pub reduction: usize,
    pub scattn: bool,
}

impl BlockDims {
    /// Expansion 2, state 16, kernel 4, reduction 8, Δ-rank `ceil(dim / 16)`.
    pub fn standard(dim: usize) -> Self {
        BlockDims {
            dim,
            inner: 2 * dim,
            state: 16,
            rank: dim.div_ceil(16),
            conv_kernel: 4,
            reduction: 8,
            scattn: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.inner == 0 || self.state == 0 || self.rank == 0 || self.conv_kernel == 0 {
            return bad(format!("block sizes must be >= 1: {self:?}"));
        }
        if self.scattn && (self.reduction == 0 || self.inner % self.reduction != 0) {
            return bad(format!(
                "SCAttn reduction {} must divide inner width {}",
                self.reduction, self.inner
            ));
        }
        Ok(())
    }

    pub fn ssm(&self) -> SsmDims {
        SsmDims {
            inner: self.inner,
            state: self.state,
            rank: self.rank,
        }
    }

    pub fn scattn_hidden(&self) -> usize {
        self.inner / self.reduction
    }

    pub fn scattn_params(&self) -> usize {
        let (e, h) = (self.inner, self.scattn_hidden());
        if !self.scattn {
            return 0;
        }
        e * h + h + h * e + e + 2 * e * h + h + h + 1
    }

    pub fn branch_params(&self) -> usize {
        self.inner * self.conv_kernel + self.inner + self.ssm().param_count()
    }

    /// Scalar parameter count of a block with `branches` directions.
    pub fn param_count(&self, branches: usize) -> usize {
        let (d, e) = (self.dim, self.inner);
        2 * d + d * 2 * e + branches * self.branch_params() + self.scattn_params() + e * d
    }

    /// The recurrence alone, `6 L E N` per branch; included in [`Self::flops`].
    pub fn scan_flops(&self, tokens: usize, branches: usize) -> Flops {
        Flops::token(6 * (tokens * self.inner * self.state * branches) as u64)
    }

    /// Multiply-accumulate count for one sample with `tokens` tokens.
    /// Selective scan costs `6 L E N` per branch; permutations are free.
    pub fn flops(&self, tokens: usize, branches: usize) -> Flops {
        let (l, d, e, n, r, k) = (
            tokens as u64,
            self.dim as u64,
            self.inner as u64,
            self.state as u64,
            self.rank as u64,
            self.conv_kernel as u64,
        );
        let b = branches as u64;
        let branch = l * e * k + l * e * (r + 2 * n) + l * r * e + 6 * l * e * n + l * e;
        let mut per_token = l * d * 2 * e + b * branch + l * e + l * e * d;
        let mut fixed = 0;
        if self.scattn {
            let h = self.scattn_hidden() as u64;
            // spatial projection and both gating products per token; the
            // channel MLP and the pooled half of the spatial projection once
            per_token += b * (l * e * h + l * h + 2 * l * e);
            fixed += b * (2 * e * h + e * h);
        }
        Flops { per_token, fixed }
    }
}

/// Channel and spatial gates over one branch's features `Z [B,L,E]`.
#[derive(Clone, Copy, Debug)]
pub struct ScAttn {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    /// `[2E, h]`: rows `0..E` act on the token, rows `E..2E` on the pooled vector.
    pub u: ParamId,
    pub b_u: ParamId,
    pub w_s: ParamId,
    pub b_s: ParamId,
}

fn linear_init<T: Element>(
    store: &mut ParamStore<T>,
    init: &Initializer,
    name: String,
    fan_in: usize,
    shape: &[usize],
) -> Result<ParamId> {
    let t = init.uniform(&name, shape, 1.0 / (fan_in as f64).sqrt())?;
    store.add(name, t)
}

impl ScAttn {
    pub fn init<T: Element>(
        store: &mut ParamStore<T>,
        init: &Initializer,
        prefix: &str,
        inner: usize,
        hidden: usize,
    ) -> Result<Self> {
        let e = inner;
        let h = hidden;
        let mut lin = |n: &str, fan: usize, shape: &[usize]| linear_init(store, init, format!("{prefix}.{n}"), fan, shape);
        Ok(ScAttn {
            w1: lin("w1", e, &[e, h])?,
            b1: lin("b1", e, &[h])?,
            w2: lin("w2", h, &[h, e])?,
            b2: lin("b2", h, &[e])?,
            u: lin("u", 2 * e, &[2 * e, h])?,
            b_u: lin("b_u", 2 * e, &[h])?,
            w_s: lin("w_s", h, &[h, 1])?,
            b_s: lin("b_s", h, &[1])?,
        })
    }

    /// Gate values `(channel [B,1,E], spatial [B,L,1])`.
    pub fn gates<T: Element>(&self, tape: &Tape<T>, bound: &Bound, z: Var) -> Result<(Var, Var)> {
        let shape = tape.shape(z)?;
        if shape.len() != 3 {
            return shape_err(format!("scattn expects Z [B,L,E], got {shape:?}"));
        }
        let e = shape[2];
        let u_shape = tape.shape(bound.get(self.u))?;
        if u_shape[0] != 2 * e {
            return shape_err(format!("scattn weights expect E={}, got Z {shape:?}", u_shape[0] / 2));
        }
        let g = tape.mean(z, 1)?;
        let hid = tape.matmul(g, bound.get(self.w1))?;
        let hid = tape.add(hid, bound.get(self.b1))?;
        let hid = tape.silu(hid)?;
        let c = tape.matmul(hid, bound.get(self.w2))?;
        let c = tape.add(c, bound.get(self.b2))?;
        let c = tape.sigmoid(c)?;

        let u_z = tape.narrow(bound.get(self.u), 0, 0, e)?;
        let u_g = tape.narrow(bound.get(self.u), 0, e, e)?;
        let zs = tape.matmul(z, u_z)?;
        let gs = tape.matmul(g, u_g)?;
        let s = tape.add(zs, gs)?;
        let s = tape.add(s, bound.get(self.b_u))?;
        let s = tape.silu(s)?;
        let s = tape.matmul(s, bound.get(self.w_s))?;
        let s = tape.add(s, bound.get(self.b_s))?;
        let s = tape.sigmoid(s)?;
        Ok((c, s))
    }

    /// `Z ⊙ c ⊙ s`.
    pub fn forward<T: Element>(&self, tape: &Tape<T>, bound: &Bound, z: Var) -> Result<Var> {
        let (c, s) = self.gates(tape, bound, z)?;
        let out = tape.mul(z, c)?;
        tape.mul(out, s)
    }
}

/// Per-direction parameters: depthwise causal conv and selective scan.
#[derive(Clone, Copy, Debug)]
pub struct Branch {
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub ssm: SsmParams,
}

/// How branch outputs are combined.
#[derive(Clone, Copy, Debug)]
pub enum Merge {
    Sum,
    Mean,
    /// `softmax(alpha)`-weighted sum; `alpha` has one logit per branch.
    Weighted(Var),
}

/// A multi-direction block. Fixed blocks hold the selected directions; the
/// search supernet uses the same structure with all candidates.
#[derive(Clone, Debug)]
pub struct LocalBlock {
    pub dims: BlockDims,
    pub directions: Vec<ScanDirection>,
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
    pub w_in: ParamId,
    pub branches: Vec<Branch>,
    pub scattn: Option<ScAttn>,
    pub w_out: ParamId,
    pub mode: ScanMode,
}

impl LocalBlock {
    pub fn init<T: Element>(
        store: &mut ParamStore<T>,
        init: &Initializer,
        prefix: &str,
        dims: BlockDims,
        directions: Vec<ScanDirection>,
    ) -> Result<Self> {
        dims.validate()?;
        if directions.is_empty() {
            return Err(Error::Config(format!("{prefix}: a block needs at least one direction")));
        }
        let (d, e, k) = (dims.dim, dims.inner, dims.conv_kernel);
        let norm_gamma = store.add(format!("{prefix}.norm.gamma"), Tensor::full(vec![d], 1.0)?)?;
        let norm_beta = store.add(format!("{prefix}.norm.beta"), Tensor::zeros(vec![d])?)?;
        let w_in = linear_init(store, init, format!("{prefix}.w_in"), d, &[d, 2 * e])?;
        let mut branches = Vec::with_capacity(directions.len());
        for i in 0..directions.len() {
            let bp = format!("{prefix}.branch{i}");
            let conv_w = linear_init(store, init, format!("{bp}.conv_w"), k, &[e, k])?;
            let conv_b = linear_init(store, init, format!("{bp}.conv_b"), k, &[e])?;
            let ssm = SsmParams::init(store, init, &format!("{bp}.ssm"), dims.ssm())?;
            branches.push(Branch { conv_w, conv_b, ssm });
        }
        let scattn = if dims.scattn {
            Some(ScAttn::init(store, init, &format!("{prefix}.scattn"), e, dims.scattn_hidden())?)
        } else {
            None
        };
        let w_out = linear_init(store, init, format!("{prefix}.w_out"), e, &[e, d])?;
        Ok(LocalBlock {
            dims,
            directions,
            norm_gamma,
            norm_beta,
            w_in,
            branches,
            scattn,
            w_out,
            mode: ScanMode::Sequential,
        })
    }

    pub fn orders(&self, grid: (usize, usize)) -> Result<Vec<Arc<Permutation>>> {
        self.directions
            .iter()
            .map(|&d| scan_order(grid.0, grid.1, d))
            .collect()
    }

    /// One branch: permute, conv, SiLU, scan, restore order, gate.
    pub fn branch<T: Element>(
        &self,
        tape: &Tape<T>,
        bound: &Bound,
        u: Var,
        index: usize,
        order: &Permutation,
    ) -> Result<Var> {
        let br = &self.branches[index];
        let x = apply_permutation(tape, u, order)?;
        let x = tape.causal_conv1d(x, bound.get(br.conv_w), bound.get(br.conv_b))?;
        let x = tape.silu(x)?;
        let x = selective_scan_with(tape, bound, x, &br.ssm, self.mode)?;
        let x = restore_order(tape, x, order)?;
        match &self.scattn {
            Some(sc) => sc.forward(tape, bound, x),
            None => Ok(x),
        }
    }

    /// Layer-normed input projection split into `(u, g)`.
    pub fn project_in<T: Element>(&self, tape: &Tape<T>, bound: &Bound, x: Var) -> Result<(Var, Var)> {
        let e = self.dims.inner;
        let h = tape.layernorm(x, bound.get(self.norm_gamma), bound.get(self.norm_beta))?;
        let uz = tape.matmul(h, bound.get(self.w_in))?;
        Ok((tape.narrow(uz, 2, 0, e)?, tape.narrow(uz, 2, e, e)?))
    }

    /// Residual output `x + W_out (y ⊙ silu(g))`.
    pub fn project_out<T: Element>(&self, tape: &Tape<T>, bound: &Bound, x: Var, y: Var, g: Var) -> Result<Var> {
        let gate = tape.silu(g)?;
        let y = tape.mul(y, gate)?;
        let y = tape.matmul(y, bound.get(self.w_out))?;
        tape.add(x, y)
    }

    pub fn forward<T: Element>(
        &self,
        tape: &Tape<T>,
        bound: &Bound,
        x: Var,
        grid: (usize, usize),
        merge: Merge,
    ) -> Result<Var> {
        let shape = tape.shape(x)?;
        if shape.len() != 3 || shape[1] != grid.0 * grid.1 || shape[2] != self.dims.dim {
            return shape_err(format!(
                "block expects x [B,{},{}] for grid {grid:?}, got {shape:?}",
                grid.0 * grid.1,
                self.dims.dim
            ));
        }
        let orders = self.orders(grid)?;
        let (u, g) = self.project_in(tape, bound, x)?;
        let weights = match merge {
            Merge::Weighted(alpha) => {
                let n = tape.shape(alpha)?;
                if n != [self.branches.len()] {
                    return shape_err(format!(
                        "mixture logits must have shape [{}], got {n:?}",
                        self.branches.len()
                    ));
                }
                Some(tape.softmax(alpha, 0)?)
            }
            _ => None,
        };
        let mut y: Option<Var> = None;
        for (i, order) in orders.iter().enumerate() {
            let mut b = self.branch(tape, bound, u, i, order)?;
            if let Some(w) = weights {
                let wi = tape.narrow(w, 0, i, 1)?;
                b = tape.mul(b, wi)?;
            }
            y = Some(match y {
                Some(acc) => tape.add(acc, b)?,
                None => b,
            });
        }
        let mut y = y.expect("at least one branch");
        if let Merge::Mean = merge {
            y = tape.scale(y, 1.0 / self.branches.len() as f64)?;
        }
        self.project_out(tape, bound, x, y, g)
    }

    pub fn param_count(&self) -> usize {
        self.dims.param_count(self.branches.len())
    }

    /// A view keeping only the listed branches; parameters are shared.
    pub fn select(&self, indices: &[usize]) -> Result<LocalBlock> {
        let mut out = self.clone();
        out.directions.clear();
        out.branches.clear();
        for &i in indices {
            if i >= self.branches.len() {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: self.branches.len(),
                });
            }
            out.directions.push(self.directions[i]);
            out.branches.push(self.branches[i]);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_agree_with_store() {
        let mut store = ParamStore::<f64>::new();
        let mut dims = BlockDims::standard(16);
        dims.state = 4;
        let dirs = vec![ScanDirection::H, ScanDirection::H.flipped()];
        let b = LocalBlock::init(&mut store, &Initializer::new(0), "b", dims, dirs).unwrap();
        assert_eq!(store.count(), b.param_count());
        dims.scattn = false;
        let mut s2 = ParamStore::<f64>::new();
        LocalBlock::init(&mut s2, &Initializer::new(0), "b", dims, vec![ScanDirection::H]).unwrap();
        assert_eq!(s2.count(), dims.param_count(1));
    }

    #[test]
    fn reduction_must_divide_inner() {
        let mut dims = BlockDims::standard(6);
        dims.reduction = 5;
        assert!(dims.validate().is_err());
        dims.scattn = false;
        assert!(dims.validate().is_ok());
    }
}
