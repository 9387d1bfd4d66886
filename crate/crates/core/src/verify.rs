//! Self-contained oracle and property suite behind the `verify` subcommand.
//! Every check is small enough that the whole suite runs in seconds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::blocks::{BlockDims, LocalBlock, Merge, ScAttn};
use crate::error::Result;
use crate::io::{decode_checkpoint, encode_checkpoint, Checkpoint, RawTensor};
use crate::model::{Model, ModelConfig, ModelKind};
use crate::ndtensor::{grad_check, GradCheck, Tape, Tensor, Var};
use crate::params::{Bound, Initializer, ParamStore};
use crate::scan::{candidate_set, permute_tokens, scan_order, ScanDirection, ScanKind};
use crate::search::{export_architecture, select_topk, DirectionLayout, SearchState};
use crate::ssm::{kernel, selective_scan, ssm_conv_oracle, ssm_scan_sequential, SsmDims, SsmParams};
use crate::train::cross_entropy;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, pass: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            pass,
            detail: detail.into(),
        }
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_f64(shape.to_vec(), &v).expect("shape")
}

/// Bijection, flip reversal, round trip and locality for every candidate
/// direction on the listed grids.
pub fn check_scan_paths() -> Result<Check> {
    let mut cases = 0;
    let mut failures = Vec::new();
    for (side, windows) in [(4usize, [2usize, 4]), (8, [2, 4]), (14, [2, 7])] {
        let l = side * side;
        let x = Tensor::<f64>::from_f64(vec![1, l, 1], &(0..l).map(|i| i as f64).collect::<Vec<_>>())?;
        for d in candidate_set(side, side, windows)? {
            cases += 1;
            let p = scan_order(side, side, d)?;
            let mut sorted = p.order().to_vec();
            sorted.sort_unstable();
            if sorted != (0..l).collect::<Vec<_>>() {
                failures.push(format!("{d} on {side}: not a bijection"));
            }
            let f = scan_order(side, side, d.flipped())?;
            if f.order().iter().rev().ne(p.order().iter()) {
                failures.push(format!("{d} on {side}: flip is not the reversal"));
            }
            let back = permute_tokens(&permute_tokens(&x, &p)?, &p.invert())?;
            if back != x {
                failures.push(format!("{d} on {side}: round trip changed tokens"));
            }
            let pos = p.positions();
            match d.kind {
                ScanKind::Local { window } => {
                    for wr in 0..side / window {
                        for wc in 0..side / window {
                            let ps: Vec<usize> = (0..window * window)
                                .map(|k| pos[(wr * window + k / window) * side + wc * window + k % window])
                                .collect();
                            let span = ps.iter().max().unwrap() - ps.iter().min().unwrap();
                            if span > window * window - 1 {
                                failures.push(format!("{d} on {side}: window spans {span}"));
                            }
                        }
                    }
                }
                ScanKind::Horizontal => {
                    if (0..l - side).any(|i| pos[i].abs_diff(pos[i + side]) != side) {
                        failures.push(format!("{d} on {side}: vertical neighbours not {side} apart"));
                    }
                }
                ScanKind::Vertical => {}
            }
        }
    }
    Ok(Check::new(
        "scan paths",
        failures.is_empty(),
        if failures.is_empty() {
            format!("{cases} direction/grid cases")
        } else {
            failures.join("; ")
        },
    ))
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// Sequential scan against the convolution kernel (static parameters) and
/// against the parallel sweep (input-dependent parameters).
pub fn check_ssm_oracles(instances: usize) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x55);
    let (mut worst_conv, mut worst_par) = (0.0f64, 0.0f64);
    for _ in 0..instances {
        let l = rng.gen_range(1..=64);
        let n = rng.gen_range(1..=8);
        let a_bar: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        let b_bar: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = rand_tensor(&mut rng, &[l], -1.0, 1.0);
        let tile = |v: &[f64]| Tensor::from_f64(vec![l, n], &v.repeat(l));
        let seq = ssm_scan_sequential(&x, &tile(&a_bar)?, &tile(&b_bar)?, &tile(&c)?)?;
        let conv = ssm_conv_oracle(
            &Tensor::from_f64(vec![n], &a_bar)?,
            &Tensor::from_f64(vec![n], &b_bar)?,
            &Tensor::from_f64(vec![n], &c)?,
            &x,
        )?;
        worst_conv = worst_conv.max(rel(seq.data(), conv.data()));

        let e = rng.gen_range(1..=4);
        let u = rand_tensor(&mut rng, &[1, l, e], -1.0, 1.0);
        let delta = rand_tensor(&mut rng, &[1, l, e], 0.01, 1.0);
        let a = rand_tensor(&mut rng, &[e, n], -2.0, -0.1);
        let b = rand_tensor(&mut rng, &[1, l, n], -1.0, 1.0);
        let cc = rand_tensor(&mut rng, &[1, l, n], -1.0, 1.0);
        let ys = kernel::forward(&u, &delta, &a, &b, &cc, false)?;
        let yp = kernel::forward(&u, &delta, &a, &b, &cc, true)?;
        worst_par = worst_par.max(rel(yp.data(), ys.data()));
    }
    Ok(Check::new(
        "ssm oracles",
        worst_conv < 1e-10 && worst_par < 1e-10,
        format!("{instances} instances, conv rel {worst_conv:.2e}, parallel rel {worst_par:.2e}"),
    ))
}

/// Moves parameters to a generic O(1) point. At initialization Δ is tiny
/// and the scan gradients fall below finite-difference resolution.
pub fn well_conditioned(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let t = store.get_mut(id);
        if name.ends_with(".b_dt") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.0..1.0));
        } else if !name.ends_with(".a_log") && !name.contains("norm.") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
    }
}

const GC: GradCheck = GradCheck {
    eps: 1e-4,
    tol: 1e-5,
    max_elems_per_param: Some(6),
};

/// Gradient check of `sum(w ⊙ f(params, x))` over every parameter and the input.
fn grad_suite_case(
    name: &str,
    store: &ParamStore<f64>,
    x: Tensor<f64>,
    extra: Option<Tensor<f64>>,
    f: impl Fn(&Tape<f64>, &Bound, Var, Option<Var>) -> Result<Var>,
) -> Result<(String, f64, bool)> {
    let k = store.len();
    let mut params = store.tensors().to_vec();
    let out_shape = {
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let ev = extra.clone().map(|e| tape.constant(e));
        let y = f(&tape, &b, xv, ev)?;
        tape.shape(y)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = rand_tensor(&mut rng, &out_shape, -1.0, 1.0);
    params.push(x);
    let has_extra = extra.is_some();
    if let Some(e) = extra {
        params.push(e);
    }
    let r = grad_check(
        |t, v| {
            let b = Bound::from_vars(v[..k].to_vec());
            let y = f(t, &b, v[k], has_extra.then(|| v[k + 1]))?;
            let wv = t.constant(w.clone());
            let y = t.mul(y, wv)?;
            t.sum_all(y)
        },
        &params,
        GC,
    )?;
    Ok((name.into(), r.max_rel_err, r.pass))
}

fn toy_block_dims(dim: usize) -> BlockDims {
    BlockDims {
        dim,
        inner: 2 * dim,
        state: 2,
        rank: 1,
        conv_kernel: 3,
        reduction: 4,
        scattn: true,
    }
}

/// Finite differences for the scan, SCAttn, a block, a mixture block
/// (including its α) and a two-block model under cross-entropy.
pub fn check_gradients() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut results = Vec::new();

    let mut store = ParamStore::new();
    let p = SsmParams::init(&mut store, &Initializer::new(1), "ssm", SsmDims::new(4, 3, 2)?)?;
    well_conditioned(&mut store, 2);
    let x = rand_tensor(&mut rng, &[2, 5, 4], -1.0, 1.0);
    results.push(grad_suite_case("selective_scan", &store, x, None, |t, b, x, _| selective_scan(t, b, x, &p))?);

    let mut store = ParamStore::new();
    let sc = ScAttn::init(&mut store, &Initializer::new(3), "sc", 8, 2)?;
    let x = rand_tensor(&mut rng, &[2, 3, 8], -1.0, 1.0);
    results.push(grad_suite_case("scattn", &store, x, None, |t, b, x, _| sc.forward(t, b, x))?);

    let l2 = ScanDirection::local(2, false)?;
    let dirs = vec![ScanDirection::H, ScanDirection::H.flipped(), l2, l2.flipped()];
    let mut store = ParamStore::new();
    let blk = LocalBlock::init(&mut store, &Initializer::new(4), "blk", toy_block_dims(4), dirs)?;
    well_conditioned(&mut store, 5);
    let x = rand_tensor(&mut rng, &[1, 4, 4], -1.0, 1.0);
    results.push(grad_suite_case("block", &store, x, None, |t, b, x, _| {
        blk.forward(t, b, x, (2, 2), Merge::Sum)
    })?);

    let mut store = ParamStore::new();
    let mix = LocalBlock::init(&mut store, &Initializer::new(6), "mix", toy_block_dims(4), candidate_set(4, 4, [2, 4])?)?;
    well_conditioned(&mut store, 7);
    let x = rand_tensor(&mut rng, &[1, 16, 4], -1.0, 1.0);
    let alpha = rand_tensor(&mut rng, &[8], -1.0, 1.0);
    results.push(grad_suite_case("mixture block + alpha", &store, x, Some(alpha), |t, b, x, a| {
        mix.forward(t, b, x, (4, 4), Merge::Weighted(a.expect("alpha")))
    })?);

    let cfg = ModelConfig {
        kind: ModelKind::LocalVim,
        image_size: 8,
        patch_size: Some(4),
        dims: vec![4],
        depths: vec![2],
        num_classes: 3,
        state_size: 2,
        reduction: 4,
        conv_kernel: 2,
        windows: [2, 4],
        ..ModelConfig::local_vim(4, 2)
    };
    let mut model = Model::<f64>::build(&cfg, 8)?;
    well_conditioned(&mut model.store, 9);
    let images = rand_tensor(&mut rng, &[2, 3, 8, 8], 0.0, 1.0);
    let labels = [0usize, 2];
    let k = model.store.len();
    let r = grad_check(
        |t, v| {
            let b = Bound::from_vars(v[..k].to_vec());
            let x = t.constant(images.clone());
            let logits = model.forward(t, &b, x, None)?;
            cross_entropy(t, logits, &labels)
        },
        model.store.tensors(),
        GC,
    )?;
    results.push(("two-block model".into(), r.max_rel_err, r.pass));

    let pass = results.iter().all(|r| r.2);
    let detail = results
        .iter()
        .map(|(n, e, _)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(Check::new("gradients", pass, detail))
}

/// Uniform α is the branch mean, saturated α a single branch, and top-k is
/// shift invariant.
pub fn check_mixture() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let mix = LocalBlock::init(&mut store, &Initializer::new(12), "mix", toy_block_dims(8), candidate_set(4, 4, [2, 4])?)?;
    let x = rand_tensor(&mut rng, &[2, 16, 8], -1.0, 1.0);
    let run = |b: &LocalBlock, merge: &dyn Fn(&Tape<f64>) -> Merge| -> Result<Tensor<f64>> {
        let tape = Tape::new();
        let bd = store.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let y = b.forward(&tape, &bd, xv, (4, 4), merge(&tape))?;
        let out = tape.value(y)?.clone();
        Ok(out)
    };
    let zeros = Tensor::<f64>::zeros(vec![8])?;
    let uniform = run(&mix, &|t| Merge::Weighted(t.constant(zeros.clone())))?;
    let mean = run(&mix, &|_| Merge::Mean)?;
    let d_uniform = uniform.max_abs_diff(&mean);
    let mut d_sat = 0.0f64;
    for k in 0..8 {
        let mut a = vec![-40.0; 8];
        a[k] = 40.0;
        let at = Tensor::<f64>::from_f64(vec![8], &a)?;
        let mixed = run(&mix, &|t| Merge::Weighted(t.constant(at.clone())))?;
        let single = run(&mix.select(&[k])?, &|_| Merge::Sum)?;
        d_sat = d_sat.max(rel(mixed.data(), single.data()));
    }
    let mut shift_ok = true;
    for _ in 0..100 {
        let row: Vec<f64> = (0..8).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let c = rng.gen_range(-50.0..50.0);
        let shifted: Vec<f64> = row.iter().map(|v| v + c).collect();
        shift_ok &= select_topk(&row, 4)? == select_topk(&shifted, 4)?;
    }
    Ok(Check::new(
        "mixture consistency",
        d_uniform < 1e-6 && d_sat < 1e-6 && shift_ok,
        format!("uniform {d_uniform:.1e}, saturated {d_sat:.1e}, shift invariant {shift_ok}"),
    ))
}

/// Checkpoint and layout round trips plus CRC rejection, all in memory.
pub fn check_serialization() -> Result<Check> {
    let cfg = ModelConfig {
        image_size: 16,
        patch_size: Some(4),
        dims: vec![4],
        depths: vec![2],
        num_classes: 3,
        state_size: 2,
        reduction: 4,
        windows: [2, 4],
        ..ModelConfig::local_vim(4, 2)
    };
    let model = Model::<f32>::build(&cfg, 1)?;
    let ck = Checkpoint {
        config: serde_json::to_string(&cfg)?,
        tensors: model.store.iter().map(|(n, t)| RawTensor::from_tensor(n, t)).collect(),
    };
    let bytes = encode_checkpoint(&ck)?;
    let back = decode_checkpoint(&bytes)?;
    let ck_ok = back == ck && bytes.starts_with(b"LMCK");
    let mut bad = bytes.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 0x01;
    let crc_ok = decode_checkpoint(&bad).is_err();

    let mut state = SearchState::<f64> {
        alpha: Tensor::zeros(vec![2, 8])?,
    };
    state.alpha.data_mut()[3] = 2.0;
    state.alpha.data_mut()[8 + 6] = 1.0;
    let layout = export_architecture(&state, &cfg)?;
    let layout_ok = DirectionLayout::from_json(&layout.to_json())? == layout;
    Ok(Check::new(
        "serialization",
        ck_ok && crc_ok && layout_ok,
        format!("checkpoint {ck_ok}, crc rejects {crc_ok}, layout {layout_ok}"),
    ))
}

/// Table presets build within ±15% of the published parameter counts.
pub fn check_param_counts() -> Result<Check> {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, target) in PRESET_TARGETS.iter().map(|t| (t.name, t.params)) {
        let n = ModelConfig::preset(name)?.param_count()? as f64;
        let ratio = n / target;
        pass &= (ratio - 1.0).abs() <= 0.15;
        parts.push(format!("{name} {:.2}M ({ratio:.3})", n / 1e6));
    }
    Ok(Check::new("parameter counts", pass, parts.join(", ")))
}

/// Published size and cost of the four presets at 224².
#[derive(Clone, Copy, Debug, Serialize)]
pub struct PresetTarget {
    pub name: &'static str,
    pub params: f64,
    pub flops: f64,
}

pub const PRESET_TARGETS: [PresetTarget; 4] = [
    PresetTarget { name: "localvim_t", params: 8e6, flops: 1.5e9 },
    PresetTarget { name: "localvim_s", params: 28e6, flops: 4.8e9 },
    PresetTarget { name: "localvmamba_t", params: 26e6, flops: 5.7e9 },
    PresetTarget { name: "localvmamba_s", params: 50e6, flops: 11.4e9 },
];

pub fn run_all() -> Result<Vec<Check>> {
    Ok(vec![
        check_scan_paths()?,
        check_ssm_oracles(100)?,
        check_gradients()?,
        check_mixture()?,
        check_serialization()?,
        check_param_counts()?,
    ])
}
