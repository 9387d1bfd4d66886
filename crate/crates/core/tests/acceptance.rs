//! Acceptance gate. Prints one PASS/FAIL line per criterion and a summary.
//!
//! Criteria that cannot be met at this scale are still evaluated and
//! reported; the binary only exits non-zero on internal errors, or on any
//! failed criterion when `ACCEPTANCE_STRICT=1`.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use localmamba::io::{
    decode_checkpoint, inspect_report, load_checkpoint, load_config, save_checkpoint, Config, InspectReport,
};
use localmamba::model::{Model, ModelConfig};
use localmamba::scan::{candidate_set, scan_order, ScanDirection, ScanKind};
use localmamba::search::{run_search, DirectionLayout, SearchOutcome, KEEP};
use localmamba::ssm::discretize_zoh;
use localmamba::train::{ablation_harness, evaluate, fit, AblationTable, Dataset, Trainer};
use localmamba::verify;

type Res<T> = Result<T, Box<dyn std::error::Error>>;

const PARAM_TOL: f64 = 0.15;
const FLOP_TOL: f64 = 0.20;
const LOCAL_DELTA_MAX: f64 = 0.03;
const ORACLE_REL: f64 = 1e-10;
const TOY_TARGET: f64 = 0.90;
const TOY_BUDGET: Duration = Duration::from_secs(30 * 60);
const CHANCE: f64 = 0.25;
const CHANCE_TOL: f64 = 0.05;
const SCATTN_SLACK: f64 = 0.005;
const RETRAIN_SLACK: f64 = 0.01;
const SEEDS: [u64; 3] = [0, 1, 2];

/// Published sizes, millions of parameters and GFLOPs at 224².
const TABLE: [(&str, f64, f64); 4] = [
    ("localvim_t", 8.0, 1.5),
    ("localvim_s", 28.0, 4.8),
    ("localvmamba_t", 26.0, 5.7),
    ("localvmamba_s", 50.0, 11.4),
];

struct Gate {
    results: Vec<(usize, bool)>,
}

impl Gate {
    fn report(&mut self, n: usize, name: &str, pass: bool, detail: impl AsRef<str>) {
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("{tag} [{n:>2}] {name}: {}", detail.as_ref());
        self.results.push((n, pass));
    }
}

fn repo() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../.."))
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x / target - 1.0).abs() <= tol
}

fn criterion_params(g: &mut Gate) -> Res<()> {
    let t0 = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, m, _) in TABLE {
        let cfg = ModelConfig::preset(name)?;
        // count the constructed tensors, not the closed form
        let built = Model::<f32>::build(&cfg, 0)?.store.count();
        let claimed = inspect_report(&cfg)?.params;
        let ok = built == claimed && within(built as f64, m * 1e6, PARAM_TOL);
        pass &= ok;
        parts.push(format!("{name} {:.2}M vs {m}M", built as f64 / 1e6));
    }
    let secs = t0.elapsed().as_secs_f64();
    pass &= secs < 60.0;
    g.report(1, "parameter counts within 15%", pass, format!("{} ({secs:.1}s)", parts.join(", ")));
    Ok(())
}

fn criterion_flops(g: &mut Gate) -> Res<()> {
    let reports: Vec<(&str, f64, InspectReport)> = TABLE
        .iter()
        .filter(|(n, ..)| *n == "localvim_t" || *n == "localvmamba_t")
        .map(|&(n, _, f)| Ok((n, f, inspect_report(&ModelConfig::preset(n)?)?)))
        .collect::<Res<_>>()?;
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, target, r) in &reports {
        let total: u64 = r.flops_by_module.values().sum();
        pass &= total == r.flops && within(r.flops as f64, target * 1e9, FLOP_TOL);
        parts.push(format!(
            "{name} {:.3}G vs {target}G (without scan {:.3}G)",
            r.flops as f64 / 1e9,
            r.flops_without_scan as f64 / 1e9
        ));
    }
    let vm = &reports[1].2;
    pass &= vm.local_block_delta.abs() < LOCAL_DELTA_MAX;
    parts.push(format!(
        "local branches over the 4-direction baseline {:+.1}% ({:.3}G -> {:.3}G)",
        vm.local_block_delta * 100.0,
        vm.baseline_flops as f64 / 1e9,
        vm.flops as f64 / 1e9
    ));
    g.report(2, "FLOPs within 20%, local branches < 3%", pass, parts.join("; "));
    Ok(())
}

/// Window-major enumeration written out directly.
fn local_order(side: usize, w: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(side * side);
    for wr in 0..side / w {
        for wc in 0..side / w {
            for r in 0..w {
                for c in 0..w {
                    out.push((wr * w + r) * side + wc * w + c);
                }
            }
        }
    }
    out
}

fn criterion_scan(g: &mut Gate) -> Res<()> {
    let suite = verify::check_scan_paths()?;
    let mut mismatches = Vec::new();
    let mut cases = 0;
    for (side, windows) in [(4usize, [2usize, 4]), (8, [2, 4]), (14, [2, 7])] {
        for d in candidate_set(side, side, windows)? {
            cases += 1;
            let mut want: Vec<usize> = match d.kind {
                ScanKind::Horizontal => (0..side * side).collect(),
                ScanKind::Vertical => (0..side * side).map(|k| (k % side) * side + k / side).collect(),
                ScanKind::Local { window } => local_order(side, window),
            };
            if d.flip {
                want.reverse();
            }
            if scan_order(side, side, d)?.order() != want.as_slice() {
                mismatches.push(format!("{d}@{side}"));
            }
        }
    }
    let pos = scan_order(14, 14, ScanDirection::H)?.positions();
    let gap14 = (0..14 * 13).all(|i| pos[i + 14] - pos[i] == 14);
    g.report(
        3,
        "scan-path suite",
        suite.pass && mismatches.is_empty() && gap14 && cases == 24,
        format!(
            "{}; {cases} orders match hand enumeration{}; 14-wide vertical gap 14: {gap14}",
            suite.detail,
            if mismatches.is_empty() { String::new() } else { format!(" except {}", mismatches.join(",")) }
        ),
    );
    Ok(())
}

fn criterion_ssm(g: &mut Gate) -> Res<()> {
    let t0 = Instant::now();
    let suite = verify::check_ssm_oracles(100)?;
    // closed-form discretization, including the a = 0 limit
    let mut worst = 0.0f64;
    for (a, b, d) in [(-1.0f64, 0.5f64, 0.3f64), (-0.01, 2.0, 1e-3), (-3.0, -1.0, 0.7), (0.0, 1.5, 0.2)] {
        let (ab, bb) = discretize_zoh(a, b, d)?;
        let want_b = if a == 0.0 { b * d } else { (d * a).exp_m1() / a * b };
        worst = worst.max(((ab - (d * a).exp()) / (d * a).exp()).abs());
        worst = worst.max(((bb - want_b) / want_b).abs());
    }
    let secs = t0.elapsed().as_secs_f64();
    g.report(
        4,
        "SSM oracle equivalence",
        suite.pass && worst < ORACLE_REL && secs < 60.0,
        format!("{}; ZOH closed form rel {worst:.1e} ({secs:.1}s)", suite.detail),
    );
    Ok(())
}

fn criterion_grads(g: &mut Gate) -> Res<()> {
    let t0 = Instant::now();
    let c = verify::check_gradients()?;
    let secs = t0.elapsed().as_secs_f64();
    g.report(5, "finite-difference gradients", c.pass && secs < 300.0, format!("{} ({secs:.1}s)", c.detail));
    Ok(())
}

fn criterion_mixture(g: &mut Gate) -> Res<()> {
    let c = verify::check_mixture()?;
    g.report(6, "mixture consistency", c.pass, c.detail);
    Ok(())
}

fn criterion_serialization(g: &mut Gate, toy: &Config) -> Res<()> {
    let suite = verify::check_serialization()?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("toy.lmck");
    let model = Model::<f32>::build(&toy.model, 3)?;
    save_checkpoint(&model, None, &path)?;
    let (back, _) = load_checkpoint::<f32>(&path)?;
    let bit_exact = back
        .store
        .iter()
        .zip(model.store.iter())
        .all(|((na, a), (nb, b))| na == nb && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let mut bytes = std::fs::read(&path)?;
    let at = bytes.len() / 3;
    bytes[at] ^= 0x80;
    let rejected = decode_checkpoint(&bytes).map_err(|e| e.to_string()).err().unwrap_or_default();
    let crc = rejected.contains("CRC");
    g.report(
        10,
        "serialization",
        suite.pass && bit_exact && crc,
        format!("{}; file round trip bit-exact {bit_exact}; flipped byte: {rejected}", suite.detail),
    );
    Ok(())
}

fn train_fixed(cfg: &ModelConfig, toy: &Config, seed: u64, train: &Dataset, val: &Dataset) -> Res<f64> {
    let tc = localmamba::train::TrainConfig {
        seed,
        ..toy.train.clone()
    };
    let mut t = Trainer::new(Model::<f32>::build(cfg, seed)?, &tc, train.len())?;
    let hist = fit(&mut t, train, val, tc.epochs, |_| {})?;
    Ok(hist.last().map_or(0.0, |r| r.val.top1))
}

fn training_criteria(g: &mut Gate, toy: &Config) -> Res<()> {
    let (train, val) = toy.datasets(repo())?;
    let mut everything = train.clone();
    everything.images.extend_from_slice(&val.images);
    everything.labels.extend_from_slice(&val.labels);
    let init = Model::<f32>::build(&toy.model, toy.train.seed)?;
    let chance = evaluate(&init, &everything, 250, None)?.top1;

    // Row (d) is the shipped toy model; training it at seed 0 is criterion 7's run.
    let rows = localmamba::train::ablation_configs(&toy.model)?;
    let same = Model::<f32>::build(&rows[3].1, 0)?.store.fingerprint() == Model::<f32>::build(&toy.model, 0)?.store.fingerprint();

    let mut last = Instant::now();
    let mut default_run: Option<Duration> = None;
    let table: AblationTable = ablation_harness::<f32>(&toy.model, &toy.train, &train, &val, &SEEDS, |name, seed, acc| {
        let dt = last.elapsed();
        last = Instant::now();
        eprintln!("  ablation {name} seed {seed}: {:.1}% in {:.0}s", acc * 100.0, dt.as_secs_f64());
        if name == rows[3].0 && seed == 0 {
            default_run = Some(dt);
        }
    })?;
    let d = &table.rows[3];
    let acc7 = d.accs[0];
    let dt = default_run.unwrap_or(Duration::MAX);
    g.report(
        7,
        "toy training >= 90% in 20 epochs, chance at init",
        same && acc7 >= TOY_TARGET && dt < TOY_BUDGET && (chance - CHANCE).abs() <= CHANCE_TOL,
        format!(
            "val top-1 {:.1}% after {} epochs in {:.0}s; random init {:.1}% on {} samples",
            acc7 * 100.0,
            toy.train.epochs,
            dt.as_secs_f64(),
            chance * 100.0,
            everything.len()
        ),
    );

    let [a, _, c, dd] = [&table.rows[0], &table.rows[1], &table.rows[2], &table.rows[3]];
    let trend = table
        .rows
        .iter()
        .map(|r| format!("{:.1}±{:.1}", r.mean * 100.0, r.std * 100.0))
        .collect::<Vec<_>>()
        .join(" -> ");
    g.report(
        8,
        "ablation (c) >= (a), (d) >= (c) - 0.5",
        c.mean >= a.mean && dd.mean >= c.mean - SCATTN_SLACK,
        format!("{} seeds, means {trend}", SEEDS.len()),
    );

    search_criterion(g, toy, &train, &val, &d.accs)
}

fn layout_valid(l: &DirectionLayout, blocks: usize) -> bool {
    l.validate().is_ok()
        && l.blocks.len() == blocks
        && l.blocks.iter().all(|b| {
            let mut g: Vec<String> = b.directions.iter().map(|d| d.glyph()).collect();
            g.sort();
            g.dedup();
            g.len() == KEEP
        })
}

fn search_criterion(g: &mut Gate, toy: &Config, train: &Dataset, val: &Dataset, fixed: &[f64]) -> Res<()> {
    let search = |seed: u64| -> Res<SearchOutcome> {
        let tc = localmamba::train::TrainConfig {
            seed,
            ..toy.train.clone()
        };
        Ok(run_search::<f32>(&toy.model, &tc, &toy.search, train, val, |_, _| {})?)
    };
    let first = search(SEEDS[0])?;
    let again = search(SEEDS[0])?;
    let deterministic = first == again;
    let blocks = toy.model.num_blocks();
    let mut valid = layout_valid(&first.layout, blocks);
    let mut gaps = Vec::new();
    for (i, &seed) in SEEDS.iter().enumerate() {
        let outcome = if i == 0 { first.clone() } else { search(seed)? };
        valid &= layout_valid(&outcome.layout, blocks);
        let cfg = outcome.layout.apply(&toy.model)?;
        let acc = train_fixed(&cfg, toy, seed, train, val)?;
        let glyphs: Vec<String> = outcome.layout.blocks[0].directions.iter().map(|d| d.glyph()).collect();
        eprintln!("  searched seed {seed}: block 0 [{}], retrained {:.1}%", glyphs.join(" "), acc * 100.0);
        gaps.push(acc - fixed[i]);
    }
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    g.report(
        9,
        "search deterministic with valid layouts",
        deterministic && valid,
        format!(
            "repeat identical {deterministic}, 4 distinct per block {valid}; searched - fixed {:+.1} points (within {:.1}: {})",
            mean_gap * 100.0,
            RETRAIN_SLACK * 100.0,
            mean_gap >= -RETRAIN_SLACK
        ),
    );
    Ok(())
}

fn run() -> Res<Gate> {
    let mut g = Gate { results: Vec::new() };
    let toy = load_config(&repo().join("configs/toy.json"))?;
    criterion_params(&mut g)?;
    criterion_flops(&mut g)?;
    criterion_scan(&mut g)?;
    criterion_ssm(&mut g)?;
    criterion_grads(&mut g)?;
    criterion_mixture(&mut g)?;
    if std::env::var_os("ACCEPTANCE_SKIP_TRAINING").is_some() {
        println!("SKIP [ 7] [ 8] [ 9] training criteria (ACCEPTANCE_SKIP_TRAINING set)");
    } else {
        training_criteria(&mut g, &toy)?;
    }
    criterion_serialization(&mut g, &toy)?;
    g.results.sort();
    Ok(g)
}

fn main() -> ExitCode {
    let t0 = Instant::now();
    let g = match run() {
        Ok(g) => g,
        Err(e) => {
            println!("ERROR acceptance harness: {e}");
            return ExitCode::FAILURE;
        }
    };
    let passed = g.results.iter().filter(|r| r.1).count();
    let failed: Vec<String> = g.results.iter().filter(|r| !r.1).map(|r| r.0.to_string()).collect();
    println!(
        "acceptance: {passed}/{} passed{} in {:.0}s",
        g.results.len(),
        if failed.is_empty() { String::new() } else { format!(", failed [{}]", failed.join(", ")) },
        t0.elapsed().as_secs_f64()
    );
    if !failed.is_empty() && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
