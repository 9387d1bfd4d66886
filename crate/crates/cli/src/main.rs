use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use localmamba::io::{inspect_report, load_checkpoint, load_config, save_checkpoint, write_atomic, Config};
use localmamba::model::Model;
use localmamba::search::{export_directions_report, run_search, DirectionLayout};
use localmamba::train::{ablation_harness, evaluate, fit, Trainer};
use localmamba::verify;

#[derive(Parser)]
#[command(name = "localmamba", version, about = "Train, search and inspect windowed selective-scan vision models")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Overrides `train.seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for checkpoints, layouts and reports.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the direction-search supernet and write directions.json.
    Search { config: PathBuf },
    /// Train a fixed-direction model and save a checkpoint.
    Train {
        config: PathBuf,
        /// Layout written by `search`.
        #[arg(long)]
        directions: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the config's validation split.
    Eval {
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Parameter and FLOPs report, with published targets for presets.
    Inspect { config: PathBuf },
    /// Local-scan ablation over several seeds.
    Ablate {
        config: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Run the built-in oracle and property suite.
    Verify,
}

fn line(v: serde_json::Value) {
    println!("{v}");
}

fn load(path: &Path, seed: Option<u64>) -> Result<Config> {
    let mut cfg = load_config(path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn base_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

fn out_file(common: &Common, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(&common.out_dir).with_context(|| format!("cannot create {}", common.out_dir.display()))?;
    Ok(common.out_dir.join(name))
}

fn search(common: &Common, config: &Path) -> Result<()> {
    let cfg = load(config, common.seed)?;
    let (train, val) = cfg.datasets(base_dir(config))?;
    let outcome = run_search::<f32>(&cfg.model, &cfg.train, &cfg.search, &train, &val, |rec, entropy| {
        line(json!({"event": "search_epoch", "epoch": rec.train.epoch, "train_loss": rec.train.mean_loss,
            "train_acc": rec.train.acc, "val_loss": rec.val.loss, "val_top1": rec.val.top1, "alpha_entropy": entropy}));
    })?;
    let path = out_file(common, "directions.json")?;
    write_atomic(&path, outcome.layout.to_json().as_bytes())?;
    let report = export_directions_report(&outcome.layout);
    write_atomic(&out_file(common, "directions.txt")?, report.as_bytes())?;
    eprint!("{report}");
    line(json!({"event": "layout", "path": path, "blocks": outcome.layout.blocks.len()}));
    Ok(())
}

fn train(common: &Common, config: &Path, directions: Option<&Path>) -> Result<()> {
    let mut cfg = load(config, common.seed)?;
    if let Some(p) = directions {
        let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
        let layout = DirectionLayout::from_json(&text).with_context(|| format!("invalid layout {}", p.display()))?;
        cfg.model = layout.apply(&cfg.model)?;
    }
    let (train, val) = cfg.datasets(base_dir(config))?;
    let model = Model::<f32>::build(&cfg.model, cfg.train.seed)?;
    line(json!({"event": "model", "params": model.count_params(), "blocks": model.num_blocks()}));
    let mut trainer = Trainer::new(model, &cfg.train, train.len())?;
    let hist = fit(&mut trainer, &train, &val, cfg.train.epochs, |rec| {
        line(json!({"event": "epoch", "epoch": rec.train.epoch, "lr": rec.train.lr, "train_loss": rec.train.mean_loss,
            "train_acc": rec.train.acc, "val_loss": rec.val.loss, "val_top1": rec.val.top1, "skipped": rec.train.skipped}));
    })?;
    let path = out_file(common, "model.lmck")?;
    save_checkpoint(&trainer.model, Some(&trainer.opt), &path)?;
    let last = hist.last().map(|r| r.val);
    line(json!({"event": "done", "checkpoint": path, "val": last}));
    Ok(())
}

fn eval(common: &Common, config: &Path, ckpt: &Path) -> Result<()> {
    let cfg = load(config, common.seed)?;
    let (_, val) = cfg.datasets(base_dir(config))?;
    let (model, _) = load_checkpoint::<f32>(ckpt)?;
    let m = evaluate(&model, &val, cfg.train.batch, None)?;
    line(json!({"event": "eval", "checkpoint": ckpt, "samples": val.len(), "loss": m.loss, "top1": m.top1}));
    Ok(())
}

fn inspect(config: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let r = inspect_report(&cfg.model)?;
    println!("{}", serde_json::to_string_pretty(&r)?);
    Ok(())
}

fn ablate(common: &Common, config: &Path, seeds: u64) -> Result<()> {
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let cfg = load(config, common.seed)?;
    let (train, val) = cfg.datasets(base_dir(config))?;
    let first = cfg.train.seed;
    let seeds: Vec<u64> = (first..first + seeds).collect();
    let table = ablation_harness::<f32>(&cfg.model, &cfg.train, &train, &val, &seeds, |name, seed, acc| {
        line(json!({"event": "ablation_run", "config": name, "seed": seed, "val_top1": acc}));
    })?;
    write_atomic(&out_file(common, "ablation.json")?, serde_json::to_string_pretty(&table)?.as_bytes())?;
    eprint!("{table}");
    line(json!({"event": "ablation", "rows": table.rows}));
    Ok(())
}

fn verify_all() -> Result<bool> {
    let checks = verify::run_all()?;
    for c in &checks {
        line(serde_json::to_value(c)?);
    }
    Ok(checks.iter().all(|c| c.pass))
}

fn run(cli: Cli) -> Result<bool> {
    let c = &cli.common;
    match &cli.cmd {
        Cmd::Search { config } => search(c, config)?,
        Cmd::Train { config, directions } => train(c, config, directions.as_deref())?,
        Cmd::Eval { config, ckpt } => eval(c, config, ckpt)?,
        Cmd::Inspect { config } => inspect(config)?,
        Cmd::Ablate { config, seeds } => ablate(c, config, *seeds)?,
        Cmd::Verify => return verify_all(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: some checks failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
