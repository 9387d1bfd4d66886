//! Four-way local-scan ablation: raster only, local only, both, both with
//! SCAttn, each trained under identical budgets across several seeds.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::{fit, Dataset, TrainConfig, Trainer};
use crate::error::Result;
use crate::model::{Directions, Model, ModelConfig};
use crate::ndtensor::Element;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub directions: Vec<String>,
    pub scattn: bool,
    pub params: usize,
    pub accs: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>9} {:>8} {:>7}", "config", "params", "mean", "std")?;
        for r in &self.rows {
            writeln!(f, "{:<28} {:>9} {:>7.2}% {:>6.2}", r.name, r.params, 100.0 * r.mean, 100.0 * r.std)?;
        }
        Ok(())
    }
}

/// The four configurations, each resolved per block from the default
/// layout `{H, H', Lk, Lk'}`.
pub fn ablation_configs(base: &ModelConfig) -> Result<Vec<(String, ModelConfig)>> {
    let resolved = ModelConfig {
        directions: Directions::Default,
        ..base.clone()
    }
    .validate()?;
    let pick = |range: std::ops::Range<usize>| {
        Directions::PerBlock(resolved.iter().map(|d| d[range.clone()].to_vec()).collect())
    };
    let make = |dirs: Directions, scattn: bool| ModelConfig {
        directions: dirs,
        scattn,
        ..base.clone()
    };
    Ok(vec![
        ("(a) horizontal + flip".into(), make(pick(0..2), false)),
        ("(b) local + flip".into(), make(pick(2..4), false)),
        ("(c) horizontal + local".into(), make(pick(0..4), false)),
        ("(d) horizontal + local + SCAttn".into(), make(pick(0..4), true)),
    ])
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Trains every configuration once per seed and reports final validation
/// top-1 as mean and sample standard deviation.
pub fn ablation_harness<T: Element>(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    seeds: &[u64],
    mut on_run: impl FnMut(&str, u64, f64),
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for (name, cfg) in ablation_configs(base)? {
        let mut accs = Vec::with_capacity(seeds.len());
        let mut params = 0;
        for &seed in seeds {
            let model = Model::<T>::build(&cfg, seed)?;
            params = model.count_params();
            let tc = TrainConfig {
                seed,
                ..train_cfg.clone()
            };
            let mut trainer = Trainer::new(model, &tc, train.len())?;
            let hist = fit(&mut trainer, train, val, tc.epochs, |_| {})?;
            let acc = match hist.last() {
                Some(r) => r.val.top1,
                None => trainer.evaluate(val)?.top1,
            };
            on_run(&name, seed, acc);
            accs.push(acc);
        }
        let (mean, std) = mean_std(&accs);
        rows.push(AblationRow {
            name,
            directions: cfg
                .validate()?
                .first()
                .map(|d| d.iter().map(|x| x.glyph()).collect())
                .unwrap_or_default(),
            scattn: cfg.scattn,
            params,
            accs,
            mean,
            std,
        });
    }
    Ok(AblationTable { rows })
}
