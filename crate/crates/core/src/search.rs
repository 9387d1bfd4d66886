//! Differentiable scan-direction search: a supernet whose blocks mix all
//! eight candidate branches through per-block softmax weights, trained
//! jointly with the weights, followed by top-4 selection.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Directions, Model, ModelConfig, ModelKind};
use crate::ndtensor::{Element, Tensor};
use crate::scan::ScanDirection;
use crate::train::{fit, AdamW, AdamWConfig, AlphaState, Dataset, EpochRecord, TrainConfig, Trainer};

/// Number of candidate directions per block.
pub const CANDIDATES: usize = 8;
/// Directions kept per block after the search.
pub const KEEP: usize = 4;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    /// Defaults to a third of the training epochs (at least one).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    /// Defaults to ten times the weight learning rate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_lr: Option<f64>,
    /// Width of the first supernet stage; later stages scale with it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supernet_dim: Option<usize>,
}

impl SearchConfig {
    pub fn epochs(&self, train: &TrainConfig) -> usize {
        self.epochs.unwrap_or((train.epochs / 3).max(1))
    }

    pub fn alpha_lr(&self, train: &TrainConfig) -> f64 {
        self.alpha_lr.unwrap_or(10.0 * train.lr)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == Some(0) || self.supernet_dim == Some(0) {
            return Err(Error::Config("search.epochs and search.supernet_dim must be >= 1".into()));
        }
        if matches!(self.alpha_lr, Some(lr) if !(lr >= 0.0)) {
            return Err(Error::Config("search.alpha_lr must be >= 0".into()));
        }
        Ok(())
    }
}

/// Architecture logits, one row of [`CANDIDATES`] per block.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchState<T> {
    pub alpha: Tensor<T>,
}

pub fn init_search_state<T: Element>(blocks: usize) -> Result<SearchState<T>> {
    if blocks == 0 {
        return Err(Error::InvalidArgument("search needs at least one block".into()));
    }
    Ok(SearchState {
        alpha: Tensor::zeros(vec![blocks, CANDIDATES])?.with_requires_grad(),
    })
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl<T: Element> SearchState<T> {
    pub fn blocks(&self) -> usize {
        self.alpha.shape()[0]
    }

    pub fn row(&self, k: usize) -> Vec<f64> {
        self.alpha.data()[k * CANDIDATES..(k + 1) * CANDIDATES]
            .iter()
            .map(|v| v.as_f64())
            .collect()
    }

    pub fn probs(&self, k: usize) -> Vec<f64> {
        softmax(&self.row(k))
    }

    /// Mean Shannon entropy (nats) of the per-block softmax.
    pub fn mean_entropy(&self) -> f64 {
        let k = self.blocks();
        (0..k)
            .map(|i| {
                -self
                    .probs(i)
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|p| p * p.ln())
                    .sum::<f64>()
            })
            .sum::<f64>()
            / k as f64
    }

    /// Size of the discrete space of layouts, `C(8,4)^K`, as a base-10 exponent.
    pub fn log10_space_size(&self) -> f64 {
        self.blocks() as f64 * 70f64.log10()
    }
}

/// Indices of the `k` largest logits, largest first; ties go to the lower index.
pub fn select_topk(row: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > row.len() {
        return Err(Error::InvalidArgument(format!("cannot select {k} of {} directions", row.len())));
    }
    if row.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "select_topk".into() });
    }
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutBlock {
    pub directions: Vec<ScanDirection>,
    /// Softmax probabilities of the kept directions over all candidates.
    pub probs: Vec<f64>,
}

/// Per-block searched directions, the hand-off between search and retraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectionLayout {
    pub blocks: Vec<LayoutBlock>,
}

impl DirectionLayout {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("direction layout has no blocks".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.directions.len() != KEEP || b.probs.len() != KEEP {
                return Err(Error::Config(format!(
                    "layout block {i} needs {KEEP} directions and probabilities, got {} and {}",
                    b.directions.len(),
                    b.probs.len()
                )));
            }
            for (j, d) in b.directions.iter().enumerate() {
                if b.directions[..j].contains(d) {
                    return Err(Error::Config(format!("layout block {i} repeats direction {d}")));
                }
            }
            if b.probs.iter().any(|p| !(0.0..=1.0).contains(p)) || b.probs.iter().sum::<f64>() > 1.0 + 1e-9 {
                return Err(Error::Config(format!("layout block {i} has invalid probabilities")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("layout serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let l: DirectionLayout = serde_json::from_str(text)?;
        l.validate()?;
        Ok(l)
    }

    pub fn directions(&self) -> Directions {
        Directions::PerBlock(self.blocks.iter().map(|b| b.directions.clone()).collect())
    }

    /// `cfg` with its directions replaced by this layout.
    pub fn apply(&self, cfg: &ModelConfig) -> Result<ModelConfig> {
        let out = ModelConfig {
            directions: self.directions(),
            ..cfg.clone()
        };
        out.validate()?;
        Ok(out)
    }
}

/// Top-4 directions of every block. `cfg` supplies the candidate order.
pub fn export_architecture<T: Element>(state: &SearchState<T>, cfg: &ModelConfig) -> Result<DirectionLayout> {
    let cands = ModelConfig {
        directions: Directions::Search,
        ..cfg.clone()
    }
    .validate()?;
    if cands.len() != state.blocks() {
        return Err(Error::InvalidArgument(format!(
            "search state has {} rows but the model has {} blocks",
            state.blocks(),
            cands.len()
        )));
    }
    let blocks = cands
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let probs = state.probs(k);
            let top = select_topk(&state.row(k), KEEP)?;
            Ok(LayoutBlock {
                directions: top.iter().map(|&i| c[i]).collect(),
                probs: top.iter().map(|&i| probs[i]).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DirectionLayout { blocks })
}

/// Per-layer table of glyphs and probabilities followed by the JSON layout.
pub fn export_directions_report(layout: &DirectionLayout) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<6} {:<40} probs", "block", "directions");
    for (i, b) in layout.blocks.iter().enumerate() {
        let glyphs: Vec<String> = b.directions.iter().map(|d| d.glyph()).collect();
        let probs: Vec<String> = b.probs.iter().map(|p| format!("{p:.3}")).collect();
        let _ = writeln!(s, "{:<6} {:<40} {}", i, glyphs.join(" "), probs.join(" "));
    }
    s.push('\n');
    s.push_str(&layout.to_json());
    s.push('\n');
    s
}

/// Search-time model: every block carries all candidates, optionally at a
/// reduced width.
pub fn supernet_config(cfg: &ModelConfig, search: &SearchConfig) -> ModelConfig {
    let mut out = ModelConfig {
        directions: Directions::Search,
        ..cfg.clone()
    };
    if let Some(d) = search.supernet_dim {
        out.dims = match cfg.kind {
            ModelKind::LocalVim => vec![d],
            ModelKind::LocalVmamba => cfg.dims.iter().map(|&x| (x * d / cfg.dims[0]).max(1)).collect(),
        };
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchMetrics {
    pub loss: f64,
    pub alpha_entropy: f64,
    pub applied: bool,
}

/// A supernet trainer carrying its architecture logits.
pub struct Supernet<T> {
    pub trainer: Trainer<T>,
}

impl<T: Element> Supernet<T> {
    pub fn build(cfg: &ModelConfig, train: &TrainConfig, search: &SearchConfig, train_len: usize) -> Result<Self> {
        search.validate()?;
        let scfg = supernet_config(cfg, search);
        let model = Model::build(&scfg, train.seed)?;
        let state = init_search_state::<T>(model.num_blocks())?;
        let tc = TrainConfig {
            epochs: search.epochs(train),
            ..train.clone()
        };
        let mut trainer = Trainer::new(model, &tc, train_len)?;
        let opt = AdamW::new(
            std::slice::from_ref(&state.alpha),
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            vec![false],
        )?;
        trainer.alpha = Some(AlphaState {
            logits: state.alpha,
            opt,
            base_lr: search.alpha_lr(train),
        });
        Ok(Supernet { trainer })
    }

    pub fn state(&self) -> SearchState<T> {
        SearchState {
            alpha: self.trainer.alpha.as_ref().expect("supernet has logits").logits.clone(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.trainer.model.cfg
    }

    /// Branch count of every block.
    pub fn branch_counts(&self) -> Vec<usize> {
        self.trainer.model.blocks().map(|b| b.branches.len()).collect()
    }
}

/// One joint step: a single forward/backward pass, then the weights
/// (decoupled decay) and the logits (no decay) each take an AdamW step.
/// A non-finite loss skips both updates.
pub fn supernet_train_step<T: Element>(
    net: &mut Supernet<T>,
    images: &Tensor<T>,
    labels: &[usize],
    lr: f64,
    alpha_lr: f64,
) -> Result<SearchMetrics> {
    let r = net.trainer.train_batch(images, labels, lr, alpha_lr)?;
    Ok(SearchMetrics {
        loss: r.loss / labels.len().max(1) as f64,
        alpha_entropy: net.state().mean_entropy(),
        applied: r.applied,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub layout: DirectionLayout,
    pub history: Vec<EpochRecord>,
    pub entropy: Vec<f64>,
}

/// Trains the supernet for the search budget and exports the top-4 layout.
pub fn run_search<T: Element>(
    cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    search: &SearchConfig,
    train: &Dataset,
    val: &Dataset,
    mut on_epoch: impl FnMut(&EpochRecord, f64),
) -> Result<SearchOutcome> {
    let mut net = Supernet::<T>::build(cfg, train_cfg, search, train.len())?;
    let epochs = search.epochs(train_cfg);
    let mut entropy = Vec::with_capacity(epochs);
    let mut history = Vec::with_capacity(epochs);
    for e in 0..epochs {
        let rec = fit(&mut net.trainer, train, val, 1, |_| {})?.remove(0);
        let rec = EpochRecord {
            train: crate::train::EpochMetrics { epoch: e, ..rec.train },
            ..rec
        };
        let h = net.state().mean_entropy();
        on_epoch(&rec, h);
        entropy.push(h);
        history.push(rec);
    }
    let layout = export_architecture(&net.state(), net.config())?;
    Ok(SearchOutcome { layout, history, entropy })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_examples() {
        let row = [3.0, 2.5, 0.1, -0.2, 1.7, 0.3, 2.9, -1.0];
        assert_eq!(select_topk(&row, 4).unwrap(), vec![0, 6, 1, 4]);
        assert_eq!(select_topk(&[0.0; 8], 4).unwrap(), vec![0, 1, 2, 3]);
        assert!(select_topk(&[0.0; 8], 9).is_err());
    }

    #[test]
    fn zero_state_is_uniform() {
        let s = init_search_state::<f64>(4).unwrap();
        assert_eq!(s.alpha.shape(), &[4, 8]);
        for k in 0..4 {
            let p = s.probs(k);
            assert!(p.iter().all(|&x| (x - 0.125).abs() < 1e-15));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((s.mean_entropy() - 8f64.ln()).abs() < 1e-12);
        assert!(init_search_state::<f64>(0).is_err());
    }
}
