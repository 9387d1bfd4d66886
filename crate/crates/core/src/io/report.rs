use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::Result;
use crate::model::{Directions, ModelConfig};
use crate::scan::ScanDirection;
use crate::verify::{PresetTarget, PRESET_TARGETS};

/// Size and cost summary printed by `inspect`.
#[derive(Clone, Debug, Serialize)]
pub struct InspectReport {
    pub preset: Option<String>,
    pub params: usize,
    pub params_by_module: BTreeMap<String, usize>,
    pub flops: u64,
    pub flops_by_module: BTreeMap<String, u64>,
    /// Everything except the selective-scan recurrence.
    pub flops_without_scan: u64,
    /// Same width and depth with `{H, H', V, V'}` branches and no SCAttn.
    pub baseline_flops: u64,
    /// Relative change of `flops` over `baseline_flops`.
    pub local_block_delta: f64,
    pub target: Option<PresetTarget>,
    pub params_ratio: Option<f64>,
    pub flops_ratio: Option<f64>,
}

/// The preset whose model section equals `cfg`, if any.
pub fn matching_preset(cfg: &ModelConfig) -> Option<&'static str> {
    let norm = |c: &ModelConfig| ModelConfig {
        patch_size: Some(c.patch()),
        ..c.clone()
    };
    let want = norm(cfg);
    PRESET_TARGETS
        .iter()
        .map(|t| t.name)
        .find(|n| ModelConfig::preset(n).map(|p| norm(&p) == want).unwrap_or(false))
}

pub fn inspect_report(cfg: &ModelConfig) -> Result<InspectReport> {
    let params_by_module = cfg.param_report()?;
    let params = params_by_module.values().sum();
    let fl = cfg.estimate_flops(cfg.image_size)?;
    let flops = fl.total();
    let scan = fl.modules.get("scan").map_or(0, |f| f.total());
    let baseline = ModelConfig {
        directions: Directions::Uniform(vec![
            ScanDirection::H,
            ScanDirection::H.flipped(),
            ScanDirection::V,
            ScanDirection::V.flipped(),
        ]),
        scattn: false,
        ..cfg.clone()
    };
    let baseline_flops = baseline.estimate_flops(cfg.image_size)?.total();
    let preset = matching_preset(cfg);
    let target = preset.and_then(|p| PRESET_TARGETS.iter().find(|t| t.name == p).copied());
    Ok(InspectReport {
        preset: preset.map(str::to_string),
        params,
        params_by_module,
        flops,
        flops_by_module: fl.modules.iter().map(|(k, v)| (k.clone(), v.total())).collect(),
        flops_without_scan: flops - scan,
        baseline_flops,
        local_block_delta: flops as f64 / baseline_flops as f64 - 1.0,
        target,
        params_ratio: target.map(|t| params as f64 / t.params),
        flops_ratio: target.map(|t| flops as f64 / t.flops),
    })
}
