//! Browser bindings: scan orders, a single-mode impulse response and the
//! size/cost report for any model config.

use wasm_bindgen::prelude::*;

use localmamba::io::inspect_report;
use localmamba::model::ModelConfig;
use localmamba::ndtensor::Tensor;
use localmamba::scan::{scan_order, ScanDirection};
use localmamba::ssm::{discretize_zoh, ssm_conv_oracle};

fn js(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn direction(kind: &str, window: usize, flip: bool) -> Result<ScanDirection, String> {
    let d = match kind {
        "h" => ScanDirection::horizontal(flip),
        "v" => ScanDirection::vertical(flip),
        "local" => ScanDirection::local(window, flip).map_err(|e| e.to_string())?,
        other => return Err(format!("unknown direction `{other}`")),
    };
    Ok(d)
}

/// Visit order of an `h`x`w` grid: element `t` is the raster index scanned at step `t`.
pub fn order(h: usize, w: usize, kind: &str, window: usize, flip: bool) -> Result<Vec<u32>, String> {
    let d = direction(kind, window, flip)?;
    let p = scan_order(h, w, d).map_err(|e| e.to_string())?;
    Ok(p.order().iter().map(|&i| i as u32).collect())
}

/// Output of a one-state SSM driven by a unit impulse, i.e. its kernel.
pub fn impulse(a: f64, b: f64, c: f64, delta: f64, len: usize) -> Result<Vec<f64>, String> {
    if len == 0 || len > 4096 {
        return Err(format!("length must be in 1..=4096, got {len}"));
    }
    let (a_bar, b_bar) = discretize_zoh(a, b, delta).map_err(|e| e.to_string())?;
    let one = |v: f64| Tensor::<f64>::from_f64(vec![1], &[v]).map_err(|e| e.to_string());
    let mut x = vec![0.0; len];
    x[0] = 1.0;
    let x = Tensor::from_f64(vec![len], &x).map_err(|e| e.to_string())?;
    let y = ssm_conv_oracle(&one(a_bar)?, &one(b_bar)?, &one(c)?, &x).map_err(|e| e.to_string())?;
    Ok(y.data().to_vec())
}

/// Parameter and FLOP report as JSON for a model config (JSON object) or a preset name.
pub fn report(config: &str) -> Result<String, String> {
    let cfg = match ModelConfig::preset(config.trim()) {
        Ok(c) => c,
        Err(_) => serde_json::from_str::<ModelConfig>(config).map_err(|e| format!("invalid model config: {e}"))?,
    };
    let r = inspect_report(&cfg).map_err(|e| e.to_string())?;
    serde_json::to_string(&r).map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = scanOrder)]
pub fn scan_order_js(h: usize, w: usize, kind: &str, window: usize, flip: bool) -> Result<Vec<u32>, JsValue> {
    order(h, w, kind, window, flip).map_err(js)
}

#[wasm_bindgen(js_name = impulseResponse)]
pub fn impulse_js(a: f64, b: f64, c: f64, delta: f64, len: usize) -> Result<Vec<f64>, JsValue> {
    impulse(a, b, c, delta, len).map_err(js)
}

#[wasm_bindgen(js_name = inspect)]
pub fn inspect_js(config: &str) -> Result<String, JsValue> {
    report(config).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn local_order_finishes_windows() {
        let o = order(4, 4, "local", 2, false).unwrap();
        assert_eq!(&o[..4], &[0, 1, 4, 5]);
        let f = order(4, 4, "local", 2, true).unwrap();
        assert_eq!(f.iter().rev().copied().collect::<Vec<_>>(), o);
        assert!(order(4, 4, "diag", 2, false).is_err());
        assert!(order(4, 4, "local", 3, false).is_err());
    }

    #[test]
    fn impulse_is_geometric() {
        let y = impulse(-1.0, 1.0, 1.0, 0.5, 6).unwrap();
        let ratio = (-0.5f64).exp();
        for t in 1..6 {
            assert!((y[t] / y[t - 1] - ratio).abs() < 1e-12);
        }
        assert!((y[0] - (1.0 - ratio)).abs() < 1e-12);
        assert!(impulse(-1.0, 1.0, 1.0, 0.5, 0).is_err());
    }

    #[test]
    fn presets_and_json_report() {
        let r: serde_json::Value = serde_json::from_str(&report("localvim_t").unwrap()).unwrap();
        assert_eq!(r["preset"], "localvim_t");
        let cfg = serde_json::to_string(&ModelConfig::preset("localvmamba_t").unwrap()).unwrap();
        let r: serde_json::Value = serde_json::from_str(&report(&cfg).unwrap()).unwrap();
        assert!(r["params"].as_u64().unwrap() > 20_000_000);
        assert!(report("{").is_err());
    }
}
