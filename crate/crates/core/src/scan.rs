//! Token visiting orders over an `H x W` grid.
//!
//! Flat token index is row-major (`row * W + col`). A [`Permutation`] lists,
//! for each scan position, the flat index of the token visited there.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, OnceLock, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndtensor::{Element, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScanKind {
    Horizontal,
    Vertical,
    /// Windows of `window x window` tokens, each finished before the next.
    Local { window: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawDirection", into = "RawDirection")]
pub struct ScanDirection {
    pub kind: ScanKind,
    pub flip: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDirection {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    window: Option<usize>,
    #[serde(default)]
    flip: bool,
}

impl TryFrom<RawDirection> for ScanDirection {
    type Error = String;

    fn try_from(raw: RawDirection) -> std::result::Result<Self, String> {
        let kind = match (raw.kind.as_str(), raw.window) {
            ("h", None) => ScanKind::Horizontal,
            ("v", None) => ScanKind::Vertical,
            ("h" | "v", Some(_)) => {
                return Err(format!("direction kind `{}` takes no window", raw.kind))
            }
            ("local", Some(w)) if w >= 2 => ScanKind::Local { window: w },
            ("local", Some(w)) => return Err(format!("local window must be >= 2, got {w}")),
            ("local", None) => return Err("local direction needs a `window`".into()),
            (other, _) => return Err(format!("unknown direction kind `{other}`")),
        };
        Ok(ScanDirection { kind, flip: raw.flip })
    }
}

impl From<ScanDirection> for RawDirection {
    fn from(d: ScanDirection) -> Self {
        let (kind, window) = match d.kind {
            ScanKind::Horizontal => ("h", None),
            ScanKind::Vertical => ("v", None),
            ScanKind::Local { window } => ("local", Some(window)),
        };
        RawDirection {
            kind: kind.into(),
            window,
            flip: d.flip,
        }
    }
}

impl ScanDirection {
    pub const H: ScanDirection = ScanDirection {
        kind: ScanKind::Horizontal,
        flip: false,
    };
    pub const V: ScanDirection = ScanDirection {
        kind: ScanKind::Vertical,
        flip: false,
    };

    pub fn horizontal(flip: bool) -> Self {
        ScanDirection {
            kind: ScanKind::Horizontal,
            flip,
        }
    }

    pub fn vertical(flip: bool) -> Self {
        ScanDirection {
            kind: ScanKind::Vertical,
            flip,
        }
    }

    pub fn local(window: usize, flip: bool) -> Result<Self> {
        if window < 2 {
            return Err(Error::InvalidArgument(format!(
                "local window must be >= 2, got {window}"
            )));
        }
        Ok(ScanDirection {
            kind: ScanKind::Local { window },
            flip,
        })
    }

    pub fn flipped(self) -> Self {
        ScanDirection {
            flip: !self.flip,
            ..self
        }
    }

    /// Whether this direction can be realized on an `h x w` grid.
    pub fn fits(&self, h: usize, w: usize) -> bool {
        match self.kind {
            ScanKind::Local { window } => window >= 2 && h % window == 0 && w % window == 0,
            _ => true,
        }
    }

    /// Short label: `H`, `V`, `L2`, with a trailing `'` when flipped.
    pub fn glyph(&self) -> String {
        let base = match self.kind {
            ScanKind::Horizontal => "H".to_string(),
            ScanKind::Vertical => "V".to_string(),
            ScanKind::Local { window } => format!("L{window}"),
        };
        if self.flip {
            base + "'"
        } else {
            base
        }
    }
}

impl fmt::Display for ScanDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.glyph())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    order: Arc<[usize]>,
    grid: (usize, usize),
}

impl Permutation {
    /// Validates that `order` is a bijection on `0..h*w`.
    pub fn new(order: Vec<usize>, grid: (usize, usize)) -> Result<Self> {
        let n = grid.0 * grid.1;
        if order.len() != n {
            return Err(Error::InvalidArgument(format!(
                "permutation of length {} for a {}x{} grid",
                order.len(),
                grid.0,
                grid.1
            )));
        }
        let mut seen = vec![false; n];
        for &i in &order {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidArgument(format!(
                    "order is not a bijection (entry {i})"
                )));
            }
        }
        Ok(Permutation {
            order: order.into(),
            grid,
        })
    }

    pub fn identity(h: usize, w: usize) -> Self {
        Permutation {
            order: (0..h * w).collect::<Vec<_>>().into(),
            grid: (h, w),
        }
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn indices(&self) -> Arc<[usize]> {
        self.order.clone()
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// `q` with `q[p[i]] = i`.
    pub fn invert(&self) -> Permutation {
        let mut inv = vec![0; self.order.len()];
        for (i, &p) in self.order.iter().enumerate() {
            inv[p] = i;
        }
        Permutation {
            order: inv.into(),
            grid: self.grid,
        }
    }

    /// Scan position of each flat token index (the inverse order).
    pub fn positions(&self) -> Vec<usize> {
        self.invert().order.to_vec()
    }
}

pub fn build_scan_order(h: usize, w: usize, d: ScanDirection) -> Result<Permutation> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("empty grid {h}x{w}")));
    }
    let mut order = Vec::with_capacity(h * w);
    match d.kind {
        ScanKind::Horizontal => order.extend(0..h * w),
        ScanKind::Vertical => {
            for c in 0..w {
                order.extend((0..h).map(|r| r * w + c));
            }
        }
        ScanKind::Local { window } => {
            if window < 2 || h % window != 0 || w % window != 0 {
                return Err(Error::InvalidArgument(format!(
                    "local window {window} does not divide the {h}x{w} grid"
                )));
            }
            for wr in 0..h / window {
                for wc in 0..w / window {
                    for r in 0..window {
                        let row = wr * window + r;
                        order.extend((0..window).map(|c| row * w + wc * window + c));
                    }
                }
            }
        }
    }
    if d.flip {
        order.reverse();
    }
    Permutation::new(order, (h, w))
}

type CacheKey = (usize, usize, ScanDirection);

fn cache() -> &'static RwLock<HashMap<CacheKey, Arc<Permutation>>> {
    static CACHE: OnceLock<RwLock<HashMap<CacheKey, Arc<Permutation>>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// Memoized [`build_scan_order`]; safe under concurrent readers.
pub fn scan_order(h: usize, w: usize, d: ScanDirection) -> Result<Arc<Permutation>> {
    if let Some(p) = cache().read().expect("scan cache poisoned").get(&(h, w, d)) {
        return Ok(p.clone());
    }
    let p = Arc::new(build_scan_order(h, w, d)?);
    cache()
        .write()
        .expect("scan cache poisoned")
        .entry((h, w, d))
        .or_insert(p.clone());
    Ok(p)
}

/// Reorders tokens of `x [B, L, D]` so that output token `i` is input token
/// `p.order[i]`. Differentiable (gather on axis 1).
pub fn apply_permutation<T: Element>(tape: &Tape<T>, x: Var, p: &Permutation) -> Result<Var> {
    check_len(tape, x, p)?;
    tape.gather(x, 1, p.indices())
}

/// Exact inverse of [`apply_permutation`] for the same `p`.
pub fn restore_order<T: Element>(tape: &Tape<T>, x: Var, p: &Permutation) -> Result<Var> {
    check_len(tape, x, p)?;
    tape.scatter_inverse(x, 1, p.indices())
}

fn check_len<T: Element>(tape: &Tape<T>, x: Var, p: &Permutation) -> Result<()> {
    let shape = tape.shape(x)?;
    if shape.len() != 3 || shape[1] != p.len() {
        return Err(Error::Shape(format!(
            "token tensor {shape:?} does not match a permutation over {} tokens",
            p.len()
        )));
    }
    Ok(())
}

/// Plain-tensor convenience used outside a tape.
pub fn permute_tokens<T: Element>(x: &Tensor<T>, p: &Permutation) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = apply_permutation(&tape, v, p)?;
    let out = tape.value(y)?.clone();
    Ok(out)
}

/// The eight search candidates: `{H, V, Local(w1), Local(w2)} x {unflipped, flipped}`,
/// ordered `H, H', V, V', L(w1), L(w1)', L(w2), L(w2)'`.
pub fn candidate_set(h: usize, w: usize, windows: [usize; 2]) -> Result<Vec<ScanDirection>> {
    if windows[0] == windows[1] {
        return Err(Error::InvalidArgument(format!(
            "candidate windows must differ, got {windows:?}"
        )));
    }
    let mut out = vec![
        ScanDirection::horizontal(false),
        ScanDirection::horizontal(true),
        ScanDirection::vertical(false),
        ScanDirection::vertical(true),
    ];
    for win in windows {
        let d = ScanDirection::local(win, false)?;
        if !d.fits(h, w) {
            return Err(Error::InvalidArgument(format!(
                "no valid window sizes for a {h}x{w} grid: {win} does not divide it"
            )));
        }
        out.push(d);
        out.push(d.flipped());
    }
    Ok(out)
}

/// Default local windows (2 and 7).
pub const DEFAULT_WINDOWS: [usize; 2] = [2, 7];
