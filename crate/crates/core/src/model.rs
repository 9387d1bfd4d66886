//! Plain (LocalVim) and hierarchical (LocalVMamba) backbones, plus analytic
//! parameter and FLOP counts.

use std::collections::BTreeMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::blocks::{BlockDims, LocalBlock, Merge};
use crate::error::{shape_err, Error, Result};
use crate::ndtensor::{Element, Tape, Tensor, Var};
use crate::params::{Bound, Initializer, ParamId, ParamStore};
use crate::scan::{candidate_set, ScanDirection};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Single-resolution stack with a learnable position embedding.
    LocalVim,
    /// Four-stage pyramid with 2x2 patch merging between stages.
    LocalVmamba,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
}

/// Which scan directions each block uses.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum Directions {
    /// `{H, H', L2, L2'}` in every block.
    #[default]
    Default,
    /// All eight candidates per block, weighted by search logits.
    Search,
    /// The same list in every block.
    Uniform(Vec<ScanDirection>),
    /// One list per block, in block order.
    PerBlock(Vec<Vec<ScanDirection>>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawDirections {
    Name(String),
    PerBlock(Vec<Vec<ScanDirection>>),
    Uniform(Vec<ScanDirection>),
}

impl Serialize for Directions {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let raw = match self {
            Directions::Default => RawDirections::Name("default".into()),
            Directions::Search => RawDirections::Name("search".into()),
            Directions::Uniform(v) => RawDirections::Uniform(v.clone()),
            Directions::PerBlock(v) => RawDirections::PerBlock(v.clone()),
        };
        raw.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Directions {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match RawDirections::deserialize(d)? {
            RawDirections::Name(n) if n == "default" => Ok(Directions::Default),
            RawDirections::Name(n) if n == "search" => Ok(Directions::Search),
            RawDirections::Name(n) => Err(serde::de::Error::custom(format!(
                "directions: expected \"default\", \"search\" or a list, got \"{n}\""
            ))),
            RawDirections::Uniform(v) => Ok(Directions::Uniform(v)),
            RawDirections::PerBlock(v) => Ok(Directions::PerBlock(v)),
        }
    }
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<usize>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(usize),
        Many(Vec<usize>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(v) => vec![v],
        OneOrMany::Many(v) => v,
    })
}

fn d_image() -> usize {
    224
}
fn d_chans() -> usize {
    3
}
fn d_classes() -> usize {
    1000
}
fn d_state() -> usize {
    16
}
fn d_expand() -> usize {
    2
}
fn d_kernel() -> usize {
    4
}
fn d_reduction() -> usize {
    8
}
fn d_true() -> bool {
    true
}
fn d_windows() -> [usize; 2] {
    crate::scan::DEFAULT_WINDOWS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default = "d_image")]
    pub image_size: usize,
    #[serde(default = "d_chans")]
    pub in_chans: usize,
    /// Defaults to 16 (plain) or 4 (hierarchical stem).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_size: Option<usize>,
    #[serde(deserialize_with = "one_or_many")]
    pub dims: Vec<usize>,
    #[serde(deserialize_with = "one_or_many")]
    pub depths: Vec<usize>,
    #[serde(default = "d_classes")]
    pub num_classes: usize,
    #[serde(default = "d_state")]
    pub state_size: usize,
    #[serde(default = "d_expand")]
    pub expand: usize,
    #[serde(default = "d_kernel")]
    pub conv_kernel: usize,
    #[serde(default = "d_reduction")]
    pub reduction: usize,
    /// Defaults to `ceil(dim / 16)` per stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt_rank: Option<usize>,
    #[serde(default = "d_true")]
    pub scattn: bool,
    #[serde(default)]
    pub directions: Directions,
    /// Local window sizes offered to the direction search.
    #[serde(default = "d_windows")]
    pub windows: [usize; 2],
    #[serde(default)]
    pub pooling: Pooling,
}

impl ModelConfig {
    pub fn local_vim(dim: usize, depth: usize) -> Self {
        ModelConfig {
            kind: ModelKind::LocalVim,
            image_size: 224,
            in_chans: 3,
            patch_size: None,
            dims: vec![dim],
            depths: vec![depth],
            num_classes: 1000,
            state_size: 16,
            expand: 2,
            conv_kernel: 4,
            reduction: 8,
            dt_rank: None,
            scattn: true,
            directions: Directions::Default,
            windows: d_windows(),
            pooling: Pooling::Mean,
        }
    }

    pub fn local_vmamba(dims: [usize; 4], depths: [usize; 4]) -> Self {
        ModelConfig {
            kind: ModelKind::LocalVmamba,
            dims: dims.to_vec(),
            depths: depths.to_vec(),
            ..Self::local_vim(0, 0)
        }
    }

    /// Published model sizes: `localvim_t`, `localvim_s`, `localvmamba_t`, `localvmamba_s`.
    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "localvim_t" => Self::local_vim(192, 20),
            "localvim_s" => Self::local_vim(384, 20),
            "localvmamba_t" => Self::local_vmamba([96, 192, 384, 768], [2, 2, 9, 2]),
            "localvmamba_s" => Self::local_vmamba([96, 192, 384, 768], [2, 2, 27, 2]),
            other => return Err(Error::Config(format!("unknown preset `{other}`"))),
        })
    }

    pub fn patch(&self) -> usize {
        self.patch_size.unwrap_or(match self.kind {
            ModelKind::LocalVim => 16,
            ModelKind::LocalVmamba => 4,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.depths.iter().sum()
    }

    pub fn is_search(&self) -> bool {
        self.directions == Directions::Search
    }

    /// Token grid of every stage for a square image.
    pub fn stage_grids(&self, image_size: usize) -> Result<Vec<(usize, usize)>> {
        self.stage_grids_hw(image_size, image_size)
    }

    pub fn stage_grids_hw(&self, height: usize, width: usize) -> Result<Vec<(usize, usize)>> {
        let p = self.patch();
        if p == 0 || height == 0 || width == 0 || height % p != 0 || width % p != 0 {
            return Err(Error::Config(format!(
                "image {height}x{width} is not divisible by patch_size {p}"
            )));
        }
        let (mut h, mut w) = (height / p, width / p);
        let mut out = vec![(h, w)];
        for s in 1..self.dims.len() {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::Config(format!(
                    "stage {s} needs an even grid to merge patches, got {h}x{w}"
                )));
            }
            h /= 2;
            w /= 2;
            out.push((h, w));
        }
        Ok(out)
    }

    pub fn block_dims(&self, stage: usize) -> BlockDims {
        let dim = self.dims[stage];
        BlockDims {
            dim,
            inner: self.expand * dim,
            state: self.state_size,
            rank: self.dt_rank.unwrap_or(dim.div_ceil(16)),
            conv_kernel: self.conv_kernel,
            reduction: self.reduction,
            scattn: self.scattn,
        }
    }

    /// Checks every structural invariant and returns the resolved per-block
    /// direction lists.
    pub fn validate(&self) -> Result<Vec<Vec<ScanDirection>>> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dims.is_empty() || self.dims.len() != self.depths.len() {
            return bad(format!(
                "dims ({}) and depths ({}) must have the same non-zero length",
                self.dims.len(),
                self.depths.len()
            ));
        }
        if self.kind == ModelKind::LocalVim && self.dims.len() != 1 {
            return bad(format!("local_vim takes a single dim/depth, got {} stages", self.dims.len()));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return bad("dims must be >= 1".into());
        }
        if self.in_chans == 0 || self.num_classes == 0 {
            return bad("in_chans and num_classes must be >= 1".into());
        }
        if self.expand == 0 {
            return bad("expand must be >= 1".into());
        }
        if self.dt_rank == Some(0) {
            return bad("dt_rank must be >= 1".into());
        }
        for s in 0..self.dims.len() {
            self.block_dims(s).validate()?;
        }
        self.directions_for(self.image_size)
    }

    /// Per-block directions resolved against the grids at `image_size`.
    pub fn directions_for(&self, image_size: usize) -> Result<Vec<Vec<ScanDirection>>> {
        self.directions_for_hw(image_size, image_size)
    }

    pub fn directions_for_hw(&self, height: usize, width: usize) -> Result<Vec<Vec<ScanDirection>>> {
        let grids = self.stage_grids_hw(height, width)?;
        let k = self.num_blocks();
        if let Directions::PerBlock(v) = &self.directions {
            if v.len() != k {
                return Err(Error::Config(format!(
                    "directions lists {} blocks but the model has {k}",
                    v.len()
                )));
            }
        }
        let mut out = Vec::with_capacity(k);
        let mut index = 0;
        for (s, &depth) in self.depths.iter().enumerate() {
            let (h, w) = grids[s];
            for _ in 0..depth {
                let dirs = match &self.directions {
                    Directions::Default => default_directions(h, w),
                    Directions::Search => candidate_set(h, w, self.windows)
                        .map_err(|e| Error::Config(format!("block {index}: {e}")))?,
                    Directions::Uniform(v) => v.clone(),
                    Directions::PerBlock(v) => v[index].clone(),
                };
                if dirs.is_empty() {
                    return Err(Error::Config(format!("block {index} has no directions")));
                }
                if let Some(d) = dirs.iter().find(|d| !d.fits(h, w)) {
                    return Err(Error::Config(format!(
                        "block {index}: direction {d} does not fit the {h}x{w} grid"
                    )));
                }
                out.push(dirs);
                index += 1;
            }
        }
        Ok(out)
    }

    /// Analytic parameter count by module, without allocating weights.
    pub fn param_report(&self) -> Result<BTreeMap<String, usize>> {
        let dirs = self.validate()?;
        let p = self.patch();
        let mut out = BTreeMap::new();
        let d0 = self.dims[0];
        out.insert("patch_embed".into(), self.in_chans * p * p * d0 + d0);
        if self.kind == ModelKind::LocalVim {
            let g = self.image_size / p;
            out.insert("pos_embed".into(), g * g * d0);
        }
        let mut blocks = 0;
        let mut merges = 0;
        let mut index = 0;
        for (s, &depth) in self.depths.iter().enumerate() {
            if s > 0 {
                let din = self.dims[s - 1];
                merges += 2 * 4 * din + 4 * din * self.dims[s];
            }
            let bd = self.block_dims(s);
            for _ in 0..depth {
                blocks += bd.param_count(dirs[index].len());
                index += 1;
            }
        }
        out.insert("blocks".into(), blocks);
        if merges > 0 {
            out.insert("merges".into(), merges);
        }
        let dl = *self.dims.last().expect("validated");
        out.insert("norm".into(), 2 * dl);
        out.insert("head".into(), dl * self.num_classes + self.num_classes);
        Ok(out)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.param_report()?.values().sum())
    }

    /// Multiply-accumulate count for one image of side `image_size`.
    pub fn estimate_flops(&self, image_size: usize) -> Result<FlopReport> {
        self.estimate_flops_hw(image_size, image_size)
    }

    pub fn estimate_flops_hw(&self, height: usize, width: usize) -> Result<FlopReport> {
        self.validate()?;
        let dirs = self.directions_for_hw(height, width)?;
        let grids = self.stage_grids_hw(height, width)?;
        let p = self.patch() as u64;
        let mut r = FlopReport::default();
        let l0 = (grids[0].0 * grids[0].1) as u64;
        let d0 = self.dims[0] as u64;
        r.add("patch_embed", Flops::token(l0 * self.in_chans as u64 * p * p * d0));
        let mut index = 0;
        for (s, &depth) in self.depths.iter().enumerate() {
            let l = grids[s].0 * grids[s].1;
            if s > 0 {
                let (din, dout) = (self.dims[s - 1] as u64, self.dims[s] as u64);
                r.add("merges", Flops::token(l as u64 * 4 * din * dout));
            }
            let bd = self.block_dims(s);
            for _ in 0..depth {
                let nb = dirs[index].len();
                let scan = bd.scan_flops(l, nb);
                let all = bd.flops(l, nb);
                r.add("blocks", Flops::token(all.per_token - scan.per_token) + Flops::fixed(all.fixed));
                r.add("scan", scan);
                index += 1;
            }
        }
        let dl = *self.dims.last().expect("validated") as u64;
        r.add("head", Flops::fixed(dl * self.num_classes as u64));
        Ok(r)
    }
}

/// Default fixed layout: raster scan, local scan and their flips. The local
/// window is 2 when it divides the grid, otherwise the smallest divisor.
pub fn default_directions(h: usize, w: usize) -> Vec<ScanDirection> {
    let window = (2..=h.min(w)).find(|&k| h % k == 0 && w % k == 0);
    let second = match window {
        Some(k) => ScanDirection::local(k, false).expect("k >= 2"),
        None => ScanDirection::V,
    };
    vec![ScanDirection::H, ScanDirection::H.flipped(), second, second.flipped()]
}

/// MAC count split into the part proportional to token count and the rest.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flops {
    pub per_token: u64,
    pub fixed: u64,
}

impl Flops {
    pub fn token(v: u64) -> Self {
        Flops { per_token: v, fixed: 0 }
    }

    pub fn fixed(v: u64) -> Self {
        Flops { per_token: 0, fixed: v }
    }

    pub fn total(&self) -> u64 {
        self.per_token + self.fixed
    }
}

impl std::ops::Add for Flops {
    type Output = Flops;

    fn add(self, o: Flops) -> Flops {
        Flops {
            per_token: self.per_token + o.per_token,
            fixed: self.fixed + o.fixed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub modules: BTreeMap<String, Flops>,
}

impl FlopReport {
    fn add(&mut self, key: &str, f: Flops) {
        let e = self.modules.entry(key.to_string()).or_default();
        *e = *e + f;
    }

    pub fn total(&self) -> u64 {
        self.modules.values().map(Flops::total).sum()
    }

    pub fn per_token(&self) -> u64 {
        self.modules.values().map(|f| f.per_token).sum()
    }
}

/// Stage-boundary 2x2 merge: concat, layer norm, bias-free projection.
#[derive(Clone, Copy, Debug)]
pub struct PatchMerge {
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
    pub w: ParamId,
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub grid: (usize, usize),
    pub merge: Option<PatchMerge>,
    pub blocks: Vec<LocalBlock>,
}

pub struct Model<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub pos_embed: Option<ParamId>,
    pub stages: Vec<Stage>,
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

fn linear<T: Element>(
    store: &mut ParamStore<T>,
    init: &Initializer,
    name: &str,
    fan_in: usize,
    shape: &[usize],
) -> Result<ParamId> {
    store.add(name, init.uniform(name, shape, 1.0 / (fan_in as f64).sqrt())?)
}

/// Splits `image [B,C,H,W]` into non-overlapping `stride x stride` patches
/// and projects each with `w [C*stride*stride, D]` plus `b [D]`. Tokens are
/// row-major over the returned grid.
pub fn patch_embed<T: Element>(
    tape: &Tape<T>,
    image: Var,
    w: Var,
    b: Var,
    stride: usize,
) -> Result<(Var, (usize, usize))> {
    let s = tape.shape(image)?;
    if s.len() != 4 {
        return shape_err(format!("patch_embed expects [B,C,H,W], got {s:?}"));
    }
    let (bsz, c, h, wd) = (s[0], s[1], s[2], s[3]);
    if stride == 0 || h % stride != 0 || wd % stride != 0 {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{wd} is not divisible by patch stride {stride}"
        )));
    }
    let (gh, gw) = (h / stride, wd / stride);
    let x = tape.reshape(image, &[bsz, c, gh, stride, gw, stride])?;
    let x = tape.transpose(x, &[0, 2, 4, 1, 3, 5])?;
    let x = tape.reshape(x, &[bsz, gh * gw, c * stride * stride])?;
    let x = tape.matmul(x, w)?;
    Ok((tape.add(x, b)?, (gh, gw)))
}

/// Concatenates each 2x2 token neighbourhood (row-major within the
/// neighbourhood), normalizes and projects `4 D_in -> D_out`.
pub fn patch_merge<T: Element>(
    tape: &Tape<T>,
    tokens: Var,
    grid: (usize, usize),
    p: &PatchMerge,
    bound: &Bound,
) -> Result<(Var, (usize, usize))> {
    let s = tape.shape(tokens)?;
    let (h, w) = grid;
    if s.len() != 3 || s[1] != h * w {
        return shape_err(format!("patch_merge expects [B,{},D], got {s:?}", h * w));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidArgument(format!("patch_merge needs an even grid, got {h}x{w}")));
    }
    let (bsz, d) = (s[0], s[2]);
    let x = tape.reshape(tokens, &[bsz, h / 2, 2, w / 2, 2, d])?;
    let x = tape.transpose(x, &[0, 1, 3, 2, 4, 5])?;
    let x = tape.reshape(x, &[bsz, (h / 2) * (w / 2), 4 * d])?;
    let x = tape.layernorm(x, bound.get(p.norm_gamma), bound.get(p.norm_beta))?;
    Ok((tape.matmul(x, bound.get(p.w))?, (h / 2, w / 2)))
}

impl<T: Element> Model<T> {
    /// Deterministic construction: every tensor draws from a substream of
    /// `seed` keyed by its name.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let dirs = cfg.validate()?;
        let init = Initializer::new(seed);
        let mut store = ParamStore::new();
        let p = cfg.patch();
        let grids = cfg.stage_grids(cfg.image_size)?;
        let d0 = cfg.dims[0];
        let fan = cfg.in_chans * p * p;
        let patch_w = linear(&mut store, &init, "patch_embed.w", fan, &[fan, d0])?;
        let patch_b = linear(&mut store, &init, "patch_embed.b", fan, &[d0])?;
        let pos_embed = match cfg.kind {
            ModelKind::LocalVim => {
                let l = grids[0].0 * grids[0].1;
                Some(store.add("pos_embed", init.uniform("pos_embed", &[l, d0], 0.02)?)?)
            }
            ModelKind::LocalVmamba => None,
        };
        let mut stages = Vec::with_capacity(cfg.dims.len());
        let mut index = 0;
        for (s, &depth) in cfg.depths.iter().enumerate() {
            let merge = if s > 0 {
                let din = cfg.dims[s - 1];
                let pre = format!("merges.{s}");
                Some(PatchMerge {
                    norm_gamma: store.add(format!("{pre}.norm.gamma"), Tensor::full(vec![4 * din], 1.0)?)?,
                    norm_beta: store.add(format!("{pre}.norm.beta"), Tensor::zeros(vec![4 * din])?)?,
                    w: linear(&mut store, &init, &format!("{pre}.w"), 4 * din, &[4 * din, cfg.dims[s]])?,
                })
            } else {
                None
            };
            let mut blocks = Vec::with_capacity(depth);
            for _ in 0..depth {
                let b = LocalBlock::init(
                    &mut store,
                    &init,
                    &format!("blocks.{index}"),
                    cfg.block_dims(s),
                    dirs[index].clone(),
                )?;
                blocks.push(b);
                index += 1;
            }
            stages.push(Stage {
                grid: grids[s],
                merge,
                blocks,
            });
        }
        let dl = *cfg.dims.last().expect("validated");
        let norm_gamma = store.add("norm.gamma", Tensor::full(vec![dl], 1.0)?)?;
        let norm_beta = store.add("norm.beta", Tensor::zeros(vec![dl])?)?;
        let head_w = linear(&mut store, &init, "head.w", dl, &[dl, cfg.num_classes])?;
        let head_b = linear(&mut store, &init, "head.b", dl, &[cfg.num_classes])?;
        Ok(Model {
            cfg: cfg.clone(),
            store,
            patch_w,
            patch_b,
            pos_embed,
            stages,
            norm_gamma,
            norm_beta,
            head_w,
            head_b,
        })
    }

    pub fn blocks(&self) -> impl Iterator<Item = &LocalBlock> {
        self.stages.iter().flat_map(|s| s.blocks.iter())
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut LocalBlock> {
        self.stages.iter_mut().flat_map(|s| s.blocks.iter_mut())
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks().count()
    }

    /// Directions actually held by each block.
    pub fn block_directions(&self) -> Vec<Vec<ScanDirection>> {
        self.blocks().map(|b| b.directions.clone()).collect()
    }

    pub fn count_params(&self) -> usize {
        self.store.count()
    }

    /// Scalar counts by top-level module (`blocks`, `head`, ...).
    pub fn param_breakdown(&self) -> BTreeMap<String, usize> {
        self.store.breakdown(1)
    }

    /// Logits `[B, classes]` for `images [B,C,H,W]`. `alpha [K, branches]`
    /// must be given for a search supernet and is ignored otherwise.
    pub fn forward(&self, tape: &Tape<T>, bound: &Bound, images: Var, alpha: Option<Var>) -> Result<Var> {
        let s = tape.shape(images)?;
        let size = self.cfg.image_size;
        if s.len() != 4 || s[1] != self.cfg.in_chans || s[2] != size || s[3] != size {
            return shape_err(format!(
                "model expects images [B,{},{size},{size}], got {s:?}",
                self.cfg.in_chans
            ));
        }
        let search = self.cfg.is_search();
        if search && alpha.is_none() {
            return Err(Error::InvalidArgument("a search supernet needs architecture logits".into()));
        }
        let (mut x, mut grid) = patch_embed(tape, images, bound.get(self.patch_w), bound.get(self.patch_b), self.cfg.patch())?;
        if let Some(pe) = self.pos_embed {
            x = tape.add(x, bound.get(pe))?;
        }
        let mut index = 0;
        for stage in &self.stages {
            if let Some(m) = &stage.merge {
                (x, grid) = patch_merge(tape, x, grid, m, bound)?;
            }
            for block in &stage.blocks {
                let merge = match (search, alpha) {
                    (true, Some(a)) => {
                        let n = block.branches.len();
                        let row = tape.narrow(a, 0, index, 1)?;
                        Merge::Weighted(tape.reshape(row, &[n])?)
                    }
                    _ => Merge::Sum,
                };
                x = block.forward(tape, bound, x, grid, merge)?;
                index += 1;
            }
        }
        let x = tape.layernorm(x, bound.get(self.norm_gamma), bound.get(self.norm_beta))?;
        let x = tape.mean(x, 1)?;
        let bsz = s[0];
        let dl = *self.cfg.dims.last().expect("validated");
        let x = tape.reshape(x, &[bsz, dl])?;
        let x = tape.matmul(x, bound.get(self.head_w))?;
        tape.add(x, bound.get(self.head_b))
    }

    /// Inference helper on plain tensors.
    pub fn logits(&self, images: &Tensor<T>, alpha: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = self.store.bind(&tape, false);
        let x = tape.constant(images.clone());
        let a = alpha.map(|a| tape.constant(a.clone()));
        let y = self.forward(&tape, &bound, x, a)?;
        let out = tape.value(y)?.clone();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stem_only_toy_count() {
        let cfg = ModelConfig {
            image_size: 16,
            patch_size: Some(4),
            dims: vec![8],
            depths: vec![0],
            num_classes: 2,
            ..ModelConfig::local_vmamba([1; 4], [0; 4])
        };
        assert_eq!(cfg.param_count().unwrap(), 426);
        let m = Model::<f32>::build(&cfg, 0).unwrap();
        assert_eq!(m.count_params(), 426);
    }

    #[test]
    fn default_window_falls_back_on_odd_grids() {
        assert_eq!(default_directions(14, 14)[2], ScanDirection::local(2, false).unwrap());
        assert_eq!(default_directions(7, 7)[2], ScanDirection::local(7, false).unwrap());
        assert_eq!(default_directions(1, 1)[2], ScanDirection::V);
    }

    #[test]
    fn directions_json_forms() {
        let d: Directions = serde_json::from_str("\"search\"").unwrap();
        assert_eq!(d, Directions::Search);
        let d: Directions = serde_json::from_str(r#"[{"kind":"h"},{"kind":"local","window":2,"flip":true}]"#).unwrap();
        assert!(matches!(d, Directions::Uniform(ref v) if v.len() == 2));
        let d: Directions = serde_json::from_str(r#"[[{"kind":"v"}]]"#).unwrap();
        assert!(matches!(d, Directions::PerBlock(ref v) if v.len() == 1));
        assert!(serde_json::from_str::<Directions>("\"sideways\"").is_err());
        let back = serde_json::to_string(&Directions::Default).unwrap();
        assert_eq!(back, "\"default\"");
    }
}
