//! Windowed selective-scan vision state-space models.
//!
//! The crate is organised bottom-up:
//!
//! * [`ndtensor`]: dense tensors and a reverse-mode autodiff tape.
//! * [`scan`]: scan-order permutations over token grids (raster, column,
//!   windowed local, and their flips).
//! * [`ssm`]: zero-order-hold discretization and selective scans.
//! * [`blocks`]: spatial/channel gating, the multi-direction block and the
//!   softmax-weighted mixture block used for direction search.
//! * [`model`]: plain and hierarchical backbones, parameter and FLOP counts.
//! * [`search`]: differentiable direction search and layout export.
//! * [`train`]: toy datasets, AdamW, cosine schedule, train/eval loops and
//!   the local-scan ablation harness.
//! * [`io`]: configs, checkpoints and reports.

pub mod blocks;
pub mod error;
pub mod io;
pub mod model;
pub mod ndtensor;
pub mod params;
pub mod scan;
pub mod search;
pub mod ssm;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
