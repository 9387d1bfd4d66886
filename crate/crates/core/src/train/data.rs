//! Synthetic motif dataset and IDX ingestion.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndtensor::{substream, Element, Tensor};

/// Side of one synth cell in pixels; the motif sits at a cell's top-left.
pub const SYNTH_CELL: usize = 4;
/// Background pixels are uniform in `[0, BACKGROUND_MAX]`.
pub const BACKGROUND_MAX: f64 = 0.2;
/// Motif pixels sit this far above the background mean.
pub const CONTRAST: f64 = 0.8;

/// 2x2 on/off patterns, row-major. Every pattern is distinct, so a template
/// matcher at the known cell recovers the label exactly.
pub const MOTIFS: [[bool; 4]; 8] = [
    [true, true, false, false],
    [true, false, true, false],
    [true, false, false, true],
    [false, true, true, false],
    [true, true, true, false],
    [true, true, false, true],
    [true, false, true, true],
    [false, true, true, true],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub grid_cells: usize,
    pub classes: usize,
    pub samples: usize,
}

impl SynthSpec {
    pub fn image_size(&self) -> usize {
        self.grid_cells * SYNTH_CELL
    }
}

/// Images `[M, C, H, W]` in `[0, 1]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Stacks the listed samples into `[B, C, H, W]`.
    pub fn batch<T: Element>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::IndexOutOfRange { index: i, len: self.len() });
            }
            data.extend(self.image(i).iter().map(|&v| T::from_f64(v as f64)));
            labels.push(self.labels[i]);
        }
        let t = Tensor::new(vec![indices.len(), self.channels, self.height, self.width], data)?;
        Ok((t, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone()
        }
    }

    /// Deterministic split: the first `ceil(frac * M)` samples train.
    pub fn split(&self, frac: f64) -> (Dataset, Dataset) {
        let cut = ((self.len() as f64 * frac).ceil() as usize).min(self.len());
        let a: Vec<usize> = (0..cut).collect();
        let b: Vec<usize> = (cut..self.len()).collect();
        (self.subset(&a), self.subset(&b))
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        self.labels.iter().for_each(|&l| h[l] += 1);
        h
    }
}

/// Uniform-noise images with one class-specific 2x2 motif stamped at the
/// top-left of a random cell. Classes are balanced and sample order is
/// shuffled, so [`Dataset::split`] gives a 90/10 split of mixed classes.
pub fn synth_dataset(grid_cells: usize, classes: usize, samples: usize, seed: u64) -> Result<Dataset> {
    if grid_cells == 0 || classes < 2 || classes > MOTIFS.len() || samples == 0 {
        return Err(Error::InvalidArgument(format!(
            "synth_dataset needs grid_cells >= 1, 2 <= classes <= {}, samples >= 1; got {grid_cells}, {classes}, {samples}",
            MOTIFS.len()
        )));
    }
    let size = grid_cells * SYNTH_CELL;
    let mut labels: Vec<usize> = (0..samples).map(|i| i % classes).collect();
    labels.shuffle(&mut substream(seed, "data/order"));
    let mut rng = substream(seed, "data/pixels");
    let per = 3 * size * size;
    let mut images = Vec::with_capacity(samples * per);
    let on = (BACKGROUND_MAX / 2.0 + CONTRAST) as f32;
    for &label in &labels {
        let mut img: Vec<f32> = (0..per).map(|_| rng.gen_range(0.0..BACKGROUND_MAX) as f32).collect();
        let (cr, cc) = (rng.gen_range(0..grid_cells), rng.gen_range(0..grid_cells));
        for (k, &lit) in MOTIFS[label].iter().enumerate() {
            if lit {
                let (y, x) = (cr * SYNTH_CELL + k / 2, cc * SYNTH_CELL + k % 2);
                for ch in 0..3 {
                    img[(ch * size + y) * size + x] = on;
                }
            }
        }
        images.extend(img);
    }
    Ok(Dataset {
        images,
        labels,
        channels: 3,
        height: size,
        width: size,
        num_classes: classes,
    })
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx(format!("truncated IDX {what} header")))
}

/// Parses an IDX image/label pair (unsigned-byte payloads), scaling pixels
/// to `[0, 1]` and replicating them to three channels.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let ib = std::fs::read(images_path)?;
    let lb = std::fs::read(labels_path)?;
    parse_idx(&ib, &lb)
}

pub fn parse_idx(ib: &[u8], lb: &[u8]) -> Result<Dataset> {
    if be_u32(ib, 0, "images")? != 0x0000_0803 || be_u32(lb, 0, "labels")? != 0x0000_0801 {
        return Err(Error::Idx("bad IDX magic".into()));
    }
    let n = be_u32(ib, 4, "images")? as usize;
    let rows = be_u32(ib, 8, "images")? as usize;
    let cols = be_u32(ib, 12, "images")? as usize;
    let m = be_u32(lb, 4, "labels")? as usize;
    if n != m {
        return Err(Error::Idx(format!("IDX count mismatch: {n} images, {m} labels")));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::Idx(format!("IDX images have empty size {rows}x{cols}")));
    }
    let px = rows * cols;
    if ib.len() < 16 + n * px || lb.len() < 8 + n {
        return Err(Error::Idx("truncated IDX payload".into()));
    }
    let labels: Vec<usize> = lb[8..8 + n].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |&l| l + 1);
    let mut images = Vec::with_capacity(n * 3 * px);
    for i in 0..n {
        let src = &ib[16 + i * px..16 + (i + 1) * px];
        for _ in 0..3 {
            images.extend(src.iter().map(|&b| b as f32 / 255.0));
        }
    }
    Ok(Dataset {
        images,
        labels,
        channels: 3,
        height: rows,
        width: cols,
        num_classes,
    })
}

/// Serializes images (first channel) and labels in IDX form.
pub fn write_idx(d: &Dataset) -> (Vec<u8>, Vec<u8>) {
    let mut ib = Vec::new();
    for v in [0x0803u32, d.len() as u32, d.height as u32, d.width as u32] {
        ib.extend(v.to_be_bytes());
    }
    let px = d.height * d.width;
    for i in 0..d.len() {
        ib.extend(d.image(i)[..px].iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    let mut lb = Vec::new();
    for v in [0x0801u32, d.len() as u32] {
        lb.extend(v.to_be_bytes());
    }
    lb.extend(d.labels.iter().map(|&l| l as u8));
    (ib, lb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_deterministic() {
        let a = synth_dataset(8, 4, 1000, 0).unwrap();
        let b = synth_dataset(8, 4, 1000, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.histogram(), vec![250; 4]);
        let (tr, va) = a.split(0.9);
        assert_eq!((tr.len(), va.len()), (900, 100));
        assert!(synth_dataset(8, 9, 10, 0).is_err());
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let d = synth_dataset(2, 3, 5, 1).unwrap();
        let (ib, lb) = write_idx(&d);
        let back = parse_idx(&ib, &lb).unwrap();
        assert_eq!(back.labels, d.labels);
        assert_eq!(back.height, 8);
        let mut bad = ib.clone();
        bad[3] = 0x01;
        assert_eq!(parse_idx(&bad, &lb).unwrap_err().to_string(), "bad IDX magic");
        assert!(parse_idx(&ib[..ib.len() - 1], &lb).is_err());
        assert!(parse_idx(&ib, &lb[..lb.len() - 1]).is_err());
    }
}
