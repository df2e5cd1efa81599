//! Scalar volumes and label maps on a [`Grid`].

use crate::error::{Error, Result};
use crate::grid::{BoundingBox, Grid};
use crate::interp;

/// Scalar intensities, one per voxel, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: Grid,
    samples: Vec<f64>,
}

impl Volume {
    pub fn new(grid: Grid, samples: Vec<f64>) -> Result<Self> {
        if samples.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} samples for {} voxels",
                samples.len(),
                grid.len()
            )));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid(format!("non-finite sample at voxel {i}")));
        }
        Ok(Volume { grid, samples })
    }

    pub fn filled(grid: Grid, value: f64) -> Self {
        Volume {
            samples: vec![value; grid.len()],
            grid,
        }
    }

    pub fn from_fn(grid: Grid, f: impl Fn([usize; 3]) -> f64) -> Result<Self> {
        let samples = (0..grid.len()).map(|i| f(grid.coords(i))).collect();
        Self::new(grid, samples)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.samples[self.grid.index(x, y, z)]
    }

    /// Border-clamped trilinear interpolation at continuous voxel position `p`.
    pub fn trilinear_sample(&self, p: [f64; 3]) -> f64 {
        interp::stencil(&self.grid, p).apply(&self.samples)
    }

    /// `self * (lm == label)`.
    pub fn mask_apply(&self, lm: &LabelMap, label: u32) -> Result<Volume> {
        self.grid.ensure_same(lm.grid())?;
        if !lm.contains_label(label) {
            return Err(Error::LabelNotFound(label));
        }
        let samples = self
            .samples
            .iter()
            .zip(lm.labels())
            .map(|(&v, &l)| if l == label { v } else { 0.0 })
            .collect();
        Ok(Volume {
            grid: self.grid,
            samples,
        })
    }

    pub fn crop(&self, bbox: &BoundingBox) -> Result<Volume> {
        let grid = self.grid.sub_grid(bbox)?;
        let samples = crop_slice(&self.grid, &self.samples, bbox);
        Ok(Volume { grid, samples })
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.samples
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Non-negative integer labels, one per voxel; label 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    grid: Grid,
    labels: Vec<u32>,
    label_set: Vec<u32>,
}

impl LabelMap {
    pub fn new(grid: Grid, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} labels for {} voxels",
                labels.len(),
                grid.len()
            )));
        }
        let mut label_set = labels.clone();
        label_set.sort_unstable();
        label_set.dedup();
        Ok(LabelMap {
            grid,
            labels,
            label_set,
        })
    }

    pub fn from_fn(grid: Grid, f: impl Fn([usize; 3]) -> u32) -> Result<Self> {
        let labels = (0..grid.len()).map(|i| f(grid.coords(i))).collect();
        Self::new(grid, labels)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Sorted distinct labels present in the map.
    pub fn label_set(&self) -> &[u32] {
        &self.label_set
    }

    /// Labels other than background.
    pub fn foreground_labels(&self) -> Vec<u32> {
        self.label_set.iter().copied().filter(|&l| l != 0).collect()
    }

    pub fn contains_label(&self, label: u32) -> bool {
        self.label_set.binary_search(&label).is_ok()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u32 {
        self.labels[self.grid.index(x, y, z)]
    }

    pub fn count(&self, label: u32) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Label of the nearest voxel to `p` (per-axis clamp, half-up rounding).
    pub fn nearest_sample(&self, p: [f64; 3]) -> u32 {
        self.labels[interp::nearest_index(&self.grid, p)]
    }

    pub fn binary(&self, label: u32) -> Vec<bool> {
        self.labels.iter().map(|&l| l == label).collect()
    }

    /// 0/1 indicator volume of `label`.
    pub fn indicator(&self, label: u32) -> Volume {
        Volume {
            grid: self.grid,
            samples: self
                .labels
                .iter()
                .map(|&l| if l == label { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    /// Tightest box around `label`, grown by `margin` and clipped to the grid.
    pub fn bounding_box(&self, label: u32, margin: usize) -> Result<BoundingBox> {
        let mut min = [usize::MAX; 3];
        let mut max = [0usize; 3];
        let mut found = false;
        for (i, &l) in self.labels.iter().enumerate() {
            if l == label {
                found = true;
                let c = self.grid.coords(i);
                for a in 0..3 {
                    min[a] = min[a].min(c[a]);
                    max[a] = max[a].max(c[a]);
                }
            }
        }
        if !found {
            return Err(Error::LabelNotFound(label));
        }
        Ok(BoundingBox { min, max }.dilate(margin, self.grid.dims()))
    }

    pub fn crop(&self, bbox: &BoundingBox) -> Result<LabelMap> {
        let grid = self.grid.sub_grid(bbox)?;
        LabelMap::new(grid, crop_slice(&self.grid, &self.labels, bbox))
    }
}

pub(crate) fn crop_slice<T: Copy>(grid: &Grid, data: &[T], bbox: &BoundingBox) -> Vec<T> {
    let d = bbox.dims();
    let mut out = Vec::with_capacity(d[0] * d[1] * d[2]);
    for z in bbox.min[2]..=bbox.max[2] {
        for y in bbox.min[1]..=bbox.max[1] {
            let start = grid.index(bbox.min[0], y, z);
            out.extend_from_slice(&data[start..start + d[0]]);
        }
    }
    out
}

/// Binary 6-connected erosion repeated `iterations` times; out-of-grid
/// neighbours along non-degenerate axes count as background.
pub fn erode(grid: &Grid, mask: &[bool], iterations: usize) -> Vec<bool> {
    let mut cur = mask.to_vec();
    let dims = grid.dims();
    for _ in 0..iterations {
        let prev = cur.clone();
        for (i, out) in cur.iter_mut().enumerate() {
            if !prev[i] {
                continue;
            }
            let c = grid.coords(i);
            let mut keep = true;
            for a in grid.active_axes() {
                let s = grid.stride(a);
                if c[a] == 0 || c[a] + 1 == dims[a] || !prev[i - s] || !prev[i + s] {
                    keep = false;
                    break;
                }
            }
            *out = keep;
        }
    }
    cur
}

/// Binary 6-connected dilation repeated `iterations` times.
pub fn dilate(grid: &Grid, mask: &[bool], iterations: usize) -> Vec<bool> {
    let mut cur = mask.to_vec();
    let dims = grid.dims();
    for _ in 0..iterations {
        let prev = cur.clone();
        for (i, out) in cur.iter_mut().enumerate() {
            if prev[i] {
                continue;
            }
            let c = grid.coords(i);
            for a in grid.active_axes() {
                let s = grid.stride(a);
                if (c[a] > 0 && prev[i - s]) || (c[a] + 1 < dims[a] && prev[i + s]) {
                    *out = true;
                    break;
                }
            }
        }
    }
    cur
}
