//! Mid-slice snapshots as 8-bit binary PGM.

use std::path::Path;

use segreg::{Error, LabelMap, Result, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Plane {
    Axial,
    Coronal,
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];

    pub fn name(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }

    /// In-plane (column, row) axes and the fixed axis.
    fn axes(self) -> (usize, usize, usize) {
        match self {
            Plane::Axial => (0, 1, 2),
            Plane::Coronal => (0, 2, 1),
            Plane::Sagittal => (1, 2, 0),
        }
    }
}

/// The mid slice as `(width, height, voxel indices row by row)`.
fn mid_slice(dims: [usize; 3], plane: Plane) -> (usize, usize, Vec<usize>) {
    let (c, r, f) = plane.axes();
    let mut p = [0; 3];
    p[f] = dims[f] / 2;
    let mut idx = Vec::with_capacity(dims[c] * dims[r]);
    for row in 0..dims[r] {
        for col in 0..dims[c] {
            p[c] = col;
            p[r] = row;
            idx.push(p[0] + dims[0] * (p[1] + dims[1] * p[2]));
        }
    }
    (dims[c], dims[r], idx)
}

/// Grey levels windowed to the volume's own range.
pub fn slice_pixels(vol: &Volume, plane: Plane) -> (usize, usize, Vec<u8>) {
    let (w, h, idx) = mid_slice(vol.grid().dims(), plane);
    let (lo, hi) = vol.min_max();
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let px = idx
        .iter()
        .map(|&i| ((vol.samples()[i] - lo) * scale).round().clamp(0.0, 255.0) as u8)
        .collect();
    (w, h, px)
}

/// Pixels whose label differs from a right or lower in-plane neighbour.
pub fn contour_mask(labels: &LabelMap, plane: Plane) -> Vec<bool> {
    let (w, h, idx) = mid_slice(labels.grid().dims(), plane);
    let l = labels.labels();
    let mut out = vec![false; w * h];
    for r in 0..h {
        for c in 0..w {
            let k = r * w + c;
            if c + 1 < w && l[idx[k]] != l[idx[k + 1]] {
                out[k] = true;
                out[k + 1] = true;
            }
            if r + 1 < h && l[idx[k]] != l[idx[k + w]] {
                out[k] = true;
                out[k + w] = true;
            }
        }
    }
    out
}

pub fn encode_pgm(w: usize, h: usize, px: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(px);
    out
}

/// Writes `<prefix>_<plane>.pgm` and `<prefix>_<plane>_contours.pgm` for
/// each plane.
pub fn write_slices(vol: &Volume, labels: &LabelMap, dir: &Path, prefix: &str) -> Result<()> {
    for plane in Plane::ALL {
        let (w, h, mut px) = slice_pixels(vol, plane);
        let plain = dir.join(format!("{prefix}_{}.pgm", plane.name()));
        std::fs::write(&plain, encode_pgm(w, h, &px)).map_err(|e| io_err(&plain, e))?;
        for (p, on) in px.iter_mut().zip(contour_mask(labels, plane)) {
            if on {
                *p = 255;
            }
        }
        let over = dir.join(format!("{prefix}_{}_contours.pgm", plane.name()));
        std::fs::write(&over, encode_pgm(w, h, &px)).map_err(|e| io_err(&over, e))?;
    }
    Ok(())
}

pub fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
