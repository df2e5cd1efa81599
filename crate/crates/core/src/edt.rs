//! Exact Euclidean distance transforms.
//!
//! Separable lower-envelope passes (one 1D squared-distance transform per
//! axis), so results are exact rather than chamfer approximations.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::volume::{LabelMap, Volume};

/// Lower envelope of parabolas `w (p - pos[k])^2 + val[k]` sampled at
/// `p = 0..out.len()`. `pos` must be strictly increasing.
fn envelope(pos: &[f64], val: &[f64], w: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    if pos.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let m = pos.len();
    v.clear();
    v.resize(m, 0);
    z.clear();
    z.resize(m + 1, 0.0);
    let key = |k: usize| val[k] + w * (pos[k] * pos[k]);
    let meet = |r: usize, q: usize| (key(q) - key(r)) / (2.0 * w * (pos[q] - pos[r]));
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..m {
        let mut s = meet(v[k], q);
        while s <= z[k] {
            k -= 1;
            s = meet(v[k], q);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        let p = p as f64;
        while z[k + 1] < p {
            k += 1;
        }
        let d = p - pos[v[k]];
        *o = w * (d * d) + val[v[k]];
    }
}

/// Squared distance from every voxel to the nearest site voxel, with
/// per-axis weights (`w_a * d_a^2`). With `border_sites`, the planes just
/// outside the grid along every non-degenerate axis also count as sites.
/// Voxels with no reachable site get `+inf`.
pub fn squared_distance_to_sites(
    grid: &Grid,
    sites: &[bool],
    weights: [f64; 3],
    border_sites: bool,
) -> Vec<f64> {
    let dims = grid.dims();
    let mut f: Vec<f64> = sites
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    let mut pos = Vec::new();
    let mut val = Vec::new();
    let mut line_out = Vec::new();
    let mut v = Vec::new();
    let mut z = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        if n < 2 {
            continue;
        }
        let stride = grid.stride(axis);
        let (o1, o2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        line_out.resize(n, 0.0);
        for b in 0..dims[o2] {
            for a in 0..dims[o1] {
                let mut c = [0usize; 3];
                c[o1] = a;
                c[o2] = b;
                let start = grid.index(c[0], c[1], c[2]);
                pos.clear();
                val.clear();
                if border_sites {
                    pos.push(-1.0);
                    val.push(0.0);
                }
                for p in 0..n {
                    let fv = f[start + p * stride];
                    if fv.is_finite() {
                        pos.push(p as f64);
                        val.push(fv);
                    }
                }
                if border_sites {
                    pos.push(n as f64);
                    val.push(0.0);
                }
                envelope(&pos, &val, weights[axis], &mut line_out, &mut v, &mut z);
                for p in 0..n {
                    f[start + p * stride] = line_out[p];
                }
            }
        }
    }
    f
}

/// Distance (voxel units) from each foreground voxel to the nearest
/// background voxel centre; background maps to 0. Only when the grid holds
/// no background voxel at all does out-of-grid space stand in for it.
pub fn exact_edt(grid: &Grid, foreground: &[bool]) -> Volume {
    edt_with_weights(grid, foreground, [1.0; 3])
}

/// As [`exact_edt`], in physical units when `use_spacing` is set.
pub fn exact_edt_spacing(grid: &Grid, foreground: &[bool], use_spacing: bool) -> Volume {
    let w = if use_spacing {
        let s = grid.spacing();
        [s[0] * s[0], s[1] * s[1], s[2] * s[2]]
    } else {
        [1.0; 3]
    };
    edt_with_weights(grid, foreground, w)
}

fn edt_with_weights(grid: &Grid, foreground: &[bool], w: [f64; 3]) -> Volume {
    let background: Vec<bool> = foreground.iter().map(|&f| !f).collect();
    let any_background = background.iter().any(|&b| b);
    let sq = squared_distance_to_sites(grid, &background, w, !any_background);
    let d = sq
        .iter()
        .zip(foreground)
        .map(|(&s, &fg)| if fg { s.sqrt() } else { 0.0 })
        .collect();
    Volume::new(*grid, d).expect("distances are finite with border sites")
}

/// Region-interior weighting in `[0, 1]`: the EDT of one label divided by
/// its maximum. Background voxels are exactly 0.
#[derive(Debug, Clone, PartialEq)]
pub struct EdtMask(Volume);

impl EdtMask {
    pub fn volume(&self) -> &Volume {
        &self.0
    }

    pub fn into_volume(self) -> Volume {
        self.0
    }

    pub fn grid(&self) -> &Grid {
        self.0.grid()
    }

    pub fn values(&self) -> &[f64] {
        self.0.samples()
    }
}

pub fn normalized_edt_mask(lm: &LabelMap, label: u32) -> Result<EdtMask> {
    normalized_edt_mask_spacing(lm, label, false)
}

pub fn normalized_edt_mask_spacing(lm: &LabelMap, label: u32, use_spacing: bool) -> Result<EdtMask> {
    if !lm.contains_label(label) {
        return Err(Error::LabelNotFound(label));
    }
    let fg = lm.binary(label);
    let d = exact_edt_spacing(lm.grid(), &fg, use_spacing);
    let max = d.samples().iter().copied().fold(0.0, f64::max);
    let values = if max > 0.0 {
        d.samples().iter().map(|&v| v / max).collect()
    } else {
        fg.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    };
    Ok(EdtMask(Volume::new(*lm.grid(), values)?))
}
