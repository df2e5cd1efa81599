//! Block-average pyramids and velocity upsampling between levels.

use rayon::prelude::*;

use crate::error::Result;
use crate::field::Vec3;
use crate::grid::Grid;
use crate::interp;

/// Grid of the level downsampled by `factor`; dims are `ceil(d / factor)`.
pub fn coarse_grid(grid: &Grid, factor: usize) -> Result<Grid> {
    let d = grid.dims();
    let s = grid.spacing();
    let o = grid.origin();
    let f = factor as f64;
    let mut dims = [1; 3];
    let mut spacing = s;
    let mut origin = o;
    for a in 0..3 {
        dims[a] = d[a].div_ceil(factor);
        if d[a] > 1 {
            spacing[a] = s[a] * f;
            origin[a] = o[a] + s[a] * (f - 1.0) / 2.0;
        }
    }
    Grid::new(dims, spacing, origin)
}

fn block_reduce<T: Copy + Send + Sync, R: Send>(
    grid: &Grid,
    data: &[T],
    factor: usize,
    reduce: impl Fn(&mut dyn Iterator<Item = T>) -> R + Sync,
) -> Result<(Grid, Vec<R>)> {
    let coarse = coarse_grid(grid, factor)?;
    let d = grid.dims();
    let out = (0..coarse.len())
        .into_par_iter()
        .map(|i| {
            let c = coarse.coords(i);
            let lo = [c[0] * factor, c[1] * factor, c[2] * factor];
            let hi = [
                (lo[0] + factor).min(d[0]),
                (lo[1] + factor).min(d[1]),
                (lo[2] + factor).min(d[2]),
            ];
            let mut it = (lo[2]..hi[2]).flat_map(move |z| {
                (lo[1]..hi[1]).flat_map(move |y| (lo[0]..hi[0]).map(move |x| data[grid.index(x, y, z)]))
            });
            reduce(&mut it)
        })
        .collect();
    Ok((coarse, out))
}

/// Mean over each `factor`-cube block (partial blocks at the far border).
pub fn downsample_mean(grid: &Grid, data: &[f64], factor: usize) -> Result<(Grid, Vec<f64>)> {
    if factor == 1 {
        return Ok((*grid, data.to_vec()));
    }
    block_reduce(grid, data, factor, |it| {
        let (sum, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        sum / n as f64
    })
}

/// True where any voxel of the block is set.
pub fn downsample_any(grid: &Grid, data: &[bool], factor: usize) -> Result<(Grid, Vec<bool>)> {
    if factor == 1 {
        return Ok((*grid, data.to_vec()));
    }
    block_reduce(grid, data, factor, |it| {
        let mut any = false;
        for b in it {
            any |= b;
        }
        any
    })
}

/// Resample a velocity from the level with factor `from_factor` onto
/// `fine` (factor `to_factor`), rescaling vectors into fine voxel units.
pub fn upsample_velocity(
    coarse: &Grid,
    v: &[Vec3],
    from_factor: usize,
    fine: &Grid,
    to_factor: usize,
) -> Vec<Vec3> {
    let ratio = to_factor as f64 / from_factor as f64;
    let scale = from_factor as f64 / to_factor as f64;
    (0..fine.len())
        .into_par_iter()
        .map(|i| {
            let c = fine.coords(i);
            let p = [
                (c[0] as f64 + 0.5) * ratio - 0.5,
                (c[1] as f64 + 0.5) * ratio - 0.5,
                (c[2] as f64 + 0.5) * ratio - 0.5,
            ];
            let s = interp::stencil(coarse, p).apply_vec(v);
            [s[0] * scale, s[1] * scale, s[2] * scale]
        })
        .collect()
}
