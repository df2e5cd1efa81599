//! Reverse-mode gradients through trilinear warping and scaling-and-squaring.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{integrate_trajectory, VelocityField, Vec3};
use crate::grid::Grid;
use crate::interp;
use crate::volume::Volume;

/// Warp `data` by `u` and return, per output voxel, the sampled value and
/// the derivative of the sample with respect to the sampling position.
pub(crate) fn warp_with_position_grad(
    source: &Grid,
    data: &[f64],
    grid: &Grid,
    u: &[Vec3],
) -> (Vec<f64>, Vec<Vec3>) {
    let dims = grid.dims();
    let mut vals = vec![0.0; grid.len()];
    let mut grads = vec![[0.0; 3]; grid.len()];
    vals.par_chunks_mut(dims[0])
        .zip(grads.par_chunks_mut(dims[0]))
        .enumerate()
        .for_each(|(row, (vc, gc))| {
            let (y, z) = (row % dims[1], row / dims[1]);
            let base = row * dims[0];
            for x in 0..dims[0] {
                let d = u[base + x];
                let p = [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]];
                (vc[x], gc[x]) = interp::sample_with_grad(source, data, p);
            }
        });
    (vals, grads)
}

/// Pull a gradient with respect to the final displacement `u_N` back to the
/// velocity, through every step `u_{k+1}(x) = u_k(x) + u_k(x + u_k(x))`.
pub(crate) fn backprop_integration(grid: &Grid, traj: &[Vec<Vec3>], mut g: Vec<Vec3>) -> Vec<Vec3> {
    let steps = traj.len() - 1;
    let dims = grid.dims();
    for u in traj[..steps].iter().rev() {
        let mut next = g.clone();
        next.par_chunks_mut(dims[0]).enumerate().for_each(|(row, chunk)| {
            let (y, z) = (row % dims[1], row / dims[1]);
            let base = row * dims[0];
            for (x, n) in chunk.iter_mut().enumerate() {
                let d = u[base + x];
                let p = [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]];
                let (_, jac) = interp::sample_vec_with_grad(grid, u, p);
                let gi = g[base + x];
                for (a, j) in jac.iter().enumerate() {
                    n[a] += gi[0] * j[0] + gi[1] * j[1] + gi[2] * j[2];
                }
            }
        });
        let mut i = 0;
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let d = u[i];
                    let p = [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]];
                    interp::stencil(grid, p).scatter_vec(g[i], &mut next);
                    i += 1;
                }
            }
        }
        g = next;
    }
    let scale = 1.0 / (1u64 << steps) as f64;
    for w in &mut g {
        w[0] *= scale;
        w[1] *= scale;
        w[2] *= scale;
    }
    g
}

/// Gradient with respect to `v` of a loss whose gradient with respect to
/// `warp(vol, integrate(v, steps))` is `grad_wrt_warped`.
pub fn backprop_through_warp_and_integration(
    grad_wrt_warped: &[f64],
    vol: &Volume,
    v: &VelocityField,
    steps: usize,
) -> Result<Vec<Vec3>> {
    let grid = *v.grid();
    vol.grid().ensure_same(&grid)?;
    if grad_wrt_warped.len() != grid.len() {
        return Err(Error::GridMismatch(format!(
            "gradient has {} entries for {} voxels",
            grad_wrt_warped.len(),
            grid.len()
        )));
    }
    if steps == 0 {
        return Err(Error::InvalidConfig("integration steps must be >= 1".into()));
    }
    let traj = integrate_trajectory(&grid, v.vectors(), steps);
    let (_, dpos) = warp_with_position_grad(&grid, vol.samples(), &grid, &traj[steps]);
    let g_u = dpos
        .iter()
        .zip(grad_wrt_warped)
        .map(|(d, &g)| [g * d[0], g * d[1], g * d[2]])
        .collect();
    Ok(backprop_integration(&grid, &traj, g_u))
}
