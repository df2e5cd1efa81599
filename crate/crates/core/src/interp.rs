//! Border-clamped trilinear interpolation stencils and their position
//! derivatives. Every warp, squaring step and adjoint in the crate goes
//! through these, so forward and reverse passes share one definition.

use crate::grid::Grid;

/// Eight corner indices and weights of a trilinear sample.
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    pub idx: [usize; 8],
    pub w: [f64; 8],
}

impl Stencil {
    #[inline]
    pub fn apply(&self, data: &[f64]) -> f64 {
        let mut acc = 0.0;
        for k in 0..8 {
            acc += self.w[k] * data[self.idx[k]];
        }
        acc
    }

    #[inline]
    pub fn apply_vec(&self, data: &[[f64; 3]]) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for k in 0..8 {
            let v = data[self.idx[k]];
            let w = self.w[k];
            acc[0] += w * v[0];
            acc[1] += w * v[1];
            acc[2] += w * v[2];
        }
        acc
    }

    /// Adjoint of [`Stencil::apply`]: distribute `g` onto the corners.
    #[inline]
    pub fn scatter(&self, g: f64, out: &mut [f64]) {
        for k in 0..8 {
            out[self.idx[k]] += self.w[k] * g;
        }
    }

    #[inline]
    pub fn scatter_vec(&self, g: [f64; 3], out: &mut [[f64; 3]]) {
        for k in 0..8 {
            let w = self.w[k];
            let o = &mut out[self.idx[k]];
            o[0] += w * g[0];
            o[1] += w * g[1];
            o[2] += w * g[2];
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct AxisWeights {
    idx: [usize; 2],
    w: [f64; 2],
    didx: [usize; 2],
    dw: [f64; 2],
}

#[inline]
fn axis_weights(p: f64, n: usize) -> AxisWeights {
    if n == 1 {
        return AxisWeights {
            idx: [0, 0],
            w: [1.0, 0.0],
            didx: [0, 0],
            dw: [0.0, 0.0],
        };
    }
    let max = (n - 1) as f64;
    if p < 0.0 {
        return AxisWeights {
            idx: [0, 1],
            w: [1.0, 0.0],
            didx: [0, 1],
            dw: [0.0, 0.0],
        };
    }
    if p > max {
        return AxisWeights {
            idx: [n - 2, n - 1],
            w: [0.0, 1.0],
            didx: [n - 2, n - 1],
            dw: [0.0, 0.0],
        };
    }
    // p >= 0 here, so truncation is floor.
    let i0 = (p as usize).min(n - 2);
    let t = p - i0 as f64;
    // At an exact interior lattice point use the symmetric subgradient.
    let (didx, dw) = if t == 0.0 && i0 >= 1 {
        ([i0 - 1, i0 + 1], [-0.5, 0.5])
    } else {
        ([i0, i0 + 1], [-1.0, 1.0])
    };
    AxisWeights {
        idx: [i0, i0 + 1],
        w: [1.0 - t, t],
        didx,
        dw,
    }
}

#[inline]
fn combine(grid: &Grid, ax: [(&[usize; 2], &[f64; 2]); 3]) -> Stencil {
    let dims = grid.dims();
    let sy = dims[0];
    let sz = dims[0] * dims[1];
    let mut idx = [0usize; 8];
    let mut w = [0.0; 8];
    let mut k = 0;
    for c in 0..2 {
        for b in 0..2 {
            for a in 0..2 {
                idx[k] = ax[0].0[a] + sy * ax[1].0[b] + sz * ax[2].0[c];
                w[k] = ax[0].1[a] * ax[1].1[b] * ax[2].1[c];
                k += 1;
            }
        }
    }
    Stencil { idx, w }
}

/// Trilinear stencil at continuous voxel position `p`, clamped per axis.
#[inline]
pub fn stencil(grid: &Grid, p: [f64; 3]) -> Stencil {
    let d = grid.dims();
    let ax = [
        axis_weights(p[0], d[0]),
        axis_weights(p[1], d[1]),
        axis_weights(p[2], d[2]),
    ];
    combine(
        grid,
        [
            (&ax[0].idx, &ax[0].w),
            (&ax[1].idx, &ax[1].w),
            (&ax[2].idx, &ax[2].w),
        ],
    )
}

/// Value stencil plus one derivative stencil per axis (d/dp_axis).
#[inline]
pub fn stencil_with_grad(grid: &Grid, p: [f64; 3]) -> (Stencil, [Stencil; 3]) {
    let d = grid.dims();
    let ax = [
        axis_weights(p[0], d[0]),
        axis_weights(p[1], d[1]),
        axis_weights(p[2], d[2]),
    ];
    let value = combine(
        grid,
        [
            (&ax[0].idx, &ax[0].w),
            (&ax[1].idx, &ax[1].w),
            (&ax[2].idx, &ax[2].w),
        ],
    );
    let gx = combine(
        grid,
        [
            (&ax[0].didx, &ax[0].dw),
            (&ax[1].idx, &ax[1].w),
            (&ax[2].idx, &ax[2].w),
        ],
    );
    let gy = combine(
        grid,
        [
            (&ax[0].idx, &ax[0].w),
            (&ax[1].didx, &ax[1].dw),
            (&ax[2].idx, &ax[2].w),
        ],
    );
    let gz = combine(
        grid,
        [
            (&ax[0].idx, &ax[0].w),
            (&ax[1].idx, &ax[1].w),
            (&ax[2].didx, &ax[2].dw),
        ],
    );
    (value, [gx, gy, gz])
}

/// Value stencil at `p` plus the position derivatives of the sampled
/// vector field, `d/dp_a data(p)` for each axis `a`. Same arithmetic as
/// applying the stencils of [`stencil_with_grad`], with one pass over the
/// corners when no axis uses the symmetric lattice-point derivative.
#[inline]
pub fn sample_vec_with_grad(grid: &Grid, data: &[[f64; 3]], p: [f64; 3]) -> (Stencil, [[f64; 3]; 3]) {
    let d = grid.dims();
    let ax = [
        axis_weights(p[0], d[0]),
        axis_weights(p[1], d[1]),
        axis_weights(p[2], d[2]),
    ];
    if ax.iter().any(|a| a.didx != a.idx) {
        let (s, g) = stencil_with_grad(grid, p);
        return (s, [g[0].apply_vec(data), g[1].apply_vec(data), g[2].apply_vec(data)]);
    }
    let value = combine(
        grid,
        [
            (&ax[0].idx, &ax[0].w),
            (&ax[1].idx, &ax[1].w),
            (&ax[2].idx, &ax[2].w),
        ],
    );
    let mut out = [[0.0; 3]; 3];
    let mut k = 0;
    for c in 0..2 {
        for b in 0..2 {
            for a in 0..2 {
                let v = data[value.idx[k]];
                let w = [
                    ax[0].dw[a] * ax[1].w[b] * ax[2].w[c],
                    ax[0].w[a] * ax[1].dw[b] * ax[2].w[c],
                    ax[0].w[a] * ax[1].w[b] * ax[2].dw[c],
                ];
                for r in 0..3 {
                    out[r][0] += w[r] * v[0];
                    out[r][1] += w[r] * v[1];
                    out[r][2] += w[r] * v[2];
                }
                k += 1;
            }
        }
    }
    (value, out)
}

/// Scalar counterpart of [`sample_vec_with_grad`]: value and gradient.
#[inline]
pub fn sample_with_grad(grid: &Grid, data: &[f64], p: [f64; 3]) -> (f64, [f64; 3]) {
    let d = grid.dims();
    let ax = [
        axis_weights(p[0], d[0]),
        axis_weights(p[1], d[1]),
        axis_weights(p[2], d[2]),
    ];
    if ax.iter().any(|a| a.didx != a.idx) {
        let (s, g) = stencil_with_grad(grid, p);
        return (s.apply(data), [g[0].apply(data), g[1].apply(data), g[2].apply(data)]);
    }
    let value = combine(
        grid,
        [
            (&ax[0].idx, &ax[0].w),
            (&ax[1].idx, &ax[1].w),
            (&ax[2].idx, &ax[2].w),
        ],
    );
    let mut val = 0.0;
    let mut out = [0.0; 3];
    let mut k = 0;
    for c in 0..2 {
        for b in 0..2 {
            for a in 0..2 {
                let v = data[value.idx[k]];
                val += value.w[k] * v;
                out[0] += ax[0].dw[a] * ax[1].w[b] * ax[2].w[c] * v;
                out[1] += ax[0].w[a] * ax[1].dw[b] * ax[2].w[c] * v;
                out[2] += ax[0].w[a] * ax[1].w[b] * ax[2].dw[c] * v;
                k += 1;
            }
        }
    }
    (val, out)
}

/// Index of the nearest voxel after clamping; ties round half-up.
#[inline]
pub fn nearest_index(grid: &Grid, p: [f64; 3]) -> usize {
    let d = grid.dims();
    let mut c = [0usize; 3];
    for a in 0..3 {
        let r = (p[a] + 0.5).floor();
        c[a] = if r <= 0.0 || r.is_nan() {
            0
        } else {
            (r as usize).min(d[a] - 1)
        };
    }
    grid.index(c[0], c[1], c[2])
}
