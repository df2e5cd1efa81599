//! Jacobian determinant of `x + u(x)` and the derived smoothness statistics.

use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::volume::{LabelMap, Volume};

/// Floor below which a determinant is treated as folded for the log.
pub const LOG_JACOBIAN_EPS: f64 = 1e-9;

/// `det(I + grad u)` per voxel. Central differences in the interior,
/// one-sided at the border, zero derivative along size-1 axes.
pub fn jacobian_determinant(u: &DisplacementField) -> Volume {
    let grid = *u.grid();
    let dims = grid.dims();
    let vecs = u.vectors();
    let mut out = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let c = grid.coords(i);
        // m[r][a] = d u_r / d x_a
        let mut m = [[0.0; 3]; 3];
        for a in 0..3 {
            let n = dims[a];
            if n < 2 {
                continue;
            }
            let s = grid.stride(a);
            let (lo, hi, h) = if c[a] == 0 {
                (i, i + s, 1.0)
            } else if c[a] == n - 1 {
                (i - s, i, 1.0)
            } else {
                (i - s, i + s, 2.0)
            };
            for r in 0..3 {
                m[r][a] = (vecs[hi][r] - vecs[lo][r]) / h;
            }
        }
        for (r, row) in m.iter_mut().enumerate() {
            row[r] += 1.0;
        }
        out.push(det3(&m));
    }
    Volume::new(grid, out).expect("determinants of finite fields are finite")
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// How voxels with `J <= eps` enter the log-Jacobian statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonPositivePolicy {
    /// Replace J by eps before taking the log.
    #[default]
    Clamp,
    /// Leave such voxels out.
    Exclude,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogJacobianStats {
    pub sdlogj: f64,
    /// Voxels that entered the statistic.
    pub n: usize,
    /// Voxels with `J <= eps` (clamped or excluded, depending on policy).
    pub clamped: usize,
}

/// Standard deviation of `log J` (population, two-pass), optionally within
/// `mask = (labels, label)`.
pub fn sdlogj(
    jac: &Volume,
    mask: Option<(&LabelMap, u32)>,
    policy: NonPositivePolicy,
) -> Result<LogJacobianStats> {
    if let Some((lm, _)) = mask {
        jac.grid().ensure_same(lm.grid())?;
    }
    sdlogj_where(jac, |i| mask.is_none_or(|(lm, l)| lm.labels()[i] == l), policy)
}

/// [`sdlogj`] over the voxels for which `selected` holds.
pub fn sdlogj_where(
    jac: &Volume,
    selected: impl Fn(usize) -> bool,
    policy: NonPositivePolicy,
) -> Result<LogJacobianStats> {
    let mut logs = Vec::new();
    let mut clamped = 0usize;
    let mut positive = 0usize;
    for (i, &j) in jac.samples().iter().enumerate() {
        if !selected(i) {
            continue;
        }
        if j > LOG_JACOBIAN_EPS {
            positive += 1;
            logs.push(j.ln());
        } else {
            clamped += 1;
            if policy == NonPositivePolicy::Clamp {
                logs.push(LOG_JACOBIAN_EPS.ln());
            }
        }
    }
    if positive == 0 {
        return Err(Error::AllVoxelsFolded);
    }
    let n = logs.len();
    let mean = logs.iter().sum::<f64>() / n as f64;
    let var = logs.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n as f64;
    Ok(LogJacobianStats {
        sdlogj: var.sqrt(),
        n,
        clamped,
    })
}

/// Number of voxels with `J <= 0`.
pub fn folding_count(jac: &Volume) -> usize {
    jac.samples().iter().filter(|&&j| j <= 0.0).count()
}
