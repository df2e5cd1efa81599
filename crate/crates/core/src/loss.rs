//! Similarity, mask and regularization losses with analytic gradients.
//!
//! Each loss returns its value together with the gradient with respect to
//! its first (differentiated) argument. Vector-field gradients are laid out
//! interleaved: `[vx0, vy0, vz0, vx1, ...]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::VelocityField;
use crate::grid::Grid;
use crate::volume::{LabelMap, Volume};

/// Smoothing term of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;
/// Variance floor of the local NCC denominator.
pub const LNCC_EPS: f64 = 1e-5;
/// Relative weight of the EDT term inside the hybrid mask loss.
pub const HYBRID_EDT_SCALE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValueGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Weights of the voxel-wise, mask-wise and regularization terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gamma0: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

impl LossWeights {
    pub fn new(gamma0: f64, gamma1: f64, gamma2: f64) -> Result<Self> {
        let w = LossWeights {
            gamma0,
            gamma1,
            gamma2,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for g in [self.gamma0, self.gamma1, self.gamma2] {
            if !(g.is_finite() && g >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "loss weights must be finite and >= 0, got {self:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn combine(&self, voxel: f64, mask: f64, reg: f64) -> f64 {
        self.gamma0 * voxel + self.gamma1 * mask + self.gamma2 * reg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Mse,
    Lncc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskLossKind {
    Dice,
    Edt,
    EdtAndDice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdtLossForm {
    /// Mean squared difference.
    #[default]
    Mse,
    /// Square root of the mean squared difference.
    Rms,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::GridMismatch(format!("{} vs {} samples", a.len(), b.len())))
    }
}

pub(crate) fn mse_slices(w: &[f64], f: &[f64], roi: Option<&[bool]>) -> Result<LossValueGrad> {
    same_len(w, f)?;
    let inside = |i: usize| roi.is_none_or(|r| r[i]);
    let n = (0..w.len()).filter(|&i| inside(i)).count();
    if n == 0 {
        return Err(Error::EmptyRoi);
    }
    let inv = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; w.len()];
    for i in 0..w.len() {
        if inside(i) {
            let d = w[i] - f[i];
            value += d * d;
            grad[i] = 2.0 * d * inv;
        }
    }
    Ok(LossValueGrad {
        value: value * inv,
        grad,
    })
}

/// Mean squared error over the ROI (whole grid when `roi` is `None`).
pub fn mse_loss(warped: &Volume, fixed: &Volume, roi: Option<&[bool]>) -> Result<LossValueGrad> {
    warped.grid().ensure_same(fixed.grid())?;
    mse_slices(warped.samples(), fixed.samples(), roi)
}

/// Sum of `data` over the cubic window of radius `r` around every voxel,
/// truncated at the grid border.
pub(crate) fn box_sum(grid: &Grid, data: &[f64], r: usize) -> Vec<f64> {
    let dims = grid.dims();
    let mut cur = data.to_vec();
    let mut prefix = Vec::new();
    let mut line = Vec::new();
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
        for b in 0..dims[o2] {
            for a in 0..dims[o1] {
                let mut c = [0usize; 3];
                c[o1] = a;
                c[o2] = b;
                let start = grid.index(c[0], c[1], c[2]);
                prefix.clear();
                prefix.push(0.0);
                let mut acc = 0.0;
                for p in 0..n {
                    acc += cur[start + p * stride];
                    prefix.push(acc);
                }
                line.clear();
                for p in 0..n {
                    let lo = p.saturating_sub(r);
                    let hi = (p + r).min(n - 1);
                    line.push(prefix[hi + 1] - prefix[lo]);
                }
                for p in 0..n {
                    cur[start + p * stride] = line[p];
                }
            }
        }
    }
    cur
}

pub(crate) fn lncc_slices(grid: &Grid, w: &[f64], f: &[f64], window: usize) -> Result<LossValueGrad> {
    same_len(w, f)?;
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!(
            "LNCC window must be odd and >= 3, got {window}"
        )));
    }
    let r = window / 2;
    let n = w.len();
    let ones = vec![1.0; n];
    let count = box_sum(grid, &ones, r);
    let i_s = box_sum(grid, w, r);
    let j_s = box_sum(grid, f, r);
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>();
    let i2 = box_sum(grid, &sq(w, w), r);
    let j2 = box_sum(grid, &sq(f, f), r);
    let ij = box_sum(grid, &sq(w, f), r);

    let mut cc_sum = 0.0;
    // Per-window coefficients of the gradient expansion.
    let mut a_coef = vec![0.0; n];
    let mut a_jm = vec![0.0; n];
    let mut b_coef = vec![0.0; n];
    let mut b_im = vec![0.0; n];
    for x in 0..n {
        let cnt = count[x];
        let im = i_s[x] / cnt;
        let jm = j_s[x] / cnt;
        let cross = ij[x] - i_s[x] * jm;
        let i_var = i2[x] - i_s[x] * im;
        let j_var = j2[x] - j_s[x] * jm;
        let d = i_var * j_var + LNCC_EPS;
        cc_sum += cross * cross / d;
        let a = 2.0 * cross / d;
        let b = 2.0 * cross * cross * j_var / (d * d);
        a_coef[x] = a;
        a_jm[x] = a * jm;
        b_coef[x] = b;
        b_im[x] = b * im;
    }
    let sa = box_sum(grid, &a_coef, r);
    let saj = box_sum(grid, &a_jm, r);
    let sb = box_sum(grid, &b_coef, r);
    let sbi = box_sum(grid, &b_im, r);
    let inv = 1.0 / n as f64;
    let grad = (0..n)
        .map(|y| -inv * (f[y] * sa[y] - saj[y] - w[y] * sb[y] + sbi[y]))
        .collect();
    Ok(LossValueGrad {
        value: 1.0 - cc_sum * inv,
        grad,
    })
}

/// `1 - mean(local NCC^2)` over cubic windows of side `window`.
pub fn lncc_loss(warped: &Volume, fixed: &Volume, window: usize) -> Result<LossValueGrad> {
    warped.grid().ensure_same(fixed.grid())?;
    lncc_slices(warped.grid(), warped.samples(), fixed.samples(), window)
}

pub(crate) fn dice_slices(w: &[f64], f: &[f64], roi: Option<&[bool]>) -> Result<LossValueGrad> {
    same_len(w, f)?;
    let inside = |i: usize| roi.is_none_or(|r| r[i]);
    let mut inter = 0.0;
    let mut sw = 0.0;
    let mut sf = 0.0;
    for i in 0..w.len() {
        if inside(i) {
            inter += w[i] * f[i];
            sw += w[i];
            sf += f[i];
        }
    }
    let num = 2.0 * inter + DICE_SMOOTH;
    let den = sw + sf + DICE_SMOOTH;
    let grad = (0..w.len())
        .map(|i| {
            if inside(i) {
                -(2.0 * f[i] * den - num) / (den * den)
            } else {
                0.0
            }
        })
        .collect();
    Ok(LossValueGrad {
        value: 1.0 - num / den,
        grad,
    })
}

/// Soft Dice loss `1 - (2 sum(w f) + s) / (sum(w) + sum(f) + s)`.
pub fn soft_dice_loss(warped_mask: &Volume, fixed_mask: &Volume) -> Result<LossValueGrad> {
    warped_mask.grid().ensure_same(fixed_mask.grid())?;
    dice_slices(warped_mask.samples(), fixed_mask.samples(), None)
}

pub(crate) fn edt_slices(
    w: &[f64],
    f: &[f64],
    roi: Option<&[bool]>,
    form: EdtLossForm,
) -> Result<LossValueGrad> {
    let mse = mse_slices(w, f, roi)?;
    match form {
        EdtLossForm::Mse => Ok(mse),
        EdtLossForm::Rms => {
            let rms = mse.value.sqrt();
            let scale = if rms > 0.0 { 0.5 / rms } else { 0.0 };
            Ok(LossValueGrad {
                value: rms,
                grad: mse.grad.iter().map(|g| g * scale).collect(),
            })
        }
    }
}

/// Loss between the warped moving EDT mask and the fixed EDT mask.
pub fn edt_loss(
    warped_edt: &Volume,
    fixed_edt: &Volume,
    roi: Option<&[bool]>,
    form: EdtLossForm,
) -> Result<LossValueGrad> {
    warped_edt.grid().ensure_same(fixed_edt.grid())?;
    edt_slices(warped_edt.samples(), fixed_edt.samples(), roi, form)
}

/// Inputs of [`mask_loss`]; only those required by the chosen kind are read.
#[derive(Debug, Clone, Copy, Default)]
pub struct MaskInputs<'a> {
    pub warped_mask: Option<&'a [f64]>,
    pub fixed_mask: Option<&'a [f64]>,
    pub warped_edt: Option<&'a [f64]>,
    pub fixed_edt: Option<&'a [f64]>,
    pub roi: Option<&'a [bool]>,
    pub edt_form: EdtLossForm,
}

/// Mask loss value with gradients for whichever warped inputs it used.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskLossValueGrad {
    pub value: f64,
    pub mask_grad: Option<Vec<f64>>,
    pub edt_grad: Option<Vec<f64>>,
}

pub fn mask_loss(kind: MaskLossKind, inputs: &MaskInputs<'_>) -> Result<MaskLossValueGrad> {
    fn need<'b>(v: Option<&'b [f64]>, what: &str, kind: MaskLossKind) -> Result<&'b [f64]> {
        v.ok_or_else(|| Error::MissingInput(format!("{what} required by {kind:?} mask loss")))
    }
    let dice = |inputs: &MaskInputs<'_>| -> Result<LossValueGrad> {
        dice_slices(
            need(inputs.warped_mask, "warped mask", kind)?,
            need(inputs.fixed_mask, "fixed mask", kind)?,
            inputs.roi,
        )
    };
    let edt = |inputs: &MaskInputs<'_>| -> Result<LossValueGrad> {
        edt_slices(
            need(inputs.warped_edt, "warped EDT mask", kind)?,
            need(inputs.fixed_edt, "fixed EDT mask", kind)?,
            inputs.roi,
            inputs.edt_form,
        )
    };
    match kind {
        MaskLossKind::Dice => {
            let d = dice(inputs)?;
            Ok(MaskLossValueGrad {
                value: d.value,
                mask_grad: Some(d.grad),
                edt_grad: None,
            })
        }
        MaskLossKind::Edt => {
            let e = edt(inputs)?;
            Ok(MaskLossValueGrad {
                value: e.value,
                mask_grad: None,
                edt_grad: Some(e.grad),
            })
        }
        MaskLossKind::EdtAndDice => {
            let d = dice(inputs)?;
            let e = edt(inputs)?;
            Ok(MaskLossValueGrad {
                value: (d.value + HYBRID_EDT_SCALE * e.value) / 2.0,
                mask_grad: Some(d.grad.iter().map(|g| g / 2.0).collect()),
                edt_grad: Some(e.grad.iter().map(|g| HYBRID_EDT_SCALE * g / 2.0).collect()),
            })
        }
    }
}

pub(crate) fn l2_slices(
    grid: &Grid,
    v: &[[f64; 3]],
    region: Option<&[bool]>,
    reduction: Reduction,
) -> LossValueGrad {
    let dims = grid.dims();
    let mut grad = vec![0.0; 3 * v.len()];
    let mut value = 0.0;
    for axis in grid.active_axes() {
        let s = grid.stride(axis);
        let pairs = (0..v.len())
            .filter(|&i| grid.coords(i)[axis] + 1 < dims[axis] && region.is_none_or(|r| r[i]));
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut local = vec![0.0; 3 * v.len()];
        for i in pairs {
            let j = i + s;
            count += 1;
            for k in 0..3 {
                let d = v[j][k] - v[i][k];
                sum += d * d;
                local[3 * j + k] += 2.0 * d;
                local[3 * i + k] -= 2.0 * d;
            }
        }
        if count == 0 {
            continue;
        }
        let scale = match reduction {
            Reduction::Mean => 1.0 / count as f64,
            Reduction::Sum => 1.0,
        };
        value += sum * scale;
        for (g, l) in grad.iter_mut().zip(&local) {
            *g += l * scale;
        }
    }
    LossValueGrad { value, grad }
}

/// Diffusion regularizer: per axis, the (mean or summed) squared forward
/// difference of `v`, added over axes. With a region, only pairs whose base
/// voxel lies in the region count.
pub fn l2_diffusion(
    v: &VelocityField,
    region: Option<(&LabelMap, u32)>,
    reduction: Reduction,
) -> Result<LossValueGrad> {
    let mask = match region {
        Some((lm, label)) => {
            v.grid().ensure_same(lm.grid())?;
            Some(lm.binary(label))
        }
        None => None,
    };
    Ok(l2_slices(v.grid(), v.vectors(), mask.as_deref(), reduction))
}

/// Sum of region-restricted mean diffusion terms over every label of `lm`.
pub fn l2_diffusion_by_regions(v: &VelocityField, lm: &LabelMap) -> Result<LossValueGrad> {
    let mut total = LossValueGrad {
        value: 0.0,
        grad: vec![0.0; 3 * v.grid().len()],
    };
    for &label in lm.label_set() {
        let part = l2_diffusion(v, Some((lm, label)), Reduction::Mean)?;
        total.value += part.value;
        for (t, p) in total.grad.iter_mut().zip(&part.grad) {
            *t += p;
        }
    }
    Ok(total)
}

/// `gamma0 * voxel + gamma1 * mask + gamma2 * reg`, values and gradients.
pub fn total_loss(
    voxel: &LossValueGrad,
    mask: &LossValueGrad,
    reg: &LossValueGrad,
    w: &LossWeights,
) -> Result<LossValueGrad> {
    w.validate()?;
    let n = voxel.grad.len();
    if mask.grad.len() != n || reg.grad.len() != n {
        return Err(Error::GridMismatch("loss parts differ in layout".into()));
    }
    let grad = (0..n)
        .map(|i| w.gamma0 * voxel.grad[i] + w.gamma1 * mask.grad[i] + w.gamma2 * reg.grad[i])
        .collect();
    Ok(LossValueGrad {
        value: w.combine(voxel.value, mask.value, reg.value),
        grad,
    })
}
