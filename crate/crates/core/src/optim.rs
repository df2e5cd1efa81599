//! Per-region instance optimization: Adam on a stationary velocity field,
//! coarse to fine, with the exact gradient of the total loss.

use std::io::Write;

use crate::adjoint::{backprop_integration, warp_with_position_grad};
use crate::edt::EdtMask;
use crate::error::{Error, Result};
use crate::field::{integrate_trajectory, integrate_velocity, uncrop_displacement, Vec3};
use crate::field::{DisplacementField, VelocityField};
use crate::grid::{BoundingBox, Grid};
use crate::loss::{
    l2_slices, lncc_slices, mask_loss, mse_slices, EdtLossForm, LossWeights, MaskInputs,
    MaskLossKind, Reduction, Similarity,
};
use crate::resample::{downsample_any, downsample_mean, upsample_velocity};
use crate::volume::{dilate, LabelMap, Volume};

/// Adam hyperparameters for one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Moment estimates and step count of an Adam run.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u32,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam step, in place.
pub fn adam_update(state: &mut AdamState, params: &mut [f64], grad: &[f64], hp: &AdamParams) {
    assert_eq!(params.len(), grad.len());
    assert_eq!(params.len(), state.m.len());
    state.t += 1;
    let c1 = 1.0 - hp.beta1.powi(state.t as i32);
    let c2 = 1.0 - hp.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= hp.lr * mh / (vh.sqrt() + hp.eps);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    /// Iterations per level.
    pub iterations: usize,
    pub learning_rate: f64,
    /// Polynomial decay of the learning rate within a level; 0 keeps it constant.
    pub lr_decay_power: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
    pub similarity: Similarity,
    pub lncc_window: usize,
    pub mask_loss: MaskLossKind,
    pub edt_loss_form: EdtLossForm,
    pub integration_steps: usize,
    /// Downsampling factors, coarse to fine; must end with 1.
    pub levels: Vec<usize>,
    /// Dilation (voxels) of the region supports forming the voxel-loss ROI.
    pub roi_dilation: usize,
    /// Recorded for provenance; the solver itself draws no random numbers.
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            iterations: 150,
            learning_rate: 0.05,
            lr_decay_power: 0.9,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weights: LossWeights {
                gamma0: 1.0,
                gamma1: 0.1,
                gamma2: 0.01,
            },
            similarity: Similarity::Mse,
            lncc_window: 9,
            mask_loss: MaskLossKind::Dice,
            edt_loss_form: EdtLossForm::Mse,
            integration_steps: 7,
            levels: vec![8, 4, 2, 1],
            roi_dilation: 2,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.lr_decay_power.is_finite() && self.lr_decay_power >= 0.0) {
            return bad(format!("lr_decay_power must be >= 0, got {}", self.lr_decay_power));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        self.weights.validate()?;
        if self.lncc_window < 3 || self.lncc_window.is_multiple_of(2) {
            return bad(format!("lncc_window must be odd and >= 3, got {}", self.lncc_window));
        }
        if !(1..=30).contains(&self.integration_steps) {
            return bad(format!(
                "integration_steps must lie in 1..=30, got {}",
                self.integration_steps
            ));
        }
        if self.levels.last() != Some(&1) || self.levels.contains(&0) {
            return bad(format!(
                "levels must be positive and end with 1, got {:?}",
                self.levels
            ));
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamParams {
        AdamParams {
            lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// The masked image pair of one region, on a (possibly cropped) grid.
#[derive(Debug, Clone)]
pub struct RegionPair {
    pub label: u32,
    pub moving: Volume,
    pub fixed: Volume,
    /// Binary support maps (1 inside the region, 0 outside).
    pub moving_mask: LabelMap,
    pub fixed_mask: LabelMap,
    pub moving_edt: EdtMask,
    pub fixed_edt: EdtMask,
    /// Crop box in full-grid coordinates.
    pub bbox: BoundingBox,
    pub full_grid: Grid,
}

impl RegionPair {
    pub fn grid(&self) -> &Grid {
        self.moving.grid()
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.grid();
        for other in [
            self.fixed.grid(),
            self.moving_mask.grid(),
            self.fixed_mask.grid(),
            self.moving_edt.grid(),
            self.fixed_edt.grid(),
        ] {
            g.ensure_same(other)?;
        }
        self.bbox.check_inside(self.full_grid.dims())?;
        if self.bbox.dims() != g.dims() {
            return Err(Error::GridMismatch(format!(
                "crop box dims {:?} differ from region grid dims {:?}",
                self.bbox.dims(),
                g.dims()
            )));
        }
        if self.fixed_mask.count(1) == 0 || self.moving_mask.count(1) == 0 {
            return Err(Error::EmptyRegion(self.label));
        }
        Ok(())
    }
}

/// Loss values at one iteration, before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub total: f64,
    pub voxel: f64,
    pub mask: f64,
    pub reg: f64,
}

#[derive(Debug, Clone)]
pub struct RegionResult {
    pub label: u32,
    /// Final velocity on the region's (cropped) grid.
    pub velocity: VelocityField,
    /// Final displacement embedded into the full grid.
    pub displacement: DisplacementField,
    pub loss_trace: Vec<LossRecord>,
    /// Number of trace entries contributed by each level.
    pub level_iterations: Vec<usize>,
}

/// The region problem resampled to one pyramid level.
struct LevelProblem<'a> {
    grid: Grid,
    moving: Vec<f64>,
    fixed: Vec<f64>,
    moving_mask: Vec<f64>,
    fixed_mask: Vec<f64>,
    moving_edt: Vec<f64>,
    fixed_edt: Vec<f64>,
    roi: Vec<bool>,
    cfg: &'a OptimizerConfig,
}

impl<'a> LevelProblem<'a> {
    fn new(pair: &RegionPair, roi: &[bool], factor: usize, cfg: &'a OptimizerConfig) -> Result<Self> {
        let g = pair.grid();
        let down = |d: &[f64]| downsample_mean(g, d, factor).map(|(_, v)| v);
        // Masks stay binary on every level (block majority).
        let binary = |lm: &LabelMap| -> Result<Vec<f64>> {
            let ind: Vec<f64> = lm.labels().iter().map(|&l| f64::from(l == 1)).collect();
            Ok(down(&ind)?.into_iter().map(|m| f64::from(m >= 0.5)).collect())
        };
        let (grid, roi) = downsample_any(g, roi, factor)?;
        Ok(LevelProblem {
            grid,
            moving: down(pair.moving.samples())?,
            fixed: down(pair.fixed.samples())?,
            moving_mask: binary(&pair.moving_mask)?,
            fixed_mask: binary(&pair.fixed_mask)?,
            moving_edt: down(pair.moving_edt.values())?,
            fixed_edt: down(pair.fixed_edt.values())?,
            roi,
            cfg,
        })
    }

    fn evaluate(&self, v: &[Vec3]) -> Result<(LossRecord, Vec<Vec3>)> {
        let cfg = self.cfg;
        let w = cfg.weights;
        let g = &self.grid;
        let traj = integrate_trajectory(g, v, cfg.integration_steps);
        let u = &traj[cfg.integration_steps];

        let (wi, di) = warp_with_position_grad(g, &self.moving, g, u);
        let voxel = match cfg.similarity {
            Similarity::Mse => mse_slices(&wi, &self.fixed, Some(&self.roi))?,
            Similarity::Lncc => lncc_slices(g, &wi, &self.fixed, cfg.lncc_window)?,
        };
        let uses_dice = matches!(cfg.mask_loss, MaskLossKind::Dice | MaskLossKind::EdtAndDice);
        let uses_edt = matches!(cfg.mask_loss, MaskLossKind::Edt | MaskLossKind::EdtAndDice);
        let wm = uses_dice.then(|| warp_with_position_grad(g, &self.moving_mask, g, u));
        let we = uses_edt.then(|| warp_with_position_grad(g, &self.moving_edt, g, u));
        let mask = mask_loss(
            cfg.mask_loss,
            &MaskInputs {
                warped_mask: wm.as_ref().map(|(s, _)| s.as_slice()),
                fixed_mask: Some(&self.fixed_mask),
                warped_edt: we.as_ref().map(|(s, _)| s.as_slice()),
                fixed_edt: Some(&self.fixed_edt),
                roi: None,
                edt_form: cfg.edt_loss_form,
            },
        )?;
        let reg = l2_slices(g, v, None, Reduction::Mean);

        let mut g_u: Vec<Vec3> = (0..g.len())
            .map(|i| {
                let s = w.gamma0 * voxel.grad[i];
                [s * di[i][0], s * di[i][1], s * di[i][2]]
            })
            .collect();
        for (warped, grad) in [(&wm, &mask.mask_grad), (&we, &mask.edt_grad)] {
            if let (Some((_, d)), Some(gr)) = (warped, grad) {
                for (o, (dp, &gv)) in g_u.iter_mut().zip(d.iter().zip(gr)) {
                    let s = w.gamma1 * gv;
                    o[0] += s * dp[0];
                    o[1] += s * dp[1];
                    o[2] += s * dp[2];
                }
            }
        }
        let mut grad = backprop_integration(g, &traj, g_u);
        for (o, r) in grad.iter_mut().zip(reg.grad.chunks_exact(3)) {
            o[0] += w.gamma2 * r[0];
            o[1] += w.gamma2 * r[1];
            o[2] += w.gamma2 * r[2];
        }
        let record = LossRecord {
            total: w.combine(voxel.value, mask.value, reg.value),
            voxel: voxel.value,
            mask: mask.value,
            reg: reg.value,
        };
        Ok((record, grad))
    }
}

/// Voxel-loss ROI: union of both region supports, dilated.
fn region_roi(pair: &RegionPair, dilation: usize) -> Vec<bool> {
    let union: Vec<bool> = pair
        .fixed_mask
        .labels()
        .iter()
        .zip(pair.moving_mask.labels())
        .map(|(&f, &m)| f == 1 || m == 1)
        .collect();
    dilate(pair.grid(), &union, dilation)
}

/// The region objective at full resolution and its gradient with respect
/// to the velocity `v` (on the pair's grid).
pub fn region_objective(
    pair: &RegionPair,
    v: &VelocityField,
    cfg: &OptimizerConfig,
) -> Result<(LossRecord, Vec<Vec3>)> {
    v.grid().ensure_same(pair.grid())?;
    level_objective(pair, 1, v.vectors(), cfg).map(|(_, r, g)| (r, g))
}

/// The objective solved at pyramid level `factor`: its grid, then loss and
/// gradient at the coarse velocity `v`.
pub fn level_objective(
    pair: &RegionPair,
    factor: usize,
    v: &[Vec3],
    cfg: &OptimizerConfig,
) -> Result<(Grid, LossRecord, Vec<Vec3>)> {
    cfg.validate()?;
    pair.validate()?;
    let roi = region_roi(pair, cfg.roi_dilation);
    let level = LevelProblem::new(pair, &roi, factor, cfg)?;
    if v.len() != level.grid.len() {
        return Err(Error::GridMismatch(format!(
            "velocity has {} vectors, level {factor} grid has {}",
            v.len(),
            level.grid.len()
        )));
    }
    let (rec, grad) = level.evaluate(v)?;
    Ok((level.grid, rec, grad))
}

/// Register one region pair, coarse to fine, from a zero velocity.
pub fn register_region(pair: &RegionPair, cfg: &OptimizerConfig) -> Result<RegionResult> {
    cfg.validate()?;
    pair.validate()?;
    let roi = region_roi(pair, cfg.roi_dilation);
    let mut trace = Vec::with_capacity(cfg.iterations * cfg.levels.len());
    let mut level_iterations = Vec::with_capacity(cfg.levels.len());
    let mut prev: Option<(Grid, usize, Vec<Vec3>)> = None;
    for &factor in &cfg.levels {
        let level = LevelProblem::new(pair, &roi, factor, cfg)?;
        let mut v = match &prev {
            None => vec![[0.0; 3]; level.grid.len()],
            Some((g, f, v)) => upsample_velocity(g, v, *f, &level.grid, factor),
        };
        let mut adam = AdamState::new(3 * v.len());
        for it in 0..cfg.iterations {
            let iteration = trace.len();
            let (rec, grad) = level.evaluate(&v)?;
            let finite = rec.total.is_finite() && grad.iter().flatten().all(|g| g.is_finite());
            if !finite {
                return Err(Error::NonFiniteLoss { iteration });
            }
            trace.push(rec);
            let progress = it as f64 / cfg.iterations as f64;
            let lr = cfg.learning_rate * (1.0 - progress).powf(cfg.lr_decay_power);
            adam_update(
                &mut adam,
                v.as_flattened_mut(),
                grad.as_flattened(),
                &cfg.adam(lr),
            );
        }
        level_iterations.push(cfg.iterations);
        prev = Some((level.grid, factor, v));
    }
    let (_, _, v) = prev.expect("levels is non-empty");
    let velocity = VelocityField::new(*pair.grid(), v)?;
    let local = integrate_velocity(&velocity, cfg.integration_steps)?;
    let displacement = uncrop_displacement(&local, &pair.bbox, &pair.full_grid)?;
    Ok(RegionResult {
        label: pair.label,
        velocity,
        displacement,
        loss_trace: trace,
        level_iterations,
    })
}

/// CSV with header `iteration,total,voxel,mask,reg`.
pub fn write_trace_csv(trace: &[LossRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "iteration,total,voxel,mask,reg")?;
    for (i, r) in trace.iter().enumerate() {
        writeln!(out, "{i},{},{},{},{}", r.total, r.voxel, r.mask, r.reg)?;
    }
    Ok(())
}

/// Exponential moving average of the total loss with factor `alpha`.
pub fn smoothed_totals(trace: &[LossRecord], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(trace.len());
    let mut ema = None;
    for r in trace {
        let e = match ema {
            None => r.total,
            Some(prev) => alpha * prev + (1.0 - alpha) * r.total,
        };
        ema = Some(e);
        out.push(e);
    }
    out
}
