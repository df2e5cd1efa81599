//! Dice, HD95, Jacobian smoothness and the per-run metrics report.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::edt::squared_distance_to_sites;
use crate::error::{Error, Result, Side};
use crate::field::DisplacementField;
use crate::grid::Grid;
use crate::jacobian::{folding_count, jacobian_determinant, sdlogj, sdlogj_where, NonPositivePolicy};
use crate::volume::{erode, LabelMap};

/// `2|A n B| / (|A| + |B|)`; 1.0 when the label is absent from both.
pub fn dice(a: &LabelMap, b: &LabelMap, label: u32) -> Result<f64> {
    a.grid().ensure_same(b.grid())?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        let (ia, ib) = (x == label, y == label);
        na += usize::from(ia);
        nb += usize::from(ib);
        inter += usize::from(ia && ib);
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Foreground voxels with at least one background face neighbour
/// (out-of-grid counts as background along non-degenerate axes).
pub fn surface(grid: &Grid, mask: &[bool]) -> Vec<bool> {
    let inner = erode(grid, mask, 1);
    mask.iter().zip(&inner).map(|(&m, &i)| m && !i).collect()
}

/// Nearest-rank percentile of ascending `sorted`: element `ceil(q n) - 1`.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Distances (mm) from every surface voxel of `from` to the nearest surface
/// voxel of `to`, ascending.
fn directed_distances(grid: &Grid, from: &[bool], to: &[bool]) -> Vec<f64> {
    let s = grid.spacing();
    let w = [s[0] * s[0], s[1] * s[1], s[2] * s[2]];
    let sq = squared_distance_to_sites(grid, to, w, false);
    let mut d: Vec<f64> = from
        .iter()
        .zip(&sq)
        .filter(|(&f, _)| f)
        .map(|(_, &q)| q.sqrt())
        .collect();
    d.sort_by(f64::total_cmp);
    d
}

/// 95th-percentile symmetric surface distance in mm (grid spacing applied).
pub fn hd95(a: &LabelMap, b: &LabelMap, label: u32) -> Result<f64> {
    a.grid().ensure_same(b.grid())?;
    let grid = a.grid();
    let sa = surface(grid, &a.binary(label));
    let sb = surface(grid, &b.binary(label));
    if !sa.contains(&true) {
        return Err(Error::EmptySurface {
            label,
            side: Side::First,
        });
    }
    if !sb.contains(&true) {
        return Err(Error::EmptySurface {
            label,
            side: Side::Second,
        });
    }
    let ab = nearest_rank(&directed_distances(grid, &sa, &sb), 0.95);
    let ba = nearest_rank(&directed_distances(grid, &sb, &sa), 0.95);
    Ok(ab.max(ba))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSmoothness {
    pub sdlogj: f64,
    /// Voxels whose determinant was at or below the log floor.
    pub clamped: usize,
    pub folding_count: usize,
    pub folding_fraction: f64,
}

pub fn field_smoothness(u: &DisplacementField, policy: NonPositivePolicy) -> Result<FieldSmoothness> {
    let jac = jacobian_determinant(u);
    let stats = sdlogj(&jac, None, policy)?;
    let folds = folding_count(&jac);
    Ok(FieldSmoothness {
        sdlogj: stats.sdlogj,
        clamped: stats.clamped,
        folding_count: folds,
        folding_fraction: folds as f64 / u.grid().len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelMetrics {
    pub dice: f64,
    /// `None` when either surface is empty.
    pub hd95_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_label: BTreeMap<u32, LabelMetrics>,
    pub sdlogj: f64,
    /// SDlogJ restricted to each fixed-segmentation label, background
    /// included; `None` when every voxel of the label folds.
    pub sdlogj_per_region: BTreeMap<u32, Option<f64>>,
    pub sdlogj_clamped: usize,
    pub folding_count: usize,
    pub folding_fraction: f64,
}

impl MetricsReport {
    /// Mean Dice over the reported labels (1.0 when there are none).
    pub fn mean_dice(&self) -> f64 {
        if self.per_label.is_empty() {
            return 1.0;
        }
        self.per_label.values().map(|m| m.dice).sum::<f64>() / self.per_label.len() as f64
    }

    /// JSON with every real printed to six decimals, so equal reports
    /// serialize to identical bytes.
    pub fn to_json(&self) -> String {
        let mut s = String::from("{\n  \"per_label\": {");
        for (k, (label, m)) in self.per_label.iter().enumerate() {
            let hd = m
                .hd95_mm
                .map_or_else(|| "null".to_string(), |h| format!("{h:.6}"));
            let sep = if k == 0 { "" } else { "," };
            write!(
                s,
                "{sep}\n    \"{label}\": {{\"dice\": {:.6}, \"hd95_mm\": {hd}}}",
                m.dice
            )
            .unwrap();
        }
        if !self.per_label.is_empty() {
            s.push_str("\n  ");
        }
        write!(
            s,
            "}},\n  \"mean_dice\": {:.6},\n  \"sdlogj\": {:.6},\n  \"sdlogj_per_region\": {{{}}},\n  \"sdlogj_clamped_voxels\": {},\n  \"folding_count\": {},\n  \"folding_fraction\": {:.6}\n}}\n",
            self.mean_dice(),
            self.sdlogj,
            self.sdlogj_per_region
                .iter()
                .map(|(l, v)| match v {
                    Some(v) => format!("\"{l}\": {v:.6}"),
                    None => format!("\"{l}\": null"),
                })
                .collect::<Vec<_>>()
                .join(", "),
            self.sdlogj_clamped,
            self.folding_count,
            self.folding_fraction
        )
        .unwrap();
        s
    }
}

/// How the headline SDlogJ is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SmoothnessOptions {
    pub policy: NonPositivePolicy,
    /// Leave voxels of fixed label 0 out of the headline SDlogJ.
    pub exclude_background: bool,
}

/// Metrics of a registration: overlap of `warped_seg` with `fixed_seg` on
/// every foreground label of the fixed map, plus smoothness of `u`.
pub fn evaluate(
    warped_seg: &LabelMap,
    fixed_seg: &LabelMap,
    u: &DisplacementField,
    opts: SmoothnessOptions,
) -> Result<MetricsReport> {
    let policy = opts.policy;
    warped_seg.grid().ensure_same(fixed_seg.grid())?;
    fixed_seg.grid().ensure_same(u.grid())?;
    let mut per_label = BTreeMap::new();
    for label in fixed_seg.foreground_labels() {
        let d = dice(warped_seg, fixed_seg, label)?;
        let h = match hd95(warped_seg, fixed_seg, label) {
            Ok(h) => Some(h),
            Err(Error::EmptySurface { .. }) => None,
            Err(e) => return Err(e),
        };
        per_label.insert(label, LabelMetrics { dice: d, hd95_mm: h });
    }
    let mut smooth = field_smoothness(u, policy)?;
    let jac = jacobian_determinant(u);
    if opts.exclude_background {
        let st = sdlogj_where(&jac, |i| fixed_seg.labels()[i] != 0, policy)?;
        smooth.sdlogj = st.sdlogj;
        smooth.clamped = st.clamped;
    }
    let mut sdlogj_per_region = BTreeMap::new();
    for &label in fixed_seg.label_set() {
        let v = match sdlogj(&jac, Some((fixed_seg, label)), policy) {
            Ok(st) => Some(st.sdlogj),
            Err(Error::AllVoxelsFolded) => None,
            Err(e) => return Err(e),
        };
        sdlogj_per_region.insert(label, v);
    }
    Ok(MetricsReport {
        per_label,
        sdlogj: smooth.sdlogj,
        sdlogj_per_region,
        sdlogj_clamped: smooth.clamped,
        folding_count: smooth.folding_count,
        folding_fraction: smooth.folding_fraction,
    })
}
