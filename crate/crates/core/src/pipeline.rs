//! End-to-end SegReg: split the pair by segmentation, register every region
//! independently, compose by the fixed segmentation, warp and evaluate.
//! Also the label-merging and segmentation-degradation experiments.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::edt::normalized_edt_mask_spacing;
use crate::error::{Error, Result};
use crate::field::{compose_fields, warp_labelmap, warp_volume, DisplacementField};
use crate::grid::BoundingBox;
use crate::metrics::{dice, evaluate, MetricsReport, SmoothnessOptions};
use crate::optim::{register_region, OptimizerConfig, RegionPair, RegionResult};
use crate::volume::{LabelMap, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub optimizer: OptimizerConfig,
    /// Crop every region to its bounding box grown by this margin;
    /// `None` solves every region on the full grid.
    pub crop_margin: Option<usize>,
    pub smoothness: SmoothnessOptions,
    /// Measure EDT masks in physical units instead of voxels.
    pub edt_use_spacing: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            optimizer: OptimizerConfig::default(),
            crop_margin: Some(8),
            smoothness: SmoothnessOptions::default(),
            edt_use_spacing: false,
        }
    }
}

fn check_inputs(im: &Volume, if_: &Volume, sm: &LabelMap, sf: &LabelMap) -> Result<()> {
    let g = im.grid();
    g.ensure_same(if_.grid())?;
    g.ensure_same(sm.grid())?;
    g.ensure_same(sf.grid())?;
    let (a, b) = (sm.label_set(), sf.label_set());
    let mut odd: Vec<u32> = a
        .iter()
        .filter(|l| !b.contains(l))
        .chain(b.iter().filter(|l| !a.contains(l)))
        .copied()
        .collect();
    if !odd.is_empty() {
        odd.sort_unstable();
        return Err(Error::LabelSetMismatch(odd));
    }
    Ok(())
}

fn binary_map(lm: &LabelMap, label: u32) -> Result<LabelMap> {
    LabelMap::new(
        *lm.grid(),
        lm.labels().iter().map(|&l| u32::from(l == label)).collect(),
    )
}

/// One masked pair per label (background included), in ascending label order.
pub fn split_regions(
    im: &Volume,
    if_: &Volume,
    sm: &LabelMap,
    sf: &LabelMap,
    crop_margin: Option<usize>,
    edt_use_spacing: bool,
) -> Result<Vec<RegionPair>> {
    check_inputs(im, if_, sm, sf)?;
    let full = *im.grid();
    sf.label_set()
        .iter()
        .map(|&label| {
            let bbox = match crop_margin {
                Some(m) => sm
                    .bounding_box(label, m)?
                    .union(&sf.bounding_box(label, m)?),
                None => BoundingBox::full(full.dims()),
            };
            let mm = binary_map(&sm.crop(&bbox)?, label)?;
            let fm = binary_map(&sf.crop(&bbox)?, label)?;
            Ok(RegionPair {
                label,
                moving: im.crop(&bbox)?.mask_apply(&mm, 1)?,
                fixed: if_.crop(&bbox)?.mask_apply(&fm, 1)?,
                moving_edt: normalized_edt_mask_spacing(&mm, 1, edt_use_spacing)?,
                fixed_edt: normalized_edt_mask_spacing(&fm, 1, edt_use_spacing)?,
                moving_mask: mm,
                fixed_mask: fm,
                bbox,
                full_grid: full,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SegRegOutput {
    pub field: DisplacementField,
    pub warped: Volume,
    pub warped_seg: LabelMap,
    pub report: MetricsReport,
    /// Per-region results in ascending label order.
    pub regions: Vec<RegionResult>,
}

/// Solve every pair concurrently; the first failing label (in label order)
/// is reported.
pub fn solve_regions(pairs: &[RegionPair], cfg: &OptimizerConfig) -> Result<Vec<RegionResult>> {
    let results: Vec<Result<RegionResult>> = pairs
        .par_iter()
        .map(|p| {
            register_region(p, cfg).map_err(|e| Error::Region {
                label: p.label,
                source: Box::new(e),
            })
        })
        .collect();
    let mut out: Vec<RegionResult> = results.into_iter().collect::<Result<_>>()?;
    out.sort_by_key(|r| r.label);
    Ok(out)
}

/// Full SegReg run, evaluated against the segmentations it was given.
pub fn run_segreg(
    im: &Volume,
    if_: &Volume,
    sm: &LabelMap,
    sf: &LabelMap,
    cfg: &PipelineConfig,
) -> Result<SegRegOutput> {
    run_segreg_with_reference(im, if_, sm, sf, sm, sf, cfg)
}

/// SegReg driven by `sm`/`sf`, with overlap metrics computed by warping
/// `ref_moving` and comparing against `ref_fixed`.
pub fn run_segreg_with_reference(
    im: &Volume,
    if_: &Volume,
    sm: &LabelMap,
    sf: &LabelMap,
    ref_moving: &LabelMap,
    ref_fixed: &LabelMap,
    cfg: &PipelineConfig,
) -> Result<SegRegOutput> {
    cfg.optimizer.validate()?;
    im.grid().ensure_same(ref_moving.grid())?;
    im.grid().ensure_same(ref_fixed.grid())?;
    let pairs = split_regions(im, if_, sm, sf, cfg.crop_margin, cfg.edt_use_spacing)?;
    let regions = solve_regions(&pairs, &cfg.optimizer)?;
    let refs: Vec<(u32, &DisplacementField)> =
        regions.iter().map(|r| (r.label, &r.displacement)).collect();
    let field = compose_fields(&refs, sf)?;
    let warped = warp_volume(im, &field)?;
    let warped_ref = warp_labelmap(ref_moving, &field)?;
    let report = evaluate(&warped_ref, ref_fixed, &field, cfg.smoothness)?;
    let warped_seg = if std::ptr::eq(ref_moving, sm) {
        warped_ref
    } else {
        warp_labelmap(sm, &field)?
    };
    Ok(SegRegOutput {
        field,
        warped,
        warped_seg,
        report,
        regions,
    })
}

/// Relabel through `groups` (old label -> new label).
pub fn merge_labels(lm: &LabelMap, groups: &BTreeMap<u32, u32>) -> Result<LabelMap> {
    for l in lm.label_set() {
        if !groups.contains_key(l) {
            return Err(Error::UnmappedLabel(*l));
        }
    }
    LabelMap::new(*lm.grid(), lm.labels().iter().map(|l| groups[l]).collect())
}

/// Nested merges of the foreground labels `1..=n`: the `k`-th mapping keeps
/// labels below `k` and folds every label `>= k` into `k`.
pub fn nested_merges(lm: &LabelMap) -> Vec<BTreeMap<u32, u32>> {
    let fg = lm.foreground_labels();
    (1..=fg.len())
        .map(|k| {
            let mut m: BTreeMap<u32, u32> = lm.label_set().iter().map(|&l| (l, l)).collect();
            for (i, &l) in fg.iter().enumerate() {
                m.insert(l, fg[i.min(k - 1)]);
            }
            m
        })
        .collect()
}

/// Mean Dice over the foreground labels of `reference` (all labels when it
/// has no foreground).
pub fn mean_label_dice(candidate: &LabelMap, reference: &LabelMap) -> Result<f64> {
    let mut labels = reference.foreground_labels();
    if labels.is_empty() {
        labels = reference.label_set().to_vec();
    }
    let mut sum = 0.0;
    for &l in &labels {
        sum += dice(candidate, reference, l)?;
    }
    Ok(sum / labels.len() as f64)
}

/// Tolerance on the achieved mean Dice of [`degrade_segmentation`].
pub const DEGRADE_TOLERANCE: f64 = 0.02;

/// Flip boundary voxels to a neighbouring label, in a seeded random order,
/// until the mean per-label Dice against `lm` drops to `target`.
pub fn degrade_segmentation(lm: &LabelMap, target: f64, seed: u64) -> Result<LabelMap> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "target Dice must lie in (0, 1], got {target}"
        )));
    }
    if target == 1.0 {
        return Ok(lm.clone());
    }
    let grid = *lm.grid();
    let orig = lm.labels();
    let labels = lm.label_set().to_vec();
    let mut scored = lm.foreground_labels();
    if scored.is_empty() {
        scored = labels.clone();
    }
    let slot = |l: u32| labels.binary_search(&l).expect("label from the map");
    let n = labels.len();
    let orig_count: Vec<usize> = labels.iter().map(|&l| lm.count(l)).collect();
    let mut cur_count = orig_count.clone();
    let mut inter = orig_count.clone();
    let mean_dice = |cur: &[usize], inter: &[usize]| {
        scored
            .iter()
            .map(|&l| {
                let s = slot(l);
                2.0 * inter[s] as f64 / (orig_count[s] + cur[s]) as f64
            })
            .sum::<f64>()
            / scored.len() as f64
    };
    let mut cur = orig.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut achieved = 1.0;
    let neighbours = |cur: &[u32], i: usize| {
        let c = grid.coords(i);
        let d = grid.dims();
        let mut out = Vec::with_capacity(6);
        for a in grid.active_axes() {
            let s = grid.stride(a);
            if c[a] > 0 && cur[i - s] != cur[i] {
                out.push(cur[i - s]);
            }
            if c[a] + 1 < d[a] && cur[i + s] != cur[i] {
                out.push(cur[i + s]);
            }
        }
        out
    };
    loop {
        let mut candidates: Vec<usize> = (0..cur.len())
            .filter(|&i| cur[i] == orig[i] && !neighbours(&cur, i).is_empty())
            .collect();
        if candidates.is_empty() {
            return Err(Error::TargetUnreachable { target, achieved });
        }
        candidates.shuffle(&mut rng);
        for i in candidates {
            let options = neighbours(&cur, i);
            if options.is_empty() || cur[i] != orig[i] {
                continue;
            }
            let new = options[rng.random_range(0..options.len())];
            let (so, sn) = (slot(cur[i]), slot(new));
            cur_count[so] -= 1;
            inter[so] -= 1;
            cur_count[sn] += 1;
            cur[i] = new;
            achieved = mean_dice(&cur_count, &inter);
            if achieved <= target {
                if target - achieved > DEGRADE_TOLERANCE {
                    return Err(Error::TargetUnreachable { target, achieved });
                }
                debug_assert_eq!(cur_count.len(), n);
                return LabelMap::new(grid, cur);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub target: f64,
    /// Mean of the moving and fixed segmentations' Dice against the originals.
    pub seg_dice: f64,
    /// Mean foreground Dice of the registration, on the original labels.
    pub reg_dice: f64,
}

/// Register with both segmentations degraded to each target and score the
/// result on the original segmentations. One seed per map, so lower targets
/// extend the flips of higher ones.
pub fn segmentation_sweep(
    im: &Volume,
    if_: &Volume,
    sm: &LabelMap,
    sf: &LabelMap,
    targets: &[f64],
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if targets.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidConfig("sweep targets must be sorted ascending".into()));
    }
    let seed_m = seed.wrapping_mul(2);
    let seed_f = seed.wrapping_mul(2).wrapping_add(1);
    targets
        .iter()
        .map(|&t| {
            let dm = degrade_segmentation(sm, t, seed_m)?;
            let df = degrade_segmentation(sf, t, seed_f)?;
            let seg_dice = (mean_label_dice(&dm, sm)? + mean_label_dice(&df, sf)?) / 2.0;
            let out = run_segreg_with_reference(im, if_, &dm, &df, sm, sf, cfg)?;
            Ok(SweepRow {
                target: t,
                seg_dice,
                reg_dice: out.report.mean_dice(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeRow {
    /// Foreground regions registered separately.
    pub n_regions: usize,
    pub reg_dice: f64,
}

/// Run SegReg once per merge mapping, scoring on the original labels.
pub fn mode_sweep(
    im: &Volume,
    if_: &Volume,
    sm: &LabelMap,
    sf: &LabelMap,
    merges: &[BTreeMap<u32, u32>],
    cfg: &PipelineConfig,
) -> Result<Vec<ModeRow>> {
    merges
        .iter()
        .map(|m| {
            let mm = merge_labels(sm, m)?;
            let mf = merge_labels(sf, m)?;
            let out = run_segreg_with_reference(im, if_, &mm, &mf, sm, sf, cfg)?;
            Ok(ModeRow {
                n_regions: mf.foreground_labels().len(),
                reg_dice: out.report.mean_dice(),
            })
        })
        .collect()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; NaN when either
/// series is constant or the lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    if x.len() != y.len() || x.len() < 2 {
        return f64::NAN;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        let (a, b) = (rx[i] - mx, ry[i] - my);
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    sxy / (sxx * syy).sqrt()
}
