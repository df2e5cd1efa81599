//! One executable property per module invariant.

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRng, TestRunner};
use rand::Rng;
use segreg::edt::{exact_edt, normalized_edt_mask};
use segreg::field::{compose_fields, integrate_velocity, uncrop_displacement, warp_labelmap, warp_volume};
use segreg::grid::BoundingBox;
use segreg::jacobian::jacobian_determinant;
use segreg::loss::{
    l2_diffusion, lncc_loss, mask_loss, mse_loss, soft_dice_loss, edt_loss, EdtLossForm, MaskInputs, MaskLossKind,
    Reduction,
};
use segreg::metrics::{dice, hd95};
use segreg::nrrd::{self, NrrdData, NrrdImage};
use segreg::optim::smoothed_totals;
use segreg::phantom::{make_phantom, PhantomSpec, RegionTransform};
use segreg::pipeline::{split_regions, solve_regions, SegRegOutput};
use segreg::volume::erode;
use segreg::{DisplacementField, Grid, LabelMap, VelocityField, Volume};

use crate::common::{
    cli_phantom, fast_config, path_str, random_labels, random_mask, random_values, rng, run_cli, small_spec, Shared,
};
use crate::gradients::worst_errors;
use crate::oracles::run_oracles;

type Check = fn(&Shared) -> Result<String, String>;

/// Seeded so that every run of the suite draws the same cases.
fn runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let rng = TestRng::deterministic_rng(config.rng_algorithm);
    TestRunner::new_with_rng(config, rng)
}

fn prop(cases: u32, strategy: impl Strategy<Value = u64>, f: impl Fn(u64) -> Result<(), TestCaseError>) -> Result<String, String> {
    runner(cases)
        .run(&strategy, f)
        .map(|()| format!("{cases} cases"))
        .map_err(|e| e.to_string())
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), TestCaseError> {
    if ok {
        Ok(())
    } else {
        Err(TestCaseError::fail(msg()))
    }
}

fn grid_of(r: &mut crate::common::Rng8, lo: usize, hi: usize) -> Grid {
    Grid::unit(crate::common::random_dims(r, lo, hi)).unwrap()
}

fn smooth_velocity(r: &mut crate::common::Rng8, g: Grid, amp: f64) -> VelocityField {
    let c = random_values(r, 12, -1.0, 1.0);
    let d = g.dims().map(|n| n as f64);
    VelocityField::from_fn(g, |[x, y, z]| {
        let (x, y, z) = (x as f64 / d[0], y as f64 / d[1], z as f64 / d[2]);
        [0, 1, 2].map(|k| {
            let c = &c[4 * k..4 * k + 4];
            amp * (c[0] * (2.0 * x + c[3]).sin() + c[1] * (2.5 * y - c[3]).cos() + c[2] * (1.5 * z + 2.0 * x).sin()) / 3.0
        })
    })
    .unwrap()
}

// volume-core

fn trilinear_lattice_and_linear(_: &Shared) -> Result<String, String> {
    prop(64, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let n = r.random_range(2..12);
        let g = Grid::unit([n, 1, 1]).unwrap();
        let vals = random_values(&mut r, n, -5.0, 5.0);
        let v = Volume::new(g, vals.clone()).unwrap();
        for (i, &a) in vals.iter().enumerate() {
            ensure(v.trilinear_sample([i as f64, 0.0, 0.0]) == a, || format!("lattice {i}"))?;
            if i + 1 < n {
                let t: f64 = r.random_range(0.0..1.0);
                let want = (1.0 - t) * a + t * vals[i + 1];
                let got = v.trilinear_sample([i as f64 + t, 0.0, 0.0]);
                ensure((got - want).abs() < 1e-12, || format!("{got} vs {want}"))?;
            }
        }
        let g3 = grid_of(&mut r, 2, 6);
        let v3 = Volume::new(g3, random_values(&mut r, g3.len(), -1.0, 1.0)).unwrap();
        for i in 0..g3.len() {
            let c = g3.coords(i).map(|k| k as f64);
            ensure(v3.trilinear_sample(c) == v3.samples()[i], || format!("3d lattice {i}"))?;
        }
        Ok(())
    })
}

fn mask_apply_partition(_: &Shared) -> Result<String, String> {
    prop(64, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let g = grid_of(&mut r, 1, 8);
        let v = Volume::new(g, random_values(&mut r, g.len(), -10.0, 10.0)).unwrap();
        let k = r.random_range(1..5);
        let lm = random_labels(&mut r, g, k);
        let mut sum = vec![0.0; g.len()];
        for &l in lm.label_set() {
            for (s, x) in sum.iter_mut().zip(v.mask_apply(&lm, l).unwrap().samples()) {
                *s += x;
            }
        }
        ensure(sum.as_slice() == v.samples(), || "sum differs".into())
    })
}

fn crop_uncrop(_: &Shared) -> Result<String, String> {
    prop(64, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let g = grid_of(&mut r, 1, 9);
        let d = g.dims();
        let u = DisplacementField::new(g, (0..g.len()).map(|_| [0, 1, 2].map(|_| r.random_range(-2.0..2.0))).collect())
            .unwrap();
        let min = [0, 1, 2].map(|a| r.random_range(0..d[a]));
        let max = [0, 1, 2].map(|a| r.random_range(min[a]..d[a]));
        let bbox = BoundingBox { min, max };
        let back = uncrop_displacement(&u.crop(&bbox).unwrap(), &bbox, &g).unwrap();
        for i in 0..g.len() {
            let want = if bbox.contains(g.coords(i)) { u.vectors()[i] } else { [0.0; 3] };
            ensure(back.vectors()[i] == want, || format!("voxel {i}"))?;
        }
        Ok(())
    })
}

fn nrrd_round_trip(_: &Shared) -> Result<String, String> {
    prop(64, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let g = Grid::new(
            crate::common::random_dims(&mut r, 1, 6),
            [0, 1, 2].map(|_| r.random_range(0.1..3.0)),
            [0, 1, 2].map(|_| r.random_range(-50.0..50.0)),
        )
        .unwrap();
        let n = g.len();
        let data = match seed % 4 {
            0 => NrrdData::Float32((0..n).map(|_| f32::from_bits(r.random::<u32>() & 0x7f7f_ffff)).collect()),
            1 => NrrdData::Float64((0..n).map(|_| r.random_range(-1e300..1e300)).collect()),
            2 => NrrdData::UInt8((0..n).map(|_| r.random()).collect()),
            _ => NrrdData::Int16((0..n).map(|_| r.random()).collect()),
        };
        let img = NrrdImage {
            grid: g,
            components: 1,
            data,
        };
        let back = nrrd::decode(&nrrd::encode(&img)).map_err(|e| TestCaseError::fail(e.to_string()))?;
        ensure(back == img, || format!("{:?} round trip differs", img.data.scalar_type()))
    })
}

// field-transform

fn bounded_velocity_no_folds(_: &Shared) -> Result<String, String> {
    prop(24, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let g = Grid::unit([16, 16, 16]).unwrap();
        let amp = r.random_range(0.5..4.0);
        let v = smooth_velocity(&mut r, g, amp);
        let u = integrate_velocity(&v, 7).unwrap();
        let jac = jacobian_determinant(&u);
        for z in 1..15 {
            for y in 1..15 {
                for x in 1..15 {
                    ensure(jac.get(x, y, z) > 0.0, || format!("fold at {x},{y},{z} amp {amp}"))?;
                }
            }
        }
        Ok(())
    })
}

fn zero_warp_identity(_: &Shared) -> Result<String, String> {
    prop(64, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let g = grid_of(&mut r, 1, 8);
        let v = Volume::new(g, random_values(&mut r, g.len(), -1e6, 1e6)).unwrap();
        let w = warp_volume(&v, &DisplacementField::zeros(g)).unwrap();
        ensure(w.samples().iter().zip(v.samples()).all(|(a, b)| a.to_bits() == b.to_bits()), || "bits differ".into())
    })
}

fn compose_selects(_: &Shared) -> Result<String, String> {
    prop(64, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let g = grid_of(&mut r, 2, 8);
        let k = r.random_range(1..4);
        let seg = random_labels(&mut r, g, k);
        let fields: Vec<(u32, DisplacementField)> = seg
            .label_set()
            .iter()
            .map(|&l| {
                let v = (0..g.len()).map(|_| [0, 1, 2].map(|_| r.random_range(-3.0..3.0))).collect();
                (l, DisplacementField::new(g, v).unwrap())
            })
            .collect();
        let refs: Vec<(u32, &DisplacementField)> = fields.iter().map(|(l, f)| (*l, f)).collect();
        let c = compose_fields(&refs, &seg).unwrap();
        for (l, f) in &fields {
            for i in (0..g.len()).filter(|&i| seg.labels()[i] == *l) {
                ensure(c.vectors()[i] == f.vectors()[i], || format!("label {l} voxel {i}"))?;
            }
        }
        Ok(())
    })
}

fn doubling_steps(_: &Shared) -> Result<String, String> {
    prop(16, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let g = Grid::unit([16, 16, 16]).unwrap();
        let v = smooth_velocity(&mut r, g, 1.0);
        let a = integrate_velocity(&v, 7).unwrap();
        let b = integrate_velocity(&v, 14).unwrap();
        let worst = a
            .vectors()
            .iter()
            .zip(b.vectors())
            .flat_map(|(p, q)| (0..3).map(move |k| (p[k] - q[k]).abs()))
            .fold(0.0, f64::max);
        ensure(worst < 1e-3, || format!("max change {worst}"))
    })
}

// distance-transform

fn edt_brute_force(_: &Shared) -> Result<String, String> {
    prop(32, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let g = Grid::unit([8, 8, 8]).unwrap();
        let fg = random_mask(&mut r, &g);
        let got = exact_edt(&g, &fg);
        ensure(got.samples() == crate::oracles::edt_oracle(&g, &fg).as_slice(), || "edt differs".into())
    })
}

fn blob(g: Grid, lo: [usize; 3], shape: &[bool], sd: [usize; 3]) -> LabelMap {
    LabelMap::from_fn(g, |p| {
        let inside = (0..3).all(|a| p[a] >= lo[a] && p[a] < lo[a] + sd[a]);
        u32::from(inside && shape[(p[0] - lo[0]) + sd[0] * ((p[1] - lo[1]) + sd[1] * (p[2] - lo[2]))])
    })
    .unwrap()
}

fn edt_translation_invariant(_: &Shared) -> Result<String, String> {
    prop(32, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let sd = [0, 1, 2].map(|_| r.random_range(2..7));
        let sg = Grid::unit(sd).unwrap();
        let shape = random_mask(&mut r, &sg);
        let g = Grid::unit([16, 16, 16]).unwrap();
        let a = [0, 1, 2].map(|k| r.random_range(1..16 - sd[k]));
        let b = [0, 1, 2].map(|k| r.random_range(1..16 - sd[k]));
        let ma = normalized_edt_mask(&blob(g, a, &shape, sd), 1).unwrap();
        let mb = normalized_edt_mask(&blob(g, b, &shape, sd), 1).unwrap();
        for i in 0..sg.len() {
            let c = sg.coords(i);
            let ia = g.index(a[0] + c[0], a[1] + c[1], a[2] + c[2]);
            let ib = g.index(b[0] + c[0], b[1] + c[1], b[2] + c[2]);
            ensure(ma.values()[ia] == mb.values()[ib], || format!("offset {i}"))?;
        }
        Ok(())
    })
}

fn edt_monotone_rays(_: &Shared) -> Result<String, String> {
    prop(32, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let g = Grid::unit([14, 14, 14]).unwrap();
        let lo = [0, 1, 2].map(|_| r.random_range(1..5));
        let hi = [0, 1, 2].map(|a| r.random_range(lo[a] + 2..13));
        let fg: Vec<bool> = (0..g.len())
            .map(|i| {
                let c = g.coords(i);
                (0..3).all(|a| lo[a] <= c[a] && c[a] <= hi[a])
            })
            .collect();
        let e = exact_edt(&g, &fg);
        let centre = [0, 1, 2].map(|a| (lo[a] + hi[a]) / 2);
        for axis in 0..3 {
            for (start, step) in [(lo[axis], 1i64), (hi[axis], -1i64)] {
                let mut p = centre;
                p[axis] = start;
                let mut prev = 0.0;
                while p[axis] != centre[axis] {
                    let d = e.get(p[0], p[1], p[2]);
                    ensure(d >= prev, || format!("ray along {axis} drops at {p:?}"))?;
                    prev = d;
                    p[axis] = (p[axis] as i64 + step) as usize;
                }
                ensure(e.get(p[0], p[1], p[2]) >= prev, || "centre below ray".into())?;
            }
        }
        Ok(())
    })
}

// loss-suite

fn gradient_master(_: &Shared) -> Result<String, String> {
    let errs = worst_errors(77, 5, 6, 8);
    let bad: Vec<String> = errs
        .iter()
        .filter(|(_, c)| !c.pass())
        .map(|(n, c)| format!("{n} {:.2e} ({} unmatched kinks)", c.error, c.bad_kinks))
        .collect();
    let worst = errs.iter().map(|(_, c)| c.error).fold(0.0, f64::max);
    if bad.is_empty() {
        Ok(format!("5 instances per loss on 6..8 grids, worst {worst:.1e}"))
    } else {
        Err(bad.join(", "))
    }
}

fn loss_ranges(_: &Shared) -> Result<String, String> {
    prop(64, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let g = grid_of(&mut r, 3, 7);
        let n = g.len();
        let vol = |r: &mut crate::common::Rng8| Volume::new(g, random_values(r, n, 0.0, 1.0)).unwrap();
        let (w, f) = (vol(&mut r), vol(&mut r));
        let (we, fe) = (vol(&mut r), vol(&mut r));
        let mse = mse_loss(&w, &f, None).unwrap().value;
        let lncc = lncc_loss(&w, &f, 3).unwrap().value;
        let d = soft_dice_loss(&w, &f).unwrap().value;
        let e = edt_loss(&we, &fe, None, EdtLossForm::Mse).unwrap().value;
        let er = edt_loss(&we, &fe, None, EdtLossForm::Rms).unwrap().value;
        let h = mask_loss(
            MaskLossKind::EdtAndDice,
            &MaskInputs {
                warped_mask: Some(w.samples()),
                fixed_mask: Some(f.samples()),
                warped_edt: Some(we.samples()),
                fixed_edt: Some(fe.samples()),
                ..Default::default()
            },
        )
        .unwrap()
        .value;
        let vf = VelocityField::new(g, (0..n).map(|_| [0, 1, 2].map(|_| r.random_range(-1.0..1.0))).collect()).unwrap();
        let l2 = l2_diffusion(&vf, None, Reduction::Mean).unwrap().value;
        ensure(
            [mse, lncc, d, e, er, h, l2].iter().all(|&x| x >= 0.0)
                && d <= 1.0
                && e <= 1.0
                && er <= 1.0
                && h <= (1.0 + 100.0) / 2.0,
            || format!("mse {mse} lncc {lncc} dice {d} edt {e}/{er} hybrid {h} l2 {l2}"),
        )
    })
}

fn lncc_affine_invariant(_: &Shared) -> Result<String, String> {
    prop(32, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let g = grid_of(&mut r, 5, 8);
        let w = random_values(&mut r, g.len(), 0.0, 1.0);
        let f = random_values(&mut r, g.len(), 0.0, 1.0);
        let (sa, ba, sb, bb) = (
            r.random_range(0.2..5.0),
            r.random_range(-3.0..3.0),
            r.random_range(0.2..5.0),
            r.random_range(-3.0..3.0),
        );
        let v = |x: &[f64], s: f64, b: f64| Volume::new(g, x.iter().map(|t| s * t + b).collect()).unwrap();
        let base = lncc_loss(&v(&w, 1.0, 0.0), &v(&f, 1.0, 0.0), 3).unwrap().value;
        let mapped = lncc_loss(&v(&w, sa, ba), &v(&f, sb, bb), 3).unwrap().value;
        ensure((base - mapped).abs() < 1e-3, || format!("{base} vs {mapped}"))
    })
}

fn l2_partition_sum(_: &Shared) -> Result<String, String> {
    prop(64, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let g = grid_of(&mut r, 1, 7);
        let vf = VelocityField::new(g, (0..g.len()).map(|_| [0, 1, 2].map(|_| r.random_range(-2.0..2.0))).collect())
            .unwrap();
        let k = r.random_range(1..4);
        let lm = random_labels(&mut r, g, k);
        let whole = l2_diffusion(&vf, None, Reduction::Sum).unwrap().value;
        let parts: f64 = lm
            .label_set()
            .iter()
            .map(|&l| l2_diffusion(&vf, Some((&lm, l)), Reduction::Sum).unwrap().value)
            .sum();
        ensure((whole - parts).abs() <= 1e-9 * whole.max(1.0), || format!("{whole} vs {parts}"))
    })
}

// region-optimizer

fn small_pairs(spec: &PhantomSpec) -> (Vec<segreg::optim::RegionPair>, LabelMap) {
    let p = make_phantom(spec).unwrap();
    let pairs = split_regions(&p.moving, &p.fixed, &p.moving_seg, &p.fixed_seg, Some(4), false).unwrap();
    (pairs, p.fixed_seg)
}

fn worker_independence(_: &Shared) -> Result<String, String> {
    let (pairs, _) = small_pairs(&small_spec());
    let cfg = fast_config().optimizer;
    let solve = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| solve_regions(&pairs, &cfg).unwrap())
    };
    let (a, b) = (solve(1), solve(4));
    for (x, y) in a.iter().zip(&b) {
        let same = x.loss_trace.len() == y.loss_trace.len()
            && x.loss_trace.iter().zip(&y.loss_trace).all(|(p, q)| p.total.to_bits() == q.total.to_bits())
            && x.displacement == y.displacement;
        if !same {
            return Err(format!("region {} differs between 1 and 4 workers", x.label));
        }
    }
    Ok(format!("{} regions, 1 vs 4 workers bitwise equal", a.len()))
}

fn level_traces(out: &SegRegOutput) -> Vec<(u32, usize, Vec<f64>)> {
    let mut v = Vec::new();
    for r in &out.regions {
        let mut start = 0;
        for (lvl, &n) in r.level_iterations.iter().enumerate() {
            v.push((r.label, lvl, smoothed_totals(&r.loss_trace[start..start + n], 0.9)));
            start += n;
        }
    }
    v
}

fn descent(sh: &Shared) -> Result<String, String> {
    let mut checked = 0;
    let mut bad = Vec::new();
    for (name, out) in [("bundled", sh.default_run()), ("affine", &sh.affine_run().2)] {
        for (label, lvl, ema) in level_traces(out) {
            checked += 1;
            let rises = ema.windows(2).filter(|w| w[1] > w[0]).count();
            if rises > 0 {
                bad.push(format!("{name} region {label} level {lvl}: {rises} rises"));
            }
        }
    }
    if bad.is_empty() {
        Ok(format!("{checked} level traces non-increasing"))
    } else {
        Err(bad.join("; "))
    }
}

fn region_folds(out: &SegRegOutput, fixed_seg: &LabelMap) -> Vec<(u32, usize)> {
    out.regions
        .iter()
        .map(|r| {
            let jac = jacobian_determinant(&r.displacement);
            let folds = (0..jac.samples().len())
                .filter(|&i| fixed_seg.labels()[i] == r.label && jac.samples()[i] <= 0.0)
                .count();
            (r.label, folds)
        })
        .collect()
}

fn diffeomorphic_subfields(sh: &Shared) -> Result<String, String> {
    let mut all = region_folds(sh.default_run(), &sh.phantom.fixed_seg);
    let (_, p, out) = sh.affine_run();
    all.extend(region_folds(out, &p.fixed_seg));
    if all.iter().all(|(_, f)| *f == 0) {
        Ok(format!("{} region fields fold-free on their regions", all.len()))
    } else {
        Err(format!("folds per region {all:?}"))
    }
}

// segreg-pipeline

fn composed_selection(sh: &Shared) -> Result<String, String> {
    let out = sh.default_run();
    let seg = &sh.phantom.fixed_seg;
    for i in 0..seg.labels().len() {
        let owner = out.regions.iter().find(|r| r.label == seg.labels()[i]).unwrap();
        if out.field.vectors()[i] != owner.displacement.vectors()[i] {
            return Err(format!("voxel {i}"));
        }
    }
    Ok("every voxel equals its owner's field".into())
}

fn region_order_independence(_: &Shared) -> Result<String, String> {
    let spec = PhantomSpec {
        layout: segreg::phantom::Layout::HalfSpaces,
        regions: vec![
            RegionTransform::translation([-1.0, 0.0, 0.0]),
            RegionTransform::translation([0.0, 1.0, 0.0]),
            RegionTransform::translation([1.0, 0.0, 0.5]),
        ],
        ..small_spec()
    };
    let (pairs, seg) = small_pairs(&spec);
    let cfg = fast_config().optimizer;
    let compose = |order: &[usize]| {
        let permuted: Vec<_> = order.iter().map(|&k| pairs[k].clone()).collect();
        let res = solve_regions(&permuted, &cfg).unwrap();
        let refs: Vec<(u32, &DisplacementField)> = res.iter().map(|r| (r.label, &r.displacement)).collect();
        compose_fields(&refs, &seg).unwrap()
    };
    let base = compose(&(0..pairs.len()).collect::<Vec<_>>());
    let mut r = rng(5);
    for _ in 0..3 {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut r);
        let f = compose(&order);
        let same = f.vectors().iter().zip(base.vectors()).all(|(a, b)| (0..3).all(|k| a[k].to_bits() == b[k].to_bits()));
        if !same {
            return Err(format!("order {order:?} changes the field"));
        }
    }
    Ok(format!("{} regions, 3 permutations bitwise equal", pairs.len()))
}

fn report_self_consistent(sh: &Shared) -> Result<String, String> {
    let out = sh.default_run();
    let p = &sh.phantom;
    let warped = warp_labelmap(&p.moving_seg, &out.field).unwrap();
    for (l, m) in &out.report.per_label {
        let d = dice(&warped, &p.fixed_seg, *l).unwrap();
        if d != m.dice {
            return Err(format!("label {l}: {d} vs reported {}", m.dice));
        }
    }
    Ok("recomputed Dice equals the report".into())
}

fn mode_monotone(sh: &Shared) -> Result<String, String> {
    let one = sh.mode0_run().report.mean_dice();
    let two = sh.default_run().report.mean_dice();
    if two >= one {
        Ok(format!("k=1 {one:.4} <= k=2 {two:.4}"))
    } else {
        Err(format!("k=1 {one:.4} > k=2 {two:.4}"))
    }
}

// eval-metrics

fn dice_symmetric(_: &Shared) -> Result<String, String> {
    prop(64, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let g = grid_of(&mut r, 1, 8);
        let (a, b) = (random_labels(&mut r, g, 3), random_labels(&mut r, g, 3));
        for l in 0..4 {
            ensure(dice(&a, &b, l).unwrap() == dice(&b, &a, l).unwrap(), || format!("label {l}"))?;
        }
        Ok(())
    })
}

fn hd95_properties(_: &Shared) -> Result<String, String> {
    prop(64, any::<u64>(), |seed| {
        let mut r = rng(seed);
        let g = grid_of(&mut r, 2, 9);
        let m = |r: &mut crate::common::Rng8| {
            LabelMap::new(g, random_mask(r, &g).iter().map(|&b| u32::from(b)).collect()).unwrap()
        };
        let (a, b) = (m(&mut r), m(&mut r));
        let ab = hd95(&a, &b, 1).unwrap();
        ensure(ab == hd95(&b, &a, 1).unwrap() && ab >= 0.0, || format!("asymmetric {ab}"))?;
        ensure(hd95(&a, &a, 1).unwrap() == 0.0, || "self distance".into())
    })
}

fn metric_oracles(_: &Shared) -> Result<String, String> {
    let rep = run_oracles(4242, 20);
    if rep.pass() {
        Ok(format!("{} fresh instances", rep.instances))
    } else {
        Err(format!("{rep:?}"))
    }
}

// phantom-lab

fn generator_consistency(sh: &Shared) -> Result<String, String> {
    let mut specs = vec![sh.spec.clone(), crate::common::affine_spec()];
    let mut r = rng(9);
    for seed in 0..2 {
        specs.push(PhantomSpec {
            seed,
            regions: (0..2)
                .map(|_| RegionTransform::translation([0, 1, 2].map(|_| r.random_range(-1.5..1.5))))
                .collect(),
            ..small_spec()
        });
    }
    let mut worst_ratio: f64 = 0.0;
    for spec in &specs {
        let p = make_phantom(spec).unwrap();
        let warped = warp_volume(&p.moving, &p.gt_composed).unwrap();
        let (lo, hi) = p.fixed.min_max();
        let g = *p.fixed.grid();
        let interior: Vec<bool> = (1..=spec.n_regions() as u32)
            .map(|l| erode(&g, &p.fixed_seg.binary(l), 2))
            .fold(vec![false; g.len()], |acc, m| acc.iter().zip(&m).map(|(a, b)| *a || *b).collect());
        let worst = (0..g.len())
            .filter(|&i| interior[i])
            .map(|i| (warped.samples()[i] - p.fixed.samples()[i]).abs())
            .fold(0.0, f64::max);
        worst_ratio = worst_ratio.max(worst / (hi - lo));
    }
    if worst_ratio < 0.02 {
        Ok(format!("{} specs, worst error {:.2}% of range", specs.len(), 100.0 * worst_ratio))
    } else {
        Err(format!("worst error {:.2}% of range", 100.0 * worst_ratio))
    }
}

fn phantom_seed_determinism(sh: &Shared) -> Result<String, String> {
    for spec in [sh.spec.clone(), small_spec()] {
        let (a, b) = (make_phantom(&spec).unwrap(), make_phantom(&spec).unwrap());
        let bits = |v: &Volume| v.samples().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        let same = bits(&a.moving) == bits(&b.moving)
            && bits(&a.fixed) == bits(&b.fixed)
            && a.moving_seg == b.moving_seg
            && a.fixed_seg == b.fixed_seg
            && a.gt_composed == b.gt_composed;
        if !same {
            return Err(format!("seed {} not reproducible", spec.seed));
        }
    }
    Ok("bundled and small specs reproduce bitwise".into())
}

// cli

fn cli_same_invocation(_: &Shared) -> Result<String, String> {
    let tmp = tempfile::tempdir().unwrap();
    let mut inputs = cli_phantom(&small_spec(), &tmp.path().join("ph"));
    inputs.extend(["--set".into(), "optimizer.iterations=20".into(), "--set".into(), "optimizer.levels=[2,1]".into()]);
    let mut json = Vec::new();
    for k in 0..2 {
        let out_dir = tmp.path().join(format!("run{k}"));
        let mut args: Vec<&str> = vec!["register", "--out-dir", path_str(&out_dir)];
        args.extend(inputs.iter().map(String::as_str));
        let o = run_cli(&args);
        if !o.status.success() {
            return Err(String::from_utf8_lossy(&o.stderr).into_owned());
        }
        json.push(std::fs::read(out_dir.join("metrics.json")).unwrap());
    }
    if json[0] != json[1] {
        return Err("metrics.json differs between identical runs".into());
    }
    let text = String::from_utf8(json.remove(0)).unwrap();
    let reals = text.split(|c: char| !(c.is_ascii_digit() || c == '.')).filter(|t| t.contains('.'));
    if let Some(bad) = reals.clone().find(|t| t.split('.').nth(1).map(str::len) != Some(6)) {
        return Err(format!("value {bad} not printed with six decimals"));
    }
    Ok(format!("identical bytes, {} reals at six decimals", reals.count()))
}

fn cli_help(_: &Shared) -> Result<String, String> {
    let tmp = tempfile::tempdir().unwrap();
    let target = tmp.path().join("must_not_exist");
    for cmd in [None, Some("register"), Some("evaluate"), Some("phantom"), Some("sweep")] {
        let mut args: Vec<&str> = cmd.into_iter().collect();
        args.extend(["--help", "--out-dir", path_str(&target)]);
        let o = run_cli(&args);
        if !o.status.success() || o.stdout.is_empty() {
            return Err(format!("{cmd:?} --help exited {:?}", o.status.code()));
        }
    }
    if target.exists() || std::fs::read_dir(tmp.path()).unwrap().next().is_some() {
        return Err("--help touched the filesystem".into());
    }
    Ok("5 help screens, exit 0, nothing written".into())
}

pub const INVARIANTS: [(&str, &str, Check); 29] = [
    ("volume-core", "trilinear exact on lattice, linear between", trilinear_lattice_and_linear),
    ("volume-core", "mask_apply over labels reconstructs the volume", mask_apply_partition),
    ("volume-core", "crop then uncrop is identity inside, zero outside", crop_uncrop),
    ("volume-core", "NRRD round trip bit-exact for f32/f64/u8/i16", nrrd_round_trip),
    ("field-transform", "bounded smooth velocity never folds the interior", bounded_velocity_no_folds),
    ("field-transform", "warp by zero field is bitwise identity", zero_warp_identity),
    ("field-transform", "composition equals field i on region i", compose_selects),
    ("field-transform", "doubling steps changes the field < 1e-3", doubling_steps),
    ("distance-transform", "exact EDT equals brute force on 8^3 masks", edt_brute_force),
    ("distance-transform", "normalized mask invariant to translation", edt_translation_invariant),
    ("distance-transform", "monotone along rays to the centre", edt_monotone_rays),
    ("loss-suite", "gradients match central differences", gradient_master),
    ("loss-suite", "loss values within their ranges", loss_ranges),
    ("loss-suite", "LNCC invariant to positive affine intensity maps", lncc_affine_invariant),
    ("loss-suite", "summed L2 over a partition equals the whole", l2_partition_sum),
    ("region-optimizer", "results independent of worker count", worker_independence),
    ("region-optimizer", "smoothed loss non-increasing within each level", descent),
    ("region-optimizer", "region fields fold-free on their regions", diffeomorphic_subfields),
    ("segreg-pipeline", "composed field equals the owning region's field", composed_selection),
    ("segreg-pipeline", "solve order changes no output bit", region_order_independence),
    ("segreg-pipeline", "reported Dice matches re-warped labels", report_self_consistent),
    ("segreg-pipeline", "mean Dice non-decreasing in region count", mode_monotone),
    ("eval-metrics", "dice symmetric", dice_symmetric),
    ("eval-metrics", "hd95 symmetric, non-negative, zero on itself", hd95_properties),
    ("eval-metrics", "metrics agree with brute-force oracles", metric_oracles),
    ("phantom-lab", "GT field maps moving onto fixed within 2%", generator_consistency),
    ("phantom-lab", "same spec and seed reproduce bitwise", phantom_seed_determinism),
    ("cli", "same invocation gives identical metrics JSON", cli_same_invocation),
    ("cli", "--help exits 0 without touching the filesystem", cli_help),
];
