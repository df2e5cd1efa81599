//! Brute-force references for the EDT, Dice, HD95 and field composition.

use rand::Rng;
use segreg::edt::exact_edt;
use segreg::field::compose_fields;
use segreg::metrics::{dice, hd95};
use segreg::{DisplacementField, Grid, LabelMap};

use crate::common::{random_dims, random_labels, random_mask, rng, Rng8};

/// Distance to the nearest background voxel; out-of-grid space counts as
/// background only when the grid holds none.
pub fn edt_oracle(g: &Grid, fg: &[bool]) -> Vec<f64> {
    let d = g.dims();
    let no_background = fg.iter().all(|&f| f);
    (0..g.len())
        .map(|i| {
            if !fg[i] {
                return 0.0;
            }
            let c = g.coords(i);
            let mut best = f64::INFINITY;
            for j in (0..g.len()).filter(|&j| !fg[j]) {
                let o = g.coords(j);
                let d2: f64 = (0..3).map(|a| (c[a] as f64 - o[a] as f64).powi(2)).sum();
                best = best.min(d2);
            }
            if no_background {
                for a in (0..3).filter(|&a| d[a] > 1) {
                    let lo = c[a] as f64 + 1.0;
                    let hi = (d[a] - c[a]) as f64;
                    best = best.min(lo * lo).min(hi * hi);
                }
            }
            best.sqrt()
        })
        .collect()
}

pub fn dice_oracle(a: &[u32], b: &[u32], l: u32) -> f64 {
    let (mut both, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        na += usize::from(x == l);
        nb += usize::from(y == l);
        both += usize::from(x == l && y == l);
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}

/// Surface voxels: in the mask with a 6-neighbour outside it or outside
/// the grid.
fn surface_oracle(g: &Grid, m: &[bool]) -> Vec<usize> {
    let d = g.dims();
    (0..m.len())
        .filter(|&i| {
            m[i] && {
                let c = g.coords(i);
                (0..3).filter(|&a| d[a] > 1).any(|a| {
                    [-1i64, 1].iter().any(|&o| {
                        let n = c[a] as i64 + o;
                        if n < 0 || n >= d[a] as i64 {
                            return true;
                        }
                        let mut cc = c;
                        cc[a] = n as usize;
                        !m[g.index(cc[0], cc[1], cc[2])]
                    })
                })
            }
        })
        .collect()
}

pub fn hd95_oracle(g: &Grid, a: &[bool], b: &[bool]) -> f64 {
    let s = g.spacing();
    let (sa, sb) = (surface_oracle(g, a), surface_oracle(g, b));
    let directed = |from: &[usize], to: &[usize]| {
        let mut dists: Vec<f64> = from
            .iter()
            .map(|&i| {
                let ci = g.coords(i);
                to.iter()
                    .map(|&j| {
                        let cj = g.coords(j);
                        (0..3)
                            .map(|k| s[k] * s[k] * (ci[k] as f64 - cj[k] as f64).powi(2))
                            .sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect();
        dists.sort_by(f64::total_cmp);
        let rank = (0.95 * dists.len() as f64).ceil() as usize;
        dists[rank.max(1) - 1]
    };
    directed(&sa, &sb).max(directed(&sb, &sa))
}

fn random_grid(r: &mut Rng8) -> Grid {
    let dims = random_dims(r, 8, 12);
    let spacing = if r.random_bool(0.5) {
        [1.0; 3]
    } else {
        [0, 1, 2].map(|_| r.random_range(0.5..2.0))
    };
    Grid::new(dims, spacing, [0.0; 3]).unwrap()
}

#[derive(Debug, Default)]
pub struct OracleReport {
    pub instances: usize,
    pub edt_mismatches: usize,
    pub dice_worst: f64,
    pub hd95_worst: f64,
    pub compose_mismatches: usize,
}

impl OracleReport {
    pub fn pass(&self) -> bool {
        self.edt_mismatches == 0 && self.dice_worst <= 1e-12 && self.hd95_worst <= 1e-12 && self.compose_mismatches == 0
    }
}

pub fn run_oracles(seed: u64, instances: usize) -> OracleReport {
    let mut r = rng(seed);
    let mut rep = OracleReport {
        instances,
        ..Default::default()
    };
    for _ in 0..instances {
        let g = random_grid(&mut r);
        let unit = Grid::unit(g.dims()).unwrap();

        let fg = if r.random_bool(0.05) { vec![true; g.len()] } else { random_mask(&mut r, &unit) };
        let got = exact_edt(&unit, &fg);
        if got.samples() != edt_oracle(&unit, &fg).as_slice() {
            rep.edt_mismatches += 1;
        }

        let a = random_labels(&mut r, g, 3);
        let b = random_labels(&mut r, g, 3);
        for l in 0..3 {
            let e = (dice(&a, &b, l).unwrap() - dice_oracle(a.labels(), b.labels(), l)).abs();
            rep.dice_worst = rep.dice_worst.max(e);
        }

        let ma = LabelMap::new(g, random_mask(&mut r, &unit).iter().map(|&m| u32::from(m)).collect()).unwrap();
        let mb = LabelMap::new(g, random_mask(&mut r, &unit).iter().map(|&m| u32::from(m)).collect()).unwrap();
        let e = (hd95(&ma, &mb, 1).unwrap() - hd95_oracle(&g, &ma.binary(1), &mb.binary(1))).abs();
        rep.hd95_worst = rep.hd95_worst.max(e);

        let fields: Vec<(u32, DisplacementField)> = a
            .label_set()
            .iter()
            .map(|&l| {
                let v = (0..g.len()).map(|_| [0, 1, 2].map(|_| r.random_range(-3.0..3.0))).collect();
                (l, DisplacementField::new(g, v).unwrap())
            })
            .collect();
        let refs: Vec<(u32, &DisplacementField)> = fields.iter().map(|(l, f)| (*l, f)).collect();
        let c = compose_fields(&refs, &a).unwrap();
        let ok = (0..g.len()).all(|i| {
            let owner = fields.iter().find(|(l, _)| *l == a.labels()[i]).unwrap();
            c.vectors()[i] == owner.1.vectors()[i]
        });
        if !ok {
            rep.compose_mismatches += 1;
        }
    }
    rep
}
