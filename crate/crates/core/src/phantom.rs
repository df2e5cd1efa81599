//! Synthetic piecewise-smooth registration problems with analytic ground
//! truth: each region moves by its own affine map, so the true field is
//! smooth inside regions and jumps across their interfaces.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{compose_fields, DisplacementField, Vec3};
use crate::grid::Grid;
use crate::metrics::nearest_rank;
use crate::nrrd::{self, ScalarType};
use crate::volume::{erode, LabelMap, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// The foreground box cut into equal slabs along `split_axis`.
    HalfSpaces,
    /// Concentric ellipsoidal shells; the highest label is innermost.
    NestedBlobs,
    /// A foreground ellipsoid partitioned by nearest random seed.
    Voronoi,
}

/// Ground-truth map of one region about the grid centre `c`:
/// `x -> matrix (x - c) + c + translation`, in voxel units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionTransform {
    #[serde(default)]
    pub translation: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<[[f64; 3]; 3]>,
}

impl RegionTransform {
    pub fn translation(t: [f64; 3]) -> Self {
        RegionTransform {
            translation: t,
            matrix: None,
        }
    }

    fn linear(&self) -> [[f64; 3]; 3] {
        self.matrix
            .unwrap_or([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub layout: Layout,
    #[serde(default)]
    pub split_axis: usize,
    /// Background shell thickness around the foreground, per axis.
    pub margin: [usize; 3],
    /// Correlation length (voxels) of the region textures.
    pub correlation_length: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    pub seed: u64,
    /// One transform per foreground label `1..=regions.len()`.
    pub regions: Vec<RegionTransform>,
}

impl PhantomSpec {
    /// The bundled 48^3 two-region phantom: a box cut in two along x whose
    /// halves move apart by 3 voxels each, a 6-voxel jump at the interface.
    pub fn two_region_translation() -> Self {
        PhantomSpec {
            dims: [48, 48, 48],
            layout: Layout::HalfSpaces,
            split_axis: 0,
            margin: [14, 8, 8],
            correlation_length: 6.0,
            noise_sigma: 0.0,
            seed: 7,
            regions: vec![
                RegionTransform::translation([-3.0, 0.0, 0.0]),
                RegionTransform::translation([3.0, 0.0, 0.0]),
            ],
        }
    }

    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: PhantomSpec = toml::from_str(text).map_err(|e| Error::Parse {
            line: e
                .span()
                .map_or(0, |s| text[..s.start].matches('\n').count() + 1),
            message: e.message().to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("phantom spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::SpecInfeasible(m));
        if self.dims.contains(&0) {
            return bad(format!("dims must be positive, got {:?}", self.dims));
        }
        if self.regions.is_empty() {
            return bad("at least one region is required".into());
        }
        if self.split_axis > 2 {
            return bad(format!("split_axis must be 0, 1 or 2, got {}", self.split_axis));
        }
        for a in 0..3 {
            if self.dims[a] > 1 && 2 * self.margin[a] >= self.dims[a] {
                return bad(format!("margin {:?} leaves no foreground in {:?}", self.margin, self.dims));
            }
        }
        if self.layout == Layout::HalfSpaces {
            let a = self.split_axis;
            let width = self.dims[a] - 2 * self.margin[a].min(self.dims[a] / 2);
            if width < self.regions.len() {
                return bad(format!("{} slabs do not fit in a width of {width}", self.regions.len()));
            }
        }
        if !(self.correlation_length.is_finite() && self.correlation_length > 0.0) {
            return bad(format!("correlation_length must be positive, got {}", self.correlation_length));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        for (i, r) in self.regions.iter().enumerate() {
            if r.translation.iter().chain(r.linear().iter().flatten()).any(|v| !v.is_finite()) {
                return bad(format!("region {} has a non-finite transform", i + 1));
            }
            if invert3(&r.linear()).is_none() {
                return bad(format!("region {} has a singular matrix", i + 1));
            }
        }
        Ok(())
    }

    fn grid(&self) -> Result<Grid> {
        Grid::unit(self.dims)
    }

    fn centre(&self) -> Vec3 {
        [
            (self.dims[0] as f64 - 1.0) / 2.0,
            (self.dims[1] as f64 - 1.0) / 2.0,
            (self.dims[2] as f64 - 1.0) / 2.0,
        ]
    }

    /// Where region `label`'s map sends `x`. Background is the identity.
    pub fn map_point(&self, label: u32, x: Vec3) -> Vec3 {
        if label == 0 {
            return x;
        }
        let r = &self.regions[label as usize - 1];
        let m = r.linear();
        let c = self.centre();
        let d = [x[0] - c[0], x[1] - c[1], x[2] - c[2]];
        let mut out = [0.0; 3];
        for i in 0..3 {
            out[i] = m[i][0] * d[0] + m[i][1] * d[1] + m[i][2] * d[2] + c[i] + r.translation[i];
        }
        out
    }

    fn inverse_map_point(&self, label: u32, y: Vec3) -> Vec3 {
        let r = &self.regions[label as usize - 1];
        let inv = invert3(&r.linear()).expect("validated");
        let c = self.centre();
        let d = [
            y[0] - c[0] - r.translation[0],
            y[1] - c[1] - r.translation[1],
            y[2] - c[2] - r.translation[2],
        ];
        let mut out = [0.0; 3];
        for i in 0..3 {
            out[i] = inv[i][0] * d[0] + inv[i][1] * d[1] + inv[i][2] * d[2] + c[i];
        }
        out
    }
}

fn invert3(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det.abs() < 1e-12 || !det.is_finite() {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (a, b) = ((j + 1) % 3, (j + 2) % 3);
            let (c, d) = ((i + 1) % 3, (i + 2) % 3);
            inv[i][j] = (m[a][c] * m[b][d] - m[a][d] * m[b][c]) / det;
        }
    }
    Some(inv)
}

/// Fixed-frame region layout, evaluable at any continuous point.
struct LayoutFn {
    dims: [usize; 3],
    lo: Vec3,
    hi: Vec3,
    n: usize,
    kind: Layout,
    split_axis: usize,
    seeds: Vec<Vec3>,
}

impl LayoutFn {
    fn new(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for a in 0..3 {
            let (d, m) = (spec.dims[a] as f64, spec.margin[a] as f64);
            if spec.dims[a] == 1 {
                lo[a] = f64::NEG_INFINITY;
                hi[a] = f64::INFINITY;
            } else {
                lo[a] = m - 0.5;
                hi[a] = d - m - 0.5;
            }
        }
        let mut layout = LayoutFn {
            dims: spec.dims,
            lo,
            hi,
            n: spec.n_regions(),
            kind: spec.layout,
            split_axis: spec.split_axis,
            seeds: Vec::new(),
        };
        if spec.layout == Layout::Voronoi {
            while layout.seeds.len() < layout.n {
                let p = [0, 1, 2].map(|a| {
                    if spec.dims[a] == 1 {
                        0.0
                    } else {
                        rng.random_range(layout.lo[a]..layout.hi[a])
                    }
                });
                if layout.rho(p) < 0.8 {
                    layout.seeds.push(p);
                }
            }
        }
        layout
    }

    /// Normalized ellipsoidal radius inside the foreground box.
    fn rho(&self, p: Vec3) -> f64 {
        let mut s = 0.0;
        for a in 0..3 {
            if self.dims[a] > 1 {
                let c = (self.lo[a] + self.hi[a]) / 2.0;
                let r = (self.hi[a] - self.lo[a]) / 2.0;
                s += ((p[a] - c) / r).powi(2);
            }
        }
        s.sqrt()
    }

    fn region_of(&self, p: Vec3) -> u32 {
        match self.kind {
            Layout::HalfSpaces => {
                if (0..3).any(|a| p[a] < self.lo[a] || p[a] >= self.hi[a]) {
                    return 0;
                }
                let a = self.split_axis;
                let t = (p[a] - self.lo[a]) / (self.hi[a] - self.lo[a]);
                ((t * self.n as f64).floor() as usize).min(self.n - 1) as u32 + 1
            }
            Layout::NestedBlobs => {
                let r = self.rho(p);
                if r >= 1.0 {
                    0
                } else {
                    (self.n - (r * self.n as f64).floor() as usize) as u32
                }
            }
            Layout::Voronoi => {
                if self.rho(p) >= 1.0 {
                    return 0;
                }
                let d2 = |s: &Vec3| (0..3).map(|a| (p[a] - s[a]).powi(2)).sum::<f64>();
                let mut best = 0;
                for k in 1..self.seeds.len() {
                    if d2(&self.seeds[k]) < d2(&self.seeds[best]) {
                        best = k;
                    }
                }
                best as u32 + 1
            }
        }
    }
}

/// Band-limited random texture: a sum of cosines with wavelengths at least
/// the correlation length.
struct Material {
    base: f64,
    waves: Vec<(Vec3, f64, f64)>,
}

const TEXTURE_WAVES: usize = 8;
const TEXTURE_AMPLITUDE: f64 = 0.15;

impl Material {
    fn new(base: f64, corr: f64, active: [bool; 3], rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut waves = Vec::with_capacity(TEXTURE_WAVES);
        let mut total = 0.0;
        for _ in 0..TEXTURE_WAVES {
            let mut dir = [0.0; 3];
            for a in 0..3 {
                if active[a] {
                    dir[a] = normal.sample(rng);
                }
            }
            let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-12);
            let k = rng.random_range(0.5..1.0) * std::f64::consts::TAU / corr;
            let omega = dir.map(|d| d / norm * k);
            let amp = rng.random_range(0.5..1.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            total += amp;
            waves.push((omega, amp, phase));
        }
        for w in &mut waves {
            w.1 *= TEXTURE_AMPLITUDE / total;
        }
        Material { base, waves }
    }

    fn at(&self, p: Vec3) -> f64 {
        self.base
            + self
                .waves
                .iter()
                .map(|(w, a, ph)| a * (w[0] * p[0] + w[1] * p[1] + w[2] * p[2] + ph).cos())
                .sum::<f64>()
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub moving: Volume,
    pub fixed: Volume,
    pub moving_seg: LabelMap,
    pub fixed_seg: LabelMap,
    /// Per-label ground-truth fields on the full grid (label 0 included).
    pub gt_fields: Vec<(u32, DisplacementField)>,
    /// Ground truth composed by the fixed segmentation.
    pub gt_composed: DisplacementField,
}

fn gt_field(spec: &PhantomSpec, grid: &Grid, label: u32) -> Result<DisplacementField> {
    DisplacementField::from_fn(*grid, |[x, y, z]| {
        let p = [x as f64, y as f64, z as f64];
        let q = spec.map_point(label, p);
        [q[0] - p[0], q[1] - p[1], q[2] - p[2]]
    })
}

fn fixed_labels(layout: &LayoutFn, grid: &Grid) -> Result<LabelMap> {
    LabelMap::from_fn(*grid, |[x, y, z]| layout.region_of([x as f64, y as f64, z as f64]))
}

/// Build the phantom; deterministic in `spec` (including its seed).
pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let grid = spec.grid()?;
    let dims = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let layout = LayoutFn::new(spec, &mut rng);
    let active = [dims[0] > 1, dims[1] > 1, dims[2] > 1];
    let n = spec.n_regions();
    let materials: Vec<Material> = (0..=n)
        .map(|l| {
            let base = 0.2 + 0.6 * l as f64 / n as f64;
            Material::new(base, spec.correlation_length, active, &mut rng)
        })
        .collect();

    let fixed_seg = fixed_labels(&layout, &grid)?;
    let present = fixed_seg.label_set();
    for l in 1..=n as u32 {
        if !present.contains(&l) {
            return Err(Error::SpecInfeasible(format!("region {l} covers no voxel")));
        }
    }
    let inside = |q: Vec3| (0..3).all(|a| q[a] >= 0.0 && q[a] <= (dims[a] - 1) as f64);
    for (i, &l) in fixed_seg.labels().iter().enumerate() {
        if l == 0 {
            continue;
        }
        let c = grid.coords(i);
        let q = spec.map_point(l, [c[0] as f64, c[1] as f64, c[2] as f64]);
        if !inside(q) {
            return Err(Error::SpecInfeasible(format!(
                "region {l} leaves the grid (voxel {c:?} maps to {q:?})"
            )));
        }
    }

    let mut moving_labels = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let c = grid.coords(i);
        let y = [c[0] as f64, c[1] as f64, c[2] as f64];
        let mut owner = 0u32;
        for l in 1..=n as u32 {
            if layout.region_of(spec.inverse_map_point(l, y)) == l {
                if owner != 0 {
                    return Err(Error::SpecInfeasible(format!(
                        "regions {owner} and {l} overlap at {c:?} after moving"
                    )));
                }
                owner = l;
            }
        }
        moving_labels.push(owner);
    }
    let moving_seg = LabelMap::new(grid, moving_labels)?;

    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut noisy = |v: f64| {
        if spec.noise_sigma > 0.0 {
            v + noise.sample(&mut rng)
        } else {
            v
        }
    };
    let mut fixed = Vec::with_capacity(grid.len());
    for (i, &l) in fixed_seg.labels().iter().enumerate() {
        let c = grid.coords(i);
        let q = spec.map_point(l, [c[0] as f64, c[1] as f64, c[2] as f64]);
        fixed.push(noisy(materials[l as usize].at(q)));
    }
    let mut moving = Vec::with_capacity(grid.len());
    for (i, &l) in moving_seg.labels().iter().enumerate() {
        let c = grid.coords(i);
        moving.push(noisy(materials[l as usize].at([c[0] as f64, c[1] as f64, c[2] as f64])));
    }

    let gt_fields = (0..=n as u32)
        .map(|l| Ok((l, gt_field(spec, &grid, l)?)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<(u32, &DisplacementField)> = gt_fields
        .iter()
        .filter(|(l, _)| present.contains(l))
        .map(|(l, f)| (*l, f))
        .collect();
    let gt_composed = compose_fields(&refs, &fixed_seg)?;
    Ok(Phantom {
        moving: Volume::new(grid, moving)?,
        fixed: Volume::new(grid, fixed)?,
        moving_seg,
        fixed_seg,
        gt_fields,
        gt_composed,
    })
}

/// Error statistics (voxels) of an estimated field against the ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldError {
    pub mean: f64,
    pub p95: f64,
    /// Voxels evaluated.
    pub count: usize,
}

/// Euclidean error against the analytic field of `region`, inside the fixed
/// region eroded by 2 voxels.
pub fn gt_field_error(estimated: &DisplacementField, spec: &PhantomSpec, region: u32) -> Result<FieldError> {
    spec.validate()?;
    let grid = spec.grid()?;
    estimated.grid().ensure_same(&grid)?;
    if region as usize > spec.n_regions() {
        return Err(Error::LabelNotFound(region));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let layout = LayoutFn::new(spec, &mut rng);
    let fixed_seg = fixed_labels(&layout, &grid)?;
    let inner = erode(&grid, &fixed_seg.binary(region), 2);
    let mut errs = Vec::new();
    for (i, u) in estimated.vectors().iter().enumerate() {
        if inner[i] {
            let c = grid.coords(i);
            let p = [c[0] as f64, c[1] as f64, c[2] as f64];
            let q = spec.map_point(region, p);
            let e = (0..3).map(|a| (u[a] - (q[a] - p[a])).powi(2)).sum::<f64>().sqrt();
            errs.push(e);
        }
    }
    if errs.is_empty() {
        return Err(Error::EmptyRegion(region));
    }
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    errs.sort_by(f64::total_cmp);
    Ok(FieldError {
        mean,
        p95: nearest_rank(&errs, 0.95),
        count: errs.len(),
    })
}

/// File names of a phantom bundle, in writing order.
pub const BUNDLE_FILES: [&str; 6] = [
    "moving.nrrd",
    "fixed.nrrd",
    "moving_seg.nrrd",
    "fixed_seg.nrrd",
    "gt_displacement.nrrd",
    "phantom.toml",
];

/// Write the five volumes and the spec sidecar into `dir`.
pub fn write_bundle(phantom: &Phantom, spec: &PhantomSpec, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    nrrd::write_volume(&phantom.moving, ScalarType::Float32, dir.join(BUNDLE_FILES[0]))?;
    nrrd::write_volume(&phantom.fixed, ScalarType::Float32, dir.join(BUNDLE_FILES[1]))?;
    nrrd::write_labelmap(&phantom.moving_seg, dir.join(BUNDLE_FILES[2]))?;
    nrrd::write_labelmap(&phantom.fixed_seg, dir.join(BUNDLE_FILES[3]))?;
    nrrd::write_displacement(&phantom.gt_composed, dir.join(BUNDLE_FILES[4]))?;
    let side = dir.join(BUNDLE_FILES[5]);
    std::fs::write(&side, spec.to_toml()).map_err(|e| Error::io(&side, e))?;
    Ok(())
}
