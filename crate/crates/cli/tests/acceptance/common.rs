use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segreg::config::{Preset, RunConfig};
use segreg::phantom::{make_phantom, Phantom, PhantomSpec, RegionTransform};
use segreg::pipeline::{nested_merges, run_segreg, run_segreg_with_reference, merge_labels, PipelineConfig, SegRegOutput};
use segreg::{Grid, LabelMap, Volume};

pub type Rng8 = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng8 {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_dims(rng: &mut Rng8, lo: usize, hi: usize) -> [usize; 3] {
    [0; 3].map(|_| rng.random_range(lo..=hi))
}

pub fn random_values(rng: &mut Rng8, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Random Bernoulli mask or a union of random boxes, never empty or full.
pub fn random_mask(rng: &mut Rng8, g: &Grid) -> Vec<bool> {
    let d = g.dims();
    loop {
        let m: Vec<bool> = if rng.random_bool(0.5) {
            let p = rng.random_range(0.2..0.9);
            (0..g.len()).map(|_| rng.random_bool(p)).collect()
        } else {
            let boxes: Vec<([usize; 3], [usize; 3])> = (0..rng.random_range(1..4))
                .map(|_| {
                    let lo = [0, 1, 2].map(|a| rng.random_range(0..d[a]));
                    let hi = [0, 1, 2].map(|a| rng.random_range(lo[a]..d[a]));
                    (lo, hi)
                })
                .collect();
            (0..g.len())
                .map(|i| {
                    let c = g.coords(i);
                    boxes.iter().any(|(lo, hi)| (0..3).all(|a| lo[a] <= c[a] && c[a] <= hi[a]))
                })
                .collect()
        };
        if m.contains(&true) && m.contains(&false) {
            return m;
        }
    }
}

/// Labels `0..n`, each present at least once (or once per voxel when the
/// grid has fewer than `n` voxels).
pub fn random_labels(rng: &mut Rng8, g: Grid, n: u32) -> LabelMap {
    let mut l: Vec<u32> = (0..g.len()).map(|_| rng.random_range(0..n)).collect();
    let mut idx: Vec<usize> = (0..g.len()).collect();
    idx.shuffle(rng);
    for (label, &i) in (0..n).zip(&idx) {
        l[i] = label;
    }
    LabelMap::new(g, l).unwrap()
}

/// Low-frequency random volume in [0, 1].
pub fn smooth_volume(rng: &mut Rng8, g: Grid) -> Volume {
    let c = random_values(rng, 9, -1.0, 1.0);
    let d = g.dims().map(|n| n as f64);
    Volume::from_fn(g, |[x, y, z]| {
        let (x, y, z) = (x as f64 / d[0], y as f64 / d[1], z as f64 / d[2]);
        0.5 + 0.15 * ((3.0 * x + c[0]).sin() * c[1] + (2.5 * y + c[2]).cos() * c[3] + (2.0 * z + 3.0 * x + c[4]).sin() * c[5])
            + 0.05 * (7.0 * x * c[6] + 5.0 * y * c[7] + 6.0 * z * c[8]).sin()
    })
    .unwrap()
}

/// The bundled layout with a small affine map per region.
pub fn affine_spec() -> PhantomSpec {
    let a = 0.04;
    PhantomSpec {
        seed: 3,
        regions: vec![
            RegionTransform {
                translation: [-3.0, 1.0, 0.0],
                matrix: Some([[1.0 + a, a / 2.0, 0.0], [-a / 2.0, 1.0 - a / 2.0, 0.0], [0.0, 0.0, 1.0]]),
            },
            RegionTransform {
                translation: [3.0, 0.0, -1.0],
                matrix: Some([[1.0 - a / 2.0, 0.0, a / 2.0], [0.0, 1.0, 0.0], [-a / 2.0, 0.0, 1.0 + a / 2.0]]),
            },
        ],
        ..PhantomSpec::two_region_translation()
    }
}

/// Small phantom for the determinism and CLI checks.
pub fn small_spec() -> PhantomSpec {
    PhantomSpec {
        dims: [24, 20, 16],
        margin: [6, 4, 4],
        regions: vec![
            RegionTransform::translation([-1.0, 0.0, 0.0]),
            RegionTransform::translation([1.0, 0.5, 0.0]),
        ],
        ..PhantomSpec::two_region_translation()
    }
}

pub fn fast_config() -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.optimizer.iterations = 30;
    c.optimizer.levels = vec![2, 1];
    c
}

/// Expensive runs shared between criteria.
pub struct Shared {
    pub spec: PhantomSpec,
    pub phantom: Phantom,
    default_run: OnceLock<SegRegOutput>,
    mode0_run: OnceLock<SegRegOutput>,
    edt_run: OnceLock<SegRegOutput>,
    affine: OnceLock<(PhantomSpec, Phantom, SegRegOutput)>,
}

impl Shared {
    pub fn new() -> Self {
        let spec = PhantomSpec::two_region_translation();
        let phantom = make_phantom(&spec).unwrap();
        Shared {
            spec,
            phantom,
            default_run: OnceLock::new(),
            mode0_run: OnceLock::new(),
            edt_run: OnceLock::new(),
            affine: OnceLock::new(),
        }
    }

    fn run(&self, cfg: &PipelineConfig) -> SegRegOutput {
        let p = &self.phantom;
        run_segreg(&p.moving, &p.fixed, &p.moving_seg, &p.fixed_seg, cfg).unwrap()
    }

    /// Default configuration, which is also the cardiac-dice preset.
    pub fn default_run(&self) -> &SegRegOutput {
        self.default_run.get_or_init(|| self.run(&PipelineConfig::default()))
    }

    pub fn preset_config(preset: Preset) -> PipelineConfig {
        RunConfig::layered(None, Some(preset), &[]).unwrap().to_pipeline().unwrap()
    }

    pub fn edt_run(&self) -> &SegRegOutput {
        self.edt_run.get_or_init(|| self.run(&Self::preset_config(Preset::CardiacEdt)))
    }

    /// Every foreground label merged into one region, scored on the
    /// original labels.
    pub fn mode0_run(&self) -> &SegRegOutput {
        self.mode0_run.get_or_init(|| {
            let p = &self.phantom;
            let merge = &nested_merges(&p.fixed_seg)[0];
            let mm = merge_labels(&p.moving_seg, merge).unwrap();
            let mf = merge_labels(&p.fixed_seg, merge).unwrap();
            run_segreg_with_reference(&p.moving, &p.fixed, &mm, &mf, &p.moving_seg, &p.fixed_seg, &PipelineConfig::default())
                .unwrap()
        })
    }

    pub fn affine_run(&self) -> &(PhantomSpec, Phantom, SegRegOutput) {
        self.affine.get_or_init(|| {
            let spec = affine_spec();
            let p = make_phantom(&spec).unwrap();
            let out = run_segreg(&p.moving, &p.fixed, &p.moving_seg, &p.fixed_seg, &PipelineConfig::default()).unwrap();
            (spec, p, out)
        })
    }
}

pub fn segreg_bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_segreg"))
}

pub fn run_cli(args: &[&str]) -> Output {
    Command::new(segreg_bin()).args(args).output().expect("segreg binary runs")
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// Writes a phantom bundle with the CLI and returns the four input flags.
pub fn cli_phantom(spec: &PhantomSpec, dir: &Path) -> Vec<String> {
    std::fs::create_dir_all(dir).unwrap();
    let spec_path = dir.join("spec.toml");
    std::fs::write(&spec_path, spec.to_toml()).unwrap();
    let out = run_cli(&["phantom", "--spec", path_str(&spec_path), "--out-dir", path_str(dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let f = |n: &str| path_str(&dir.join(n)).to_string();
    vec![
        "--moving".into(),
        f("moving.nrrd"),
        "--fixed".into(),
        f("fixed.nrrd"),
        "--moving-seg".into(),
        f("moving_seg.nrrd"),
        "--fixed-seg".into(),
        f("fixed_seg.nrrd"),
    ]
}
