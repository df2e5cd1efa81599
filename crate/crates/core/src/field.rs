//! Velocity and displacement fields, scaling-and-squaring integration,
//! warping and region-wise composition.
//!
//! Vectors are in voxel units. A displacement `u` defines the map
//! `x -> x + u(x)` from fixed-frame voxels to moving-frame positions.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{BoundingBox, Grid};
use crate::interp;
use crate::volume::{crop_slice, LabelMap, Volume};

pub type Vec3 = [f64; 3];

fn check_vectors(grid: &Grid, vectors: &[Vec3]) -> Result<()> {
    if vectors.len() != grid.len() {
        return Err(Error::GridMismatch(format!(
            "{} vectors for {} voxels",
            vectors.len(),
            grid.len()
        )));
    }
    if let Some(i) = vectors
        .iter()
        .position(|v| !(v[0].is_finite() && v[1].is_finite() && v[2].is_finite()))
    {
        return Err(Error::InvalidGrid(format!("non-finite vector at voxel {i}")));
    }
    Ok(())
}

macro_rules! vector_field {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            grid: Grid,
            vectors: Vec<Vec3>,
        }

        impl $name {
            pub fn new(grid: Grid, vectors: Vec<Vec3>) -> Result<Self> {
                check_vectors(&grid, &vectors)?;
                Ok(Self { grid, vectors })
            }

            pub fn zeros(grid: Grid) -> Self {
                Self {
                    vectors: vec![[0.0; 3]; grid.len()],
                    grid,
                }
            }

            pub fn from_fn(grid: Grid, f: impl Fn([usize; 3]) -> Vec3) -> Result<Self> {
                let vectors = (0..grid.len()).map(|i| f(grid.coords(i))).collect();
                Self::new(grid, vectors)
            }

            pub fn grid(&self) -> &Grid {
                &self.grid
            }

            pub fn vectors(&self) -> &[Vec3] {
                &self.vectors
            }

            pub fn into_vectors(self) -> Vec<Vec3> {
                self.vectors
            }

            pub fn get(&self, x: usize, y: usize, z: usize) -> Vec3 {
                self.vectors[self.grid.index(x, y, z)]
            }

            /// Sub-field inside `bbox`.
            pub fn crop(&self, bbox: &BoundingBox) -> Result<Self> {
                let grid = self.grid.sub_grid(bbox)?;
                Ok(Self {
                    vectors: crop_slice(&self.grid, &self.vectors, bbox),
                    grid,
                })
            }
        }
    };
}

vector_field!(
    /// Stationary velocity field.
    VelocityField
);
vector_field!(
    /// Displacement field `u` of the map `x + u(x)`.
    DisplacementField
);

/// One scaling-and-squaring step: `u(x) + u(x + u(x))`.
pub(crate) fn squaring_step(grid: &Grid, u: &[Vec3]) -> Vec<Vec3> {
    let dims = grid.dims();
    let mut out = vec![[0.0; 3]; u.len()];
    out.par_chunks_mut(dims[0])
        .enumerate()
        .for_each(|(row, chunk)| {
            let y = row % dims[1];
            let z = row / dims[1];
            let base = row * dims[0];
            for (x, o) in chunk.iter_mut().enumerate() {
                let ui = u[base + x];
                let p = [x as f64 + ui[0], y as f64 + ui[1], z as f64 + ui[2]];
                let s = interp::stencil(grid, p).apply_vec(u);
                *o = [ui[0] + s[0], ui[1] + s[1], ui[2] + s[2]];
            }
        });
    out
}

/// All intermediate displacements `u_0 = v / 2^steps, ..., u_steps`.
pub(crate) fn integrate_trajectory(grid: &Grid, v: &[Vec3], steps: usize) -> Vec<Vec<Vec3>> {
    let scale = 1.0 / (1u64 << steps) as f64;
    let mut traj = Vec::with_capacity(steps + 1);
    traj.push(
        v.iter()
            .map(|w| [w[0] * scale, w[1] * scale, w[2] * scale])
            .collect::<Vec<_>>(),
    );
    for _ in 0..steps {
        let next = squaring_step(grid, traj.last().unwrap());
        traj.push(next);
    }
    traj
}

/// Time-1 flow of a stationary velocity by scaling and squaring.
pub fn integrate_velocity(v: &VelocityField, steps: usize) -> Result<DisplacementField> {
    if steps == 0 {
        return Err(Error::InvalidConfig("integration steps must be >= 1".into()));
    }
    let mut traj = integrate_trajectory(&v.grid, &v.vectors, steps);
    Ok(DisplacementField {
        grid: v.grid,
        vectors: traj.pop().unwrap(),
    })
}

/// Sample `data` (on `source`) at `x + u(x)` for every voxel of `u`'s grid.
pub(crate) fn warp_samples(source: &Grid, data: &[f64], grid: &Grid, u: &[Vec3]) -> Vec<f64> {
    let dims = grid.dims();
    let mut out = vec![0.0; grid.len()];
    out.par_chunks_mut(dims[0])
        .enumerate()
        .for_each(|(row, chunk)| {
            let y = row % dims[1];
            let z = row / dims[1];
            let base = row * dims[0];
            for (x, o) in chunk.iter_mut().enumerate() {
                let d = u[base + x];
                let p = [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]];
                *o = interp::stencil(source, p).apply(data);
            }
        });
    out
}

/// `out(x) = vol(x + u(x))`, trilinear with border clamping.
pub fn warp_volume(vol: &Volume, u: &DisplacementField) -> Result<Volume> {
    vol.grid().ensure_same(&u.grid)?;
    let samples = warp_samples(vol.grid(), vol.samples(), &u.grid, &u.vectors);
    Volume::new(u.grid, samples)
}

/// Nearest-neighbour label warp.
pub fn warp_labelmap(lm: &LabelMap, u: &DisplacementField) -> Result<LabelMap> {
    lm.grid().ensure_same(&u.grid)?;
    let grid = u.grid;
    let labels = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let c = grid.coords(i);
            let d = u.vectors[i];
            lm.nearest_sample([
                c[0] as f64 + d[0],
                c[1] as f64 + d[1],
                c[2] as f64 + d[2],
            ])
        })
        .collect();
    LabelMap::new(grid, labels)
}

/// Assemble a global field by selecting, at each voxel, the field of the
/// region that owns the voxel in the fixed segmentation.
pub fn compose_fields(
    fields: &[(u32, &DisplacementField)],
    fixed_seg: &LabelMap,
) -> Result<DisplacementField> {
    let grid = *fixed_seg.grid();
    let mut by_label: Vec<(u32, &DisplacementField)> = Vec::with_capacity(fields.len());
    for &(label, f) in fields {
        if by_label.iter().any(|(l, _)| *l == label) {
            return Err(Error::DuplicateLabel(label));
        }
        f.grid.ensure_same(&grid)?;
        by_label.push((label, f));
    }
    by_label.sort_by_key(|(l, _)| *l);
    for &label in fixed_seg.label_set() {
        if by_label.binary_search_by_key(&label, |(l, _)| *l).is_err() {
            return Err(Error::MissingRegionField(label));
        }
    }
    let vectors = fixed_seg
        .labels()
        .iter()
        .enumerate()
        .map(|(i, label)| {
            let k = by_label.binary_search_by_key(label, |(l, _)| *l).unwrap();
            by_label[k].1.vectors[i]
        })
        .collect();
    Ok(DisplacementField { grid, vectors })
}

/// Embed a cropped field into `full`, zero displacement outside `bbox`.
pub fn uncrop_displacement(
    field: &DisplacementField,
    bbox: &BoundingBox,
    full: &Grid,
) -> Result<DisplacementField> {
    bbox.check_inside(full.dims())?;
    if field.grid.dims() != bbox.dims() {
        return Err(Error::GridMismatch(format!(
            "field dims {:?} do not match box dims {:?}",
            field.grid.dims(),
            bbox.dims()
        )));
    }
    let mut vectors = vec![[0.0; 3]; full.len()];
    let d = bbox.dims();
    for z in 0..d[2] {
        for y in 0..d[1] {
            let src = field.grid.index(0, y, z);
            let dst = full.index(bbox.min[0], bbox.min[1] + y, bbox.min[2] + z);
            vectors[dst..dst + d[0]].copy_from_slice(&field.vectors[src..src + d[0]]);
        }
    }
    Ok(DisplacementField {
        grid: *full,
        vectors,
    })
}
