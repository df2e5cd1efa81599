//! Regular 3D sampling grids and axis-aligned voxel boxes.
//!
//! Voxels are stored x-fastest: `index = x + dx * (y + dy * z)`. A 2D image is
//! a grid with `dz == 1`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidGrid(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidGrid(format!(
                "spacing must be finite and > 0, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGrid(format!("origin must be finite, got {origin:?}")));
        }
        Ok(Grid {
            dims,
            spacing,
            origin,
        })
    }

    /// Unit spacing, zero origin.
    pub fn unit(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3], [0.0; 3])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Always false; grids hold at least one voxel.
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }

    /// Same voxel lattice (dims, spacing, origin), compared exactly.
    pub fn same_as(&self, other: &Grid) -> bool {
        self == other
    }

    pub fn ensure_same(&self, other: &Grid) -> Result<()> {
        if self.same_as(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{:?}/{:?}/{:?} vs {:?}/{:?}/{:?}",
                self.dims, self.spacing, self.origin, other.dims, other.spacing, other.origin
            )))
        }
    }

    /// Sub-grid covered by `bbox`, origin shifted to the box corner.
    pub fn sub_grid(&self, bbox: &BoundingBox) -> Result<Grid> {
        bbox.check_inside(self.dims)?;
        let mut origin = self.origin;
        for a in 0..3 {
            origin[a] += bbox.min[a] as f64 * self.spacing[a];
        }
        Grid::new(bbox.dims(), self.spacing, origin)
    }

    /// Axes with more than one voxel.
    pub fn active_axes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..3).filter(move |&a| self.dims[a] > 1)
    }

    /// Offset in the flat array for a unit step along `axis`.
    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => 1,
            1 => self.dims[0],
            _ => self.dims[0] * self.dims[1],
        }
    }
}

/// Inclusive axis-aligned box of voxel indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl BoundingBox {
    pub fn full(dims: [usize; 3]) -> Self {
        BoundingBox {
            min: [0; 3],
            max: [dims[0] - 1, dims[1] - 1, dims[2] - 1],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [
            self.max[0] - self.min[0] + 1,
            self.max[1] - self.min[1] + 1,
            self.max[2] - self.min[2] + 1,
        ]
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// Smallest box containing both.
    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        let mut out = *self;
        for a in 0..3 {
            out.min[a] = out.min[a].min(other.min[a]);
            out.max[a] = out.max[a].max(other.max[a]);
        }
        out
    }

    /// Grow by `margin` voxels on every side, clipped to `dims`.
    pub fn dilate(&self, margin: usize, dims: [usize; 3]) -> BoundingBox {
        let mut out = *self;
        for a in 0..3 {
            out.min[a] = out.min[a].saturating_sub(margin);
            out.max[a] = (out.max[a] + margin).min(dims[a] - 1);
        }
        out
    }

    pub fn check_inside(&self, dims: [usize; 3]) -> Result<()> {
        let ok = (0..3).all(|a| self.min[a] <= self.max[a] && self.max[a] < dims[a]);
        if ok {
            Ok(())
        } else {
            Err(Error::BoxOutOfRange {
                min: self.min,
                max: self.max,
                dims,
            })
        }
    }
}
