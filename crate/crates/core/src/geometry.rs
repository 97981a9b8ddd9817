//! Physical voxel geometry.
//!
//! A tensor entry `(x, y, z)` (one-based) occupies the closed box
//!
//! ```text
//! origin.x + (x-1)·r <= X <= origin.x + x·r
//! origin.y + (y-1)·r <= Y <= origin.y + y·r
//! slice_z[z-1]       <= Z <= slice_z[z]
//! ```
//!
//! All geometry is computed in `f64` regardless of payload precision so that
//! threshold decisions on overlap ratios are reproducible.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn manhattan(&self, other: &Point3) -> f64 {
        (self.x - other.x).abs() + (self.y - other.y).abs() + (self.z - other.z).abs()
    }
}

/// Closed axis-aligned box, `min < max` on every axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3 {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Box3 {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        for axis in 0..3 {
            if !(min[axis] < max[axis]) || !min[axis].is_finite() || !max[axis].is_finite() {
                return Err(Error::InvalidGeometry(format!(
                    "box requires min < max on every axis, got {min:?} .. {max:?}"
                )));
            }
        }
        Ok(Self { min, max })
    }

    pub fn volume(&self) -> f64 {
        (self.max[0] - self.min[0]) * (self.max[1] - self.min[1]) * (self.max[2] - self.min[2])
    }

    pub fn translate(&self, offset: [f64; 3]) -> Self {
        Self {
            min: [
                self.min[0] + offset[0],
                self.min[1] + offset[1],
                self.min[2] + offset[2],
            ],
            max: [
                self.max[0] + offset[0],
                self.max[1] + offset[1],
                self.max[2] + offset[2],
            ],
        }
    }
}

/// Geometry of one voxel grid: slice origin, shared in-slice spacing and
/// z boundaries (`slices + 1` entries).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub origin_xy: [f64; 2],
    pub slice_resolution: f64,
    pub slice_z: Vec<f64>,
    /// Pixel counts along x and y within a slice.
    pub dims_xy: [usize; 2],
}

impl GridGeometry {
    pub fn new(
        origin_xy: [f64; 2],
        slice_resolution: f64,
        slice_z: Vec<f64>,
        dims_xy: [usize; 2],
    ) -> Result<Self> {
        let geom = Self {
            origin_xy,
            slice_resolution,
            slice_z,
            dims_xy,
        };
        geom.validate()?;
        Ok(geom)
    }

    /// Regular grid with uniform slice thickness starting at `z0`.
    pub fn uniform(
        origin_xy: [f64; 2],
        slice_resolution: f64,
        z0: f64,
        slice_thickness: f64,
        dims: [usize; 3],
    ) -> Result<Self> {
        let slice_z = (0..=dims[2])
            .map(|k| z0 + k as f64 * slice_thickness)
            .collect();
        Self::new(origin_xy, slice_resolution, slice_z, [dims[0], dims[1]])
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.slice_resolution > 0.0) || !self.slice_resolution.is_finite() {
            return Err(Error::InvalidGeometry(format!(
                "slice_resolution must be positive, got {}",
                self.slice_resolution
            )));
        }
        if !self.origin_xy.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidGeometry("non-finite origin".into()));
        }
        if self.slice_z.len() < 2 {
            return Err(Error::InvalidGeometry(
                "slice_z needs at least two boundaries".into(),
            ));
        }
        if !self.slice_z.iter().all(|v| v.is_finite())
            || self.slice_z.windows(2).any(|w| !(w[0] < w[1]))
        {
            return Err(Error::SliceZNotIncreasing);
        }
        if self.dims_xy[0] == 0 || self.dims_xy[1] == 0 {
            return Err(Error::EmptyGrid);
        }
        Ok(())
    }

    pub fn slices(&self) -> usize {
        self.slice_z.len() - 1
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.dims_xy[0], self.dims_xy[1], self.slices()]
    }

    pub fn len(&self) -> usize {
        self.dims_xy[0] * self.dims_xy[1] * self.slices()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major linear index of a zero-based entry (x slowest, z fastest).
    pub fn linear_index(&self, index: [usize; 3]) -> usize {
        (index[0] * self.dims_xy[1] + index[1]) * self.slices() + index[2]
    }

    pub fn grid_index(&self, linear: usize) -> [usize; 3] {
        let nz = self.slices();
        let ny = self.dims_xy[1];
        [linear / (ny * nz), (linear / nz) % ny, linear % nz]
    }

    /// Box of a zero-based entry. Callers guarantee the index is in range.
    pub fn voxel_box(&self, index: [usize; 3]) -> Box3 {
        let r = self.slice_resolution;
        let [ox, oy] = self.origin_xy;
        let (x, y, z) = (index[0] as f64, index[1] as f64, index[2]);
        Box3 {
            min: [ox + x * r, oy + y * r, self.slice_z[z]],
            max: [ox + (x + 1.0) * r, oy + (y + 1.0) * r, self.slice_z[z + 1]],
        }
    }

    /// Box center of a zero-based entry expressed relative to the grid
    /// anchor `(origin_x, origin_y, slice_z[0])`.
    ///
    /// The local frame is what makes geometric features exactly invariant
    /// under a common translation of the grid.
    pub fn local_center(&self, index: [usize; 3]) -> Point3 {
        let r = self.slice_resolution;
        let z0 = self.slice_z[0];
        Point3 {
            x: (index[0] as f64 + 0.5) * r,
            y: (index[1] as f64 + 0.5) * r,
            z: 0.5 * ((self.slice_z[index[2]] - z0) + (self.slice_z[index[2] + 1] - z0)),
        }
    }

    pub fn anchor(&self) -> Point3 {
        Point3::new(self.origin_xy[0], self.origin_xy[1], self.slice_z[0])
    }

    /// Translates origin and every slice boundary by `offset`.
    pub fn translated(&self, offset: [f64; 3]) -> Self {
        Self {
            origin_xy: [self.origin_xy[0] + offset[0], self.origin_xy[1] + offset[1]],
            slice_resolution: self.slice_resolution,
            slice_z: self.slice_z.iter().map(|z| z + offset[2]).collect(),
            dims_xy: self.dims_xy,
        }
    }

    /// Zero-based index ranges (per axis) guaranteed to contain every voxel
    /// with positive overlap against `b`. The ranges may include voxels with
    /// zero overlap; callers filter with [`overlap_volume`].
    pub fn candidate_ranges(&self, b: &Box3) -> [Range<usize>; 3] {
        let r = self.slice_resolution;
        let axis = |lo: f64, hi: f64, origin: f64, n: usize| -> Range<usize> {
            let start = ((lo - origin) / r).floor() - 1.0;
            let end = ((hi - origin) / r).ceil() + 1.0;
            let clamp = |v: f64| -> usize {
                if v.is_nan() || v <= 0.0 {
                    0
                } else if v >= n as f64 {
                    n
                } else {
                    v as usize
                }
            };
            clamp(start)..clamp(end)
        };
        let rx = axis(b.min[0], b.max[0], self.origin_xy[0], self.dims_xy[0]);
        let ry = axis(b.min[1], b.max[1], self.origin_xy[1], self.dims_xy[1]);
        let nz = self.slices();
        // first slice whose upper boundary exceeds b.min, last whose lower is below b.max
        let z_start = self.slice_z[1..].partition_point(|&z| z <= b.min[2]);
        let z_end = self.slice_z[..nz].partition_point(|&z| z < b.max[2]);
        let rz = z_start.saturating_sub(1)..(z_end + 1).min(nz);
        [rx, ry, rz]
    }
}

/// Box of a one-based tensor entry.
pub fn entry_to_box(geom: &GridGeometry, index: [usize; 3]) -> Result<Box3> {
    let dims = geom.shape();
    if (0..3).any(|a| index[a] < 1 || index[a] > dims[a]) {
        return Err(Error::IndexOutOfRange { index, dims });
    }
    Ok(geom.voxel_box([index[0] - 1, index[1] - 1, index[2] - 1]))
}

pub fn voxel_center(b: &Box3) -> Point3 {
    Point3 {
        x: 0.5 * (b.min[0] + b.max[0]),
        y: 0.5 * (b.min[1] + b.max[1]),
        z: 0.5 * (b.min[2] + b.max[2]),
    }
}

/// Intersection volume; boundary contact counts as zero.
pub fn overlap_volume(a: &Box3, b: &Box3) -> f64 {
    let mut v = 1.0;
    for axis in 0..3 {
        let lo = a.min[axis].max(b.min[axis]);
        let hi = a.max[axis].min(b.max[axis]);
        if hi <= lo {
            return 0.0;
        }
        v *= hi - lo;
    }
    v
}

/// Intersection volume over the volume of the smaller box.
pub fn overlap_ratio(a: &Box3, b: &Box3) -> f64 {
    let inter = overlap_volume(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    (inter / a.volume().min(b.volume())).min(1.0)
}
