//! Circular cone-beam acquisition geometry and imaging domains.
//!
//! World frame convention: the isocenter sits at the origin, the source
//! rotates counterclockwise in the xy-plane with angle 0 on +x, and z is the
//! patient (axial) axis. The flat detector is perpendicular to the
//! source-isocenter axis at distance `sdd` from the source; its local u axis
//! is the in-plane tangent `(-sin a, cos a, 0)` and its v axis is +z.
//! A positive `offset_u`/`offset_v` shifts the detector center toward +u/+v.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid scan geometry: {0}")]
    InvalidScan(String),
    #[error("invalid volume grid: {0}")]
    InvalidGrid(String),
    #[error("detector index out of range: col {col}, row {row} on a {cols}x{rows} detector")]
    PixelOutOfRange {
        col: usize,
        row: usize,
        cols: usize,
        rows: usize,
    },
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn normalize(a: [f64; 3]) -> [f64; 3] {
    scale(a, 1.0 / norm(a))
}

/// Circular cone-beam scan description. Distances in mm, angles in radians.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanGeometry {
    /// Source-to-detector distance.
    pub sdd: f64,
    /// Source-to-isocenter distance.
    pub sid: f64,
    pub det_cols: usize,
    pub det_rows: usize,
    pub pixel_u: f64,
    pub pixel_v: f64,
    /// Displacement of the detector center from the piercing point of the
    /// source-isocenter axis, along the local u axis.
    pub offset_u: f64,
    /// Same displacement along the local v axis (+z).
    pub offset_v: f64,
    pub n_angles: usize,
    pub angle_start: f64,
    pub angle_end: f64,
}

impl ScanGeometry {
    /// Validates the invariants and returns the geometry by value, so it can
    /// be built with struct-literal syntax.
    pub fn validated(self) -> Result<Self, GeometryError> {
        let fail = |msg: String| Err(GeometryError::InvalidScan(msg));
        if !(self.sdd > self.sid && self.sid > 0.0) {
            return fail(format!("need sdd > sid > 0, got sdd={} sid={}", self.sdd, self.sid));
        }
        if !(self.pixel_u > 0.0 && self.pixel_v > 0.0) {
            return fail(format!(
                "pixel pitch must be positive, got {}x{}",
                self.pixel_u, self.pixel_v
            ));
        }
        if self.det_cols == 0 || self.det_rows == 0 {
            return fail("detector must have at least one row and column".into());
        }
        if self.n_angles == 0 {
            return fail("need at least one projection angle".into());
        }
        if !self.angle_end.is_finite() || !self.angle_start.is_finite() {
            return fail("angle range must be finite".into());
        }
        Ok(self)
    }

    /// Uniformly spaced projection angles over `[angle_start, angle_end)`,
    /// endpoint excluded.
    pub fn angles(&self) -> Vec<f64> {
        let step = (self.angle_end - self.angle_start) / self.n_angles as f64;
        (0..self.n_angles)
            .map(|i| self.angle_start + i as f64 * step)
            .collect()
    }

    pub fn rays_per_view(&self) -> usize {
        self.det_cols * self.det_rows
    }

    pub fn total_rays(&self) -> usize {
        self.n_angles * self.rays_per_view()
    }

    /// Local detector coordinates of a (possibly fractional) pixel index,
    /// offsets included.
    pub fn local_detector_coords(&self, col: f64, row: f64) -> (f64, f64) {
        let u = (col - (self.det_cols as f64 - 1.0) / 2.0) * self.pixel_u + self.offset_u;
        let v = (row - (self.det_rows as f64 - 1.0) / 2.0) * self.pixel_v + self.offset_v;
        (u, v)
    }

    /// Source position at `angle`: `sid * (cos a, sin a, 0)`.
    pub fn source_position(&self, angle: f64) -> [f64; 3] {
        [self.sid * angle.cos(), self.sid * angle.sin(), 0.0]
    }

    /// Per-angle frame: source position, piercing point of the central axis
    /// on the detector, and the detector's local axes.
    pub fn pose(&self, angle: f64) -> AnglePose {
        let (c, s) = (angle.cos(), angle.sin());
        let source = [self.sid * c, self.sid * s, 0.0];
        // Central axis points from the source through the isocenter.
        let axis = [-c, -s, 0.0];
        let piercing = add(source, scale(axis, self.sdd));
        AnglePose {
            source,
            piercing,
            e_u: [-s, c, 0.0],
            e_v: [0.0, 0.0, 1.0],
        }
    }

    /// World position of a (possibly fractional) detector pixel for a pose.
    pub fn pixel_position(&self, pose: &AnglePose, col: f64, row: f64) -> [f64; 3] {
        let (u, v) = self.local_detector_coords(col, row);
        add(pose.piercing, add(scale(pose.e_u, u), scale(pose.e_v, v)))
    }

    /// World position of the center of detector pixel `(col, row)`.
    pub fn detector_pixel_center(
        &self,
        angle: f64,
        col: usize,
        row: usize,
    ) -> Result<[f64; 3], GeometryError> {
        if col >= self.det_cols || row >= self.det_rows {
            return Err(GeometryError::PixelOutOfRange {
                col,
                row,
                cols: self.det_cols,
                rows: self.det_rows,
            });
        }
        let pose = self.pose(angle);
        Ok(self.pixel_position(&pose, col as f64, row as f64))
    }

    /// Ray from the source through the center of pixel `(col, row)`, clipped
    /// against `clip`'s bounding box. Panics if the indices are out of range.
    pub fn ray_for_pixel(&self, angle: f64, col: usize, row: usize, clip: &VolumeGrid) -> Ray {
        assert!(
            col < self.det_cols && row < self.det_rows,
            "pixel ({col}, {row}) out of range"
        );
        let pose = self.pose(angle);
        let target = self.pixel_position(&pose, col as f64, row as f64);
        Ray::through(pose.source, target, clip)
    }

    /// Radius of the transaxial cylinder at the isocenter whose line
    /// integrals are all measured at least once during a full scan.
    ///
    /// With a laterally offset detector the conjugate ray of a one-sided
    /// measurement fills in the opposite side over a 2*pi rotation, so the
    /// completely sampled disk is set by the far detector edge:
    /// `U = det_cols*pixel_u/2 + |offset_u|`, projected back through the
    /// magnification as `sid*U / sqrt(sdd^2 + U^2)`.
    pub fn fov_radius(&self) -> f64 {
        let u_max = self.det_cols as f64 * self.pixel_u / 2.0 + self.offset_u.abs();
        self.sid * u_max / (self.sdd * self.sdd + u_max * u_max).sqrt()
    }
}

/// Source/detector frame at one projection angle.
#[derive(Debug, Clone, Copy)]
pub struct AnglePose {
    pub source: [f64; 3],
    /// Point where the source-isocenter axis pierces the detector plane.
    pub piercing: [f64; 3],
    pub e_u: [f64; 3],
    pub e_v: [f64; 3],
}

/// Axis-aligned voxel lattice. Voxel centers sit at
/// `bbox_min + (index + 0.5) * voxel`.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
    pub voxel: [f64; 3],
    dims: [usize; 3],
}

impl VolumeGrid {
    pub fn new(
        bbox_min: [f64; 3],
        bbox_max: [f64; 3],
        voxel: [f64; 3],
    ) -> Result<Self, GeometryError> {
        let mut dims = [0usize; 3];
        for a in 0..3 {
            if !(bbox_min[a] < bbox_max[a]) {
                return Err(GeometryError::InvalidGrid(format!(
                    "bbox_min must be below bbox_max on axis {a}: {} vs {}",
                    bbox_min[a], bbox_max[a]
                )));
            }
            if !(voxel[a] > 0.0) {
                return Err(GeometryError::InvalidGrid(format!(
                    "voxel size must be positive on axis {a}: {}",
                    voxel[a]
                )));
            }
            let exact = (bbox_max[a] - bbox_min[a]) / voxel[a];
            let rounded = exact.round();
            if (exact - rounded).abs() >= 1e-6 {
                return Err(GeometryError::InvalidGrid(format!(
                    "extent on axis {a} is not an integer number of voxels \
                     ({} / {} = {exact})",
                    bbox_max[a] - bbox_min[a],
                    voxel[a]
                )));
            }
            if rounded < 1.0 {
                return Err(GeometryError::InvalidGrid(format!(
                    "grid needs at least one voxel on axis {a}"
                )));
            }
            dims[a] = rounded as usize;
        }
        Ok(Self {
            bbox_min,
            bbox_max,
            voxel,
            dims,
        })
    }

    /// Voxel counts per axis `(x, y, z)`.
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.bbox_min[0] + (i as f64 + 0.5) * self.voxel[0],
            self.bbox_min[1] + (j as f64 + 0.5) * self.voxel[1],
            self.bbox_min[2] + (k as f64 + 0.5) * self.voxel[2],
        ]
    }

    pub fn min_voxel(&self) -> f64 {
        self.voxel[0].min(self.voxel[1]).min(self.voxel[2])
    }

    /// Half-open membership test: `bbox_min <= p < bbox_max` per axis.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.bbox_min[a] && p[a] < self.bbox_max[a])
    }

    /// Slab intersection of a ray with the bounding box; parameters are
    /// clamped to `t >= 0` (the ray starts at its origin).
    pub fn intersect(&self, origin: [f64; 3], direction: [f64; 3]) -> Option<(f64, f64)> {
        intersect_aabb(self.bbox_min, self.bbox_max, origin, direction)
    }
}

/// Slab intersection of the ray `origin + t * direction` with an axis-aligned
/// box, clamped to `t >= 0`.
pub fn intersect_aabb(
    bbox_min: [f64; 3],
    bbox_max: [f64; 3],
    origin: [f64; 3],
    direction: [f64; 3],
) -> Option<(f64, f64)> {
    let mut t_near = 0.0f64;
    let mut t_far = f64::INFINITY;
    for a in 0..3 {
        if direction[a] == 0.0 {
            if origin[a] < bbox_min[a] || origin[a] > bbox_max[a] {
                return None;
            }
        } else {
            let inv = 1.0 / direction[a];
            let mut t0 = (bbox_min[a] - origin[a]) * inv;
            let mut t1 = (bbox_max[a] - origin[a]) * inv;
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            t_near = t_near.max(t0);
            t_far = t_far.min(t1);
            if t_near > t_far {
                return None;
            }
        }
    }
    Some((t_near, t_far))
}

/// One cone-beam ray: unit direction from the source, with the parameter
/// span of its chord through a clip box (`None` when the box is missed).
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
    /// `(t_near, t_far)` in mm along `direction`, if the clip box is hit.
    pub span: Option<(f64, f64)>,
}

impl Ray {
    /// Ray from `origin` through `target`, clipped against `clip`.
    pub fn through(origin: [f64; 3], target: [f64; 3], clip: &VolumeGrid) -> Self {
        let direction = normalize(sub(target, origin));
        let span = clip.intersect(origin, direction);
        Ray {
            origin,
            direction,
            span,
        }
    }

    pub fn at(&self, t: f64) -> [f64; 3] {
        add(self.origin, scale(self.direction, t))
    }

    pub fn chord_length(&self) -> f64 {
        self.span.map_or(0.0, |(t0, t1)| t1 - t0)
    }
}
