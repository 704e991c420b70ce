//! Ray-driven forward projector, its exact adjoint, and the truncated
//! projection simulator.
//!
//! Forward projection samples trilinear interpolation of the volume along
//! each detector ray at a fixed step of `min(voxel)/2` (sample points at
//! step midpoints, the final partial step weighted by its true length).
//! Backprojection scatters through the very same sample enumeration and
//! interpolation weights, so `back_project` is the exact matrix transpose of
//! `forward_project` — the property SQS convergence relies on.
//!
//! Simulation deliberately uses the analytic phantom integrals instead of
//! this discrete operator, so reconstruction tests never commit the inverse
//! crime.

use rand::SeedableRng;
use rand_distr::Distribution;

use crate::geometry::{normalize, sub, ScanGeometry, VolumeGrid};
use crate::phantom::Phantom;
use crate::threading;

/// Dense attenuation samples on a [`VolumeGrid`], in 1/mm.
/// Index order is `(z, y, x)` with x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub grid: VolumeGrid,
    pub values: Vec<f64>,
}

impl Volume {
    pub fn zeros(grid: VolumeGrid) -> Self {
        let n = grid.num_voxels();
        Self {
            grid,
            values: vec![0.0; n],
        }
    }

    pub fn ones(grid: VolumeGrid) -> Self {
        let n = grid.num_voxels();
        Self {
            grid,
            values: vec![1.0; n],
        }
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        let [nx, ny, _] = self.grid.dims();
        (k * ny + j) * nx + i
    }

    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Trilinear interpolation at a world point; the lattice is the set of
    /// voxel centers and values are zero outside it.
    pub fn sample_trilinear(&self, p: [f64; 3]) -> f64 {
        let g = &self.grid;
        let q = [
            (p[0] - g.bbox_min[0]) / g.voxel[0] - 0.5,
            (p[1] - g.bbox_min[1]) / g.voxel[1] - 0.5,
            (p[2] - g.bbox_min[2]) / g.voxel[2] - 0.5,
        ];
        sample_index_space(&self.values, g.dims(), q)
    }
}

/// Per-angle detector images of line integrals.
/// Index order is `(angle, row, col)` with col fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionStack {
    pub geom: ScanGeometry,
    pub data: Vec<f64>,
}

impl ProjectionStack {
    pub fn zeros(geom: ScanGeometry) -> Self {
        let n = geom.total_rays();
        Self {
            geom,
            data: vec![0.0; n],
        }
    }

    #[inline]
    pub fn index(&self, angle: usize, row: usize, col: usize) -> usize {
        (angle * self.geom.det_rows + row) * self.geom.det_cols + col
    }

    pub fn at(&self, angle: usize, row: usize, col: usize) -> f64 {
        self.data[self.index(angle, row, col)]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Checks that two stacks share the same acquisition geometry.
    pub fn same_geometry(&self, other: &ProjectionStack) -> bool {
        self.geom == other.geom
    }
}

#[inline]
fn sample_index_space(values: &[f64], dims: [usize; 3], q: [f64; 3]) -> f64 {
    let [nx, ny, nz] = dims;
    let fx = q[0].floor();
    let fy = q[1].floor();
    let fz = q[2].floor();
    let wx = q[0] - fx;
    let wy = q[1] - fy;
    let wz = q[2] - fz;
    let ix = fx as isize;
    let iy = fy as isize;
    let iz = fz as isize;
    if ix >= 0
        && iy >= 0
        && iz >= 0
        && (ix as usize) + 1 < nx
        && (iy as usize) + 1 < ny
        && (iz as usize) + 1 < nz
    {
        // Fully interior: all eight corners valid, and the largest offset
        // (base_z + nx + 1) stays below nx*ny*nz by the bound above.
        let (ix, iy, iz) = (ix as usize, iy as usize, iz as usize);
        let base = (iz * ny + iy) * nx + ix;
        let base_z = base + nx * ny;
        debug_assert!(base_z + nx + 1 < values.len() + 1);
        unsafe {
            let c000 = *values.get_unchecked(base);
            let c100 = *values.get_unchecked(base + 1);
            let c010 = *values.get_unchecked(base + nx);
            let c110 = *values.get_unchecked(base + nx + 1);
            let c001 = *values.get_unchecked(base_z);
            let c101 = *values.get_unchecked(base_z + 1);
            let c011 = *values.get_unchecked(base_z + nx);
            let c111 = *values.get_unchecked(base_z + nx + 1);
            let x00 = c000 + wx * (c100 - c000);
            let x10 = c010 + wx * (c110 - c010);
            let x01 = c001 + wx * (c101 - c001);
            let x11 = c011 + wx * (c111 - c011);
            let y0 = x00 + wy * (x10 - x00);
            let y1 = x01 + wy * (x11 - x01);
            y0 + wz * (y1 - y0)
        }
    } else {
        let mut acc = 0.0;
        for dz in 0..2isize {
            let z = iz + dz;
            if z < 0 || z as usize >= nz {
                continue;
            }
            let wz_c = if dz == 0 { 1.0 - wz } else { wz };
            for dy in 0..2isize {
                let y = iy + dy;
                if y < 0 || y as usize >= ny {
                    continue;
                }
                let wy_c = if dy == 0 { 1.0 - wy } else { wy };
                for dx in 0..2isize {
                    let x = ix + dx;
                    if x < 0 || x as usize >= nx {
                        continue;
                    }
                    let wx_c = if dx == 0 { 1.0 - wx } else { wx };
                    acc += values[((z as usize) * ny + y as usize) * nx + x as usize]
                        * wx_c
                        * wy_c
                        * wz_c;
                }
            }
        }
        acc
    }
}

#[inline]
fn scatter_index_space(values: &mut [f64], dims: [usize; 3], q: [f64; 3], amount: f64) {
    let [nx, ny, nz] = dims;
    let fx = q[0].floor();
    let fy = q[1].floor();
    let fz = q[2].floor();
    let wx = q[0] - fx;
    let wy = q[1] - fy;
    let wz = q[2] - fz;
    let ix = fx as isize;
    let iy = fy as isize;
    let iz = fz as isize;
    if ix >= 0
        && iy >= 0
        && iz >= 0
        && (ix as usize) + 1 < nx
        && (iy as usize) + 1 < ny
        && (iz as usize) + 1 < nz
    {
        let (ix, iy, iz) = (ix as usize, iy as usize, iz as usize);
        let base = (iz * ny + iy) * nx + ix;
        let base_z = base + nx * ny;
        debug_assert!(base_z + nx + 1 < values.len() + 1);
        unsafe {
            *values.get_unchecked_mut(base) += amount * (1.0 - wx) * (1.0 - wy) * (1.0 - wz);
            *values.get_unchecked_mut(base + 1) += amount * wx * (1.0 - wy) * (1.0 - wz);
            *values.get_unchecked_mut(base + nx) += amount * (1.0 - wx) * wy * (1.0 - wz);
            *values.get_unchecked_mut(base + nx + 1) += amount * wx * wy * (1.0 - wz);
            *values.get_unchecked_mut(base_z) += amount * (1.0 - wx) * (1.0 - wy) * wz;
            *values.get_unchecked_mut(base_z + 1) += amount * wx * (1.0 - wy) * wz;
            *values.get_unchecked_mut(base_z + nx) += amount * (1.0 - wx) * wy * wz;
            *values.get_unchecked_mut(base_z + nx + 1) += amount * wx * wy * wz;
        }
    } else {
        for dz in 0..2isize {
            let z = iz + dz;
            if z < 0 || z as usize >= nz {
                continue;
            }
            let wz_c = if dz == 0 { 1.0 - wz } else { wz };
            for dy in 0..2isize {
                let y = iy + dy;
                if y < 0 || y as usize >= ny {
                    continue;
                }
                let wy_c = if dy == 0 { 1.0 - wy } else { wy };
                for dx in 0..2isize {
                    let x = ix + dx;
                    if x < 0 || x as usize >= nx {
                        continue;
                    }
                    let wx_c = if dx == 0 { 1.0 - wx } else { wx };
                    values[((z as usize) * ny + y as usize) * nx + x as usize] +=
                        amount * wx_c * wy_c * wz_c;
                }
            }
        }
    }
}

/// Shared sample enumeration for one ray; the exact-adjoint guarantee comes
/// from gather and scatter walking identical `(position, weight)` pairs.
#[inline]
fn for_each_sample(
    grid: &VolumeGrid,
    source: [f64; 3],
    target: [f64; 3],
    h: f64,
    mut visit: impl FnMut([f64; 3], f64),
) {
    let dir = normalize(sub(target, source));
    let Some((t0, t1)) = grid.intersect(source, dir) else {
        return;
    };
    let len = t1 - t0;
    if len <= 0.0 {
        return;
    }
    let n_full = (len / h).floor() as usize;
    let rem = len - n_full as f64 * h;
    let q0 = [
        (source[0] + (t0 + 0.5 * h) * dir[0] - grid.bbox_min[0]) / grid.voxel[0] - 0.5,
        (source[1] + (t0 + 0.5 * h) * dir[1] - grid.bbox_min[1]) / grid.voxel[1] - 0.5,
        (source[2] + (t0 + 0.5 * h) * dir[2] - grid.bbox_min[2]) / grid.voxel[2] - 0.5,
    ];
    let qstep = [
        dir[0] * h / grid.voxel[0],
        dir[1] * h / grid.voxel[1],
        dir[2] * h / grid.voxel[2],
    ];
    for k in 0..n_full {
        let kf = k as f64;
        visit(
            [
                q0[0] + kf * qstep[0],
                q0[1] + kf * qstep[1],
                q0[2] + kf * qstep[2],
            ],
            h,
        );
    }
    if rem > 0.0 {
        let t = t0 + n_full as f64 * h + 0.5 * rem;
        visit(
            [
                (source[0] + t * dir[0] - grid.bbox_min[0]) / grid.voxel[0] - 0.5,
                (source[1] + t * dir[1] - grid.bbox_min[1]) / grid.voxel[1] - 0.5,
                (source[2] + t * dir[2] - grid.bbox_min[2]) / grid.voxel[2] - 0.5,
            ],
            rem,
        );
    }
}

fn project_view(vol: &Volume, geom: &ScanGeometry, angle: f64, out: &mut [f64]) {
    let pose = geom.pose(angle);
    let dims = vol.grid.dims();
    let h = vol.grid.min_voxel() / 2.0;
    for row in 0..geom.det_rows {
        for col in 0..geom.det_cols {
            let target = geom.pixel_position(&pose, col as f64, row as f64);
            let mut acc = 0.0;
            for_each_sample(&vol.grid, pose.source, target, h, |q, w| {
                acc += sample_index_space(&vol.values, dims, q) * w;
            });
            out[row * geom.det_cols + col] = acc;
        }
    }
}

fn backproject_view(
    view: &[f64],
    geom: &ScanGeometry,
    angle: f64,
    grid: &VolumeGrid,
    out: &mut [f64],
) {
    let pose = geom.pose(angle);
    let dims = grid.dims();
    let h = grid.min_voxel() / 2.0;
    for row in 0..geom.det_rows {
        for col in 0..geom.det_cols {
            let value = view[row * geom.det_cols + col];
            if value == 0.0 {
                continue;
            }
            let target = geom.pixel_position(&pose, col as f64, row as f64);
            for_each_sample(grid, pose.source, target, h, |q, w| {
                scatter_index_space(out, dims, q, value * w);
            });
        }
    }
}

/// Discrete forward projection `A u`.
pub fn forward_project(vol: &Volume, geom: &ScanGeometry) -> ProjectionStack {
    let mut stack = ProjectionStack::zeros(geom.clone());
    let angles = geom.angles();
    let view_len = geom.rays_per_view();
    if threading::sequential() {
        for (view, &angle) in stack.data.chunks_mut(view_len).zip(angles.iter()) {
            project_view(vol, geom, angle, view);
        }
    } else {
        #[cfg(feature = "parallel")]
        threading::install(|| {
            use rayon::prelude::*;
            stack
                .data
                .par_chunks_mut(view_len)
                .zip(angles.par_iter())
                .for_each(|(view, &angle)| project_view(vol, geom, angle, view));
        });
    }
    stack
}

/// Exact transpose `A^T p`: every interpolation weight gathered by
/// [`forward_project`] is deposited identically.
pub fn back_project(p: &ProjectionStack, grid: &VolumeGrid) -> Volume {
    let geom = &p.geom;
    let angles = geom.angles();
    let view_len = geom.rays_per_view();
    let n = grid.num_voxels();
    let values = if threading::sequential() {
        let mut acc = vec![0.0; n];
        for (view, &angle) in p.data.chunks(view_len).zip(angles.iter()) {
            backproject_view(view, geom, angle, grid, &mut acc);
        }
        acc
    } else {
        #[cfg(not(feature = "parallel"))]
        unreachable!();
        #[cfg(feature = "parallel")]
        threading::install(|| {
            use rayon::prelude::*;
            p.data
                .par_chunks(view_len)
                .zip(angles.par_iter())
                .fold(
                    || vec![0.0; n],
                    |mut acc, (view, &angle)| {
                        backproject_view(view, geom, angle, grid, &mut acc);
                        acc
                    },
                )
                .reduce(
                    || vec![0.0; n],
                    |mut a, b| {
                        for (x, y) in a.iter_mut().zip(b.iter()) {
                            *x += y;
                        }
                        a
                    },
                )
        })
    };
    Volume {
        grid: grid.clone(),
        values,
    }
}

/// SQS denominator `A^T (A 1)`: strictly positive on every voxel crossed by
/// at least one ray.
pub fn sqs_weights(geom: &ScanGeometry, grid: &VolumeGrid) -> Volume {
    let ones = Volume::ones(grid.clone());
    let chords = forward_project(&ones, geom);
    back_project(&chords, grid)
}

/// Simulates truncated projections from the analytic phantom, with optional
/// additive Gaussian noise. The noise pass is sequential in `(angle, row,
/// col)` order, so results are independent of the worker thread count.
pub fn simulate_projections(
    ph: &Phantom,
    geom: &ScanGeometry,
    noise_sigma: f64,
    seed: u64,
) -> ProjectionStack {
    assert!(noise_sigma >= 0.0, "noise_sigma must be nonnegative");
    let mut stack = ProjectionStack::zeros(geom.clone());
    let angles = geom.angles();
    let view_len = geom.rays_per_view();
    let simulate_view = |angle: f64, view: &mut [f64]| {
        let pose = geom.pose(angle);
        for row in 0..geom.det_rows {
            for col in 0..geom.det_cols {
                let target = geom.pixel_position(&pose, col as f64, row as f64);
                let ray = crate::geometry::Ray {
                    origin: pose.source,
                    direction: normalize(sub(target, pose.source)),
                    span: None,
                };
                view[row * geom.det_cols + col] = ph.analytic_line_integral(&ray);
            }
        }
    };
    if threading::sequential() {
        for (view, &angle) in stack.data.chunks_mut(view_len).zip(angles.iter()) {
            simulate_view(angle, view);
        }
    } else {
        #[cfg(feature = "parallel")]
        threading::install(|| {
            use rayon::prelude::*;
            stack
                .data
                .par_chunks_mut(view_len)
                .zip(angles.par_iter())
                .for_each(|(view, &angle)| simulate_view(angle, view));
        });
    }
    if noise_sigma > 0.0 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::Normal::new(0.0, noise_sigma).expect("sigma checked above");
        for v in stack.data.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    stack
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ScanGeometry;
    use crate::phantom::{Ellipsoid, Phantom};

    fn small_geom() -> ScanGeometry {
        ScanGeometry {
            sdd: 600.0,
            sid: 400.0,
            det_cols: 33,
            det_rows: 25,
            pixel_u: 4.0,
            pixel_v: 4.0,
            offset_u: 0.0,
            offset_v: 0.0,
            n_angles: 16,
            angle_start: 0.0,
            angle_end: std::f64::consts::TAU,
        }
        .validated()
        .unwrap()
    }

    fn cube_grid(n: usize, voxel: f64) -> VolumeGrid {
        let half = n as f64 * voxel / 2.0;
        VolumeGrid::new([-half; 3], [half; 3], [voxel; 3]).unwrap()
    }

    #[test]
    fn zero_volume_projects_to_zero() {
        let geom = small_geom();
        let vol = Volume::zeros(cube_grid(16, 2.0));
        let p = forward_project(&vol, &geom);
        assert!(p.data.iter().all(|&x| x == 0.0));
        let v = back_project(&ProjectionStack::zeros(geom), &cube_grid(16, 2.0));
        assert!(v.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn uniform_cube_central_ray_integral() {
        let _guard = crate::threading::test_support::single_thread();
        // 64 voxels of 1 mm; the half-voxel skin at the faces costs ~0.4%.
        let grid = cube_grid(64, 1.0);
        let vol = Volume::ones(grid);
        let geom = ScanGeometry {
            det_cols: 33,
            det_rows: 25,
            ..small_geom()
        }
        .validated()
        .unwrap();
        let p = forward_project(&vol, &geom);
        let center = p.at(0, 12, 16);
        assert!(
            (center - 64.0).abs() / 64.0 < 0.005,
            "central chord {center} should be 64 within 0.5%"
        );
    }

    #[test]
    fn single_pixel_backprojection_footprint() {
        let _guard = crate::threading::test_support::single_thread();
        let geom = small_geom();
        let grid = cube_grid(24, 2.0);
        let mut p = ProjectionStack::zeros(geom.clone());
        let idx = p.index(3, 12, 16);
        p.data[idx] = 1.0;
        let v = back_project(&p, &grid);
        let ray = geom.ray_for_pixel(geom.angles()[3], 16, 12, &grid);
        let [nx, ny, nz] = grid.dims();
        let mut nonzero = 0;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let val = v.at(i, j, k);
                    if val != 0.0 {
                        nonzero += 1;
                        let c = grid.voxel_center(i, j, k);
                        // Distance from voxel center to the ray line.
                        let d = crate::geometry::sub(c, ray.origin);
                        let along = crate::geometry::dot(d, ray.direction);
                        let perp = crate::geometry::sub(
                            d,
                            crate::geometry::scale(ray.direction, along),
                        );
                        let dist = crate::geometry::norm(perp);
                        assert!(dist < 2.0 * 3.0f64.sqrt(), "voxel off the ray: {dist}");
                    }
                }
            }
        }
        assert!(nonzero > 0);
    }

    #[test]
    fn simulator_is_deterministic() {
        let geom = ScanGeometry {
            n_angles: 4,
            det_cols: 12,
            det_rows: 8,
            ..small_geom()
        }
        .validated()
        .unwrap();
        let ph = Phantom::new(vec![
            Ellipsoid::new([0.0; 3], [20.0; 3], [0.0; 3], 0.02).unwrap()
        ]);
        let a = simulate_projections(&ph, &geom, 0.01, 7);
        let b = simulate_projections(&ph, &geom, 0.01, 7);
        assert_eq!(a.data, b.data);
        let c = simulate_projections(&ph, &geom, 0.01, 8);
        assert_ne!(a.data, c.data);
        let empty = simulate_projections(&Phantom::default(), &geom, 0.0, 0);
        assert!(empty.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn weights_match_composition_and_coverage() {
        let _guard = crate::threading::test_support::single_thread();
        let geom = small_geom();
        let grid = cube_grid(12, 2.0);
        let w = sqs_weights(&geom, &grid);
        let again = back_project(&forward_project(&Volume::ones(grid.clone()), &geom), &grid);
        assert_eq!(w.values, again.values);
        // Interior voxel of a well-covered grid is positive.
        assert!(w.at(6, 6, 6) > 0.0);
        // A grid far outside every ray gets zero weight.
        let far = VolumeGrid::new([900.0; 3], [920.0; 3], [2.0; 3]).unwrap();
        let w_far = sqs_weights(&geom, &far);
        assert!(w_far.values.iter().all(|&x| x == 0.0));
    }
}
