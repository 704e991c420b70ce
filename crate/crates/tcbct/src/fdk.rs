//! Feldkamp-Davis-Kress filtered backprojection for circular cone-beam
//! scans with a flat, possibly laterally offset detector.
//!
//! Steps: cosine pre-weight `sdd/sqrt(sdd^2+u^2+v^2)`, conjugate-redundancy
//! weighting for the offset detector, row-wise ramp filtering (discrete
//! Ram-Lak kernel, optionally Hann-windowed), then backprojection with the
//! distance weight `sid*sdd*pixel_u / l(x, angle)^2` integrated over the
//! angular range, where `l` is the source-to-voxel distance projected on the
//! central axis. Filtering works directly in detector-plane coordinates;
//! the `sid/sdd` magnification that some formulations fold into an
//! isocenter-plane ramp kernel is carried by the backprojection weight
//! instead.
//!
//! Redundancy: over a full scan each transaxial line inside the overlap band
//! `|u| <= det_half_width - |offset_u|` is measured twice (at conjugate
//! angles with opposite detector sign), once outside it. A smooth
//! `sin^2`-transition weight `w(u)` with `w(u) + w(-u) = 1` removes the
//! double counting; for a centered detector it degenerates to the classic
//! constant 1/2.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::Fft;

use crate::geometry::{ScanGeometry, VolumeGrid};
use crate::projector::{ProjectionStack, Volume};
use crate::threading;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    /// Plain band-limited ramp (Ram-Lak).
    Ramp,
    /// Ram-Lak apodized by a Hann window (default for prior generation).
    RampHann,
}

impl std::str::FromStr for FilterKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ramp" => Ok(FilterKind::Ramp),
            "ramp_hann" => Ok(FilterKind::RampHann),
            other => Err(format!("unknown filter '{other}' (ramp|ramp_hann)")),
        }
    }
}

/// Row-filter description; `padding` is the zero-padded FFT length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub padding: usize,
}

impl FilterSpec {
    /// Smallest power-of-two padding covering `2 * det_cols`.
    pub fn for_geometry(geom: &ScanGeometry, kind: FilterKind) -> Self {
        Self {
            kind,
            padding: (2 * geom.det_cols).next_power_of_two(),
        }
    }

    pub fn validated(self, det_cols: usize) -> Result<Self, String> {
        if !self.padding.is_power_of_two() {
            return Err(format!("padding {} is not a power of two", self.padding));
        }
        if self.padding < 2 * det_cols {
            return Err(format!(
                "padding {} below 2 * det_cols = {}",
                self.padding,
                2 * det_cols
            ));
        }
        Ok(self)
    }
}

/// FDK cosine pre-weight: each sample times `sdd/sqrt(sdd^2+u^2+v^2)` with
/// `(u, v)` the local pixel coordinates, offsets included.
pub fn cosine_weight(p: &ProjectionStack) -> ProjectionStack {
    let geom = &p.geom;
    let mut out = p.clone();
    let sdd2 = geom.sdd * geom.sdd;
    for row in 0..geom.det_rows {
        for col in 0..geom.det_cols {
            let (u, v) = geom.local_detector_coords(col as f64, row as f64);
            let w = geom.sdd / (sdd2 + u * u + v * v).sqrt();
            for a in 0..geom.n_angles {
                let idx = out.index(a, row, col);
                out.data[idx] *= w;
            }
        }
    }
    out
}

/// Discrete band-limited ramp kernel for sample spacing `spacing`:
/// `1/(4 spacing^2)` at 0, zero at even taps, `-1/(pi n spacing)^2` at odd
/// taps.
pub fn ramp_kernel_tap(n: i64, spacing: f64) -> f64 {
    if n == 0 {
        1.0 / (4.0 * spacing * spacing)
    } else if n % 2 == 0 {
        0.0
    } else {
        let t = std::f64::consts::PI * n as f64 * spacing;
        -1.0 / (t * t)
    }
}

/// Frequency response of the padded kernel, optionally Hann-windowed.
fn kernel_spectrum(spec: &FilterSpec, det_cols: usize, spacing: f64) -> Vec<Complex<f64>> {
    let n = spec.padding;
    let mut kernel = vec![Complex::new(0.0, 0.0); n];
    // Wrap-around layout so circular convolution realizes the linear one.
    kernel[0] = Complex::new(ramp_kernel_tap(0, spacing), 0.0);
    for k in 1..det_cols as i64 + 1 {
        let tap = ramp_kernel_tap(k, spacing);
        kernel[k as usize] = Complex::new(tap, 0.0);
        kernel[n - k as usize] = Complex::new(tap, 0.0);
    }
    let fft = rustfft::FftPlanner::new().plan_fft_forward(n);
    fft.process(&mut kernel);
    if spec.kind == FilterKind::RampHann {
        for (k, c) in kernel.iter_mut().enumerate() {
            let f = k.min(n - k) as f64 / (n as f64 / 2.0);
            *c *= 0.5 * (1.0 + (std::f64::consts::PI * f).cos());
        }
    }
    kernel
}

/// Convolves every detector row with the ramp kernel via zero-padded FFT.
/// Returns the pure convolution sum (no sample-spacing factor).
pub fn filter_rows(p: &ProjectionStack, spec: &FilterSpec) -> ProjectionStack {
    let geom = &p.geom;
    let spec = spec
        .clone()
        .validated(geom.det_cols)
        .expect("invalid filter spec");
    let n = spec.padding;
    let spectrum = kernel_spectrum(&spec, geom.det_cols, geom.pixel_u);
    let mut planner = rustfft::FftPlanner::new();
    let fwd: Arc<dyn Fft<f64>> = planner.plan_fft_forward(n);
    let inv: Arc<dyn Fft<f64>> = planner.plan_fft_inverse(n);
    let mut out = p.clone();
    let cols = geom.det_cols;
    let scale = 1.0 / n as f64;
    let filter_row = |row: &mut [f64], buf: &mut Vec<Complex<f64>>| {
        buf.clear();
        buf.resize(n, Complex::new(0.0, 0.0));
        for (i, &v) in row.iter().enumerate() {
            buf[i] = Complex::new(v, 0.0);
        }
        fwd.process(buf);
        for (c, k) in buf.iter_mut().zip(spectrum.iter()) {
            *c *= k;
        }
        inv.process(buf);
        for (i, v) in row.iter_mut().enumerate() {
            *v = buf[i].re * scale;
        }
    };
    if threading::sequential() {
        let mut buf = Vec::new();
        for row in out.data.chunks_mut(cols) {
            filter_row(row, &mut buf);
        }
    } else {
        #[cfg(feature = "parallel")]
        threading::install(|| {
            use rayon::prelude::*;
            out.data
                .par_chunks_mut(cols)
                .for_each_init(Vec::new, |buf, row| filter_row(row, buf));
        });
    }
    out
}

/// Conjugate-redundancy weight per detector column for a full scan.
fn redundancy_weights(geom: &ScanGeometry) -> Vec<f64> {
    let half = geom.det_cols as f64 * geom.pixel_u / 2.0;
    let off = geom.offset_u;
    let band = half - off.abs();
    (0..geom.det_cols)
        .map(|col| {
            let (u, _) = geom.local_detector_coords(col as f64, 0.0);
            if off.abs() < 0.25 * geom.pixel_u {
                0.5
            } else if band <= geom.pixel_u {
                // No usable overlap: every ray is measured once.
                1.0
            } else {
                // Signed coordinate toward the wide detector side.
                let s = if off >= 0.0 { u } else { -u };
                if s >= band {
                    1.0
                } else if s <= -band {
                    0.0
                } else {
                    let t = std::f64::consts::FRAC_PI_4 * (1.0 + s / band);
                    t.sin().powi(2)
                }
            }
        })
        .collect()
}

/// Full FDK reconstruction onto `grid`.
pub fn fdk_reconstruct(p: &ProjectionStack, grid: &VolumeGrid, spec: &FilterSpec) -> Volume {
    let geom = &p.geom;
    assert!(geom.n_angles >= 2, "FDK needs at least two projections");
    // Pre-weight: cosine and conjugate redundancy.
    let mut weighted = cosine_weight(p);
    let redundancy = redundancy_weights(geom);
    for view in weighted.data.chunks_mut(geom.rays_per_view()) {
        for row in view.chunks_mut(geom.det_cols) {
            for (v, w) in row.iter_mut().zip(redundancy.iter()) {
                *v *= w;
            }
        }
    }
    let filtered = filter_rows(&weighted, spec);

    let [nx, ny, _nz] = grid.dims();
    let mut vol = Volume::zeros(grid.clone());
    let angles = geom.angles();
    let d_angle = (geom.angle_end - geom.angle_start) / geom.n_angles as f64;
    let scale = geom.sid * geom.sdd * geom.pixel_u * d_angle;
    let cols = geom.det_cols;
    let rows = geom.det_rows;
    let view_len = geom.rays_per_view();
    let backproject_slice = |k: usize, slice: &mut [f64]| {
        let z = grid.bbox_min[2] + (k as f64 + 0.5) * grid.voxel[2];
        for (a, &angle) in angles.iter().enumerate() {
            let (ca, sa) = (angle.cos(), angle.sin());
            let view = &filtered.data[a * view_len..(a + 1) * view_len];
            for j in 0..ny {
                let y = grid.bbox_min[1] + (j as f64 + 0.5) * grid.voxel[1];
                for i in 0..nx {
                    let x = grid.bbox_min[0] + (i as f64 + 0.5) * grid.voxel[0];
                    let l = geom.sid - (x * ca + y * sa);
                    if l <= 0.0 {
                        continue;
                    }
                    let tau = -x * sa + y * ca;
                    let u = geom.sdd * tau / l;
                    let v = geom.sdd * z / l;
                    let col_f = (u - geom.offset_u) / geom.pixel_u
                        + (cols as f64 - 1.0) / 2.0;
                    let row_f = (v - geom.offset_v) / geom.pixel_v
                        + (rows as f64 - 1.0) / 2.0;
                    let c0 = col_f.floor();
                    let r0 = row_f.floor();
                    let wc = col_f - c0;
                    let wr = row_f - r0;
                    let c0 = c0 as isize;
                    let r0 = r0 as isize;
                    let mut sample = 0.0;
                    for (dr, wrow) in [(0isize, 1.0 - wr), (1, wr)] {
                        let r = r0 + dr;
                        if r < 0 || r as usize >= rows || wrow == 0.0 {
                            continue;
                        }
                        for (dc, wcol) in [(0isize, 1.0 - wc), (1, wc)] {
                            let c = c0 + dc;
                            if c < 0 || c as usize >= cols || wcol == 0.0 {
                                continue;
                            }
                            sample += wrow * wcol * view[r as usize * cols + c as usize];
                        }
                    }
                    slice[j * nx + i] += scale / (l * l) * sample;
                }
            }
        }
    };
    let slab = nx * ny;
    if threading::sequential() {
        for (k, slice) in vol.values.chunks_mut(slab).enumerate() {
            backproject_slice(k, slice);
        }
    } else {
        #[cfg(feature = "parallel")]
        threading::install(|| {
            use rayon::prelude::*;
            vol.values
                .par_chunks_mut(slab)
                .enumerate()
                .for_each(|(k, slice)| backproject_slice(k, slice));
        });
    }
    vol
}
