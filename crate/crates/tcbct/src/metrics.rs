//! Volume comparison metrics over regions of interest.
//!
//! The default ROI for reconstruction scoring is the interior cylinder at
//! 80% of the grid's lateral half-extent (and 80% of its axial half-extent),
//! which excludes boundary voxels that corrected and uncorrected methods
//! legitimately disagree on.

use thiserror::Error;

use crate::geometry::VolumeGrid;
use crate::projector::Volume;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("volumes live on different grids")]
    GridMismatch,
    #[error("region of interest selects no voxels")]
    EmptyRoi,
}

/// Region of interest for metric evaluation, tested against voxel centers.
#[derive(Debug, Clone, PartialEq)]
pub enum Roi {
    All,
    /// Axis-aligned box given by a grid's bounding box (half-open).
    Box(VolumeGrid),
    /// Axial cylinder with an explicit z range.
    Cylinder {
        center: [f64; 2],
        radius: f64,
        z_min: f64,
        z_max: f64,
    },
}

impl Roi {
    /// Interior cylinder covering `frac` of the lateral and axial
    /// half-extents of `grid`.
    pub fn interior(grid: &VolumeGrid, frac: f64) -> Roi {
        let cx = 0.5 * (grid.bbox_min[0] + grid.bbox_max[0]);
        let cy = 0.5 * (grid.bbox_min[1] + grid.bbox_max[1]);
        let cz = 0.5 * (grid.bbox_min[2] + grid.bbox_max[2]);
        let rx = 0.5 * (grid.bbox_max[0] - grid.bbox_min[0]);
        let ry = 0.5 * (grid.bbox_max[1] - grid.bbox_min[1]);
        let rz = 0.5 * (grid.bbox_max[2] - grid.bbox_min[2]);
        Roi::Cylinder {
            center: [cx, cy],
            radius: frac * rx.min(ry),
            z_min: cz - frac * rz,
            z_max: cz + frac * rz,
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        match self {
            Roi::All => true,
            Roi::Box(grid) => grid.contains(p),
            Roi::Cylinder {
                center,
                radius,
                z_min,
                z_max,
            } => {
                let dx = p[0] - center[0];
                let dy = p[1] - center[1];
                dx * dx + dy * dy <= radius * radius && p[2] >= *z_min && p[2] <= *z_max
            }
        }
    }
}

fn roi_fold<F: FnMut(f64, f64)>(
    a: &Volume,
    b: &Volume,
    roi: &Roi,
    mut f: F,
) -> Result<usize, MetricsError> {
    if a.grid != b.grid {
        return Err(MetricsError::GridMismatch);
    }
    let [nx, ny, nz] = a.grid.dims();
    let mut count = 0;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if roi.contains(a.grid.voxel_center(i, j, k)) {
                    let idx = (k * ny + j) * nx + i;
                    f(a.values[idx], b.values[idx]);
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(MetricsError::EmptyRoi);
    }
    Ok(count)
}

/// Root-mean-square error over the ROI.
pub fn rmse(a: &Volume, b: &Volume, roi: &Roi) -> Result<f64, MetricsError> {
    let mut acc = 0.0;
    let n = roi_fold(a, b, roi, |x, y| {
        let d = x - y;
        acc += d * d;
    })?;
    Ok((acc / n as f64).sqrt())
}

/// Mean absolute error over the ROI.
pub fn mae(a: &Volume, b: &Volume, roi: &Roi) -> Result<f64, MetricsError> {
    let mut acc = 0.0;
    let n = roi_fold(a, b, roi, |x, y| acc += (x - y).abs())?;
    Ok(acc / n as f64)
}

/// Peak signal-to-noise ratio in dB; identical volumes report +infinity.
pub fn psnr(a: &Volume, b: &Volume, peak: f64, roi: &Roi) -> Result<f64, MetricsError> {
    let r = rmse(a, b, roi)?;
    if r == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(20.0 * (peak / r).log10())
    }
}
