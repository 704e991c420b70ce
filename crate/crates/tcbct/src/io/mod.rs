//! Bit-exact file formats: volumes, projection stacks, model checkpoints,
//! 16-bit grayscale slice export, and the text config format.
//!
//! Binary layout (all integers and floats little-endian):
//!
//! ```text
//! volume      "TCBCTVOL" | u32 version | 3*u64 dims (x,y,z)
//!             | 3*f64 bbox_min | 3*f64 bbox_max | 3*f64 voxel
//!             | dims_x*dims_y*dims_z * f32, index (z,y,x), x fastest
//! projections "TCBCTPRJ" | u32 version | 3*u64 dims (angles,rows,cols)
//!             | f64 sdd,sid,pixel_u,pixel_v,offset_u,offset_v,
//!               angle_start,angle_end
//!             | angles*rows*cols * f32, index (angle,row,col), col fastest
//! checkpoint  "TCBCTINR" | u32 version
//!             | u32 levels | u64 table_size | u32 features | u32 base_res
//!             | f64 growth | 3*f64 bbox_min | 3*f64 bbox_max
//!             | u32 hidden_layers | u32 width | u32 activation(0=relu)
//!             | u32 output_map(0=softplus) | u64 n_params
//!             | n_params * f32 (per-level tables, then layer weights/biases)
//! ```
//!
//! The same layout is documented for external consumers in
//! `docs/formats.md`.

pub mod config;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::geometry::{GeometryError, ScanGeometry, VolumeGrid};
use crate::inr::{Activation, HashGridConfig, InrModel, MlpConfig, OutputMap};
use crate::projector::{ProjectionStack, Volume};

pub const VOLUME_MAGIC: &[u8; 8] = b"TCBCTVOL";
pub const PROJECTION_MAGIC: &[u8; 8] = b"TCBCTPRJ";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TCBCTINR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },
    #[error("{extra} unexpected trailing bytes after payload")]
    TrailingData { extra: u64 },
    #[error("invalid header: {0}")]
    Header(String),
    #[error("slice index {index} out of range (axis has {len} slices)")]
    SliceIndexOutOfRange { index: usize, len: usize },
    #[error("window width must be positive, got {0}")]
    InvalidWindow(f64),
    #[error(transparent)]
    Grid(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

struct Reader<R: Read> {
    inner: R,
    read: u64,
}

impl<R: Read> Reader<R> {
    fn new(inner: R) -> Self {
        Self { inner, read: 0 }
    }

    fn bytes(&mut self, buf: &mut [u8]) -> Result<(), FormatError> {
        let mut filled = 0;
        while filled < buf.len() {
            let n = self.inner.read(&mut buf[filled..])?;
            if n == 0 {
                return Err(FormatError::TruncatedPayload {
                    expected: self.read + buf.len() as u64,
                    found: self.read + filled as u64,
                });
            }
            filled += n;
        }
        self.read += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        let mut b = [0u8; 4];
        self.bytes(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        let mut b = [0u8; 8];
        self.bytes(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f64(&mut self) -> Result<f64, FormatError> {
        let mut b = [0u8; 8];
        self.bytes(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    fn f64_triple(&mut self) -> Result<[f64; 3], FormatError> {
        Ok([self.f64()?, self.f64()?, self.f64()?])
    }

    fn magic(&mut self, expected: &[u8; 8]) -> Result<(), FormatError> {
        let mut found = [0u8; 8];
        self.bytes(&mut found)?;
        if &found != expected {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(&found).into_owned(),
            });
        }
        Ok(())
    }

    fn version(&mut self) -> Result<(), FormatError> {
        let found = self.u32()?;
        if found != FORMAT_VERSION {
            return Err(FormatError::VersionMismatch {
                found,
                expected: FORMAT_VERSION,
            });
        }
        Ok(())
    }

    /// Reads `count` little-endian f32 values widened to f64.
    fn f32_payload(&mut self, count: usize) -> Result<Vec<f64>, FormatError> {
        let mut values = Vec::with_capacity(count);
        let mut chunk = vec![0u8; 4 * 16384];
        let mut remaining = count;
        while remaining > 0 {
            let take = remaining.min(16384);
            let buf = &mut chunk[..4 * take];
            self.bytes(buf)?;
            for quad in buf.chunks_exact(4) {
                values.push(f32::from_le_bytes(quad.try_into().unwrap()) as f64);
            }
            remaining -= take;
        }
        Ok(values)
    }

    fn expect_eof(&mut self) -> Result<(), FormatError> {
        let mut probe = [0u8; 1];
        let mut extra = 0u64;
        loop {
            let n = self.inner.read(&mut probe)?;
            if n == 0 {
                break;
            }
            extra += n as u64;
            if extra > 1024 {
                break;
            }
        }
        if extra > 0 {
            return Err(FormatError::TrailingData { extra });
        }
        Ok(())
    }
}

fn write_f32_payload<W: Write>(w: &mut W, values: &[f64]) -> Result<(), FormatError> {
    let mut buf = Vec::with_capacity(4 * 16384.min(values.len()));
    for chunk in values.chunks(16384) {
        buf.clear();
        for &v in chunk {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn write_volume(path: &Path, vol: &Volume) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(VOLUME_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let dims = vol.grid.dims();
    for d in dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for triple in [vol.grid.bbox_min, vol.grid.bbox_max, vol.grid.voxel] {
        for v in triple {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    write_f32_payload(&mut w, &vol.values)?;
    w.flush()?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume, FormatError> {
    let mut r = Reader::new(BufReader::new(File::open(path)?));
    r.magic(VOLUME_MAGIC)?;
    r.version()?;
    let dims = [r.u64()? as usize, r.u64()? as usize, r.u64()? as usize];
    let bbox_min = r.f64_triple()?;
    let bbox_max = r.f64_triple()?;
    let voxel = r.f64_triple()?;
    let grid = VolumeGrid::new(bbox_min, bbox_max, voxel)?;
    if grid.dims() != dims {
        return Err(FormatError::Header(format!(
            "dims field {dims:?} disagrees with grid-derived dims {:?}",
            grid.dims()
        )));
    }
    let values = r.f32_payload(grid.num_voxels())?;
    r.expect_eof()?;
    Ok(Volume { grid, values })
}

pub fn write_projections(path: &Path, p: &ProjectionStack) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(PROJECTION_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let g = &p.geom;
    for d in [g.n_angles, g.det_rows, g.det_cols] {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in [
        g.sdd,
        g.sid,
        g.pixel_u,
        g.pixel_v,
        g.offset_u,
        g.offset_v,
        g.angle_start,
        g.angle_end,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    write_f32_payload(&mut w, &p.data)?;
    w.flush()?;
    Ok(())
}

pub fn read_projections(path: &Path) -> Result<ProjectionStack, FormatError> {
    let mut r = Reader::new(BufReader::new(File::open(path)?));
    r.magic(PROJECTION_MAGIC)?;
    r.version()?;
    let n_angles = r.u64()? as usize;
    let det_rows = r.u64()? as usize;
    let det_cols = r.u64()? as usize;
    let sdd = r.f64()?;
    let sid = r.f64()?;
    let pixel_u = r.f64()?;
    let pixel_v = r.f64()?;
    let offset_u = r.f64()?;
    let offset_v = r.f64()?;
    let angle_start = r.f64()?;
    let angle_end = r.f64()?;
    let geom = ScanGeometry {
        sdd,
        sid,
        det_cols,
        det_rows,
        pixel_u,
        pixel_v,
        offset_u,
        offset_v,
        n_angles,
        angle_start,
        angle_end,
    }
    .validated()
    .map_err(|e| FormatError::Header(e.to_string()))?;
    let data = r.f32_payload(geom.total_rays())?;
    r.expect_eof()?;
    Ok(ProjectionStack { geom, data })
}

pub fn write_checkpoint(path: &Path, model: &InrModel) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let e = &model.enc;
    w.write_all(&(e.levels as u32).to_le_bytes())?;
    w.write_all(&(e.table_size as u64).to_le_bytes())?;
    w.write_all(&(e.features_per_level as u32).to_le_bytes())?;
    w.write_all(&(e.base_resolution as u32).to_le_bytes())?;
    w.write_all(&e.growth.to_le_bytes())?;
    for triple in [e.bbox_min, e.bbox_max] {
        for v in triple {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    let m = &model.mlp;
    w.write_all(&(m.hidden_layers as u32).to_le_bytes())?;
    w.write_all(&(m.width as u32).to_le_bytes())?;
    w.write_all(&0u32.to_le_bytes())?; // relu
    w.write_all(&0u32.to_le_bytes())?; // softplus
    w.write_all(&(model.num_params() as u64).to_le_bytes())?;
    write_f32_payload(&mut w, model.params())?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<InrModel, FormatError> {
    let mut r = Reader::new(BufReader::new(File::open(path)?));
    r.magic(CHECKPOINT_MAGIC)?;
    r.version()?;
    let levels = r.u32()? as usize;
    let table_size = r.u64()? as usize;
    let features_per_level = r.u32()? as usize;
    let base_resolution = r.u32()? as usize;
    let growth = r.f64()?;
    let bbox_min = r.f64_triple()?;
    let bbox_max = r.f64_triple()?;
    let enc = HashGridConfig {
        levels,
        table_size,
        features_per_level,
        base_resolution,
        growth,
        bbox_min,
        bbox_max,
    };
    let hidden_layers = r.u32()? as usize;
    let width = r.u32()? as usize;
    let activation = match r.u32()? {
        0 => Activation::Relu,
        other => return Err(FormatError::Header(format!("unknown activation tag {other}"))),
    };
    let output_map = match r.u32()? {
        0 => OutputMap::Softplus,
        other => return Err(FormatError::Header(format!("unknown output map tag {other}"))),
    };
    let mlp = MlpConfig {
        hidden_layers,
        width,
        activation,
        output_map,
    };
    let n_params = r.u64()? as usize;
    let params = r.f32_payload(n_params)?;
    r.expect_eof()?;
    InrModel::from_parts(enc, mlp, params).map_err(|e| FormatError::Header(e.to_string()))
}

/// Slice orientation for image export: axial = xy plane, sagittal = yz,
/// coronal = xz. Image columns follow the first named axis, rows the
/// second, row 0 at the lowest index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Axial,
    Sagittal,
    Coronal,
}

impl std::str::FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "axial" => Ok(Axis::Axial),
            "sagittal" => Ok(Axis::Sagittal),
            "coronal" => Ok(Axis::Coronal),
            other => Err(format!("unknown axis '{other}' (axial|sagittal|coronal)")),
        }
    }
}

/// Windowed 16-bit PGM export:
/// `pixel = round(clamp((v - (level - width/2)) / width, 0, 1) * 65535)`,
/// rounding half up.
pub fn export_slice(
    vol: &Volume,
    axis: Axis,
    index: usize,
    window_level: f64,
    window_width: f64,
    path: &Path,
) -> Result<(), FormatError> {
    if !(window_width > 0.0) {
        return Err(FormatError::InvalidWindow(window_width));
    }
    let [nx, ny, nz] = vol.grid.dims();
    let (w, h, len) = match axis {
        Axis::Axial => (nx, ny, nz),
        Axis::Sagittal => (ny, nz, nx),
        Axis::Coronal => (nx, nz, ny),
    };
    if index >= len {
        return Err(FormatError::SliceIndexOutOfRange { index, len });
    }
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n65535\n")?;
    let mut row_buf = Vec::with_capacity(2 * w);
    for r in 0..h {
        row_buf.clear();
        for c in 0..w {
            let v = match axis {
                Axis::Axial => vol.at(c, r, index),
                Axis::Sagittal => vol.at(index, c, r),
                Axis::Coronal => vol.at(c, index, r),
            };
            // (v - (level - width/2)) / width, written so that v == level
            // lands exactly on 0.5.
            let t = ((v - window_level) / window_width + 0.5).clamp(0.0, 1.0);
            let pixel = (t * 65535.0 + 0.5).floor() as u16;
            // PGM 16-bit samples are big-endian.
            row_buf.extend_from_slice(&pixel.to_be_bytes());
        }
        out.write_all(&row_buf)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn random_volume(seed: u64) -> Volume {
        let grid = VolumeGrid::new([-4.0; 3], [4.0; 3], [2.0; 3]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut vol = Volume::zeros(grid);
        for v in vol.values.iter_mut() {
            // f32-representable so the f32 payload round-trips bitwise.
            *v = rng.random::<f32>() as f64;
        }
        vol
    }

    #[test]
    fn volume_round_trip_bitwise() {
        let dir = tmp();
        let path = dir.path().join("v.vol");
        let vol = random_volume(1);
        write_volume(&path, &vol).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(vol.grid, back.grid);
        assert_eq!(vol.values, back.values);
        // Write-read-write produces identical bytes.
        let path2 = dir.path().join("v2.vol");
        write_volume(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn projection_round_trip_and_magic_confusion() {
        let dir = tmp();
        let geom = ScanGeometry {
            sdd: 600.0,
            sid: 400.0,
            det_cols: 5,
            det_rows: 4,
            pixel_u: 1.0,
            pixel_v: 1.0,
            offset_u: 0.5,
            offset_v: -0.25,
            n_angles: 3,
            angle_start: 0.0,
            angle_end: std::f64::consts::TAU,
        }
        .validated()
        .unwrap();
        let mut p = ProjectionStack::zeros(geom);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for v in p.data.iter_mut() {
            *v = rng.random::<f32>() as f64;
        }
        let path = dir.path().join("p.prj");
        write_projections(&path, &p).unwrap();
        let back = read_projections(&path).unwrap();
        assert_eq!(p.geom, back.geom);
        assert_eq!(p.data, back.data);
        // Reading a projection file as a volume must fail on the magic.
        assert!(matches!(
            read_volume(&path),
            Err(FormatError::BadMagic { .. })
        ));
    }

    #[test]
    fn truncated_and_versioned_files_rejected() {
        let dir = tmp();
        let path = dir.path().join("v.vol");
        let vol = random_volume(3);
        write_volume(&path, &vol).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // Drop the last 5 bytes.
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            read_volume(&path),
            Err(FormatError::TruncatedPayload { .. })
        ));
        // Append garbage.
        let mut extended = bytes.clone();
        extended.extend_from_slice(&[0u8; 3]);
        std::fs::write(&path, &extended).unwrap();
        assert!(matches!(
            read_volume(&path),
            Err(FormatError::TrailingData { .. })
        ));
        // Bump the version field (bytes 8..12).
        let mut versioned = bytes;
        versioned[8] = 9;
        std::fs::write(&path, &versioned).unwrap();
        assert!(matches!(
            read_volume(&path),
            Err(FormatError::VersionMismatch { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tmp();
        let model = InrModel::init(
            HashGridConfig {
                levels: 2,
                table_size: 1 << 8,
                features_per_level: 2,
                base_resolution: 3,
                growth: 1.5,
                bbox_min: [-10.0; 3],
                bbox_max: [10.0; 3],
            },
            MlpConfig {
                hidden_layers: 1,
                width: 8,
                ..MlpConfig::default()
            },
            7,
        )
        .unwrap();
        let path = dir.path().join("m.inr");
        write_checkpoint(&path, &model).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(model.enc, back.enc);
        assert_eq!(model.mlp, back.mlp);
        // Parameters survive the f32 narrowing on the second trip exactly.
        let path2 = dir.path().join("m2.inr");
        write_checkpoint(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn pgm_window_mapping() {
        let dir = tmp();
        let grid = VolumeGrid::new([0.0; 3], [4.0, 4.0, 2.0], [1.0; 3]).unwrap();
        let mut vol = Volume::zeros(grid);
        let level = 0.5;
        let width = 0.2;
        for v in vol.values.iter_mut() {
            *v = level;
        }
        // Pin three pixels: at level, below, at the top edge.
        vol.values[1] = level - width; // clamps to 0
        vol.values[2] = level + width / 2.0; // clamps to 65535
        let path = dir.path().join("s.pgm");
        export_slice(&vol, Axis::Axial, 0, level, width, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P5\n4 4\n65535\n";
        assert_eq!(&bytes[..header.len()], header);
        let px = |i: usize| {
            u16::from_be_bytes([bytes[header.len() + 2 * i], bytes[header.len() + 2 * i + 1]])
        };
        assert_eq!(px(0), 32768); // midpoint rounds half up
        assert_eq!(px(1), 0);
        assert_eq!(px(2), 65535);
        // Bitwise reproducible.
        let path2 = dir.path().join("s2.pgm");
        export_slice(&vol, Axis::Axial, 0, level, width, &path2).unwrap();
        assert_eq!(bytes, std::fs::read(&path2).unwrap());
        // Out-of-range slice and bad window.
        assert!(matches!(
            export_slice(&vol, Axis::Axial, 2, level, width, &path),
            Err(FormatError::SliceIndexOutOfRange { .. })
        ));
        assert!(matches!(
            export_slice(&vol, Axis::Axial, 0, level, 0.0, &path),
            Err(FormatError::InvalidWindow(_))
        ));
    }
}
