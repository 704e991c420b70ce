//! Line-oriented `key = value` config files with `[section]` headers.
//!
//! Values print with Rust's shortest round-trip float formatting, so parsing
//! a config, building the typed value and re-serializing it is lossless.

use std::path::Path;

use thiserror::Error;

use crate::geometry::{GeometryError, ScanGeometry, VolumeGrid};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("missing section [{0}]")]
    MissingSection(String),
    #[error("missing key '{key}' in section [{section}]")]
    MissingKey { section: String, key: String },
    #[error("bad value for '{key}' in [{section}]: {msg}")]
    BadValue {
        section: String,
        key: String,
        msg: String,
    },
    #[error(transparent)]
    Invalid(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parsed config document; sections and keys keep file order.
#[derive(Debug, Clone, Default)]
pub struct ConfigDoc {
    sections: Vec<(String, Vec<(String, String)>)>,
}

impl ConfigDoc {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut doc = ConfigDoc::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or(ConfigError::Syntax {
                    line: line_no,
                    msg: "unterminated section header".into(),
                })?;
                doc.sections.push((name.trim().to_string(), Vec::new()));
            } else {
                let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax {
                    line: line_no,
                    msg: format!("expected 'key = value', got '{line}'"),
                })?;
                let section = doc.sections.last_mut().ok_or(ConfigError::Syntax {
                    line: line_no,
                    msg: "key before any [section] header".into(),
                })?;
                section
                    .1
                    .push((key.trim().to_string(), value.trim().to_string()));
            }
        }
        Ok(doc)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn has_section(&self, name: &str) -> bool {
        self.sections.iter().any(|(n, _)| n == name)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .iter()
            .find(|(n, _)| n == section)?
            .1
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, section: &str, key: &str) -> Result<&str, ConfigError> {
        if !self.has_section(section) {
            return Err(ConfigError::MissingSection(section.to_string()));
        }
        self.get(section, key).ok_or(ConfigError::MissingKey {
            section: section.to_string(),
            key: key.to_string(),
        })
    }

    pub fn f64(&self, section: &str, key: &str) -> Result<f64, ConfigError> {
        self.require(section, key)?
            .parse()
            .map_err(|e| ConfigError::BadValue {
                section: section.to_string(),
                key: key.to_string(),
                msg: format!("{e}"),
            })
    }

    pub fn usize(&self, section: &str, key: &str) -> Result<usize, ConfigError> {
        self.require(section, key)?
            .parse()
            .map_err(|e| ConfigError::BadValue {
                section: section.to_string(),
                key: key.to_string(),
                msg: format!("{e}"),
            })
    }

    pub fn f64_or(&self, section: &str, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.get(section, key) {
            None => Ok(default),
            Some(_) => self.f64(section, key),
        }
    }

    pub fn usize_or(&self, section: &str, key: &str, default: usize) -> Result<usize, ConfigError> {
        match self.get(section, key) {
            None => Ok(default),
            Some(_) => self.usize(section, key),
        }
    }

    pub fn bool_or(&self, section: &str, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.get(section, key) {
            None => Ok(default),
            Some(v) => match v {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                other => Err(ConfigError::BadValue {
                    section: section.to_string(),
                    key: key.to_string(),
                    msg: format!("expected a boolean, got '{other}'"),
                }),
            },
        }
    }

    /// Whitespace-separated triple of floats.
    pub fn triple(&self, section: &str, key: &str) -> Result<[f64; 3], ConfigError> {
        let raw = self.require(section, key)?;
        let parts: Vec<&str> = raw.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(ConfigError::BadValue {
                section: section.to_string(),
                key: key.to_string(),
                msg: format!("expected three numbers, got '{raw}'"),
            });
        }
        let mut out = [0.0; 3];
        for (slot, part) in out.iter_mut().zip(parts) {
            *slot = part.parse().map_err(|e| ConfigError::BadValue {
                section: section.to_string(),
                key: key.to_string(),
                msg: format!("{e}"),
            })?;
        }
        Ok(out)
    }
}

/// Builds a [`ScanGeometry`] from a `[geometry]` section.
pub fn geometry_from_doc(doc: &ConfigDoc) -> Result<ScanGeometry, ConfigError> {
    let s = "geometry";
    Ok(ScanGeometry {
        sdd: doc.f64(s, "sdd")?,
        sid: doc.f64(s, "sid")?,
        det_cols: doc.usize(s, "det_cols")?,
        det_rows: doc.usize(s, "det_rows")?,
        pixel_u: doc.f64(s, "pixel_u")?,
        pixel_v: doc.f64(s, "pixel_v")?,
        offset_u: doc.f64(s, "offset_u")?,
        offset_v: doc.f64(s, "offset_v")?,
        n_angles: doc.usize(s, "n_angles")?,
        angle_start: doc.f64_or(s, "angle_start", 0.0)?,
        angle_end: doc.f64_or(s, "angle_end", std::f64::consts::TAU)?,
    }
    .validated()?)
}

pub fn geometry_to_text(g: &ScanGeometry) -> String {
    format!(
        "[geometry]\nsdd = {}\nsid = {}\ndet_cols = {}\ndet_rows = {}\n\
         pixel_u = {}\npixel_v = {}\noffset_u = {}\noffset_v = {}\n\
         n_angles = {}\nangle_start = {}\nangle_end = {}\n",
        g.sdd,
        g.sid,
        g.det_cols,
        g.det_rows,
        g.pixel_u,
        g.pixel_v,
        g.offset_u,
        g.offset_v,
        g.n_angles,
        g.angle_start,
        g.angle_end
    )
}

/// Builds a [`VolumeGrid`] from a section with `bbox_min`, `bbox_max` and
/// `voxel` triples.
pub fn grid_from_doc(doc: &ConfigDoc, section: &str) -> Result<VolumeGrid, ConfigError> {
    Ok(VolumeGrid::new(
        doc.triple(section, "bbox_min")?,
        doc.triple(section, "bbox_max")?,
        doc.triple(section, "voxel")?,
    )?)
}

pub fn grid_to_text(g: &VolumeGrid, section: &str) -> String {
    format!(
        "[{section}]\nbbox_min = {} {} {}\nbbox_max = {} {} {}\nvoxel = {} {} {}\n",
        g.bbox_min[0],
        g.bbox_min[1],
        g.bbox_min[2],
        g.bbox_max[0],
        g.bbox_max[1],
        g.bbox_max[2],
        g.voxel[0],
        g.voxel[1],
        g.voxel[2]
    )
}
