//! Coarse-grid neural attenuation field: multiresolution hash-grid encoding
//! feeding a small MLP, trained on the measured ray integrals.
//!
//! The encoding follows the usual multiresolution hash-grid scheme: per
//! level the position is snapped to a virtual grid of resolution
//! `floor(base * growth^level)`, the eight cell corners look up trainable
//! feature vectors (directly while the corner lattice fits the table,
//! hashed above that), and the features are trilinearly blended and
//! concatenated across levels. The MLP maps the concatenated features to a
//! softplus-constrained nonnegative attenuation.
//!
//! Everything trainable lives in one flat `f64` parameter vector (per-level
//! tables first, then layer weights and biases in order), which keeps the
//! optimizer, the checkpoint format and finite-difference testing simple.

mod train;

pub use train::{gradient, loss_batch, train, LossKind, TrainConfig, TrainError, TrainedInr};

use rand::Rng;
use rand::SeedableRng;

use crate::geometry::{intersect_aabb, Ray, VolumeGrid};
use crate::projector::Volume;
use crate::threading;

/// Spatial-hash primes, one per axis.
const HASH_PRIMES: [u64; 3] = [1, 2654435761, 805459861];

/// Sharpness of the softplus output map; with the output bias initialized
/// at [`OUTPUT_BIAS_INIT`] a fresh model predicts densities below 1e-6.
pub const SOFTPLUS_SHARPNESS: f64 = 5.0;
pub const OUTPUT_BIAS_INIT: f64 = -3.0;
const FEATURE_INIT_RANGE: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum InrError {
    #[error("invalid hash-grid config: {0}")]
    InvalidEncoding(String),
    #[error("invalid MLP config: {0}")]
    InvalidMlp(String),
    #[error("parameter count mismatch: expected {expected}, got {got}")]
    ParamCount { expected: usize, got: usize },
}

/// Multiresolution hash-grid encoding configuration over a fixed bounding
/// box (positions are normalized per axis to the unit cube).
#[derive(Debug, Clone, PartialEq)]
pub struct HashGridConfig {
    pub levels: usize,
    /// Feature-table entries per level; must be a power of two.
    pub table_size: usize,
    pub features_per_level: usize,
    pub base_resolution: usize,
    /// Per-level resolution growth factor (> 1).
    pub growth: f64,
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
}

impl HashGridConfig {
    /// Defaults sized for a desk-scale extended domain.
    pub fn with_bbox(bbox_min: [f64; 3], bbox_max: [f64; 3]) -> Self {
        Self {
            levels: 8,
            table_size: 1 << 14,
            features_per_level: 2,
            base_resolution: 16,
            growth: 1.45,
            bbox_min,
            bbox_max,
        }
    }

    pub fn validated(self) -> Result<Self, InrError> {
        if self.levels == 0 {
            return Err(InrError::InvalidEncoding("need at least one level".into()));
        }
        if !self.table_size.is_power_of_two() {
            return Err(InrError::InvalidEncoding(format!(
                "table_size must be a power of two, got {}",
                self.table_size
            )));
        }
        if self.features_per_level == 0 {
            return Err(InrError::InvalidEncoding("need at least one feature".into()));
        }
        if !(self.growth > 1.0) {
            return Err(InrError::InvalidEncoding(format!(
                "growth must exceed 1, got {}",
                self.growth
            )));
        }
        if self.base_resolution == 0 {
            return Err(InrError::InvalidEncoding("base resolution must be >= 1".into()));
        }
        for a in 0..3 {
            if !(self.bbox_min[a] < self.bbox_max[a]) {
                return Err(InrError::InvalidEncoding(format!(
                    "bbox must be nonempty on axis {a}"
                )));
            }
        }
        Ok(self)
    }

    pub fn level_resolution(&self, level: usize) -> usize {
        (self.base_resolution as f64 * self.growth.powi(level as i32)).floor() as usize
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features_per_level
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputMap {
    Softplus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpConfig {
    pub hidden_layers: usize,
    pub width: usize,
    pub activation: Activation,
    pub output_map: OutputMap,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 2,
            width: 64,
            activation: Activation::Relu,
            output_map: OutputMap::Softplus,
        }
    }
}

impl MlpConfig {
    pub fn validated(self) -> Result<Self, InrError> {
        if self.hidden_layers == 0 {
            return Err(InrError::InvalidMlp("need at least one hidden layer".into()));
        }
        if self.width < 4 {
            return Err(InrError::InvalidMlp(format!(
                "width must be >= 4, got {}",
                self.width
            )));
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy)]
struct LevelInfo {
    resolution: usize,
    /// Direct (dense) corner indexing while the corner lattice fits the
    /// table; spatial hashing above that.
    dense: bool,
    offset: usize,
}

#[derive(Debug, Clone, Copy)]
struct LayerInfo {
    in_dim: usize,
    out_dim: usize,
    w_off: usize,
    b_off: usize,
}

/// Trainable neural attenuation field (feature tables + MLP weights).
#[derive(Debug, Clone)]
pub struct InrModel {
    pub enc: HashGridConfig,
    pub mlp: MlpConfig,
    params: Vec<f64>,
    levels: Vec<LevelInfo>,
    layers: Vec<LayerInfo>,
}

fn layout(enc: &HashGridConfig, mlp: &MlpConfig) -> (Vec<LevelInfo>, Vec<LayerInfo>, usize) {
    let mut levels = Vec::with_capacity(enc.levels);
    let mut offset = 0;
    for l in 0..enc.levels {
        let resolution = enc.level_resolution(l);
        let corners = resolution + 1;
        let dense = corners * corners * corners <= enc.table_size;
        levels.push(LevelInfo {
            resolution,
            dense,
            offset,
        });
        offset += enc.table_size * enc.features_per_level;
    }
    let mut layers = Vec::with_capacity(mlp.hidden_layers + 1);
    let mut in_dim = enc.output_dim();
    for _ in 0..mlp.hidden_layers {
        layers.push(LayerInfo {
            in_dim,
            out_dim: mlp.width,
            w_off: offset,
            b_off: offset + in_dim * mlp.width,
        });
        offset += in_dim * mlp.width + mlp.width;
        in_dim = mlp.width;
    }
    layers.push(LayerInfo {
        in_dim,
        out_dim: 1,
        w_off: offset,
        b_off: offset + in_dim,
    });
    offset += in_dim + 1;
    (levels, layers, offset)
}

/// Numerically guarded `softplus(sharpness * z) / sharpness`.
pub(crate) fn softplus(z: f64) -> f64 {
    let s = SOFTPLUS_SHARPNESS * z;
    if s > 30.0 {
        z
    } else if s < -30.0 {
        s.exp() / SOFTPLUS_SHARPNESS
    } else {
        s.exp().ln_1p() / SOFTPLUS_SHARPNESS
    }
}

/// Derivative of [`softplus`] with respect to its input.
pub(crate) fn softplus_grad(z: f64) -> f64 {
    let s = SOFTPLUS_SHARPNESS * z;
    if s > 30.0 {
        1.0
    } else if s < -30.0 {
        s.exp()
    } else {
        1.0 / (1.0 + (-s).exp())
    }
}

impl InrModel {
    /// Seeded initialization: feature tables uniform in `[-1e-4, 1e-4]`,
    /// weights fan-in-scaled uniform, biases zero except the output bias.
    pub fn init(enc: HashGridConfig, mlp: MlpConfig, seed: u64) -> Result<Self, InrError> {
        let enc = enc.validated()?;
        let mlp = mlp.validated()?;
        let (levels, layers, count) = layout(&enc, &mlp);
        let mut params = vec![0.0; count];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let table_len = enc.levels * enc.table_size * enc.features_per_level;
        for p in params[..table_len].iter_mut() {
            *p = rng.random_range(-FEATURE_INIT_RANGE..=FEATURE_INIT_RANGE);
        }
        for layer in &layers {
            let bound = 1.0 / (layer.in_dim as f64).sqrt();
            for i in 0..layer.in_dim * layer.out_dim {
                params[layer.w_off + i] = rng.random_range(-bound..=bound);
            }
            // Biases stay zero.
        }
        let out = layers.last().expect("at least the output layer");
        params[out.b_off] = OUTPUT_BIAS_INIT;
        Ok(Self {
            enc,
            mlp,
            params,
            levels,
            layers,
        })
    }

    /// Rebuilds a model from a flat parameter vector (checkpoint loading).
    pub fn from_parts(
        enc: HashGridConfig,
        mlp: MlpConfig,
        params: Vec<f64>,
    ) -> Result<Self, InrError> {
        let enc = enc.validated()?;
        let mlp = mlp.validated()?;
        let (levels, layers, count) = layout(&enc, &mlp);
        if params.len() != count {
            return Err(InrError::ParamCount {
                expected: count,
                got: params.len(),
            });
        }
        Ok(Self {
            enc,
            mlp,
            params,
            levels,
            layers,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn feature_dim(&self) -> usize {
        self.enc.output_dim()
    }

    /// Spatial hash of an integer corner, reduced into the table.
    pub fn hash_index(&self, corner: [usize; 3]) -> usize {
        let h = (corner[0] as u64).wrapping_mul(HASH_PRIMES[0])
            ^ (corner[1] as u64).wrapping_mul(HASH_PRIMES[1])
            ^ (corner[2] as u64).wrapping_mul(HASH_PRIMES[2]);
        (h & (self.enc.table_size as u64 - 1)) as usize
    }

    fn corner_table_index(&self, level: &LevelInfo, corner: [usize; 3]) -> usize {
        if level.dense {
            let n = level.resolution + 1;
            corner[0] + n * (corner[1] + n * corner[2])
        } else {
            self.hash_index(corner)
        }
    }

    /// Normalized position in the unit cube, clamped to the bbox.
    fn normalized(&self, x: [f64; 3]) -> [f64; 3] {
        let mut n = [0.0; 3];
        for a in 0..3 {
            let t = (x[a] - self.enc.bbox_min[a]) / (self.enc.bbox_max[a] - self.enc.bbox_min[a]);
            n[a] = t.clamp(0.0, 1.0);
        }
        n
    }

    /// Visits the eight corners of the enclosing cell at one level with
    /// their trilinear weights. Shared by encoding and gradient scatter.
    #[inline]
    fn for_each_corner(
        &self,
        level: &LevelInfo,
        normalized: [f64; 3],
        mut visit: impl FnMut(usize, f64),
    ) {
        let res = level.resolution as f64;
        let mut cell = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let p = normalized[a] * res;
            let c = (p.floor() as usize).min(level.resolution - 1);
            cell[a] = c;
            frac[a] = p - c as f64;
        }
        for dz in 0..2 {
            let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
            for dy in 0..2 {
                let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
                for dx in 0..2 {
                    let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                    let corner = [cell[0] + dx, cell[1] + dy, cell[2] + dz];
                    let idx = self.corner_table_index(level, corner);
                    visit(idx, wx * wy * wz);
                }
            }
        }
    }

    /// Hash-grid encoding of a position into `out` (length `levels * F`).
    /// Positions outside the bbox are clamped to its boundary.
    pub fn encode_into(&self, x: [f64; 3], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.feature_dim());
        assert!(
            x.iter().all(|v| v.is_finite()),
            "encode given a non-finite position"
        );
        let n = self.normalized(x);
        let f = self.enc.features_per_level;
        out.fill(0.0);
        for (l, level) in self.levels.iter().enumerate() {
            let base = l * f;
            self.for_each_corner(level, n, |idx, w| {
                let table = level.offset + idx * f;
                for j in 0..f {
                    out[base + j] += w * self.params[table + j];
                }
            });
        }
    }

    pub fn encode(&self, x: [f64; 3]) -> Vec<f64> {
        let mut out = vec![0.0; self.feature_dim()];
        self.encode_into(x, &mut out);
        out
    }

    /// Scatters feature-gradient contributions back into table gradients;
    /// the exact adjoint of [`encode_into`].
    pub(crate) fn encode_backward(&self, x: [f64; 3], dfeat: &[f64], grad: &mut [f64]) {
        let n = self.normalized(x);
        let f = self.enc.features_per_level;
        for (l, level) in self.levels.iter().enumerate() {
            let base = l * f;
            self.for_each_corner(level, n, |idx, w| {
                let table = level.offset + idx * f;
                for j in 0..f {
                    grad[table + j] += w * dfeat[base + j];
                }
            });
        }
    }

    pub(crate) fn scratch(&self) -> EvalScratch {
        EvalScratch {
            feats: vec![0.0; self.feature_dim()],
            cur: vec![0.0; self.mlp.width.max(self.feature_dim())],
            nxt: vec![0.0; self.mlp.width],
        }
    }

    /// MLP forward pass over pre-encoded features, returning the output
    /// pre-activation. When `tape_hidden` is given (length
    /// `hidden_layers * width`) the post-relu activations are recorded for a
    /// later backward pass.
    pub(crate) fn mlp_forward(
        &self,
        feats: &[f64],
        scratch: &mut EvalScratch,
        mut tape_hidden: Option<&mut [f64]>,
    ) -> f64 {
        let width = self.mlp.width;
        let hl = self.mlp.hidden_layers;
        scratch.cur[..feats.len()].copy_from_slice(feats);
        let mut cur_len = feats.len();
        for (li, layer) in self.layers[..hl].iter().enumerate() {
            debug_assert_eq!(layer.in_dim, cur_len);
            for o in 0..layer.out_dim {
                let row = layer.w_off + o * layer.in_dim;
                let mut z = self.params[layer.b_off + o];
                for i in 0..layer.in_dim {
                    z += self.params[row + i] * scratch.cur[i];
                }
                scratch.nxt[o] = if z > 0.0 { z } else { 0.0 };
            }
            if let Some(t) = tape_hidden.as_deref_mut() {
                t[li * width..(li + 1) * width].copy_from_slice(&scratch.nxt[..width]);
            }
            std::mem::swap(&mut scratch.cur, &mut scratch.nxt);
            cur_len = layer.out_dim;
        }
        let out = self.layers[hl];
        debug_assert_eq!(out.in_dim, cur_len);
        let mut z = self.params[out.b_off];
        for i in 0..out.in_dim {
            z += self.params[out.w_off + i] * scratch.cur[i];
        }
        z
    }

    /// Density prediction with caller-provided scratch (allocation-free).
    pub(crate) fn predict_with(&self, x: [f64; 3], scratch: &mut EvalScratch) -> f64 {
        let mut feats = std::mem::take(&mut scratch.feats);
        self.encode_into(x, &mut feats);
        let z = self.mlp_forward(&feats, scratch, None);
        scratch.feats = feats;
        softplus(z)
    }

    /// Nonnegative attenuation prediction at a point.
    pub fn predict_density(&self, x: [f64; 3]) -> f64 {
        self.predict_with(x, &mut self.scratch())
    }

    /// Ray integral of the predicted density: midpoint samples every `d` mm
    /// across the bbox chord, final partial interval weighted by its length.
    pub fn predict_line_integral(&self, ray: &Ray, d: f64) -> f64 {
        assert!(d > 0.0, "sample step must be positive");
        let Some((t0, t1)) =
            intersect_aabb(self.enc.bbox_min, self.enc.bbox_max, ray.origin, ray.direction)
        else {
            return 0.0;
        };
        let len = t1 - t0;
        if len <= 0.0 {
            return 0.0;
        }
        let n_full = (len / d).floor() as usize;
        let rem = len - n_full as f64 * d;
        let mut scratch = self.scratch();
        let mut acc = 0.0;
        for k in 0..n_full {
            let t = t0 + (k as f64 + 0.5) * d;
            acc += self.predict_with(ray.at(t), &mut scratch) * d;
        }
        if rem > 0.0 {
            let t = t0 + n_full as f64 * d + 0.5 * rem;
            acc += self.predict_with(ray.at(t), &mut scratch) * rem;
        }
        acc
    }

    /// Densities at every voxel center of `grid` (the prior image).
    pub fn render_volume(&self, grid: &VolumeGrid) -> Volume {
        let [nx, ny, nz] = grid.dims();
        let mut vol = Volume::zeros(grid.clone());
        let slab = nx * ny;
        let render_slice = |k: usize, slice: &mut [f64]| {
            let mut scratch = self.scratch();
            for j in 0..ny {
                for i in 0..nx {
                    slice[j * nx + i] =
                        self.predict_with(grid.voxel_center(i, j, k), &mut scratch);
                }
            }
        };
        if threading::sequential() {
            for (k, slice) in vol.values.chunks_mut(slab).enumerate() {
                render_slice(k, slice);
            }
        } else {
            #[cfg(feature = "parallel")]
            threading::install(|| {
                use rayon::prelude::*;
                vol.values
                    .par_chunks_mut(slab)
                    .enumerate()
                    .for_each(|(k, slice)| render_slice(k, slice));
            });
        }
        let _ = nz;
        vol
    }
}

/// Reusable forward-pass buffers (feature vector plus two layer buffers).
pub(crate) struct EvalScratch {
    pub(crate) feats: Vec<f64>,
    cur: Vec<f64>,
    nxt: Vec<f64>,
}

impl InrModel {
    /// Flat index of the output-layer bias (handy for tests that pin the
    /// operating point of the softplus output).
    pub fn output_bias_index(&self) -> usize {
        self.layers.last().expect("output layer").b_off
    }
}
