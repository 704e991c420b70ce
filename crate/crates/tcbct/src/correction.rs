//! Two-stage truncation correction: coarse prior over the extended domain,
//! projection-discrepancy subtraction, fine-grid iterative reconstruction.
//!
//! The measured data `P` contains contributions from tissue outside the
//! fine reconstruction region. A coarse prior image over the extended
//! domain is masked so only that exterior part survives, its forward
//! projection (taken on the coarse extended grid) estimates the exterior
//! contribution, and `P_hat = P - A u_o` becomes the data for the fine-grid
//! solver. The prior can come from an FDK or coarse-SQS baseline, or from
//! the trained neural field; `prior = none` runs the plain fine-grid solver
//! and reproduces the uncorrected truncation artifacts.

use std::time::Instant;

use thiserror::Error;

use crate::fdk::{fdk_reconstruct, FilterKind, FilterSpec};
use crate::geometry::VolumeGrid;
use crate::inr::{self, HashGridConfig, InrModel, MlpConfig, TrainConfig};
use crate::io::config::{grid_from_doc, ConfigDoc, ConfigError};
use crate::projector::{forward_project, ProjectionStack, Volume};
use crate::sqs::{sqs_reconstruct, InitPolicy, Objective, SqsConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("stage '{stage}' diverged: {detail}")]
    Divergence { stage: &'static str, detail: String },
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorKind {
    None,
    Fdk,
    SqsCoarse,
    Inr,
}

impl std::str::FromStr for PriorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(PriorKind::None),
            "fdk" => Ok(PriorKind::Fdk),
            "sqs" | "sqs_coarse" => Ok(PriorKind::SqsCoarse),
            "inr" => Ok(PriorKind::Inr),
            other => Err(format!("unknown prior '{other}' (none|fdk|sqs|inr)")),
        }
    }
}

/// Full two-stage pipeline description (grids, prior choice, stage configs).
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub prior_kind: PriorKind,
    /// Extended coarse domain (the prior's world).
    pub coarse_grid: VolumeGrid,
    /// Truncated fine reconstruction region.
    pub fine_grid: VolumeGrid,
    pub inr_mlp: MlpConfig,
    pub inr_train: TrainConfig,
    /// Hash-grid shape; its bbox is always rebound to the coarse grid.
    pub inr_levels: usize,
    pub inr_table_size: usize,
    pub inr_features: usize,
    pub inr_base_resolution: usize,
    pub inr_growth: f64,
    pub model_seed: u64,
    pub sqs_coarse: SqsConfig,
    pub sqs_fine: SqsConfig,
    pub fdk_filter: FilterKind,
}

impl PipelineConfig {
    pub fn validated(self) -> Result<Self, PipelineError> {
        for a in 0..3 {
            if !(self.fine_grid.bbox_min[a] > self.coarse_grid.bbox_min[a]
                && self.fine_grid.bbox_max[a] < self.coarse_grid.bbox_max[a])
            {
                return Err(PipelineError::Config(format!(
                    "fine grid must lie strictly inside the coarse grid (axis {a})"
                )));
            }
            if self.coarse_grid.voxel[a] < self.fine_grid.voxel[a] {
                return Err(PipelineError::Config(format!(
                    "coarse voxel must be >= fine voxel (axis {a})"
                )));
            }
        }
        Ok(self)
    }

    pub fn hash_grid_config(&self) -> HashGridConfig {
        HashGridConfig {
            levels: self.inr_levels,
            table_size: self.inr_table_size,
            features_per_level: self.inr_features,
            base_resolution: self.inr_base_resolution,
            growth: self.inr_growth,
            bbox_min: self.coarse_grid.bbox_min,
            bbox_max: self.coarse_grid.bbox_max,
        }
    }

    /// Reads the `[pipeline] / [coarse_grid] / [fine_grid] / [inr] / [train]
    /// / [sqs_coarse] / [sqs_fine] / [fdk]` sections of a config document.
    pub fn from_doc(doc: &ConfigDoc) -> Result<Self, ConfigError> {
        let coarse_grid = grid_from_doc(doc, "coarse_grid")?;
        let fine_grid = grid_from_doc(doc, "fine_grid")?;
        let prior_kind = match doc.get("pipeline", "prior").unwrap_or("inr") {
            s => s.parse().map_err(|msg| ConfigError::BadValue {
                section: "pipeline".into(),
                key: "prior".into(),
                msg,
            })?,
        };
        let defaults_enc = HashGridConfig::with_bbox(coarse_grid.bbox_min, coarse_grid.bbox_max);
        let mlp_defaults = MlpConfig::default();
        let train_defaults = TrainConfig::default();
        let sqs_defaults = SqsConfig::default();
        let parse_sqs = |section: &str| -> Result<SqsConfig, ConfigError> {
            let init = match doc.get(section, "init").unwrap_or("zero") {
                "zero" => InitPolicy::Zero,
                "fdk" => InitPolicy::Fdk,
                other => {
                    return Err(ConfigError::BadValue {
                        section: section.into(),
                        key: "init".into(),
                        msg: format!("unknown init '{other}' (zero|fdk)"),
                    })
                }
            };
            Ok(SqsConfig {
                n_iters: doc.usize_or(section, "iters", sqs_defaults.n_iters)?,
                lambda: doc.f64_or(section, "lambda", sqs_defaults.lambda)?,
                huber_delta: doc.f64_or(section, "huber_delta", sqs_defaults.huber_delta)?,
                nonneg: doc.bool_or(section, "nonneg", sqs_defaults.nonneg)?,
                init,
            })
        };
        let fdk_filter = match doc.get("fdk", "filter").unwrap_or("ramp_hann") {
            s => s.parse().map_err(|msg| ConfigError::BadValue {
                section: "fdk".into(),
                key: "filter".into(),
                msg,
            })?,
        };
        Ok(Self {
            prior_kind,
            inr_levels: doc.usize_or("inr", "levels", defaults_enc.levels)?,
            inr_table_size: doc.usize_or("inr", "table_size", defaults_enc.table_size)?,
            inr_features: doc.usize_or("inr", "features_per_level", defaults_enc.features_per_level)?,
            inr_base_resolution: doc.usize_or(
                "inr",
                "base_resolution",
                defaults_enc.base_resolution,
            )?,
            inr_growth: doc.f64_or("inr", "growth", defaults_enc.growth)?,
            inr_mlp: MlpConfig {
                hidden_layers: doc.usize_or("inr", "hidden_layers", mlp_defaults.hidden_layers)?,
                width: doc.usize_or("inr", "width", mlp_defaults.width)?,
                ..mlp_defaults
            },
            inr_train: TrainConfig {
                rays_per_batch: doc.usize_or(
                    "train",
                    "rays_per_batch",
                    train_defaults.rays_per_batch,
                )?,
                steps: doc.usize_or("train", "steps", train_defaults.steps)?,
                learning_rate: doc.f64_or("train", "learning_rate", train_defaults.learning_rate)?,
                lr_decay: doc.f64_or("train", "lr_decay", train_defaults.lr_decay)?,
                sample_step: doc.f64_or("train", "sample_step", train_defaults.sample_step)?,
                seed: doc.usize_or("train", "seed", 0)? as u64,
                loss: train_defaults.loss,
            },
            model_seed: doc.usize_or("inr", "seed", 0)? as u64,
            sqs_coarse: parse_sqs("sqs_coarse")?,
            sqs_fine: parse_sqs("sqs_fine")?,
            fdk_filter,
            coarse_grid,
            fine_grid,
        })
    }
}

/// Zeroes every coarse voxel whose center lies inside `omega`'s bbox; the
/// exterior survives untouched. Idempotent by construction.
pub fn mask_prior(u_prior: &Volume, omega: &VolumeGrid) -> Volume {
    let mut out = u_prior.clone();
    let [nx, ny, nz] = out.grid.dims();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if omega.contains(out.grid.voxel_center(i, j, k)) {
                    let idx = (k * ny + j) * nx + i;
                    out.values[idx] = 0.0;
                }
            }
        }
    }
    out
}

/// Discrepancy correction `P_hat = P - A u_masked`, with the forward
/// projection taken over the masked prior's (coarse, extended) grid.
/// Negative residual values are expected and preserved.
pub fn correct_projections(
    p: &ProjectionStack,
    u_masked: &Volume,
) -> Result<ProjectionStack, PipelineError> {
    if p.data.len() != p.geom.total_rays() {
        return Err(PipelineError::GeometryMismatch(format!(
            "stack holds {} samples but its geometry defines {} rays",
            p.data.len(),
            p.geom.total_rays()
        )));
    }
    let exterior = forward_project(u_masked, &p.geom);
    let mut out = p.clone();
    for (o, e) in out.data.iter_mut().zip(exterior.data.iter()) {
        *o -= e;
    }
    Ok(out)
}

/// Wall-clock seconds per pipeline stage.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub prior_s: f64,
    pub mask_s: f64,
    pub correct_s: f64,
    pub fine_s: f64,
}

/// Everything the pipeline produced besides the reconstruction itself.
#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub prior_kind: PriorKind,
    pub timings: StageTimings,
    /// Masked prior `u_o` on the coarse grid (absent for `prior = none`).
    pub prior: Option<Volume>,
    pub inr_loss_trace: Option<Vec<f64>>,
    pub coarse_objective_trace: Option<Vec<Objective>>,
    pub fine_objective_trace: Vec<Objective>,
}

/// Runs the configured two-stage reconstruction on measured projections.
pub fn run_pipeline(
    p: &ProjectionStack,
    cfg: &PipelineConfig,
) -> Result<(Volume, PipelineReport), PipelineError> {
    let cfg = cfg.clone().validated()?;
    let mut timings = StageTimings::default();
    let mut inr_loss_trace = None;
    let mut coarse_objective_trace = None;

    let prior_raw = match cfg.prior_kind {
        PriorKind::None => None,
        PriorKind::Fdk => {
            let t = Instant::now();
            let spec = FilterSpec::for_geometry(&p.geom, cfg.fdk_filter);
            let vol = fdk_reconstruct(p, &cfg.coarse_grid, &spec);
            timings.prior_s = t.elapsed().as_secs_f64();
            Some(vol)
        }
        PriorKind::SqsCoarse => {
            let t = Instant::now();
            let (vol, trace) =
                sqs_reconstruct(p, &cfg.coarse_grid, &cfg.sqs_coarse).map_err(|e| match e {
                    crate::sqs::SqsError::Divergence { .. } => PipelineError::Divergence {
                        stage: "coarse prior",
                        detail: e.to_string(),
                    },
                    other => PipelineError::Stage {
                        stage: "coarse prior",
                        source: Box::new(other),
                    },
                })?;
            coarse_objective_trace = Some(trace);
            timings.prior_s = t.elapsed().as_secs_f64();
            Some(vol)
        }
        PriorKind::Inr => {
            let t = Instant::now();
            let model = InrModel::init(
                cfg.hash_grid_config(),
                cfg.inr_mlp.clone(),
                cfg.model_seed,
            )
            .map_err(|e| PipelineError::Stage {
                stage: "inr init",
                source: Box::new(e),
            })?;
            let trained =
                inr::train(model, p, &p.geom, &cfg.inr_train).map_err(|e| match e {
                    inr::TrainError::Divergence { .. } => PipelineError::Divergence {
                        stage: "inr training",
                        detail: e.to_string(),
                    },
                    other => PipelineError::Stage {
                        stage: "inr training",
                        source: Box::new(other),
                    },
                })?;
            inr_loss_trace = Some(trained.loss_trace);
            let vol = trained.model.render_volume(&cfg.coarse_grid);
            timings.prior_s = t.elapsed().as_secs_f64();
            Some(vol)
        }
    };

    let (p_hat, prior_masked) = match prior_raw {
        None => (p.clone(), None),
        Some(prior) => {
            let t = Instant::now();
            let masked = mask_prior(&prior, &cfg.fine_grid);
            timings.mask_s = t.elapsed().as_secs_f64();
            let t = Instant::now();
            let corrected = correct_projections(p, &masked)?;
            timings.correct_s = t.elapsed().as_secs_f64();
            (corrected, Some(masked))
        }
    };

    let t = Instant::now();
    let (fine, fine_trace) =
        sqs_reconstruct(&p_hat, &cfg.fine_grid, &cfg.sqs_fine).map_err(|e| match e {
            crate::sqs::SqsError::Divergence { .. } => PipelineError::Divergence {
                stage: "fine reconstruction",
                detail: e.to_string(),
            },
            other => PipelineError::Stage {
                stage: "fine reconstruction",
                source: Box::new(other),
            },
        })?;
    timings.fine_s = t.elapsed().as_secs_f64();

    Ok((
        fine,
        PipelineReport {
            prior_kind: cfg.prior_kind,
            timings,
            prior: prior_masked,
            inr_loss_trace,
            coarse_objective_trace,
            fine_objective_trace: fine_trace,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grids() -> (VolumeGrid, VolumeGrid) {
        let coarse = VolumeGrid::new([-140.0, -80.0, -40.0], [140.0, 200.0, 105.0], [1.0; 3]).unwrap();
        let fine = VolumeGrid::new([-80.0, -80.0 + 1.0, -32.0], [80.0, 80.0, 88.0], [0.5; 3]);
        // The paper-style fine grid shares the y=-80 face with the coarse
        // grid; shift it inward so "strictly inside" holds for the test.
        let fine = fine.unwrap();
        (coarse, fine)
    }

    #[test]
    fn mask_fraction_matches_volume_ratio() {
        let (coarse, _) = grids();
        let fine =
            VolumeGrid::new([-80.0, -80.0, -32.0], [80.0, 80.0, 88.0], [0.2; 3]).unwrap();
        let mut prior = Volume::zeros(coarse.clone());
        prior.values.fill(1.0);
        let masked = mask_prior(&prior, &fine);
        let zeroed = masked.values.iter().filter(|&&v| v == 0.0).count();
        let frac = zeroed as f64 / masked.values.len() as f64;
        let expect = (160.0 * 160.0 * 120.0) / (280.0 * 280.0 * 145.0);
        assert!(
            (frac - expect).abs() < 0.005,
            "masked fraction {frac} vs volume ratio {expect}"
        );
        // Idempotence, bitwise.
        let twice = mask_prior(&masked, &fine);
        assert_eq!(masked.values, twice.values);
    }

    #[test]
    fn mask_extremes() {
        let (coarse, _) = grids();
        let mut prior = Volume::zeros(coarse.clone());
        prior.values.fill(0.5);
        // Omega covering everything zeroes the volume.
        let all = VolumeGrid::new([-200.0, -200.0, -200.0], [300.0; 3], [10.0; 3]).unwrap();
        let gone = mask_prior(&prior, &all);
        assert!(gone.values.iter().all(|&v| v == 0.0));
        // Omega outside the coarse bbox changes nothing.
        let outside = VolumeGrid::new([500.0; 3], [510.0; 3], [1.0; 3]).unwrap();
        let kept = mask_prior(&prior, &outside);
        assert_eq!(kept.values, prior.values);
    }

    #[test]
    fn correction_identity_and_conservation() {
        let _guard = crate::threading::test_support::single_thread();
        let geom = crate::geometry::ScanGeometry {
            sdd: 600.0,
            sid: 400.0,
            det_cols: 12,
            det_rows: 8,
            pixel_u: 8.0,
            pixel_v: 8.0,
            offset_u: 0.0,
            offset_v: 0.0,
            n_angles: 6,
            angle_start: 0.0,
            angle_end: std::f64::consts::TAU,
        }
        .validated()
        .unwrap();
        let coarse = VolumeGrid::new([-40.0; 3], [40.0; 3], [8.0; 3]).unwrap();
        let mut p = ProjectionStack::zeros(geom.clone());
        // Dyadic data keeps the subtraction exact.
        for (i, v) in p.data.iter_mut().enumerate() {
            *v = (i % 17) as f64 / 16.0;
        }
        // Zero prior: identity.
        let zero = Volume::zeros(coarse.clone());
        let same = correct_projections(&p, &zero).unwrap();
        assert_eq!(same.data, p.data);
        // Conservation: P_hat + A u reconstitutes P bitwise for dyadic
        // volumes.
        let mut u = Volume::zeros(coarse);
        for (i, v) in u.values.iter_mut().enumerate() {
            *v = ((i % 5) as f64) * 0.25;
        }
        let p_hat = correct_projections(&p, &u).unwrap();
        let proj = forward_project(&u, &geom);
        for ((ph, pr), orig) in p_hat.data.iter().zip(proj.data.iter()).zip(p.data.iter()) {
            assert_eq!(ph + pr, *orig);
        }
        // Linearity in the prior: doubling u doubles the subtracted part.
        let mut u2 = u.clone();
        for v in u2.values.iter_mut() {
            *v *= 2.0;
        }
        let p_hat2 = correct_projections(&p, &u2).unwrap();
        for ((a, b), orig) in p_hat.data.iter().zip(p_hat2.data.iter()).zip(p.data.iter()) {
            let sub1 = orig - a;
            let sub2 = orig - b;
            assert!((sub2 - 2.0 * sub1).abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        let (coarse, fine) = grids();
        let cfg = PipelineConfig {
            prior_kind: PriorKind::None,
            coarse_grid: coarse.clone(),
            fine_grid: fine,
            inr_mlp: MlpConfig::default(),
            inr_train: TrainConfig::default(),
            inr_levels: 8,
            inr_table_size: 1 << 14,
            inr_features: 2,
            inr_base_resolution: 16,
            inr_growth: 1.45,
            model_seed: 0,
            sqs_coarse: SqsConfig::default(),
            sqs_fine: SqsConfig::default(),
            fdk_filter: FilterKind::RampHann,
        };
        assert!(cfg.clone().validated().is_ok());
        // Fine grid poking out of the coarse grid is rejected.
        let bad = PipelineConfig {
            fine_grid: VolumeGrid::new([-200.0, 0.0, 0.0], [0.5, 10.0, 10.0], [0.5; 3]).unwrap(),
            ..cfg.clone()
        };
        assert!(matches!(bad.validated(), Err(PipelineError::Config(_))));
        // Coarse voxel below fine voxel is rejected.
        let bad = PipelineConfig {
            coarse_grid: VolumeGrid::new(
                coarse.bbox_min,
                coarse.bbox_max,
                [0.25, 1.0, 1.0],
            )
            .unwrap(),
            ..cfg
        };
        assert!(matches!(bad.validated(), Err(PipelineError::Config(_))));
    }

    #[test]
    fn pipeline_config_from_doc() {
        let text = "\
[pipeline]
prior = fdk
[coarse_grid]
bbox_min = -210 -210 -80
bbox_max = 210 210 80
voxel = 2.5 2.5 2.5
[fine_grid]
bbox_min = -60 -60 -30
bbox_max = 60 60 30
voxel = 1.25 1.25 1.25
[inr]
width = 32
[train]
steps = 50
[sqs_fine]
iters = 7
lambda = 0.001
[fdk]
filter = ramp
";
        let doc = ConfigDoc::parse(text).unwrap();
        let cfg = PipelineConfig::from_doc(&doc).unwrap().validated().unwrap();
        assert_eq!(cfg.prior_kind, PriorKind::Fdk);
        assert_eq!(cfg.inr_mlp.width, 32);
        assert_eq!(cfg.inr_train.steps, 50);
        assert_eq!(cfg.sqs_fine.n_iters, 7);
        assert_eq!(cfg.fdk_filter, FilterKind::Ramp);
        assert_eq!(cfg.coarse_grid.dims(), [168, 168, 64]);
        assert_eq!(cfg.fine_grid.dims(), [96, 96, 48]);
    }
}
