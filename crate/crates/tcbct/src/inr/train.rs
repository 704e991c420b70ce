//! Ray-integral training of the neural attenuation field.
//!
//! The loss is the L1 mismatch between measured line integrals and the
//! model's midpoint-sampled ray integrals. Gradients are exact reverse-mode:
//! each sample's activations are recorded on a per-ray tape, and after the
//! residual sign is known the tape is replayed backwards, scattering into
//! the hash tables through the same trilinear weights the encoding used.
//! The L1 subgradient at an exactly zero residual is taken as 0.
//!
//! Batch evaluation splits rays into one contiguous chunk per worker and
//! combines the partial sums in chunk order, so a fixed thread count gives
//! run-to-run identical results; one thread is the fully deterministic mode.

use rand::Rng;
use rand::SeedableRng;

use super::{softplus, softplus_grad, EvalScratch, InrModel};
use crate::geometry::{intersect_aabb, normalize, sub, ScanGeometry};
use crate::projector::ProjectionStack;
use crate::threading;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.99;
const ADAM_EPS: f64 = 1e-10;
/// The learning rate is multiplied by `lr_decay` every this many steps.
pub const LR_DECAY_INTERVAL: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training diverged at step {step}: non-finite batch loss")]
    Divergence { step: usize },
    #[error("invalid training config: {0}")]
    Config(String),
}

/// Residual penalty; Huber is a smoothing fallback and stays off by default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    L1,
    Huber { delta: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub rays_per_batch: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Multiplicative learning-rate factor applied every
    /// [`LR_DECAY_INTERVAL`] steps.
    pub lr_decay: f64,
    /// Distance between adjacent ray samples, in mm.
    pub sample_step: f64,
    pub seed: u64,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rays_per_batch: 256,
            steps: 1000,
            learning_rate: 1e-2,
            lr_decay: 0.9,
            sample_step: 1.0,
            seed: 0,
            loss: LossKind::L1,
        }
    }
}

impl TrainConfig {
    pub fn validated(self) -> Result<Self, TrainError> {
        if self.rays_per_batch == 0 {
            return Err(TrainError::Config("rays_per_batch must be >= 1".into()));
        }
        if !(self.sample_step > 0.0) {
            return Err(TrainError::Config("sample_step must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(TrainError::Config("lr_decay must be in (0, 1]".into()));
        }
        if let LossKind::Huber { delta } = self.loss {
            if !(delta > 0.0) {
                return Err(TrainError::Config("huber delta must be positive".into()));
            }
        }
        Ok(self)
    }
}

/// Trained model plus the per-step mean batch loss.
#[derive(Debug, Clone)]
pub struct TrainedInr {
    pub model: InrModel,
    pub loss_trace: Vec<f64>,
}

fn ray_endpoints(geom: &ScanGeometry, ray_idx: usize) -> ([f64; 3], [f64; 3]) {
    let per_view = geom.rays_per_view();
    let angle_idx = ray_idx / per_view;
    let rest = ray_idx % per_view;
    let row = rest / geom.det_cols;
    let col = rest % geom.det_cols;
    let step = (geom.angle_end - geom.angle_start) / geom.n_angles as f64;
    let angle = geom.angle_start + angle_idx as f64 * step;
    let pose = geom.pose(angle);
    let target = geom.pixel_position(&pose, col as f64, row as f64);
    (pose.source, normalize(sub(target, pose.source)))
}

/// Per-worker buffers: one tape entry per ray sample.
struct Workspace {
    scratch: EvalScratch,
    feats: Vec<f64>,
    hidden: Vec<f64>,
    z_out: Vec<f64>,
    t_pos: Vec<f64>,
    weight: Vec<f64>,
    dfeat: Vec<f64>,
    d_cur: Vec<f64>,
    d_nxt: Vec<f64>,
}

impl Workspace {
    fn new(model: &InrModel) -> Self {
        Self {
            scratch: model.scratch(),
            feats: Vec::new(),
            hidden: Vec::new(),
            z_out: Vec::new(),
            t_pos: Vec::new(),
            weight: Vec::new(),
            dfeat: vec![0.0; model.feature_dim()],
            d_cur: vec![0.0; model.mlp.width.max(model.feature_dim())],
            d_nxt: vec![0.0; model.mlp.width.max(model.feature_dim())],
        }
    }

    fn reserve(&mut self, samples: usize, fdim: usize, hdim: usize) {
        self.feats.resize(samples * fdim, 0.0);
        self.hidden.resize(samples * hdim, 0.0);
        self.z_out.resize(samples, 0.0);
        self.t_pos.resize(samples, 0.0);
        self.weight.resize(samples, 0.0);
    }
}

/// Forward + backward for one ray; returns its loss contribution and adds
/// its parameter gradient into `grad` (when `Some`).
fn ray_loss_grad(
    model: &InrModel,
    origin: [f64; 3],
    direction: [f64; 3],
    measured: f64,
    d: f64,
    kind: LossKind,
    ws: &mut Workspace,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let span = intersect_aabb(model.enc.bbox_min, model.enc.bbox_max, origin, direction);
    let fdim = model.feature_dim();
    let width = model.mlp.width;
    let hl = model.mlp.hidden_layers;
    let hdim = hl * width;

    let mut n_samples = 0;
    let mut integral = 0.0;
    if let Some((t0, t1)) = span {
        let len = t1 - t0;
        if len > 0.0 {
            let n_full = (len / d).floor() as usize;
            let rem = len - n_full as f64 * d;
            n_samples = n_full + usize::from(rem > 0.0);
            ws.reserve(n_samples, fdim, hdim);
            let Workspace {
                scratch,
                feats,
                hidden,
                z_out,
                t_pos,
                weight,
                ..
            } = ws;
            for s in 0..n_samples {
                let (t, w) = if s < n_full {
                    (t0 + (s as f64 + 0.5) * d, d)
                } else {
                    (t0 + n_full as f64 * d + 0.5 * rem, rem)
                };
                t_pos[s] = t;
                weight[s] = w;
                let x = [
                    origin[0] + t * direction[0],
                    origin[1] + t * direction[1],
                    origin[2] + t * direction[2],
                ];
                let sample_feats = &mut feats[s * fdim..(s + 1) * fdim];
                model.encode_into(x, sample_feats);
                let sample_hidden = &mut hidden[s * hdim..(s + 1) * hdim];
                let z = model.mlp_forward(sample_feats, scratch, Some(sample_hidden));
                z_out[s] = z;
                integral += softplus(z) * w;
            }
        }
    }

    let residual = measured - integral;
    let (loss, dl_dintegral) = match kind {
        LossKind::L1 => {
            let s = if residual > 0.0 {
                -1.0
            } else if residual < 0.0 {
                1.0
            } else {
                0.0
            };
            (residual.abs(), s)
        }
        LossKind::Huber { delta } => {
            if residual.abs() <= delta {
                (0.5 * residual * residual, -residual)
            } else {
                (
                    delta * residual.abs() - 0.5 * delta * delta,
                    -delta * residual.signum(),
                )
            }
        }
    };

    if let Some(grad) = grad.as_deref_mut() {
        if dl_dintegral != 0.0 {
            for s in 0..n_samples {
                let t = ws.t_pos[s];
                let x = [
                    origin[0] + t * direction[0],
                    origin[1] + t * direction[1],
                    origin[2] + t * direction[2],
                ];
                let dz_out =
                    dl_dintegral * ws.weight[s] * softplus_grad(ws.z_out[s]);
                mlp_backward(model, s, fdim, width, hl, dz_out, ws, grad);
                let dfeat = std::mem::take(&mut ws.dfeat);
                model.encode_backward(x, &dfeat, grad);
                ws.dfeat = dfeat;
            }
        }
    }
    loss
}

/// Backpropagates one sample through the MLP into `grad`, leaving the
/// feature gradient in `ws.dfeat`.
fn mlp_backward(
    model: &InrModel,
    sample: usize,
    fdim: usize,
    width: usize,
    hl: usize,
    dz_out: f64,
    ws: &mut Workspace,
    grad: &mut [f64],
) {
    let params = model.params();
    let layers = &model.layers;
    let hidden = &ws.hidden[sample * hl * width..(sample + 1) * hl * width];
    let feats = &ws.feats[sample * fdim..(sample + 1) * fdim];

    // Output layer (width -> 1).
    let out = layers[hl];
    let last_h = &hidden[(hl - 1) * width..hl * width];
    grad[out.b_off] += dz_out;
    for i in 0..out.in_dim {
        grad[out.w_off + i] += dz_out * last_h[i];
        ws.d_cur[i] = params[out.w_off + i] * dz_out;
    }

    // Hidden layers, last to first; d_cur holds dL/d(post-activation).
    for li in (0..hl).rev() {
        let layer = layers[li];
        let h = &hidden[li * width..(li + 1) * width];
        let prev: &[f64] = if li == 0 {
            feats
        } else {
            &hidden[(li - 1) * width..li * width]
        };
        for i in 0..layer.in_dim {
            ws.d_nxt[i] = 0.0;
        }
        for o in 0..layer.out_dim {
            // Relu gate.
            let dz = if h[o] > 0.0 { ws.d_cur[o] } else { 0.0 };
            if dz == 0.0 {
                continue;
            }
            grad[layer.b_off + o] += dz;
            let row = layer.w_off + o * layer.in_dim;
            for i in 0..layer.in_dim {
                grad[row + i] += dz * prev[i];
                ws.d_nxt[i] += params[row + i] * dz;
            }
        }
        std::mem::swap(&mut ws.d_cur, &mut ws.d_nxt);
    }
    ws.dfeat[..fdim].copy_from_slice(&ws.d_cur[..fdim]);
}

/// Batch loss and exact gradient, deterministically chunked per worker.
fn eval_batch(
    model: &InrModel,
    p: &ProjectionStack,
    geom: &ScanGeometry,
    ray_ids: &[usize],
    d: f64,
    kind: LossKind,
    with_grad: bool,
) -> (f64, Vec<f64>) {
    let n = model.num_params();
    let run_chunk = |ids: &[usize]| -> (f64, Vec<f64>) {
        let mut ws = Workspace::new(model);
        let mut grad = vec![0.0; if with_grad { n } else { 0 }];
        let mut loss = 0.0;
        for &id in ids {
            let (origin, direction) = ray_endpoints(geom, id);
            loss += ray_loss_grad(
                model,
                origin,
                direction,
                p.data[id],
                d,
                kind,
                &mut ws,
                if with_grad { Some(&mut grad) } else { None },
            );
        }
        (loss, grad)
    };
    if threading::sequential() || ray_ids.len() < 2 {
        run_chunk(ray_ids)
    } else {
        #[cfg(not(feature = "parallel"))]
        unreachable!();
        #[cfg(feature = "parallel")]
        {
            let chunk = ray_ids.len().div_ceil(threading::effective_threads());
            let partials: Vec<(f64, Vec<f64>)> = threading::install(|| {
                use rayon::prelude::*;
                ray_ids.par_chunks(chunk).map(run_chunk).collect()
            });
            let mut loss = 0.0;
            let mut grad = vec![0.0; if with_grad { n } else { 0 }];
            for (l, g) in partials {
                loss += l;
                for (a, b) in grad.iter_mut().zip(g.iter()) {
                    *a += b;
                }
            }
            (loss, grad)
        }
    }
}

/// Sum of `|P - predicted integral|` over the given rays.
pub fn loss_batch(model: &InrModel, p: &ProjectionStack, ray_ids: &[usize], d: f64) -> f64 {
    assert!(
        ray_ids.iter().all(|&i| i < p.data.len()),
        "ray index out of range"
    );
    eval_batch(model, p, &p.geom, ray_ids, d, LossKind::L1, false).0
}

/// Exact reverse-mode gradient of [`loss_batch`] with respect to every
/// trainable parameter (flat, same layout as [`InrModel::params`]).
pub fn gradient(model: &InrModel, p: &ProjectionStack, ray_ids: &[usize], d: f64) -> Vec<f64> {
    assert!(
        ray_ids.iter().all(|&i| i < p.data.len()),
        "ray index out of range"
    );
    eval_batch(model, p, &p.geom, ray_ids, d, LossKind::L1, true).1
}

/// Adam-style training on seeded uniform ray batches. Deterministic given
/// the seed in single-threaded mode.
pub fn train(
    model: InrModel,
    p: &ProjectionStack,
    geom: &ScanGeometry,
    cfg: &TrainConfig,
) -> Result<TrainedInr, TrainError> {
    let cfg = cfg.clone().validated()?;
    if p.data.len() != geom.total_rays() {
        return Err(TrainError::Config(format!(
            "projection stack has {} samples but the geometry defines {} rays",
            p.data.len(),
            geom.total_rays()
        )));
    }
    let mut model = model;
    let n = model.num_params();
    let mut m1 = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let total = geom.total_rays();
    let mut ids = vec![0usize; cfg.rays_per_batch];
    for step in 0..cfg.steps {
        for id in ids.iter_mut() {
            *id = rng.random_range(0..total);
        }
        let (loss_sum, grad) =
            eval_batch(&model, p, geom, &ids, cfg.sample_step, cfg.loss, true);
        let mean_loss = loss_sum / ids.len() as f64;
        if !mean_loss.is_finite() {
            return Err(TrainError::Divergence { step });
        }
        trace.push(mean_loss);
        let lr = cfg.learning_rate * cfg.lr_decay.powi((step / LR_DECAY_INTERVAL) as i32);
        let t = (step + 1) as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let params = model.params_mut();
        for i in 0..n {
            let g = grad[i];
            m1[i] = BETA1 * m1[i] + (1.0 - BETA1) * g;
            m2[i] = BETA2 * m2[i] + (1.0 - BETA2) * g * g;
            params[i] -= lr * (m1[i] / bc1) / ((m2[i] / bc2).sqrt() + ADAM_EPS);
        }
    }
    Ok(TrainedInr {
        model,
        loss_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inr::{HashGridConfig, MlpConfig};

    fn tiny_geom() -> ScanGeometry {
        ScanGeometry {
            sdd: 600.0,
            sid: 400.0,
            det_cols: 8,
            det_rows: 6,
            pixel_u: 8.0,
            pixel_v: 8.0,
            offset_u: 0.0,
            offset_v: 0.0,
            n_angles: 4,
            angle_start: 0.0,
            angle_end: std::f64::consts::TAU,
        }
        .validated()
        .unwrap()
    }

    fn tiny_model(seed: u64) -> InrModel {
        InrModel::init(
            HashGridConfig {
                levels: 3,
                table_size: 1 << 9,
                features_per_level: 2,
                base_resolution: 3,
                growth: 1.6,
                bbox_min: [-40.0; 3],
                bbox_max: [40.0; 3],
            },
            MlpConfig {
                hidden_layers: 2,
                width: 8,
                ..MlpConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn loss_trivial_cases() {
        let geom = tiny_geom();
        let model = tiny_model(0);
        let d = 4.0;
        // Measurements equal to predictions give zero loss and gradient.
        let mut p = ProjectionStack::zeros(geom.clone());
        let ids: Vec<usize> = vec![0, 5, 17, 30];
        for &id in &ids {
            let (o, dir) = ray_endpoints(&geom, id);
            let ray = crate::geometry::Ray {
                origin: o,
                direction: dir,
                span: None,
            };
            p.data[id] = model.predict_line_integral(&ray, d);
        }
        assert_eq!(loss_batch(&model, &p, &ids, d), 0.0);
        let g = gradient(&model, &p, &ids, d);
        assert!(g.iter().all(|&x| x == 0.0));

        // Model forced to predict exactly zero: loss is the sum of data.
        let mut zero_model = tiny_model(0);
        zero_model.params_mut().fill(0.0);
        let bias = zero_model.output_bias_index();
        zero_model.params_mut()[bias] = -1000.0;
        let mut p = ProjectionStack::zeros(geom.clone());
        for (i, v) in p.data.iter_mut().enumerate() {
            *v = 0.25 + (i % 7) as f64;
        }
        let ids: Vec<usize> = (0..10).collect();
        let expect: f64 = ids.iter().map(|&i| p.data[i]).sum();
        assert!((loss_batch(&zero_model, &p, &ids, d) - expect).abs() < 1e-12);

        // Single-ray batch is |scalar residual|.
        let single = loss_batch(&zero_model, &p, &[3], d);
        assert!((single - p.data[3]).abs() < 1e-12);
    }

    #[test]
    fn untouched_table_slot_has_zero_gradient() {
        let geom = tiny_geom();
        let model = tiny_model(1);
        let mut p = ProjectionStack::zeros(geom.clone());
        for v in p.data.iter_mut() {
            *v = 1.0;
        }
        // One ray cannot touch every hash slot.
        let g = gradient(&model, &p, &[0], 4.0);
        let f = model.enc.features_per_level;
        let table = model.enc.table_size * f;
        let touched = g[..model.enc.levels * table]
            .iter()
            .filter(|&&x| x != 0.0)
            .count();
        assert!(touched > 0);
        assert!(
            touched < model.enc.levels * table / 2,
            "most slots must stay untouched"
        );
    }

    #[test]
    fn train_zero_steps_is_identity_and_seeded_runs_match() {
        let _guard = crate::threading::test_support::single_thread();
        let geom = tiny_geom();
        let model = tiny_model(2);
        let p = ProjectionStack::zeros(geom.clone());
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let before = model.params().to_vec();
        let out = train(model.clone(), &p, &geom, &cfg).unwrap();
        assert_eq!(out.model.params(), &before[..]);
        assert!(out.loss_trace.is_empty());

        let cfg = TrainConfig {
            steps: 5,
            rays_per_batch: 8,
            sample_step: 4.0,
            seed: 42,
            ..TrainConfig::default()
        };
        let a = train(model.clone(), &p, &geom, &cfg).unwrap();
        let b = train(model.clone(), &p, &geom, &cfg).unwrap();
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.model.params(), b.model.params());
    }

    #[test]
    fn bad_configs_rejected() {
        assert!(TrainConfig {
            rays_per_batch: 0,
            ..TrainConfig::default()
        }
        .validated()
        .is_err());
        assert!(TrainConfig {
            sample_step: 0.0,
            ..TrainConfig::default()
        }
        .validated()
        .is_err());
        let geom = tiny_geom();
        let p = ProjectionStack::zeros(
            ScanGeometry {
                n_angles: 2,
                ..geom.clone()
            }
            .validated()
            .unwrap(),
        );
        assert!(matches!(
            train(tiny_model(0), &p, &geom, &TrainConfig::default()),
            Err(TrainError::Config(_))
        ));
    }
}
