//! Teacher-forced maximum-likelihood training: Adam with cosine
//! learning-rate annealing, global gradient-norm clipping, seeded
//! shuffling, and checkpoint persistence.
//!
//! Runs are bitwise reproducible given (seed, config, dataset): example
//! order, gradient accumulation, and the optimizer all follow fixed
//! orders.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{round_instances, Dataset, Vocabulary};
use crate::decoder::UnitConfig;
use crate::encoder::{EncoderVariant, KnowledgeBase};
use crate::error::{DamError, Result};
use crate::model::{Model, ModelConfig, TensorRecord};
use crate::rng::DetRng;
use crate::tensor::{accumulate_param_grads, ParamSet, Scalar, Tape, Var};

pub const CHECKPOINT_SCHEMA: &str = "dam-ckpt/1";

// ── Configuration ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub hidden: usize,
    pub embed_dim: usize,
    pub encoder: EncoderVariant,
    pub units: UnitConfig,
    pub min_freq: usize,
    pub max_len: usize,
    pub share_embedding: bool,
    pub length_normalize: bool,
}

impl Default for TrainConfig {
    /// Desk-scale defaults sized for the synthetic benchmark.
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 8,
            lr_init: 1e-3,
            lr_final: 3.4e-4,
            grad_clip_norm: 5.0,
            seed: 0,
            hidden: 64,
            embed_dim: 64,
            encoder: EncoderVariant::Dualvd,
            units: UnitConfig::FULL,
            min_freq: 0,
            max_len: 20,
            share_embedding: true,
            length_normalize: false,
        }
    }
}

impl TrainConfig {
    /// The full-scale defaults: hidden 512, 16 epochs, batch 15,
    /// vocabulary threshold 5. Selectable, not what the desk-scale
    /// benchmark runs.
    pub fn paper_scale() -> Self {
        TrainConfig {
            epochs: 16,
            batch_size: 15,
            hidden: 512,
            embed_dim: 300,
            min_freq: 5,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(DamError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(DamError::Config("batch_size must be at least 1".into()));
        }
        if self.lr_final > self.lr_init {
            return Err(DamError::Config(format!(
                "lr_final {} exceeds lr_init {}",
                self.lr_final, self.lr_init
            )));
        }
        if self.grad_clip_norm <= 0.0 {
            return Err(DamError::Config("grad_clip_norm must be positive".into()));
        }
        if self.hidden == 0 || self.embed_dim == 0 {
            return Err(DamError::Config("hidden and embed_dim must be positive".into()));
        }
        if self.max_len == 0 {
            return Err(DamError::Config("max_len must be at least 1".into()));
        }
        self.units.validate()
    }

    pub fn model_config(&self, region_dim: usize) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            embed_dim: self.embed_dim,
            region_dim,
            encoder: self.encoder,
            units: self.units,
            share_embedding: self.share_embedding,
        }
    }
}

// ── Loss ─────────────────────────────────────────────────────────────

/// Teacher-forced negative log-likelihood, averaged over the target
/// tokens plus the end-of-sequence step.
pub fn nll_loss<S: Scalar>(
    model: &Model<S>,
    tape: &mut Tape<S>,
    kb: &KnowledgeBase,
    gt_tokens: &[usize],
) -> Result<Var> {
    if gt_tokens.is_empty() {
        return Err(DamError::InvalidArgument(
            "cannot compute a loss over an empty target".into(),
        ));
    }
    let log_probs = model.teacher_forced_log_probs(tape, kb, gt_tokens)?;
    let total = tape.add_n(&log_probs)?;
    Ok(tape.scale(total, -1.0 / log_probs.len() as f64))
}

// ── Learning-rate schedule ───────────────────────────────────────────

/// Cosine annealing:
/// `lr = lr_final + 0.5·(lr_init − lr_final)·(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_init: f64, lr_final: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(DamError::Config("cosine schedule needs total_steps > 0".into()));
    }
    if step > total_steps {
        return Err(DamError::InvalidArgument(format!(
            "schedule step {step} beyond total {total_steps}"
        )));
    }
    let progress = step as f64 / total_steps as f64;
    Ok(lr_final + 0.5 * (lr_init - lr_final) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

// ── Optimizer ────────────────────────────────────────────────────────

/// Adam moments, one pair of arrays per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ParamSet<S>) -> Self {
        let m = params
            .iter()
            .map(|(_, _, t)| vec![S::zero(); t.numel()])
            .collect::<Vec<_>>();
        AdamState {
            v: m.clone(),
            m,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction, consuming the accumulated grad
/// fields. Missing gradients count as zero.
pub fn adam_step<S: Scalar>(
    params: &mut ParamSet<S>,
    state: &mut AdamState<S>,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = S::from_f64_lossy(1.0 - state.beta1.powi(t));
    let bc2 = S::from_f64_lossy(1.0 - state.beta2.powi(t));
    let b1 = S::from_f64_lossy(state.beta1);
    let b2 = S::from_f64_lossy(state.beta2);
    let one_m_b1 = S::one() - b1;
    let one_m_b2 = S::one() - b2;
    let eps = S::from_f64_lossy(state.epsilon);
    let lr_s = S::from_f64_lossy(lr);

    for id in params.ids().collect::<Vec<_>>() {
        let idx = id.index();
        let tensor = params.get(id);
        if let Some(grad) = tensor.grad() {
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(DamError::NonFinite(format!(
                    "gradient of parameter `{}`",
                    params.name(id)
                )));
            }
            let grad = grad.to_vec();
            let m = &mut state.m[idx];
            let v = &mut state.v[idx];
            let data = params.get_mut(id).data_mut();
            for ((p, g), (mi, vi)) in data
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = b1 * *mi + one_m_b1 * *g;
                *vi = b2 * *vi + one_m_b2 * *g * *g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p = *p - lr_s * m_hat / (v_hat.sqrt() + eps);
            }
        } else {
            // decay moments toward zero as a zero-gradient step would
            let m = &mut state.m[idx];
            let v = &mut state.v[idx];
            let data = params.get_mut(id).data_mut();
            for (p, (mi, vi)) in data.iter_mut().zip(m.iter_mut().zip(v.iter_mut())) {
                *mi = b1 * *mi;
                *vi = b2 * *vi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p = *p - lr_s * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    Ok(())
}

/// Scales gradients so the global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_gradients<S: Scalar>(params: &mut ParamSet<S>, max_norm: f64) -> f64 {
    let mut sq_sum = 0.0f64;
    for (_, _, t) in params.iter() {
        if let Some(g) = t.grad() {
            for v in g {
                let v = v.as_f64();
                sq_sum += v * v;
            }
        }
    }
    let norm = sq_sum.sqrt();
    if norm > max_norm {
        let scale = S::from_f64_lossy(max_norm / norm);
        for id in params.ids().collect::<Vec<_>>() {
            let tensor = params.get_mut(id);
            if tensor.grad().is_some() {
                let scaled: Vec<S> = tensor.grad().unwrap().iter().map(|&g| g * scale).collect();
                tensor.zero_grad();
                tensor.accumulate_grad(&scaled);
            }
        }
    }
    norm
}

// ── Training loop ────────────────────────────────────────────────────

#[derive(Debug)]
pub struct TrainRun {
    pub model: Model<f32>,
    /// Mean per-example loss for each epoch, in epoch order.
    pub loss_log: Vec<f64>,
}

/// Trains a fresh model on every round of the dataset. Batches sum the
/// per-example mean-token losses, clip the global gradient norm, and take
/// one optimizer step.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainRun> {
    config.validate()?;
    dataset.validate()?;
    let vocab = Vocabulary::build(dataset, config.min_freq);
    let instances = round_instances(dataset, &vocab)?;
    if instances.is_empty() {
        return Err(DamError::Data("dataset has no rounds to train on".into()));
    }
    let region_dim = dataset
        .images
        .first()
        .and_then(|im| im.regions.first())
        .map(|r| r.len())
        .ok_or_else(|| DamError::Data("dataset has no region features".into()))?;

    let mut model = Model::<f32>::new(config.model_config(region_dim), vocab, config.seed)?;
    let n = instances.len();
    let batches_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = config.epochs * batches_per_epoch;
    let mut adam = AdamState::new(&model.params);
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = DetRng::seed(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut loss_log = Vec::with_capacity(config.epochs);
    let mut step = 0usize;

    for _ in 0..config.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(config.batch_size) {
            model.params_mut().zero_grads();
            for &idx in batch {
                let instance = &instances[idx];
                let mut tape = Tape::new();
                let kb = model.encode(&mut tape, &instance.input)?;
                let loss = nll_loss(&model, &mut tape, &kb, &instance.target)?;
                epoch_loss += tape.scalar(loss).as_f64();
                tape.backward(loss)?;
                accumulate_param_grads(&tape, model.params_mut());
            }
            clip_gradients(model.params_mut(), config.grad_clip_norm);
            let lr = cosine_lr(step, total_steps, config.lr_init, config.lr_final)?;
            adam_step(model.params_mut(), &mut adam, lr)?;
            step += 1;
        }
        loss_log.push(epoch_loss / n as f64);
    }

    Ok(TrainRun { model, loss_log })
}

/// Mean teacher-forced loss of a model over a dataset, without touching
/// parameters. Used to compare models before and after training.
pub fn mean_loss(model: &Model<f32>, dataset: &Dataset) -> Result<f64> {
    let instances = round_instances(dataset, model.vocab())?;
    let mut total = 0.0;
    for instance in &instances {
        let mut tape = Tape::inference();
        let kb = model.encode(&mut tape, &instance.input)?;
        let loss = nll_loss(model, &mut tape, &kb, &instance.target)?;
        total += tape.scalar(loss) as f64;
    }
    Ok(total / instances.len() as f64)
}

// ── Checkpoints ──────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct CheckpointConfig {
    #[serde(flatten)]
    train: TrainConfig,
    region_dim: usize,
    vocab: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    schema: String,
    config: CheckpointConfig,
    tensors: BTreeMap<String, TensorRecord>,
}

/// Serialized checkpoint bytes; identical models and configs serialize
/// identically.
pub fn checkpoint_to_json(model: &Model<f32>, config: &TrainConfig) -> String {
    let file = CheckpointFile {
        schema: CHECKPOINT_SCHEMA.to_string(),
        config: CheckpointConfig {
            train: config.clone(),
            region_dim: model.config().region_dim,
            vocab: model.vocab().tokens().to_vec(),
        },
        tensors: model.export_tensors(),
    };
    serde_json::to_string_pretty(&file).expect("checkpoint serialization cannot fail")
}

pub fn save_checkpoint(path: &Path, model: &Model<f32>, config: &TrainConfig) -> Result<()> {
    std::fs::write(path, checkpoint_to_json(model, config))?;
    Ok(())
}

fn parse_checkpoint(path: &Path) -> Result<CheckpointFile> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| DamError::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    if file.schema != CHECKPOINT_SCHEMA {
        return Err(DamError::Parse {
            path: path.display().to_string(),
            detail: format!(
                "unknown schema version {:?}, expected {CHECKPOINT_SCHEMA:?}",
                file.schema
            ),
        });
    }
    Ok(file)
}

/// Restores a model under the configuration stored in the checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, TrainConfig)> {
    let file = parse_checkpoint(path)?;
    let model = build_from(&file, &file.config.train)?;
    Ok((model, file.config.train))
}

/// Restores a model but validates the tensors against `config` instead of
/// the stored configuration. Fails when the checkpoint does not describe
/// a model of that shape.
pub fn load_checkpoint_as(path: &Path, config: &TrainConfig) -> Result<Model<f32>> {
    let file = parse_checkpoint(path)?;
    build_from(&file, config)
}

fn build_from(file: &CheckpointFile, config: &TrainConfig) -> Result<Model<f32>> {
    config.validate()?;
    let vocab = Vocabulary::from_tokens(file.config.vocab.clone(), config.min_freq);
    let mut model = Model::<f32>::new(config.model_config(file.config.region_dim), vocab, 0)?;
    model.load_tensors(&file.tensors)?;
    Ok(model)
}
