//! Consistency training: objectives, optimizer, balanced sampling and the
//! epoch loop for the Supervised, Aug and VORTEX modes.

pub mod loss;
pub mod optim;
pub mod sampler;
pub mod state;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{
    schedule_difficulty, schedule_probability, AugmentationPlan, CurriculumSchedule, Example, TransformSpec,
};
use crate::data::{Dataset, Role, ScanExamples};
use crate::error::{invalid, Result};
use crate::evaluate::{evaluate_scan, MetricsRecord, PerturbationSpec};
use crate::model::{save_checkpoint, ModelConfig, ModelParameters};
use crate::numerics::ComplexTensor;
use crate::rng::{hash64, AugmentationRng};
pub use loss::{consistency_term, l1_with_grad, supervised_loss, supervised_term, ConsistencyMode, ConsistencyValue};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use sampler::{BalancedSampler, Step};
pub use state::{StateHeader, TrainState};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LAST_CHECKPOINT: &str = "checkpoint_last.vtxm";
pub const BEST_CHECKPOINT: &str = "checkpoint_best.vtxm";
pub const STATE_FILE: &str = "train_state.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Supervised l1 only.
    Supervised,
    /// Supervised l1 on augmented inputs, augmentation probability `p(t)`.
    Aug,
    /// Supervised l1 plus weighted consistency on unsupervised scans.
    Vortex,
}

pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    /// Items per step, split evenly between supervised and unsupervised.
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Consistency weight; defaults to 0.1. Unused outside VORTEX mode.
    pub lambda: Option<f64>,
    pub consistency: ConsistencyMode,
    pub augmentations: Vec<TransformSpec>,
    /// Peak augmentation probability in Aug mode.
    pub aug_max_probability: f64,
    /// Probability ramp in Aug mode; exponential with `gamma = 5` over all
    /// epochs when absent.
    pub aug_schedule: Option<CurriculumSchedule>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Supervised,
            epochs: 50,
            batch_size: 8,
            optimizer: AdamConfig::default(),
            lambda: None,
            consistency: ConsistencyMode::Pixel,
            augmentations: Vec::new(),
            aug_max_probability: 0.2,
            aug_schedule: None,
        }
    }
}

impl TrainConfig {
    pub fn lambda(&self) -> f64 {
        match self.mode {
            TrainMode::Vortex => self.lambda.unwrap_or(DEFAULT_LAMBDA),
            _ => 0.0,
        }
    }

    /// Settings that have no effect in the configured mode.
    pub fn ignored_settings(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.mode != TrainMode::Vortex && self.lambda.is_some() {
            out.push("lambda");
        }
        if self.mode == TrainMode::Supervised && !self.augmentations.is_empty() {
            out.push("augmentations");
        }
        out
    }

    pub fn aug_schedule(&self) -> CurriculumSchedule {
        self.aug_schedule.clone().unwrap_or(CurriculumSchedule::Exponential {
            epochs: self.epochs as f64,
            gamma: 5.0,
        })
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid!("epochs must be positive"));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(invalid!("batch_size must be a positive even number"));
        }
        self.optimizer.validate()?;
        if let Some(l) = self.lambda {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(invalid!("lambda must be finite and >= 0"));
            }
        }
        for s in &self.augmentations {
            s.validate()?;
        }
        if !(0.0..=1.0).contains(&self.aug_max_probability) {
            return Err(invalid!("aug_max_probability must lie in [0, 1]"));
        }
        self.aug_schedule().validate()?;
        if self.mode != TrainMode::Supervised && self.augmentations.is_empty() {
            return Err(invalid!("{:?} mode needs at least one augmentation", self.mode));
        }
        if self.mode == TrainMode::Vortex {
            self.consistency.validate(model)?;
            if matches!(self.consistency, ConsistencyMode::Latent { .. })
                && self.augmentations.iter().any(|s| s.family() == crate::augment::Family::Equivariant)
            {
                return Err(invalid!(
                    "latent consistency supports invariant (noise, motion) augmentations only"
                ));
            }
        }
        Ok(())
    }

    fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda(),
            mode: self.consistency.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub mode: ConsistencyMode,
}

#[derive(Clone, Debug)]
pub struct SupervisedItem {
    /// Acquired (possibly augmented) k-space; the network sees its zero-filled image.
    pub input: Example,
    pub target: ComplexTensor,
}

#[derive(Clone, Debug)]
pub struct UnsupervisedItem {
    pub example: Example,
    pub plan: AugmentationPlan,
}

#[derive(Clone, Debug, Default)]
pub struct Batch {
    pub supervised: Vec<SupervisedItem>,
    pub unsupervised: Vec<UnsupervisedItem>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub supervised: f64,
    /// Mean consistency over unsupervised items, before the `lambda` factor.
    pub consistency: f64,
    /// Mean unweighted per-tap losses in latent mode.
    pub per_tap: Vec<f64>,
}

/// `mean_s |f(y_s) - x_s| + λ · mean_u L_cons(y_u)` and its gradient.
///
/// The consistency term is skipped entirely when `λ = 0` or the batch has no
/// unsupervised items. Per-item gradients are computed in parallel and summed
/// in item order.
pub fn total_loss(params: &ModelParameters, batch: &Batch, cfg: &LossConfig) -> Result<(LossBreakdown, Vec<f64>)> {
    let ns = batch.supervised.len();
    let sup: Vec<(f64, Vec<f64>)> = batch
        .supervised
        .par_iter()
        .map(|item| {
            let mut g = params.zeros_like();
            let l = supervised_term(params, &item.input, &item.target, 1.0, Some(&mut g))?;
            Ok((l, g))
        })
        .collect::<Result<_>>()?;
    let use_cons = cfg.lambda > 0.0 && !batch.unsupervised.is_empty();
    let nu = batch.unsupervised.len();
    let cons: Vec<(ConsistencyValue, Vec<f64>)> = if use_cons {
        batch
            .unsupervised
            .par_iter()
            .map(|item| {
                let mut g = params.zeros_like();
                let v = consistency_term(params, &item.example, &item.plan, &cfg.mode, 1.0, Some(&mut g))?;
                Ok((v, g))
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut grads = params.zeros_like();
    let mut out = LossBreakdown::default();
    if ns > 0 {
        let w = 1.0 / ns as f64;
        for (l, g) in &sup {
            out.supervised += l;
            grads.iter_mut().zip(g).for_each(|(a, b)| *a += w * b);
        }
        out.supervised /= ns as f64;
    }
    if use_cons {
        let w = cfg.lambda / nu as f64;
        let ntaps = match &cfg.mode {
            ConsistencyMode::Latent { taps } => taps.len(),
            ConsistencyMode::Pixel => 0,
        };
        out.per_tap = vec![0.0; ntaps];
        for (v, g) in &cons {
            out.consistency += v.loss;
            for (acc, t) in out.per_tap.iter_mut().zip(&v.per_tap) {
                *acc += t;
            }
            grads.iter_mut().zip(g).for_each(|(a, b)| *a += w * b);
        }
        out.consistency /= nu as f64;
        out.per_tap.iter_mut().for_each(|t| *t /= nu as f64);
    }
    out.total = out.supervised + cfg.lambda * out.consistency;
    Ok((out, grads))
}

/// In-memory training and validation examples.
#[derive(Clone, Debug, Default)]
pub struct TrainingData {
    /// Fully sampled slices with reference images.
    pub supervised: Vec<Example>,
    /// Undersampled slices without references.
    pub unsupervised: Vec<Example>,
    pub validation: Vec<ScanExamples>,
}

impl TrainingData {
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let flatten = |role| -> Result<Vec<Example>> {
            Ok(ds.load_examples(role)?.into_iter().flat_map(|s| s.slices).collect())
        };
        Ok(Self {
            supervised: flatten(Role::TrainSupervised)?,
            unsupervised: flatten(Role::TrainUnsupervised)?,
            validation: ds.load_examples(Role::Validation)?,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.supervised.is_empty() {
            return Err(invalid!("training needs at least one supervised example"));
        }
        if self.validation.is_empty() {
            return Err(invalid!("training needs at least one validation scan"));
        }
        if self.supervised.iter().any(|e| !e.fully_sampled || e.target.is_none()) {
            return Err(invalid!("supervised examples must be fully sampled with references"));
        }
        if self.unsupervised.iter().any(|e| e.fully_sampled) {
            return Err(invalid!("unsupervised examples must be undersampled"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TapLog {
    pub tap: String,
    /// Mean unweighted l1 at this tap.
    pub loss: f64,
    /// Effective weight `λ / |taps|`.
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationLog {
    pub kind: crate::augment::TransformKind,
    /// Current upper end of the difficulty range.
    pub difficulty_hi: f64,
    pub probability: f64,
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub loss_total: f64,
    pub loss_supervised: f64,
    pub loss_consistency: f64,
    pub lambda: f64,
    pub per_tap: Vec<TapLog>,
    pub augmentations: Vec<AugmentationLog>,
    #[serde(with = "crate::evaluate::sentinel")]
    pub val_cpsnr: f64,
    pub val_ssim: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Run directory for checkpoints, state and the metrics log.
    pub out_dir: Option<PathBuf>,
    /// Continue from the saved state in `out_dir` when present.
    pub resume: bool,
    /// Return after this many total epochs (simulates an interruption).
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParameters,
    pub best: ModelParameters,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Keyed identity of a run, stored with the training state.
pub fn fingerprint(model: &ModelConfig, train: &TrainConfig, seed: u64) -> Result<u64> {
    let bytes = serde_json::to_vec(&(model, train, seed))?;
    let words: Vec<u64> = bytes
        .chunks(8)
        .map(|c| {
            let mut b = [0u8; 8];
            b[..c.len()].copy_from_slice(c);
            u64::from_le_bytes(b)
        })
        .collect();
    Ok(hash64(&words))
}

const SUPERVISED_STREAM: u64 = 0;
const UNSUPERVISED_STREAM: u64 = 1 << 40;

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    data: &'a TrainingData,
    aug_rng: AugmentationRng,
    loss: LossConfig,
}

impl Trainer<'_> {
    fn probabilities(&self, t: f64) -> Result<Vec<f64>> {
        self.cfg
            .augmentations
            .iter()
            .map(|s| match self.cfg.mode {
                TrainMode::Supervised => Ok(0.0),
                TrainMode::Aug => schedule_probability(self.cfg.aug_max_probability, t, &self.cfg.aug_schedule()),
                TrainMode::Vortex => Ok(s.probability),
            })
            .collect()
    }

    fn batch(&self, epoch: usize, step_index: usize, step: &Step, probs: &[f64]) -> Result<Batch> {
        let t = epoch as f64;
        let per = self.cfg.batch_size / 2;
        let mut batch = Batch::default();
        for (j, &i) in step.supervised.iter().enumerate() {
            let ex = &self.data.supervised[i];
            let input = if self.cfg.mode == TrainMode::Aug {
                let id = SUPERVISED_STREAM + (step_index * per + j) as u64;
                let mut rng = self.aug_rng.stream(epoch as u64, id);
                let plan = AugmentationPlan::draw(&self.cfg.augmentations, probs, t, ex.op.dims(), &mut rng)?;
                plan.apply(ex)?
            } else {
                ex.undersampled()
            };
            let target = input.target.clone().expect("supervised examples carry references");
            batch.supervised.push(SupervisedItem { input, target });
        }
        if self.cfg.mode == TrainMode::Vortex && self.loss.lambda > 0.0 {
            for (j, &i) in step.unsupervised.iter().enumerate() {
                let ex = &self.data.unsupervised[i];
                let id = UNSUPERVISED_STREAM + (step_index * per + j) as u64;
                let mut rng = self.aug_rng.stream(epoch as u64, id);
                let plan = AugmentationPlan::draw(&self.cfg.augmentations, probs, t, ex.op.dims(), &mut rng)?;
                batch.unsupervised.push(UnsupervisedItem {
                    example: ex.clone(),
                    plan,
                });
            }
        }
        Ok(batch)
    }

    fn validate(&self, params: &ModelParameters) -> Result<(f64, f64)> {
        let none = PerturbationSpec::none();
        let per_scan = self
            .data
            .validation
            .par_iter()
            .map(|scan| evaluate_scan(params, scan, &none))
            .collect::<Result<Vec<_>>>()?;
        let rec = MetricsRecord::from_scans(none, per_scan);
        Ok((rec.cpsnr.mean, rec.ssim.mean))
    }

    fn epoch(
        &self,
        epoch: usize,
        params: &mut ModelParameters,
        adam: &mut AdamState,
        sampler: &BalancedSampler,
    ) -> Result<EpochLog> {
        let t = epoch as f64;
        let probs = self.probabilities(t)?;
        let steps = sampler.epoch(epoch as u64);
        let mut sums = LossBreakdown::default();
        let ntaps = match &self.loss.mode {
            ConsistencyMode::Latent { taps } if self.loss.lambda > 0.0 => taps.len(),
            _ => 0,
        };
        sums.per_tap = vec![0.0; ntaps];
        for (s, step) in steps.iter().enumerate() {
            let batch = self.batch(epoch, s, step, &probs)?;
            let (b, grads) = total_loss(params, &batch, &self.loss)?;
            adam_step(params.values_mut(), &grads, adam, &self.cfg.optimizer)?;
            sums.total += b.total;
            sums.supervised += b.supervised;
            sums.consistency += b.consistency;
            for (a, v) in sums.per_tap.iter_mut().zip(&b.per_tap) {
                *a += v;
            }
        }
        let n = steps.len().max(1) as f64;
        let (val_cpsnr, val_ssim) = self.validate(params)?;
        let per_tap = match &self.loss.mode {
            ConsistencyMode::Latent { taps } if ntaps > 0 => taps
                .iter()
                .zip(&sums.per_tap)
                .map(|(tap, l)| TapLog {
                    tap: tap.label(),
                    loss: l / n,
                    weight: self.loss.lambda / taps.len() as f64,
                })
                .collect(),
            _ => Vec::new(),
        };
        let augmentations = self
            .cfg
            .augmentations
            .iter()
            .zip(&probs)
            .map(|(s, &p)| {
                Ok(AugmentationLog {
                    kind: s.kind,
                    difficulty_hi: schedule_difficulty(&s.curriculum, s.range(), t)?,
                    probability: p,
                })
            })
            .collect::<Result<_>>()?;
        Ok(EpochLog {
            epoch,
            steps: steps.len(),
            loss_total: sums.total / n,
            loss_supervised: sums.supervised / n,
            loss_consistency: sums.consistency / n,
            lambda: self.loss.lambda,
            per_tap,
            augmentations,
            val_cpsnr,
            val_ssim,
        })
    }
}

fn read_log(path: &Path, epochs: usize) -> Result<Vec<EpochLog>> {
    let text = fs::read_to_string(path)?;
    let log: Vec<EpochLog> = text
        .lines()
        .take(epochs)
        .map(serde_json::from_str)
        .collect::<std::result::Result<_, _>>()?;
    if log.len() != epochs {
        return Err(crate::Error::CorruptCheckpoint(format!(
            "metrics log has {} epochs, training state has {epochs}",
            log.len()
        )));
    }
    Ok(log)
}

fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut buf = Vec::new();
    for e in log {
        serde_json::to_writer(&mut buf, e)?;
        buf.push(b'\n');
    }
    crate::io::write_atomic(path, &buf)
}

/// Trains a model and returns the final and best-by-validation-cPSNR parameters.
///
/// With an output directory, every epoch appends to `metrics.jsonl`, rewrites
/// the last checkpoint and the full-precision training state, and rewrites the
/// best checkpoint when validation cPSNR improves. Resuming continues from
/// the stored state and yields results bit-identical to an uninterrupted run.
pub fn train(
    model: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
    data: &TrainingData,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    model.validate()?;
    cfg.validate(model)?;
    data.validate()?;
    for ex in data.supervised.iter().chain(&data.unsupervised) {
        let (h, w) = ex.op.dims();
        model.check_dims(h, w)?;
    }
    let fp = fingerprint(model, cfg, seed)?;
    let sampler = BalancedSampler {
        supervised: data.supervised.len(),
        unsupervised: data.unsupervised.len(),
        per_side: cfg.batch_size / 2,
        seed,
    };
    let trainer = Trainer {
        cfg,
        data,
        aug_rng: AugmentationRng::new(seed),
        loss: cfg.loss_config(),
    };

    let mut params = ModelParameters::init(model, seed)?;
    let mut adam = AdamState::new(params.len());
    let mut best = params.clone();
    let mut best_epoch: Option<usize> = None;
    let mut best_cpsnr = f64::NEG_INFINITY;
    let mut log = Vec::new();

    let out = opts.out_dir.as_deref();
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let state_path = dir.join(STATE_FILE);
        if opts.resume && state_path.exists() {
            let st = state::load(&state_path)?;
            if st.header.fingerprint != fp {
                return Err(invalid!(
                    "{} was produced by a different configuration",
                    state_path.display()
                ));
            }
            params = ModelParameters::from_values(model, st.params)?;
            adam = st.adam;
            log = read_log(&dir.join(METRICS_FILE), st.header.epochs_done)?;
            best_epoch = st.header.best_epoch;
            best_cpsnr = st.header.best_val_cpsnr.unwrap_or(f64::NEG_INFINITY);
            best = match best_epoch {
                Some(_) => ModelParameters::from_values(model, read_best_values(dir, model)?)?,
                None => params.clone(),
            };
            log::info!("resuming after epoch {}", st.header.epochs_done);
            write_log(&dir.join(METRICS_FILE), &log)?;
        } else {
            fs::write(dir.join(METRICS_FILE), b"")?;
        }
    }

    let stop = opts.stop_after.unwrap_or(cfg.epochs).min(cfg.epochs);
    for epoch in log.len()..stop {
        let entry = trainer.epoch(epoch, &mut params, &mut adam, &sampler)?;
        log::info!(
            "epoch {epoch}: loss {:.5} (sup {:.5}, cons {:.5}) val cPSNR {:.3} dB SSIM {:.4}",
            entry.loss_total,
            entry.loss_supervised,
            entry.loss_consistency,
            entry.val_cpsnr,
            entry.val_ssim
        );
        let improved = entry.val_cpsnr > best_cpsnr || best_epoch.is_none();
        if improved {
            best_cpsnr = entry.val_cpsnr;
            best_epoch = Some(epoch);
            best = params.clone();
        }
        if let Some(dir) = out {
            let mut f = fs::OpenOptions::new().append(true).open(dir.join(METRICS_FILE))?;
            serde_json::to_writer(&mut f, &entry)?;
            f.write_all(b"\n")?;
            save_checkpoint(&params, &dir.join(LAST_CHECKPOINT))?;
            if improved {
                save_checkpoint(&best, &dir.join(BEST_CHECKPOINT))?;
                crate::io::write_atomic(&dir.join(BEST_STATE_FILE), &f64_bytes(best.values()))?;
            }
            state::save(
                &TrainState {
                    header: StateHeader {
                        fingerprint: fp,
                        epochs_done: epoch + 1,
                        best_epoch,
                        best_val_cpsnr: best_epoch.map(|_| best_cpsnr),
                        adam_step: adam.step,
                        len: params.len(),
                    },
                    params: params.values().to_vec(),
                    adam: adam.clone(),
                },
                &dir.join(STATE_FILE),
            )?;
        }
        log.push(entry);
    }
    Ok(TrainOutcome {
        params,
        best,
        best_epoch: best_epoch.unwrap_or(0),
        log,
    })
}

/// Full-precision copy of the best parameters, kept for resumption.
const BEST_STATE_FILE: &str = "best_params.f64";

fn f64_bytes(values: &[f64]) -> Vec<u8> {
    let mut buf: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

fn read_best_values(dir: &Path, model: &ModelConfig) -> Result<Vec<f64>> {
    let bytes = fs::read(dir.join(BEST_STATE_FILE))?;
    let expected = ModelParameters::zeros(model)?.len();
    if bytes.len() != 8 * expected + 4 {
        return Err(crate::Error::CorruptCheckpoint("best parameter file has the wrong size".into()));
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
        return Err(crate::Error::CorruptCheckpoint("best parameter file checksum mismatch".into()));
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}
