//! End-to-end experiment runs driven by one JSON configuration.
//!
//! Layout of a run directory:
//!
//! ```text
//! <output_dir>/
//!   config.resolved.json   every setting, defaults filled in
//!   version.txt
//!   data/                  manifest.json + scan_*.vtxd (unless dataset_dir is set)
//!   train/                 metrics.jsonl, checkpoint_{last,best}.vtxm, train_state.bin
//!   eval/results.json      per-perturbation metrics
//!   eval/table.txt         models x perturbations
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentationPlan, TransformSpec};
use crate::data::{build_dataset, read_dataset, DataConfig, DatasetManifest, Role};
use crate::error::{invalid, Result};
use crate::evaluate::{evaluate_model, render_table, MetricsRecord, ModelResults, PerturbationSpec};
use crate::model::{load_checkpoint, normalization_scale, ModelConfig, ModelParameters};
use crate::rng::AugmentationRng;
use crate::training::{train, TrainConfig, TrainMode, TrainOptions, TrainOutcome, TrainingData, BEST_CHECKPOINT};

pub const RESOLVED_CONFIG: &str = "config.resolved.json";
pub const VERSION_FILE: &str = "version.txt";
pub const RESULTS_FILE: &str = "results.json";
pub const TABLE_FILE: &str = "table.txt";
pub const WORKERS_ENV: &str = "VORTEX_NUM_WORKERS";

/// Worker count: available parallelism, capped by `VORTEX_NUM_WORKERS` when set.
pub fn worker_count() -> Result<usize> {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(WORKERS_ENV) {
        Ok(v) => {
            let cap: usize = v
                .trim()
                .parse()
                .map_err(|_| invalid!("{WORKERS_ENV}={v:?} is not a positive integer"))?;
            if cap == 0 {
                return Err(invalid!("{WORKERS_ENV} must be at least 1"));
            }
            Ok(cap.min(available))
        }
        Err(_) => Ok(available),
    }
}

/// Sizes the global rayon pool; a pool built earlier in the process is kept.
pub fn init_workers() -> Result<usize> {
    let n = worker_count()?;
    if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
        log::debug!("global worker pool already initialised");
    }
    Ok(rayon::current_num_threads())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub specs: Vec<PerturbationSpec>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            specs: PerturbationSpec::standard_set(0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Row label in result tables; derived from the training mode when absent.
    pub name: Option<String>,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Existing or target dataset directory; `<output_dir>/data` when absent.
    pub dataset_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: None,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            dataset_dir: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        let (h, w) = self.data.padded_dims();
        self.model.check_dims(h, w)?;
        self.train.validate(&self.model)?;
        for s in &self.eval.specs {
            s.validate()?;
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        let kinds = || {
            self.train
                .augmentations
                .iter()
                .map(|s| format!("{:?}", s.kind))
                .collect::<Vec<_>>()
                .join("+")
        };
        match self.train.mode {
            TrainMode::Supervised => "Supervised".to_string(),
            TrainMode::Aug => format!("Aug ({})", kinds()),
            TrainMode::Vortex => format!("VORTEX ({})", kinds()),
        }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.dataset_dir.clone().unwrap_or_else(|| self.output_dir.join("data"))
    }

    pub fn train_dir(&self) -> PathBuf {
        self.output_dir.join("train")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.output_dir.join("eval")
    }

    /// Perturbation specs with the run seed folded into each.
    pub fn eval_specs(&self) -> Vec<PerturbationSpec> {
        self.eval
            .specs
            .iter()
            .map(|s| s.clone().with_seed(crate::rng::hash64(&[self.seed, s.seed])))
            .collect()
    }
}

pub fn version_string() -> String {
    format!("vortex-core {}", env!("CARGO_PKG_VERSION"))
}

/// Writes the resolved configuration and version into the run directory.
pub fn write_run_metadata(cfg: &ExperimentConfig, version: &str) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir)?;
    let mut json = serde_json::to_vec_pretty(cfg)?;
    json.push(b'\n');
    crate::io::write_atomic(&cfg.output_dir.join(RESOLVED_CONFIG), &json)?;
    crate::io::write_atomic(&cfg.output_dir.join(VERSION_FILE), format!("{version}\n").as_bytes())
}

/// Builds the dataset unless a manifest already exists.
pub fn ensure_dataset(cfg: &ExperimentConfig) -> Result<DatasetManifest> {
    let dir = cfg.dataset_dir();
    if dir.join(crate::data::MANIFEST_FILE).exists() {
        let ds = read_dataset(&dir)?;
        return Ok(ds.manifest().clone());
    }
    build_dataset(&cfg.data, cfg.seed, &dir)
}

pub fn generate_data(cfg: &ExperimentConfig) -> Result<DatasetManifest> {
    build_dataset(&cfg.data, cfg.seed, &cfg.dataset_dir())
}

pub fn run_train(cfg: &ExperimentConfig, resume: bool) -> Result<TrainOutcome> {
    let ds = read_dataset(&cfg.dataset_dir())?;
    let data = TrainingData::from_dataset(&ds)?;
    train(
        &cfg.model,
        &cfg.train,
        cfg.seed,
        &data,
        &TrainOptions {
            out_dir: Some(cfg.train_dir()),
            resume,
            stop_after: None,
        },
    )
}

/// Evaluates a checkpoint (the run's best by default) on the test scans.
pub fn run_evaluate(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<ModelResults> {
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.train_dir().join(BEST_CHECKPOINT));
    let params = load_checkpoint(&path)?;
    if params.config() != &cfg.model {
        return Err(invalid!(
            "checkpoint {} was trained with a different model configuration",
            path.display()
        ));
    }
    evaluate_params(cfg, &params)
}

pub fn evaluate_params(cfg: &ExperimentConfig, params: &ModelParameters) -> Result<ModelResults> {
    let ds = read_dataset(&cfg.dataset_dir())?;
    let scans = ds.load_examples(Role::Test)?;
    let records: Vec<MetricsRecord> = evaluate_model(params, &scans, &cfg.eval_specs())?;
    let results = ModelResults {
        model: cfg.label(),
        records,
    };
    let dir = cfg.eval_dir();
    fs::create_dir_all(&dir)?;
    let mut json = serde_json::to_vec_pretty(&results)?;
    json.push(b'\n');
    crate::io::write_atomic(&dir.join(RESULTS_FILE), &json)?;
    crate::io::write_atomic(&dir.join(TABLE_FILE), render_table(std::slice::from_ref(&results)).as_bytes())?;
    Ok(results)
}

/// Reads `eval/results.json` from each run directory and renders one table.
pub fn report(run_dirs: &[PathBuf]) -> Result<(Vec<ModelResults>, String)> {
    if run_dirs.is_empty() {
        return Err(invalid!("report needs at least one run directory"));
    }
    let results = run_dirs
        .iter()
        .map(|d| {
            let path = d.join("eval").join(RESULTS_FILE);
            let text = fs::read_to_string(&path)
                .map_err(|e| invalid!("cannot read {} ({e}); run `vortex evaluate` first", path.display()))?;
            Ok(serde_json::from_str(&text)?)
        })
        .collect::<Result<Vec<ModelResults>>>()?;
    let table = render_table(&results);
    Ok((results, table))
}

/// Magnitude images for previewing one augmentation on one slice.
#[derive(Clone, Debug)]
pub struct Preview {
    pub height: usize,
    pub width: usize,
    pub clean: Vec<f64>,
    pub augmented: Vec<f64>,
    /// `|augmented − clean|` of the complex images.
    pub difference: Vec<f64>,
    /// Display window upper bound: 99th percentile of the clean magnitude.
    pub window: f64,
}

/// Zero-filled images of a slice before and after augmentation at curriculum time `t`.
///
/// Each spec is applied with its own probability; an empty list is the identity.
pub fn augment_preview(
    cfg: &ExperimentConfig,
    scan_id: u64,
    slice: usize,
    specs: &[TransformSpec],
    t: f64,
) -> Result<Preview> {
    let ds = read_dataset(&cfg.dataset_dir())?;
    let record = ds.load_scan(scan_id)?;
    let examples = record.examples()?;
    let ex = examples
        .get(slice)
        .ok_or_else(|| invalid!("scan {scan_id} has {} slices, asked for {slice}", examples.len()))?
        .undersampled();
    let probs: Vec<f64> = specs.iter().map(|s| s.probability).collect();
    let mut rng = AugmentationRng::new(cfg.seed).stream(0, (scan_id << 20) | slice as u64);
    let plan = AugmentationPlan::draw(specs, &probs, t, ex.op.dims(), &mut rng)?;
    let clean = ex.zero_filled()?;
    let augmented = plan.apply(&ex)?.zero_filled()?;
    let (height, width) = ex.op.dims();
    Ok(Preview {
        height,
        width,
        window: normalization_scale(&clean),
        clean: clean.data().iter().map(|z| z.norm()).collect(),
        augmented: augmented.data().iter().map(|z| z.norm()).collect(),
        difference: augmented
            .data()
            .iter()
            .zip(clean.data())
            .map(|(a, c)| (a - c).norm())
            .collect(),
    })
}
