//! Image-quality metrics and the seeded out-of-distribution evaluation harness.

pub mod metrics;

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_motion, apply_noise, Example};
use crate::data::ScanExamples;
use crate::error::{invalid, Result};
use crate::model::{model_forward, ModelParameters};
use crate::numerics::{ComplexTensor, C64};
use crate::rng::{domain, keyed};
pub use metrics::{cpsnr, ssim, ssim_stack};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    None,
    Noise,
    Motion,
}

/// A test-time corruption: relative noise level `σ` or motion severity `α`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub label: String,
    pub kind: PerturbationKind,
    #[serde(default)]
    pub level: f64,
    #[serde(default)]
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn new(label: &str, kind: PerturbationKind, level: f64) -> Self {
        Self {
            label: label.to_string(),
            kind,
            level,
            seed: 0,
        }
    }

    pub fn none() -> Self {
        Self::new("None", PerturbationKind::None, 0.0)
    }

    /// None, light/heavy noise (σ = 0.2, 0.4) and light/heavy motion (α = 0.2, 0.4).
    pub fn standard_set(seed: u64) -> Vec<Self> {
        [
            Self::none(),
            Self::new("LN", PerturbationKind::Noise, 0.2),
            Self::new("HN", PerturbationKind::Noise, 0.4),
            Self::new("LM", PerturbationKind::Motion, 0.2),
            Self::new("HM", PerturbationKind::Motion, 0.4),
        ]
        .into_iter()
        .map(|s| s.with_seed(seed))
        .collect()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.level >= 0.0) || !self.level.is_finite() {
            return Err(invalid!("perturbation level must be finite and >= 0"));
        }
        if self.kind == PerturbationKind::None && self.level != 0.0 {
            return Err(invalid!("perturbation 'none' must have level 0"));
        }
        Ok(())
    }
}

/// Undersamples every slice of a scan and applies the perturbation.
///
/// Draws come from one stream keyed by `(spec.seed, scan_id)`, consumed slice
/// by slice, so a scan always receives the same corruption.
pub fn perturb_test_scan(scan: &ScanExamples, spec: &PerturbationSpec) -> Result<Vec<Example>> {
    spec.validate()?;
    let mut rng = keyed(&[spec.seed, domain::PERTURB, scan.scan_id]);
    scan.slices
        .iter()
        .map(|ex| {
            let mut out = ex.undersampled();
            out.kspace = match spec.kind {
                PerturbationKind::None => out.kspace,
                PerturbationKind::Noise => apply_noise(&out.kspace, out.op.mask(), spec.level, &mut rng)?,
                PerturbationKind::Motion => apply_motion(&out.kspace, spec.level, &mut rng)?,
            };
            Ok(out)
        })
        .collect()
}

/// Network output for the zero-filled reconstruction of an example.
pub fn reconstruct(params: &ModelParameters, ex: &Example) -> Result<ComplexTensor> {
    Ok(model_forward(params, &ex.zero_filled()?)?.0)
}

/// Serializes `+inf` cPSNR values as the string `"inf"`.
pub(crate) mod sentinel {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            Repr::Text("inf".into()).serialize(s)
        } else {
            Repr::Number(*v).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad cPSNR value {t:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanMetrics {
    pub scan_id: u64,
    #[serde(with = "sentinel")]
    pub cpsnr_db: f64,
    pub ssim: f64,
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(with = "sentinel")]
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                count: 0,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            count: values.len(),
        }
    }
}

/// Metrics for one perturbation over all test scans.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub perturbation: PerturbationSpec,
    pub per_scan: Vec<ScanMetrics>,
    /// Over finite per-scan values; infinite ones are counted separately.
    pub cpsnr: Aggregate,
    pub infinite_cpsnr: usize,
    pub ssim: Aggregate,
}

impl MetricsRecord {
    pub fn from_scans(perturbation: PerturbationSpec, per_scan: Vec<ScanMetrics>) -> Self {
        let finite: Vec<f64> = per_scan.iter().map(|m| m.cpsnr_db).filter(|v| v.is_finite()).collect();
        let infinite_cpsnr = per_scan.len() - finite.len();
        let mut cpsnr = Aggregate::of(&finite);
        if finite.is_empty() && infinite_cpsnr > 0 {
            cpsnr = Aggregate {
                mean: f64::INFINITY,
                std: 0.0,
                count: 0,
            };
        }
        if infinite_cpsnr > 0 {
            log::warn!(
                "{}: {infinite_cpsnr} scan(s) reconstructed exactly; excluded from the cPSNR mean",
                perturbation.label
            );
        }
        let ssim = Aggregate::of(&per_scan.iter().map(|m| m.ssim).collect::<Vec<_>>());
        Self {
            perturbation,
            per_scan,
            cpsnr,
            infinite_cpsnr,
            ssim,
        }
    }
}

/// Volume metrics of one scan: cPSNR on the complex slice stack and SSIM on
/// the magnitude stack.
pub fn scan_metrics(scan_id: u64, preds: &[ComplexTensor], refs: &[ComplexTensor]) -> Result<ScanMetrics> {
    if preds.len() != refs.len() || refs.is_empty() {
        return Err(invalid!("scan {scan_id}: need one prediction per reference slice"));
    }
    let (h, w) = refs[0].dims2()?;
    let mut p: Vec<C64> = Vec::with_capacity(refs.len() * h * w);
    let mut r: Vec<C64> = Vec::with_capacity(refs.len() * h * w);
    for (a, b) in preds.iter().zip(refs) {
        if a.shape() != [h, w] || b.shape() != [h, w] {
            return Err(invalid!("scan {scan_id}: slice shapes differ"));
        }
        p.extend_from_slice(a.data());
        r.extend_from_slice(b.data());
    }
    let mp: Vec<f64> = p.iter().map(|v| v.norm()).collect();
    let mr: Vec<f64> = r.iter().map(|v| v.norm()).collect();
    Ok(ScanMetrics {
        scan_id,
        cpsnr_db: cpsnr(&p, &r)?,
        ssim: ssim_stack(&mp, &mr, refs.len(), h, w)?,
    })
}

fn references(scan: &ScanExamples) -> Result<Vec<ComplexTensor>> {
    scan.slices
        .iter()
        .map(|ex| {
            ex.target
                .clone()
                .ok_or_else(|| invalid!("scan {} has no reference images", scan.scan_id))
        })
        .collect()
}

/// Clean-input metrics for one scan.
pub fn evaluate_scan(params: &ModelParameters, scan: &ScanExamples, spec: &PerturbationSpec) -> Result<ScanMetrics> {
    let refs = references(scan)?;
    let inputs = perturb_test_scan(scan, spec)?;
    let preds = inputs.iter().map(|ex| reconstruct(params, ex)).collect::<Result<Vec<_>>>()?;
    scan_metrics(scan.scan_id, &preds, &refs)
}

/// One record per perturbation, scans evaluated in parallel and reported in
/// input order.
pub fn evaluate_model(
    params: &ModelParameters,
    scans: &[ScanExamples],
    specs: &[PerturbationSpec],
) -> Result<Vec<MetricsRecord>> {
    if scans.is_empty() {
        return Err(invalid!("evaluation needs at least one scan"));
    }
    for scan in scans {
        for ex in &scan.slices {
            let (h, w) = ex.op.dims();
            params.config().check_dims(h, w).map_err(|e| {
                invalid!("checkpoint does not fit scan {}: {e}", scan.scan_id)
            })?;
        }
    }
    specs
        .iter()
        .map(|spec| {
            let per_scan = scans
                .par_iter()
                .map(|scan| evaluate_scan(params, scan, spec))
                .collect::<Result<Vec<_>>>()?;
            Ok(MetricsRecord::from_scans(spec.clone(), per_scan))
        })
        .collect()
}

/// Results of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelResults {
    pub model: String,
    pub records: Vec<MetricsRecord>,
}

fn fmt_value(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v:.2}")
    }
}

/// Models as rows and perturbations as columns; each cell is
/// `SSIM (x100) / cPSNR (dB)` as mean ± std over scans.
pub fn render_table(results: &[ModelResults]) -> String {
    let mut labels: Vec<&str> = Vec::new();
    for r in results {
        for rec in &r.records {
            if !labels.contains(&rec.perturbation.label.as_str()) {
                labels.push(&rec.perturbation.label);
            }
        }
    }
    let cell = |rec: Option<&MetricsRecord>| match rec {
        Some(m) => format!(
            "{}±{} / {}±{}",
            fmt_value(100.0 * m.ssim.mean),
            fmt_value(100.0 * m.ssim.std),
            fmt_value(m.cpsnr.mean),
            fmt_value(m.cpsnr.std)
        ),
        None => "-".to_string(),
    };
    let mut rows: Vec<Vec<String>> = vec![std::iter::once("Model".to_string())
        .chain(labels.iter().map(|l| l.to_string()))
        .collect()];
    for r in results {
        let mut row = vec![r.model.clone()];
        for l in &labels {
            row.push(cell(r.records.iter().find(|m| m.perturbation.label == *l)));
        }
        rows.push(row);
    }
    let ncols = rows[0].len();
    let widths: Vec<usize> = (0..ncols)
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let _ = writeln!(out, "SSIM (x100) / cPSNR (dB), mean ± std over test scans");
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (v, &w))| {
                let pad = w - v.chars().count();
                if c == 0 {
                    format!("{v}{}", " ".repeat(pad))
                } else {
                    format!("{}{v}", " ".repeat(pad))
                }
            })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (ncols - 1);
            let _ = writeln!(out, "{}", "-".repeat(total));
        }
    }
    out
}
