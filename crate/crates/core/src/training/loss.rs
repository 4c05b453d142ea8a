//! Supervised and consistency objectives with their parameter gradients.

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentationPlan, Example};
use crate::error::{invalid, Result};
use crate::model::layers::Feature;
use crate::model::{model_backward_into, model_forward, Cotangent, LatentTap, ModelParameters};
use crate::numerics::{ComplexTensor, C64};

/// Where clean and augmented reconstructions are compared.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConsistencyMode {
    Pixel,
    /// Mean l1 over each tap, weighted by `1 / taps.len()`.
    Latent { taps: Vec<LatentTap> },
}

impl Default for ConsistencyMode {
    fn default() -> Self {
        ConsistencyMode::Pixel
    }
}

impl ConsistencyMode {
    pub fn validate(&self, model: &crate::model::ModelConfig) -> Result<()> {
        if let ConsistencyMode::Latent { taps } = self {
            if taps.is_empty() {
                return Err(invalid!("latent consistency needs at least one tap"));
            }
            for (i, t) in taps.iter().enumerate() {
                model.validate_tap(*t)?;
                if taps[..i].contains(t) {
                    return Err(invalid!("latent tap {} listed twice", t.label()));
                }
            }
        }
        Ok(())
    }
}

fn check_same(a: &ComplexTensor, b: &ComplexTensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(invalid!("loss inputs differ in shape: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// Mean complex modulus of `pred - target`.
pub fn supervised_loss(pred: &ComplexTensor, target: &ComplexTensor) -> Result<f64> {
    check_same(pred, target)?;
    let n = pred.len().max(1) as f64;
    Ok(pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).norm()).sum::<f64>() / n)
}

/// Mean complex l1 of `a - b` and its gradient with respect to `a`.
///
/// The subgradient at a zero difference is taken as zero.
pub fn l1_with_grad(a: &ComplexTensor, b: &ComplexTensor) -> Result<(f64, ComplexTensor)> {
    check_same(a, b)?;
    let n = a.len().max(1) as f64;
    let mut loss = 0.0;
    let grad: Vec<C64> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x - y;
            let m = d.norm();
            loss += m;
            if m > 0.0 {
                d / (m * n)
            } else {
                C64::new(0.0, 0.0)
            }
        })
        .collect();
    Ok((loss / n, ComplexTensor::new(a.shape().to_vec(), grad)?))
}

fn real_l1_with_grad(a: &[&Feature], b: &[&Feature]) -> (f64, Vec<Feature>) {
    let n: usize = a.iter().map(|f| f.data.len()).sum();
    let n = n.max(1) as f64;
    let mut loss = 0.0;
    let grads = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let data = x
                .data
                .iter()
                .zip(&y.data)
                .map(|(p, q)| {
                    let d = p - q;
                    loss += d.abs();
                    if d > 0.0 {
                        1.0 / n
                    } else if d < 0.0 {
                        -1.0 / n
                    } else {
                        0.0
                    }
                })
                .collect();
            Feature {
                data,
                ..(**x).clone()
            }
        })
        .collect();
    (loss / n, grads)
}

fn negate(f: &Feature) -> Feature {
    Feature {
        data: f.data.iter().map(|v| -v).collect(),
        ..f.clone()
    }
}

/// Supervised l1 of one item, accumulating `weight * d loss / d params`.
pub fn supervised_term(
    params: &ModelParameters,
    input: &Example,
    target: &ComplexTensor,
    weight: f64,
    grads: Option<&mut [f64]>,
) -> Result<f64> {
    let (pred, trace) = model_forward(params, &input.zero_filled()?)?;
    let (loss, g) = l1_with_grad(&pred, target)?;
    if let Some(grads) = grads {
        model_backward_into(params, &trace, &Cotangent::output(g.scaled(C64::new(weight, 0.0))), grads)?;
    }
    Ok(loss)
}

/// Consistency loss of one unsupervised example under a drawn augmentation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConsistencyValue {
    /// Weighted sum over taps in latent mode; the pixel loss otherwise.
    pub loss: f64,
    /// Unweighted per-tap losses, in configuration order (latent mode only).
    pub per_tap: Vec<f64>,
}

/// Invariant branch: `|f(y) - f(g(y))|`. Equivariant branch:
/// `|G_E(f(y)) - f(g(y))|` with `G_E` the spatial part of the plan.
/// Gradients flow through both reconstructions.
pub fn consistency_term(
    params: &ModelParameters,
    example: &Example,
    plan: &AugmentationPlan,
    mode: &ConsistencyMode,
    weight: f64,
    grads: Option<&mut [f64]>,
) -> Result<ConsistencyValue> {
    mode.validate(params.config())?;
    let ntaps = match mode {
        ConsistencyMode::Pixel => 0,
        ConsistencyMode::Latent { taps } => taps.len(),
    };
    if let ConsistencyMode::Latent { .. } = mode {
        if plan.has_equivariant() {
            return Err(invalid!(
                "equivariant transforms cannot be used with latent consistency"
            ));
        }
    }
    if plan.is_identity() {
        return Ok(ConsistencyValue {
            loss: 0.0,
            per_tap: vec![0.0; ntaps],
        });
    }
    let clean = example.undersampled();
    let augmented = plan.apply(&clean)?;
    let (f0, t0) = model_forward(params, &clean.zero_filled()?)?;
    let (f1, t1) = model_forward(params, &augmented.zero_filled()?)?;
    match mode {
        ConsistencyMode::Pixel => {
            let reference = if plan.has_equivariant() { plan.transform_image(&f0)? } else { f0 };
            let (loss, u) = l1_with_grad(&reference, &f1)?;
            if let Some(grads) = grads {
                let u = u.scaled(C64::new(weight, 0.0));
                let g0 = if plan.has_equivariant() { plan.transform_image_adjoint(&u)? } else { u.clone() };
                model_backward_into(params, &t0, &Cotangent::output(g0), grads)?;
                model_backward_into(params, &t1, &Cotangent::output(u.scaled(C64::new(-1.0, 0.0))), grads)?;
            }
            Ok(ConsistencyValue {
                loss,
                per_tap: Vec::new(),
            })
        }
        ConsistencyMode::Latent { taps } => {
            let tap_weight = 1.0 / taps.len() as f64;
            let mut total = 0.0;
            let mut per_tap = Vec::with_capacity(taps.len());
            let mut cot0 = Cotangent::default();
            let mut cot1 = Cotangent::default();
            for &tap in taps {
                let z0 = t0.tap(tap)?;
                let z1 = t1.tap(tap)?;
                let (loss, g) = real_l1_with_grad(&z0, &z1);
                total += tap_weight * loss;
                per_tap.push(loss);
                let scale = weight * tap_weight;
                let g: Vec<Feature> = g
                    .into_iter()
                    .map(|f| Feature {
                        data: f.data.iter().map(|v| v * scale).collect(),
                        ..f
                    })
                    .collect();
                cot1.taps.push((tap, g.iter().map(negate).collect()));
                cot0.taps.push((tap, g));
            }
            if let Some(grads) = grads {
                model_backward_into(params, &t0, &cot0, grads)?;
                model_backward_into(params, &t1, &cot1, grads)?;
            }
            Ok(ConsistencyValue {
                loss: total,
                per_tap,
            })
        }
    }
}
