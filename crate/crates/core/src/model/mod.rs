//! Small U-Net reconstruction network with hand-written backpropagation.
//!
//! Complex images cross the network boundary as two real channels. Each input
//! is divided by its own 99th-percentile magnitude and the output is scaled
//! back, so the network sees unit-range data regardless of acquisition gain.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{ComplexTensor, C64};
use crate::rng::{domain, keyed};
use layers::{
    avg_pool, avg_pool_backward, concat, conv_backward, conv_forward, leaky_relu,
    leaky_relu_backward, split, upsample, upsample_backward, ConvShape, Feature,
};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use gradcheck::{check_gradient, GradientCheckConfig, GradientFailure, GradientReport};

/// Network hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of 2x2 pooling stages.
    pub depth: usize,
    /// Channels at full resolution; level `l` has `base_channels << l`.
    pub base_channels: usize,
    /// Adds the zero-filled input to the output.
    pub residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            base_channels: 8,
            residual: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(invalid!("model depth must be at least 1"));
        }
        if self.base_channels == 0 {
            return Err(invalid!("base_channels must be at least 1"));
        }
        if self.depth > 16 || self.base_channels.checked_shl(self.depth as u32).is_none() {
            return Err(invalid!("model depth {} is too large", self.depth));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial dimensions must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        let m = self.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(invalid!(
                "image {h}x{w} is not divisible by 2^depth = {m}"
            ));
        }
        Ok(())
    }

    pub fn validate_tap(&self, tap: LatentTap) -> Result<()> {
        match tap {
            LatentTap::Bottleneck => Ok(()),
            LatentTap::Level(k) if k >= 1 && k < self.depth => Ok(()),
            LatentTap::Level(k) => Err(invalid!(
                "latent tap level {k} outside 1..{} (use the bottleneck tap for level {})",
                self.depth,
                self.depth
            )),
        }
    }
}

/// Latent feature location used for consistency in latent mode.
///
/// `Level(k)` covers the last encoder activation at resolution `H/2^k` and the
/// decoder's upsampling convolution at the same resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentTap {
    Level(usize),
    Bottleneck,
}

impl LatentTap {
    pub fn label(&self) -> String {
        match self {
            LatentTap::Level(k) => format!("level{k}"),
            LatentTap::Bottleneck => "bottleneck".to_string(),
        }
    }
}

/// One named block of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Convolution geometry for every layer, in parameter order.
#[derive(Clone, Debug)]
struct Architecture {
    encoder: Vec<[ConvShape; 2]>,
    bottleneck: [ConvShape; 2],
    /// Indexed by level; `decoder[l]` upsamples from level `l + 1`.
    decoder: Vec<DecoderShape>,
    head: ConvShape,
    layout: Vec<LayoutEntry>,
    len: usize,
}

#[derive(Clone, Debug)]
struct DecoderShape {
    up: ConvShape,
    convs: [ConvShape; 2],
}

struct LayoutBuilder {
    layout: Vec<LayoutEntry>,
    len: usize,
}

impl LayoutBuilder {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize) -> ConvShape {
        let weight = self.len;
        self.layout.push(LayoutEntry {
            name: format!("{name}.weight"),
            offset: weight,
            shape: vec![cout, cin, kernel, kernel],
        });
        self.len += cout * cin * kernel * kernel;
        let bias = self.len;
        self.layout.push(LayoutEntry {
            name: format!("{name}.bias"),
            offset: bias,
            shape: vec![cout],
        });
        self.len += cout;
        ConvShape {
            cin,
            cout,
            kernel,
            weight,
            bias,
        }
    }
}

impl Architecture {
    fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.depth;
        let mut b = LayoutBuilder {
            layout: Vec::new(),
            len: 0,
        };
        let mut encoder = Vec::with_capacity(d);
        for l in 0..d {
            let cin = if l == 0 { 2 } else { cfg.channels(l - 1) };
            let c = cfg.channels(l);
            encoder.push([
                b.conv(&format!("enc{l}.conv1"), cin, c, 3),
                b.conv(&format!("enc{l}.conv2"), c, c, 3),
            ]);
        }
        let bottleneck = [
            b.conv("bottleneck.conv1", cfg.channels(d - 1), cfg.channels(d), 3),
            b.conv("bottleneck.conv2", cfg.channels(d), cfg.channels(d), 3),
        ];
        let mut decoder: Vec<Option<DecoderShape>> = vec![None; d];
        for l in (0..d).rev() {
            let c = cfg.channels(l);
            decoder[l] = Some(DecoderShape {
                up: b.conv(&format!("dec{l}.up"), cfg.channels(l + 1), c, 3),
                convs: [
                    b.conv(&format!("dec{l}.conv1"), 2 * c, c, 3),
                    b.conv(&format!("dec{l}.conv2"), c, c, 3),
                ],
            });
        }
        let head = b.conv("head", cfg.channels(0), 2, 1);
        Self {
            encoder,
            bottleneck,
            decoder: decoder.into_iter().map(|s| s.expect("every level built")).collect(),
            head,
            layout: b.layout,
            len: b.len,
        }
    }

    fn convs(&self) -> impl Iterator<Item = &ConvShape> {
        self.encoder
            .iter()
            .flat_map(|e| e.iter())
            .chain(self.bottleneck.iter())
            .chain(self.decoder.iter().flat_map(|d| std::iter::once(&d.up).chain(d.convs.iter())))
            .chain(std::iter::once(&self.head))
    }
}

/// Flat parameter vector plus the configuration that gives it meaning.
#[derive(Clone, Debug)]
pub struct ModelParameters {
    config: ModelConfig,
    arch: Architecture,
    values: Vec<f64>,
}

impl PartialEq for ModelParameters {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.values == other.values
    }
}

impl ModelParameters {
    /// All-zero parameters. With `residual` set this is the identity map.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let arch = Architecture::new(config);
        let values = vec![0.0; arch.len];
        Ok(Self {
            config: config.clone(),
            arch,
            values,
        })
    }

    /// Uniform fan-in initialization with zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = keyed(&[seed, domain::INIT]);
        let head_weight = p.arch.head.weight;
        let shapes: Vec<ConvShape> = p.arch.convs().cloned().collect();
        for s in shapes {
            let gain: f64 = if s.weight == head_weight { 3.0 } else { 6.0 };
            let bound = (gain / s.fan_in() as f64).sqrt();
            for v in &mut p.values[s.weight..s.weight + s.weight_len()] {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(p)
    }

    pub fn from_values(config: &ModelConfig, values: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        if values.len() != p.values.len() {
            return Err(invalid!(
                "parameter vector has {} entries, configuration needs {}",
                values.len(),
                p.values.len()
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(crate::Error::NonFinite(format!("parameter {i} is {}", values[i])));
        }
        p.values = values;
        Ok(p)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &[LayoutEntry] {
        &self.arch.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.values.len()]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn head_shape(&self) -> &ConvShape {
        &self.arch.head
    }

    /// Zeroes the head so the network output is bias-only.
    pub fn zero_head_weights(&mut self) {
        let h = self.head_shape().clone();
        self.values[h.weight..h.weight + h.weight_len()].fill(0.0);
    }
}

#[derive(Clone, Debug)]
struct ConvRecord {
    input: Feature,
    pre: Feature,
    post: Feature,
}

#[derive(Clone, Debug)]
struct DecoderRecord {
    up: ConvRecord,
    convs: [ConvRecord; 2],
}

/// Cached activations from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    config: ModelConfig,
    param_count: usize,
    dims: (usize, usize),
    scale: f64,
    encoder: Vec<[ConvRecord; 2]>,
    bottleneck: [ConvRecord; 2],
    decoder: Vec<DecoderRecord>,
    head_input: Feature,
}

impl ForwardTrace {
    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    /// Input normalization divisor.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Tensors exposed at a latent tap.
    pub fn tap(&self, tap: LatentTap) -> Result<Vec<&Feature>> {
        self.config.validate_tap(tap)?;
        Ok(match tap {
            LatentTap::Bottleneck => vec![&self.bottleneck[1].post],
            LatentTap::Level(k) => vec![&self.encoder[k][1].post, &self.decoder[k].up.post],
        })
    }
}

/// Gradient of a scalar loss with respect to the network output and,
/// optionally, to tapped latents.
#[derive(Clone, Debug, Default)]
pub struct Cotangent {
    /// `re` and `im` hold the partials with respect to the real and imaginary
    /// parts of each output pixel.
    pub output: Option<ComplexTensor>,
    pub taps: Vec<(LatentTap, Vec<Feature>)>,
}

impl Cotangent {
    pub fn output(grad: ComplexTensor) -> Self {
        Self {
            output: Some(grad),
            taps: Vec::new(),
        }
    }
}

/// 99th-percentile magnitude by nearest rank; 1 for an all-zero image.
pub fn normalization_scale(x: &ComplexTensor) -> f64 {
    let mut mags = x.magnitude();
    if mags.is_empty() {
        return 1.0;
    }
    let rank = ((0.99 * mags.len() as f64).ceil() as usize).clamp(1, mags.len());
    let (_, v, _) = mags.select_nth_unstable_by(rank - 1, |a, b| a.total_cmp(b));
    let v = *v;
    if v > 0.0 && v.is_finite() {
        v
    } else {
        1.0
    }
}

fn conv_act(params: &[f64], s: &ConvShape, input: Feature) -> ConvRecord {
    let pre = conv_forward(params, s, &input);
    let post = leaky_relu(&pre);
    ConvRecord { input, pre, post }
}

fn conv_act_backward(
    params: &[f64],
    s: &ConvShape,
    rec: &ConvRecord,
    mut grad: Feature,
    grads: &mut [f64],
    need_input: bool,
) -> Option<Feature> {
    leaky_relu_backward(&rec.pre, &mut grad);
    conv_backward(params, s, &rec.input, &grad, grads, need_input)
}

/// Reconstructs an image and records the activations needed for backprop.
pub fn model_forward(
    params: &ModelParameters,
    x: &ComplexTensor,
) -> Result<(ComplexTensor, ForwardTrace)> {
    let (h, w) = x.dims2()?;
    let cfg = &params.config;
    cfg.check_dims(h, w)?;
    let arch = &params.arch;
    let p = &params.values;
    let scale = normalization_scale(x);

    let n = h * w;
    let mut input = Feature::zeros(2, h, w);
    for (i, v) in x.data().iter().enumerate() {
        input.data[i] = v.re / scale;
        input.data[n + i] = v.im / scale;
    }

    let mut encoder = Vec::with_capacity(cfg.depth);
    let mut cur = input;
    for shapes in &arch.encoder {
        let a = conv_act(p, &shapes[0], cur);
        let b = conv_act(p, &shapes[1], a.post.clone());
        cur = avg_pool(&b.post);
        encoder.push([a, b]);
    }
    let b1 = conv_act(p, &arch.bottleneck[0], cur);
    let b2 = conv_act(p, &arch.bottleneck[1], b1.post.clone());
    let mut cur = b2.post.clone();
    let bottleneck = [b1, b2];

    let mut decoder: Vec<Option<DecoderRecord>> = vec![None; cfg.depth];
    for l in (0..cfg.depth).rev() {
        let shapes = &arch.decoder[l];
        let up = conv_act(p, &shapes.up, upsample(&cur));
        let cat = concat(&encoder[l][1].post, &up.post);
        let c1 = conv_act(p, &shapes.convs[0], cat);
        let c2 = conv_act(p, &shapes.convs[1], c1.post.clone());
        cur = c2.post.clone();
        decoder[l] = Some(DecoderRecord {
            up,
            convs: [c1, c2],
        });
    }
    let raw = conv_forward(p, &arch.head, &cur);
    let out = ComplexTensor::from_fn(h, w, |r, c| {
        let i = r * w + c;
        let net = C64::new(scale * raw.data[i], scale * raw.data[n + i]);
        if cfg.residual {
            x.data()[i] + net
        } else {
            net
        }
    });
    let trace = ForwardTrace {
        config: cfg.clone(),
        param_count: p.len(),
        dims: (h, w),
        scale,
        encoder,
        bottleneck,
        decoder: decoder.into_iter().map(|d| d.expect("every level run")).collect(),
        head_input: cur,
    };
    Ok((out, trace))
}

/// Reverse-mode gradient of the forward map, accumulated into `grads`.
pub fn model_backward_into(
    params: &ModelParameters,
    trace: &ForwardTrace,
    cot: &Cotangent,
    grads: &mut [f64],
) -> Result<()> {
    if trace.config != params.config || trace.param_count != params.len() {
        return Err(invalid!("trace was produced by a different model configuration"));
    }
    if grads.len() != params.len() {
        return Err(invalid!(
            "gradient buffer has {} entries, model has {}",
            grads.len(),
            params.len()
        ));
    }
    let (h, w) = trace.dims;
    let n = h * w;
    let d = trace.config.depth;
    let arch = &params.arch;
    let p = &params.values;

    // Tap cotangents, validated up front.
    let mut enc_tap: Vec<Option<Feature>> = vec![None; d];
    let mut dec_tap: Vec<Option<Feature>> = vec![None; d];
    let mut bottleneck_tap: Option<Feature> = None;
    for (tap, tensors) in &cot.taps {
        let expected = trace.tap(*tap)?;
        if tensors.len() != expected.len()
            || tensors.iter().zip(&expected).any(|(g, e)| !g.same_shape(e))
        {
            return Err(invalid!("cotangent for tap {} has the wrong shape", tap.label()));
        }
        let add = |slot: &mut Option<Feature>, g: &Feature| match slot {
            Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.clone()),
        };
        match tap {
            LatentTap::Bottleneck => add(&mut bottleneck_tap, &tensors[0]),
            LatentTap::Level(k) => {
                add(&mut enc_tap[*k], &tensors[0]);
                add(&mut dec_tap[*k], &tensors[1]);
            }
        }
    }

    let head_in = &trace.head_input;
    let mut grad: Feature = Feature::zeros(head_in.channels, h, w);
    if let Some(g) = &cot.output {
        if g.shape() != [h, w] {
            return Err(invalid!(
                "output cotangent has shape {:?}, expected [{h}, {w}]",
                g.shape()
            ));
        }
        let mut graw = Feature::zeros(2, h, w);
        for (i, v) in g.data().iter().enumerate() {
            graw.data[i] = trace.scale * v.re;
            graw.data[n + i] = trace.scale * v.im;
        }
        grad = conv_backward(p, &arch.head, head_in, &graw, grads, true)
            .expect("input gradient requested");
    }

    let mut skip_grad: Vec<Feature> = trace
        .encoder
        .iter()
        .map(|e| Feature::zeros(e[1].post.channels, e[1].post.height, e[1].post.width))
        .collect();

    for l in 0..d {
        let rec = &trace.decoder[l];
        let shapes = &arch.decoder[l];
        let g = conv_act_backward(p, &shapes.convs[1], &rec.convs[1], grad, grads, true)
            .expect("input gradient requested");
        let g = conv_act_backward(p, &shapes.convs[0], &rec.convs[0], g, grads, true)
            .expect("input gradient requested");
        let (g_skip, mut g_up) = split(&g, skip_grad[l].channels);
        skip_grad[l]
            .data
            .iter_mut()
            .zip(&g_skip.data)
            .for_each(|(a, b)| *a += b);
        if let Some(t) = &dec_tap[l] {
            g_up.data.iter_mut().zip(&t.data).for_each(|(a, b)| *a += b);
        }
        let g = conv_act_backward(p, &shapes.up, &rec.up, g_up, grads, true)
            .expect("input gradient requested");
        grad = upsample_backward(&g);
    }

    if let Some(t) = &bottleneck_tap {
        grad.data.iter_mut().zip(&t.data).for_each(|(a, b)| *a += b);
    }
    let g = conv_act_backward(p, &arch.bottleneck[1], &trace.bottleneck[1], grad, grads, true)
        .expect("input gradient requested");
    let g = conv_act_backward(p, &arch.bottleneck[0], &trace.bottleneck[0], g, grads, true)
        .expect("input gradient requested");
    let mut carry = avg_pool_backward(&g);

    for l in (0..d).rev() {
        let mut g = std::mem::replace(&mut skip_grad[l], Feature::zeros(0, 0, 0));
        g.data.iter_mut().zip(&carry.data).for_each(|(a, b)| *a += b);
        if let Some(t) = &enc_tap[l] {
            g.data.iter_mut().zip(&t.data).for_each(|(a, b)| *a += b);
        }
        let rec = &trace.encoder[l];
        let shapes = &arch.encoder[l];
        let g = conv_act_backward(p, &shapes[1], &rec[1], g, grads, true)
            .expect("input gradient requested");
        let g_in = conv_act_backward(p, &shapes[0], &rec[0], g, grads, l > 0);
        if let Some(g_in) = g_in {
            carry = avg_pool_backward(&g_in);
        }
    }
    Ok(())
}

/// Reverse-mode gradient of the forward map.
pub fn model_backward(
    params: &ModelParameters,
    trace: &ForwardTrace,
    cot: &Cotangent,
) -> Result<Vec<f64>> {
    let mut grads = params.zeros_like();
    model_backward_into(params, trace, cot, &mut grads)?;
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(h: usize, w: usize, seed: u64) -> ComplexTensor {
        let mut rng = keyed(&[seed, 99]);
        ComplexTensor::from_fn(h, w, |_, _| {
            C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
    }

    fn tiny(residual: bool) -> ModelConfig {
        ModelConfig {
            depth: 2,
            base_channels: 2,
            residual,
        }
    }

    #[test]
    fn layout_tiles_the_vector() {
        for cfg in [ModelConfig::default(), tiny(false)] {
            let p = ModelParameters::zeros(&cfg).unwrap();
            let mut next = 0;
            for e in p.layout() {
                assert_eq!(e.offset, next, "{}", e.name);
                next += e.len();
            }
            assert_eq!(next, p.len());
        }
    }

    #[test]
    fn output_shape_matches_input() {
        let p = ModelParameters::init(&ModelConfig::default(), 1).unwrap();
        let x = random_image(32, 32, 1);
        let (y, trace) = model_forward(&p, &x).unwrap();
        assert_eq!(y.shape(), &[32, 32]);
        assert_eq!(trace.tap(LatentTap::Level(1)).unwrap()[0].height, 16);
        assert_eq!(trace.tap(LatentTap::Level(1)).unwrap()[1].width, 16);
        assert_eq!(trace.tap(LatentTap::Bottleneck).unwrap()[0].height, 8);
        assert!(trace.tap(LatentTap::Level(2)).is_err());
        assert!(trace.tap(LatentTap::Level(0)).is_err());
    }

    #[test]
    fn indivisible_shape_rejected() {
        let p = ModelParameters::init(&ModelConfig::default(), 1).unwrap();
        assert!(model_forward(&p, &random_image(30, 32, 1)).is_err());
        assert!(model_forward(&p, &random_image(32, 34, 1)).is_err());
    }

    #[test]
    fn zero_params_give_zero_or_identity() {
        let x = random_image(8, 8, 2);
        let (y, _) = model_forward(&ModelParameters::zeros(&tiny(false)).unwrap(), &x).unwrap();
        assert!(y.data().iter().all(|v| *v == C64::new(0.0, 0.0)));
        let (y, _) = model_forward(&ModelParameters::zeros(&tiny(true)).unwrap(), &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_head_weights_give_bias_response() {
        let mut p = ModelParameters::init(&tiny(false), 3).unwrap();
        p.zero_head_weights();
        let bias = p.head_shape().bias;
        p.values_mut()[bias] = 0.25;
        p.values_mut()[bias + 1] = -0.5;
        let zero = ComplexTensor::zeros(vec![8, 8]);
        let (y, _) = model_forward(&p, &zero).unwrap();
        assert!(y.data().iter().all(|v| *v == C64::new(0.25, -0.5)));
    }

    #[test]
    fn forward_is_deterministic() {
        let a = ModelParameters::init(&ModelConfig::default(), 7).unwrap();
        let b = ModelParameters::init(&ModelConfig::default(), 7).unwrap();
        assert_eq!(a, b);
        let x = random_image(16, 16, 3);
        let (ya, _) = model_forward(&a, &x).unwrap();
        let (yb, _) = model_forward(&b, &x).unwrap();
        assert_eq!(ya, yb);
    }

    #[test]
    fn percentile_scale() {
        let mut x = ComplexTensor::zeros(vec![10, 10]);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v = C64::new(i as f64 + 1.0, 0.0);
        }
        assert_eq!(normalization_scale(&x), 99.0);
        assert_eq!(normalization_scale(&ComplexTensor::zeros(vec![4, 4])), 1.0);
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let p = ModelParameters::init(&tiny(false), 4).unwrap();
        let (_, trace) = model_forward(&p, &random_image(8, 8, 4)).unwrap();
        let g = model_backward(&p, &trace, &Cotangent::output(ComplexTensor::zeros(vec![8, 8])))
            .unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        let g = model_backward(&p, &trace, &Cotangent::default()).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_is_linear_in_cotangent() {
        let p = ModelParameters::init(&tiny(false), 5).unwrap();
        let (_, trace) = model_forward(&p, &random_image(8, 8, 5)).unwrap();
        let g = random_image(8, 8, 6);
        let a = model_backward(&p, &trace, &Cotangent::output(g.clone())).unwrap();
        let b = model_backward(&p, &trace, &Cotangent::output(g.scaled(C64::new(-2.5, 0.0))))
            .unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((-2.5 * x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn mismatched_trace_rejected() {
        let p = ModelParameters::init(&tiny(false), 5).unwrap();
        let q = ModelParameters::init(&ModelConfig::default(), 5).unwrap();
        let (_, trace) = model_forward(&q, &random_image(8, 8, 5)).unwrap();
        assert!(model_backward(&p, &trace, &Cotangent::default()).is_err());
    }

    fn tap_loss(p: &ModelParameters, x: &ComplexTensor, taps: &[LatentTap]) -> (f64, Vec<f64>) {
        let (y, trace) = model_forward(p, x).unwrap();
        // L = 0.5 |y|^2 + sum over taps of 0.5 |z|^2
        let mut loss = 0.5 * y.norm().powi(2);
        let mut cot = Cotangent::output(y.clone());
        for &t in taps {
            let zs = trace.tap(t).unwrap();
            loss += zs.iter().map(|z| 0.5 * z.data.iter().map(|v| v * v).sum::<f64>()).sum::<f64>();
            cot.taps.push((t, zs.into_iter().cloned().collect()));
        }
        (loss, model_backward(p, &trace, &cot).unwrap())
    }

    #[test]
    fn gradient_matches_finite_differences_with_taps() {
        for residual in [false, true] {
            let cfg = ModelConfig {
                depth: 2,
                base_channels: 2,
                residual,
            };
            let mut p = ModelParameters::init(&cfg, 11).unwrap();
            for v in p.values_mut().iter_mut() {
                *v += 0.01;
            }
            let x = random_image(8, 8, 12);
            let taps = [LatentTap::Level(1), LatentTap::Bottleneck];
            let config = p.config().clone();
            let report = check_gradient(
                p.values().to_vec(),
                |v| {
                    let q = ModelParameters::from_values(&config, v.to_vec())?;
                    Ok(tap_loss(&q, &x, &taps))
                },
                &GradientCheckConfig::default(),
            )
            .unwrap();
            assert!(report.passed(), "{report:?}");
            assert!(report.checked >= 50);
        }
    }
}
