//! Fixtures shared by the criterion benchmarks.

use vortex_core::augment::Example;
use vortex_core::data::{generate_phantom, synthesize_maps};
use vortex_core::model::{ModelConfig, ModelParameters};
use vortex_core::mri::{make_poisson_disc_mask, ForwardOperator};
use vortex_core::rng::keyed;
use vortex_core::ComplexTensor;

/// Phantom image of size `n`×`n` with its undersampled multi-coil example.
pub fn example(n: usize, coils: usize, seed: u64) -> (ComplexTensor, Example) {
    let mut rng = keyed(&[seed, 1]);
    let (image, _) = generate_phantom(n, n, &mut rng).expect("phantom");
    let maps = synthesize_maps(coils, n, n, &mut rng).expect("maps");
    let mask = make_poisson_disc_mask(n, n, 8.0, (n / 4, n / 4), seed).expect("mask");
    let op = ForwardOperator::new(maps, mask).expect("operator");
    let kspace = op.forward(&image).expect("forward");
    let ex = Example {
        kspace,
        op,
        fully_sampled: false,
        target: Some(image.clone()),
    };
    (image, ex)
}

pub fn model(depth: usize, base_channels: usize) -> ModelParameters {
    let cfg = ModelConfig {
        depth,
        base_channels,
        residual: true,
    };
    ModelParameters::init(&cfg, 0).expect("model")
}
