use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{InitScheme, TrVConfig};
use super::layout::{FfnIdx, ModelLayout, ParamKind};
use crate::tensor::Tensor;

pub const TOKEN_INIT_STD: f64 = 0.02;

pub fn xavier_std(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

fn normal<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

/// I.i.d. `N(0, 2 / (fan_in + fan_out))` samples for a `[fan_in, fan_out]` weight.
pub fn init_xavier_normal<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let data = normal(rng, fan_in * fan_out, xavier_std(fan_in, fan_out));
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

/// Normal samples with `std`, redrawn until they fall inside `±2·std`.
pub fn trunc_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Fresh parameters in layout order. Matrices use xavier normal or the
/// BEiT-style truncated normal (0.02, with residual-output matrices of block
/// `i` divided by `sqrt(2·(i+1))`). Norm gains start at 1, biases and
/// relative-position tables at 0, tokens and absolute positions at N(0, 0.02²).
pub fn init_params<R: Rng + ?Sized>(
    config: &TrVConfig,
    layout: &ModelLayout,
    rng: &mut R,
) -> Vec<Tensor> {
    let mut rescale = vec![1.0; layout.specs.len()];
    if config.init_scheme == InitScheme::BeitStyle {
        for (i, block) in layout.blocks.iter().enumerate() {
            let out = match block.ffn {
                FfnIdx::Mlp { fc2, .. } => fc2.weight,
                FfnIdx::SwiGlu { out, .. } => out.weight,
            };
            let s = 1.0 / (2.0 * (i + 1) as f64).sqrt();
            rescale[block.proj.weight] = s;
            rescale[out] = s;
        }
    }
    layout
        .specs
        .iter()
        .zip(rescale)
        .map(|(spec, scale)| match spec.kind {
            ParamKind::Weight => match config.init_scheme {
                InitScheme::XavierNormal => init_xavier_normal(spec.shape[0], spec.shape[1], rng),
                InitScheme::BeitStyle => {
                    trunc_normal(&spec.shape, TOKEN_INIT_STD, rng).scale(scale)
                }
            },
            ParamKind::NormGain => Tensor::ones(&spec.shape),
            ParamKind::Bias | ParamKind::NormBias | ParamKind::RelPosTable => {
                Tensor::zeros(&spec.shape)
            }
            ParamKind::MaskToken | ParamKind::ClassToken => Tensor::from_parts(
                spec.shape.clone(),
                normal(rng, spec.numel(), TOKEN_INIT_STD),
            ),
            ParamKind::PosEmbed => trunc_normal(&spec.shape, TOKEN_INIT_STD, rng),
        })
        .collect()
}
