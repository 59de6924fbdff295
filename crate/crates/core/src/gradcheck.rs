//! End-to-end gradient check of the MIM objective against central finite
//! differences.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{Mode, Model, TrVConfig};
use crate::autodiff::{
    finite_diff_grad, finite_diff_grad_4th, gradient, max_rel_error, Tape, Var, DEFAULT_FD_STEP,
};
use crate::error::{Error, Result};
use crate::mim::MaskPlan;
use crate::tensor::Tensor;
use crate::train::masked_loss_sum;

/// Denominator floor of the per-coordinate relative error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Finite-difference stencil used as the oracle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FdScheme {
    Central2 { h: f64 },
    Central4 { h: f64 },
}

impl Default for FdScheme {
    fn default() -> Self {
        FdScheme::Central2 { h: DEFAULT_FD_STEP }
    }
}

/// Without RoPE the key bias shifts every logit of a softmax row by the same
/// amount, so its true gradient is exactly zero and a 2-point stencil at
/// `h = 1e-5` only measures roundoff. The 4th-order stencil at a larger step
/// keeps both roundoff and truncation below the tolerance.
pub const ABLATION_FD: FdScheme = FdScheme::Central4 { h: 3e-4 };

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub loss: f64,
    pub max_rel_error: f64,
    /// Parameter entry holding the worst coordinate.
    pub worst_entry: String,
    pub n_coords: usize,
}

/// Every third patch masked (starting at 0), so both masked and visible
/// tokens reach the loss on any grid.
pub fn strided_plan(grid_h: usize, grid_w: usize) -> MaskPlan {
    MaskPlan::from_mask(
        grid_h,
        grid_w,
        (0..grid_h * grid_w).map(|i| i % 3 == 0).collect(),
    )
    .expect("sizes agree")
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| scale * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("finite values")
}

/// Compares reverse-mode and finite-difference gradients of the mean masked
/// negative cosine over every parameter of `config`.
///
/// Parameters start from the configured init plus uniform jitter of 0.05 so
/// that zero biases and unit gains are not special points; patches and
/// targets are uniform in `[-1, 1]`. Drop path is disabled (eval mode).
pub fn gradcheck_mim(config: &TrVConfig, seed: u64, scheme: FdScheme) -> Result<GradcheckReport> {
    let model = Model::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<Tensor> = model
        .init_params(&mut rng)
        .into_iter()
        .map(|p| {
            let noise = uniform(&mut rng, p.shape(), 0.05);
            p.add(&noise).expect("same shape")
        })
        .collect();
    let n = config.num_patches();
    let patches = uniform(&mut rng, &[n, config.patch_dim()], 1.0);
    let target = Arc::new(uniform(&mut rng, &[n, config.teacher_dim], 1.0));
    let plan = strided_plan(config.grid_h, config.grid_w);
    let count = plan.masked_count() as f64;

    let objective = |tape: &mut Tape, p: &[Var]| {
        let sum = masked_loss_sum(&model, tape, p, &patches, &plan, &target, &mut Mode::Eval)?;
        tape.scale(sum, 1.0 / count)
    };
    let (loss, analytic) = gradient(objective, &params)?;
    let numeric = match scheme {
        FdScheme::Central2 { h } => finite_diff_grad(objective, &params, h)?,
        FdScheme::Central4 { h } => finite_diff_grad_4th(objective, &params, h)?,
    };

    let mut worst = (0.0, 0);
    for (i, (a, b)) in analytic.iter().zip(&numeric).enumerate() {
        let err = max_rel_error(
            std::slice::from_ref(a),
            std::slice::from_ref(b),
            REL_ERR_FLOOR,
        );
        if err.is_nan() {
            return Err(Error::InvalidTensor(format!(
                "NaN gradient in {}",
                model.layout.specs[i].name
            )));
        }
        if err >= worst.0 {
            worst = (err, i);
        }
    }
    Ok(GradcheckReport {
        loss,
        max_rel_error: worst.0,
        worst_entry: model.layout.specs[worst.1].name.clone(),
        n_coords: params.iter().map(Tensor::numel).sum(),
    })
}
