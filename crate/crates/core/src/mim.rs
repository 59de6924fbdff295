//! Masked-image-modeling pretext: block-wise masks, `[MASK]` corruption,
//! the LN + linear prediction head and the negative-cosine objective.

use std::sync::Arc;

use rand::Rng;

use crate::arch::LN_EPS;
use crate::autodiff::{cosine, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Smallest rectangle (in patches) a mask block may cover.
pub const MIN_BLOCK: usize = 16;
/// Aspect ratios are drawn log-uniformly from `[MIN_ASPECT, 1 / MIN_ASPECT]`.
pub const MIN_ASPECT: f64 = 0.3;
/// Added to the norm product in the cosine denominator.
pub const COSINE_EPS: f64 = 1e-8;

const MAX_FAILED_DRAWS: usize = 100_000;

/// Axis-aligned block of patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.top..self.top + self.height)
            .flat_map(move |r| (self.left..self.left + self.width).map(move |c| (r, c)))
    }
}

/// Boolean patch-grid mask (row-major) and the blocks it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub grid_h: usize,
    pub grid_w: usize,
    pub masked: Vec<bool>,
    pub target_ratio: f64,
    pub blocks: Vec<Rect>,
}

impl MaskPlan {
    /// Plan from an explicit mask (no block structure recorded).
    pub fn from_mask(grid_h: usize, grid_w: usize, masked: Vec<bool>) -> Result<Self> {
        if masked.len() != grid_h * grid_w {
            return Err(Error::shape("mask", &[masked.len()], &[grid_h, grid_w]));
        }
        let ratio = masked.iter().filter(|&&m| m).count() as f64 / masked.len() as f64;
        Ok(MaskPlan {
            grid_h,
            grid_w,
            masked,
            target_ratio: ratio,
            blocks: Vec::new(),
        })
    }

    pub fn none(grid_h: usize, grid_w: usize) -> Self {
        Self::from_mask(grid_h, grid_w, vec![false; grid_h * grid_w]).expect("sizes agree")
    }

    pub fn all(grid_h: usize, grid_w: usize) -> Self {
        Self::from_mask(grid_h, grid_w, vec![true; grid_h * grid_w]).expect("sizes agree")
    }

    pub fn area(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn masked_fraction(&self) -> f64 {
        self.masked_count() as f64 / self.area() as f64
    }

    /// Row-major token indices of masked patches.
    pub fn masked_rows(&self) -> Vec<usize> {
        self.masked
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    pub fn is_masked(&self, row: usize, col: usize) -> bool {
        self.masked[row * self.grid_w + col]
    }
}

/// Number of patches a plan must cover: `ceil(ratio · area)`.
pub fn mask_target(grid_h: usize, grid_w: usize, ratio: f64) -> usize {
    (ratio * (grid_h * grid_w) as f64).ceil() as usize
}

/// Block-wise masking: union rectangles until at least `ceil(ratio · area)`
/// patches are hidden.
///
/// Each draw picks an area uniformly in `[MIN_BLOCK, max(need, MIN_BLOCK)]`
/// and a log-uniform aspect ratio, rounds to an integer rectangle, and
/// places it uniformly on the grid. A draw is kept when it covers at least
/// `MIN_BLOCK` cells and adds between 1 and `max(need, MIN_BLOCK)` new ones,
/// so the final overshoot stays below `MIN_BLOCK`.
pub fn blockwise_mask<R: Rng + ?Sized>(
    grid_h: usize,
    grid_w: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config(
            "mask_ratio",
            format!("must lie in (0, 1), got {ratio}"),
        ));
    }
    let area = grid_h * grid_w;
    if area < MIN_BLOCK {
        return Err(Error::config(
            "grid",
            format!("{grid_h}x{grid_w} grid is smaller than the minimum block of {MIN_BLOCK}"),
        ));
    }
    let target = mask_target(grid_h, grid_w, ratio);
    let (log_lo, log_hi) = (MIN_ASPECT.ln(), (1.0 / MIN_ASPECT).ln());
    let mut masked = vec![false; area];
    let mut count = 0;
    let mut blocks = Vec::new();
    let mut failures = 0;
    while count < target {
        let need = target - count;
        let cap = need.max(MIN_BLOCK);
        let block_area = MIN_BLOCK as f64 + (cap - MIN_BLOCK) as f64 * rng.random::<f64>();
        let aspect = (log_lo + (log_hi - log_lo) * rng.random::<f64>()).exp();
        let h = (block_area * aspect).sqrt().round() as usize;
        let w = (block_area / aspect).sqrt().round() as usize;
        let accepted = if h >= 1 && w >= 1 && h <= grid_h && w <= grid_w && h * w >= MIN_BLOCK {
            let rect = Rect {
                top: rng.random_range(0..=grid_h - h),
                left: rng.random_range(0..=grid_w - w),
                height: h,
                width: w,
            };
            let fresh = rect
                .cells()
                .filter(|&(r, c)| !masked[r * grid_w + c])
                .count();
            if fresh > 0 && fresh <= cap {
                for (r, c) in rect.cells() {
                    masked[r * grid_w + c] = true;
                }
                count += fresh;
                blocks.push(rect);
                true
            } else {
                false
            }
        } else {
            false
        };
        if accepted {
            failures = 0;
        } else {
            failures += 1;
            if failures >= MAX_FAILED_DRAWS {
                return Err(Error::config(
                    "grid",
                    format!("no valid {MIN_BLOCK}-cell block fits a {grid_h}x{grid_w} grid"),
                ));
            }
        }
    }
    Ok(MaskPlan {
        grid_h,
        grid_w,
        masked,
        target_ratio: ratio,
        blocks,
    })
}

/// Replaces the rows of masked patches with `mask_token`; visible rows are
/// copied unchanged.
pub fn corrupt(patch_tokens: &Tensor, plan: &MaskPlan, mask_token: &Tensor) -> Result<Tensor> {
    let [n, d] = tensor::dims2(patch_tokens.shape(), "corrupt")?;
    if n != plan.area() {
        return Err(Error::shape(
            "corrupt",
            patch_tokens.shape(),
            &[plan.grid_h, plan.grid_w],
        ));
    }
    if mask_token.shape() != [d] {
        return Err(Error::shape(
            "corrupt",
            patch_tokens.shape(),
            mask_token.shape(),
        ));
    }
    let mut out = patch_tokens.data().to_vec();
    for r in plan.masked_rows() {
        out[r * d..(r + 1) * d].copy_from_slice(mask_token.data());
    }
    Ok(Tensor::from_parts(patch_tokens.shape().to_vec(), out))
}

/// Tape version of [`corrupt`].
pub fn corrupt_on_tape(
    tape: &mut Tape,
    tokens: Var,
    plan: &MaskPlan,
    mask_token: Var,
) -> Result<Var> {
    if tape.shape(tokens)[0] != plan.area() {
        return Err(Error::shape(
            "corrupt",
            tape.shape(tokens),
            &[plan.grid_h, plan.grid_w],
        ));
    }
    tape.replace_rows(tokens, mask_token, &plan.masked_rows())
}

/// Layer norm followed by a bias-free projection to the teacher width.
pub fn mim_head(tape: &mut Tape, features: Var, gain: Var, bias: Var, proj: Var) -> Result<Var> {
    let h = tape.layer_norm(features, gain, bias, LN_EPS)?;
    tape.matmul(h, proj)
}

/// Mean over masked positions of `-⟨p, t⟩ / (‖p‖‖t‖ + eps)`.
pub fn neg_cosine_loss(pred: &Tensor, target: &Tensor, plan: &MaskPlan) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "neg_cosine_loss",
            pred.shape(),
            target.shape(),
        ));
    }
    if pred.rows() != plan.area() {
        return Err(Error::shape(
            "neg_cosine_loss",
            pred.shape(),
            &[plan.grid_h, plan.grid_w],
        ));
    }
    let rows = plan.masked_rows();
    if rows.is_empty() {
        return Err(Error::Usage("loss over an empty mask is undefined".into()));
    }
    let total: f64 = rows
        .iter()
        .map(|&r| -cosine(pred.row(r), target.row(r), COSINE_EPS))
        .sum();
    Ok(total / rows.len() as f64)
}

/// Tape version returning the *sum* over masked rows; callers divide by the
/// masked count of the whole batch.
pub fn neg_cosine_sum_on_tape(
    tape: &mut Tape,
    pred: Var,
    target: &Arc<Tensor>,
    plan: &MaskPlan,
) -> Result<Var> {
    tape.neg_cosine_sum(pred, target, &plan.masked_rows(), COSINE_EPS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn union_of_blocks(plan: &MaskPlan) -> Vec<bool> {
        let mut m = vec![false; plan.area()];
        for b in &plan.blocks {
            for (r, c) in b.cells() {
                m[r * plan.grid_w + c] = true;
            }
        }
        m
    }

    #[test]
    fn forty_percent_on_14x14() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(mask_target(14, 14, 0.4), 79);
        for _ in 0..200 {
            let plan = blockwise_mask(14, 14, 0.4, &mut rng).unwrap();
            let n = plan.masked_count();
            assert!((79..79 + MIN_BLOCK).contains(&n), "{n}");
            assert_eq!(union_of_blocks(&plan), plan.masked);
            assert!(plan.blocks.iter().all(|b| b.area() >= MIN_BLOCK));
        }
    }

    #[test]
    fn tiny_ratio_is_one_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let plan = blockwise_mask(14, 14, 0.01, &mut rng).unwrap();
            assert_eq!(plan.blocks.len(), 1);
            assert_eq!(plan.masked_count(), plan.blocks[0].area());
            assert!(plan.masked_count() >= MIN_BLOCK);
        }
    }

    #[test]
    fn mask_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            blockwise_mask(3, 5, 0.4, &mut rng),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            blockwise_mask(14, 14, 1.0, &mut rng),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            blockwise_mask(14, 14, 0.0, &mut rng),
            Err(Error::Config { .. })
        ));
        // area >= 16 but no admissible rectangle fits a single row
        assert!(matches!(
            blockwise_mask(1, 40, 0.5, &mut rng),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn corrupt_cases() {
        let tokens = Tensor::new(vec![16, 3], (0..48).map(|i| i as f64).collect()).unwrap();
        let token = Tensor::new(vec![3], vec![-1.0, -2.0, -3.0]).unwrap();
        assert_eq!(
            corrupt(&tokens, &MaskPlan::none(4, 4), &token).unwrap(),
            tokens
        );
        let all = corrupt(&tokens, &MaskPlan::all(4, 4), &token).unwrap();
        assert!((0..16).all(|r| all.row(r) == token.data()));

        let plan = blockwise_mask(4, 4, 0.3, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mixed = MaskPlan::from_mask(4, 4, (0..16).map(|i| i % 3 == 0).collect()).unwrap();
        for p in [plan, mixed] {
            let out = corrupt(&tokens, &p, &token).unwrap();
            for r in 0..16 {
                let expect = if p.masked[r] {
                    token.data()
                } else {
                    tokens.row(r)
                };
                assert_eq!(out.row(r), expect);
            }
        }
        assert!(corrupt(&tokens, &MaskPlan::none(3, 3), &token).is_err());
    }

    #[test]
    fn loss_closed_forms() {
        let plan = MaskPlan::all(1, 1);
        let p = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let t = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let l = neg_cosine_loss(&p, &t, &plan).unwrap();
        assert!((l + std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-8);

        let perp = Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap();
        assert_eq!(neg_cosine_loss(&perp, &t, &plan).unwrap(), 0.0);

        let t = Tensor::new(vec![4, 3], (0..12).map(|i| (i as f64).cos()).collect()).unwrap();
        let l = neg_cosine_loss(&t.scale(3.5), &t, &MaskPlan::all(2, 2)).unwrap();
        assert!((l + 1.0).abs() < 1e-8);

        assert!(neg_cosine_loss(&t, &t, &MaskPlan::none(2, 2)).is_err());
    }

    #[test]
    fn head_normalises_then_projects() {
        let mut tape = Tape::new();
        let feats = Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, 2.0, 2.0, 2.0, 2.0]).unwrap();
        let x = tape.constant(feats.clone());
        let g = tape.constant(Tensor::ones(&[4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let eye = tape.constant(Tensor::eye(4));
        let y = mim_head(&mut tape, x, g, b, eye).unwrap();
        let expect =
            tensor::layer_norm(&feats, &Tensor::ones(&[4]), &Tensor::zeros(&[4]), LN_EPS).unwrap();
        assert_eq!(tape.value(y), &expect);
        // constant row collapses to zero
        assert!(tape.value(y).row(1).iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn loss_bounded_and_scale_invariant(
            p in prop::collection::vec(-1.0f64..1.0, 12),
            t in prop::collection::vec(-1.0f64..1.0, 12),
            c in 0.5f64..100.0,
            mask in prop::collection::vec(any::<bool>(), 4),
        ) {
            prop_assume!(mask.iter().any(|&m| m));
            let plan = MaskPlan::from_mask(2, 2, mask).unwrap();
            let p = Tensor::new(vec![4, 3], p).unwrap();
            let t = Tensor::new(vec![4, 3], t).unwrap();
            // eps only vanishes relative to norms well above it
            let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assume!((0..4).all(|r| norm(p.row(r)) > 0.1 && norm(t.row(r)) > 0.1));
            let l = neg_cosine_loss(&p, &t, &plan).unwrap();
            prop_assert!((-1.0..=1.0).contains(&l));
            let ls = neg_cosine_loss(&p.scale(c), &t, &plan).unwrap();
            prop_assert!((l - ls).abs() < 1e-5);
        }
    }
}
