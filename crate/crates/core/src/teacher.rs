//! Frozen feature targets for MIM.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{Mode, Model, TrVConfig};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::mim::mim_head;
use crate::synth::SyntheticSample;
use crate::tensor::Tensor;

/// Supplies per-patch target features. Implementations must be pure:
/// the same sample always yields the same tensor.
pub trait TeacherOracle: Send + Sync {
    fn feature_dim(&self) -> usize;

    /// `[tokens, feature_dim]` targets for `sample`.
    fn features(&self, sample: &SyntheticSample) -> Result<Tensor>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    /// Untrained encoder + head, initialised exactly like the student.
    Frozen,
    /// [`TeacherKind::Frozen`] features averaged over patches and repeated
    /// at every position: an image-level target recoverable from any
    /// visible subset.
    Pooled,
}

impl FromStr for TeacherKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "frozen" => Ok(TeacherKind::Frozen),
            "pooled" => Ok(TeacherKind::Pooled),
            _ => Err(format!("expected \"frozen\" or \"pooled\", got {s:?}")),
        }
    }
}

impl TeacherKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TeacherKind::Frozen => "frozen",
            TeacherKind::Pooled => "pooled",
        }
    }
}

/// A fixed encoder + prediction head applied to clean (unmasked) patches.
#[derive(Clone, Debug)]
pub struct FrozenTeacher {
    model: Model,
    params: Vec<Tensor>,
    pooled: bool,
}

impl FrozenTeacher {
    pub fn new(model: Model, params: Vec<Tensor>, pooled: bool) -> Result<Self> {
        model.check_params(&params)?;
        Ok(FrozenTeacher {
            model,
            params,
            pooled,
        })
    }

    /// Copy of a freshly initialised student: same architecture, weights
    /// drawn from `ChaCha8Rng::seed_from_u64(seed)`, no stochastic depth.
    pub fn untrained(config: &TrVConfig, seed: u64, pooled: bool) -> Result<Self> {
        let model = Model::new(TrVConfig {
            drop_path_rate: 0.0,
            ..config.clone()
        })?;
        let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(seed));
        Self::new(model, params, pooled)
    }
}

impl TeacherOracle for FrozenTeacher {
    fn feature_dim(&self) -> usize {
        self.model.config.teacher_dim
    }

    fn features(&self, sample: &SyntheticSample) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p: Vec<_> = self
            .params
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        let patches = tape.constant(sample.patches.clone());
        let tokens = self.model.embed_patches(&mut tape, &p, patches)?;
        let feats = self
            .model
            .encoder_forward(&mut tape, &p, tokens, &mut Mode::Eval)?;
        let head = &self.model.layout;
        let y = mim_head(
            &mut tape,
            feats,
            p[head.head_ln.gain],
            p[head.head_ln.bias],
            p[head.head_proj],
        )?;
        if !tape.value(y).all_finite() {
            return Err(Error::InvalidTensor(format!(
                "teacher features for sample {} are not finite",
                sample.id
            )));
        }
        let y = tape.value(y);
        if !self.pooled {
            return Ok(y.clone());
        }
        let (n, d) = (y.rows(), y.last_dim());
        let mut mean = vec![0.0; d];
        for r in 0..n {
            mean.iter_mut().zip(y.row(r)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        Tensor::new(vec![n, d], mean.repeat(n))
    }
}
