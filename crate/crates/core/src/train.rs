//! The MIM objective on one sample and the pre-training loop.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::arch::{Mode, Model};
use crate::autodiff::{Tape, Var};
use crate::checkpoint::{Checkpoint, Entry};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{MetricsWriter, StepMetrics};
use crate::mim::{blockwise_mask, corrupt_on_tape, mim_head, neg_cosine_sum_on_tape, MaskPlan};
use crate::optim::{adamw_step, cosine_lr, layerwise_lr, AdamWConfig, OptimizerState, ParamHyper};
use crate::synth::{synth_dataset, SyntheticSample};
use crate::teacher::{FrozenTeacher, TeacherKind, TeacherOracle};
use crate::tensor::Tensor;

/// Sum over masked positions of the negative cosine between the head's
/// predictions and `target`, for one sample.
///
/// Pipeline: patch embedding, `[MASK]` substitution, encoder, head. When the
/// model has no learned mask token masked rows are zeroed instead.
pub fn masked_loss_sum(
    model: &Model,
    tape: &mut Tape,
    p: &[Var],
    patches: &Tensor,
    plan: &MaskPlan,
    target: &Arc<Tensor>,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let layout = &model.layout;
    let x = tape.constant(patches.clone());
    let tokens = model.embed_patches(tape, p, x)?;
    let token = match layout.mask_token {
        Some(i) => p[i],
        None => tape.constant(Tensor::zeros(&[model.config.width])),
    };
    let corrupted = corrupt_on_tape(tape, tokens, plan, token)?;
    let feats = model.encoder_forward(tape, p, corrupted, mode)?;
    let pred = mim_head(
        tape,
        feats,
        p[layout.head_ln.gain],
        p[layout.head_ln.bias],
        p[layout.head_proj],
    )?;
    neg_cosine_sum_on_tape(tape, pred, target, plan)
}

/// Parameters, optimizer moments and the number of completed updates.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: Vec<Tensor>,
    pub opt: OptimizerState,
}

impl TrainState {
    pub fn step(&self) -> u64 {
        self.opt.step
    }

    /// Entries: `param/<name>`, `adam_m/<name>`, `adam_v/<name>` per
    /// parameter, the `step` counter and the run settings as `config` text.
    pub fn to_checkpoint(&self, model: &Model, config_text: &str) -> Checkpoint {
        let mut c = Checkpoint::default();
        c.push(Entry::u64("step", self.opt.step));
        c.push(Entry::bytes("config", config_text.as_bytes()));
        for (prefix, tensors) in [
            ("param", &self.params),
            ("adam_m", &self.opt.m),
            ("adam_v", &self.opt.v),
        ] {
            for (spec, t) in model.layout.specs.iter().zip(tensors) {
                c.push(Entry::tensor(format!("{prefix}/{}", spec.name), t));
            }
        }
        c
    }

    /// Restores a state for `model`; entries of the wrong shape are
    /// reported by name.
    pub fn from_checkpoint(ckpt: &Checkpoint, model: &Model, hyper: AdamWConfig) -> Result<Self> {
        let read = |prefix: &str| -> Result<Vec<Tensor>> {
            model
                .layout
                .specs
                .iter()
                .map(|s| ckpt.tensor(&format!("{prefix}/{}", s.name), &s.shape))
                .collect()
        };
        let params = read("param")?;
        Ok(TrainState {
            opt: OptimizerState {
                hyper,
                step: ckpt.scalar_u64("step")?,
                m: read("adam_m")?,
                v: read("adam_v")?,
            },
            params,
        })
    }
}

/// Everything that stays fixed during a run: model, data, teacher targets
/// and per-parameter optimizer options.
pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub data: Vec<SyntheticSample>,
    targets: Vec<Arc<Tensor>>,
    hyper: Vec<ParamHyper>,
}

#[derive(Clone, Copy)]
#[repr(u64)]
enum Stream {
    Mask = 0,
    DropPath = 1,
}

/// Generator for one (step, batch slot, purpose); independent of thread
/// scheduling and of where a run was resumed.
fn step_rng(seed: u64, step: u64, slot: u64, stream: Stream) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (chunk, v) in key
        .chunks_exact_mut(8)
        .zip([seed, step, slot, stream as u64])
    {
        chunk.copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

struct SampleResult {
    loss_sum: f64,
    grads: Vec<Tensor>,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone())?;
        let m = &model.config;
        let data = synth_dataset(
            config.data_seed,
            config.n_samples,
            m.num_patches(),
            m.patch_dim(),
        );
        let teacher: Box<dyn TeacherOracle> = match config.teacher {
            TeacherKind::Frozen => Box::new(FrozenTeacher::untrained(m, config.seed, false)?),
            TeacherKind::Pooled => Box::new(FrozenTeacher::untrained(m, config.seed, true)?),
        };
        let targets = data
            .par_iter()
            .map(|s| teacher.features(s).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        let groups = model.layout.num_groups();
        let hyper = model
            .layout
            .specs
            .iter()
            .map(|s| {
                Ok(ParamHyper {
                    decay: s.kind.decays(),
                    lr_scale: layerwise_lr(1.0, config.layer_decay, s.group, groups)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Trainer {
            config,
            model,
            data,
            targets,
            hyper,
        })
    }

    /// Fresh parameters from `ChaCha8Rng::seed_from_u64(seed)`.
    pub fn init_state(&self) -> TrainState {
        let params = self
            .model
            .init_params(&mut ChaCha8Rng::seed_from_u64(self.config.seed));
        TrainState {
            opt: OptimizerState::new(self.config.adamw, &params),
            params,
        }
    }

    pub fn target(&self, sample: usize) -> &Tensor {
        &self.targets[sample]
    }

    /// Dataset indices of the batch for update `step` (0-based): a
    /// contiguous window cycling through the dataset.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let (b, n) = (self.config.batch_size as u64, self.config.n_samples as u64);
        (0..b).map(|i| ((step * b + i) % n) as usize).collect()
    }

    /// One update: fresh block mask per sample, forward and backward on each
    /// sample in parallel, loss averaged over every masked token of the
    /// batch, then AdamW at the scheduled lr.
    ///
    /// The reported loss is that of the parameters before the update.
    pub fn step(&self, state: &mut TrainState) -> Result<StepMetrics> {
        let start = Instant::now();
        let t = state.step();
        let cfg = &self.config;
        let (gh, gw) = (cfg.model.grid_h, cfg.model.grid_w);
        let batch = self.batch_indices(t);
        let plans = (0..batch.len() as u64)
            .map(|slot| {
                blockwise_mask(
                    gh,
                    gw,
                    cfg.mask_ratio,
                    &mut step_rng(cfg.seed, t, slot, Stream::Mask),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let masked: usize = plans.iter().map(MaskPlan::masked_count).sum();

        let results = batch
            .par_iter()
            .zip(&plans)
            .enumerate()
            .map(|(slot, (&idx, plan))| {
                let mut rng = step_rng(cfg.seed, t, slot as u64, Stream::DropPath);
                let mut tape = Tape::new();
                let vars = self.model.record(&mut tape, &state.params)?;
                let loss = masked_loss_sum(
                    &self.model,
                    &mut tape,
                    &vars,
                    &self.data[idx].patches,
                    plan,
                    &self.targets[idx],
                    &mut Mode::Train(&mut rng),
                )?;
                let loss_sum = tape.value(loss).item()?;
                let g = tape.backward(loss)?;
                let grads = vars
                    .iter()
                    .map(|&v| g.wrt(v, &tape))
                    .collect::<Result<Vec<_>>>()?;
                Ok(SampleResult { loss_sum, grads })
            })
            .collect::<Result<Vec<_>>>()?;

        // fixed-order reduction keeps the sum independent of thread timing
        let mut results = results.into_iter();
        let first = results.next().expect("batch_size >= 1");
        let mut loss_sum = first.loss_sum;
        let mut grads: Vec<Vec<f64>> = first.grads.into_iter().map(Tensor::into_data).collect();
        for r in results {
            loss_sum += r.loss_sum;
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                acc.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
            }
        }
        let inv = 1.0 / masked as f64;
        let grads: Vec<Tensor> = grads
            .into_iter()
            .zip(&state.params)
            .map(|(g, p)| {
                Tensor::from_parts(p.shape().to_vec(), g.into_iter().map(|x| x * inv).collect())
            })
            .collect();
        let loss = loss_sum * inv;
        if !loss.is_finite() {
            return Err(Error::Training {
                step: t + 1,
                msg: format!("loss is {loss}"),
            });
        }

        let lr = cosine_lr(t + 1, &cfg.schedule);
        adamw_step(&mut state.opt, &mut state.params, &grads, lr, &self.hyper)?;
        Ok(StepMetrics {
            step: t + 1,
            loss,
            lr,
            masked_fraction: masked as f64 / (batch.len() * gh * gw) as f64,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from this checkpoint; metrics are appended.
    pub resume: Option<PathBuf>,
    /// Stop once this many updates are done (default: the schedule length).
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub final_step: u64,
    pub last: Option<StepMetrics>,
    pub metrics_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("ckpt_{step:06}.trvc"))
}

/// Trains until `stop_after` (or `total_steps`), writing
/// `<out_dir>/metrics.jsonl`, `<out_dir>/config.txt` and a checkpoint every
/// `ckpt_every` steps plus one at the end.
pub fn run_pretrain(config: RunConfig, opts: &RunOptions) -> Result<RunSummary> {
    let out_dir = config.out_dir.clone();
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let cfg_path = out_dir.join("config.txt");
    std::fs::write(&cfg_path, config.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    let config_text = config.run_text();

    let trainer = Trainer::new(config)?;
    let mut state = match &opts.resume {
        Some(path) => TrainState::from_checkpoint(
            &Checkpoint::load(path)?,
            &trainer.model,
            trainer.config.adamw,
        )?,
        None => trainer.init_state(),
    };
    let stop = opts
        .stop_after
        .unwrap_or(trainer.config.schedule.total_steps);
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut writer = MetricsWriter::open(&metrics_path, opts.resume.is_some())?;
    let every = trainer.config.ckpt_every;
    let mut checkpoints = Vec::new();
    let mut last = None;
    while state.step() < stop {
        let m = trainer.step(&mut state)?;
        writer.write(&m)?;
        let step = m.step;
        last = Some(m);
        if (every > 0 && step % every == 0) || step == stop {
            writer.flush()?;
            let path = checkpoint_path(&out_dir, step);
            state
                .to_checkpoint(&trainer.model, &config_text)
                .save(&path)?;
            checkpoints.push(path);
        }
    }
    writer.flush()?;
    Ok(RunSummary {
        final_step: state.step(),
        last,
        metrics_path,
        checkpoints,
    })
}
