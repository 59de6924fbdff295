//! Forward pass of the encoder on a [`Tape`].
//!
//! One call processes one sample: tokens are `[n, width]` matrices.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::{NormScheme, PosEmbed, TrVConfig, LN_EPS};
use super::init::init_params;
use super::layout::{BlockIdx, FfnIdx, LinearIdx, LnIdx, ModelLayout};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rope::{grid_positions, GridPos, RopeTable};
use crate::tensor::Tensor;

/// Training mode carries the RNG that drives drop path.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

/// Per-sample keep factor for one residual branch: `0` or `1 / (1 - rate)`
/// while training, `1` otherwise. No randomness is consumed at rate 0.
pub fn drop_path_factor(rate: f64, mode: &mut Mode<'_>) -> Result<f64> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(
            "drop_path",
            format!("rate must lie in [0, 1), got {rate}"),
        ));
    }
    match mode {
        Mode::Train(rng) if rate > 0.0 => {
            let keep = rng.random::<f64>() >= rate;
            Ok(if keep { 1.0 / (1.0 - rate) } else { 0.0 })
        }
        _ => Ok(1.0),
    }
}

/// Stochastic depth over the leading (sample) axis of `branch`.
pub fn drop_path(
    branch: &Tensor,
    rate: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let mut mode = if training {
        Mode::Train(rng)
    } else {
        Mode::Eval
    };
    let samples = branch.shape()[0];
    let per = branch.numel() / samples;
    let mut out = branch.data().to_vec();
    for chunk in out.chunks_mut(per) {
        let f = drop_path_factor(rate, &mut mode)?;
        if f != 1.0 {
            chunk.iter_mut().for_each(|v| *v *= f);
        }
    }
    Ok(Tensor::from_parts(branch.shape().to_vec(), out))
}

/// Drop-path rate of each block, rising linearly from 0 to `rate`.
pub fn block_drop_rates(rate: f64, depth: usize) -> Vec<f64> {
    match depth {
        0 => vec![],
        1 => vec![0.0],
        d => (0..d).map(|i| rate * i as f64 / (d - 1) as f64).collect(),
    }
}

/// Token positions plus the tables derived from them.
#[derive(Clone, Debug)]
pub struct PositionContext {
    pub positions: Arc<[GridPos]>,
    rope: Option<Arc<RopeTable>>,
    rel_index: Option<Arc<[usize]>>,
    skip: usize,
}

impl PositionContext {
    pub fn new(config: &TrVConfig, positions: Vec<GridPos>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Usage("position list is empty".into()));
        }
        for &(r, c) in &positions {
            if r >= config.grid_h || c >= config.grid_w {
                return Err(Error::Index(format!(
                    "position ({r}, {c}) outside {}x{} grid",
                    config.grid_h, config.grid_w
                )));
            }
        }
        let rope = match config.pos_embed {
            PosEmbed::Rope2d => Some(Arc::new(RopeTable::new(
                config.grid_h,
                config.grid_w,
                config.head_dim(),
                config.rope_base,
            )?)),
            _ => None,
        };
        let rel_index = (config.pos_embed == PosEmbed::RelPe2d)
            .then(|| rel_position_index(config, &positions).into());
        Ok(PositionContext {
            positions: positions.into(),
            rope,
            rel_index,
            skip: usize::from(config.class_token),
        })
    }
}

/// Flattened `[n, n]` lookup into the relative-position table: offsets
/// `(dr, dc)` map to `(dr + gh - 1) · (2gw - 1) + (dc + gw - 1)`; a class
/// token uses the three trailing slots.
fn rel_position_index(config: &TrVConfig, positions: &[GridPos]) -> Vec<usize> {
    let (gh, gw) = (config.grid_h as isize, config.grid_w as isize);
    let base = ((2 * gh - 1) * (2 * gw - 1)) as usize;
    let cls = usize::from(config.class_token);
    let n = positions.len() + cls;
    let mut index = vec![0; n * n];
    for i in 0..n {
        for j in 0..n {
            index[i * n + j] = match (i < cls, j < cls) {
                (true, true) => base + 2,
                (true, false) => base,
                (false, true) => base + 1,
                (false, false) => {
                    let (ri, ci) = positions[i - cls];
                    let (rj, cj) = positions[j - cls];
                    let dr = ri as isize - rj as isize + gh - 1;
                    let dc = ci as isize - cj as isize + gw - 1;
                    (dr * (2 * gw - 1) + dc) as usize
                }
            };
        }
    }
    index
}

/// An encoder description: configuration, parameter layout and the
/// position tables for the default row-major grid.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrVConfig,
    pub layout: ModelLayout,
    pub positions: PositionContext,
}

impl Model {
    pub fn new(config: TrVConfig) -> Result<Self> {
        config.validate()?;
        let layout = ModelLayout::new(&config);
        let positions =
            PositionContext::new(&config, grid_positions(config.grid_h, config.grid_w))?;
        Ok(Model {
            config,
            layout,
            positions,
        })
    }

    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        init_params(&self.config, &self.layout, rng)
    }

    /// Checks count and shape of a parameter list against the layout.
    pub fn check_params(&self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.layout.specs.len() {
            return Err(Error::shape(
                "params",
                &[params.len()],
                &[self.layout.specs.len()],
            ));
        }
        for (spec, p) in self.layout.specs.iter().zip(params) {
            if spec.shape != p.shape() {
                return Err(Error::EntryShape {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: p.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Records every parameter on `tape` in layout order.
    pub fn record(&self, tape: &mut Tape, params: &[Tensor]) -> Result<Vec<Var>> {
        self.check_params(params)?;
        Ok(params.iter().map(|p| tape.param(p.clone())).collect())
    }

    /// Linear patch embedding of `[n, patch_dim]` pixel patches.
    pub fn embed_patches(&self, tape: &mut Tape, p: &[Var], patches: Var) -> Result<Var> {
        linear(tape, p, patches, self.layout.patch_embed)
    }

    /// Runs all blocks on already-embedded `[n, width]` tokens at the default
    /// grid positions.
    pub fn encoder_forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        tokens: Var,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        self.encoder_forward_at(tape, p, tokens, &self.positions, mode)
    }

    pub fn encoder_forward_at(
        &self,
        tape: &mut Tape,
        p: &[Var],
        tokens: Var,
        ctx: &PositionContext,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let shape = tape.shape(tokens).to_vec();
        let n = ctx.positions.len();
        if shape != [n, cfg.width] {
            return Err(Error::shape("encoder_forward", &shape, &[n, cfg.width]));
        }
        let mut x = tokens;
        if let Some(cls) = self.layout.class_token {
            x = tape.concat_rows(p[cls], x)?;
        }
        if let Some(pe) = self.layout.abs_pos {
            x = tape.add(x, p[pe])?;
        }
        let rates = block_drop_rates(cfg.drop_path_rate, cfg.depth);
        for (block, &rate) in self.layout.blocks.iter().zip(&rates) {
            x = self.block(tape, p, block, x, ctx, rate, mode)?;
        }
        if self.layout.class_token.is_some() {
            x = tape.slice_rows(x, 1, n)?;
        }
        Ok(x)
    }

    /// One block: attention and feedforward sublayers with residuals,
    /// normalised according to the configured scheme.
    #[allow(clippy::too_many_arguments)]
    pub fn block(
        &self,
        tape: &mut Tape,
        p: &[Var],
        b: &BlockIdx,
        x: Var,
        ctx: &PositionContext,
        drop_rate: f64,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        match self.config.norm_scheme {
            NormScheme::PreLn | NormScheme::SubLn => {
                let h = ln(tape, p, x, b.ln1)?;
                let a = self.mhsa(tape, p, b, h, ctx)?;
                let a = scale_branch(tape, a, drop_path_factor(drop_rate, mode)?)?;
                let x = tape.add(x, a)?;
                let h = ln(tape, p, x, b.ln2)?;
                let f = ffn(tape, p, h, &b.ffn)?;
                let f = scale_branch(tape, f, drop_path_factor(drop_rate, mode)?)?;
                tape.add(x, f)
            }
            NormScheme::PostLn => {
                let a = self.mhsa(tape, p, b, x, ctx)?;
                let a = scale_branch(tape, a, drop_path_factor(drop_rate, mode)?)?;
                let s = tape.add(x, a)?;
                let x = ln(tape, p, s, b.ln1)?;
                let f = ffn(tape, p, x, &b.ffn)?;
                let f = scale_branch(tape, f, drop_path_factor(drop_rate, mode)?)?;
                let s = tape.add(x, f)?;
                ln(tape, p, s, b.ln2)
            }
        }
    }

    /// Multi-head self-attention with scale `1/sqrt(head_dim)`. RoPE rotates
    /// q and k after projection; there is no normalisation inside attention.
    pub fn mhsa(
        &self,
        tape: &mut Tape,
        p: &[Var],
        b: &BlockIdx,
        x: Var,
        ctx: &PositionContext,
    ) -> Result<Var> {
        let cfg = &self.config;
        let n = tape.shape(x)[0];
        let expected = ctx.skip + ctx.positions.len();
        if n != expected {
            return Err(Error::shape("mhsa", tape.shape(x), &[expected, cfg.width]));
        }
        let hd = cfg.head_dim();
        let mut q = linear(tape, p, x, b.q)?;
        let mut k = linear(tape, p, x, b.k)?;
        let v = linear(tape, p, x, b.v)?;
        if let Some(table) = &ctx.rope {
            q = tape.rope(q, table, &ctx.positions, ctx.skip)?;
            k = tape.rope(k, table, &ctx.positions, ctx.skip)?;
        }
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(cfg.num_heads);
        for h in 0..cfg.num_heads {
            let qh = tape.slice_cols(q, h * hd, hd)?;
            let kh = tape.slice_cols(k, h * hd, hd)?;
            let vh = tape.slice_cols(v, h * hd, hd)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let mut scores = tape.scale(scores, scale)?;
            if let (Some(table), Some(index)) = (b.rel_pos, &ctx.rel_index) {
                let bias = tape.gather_bias(p[table], h, index, n)?;
                scores = tape.add(scores, bias)?;
            }
            let attn = tape.softmax(scores)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let o = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        linear(tape, p, o, b.proj)
    }
}

fn scale_branch(tape: &mut Tape, x: Var, factor: f64) -> Result<Var> {
    if factor == 1.0 {
        Ok(x)
    } else {
        tape.scale(x, factor)
    }
}

pub(crate) fn linear(tape: &mut Tape, p: &[Var], x: Var, idx: LinearIdx) -> Result<Var> {
    let y = tape.matmul(x, p[idx.weight])?;
    match idx.bias {
        Some(b) => tape.add_row(y, p[b]),
        None => Ok(y),
    }
}

pub(crate) fn ln(tape: &mut Tape, p: &[Var], x: Var, idx: LnIdx) -> Result<Var> {
    tape.layer_norm(x, p[idx.gain], p[idx.bias], LN_EPS)
}

fn ffn(tape: &mut Tape, p: &[Var], x: Var, idx: &FfnIdx) -> Result<Var> {
    match *idx {
        FfnIdx::Mlp { fc1, fc2, inner_ln } => {
            let h = linear(tape, p, x, fc1)?;
            let mut h = tape.gelu(h)?;
            if let Some(l) = inner_ln {
                h = ln(tape, p, h, l)?;
            }
            linear(tape, p, h, fc2)
        }
        FfnIdx::SwiGlu {
            gate,
            value,
            out,
            inner_ln,
        } => {
            let g = linear(tape, p, x, gate)?;
            let g = tape.silu(g)?;
            let v = linear(tape, p, x, value)?;
            let mut h = tape.mul(g, v)?;
            if let Some(l) = inner_ln {
                h = ln(tape, p, h, l)?;
            }
            linear(tape, p, h, out)
        }
    }
}

/// `GELU(x·W1)·W2`.
pub fn mlp_ffn(tape: &mut Tape, x: Var, w1: Var, w2: Var) -> Result<Var> {
    let h = tape.matmul(x, w1)?;
    let h = tape.gelu(h)?;
    tape.matmul(h, w2)
}

/// `(SiLU(x·U) ⊙ x·V)·W`, with an optional `(gain, bias)` layer norm on the
/// hidden activation before `W`.
pub fn swiglu_ffn(
    tape: &mut Tape,
    x: Var,
    u: Var,
    v: Var,
    w: Var,
    inner_ln: Option<(Var, Var)>,
) -> Result<Var> {
    let g = tape.matmul(x, u)?;
    let g = tape.silu(g)?;
    let val = tape.matmul(x, v)?;
    let mut h = tape.mul(g, val)?;
    if let Some((gain, bias)) = inner_ln {
        h = tape.layer_norm(h, gain, bias, LN_EPS)?;
    }
    tape.matmul(h, w)
}
