//! Closed-form parameter and multiply-accumulate accounting.
//!
//! These formulas are written independently of [`super::layout`]; the tests
//! check that both agree on every ablation configuration.

use super::config::{FfnType, NormScheme, PosEmbed, TrVConfig};
use super::layout::rel_table_len;

/// Parameters of one feedforward sublayer (weights, optional biases,
/// optional inner layer norm).
pub fn ffn_param_count(
    ffn_type: FfnType,
    width: usize,
    hidden: usize,
    bias: bool,
    inner_ln: bool,
) -> u64 {
    let (w, h) = (width as u64, hidden as u64);
    let weights = match ffn_type {
        FfnType::Mlp => 2 * w * h,
        FfnType::SwiGlu => 3 * w * h,
    };
    let biases = if bias {
        match ffn_type {
            FfnType::Mlp => h + w,
            FfnType::SwiGlu => 2 * h + w,
        }
    } else {
        0
    };
    weights + biases + if inner_ln { 2 * h } else { 0 }
}

/// Total learnable parameters: patch embedding, tokens, position tables,
/// every block and the MIM head (layer norm plus bias-free projection).
pub fn count_params(config: &TrVConfig) -> u64 {
    let w = config.width as u64;
    let n = config.num_patches() as u64 + u64::from(config.class_token);

    let mut total = config.patch_dim() as u64 * w + w;
    if config.mask_token_enabled {
        total += w;
    }
    if config.class_token {
        total += w;
    }
    if config.pos_embed == PosEmbed::AbsPe {
        total += n * w;
    }

    let attn = 4 * (w * w + w);
    let norms = 2 * 2 * w;
    let rel = if config.pos_embed == PosEmbed::RelPe2d {
        rel_table_len(config) as u64 * config.num_heads as u64
    } else {
        0
    };
    let ffn = ffn_param_count(
        config.ffn_type,
        config.width,
        config.hidden_dim(),
        config.ffn_bias,
        config.norm_scheme == NormScheme::SubLn,
    );
    total += config.depth as u64 * (attn + norms + rel + ffn);

    total + 2 * w + w * config.teacher_dim as u64
}

/// Multiply-accumulates of one encoder forward pass over `n_tokens` tokens:
/// patch embedding plus, per block, the four attention projections, the
/// two attention matmuls and the feedforward matmuls.
pub fn count_macs(config: &TrVConfig, n_tokens: u64) -> u64 {
    let n = n_tokens;
    let w = config.width as u64;
    let hidden = config.hidden_dim() as u64;
    let ffn_mats = match config.ffn_type {
        FfnType::Mlp => 2,
        FfnType::SwiGlu => 3,
    };
    let per_block = 4 * w * w * n + 2 * n * n * w + ffn_mats * w * hidden * n;
    let patch_embed = n * config.patch_dim() as u64 * w;
    patch_embed + config.depth as u64 * per_block
}
