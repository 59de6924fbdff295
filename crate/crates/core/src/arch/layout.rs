//! Flat parameter layout: every learnable tensor gets a stable name, shape,
//! weight-decay class and layer-wise lr group. Optimizers, checkpoints and
//! the forward pass all address parameters through this layout.

use super::config::{FfnType, NormScheme, PosEmbed, TrVConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormGain,
    NormBias,
    MaskToken,
    ClassToken,
    PosEmbed,
    RelPosTable,
}

impl ParamKind {
    /// Only matrix weights receive decoupled weight decay.
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    /// Layer-wise lr group: 0 = embeddings, `1..=depth` = blocks, `depth + 1` = head.
    pub group: usize,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LnIdx {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearIdx {
    pub weight: usize,
    pub bias: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
pub enum FfnIdx {
    Mlp {
        fc1: LinearIdx,
        fc2: LinearIdx,
        inner_ln: Option<LnIdx>,
    },
    SwiGlu {
        gate: LinearIdx,
        value: LinearIdx,
        out: LinearIdx,
        inner_ln: Option<LnIdx>,
    },
}

#[derive(Clone, Debug)]
pub struct BlockIdx {
    pub ln1: LnIdx,
    pub q: LinearIdx,
    pub k: LinearIdx,
    pub v: LinearIdx,
    pub proj: LinearIdx,
    pub rel_pos: Option<usize>,
    pub ln2: LnIdx,
    pub ffn: FfnIdx,
}

#[derive(Clone, Debug)]
pub struct ModelLayout {
    pub specs: Vec<ParamSpec>,
    pub patch_embed: LinearIdx,
    pub mask_token: Option<usize>,
    pub class_token: Option<usize>,
    pub abs_pos: Option<usize>,
    pub blocks: Vec<BlockIdx>,
    pub head_ln: LnIdx,
    pub head_proj: usize,
}

/// Entries of the relative-position table for a grid (plus three class-token
/// slots when a class token is present).
pub fn rel_table_len(config: &TrVConfig) -> usize {
    let base = (2 * config.grid_h - 1) * (2 * config.grid_w - 1);
    if config.class_token {
        base + 3
    } else {
        base
    }
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, kind: ParamKind, group: usize) -> usize {
        self.specs.push(ParamSpec {
            name,
            shape,
            kind,
            group,
        });
        self.specs.len() - 1
    }

    fn linear(
        &mut self,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        group: usize,
    ) -> LinearIdx {
        let weight = self.add(
            format!("{prefix}.weight"),
            vec![fan_in, fan_out],
            ParamKind::Weight,
            group,
        );
        let bias = bias.then(|| {
            self.add(
                format!("{prefix}.bias"),
                vec![fan_out],
                ParamKind::Bias,
                group,
            )
        });
        LinearIdx { weight, bias }
    }

    fn ln(&mut self, prefix: &str, dim: usize, group: usize) -> LnIdx {
        LnIdx {
            gain: self.add(
                format!("{prefix}.gain"),
                vec![dim],
                ParamKind::NormGain,
                group,
            ),
            bias: self.add(
                format!("{prefix}.bias"),
                vec![dim],
                ParamKind::NormBias,
                group,
            ),
        }
    }
}

impl ModelLayout {
    pub fn new(config: &TrVConfig) -> Self {
        let w = config.width;
        let hidden = config.hidden_dim();
        let mut b = Builder { specs: Vec::new() };

        let patch_embed = b.linear("patch_embed", config.patch_dim(), w, true, 0);
        let mask_token = config
            .mask_token_enabled
            .then(|| b.add("mask_token".into(), vec![w], ParamKind::MaskToken, 0));
        let class_token = config
            .class_token
            .then(|| b.add("cls_token".into(), vec![w], ParamKind::ClassToken, 0));
        let abs_pos = (config.pos_embed == PosEmbed::AbsPe).then(|| {
            let n = config.num_patches() + usize::from(config.class_token);
            b.add("pos_embed".into(), vec![n, w], ParamKind::PosEmbed, 0)
        });

        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let g = i + 1;
            let p = |s: &str| format!("blocks.{i}.{s}");
            let ln1 = b.ln(&p("norm1"), w, g);
            let q = b.linear(&p("attn.q"), w, w, true, g);
            let k = b.linear(&p("attn.k"), w, w, true, g);
            let v = b.linear(&p("attn.v"), w, w, true, g);
            let rel_pos = (config.pos_embed == PosEmbed::RelPe2d).then(|| {
                b.add(
                    p("attn.rel_pos_table"),
                    vec![rel_table_len(config), config.num_heads],
                    ParamKind::RelPosTable,
                    g,
                )
            });
            let proj = b.linear(&p("attn.proj"), w, w, true, g);
            let ln2 = b.ln(&p("norm2"), w, g);
            let sub_ln = config.norm_scheme == NormScheme::SubLn;
            let ffn = match config.ffn_type {
                FfnType::Mlp => {
                    let fc1 = b.linear(&p("mlp.fc1"), w, hidden, config.ffn_bias, g);
                    let inner_ln = sub_ln.then(|| b.ln(&p("mlp.ffn_ln"), hidden, g));
                    let fc2 = b.linear(&p("mlp.fc2"), hidden, w, config.ffn_bias, g);
                    FfnIdx::Mlp { fc1, fc2, inner_ln }
                }
                FfnType::SwiGlu => {
                    let gate = b.linear(&p("mlp.w_gate"), w, hidden, config.ffn_bias, g);
                    let value = b.linear(&p("mlp.w_value"), w, hidden, config.ffn_bias, g);
                    let inner_ln = sub_ln.then(|| b.ln(&p("mlp.ffn_ln"), hidden, g));
                    let out = b.linear(&p("mlp.w_out"), hidden, w, config.ffn_bias, g);
                    FfnIdx::SwiGlu {
                        gate,
                        value,
                        out,
                        inner_ln,
                    }
                }
            };
            blocks.push(BlockIdx {
                ln1,
                q,
                k,
                v,
                proj,
                rel_pos,
                ln2,
                ffn,
            });
        }

        let head_group = config.depth + 1;
        let head_ln = b.ln("head.norm", w, head_group);
        let head_proj = b.add(
            "head.proj.weight".into(),
            vec![w, config.teacher_dim],
            ParamKind::Weight,
            head_group,
        );

        ModelLayout {
            specs: b.specs,
            patch_embed,
            mask_token,
            class_token,
            abs_pos,
            blocks,
            head_ln,
            head_proj,
        }
    }

    pub fn num_groups(&self) -> usize {
        self.blocks.len() + 2
    }

    pub fn total_params(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }
}
