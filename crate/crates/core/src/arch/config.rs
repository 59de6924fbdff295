use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rope::DEFAULT_ROPE_BASE;

macro_rules! named_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(format!(
                        "expected one of {:?}, got {s:?}",
                        [$($text),+]
                    )),
                }
            }
        }
    };
}

named_enum!(
    /// Feedforward flavour of each block.
    FfnType { Mlp => "mlp", SwiGlu => "swiglu" }
);

named_enum!(
    /// Where layer norms sit inside a block.
    NormScheme { PreLn => "pre_ln", SubLn => "sub_ln", PostLn => "post_ln" }
);

named_enum!(
    /// Positional information injected into the encoder.
    PosEmbed { AbsPe => "abs_pe", Rope2d => "rope2d", RelPe2d => "rel_pe2d", NoPos => "none" }
);

named_enum!(
    InitScheme { BeitStyle => "beit_style", XavierNormal => "xavier_normal" }
);

/// Feedforward hidden width: `4·width` for the MLP, `floor(8·width/3)` for
/// SwiGLU so that its three matrices match the MLP's two.
pub fn ffn_hidden_dim(width: usize, ffn_type: FfnType) -> usize {
    match ffn_type {
        FfnType::Mlp => 4 * width,
        FfnType::SwiGlu => 8 * width / 3,
    }
}

pub const LN_EPS: f64 = 1e-6;

/// Architecture description of one encoder variant plus its MIM head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrVConfig {
    pub depth: usize,
    pub width: usize,
    pub num_heads: usize,
    pub ffn_type: FfnType,
    pub norm_scheme: NormScheme,
    pub pos_embed: PosEmbed,
    pub init_scheme: InitScheme,
    pub patch_size: usize,
    pub in_chans: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Overrides [`ffn_hidden_dim`] when set.
    pub ffn_hidden: Option<usize>,
    pub ffn_bias: bool,
    pub drop_path_rate: f64,
    pub mask_token_enabled: bool,
    pub class_token: bool,
    pub teacher_dim: usize,
    pub rope_base: f64,
}

impl TrVConfig {
    /// The final TrV row: sub-LN, xavier normal, SwiGLU, 2-D RoPE, on a
    /// 224² image with 14² patches.
    pub fn trv(depth: usize, width: usize, num_heads: usize) -> Self {
        TrVConfig {
            depth,
            width,
            num_heads,
            ffn_type: FfnType::SwiGlu,
            norm_scheme: NormScheme::SubLn,
            pos_embed: PosEmbed::Rope2d,
            init_scheme: InitScheme::XavierNormal,
            patch_size: 14,
            in_chans: 3,
            grid_h: 16,
            grid_w: 16,
            ffn_hidden: None,
            ffn_bias: false,
            drop_path_rate: 0.0,
            mask_token_enabled: true,
            class_token: false,
            teacher_dim: 1024,
            rope_base: DEFAULT_ROPE_BASE,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "ti" => Ok(Self::trv(12, 192, 3)),
            "s" => Ok(Self::trv(12, 384, 6)),
            "b" => Ok(Self::trv(12, 768, 12)),
            "l" => Ok(TrVConfig {
                drop_path_rate: 0.1,
                ..Self::trv(24, 1024, 16)
            }),
            other => Err(Error::config(
                "preset",
                format!("unknown preset {other:?}; expected one of ti, s, b, l"),
            )),
        }
    }

    /// Small model used by gradient checks and toy training runs.
    pub fn toy() -> Self {
        TrVConfig {
            patch_size: 2,
            grid_h: 4,
            grid_w: 4,
            teacher_dim: 16,
            ..Self::trv(2, 16, 2)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.num_heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.ffn_hidden
            .unwrap_or_else(|| ffn_hidden_dim(self.width, self.ffn_type))
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_chans
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("depth", self.depth, true),
            ("width", self.width, false),
            ("heads", self.num_heads, false),
            ("patch_size", self.patch_size, false),
            ("in_chans", self.in_chans, false),
            ("grid_h", self.grid_h, false),
            ("grid_w", self.grid_w, false),
            ("teacher_dim", self.teacher_dim, false),
        ];
        for (key, value, zero_ok) in positive {
            if value == 0 && !zero_ok {
                return Err(Error::config(key, "must be >= 1"));
            }
        }
        if !self.width.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "heads",
                format!(
                    "width {} is not divisible by {} heads",
                    self.width, self.num_heads
                ),
            ));
        }
        if self.pos_embed == PosEmbed::Rope2d && !self.head_dim().is_multiple_of(4) {
            return Err(Error::config(
                "heads",
                format!(
                    "2-D RoPE needs head_dim % 4 == 0, got head_dim {}",
                    self.head_dim()
                ),
            ));
        }
        if self.hidden_dim() == 0 {
            return Err(Error::config("ffn_hidden", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::config(
                "drop_path",
                format!("rate must lie in [0, 1), got {}", self.drop_path_rate),
            ));
        }
        if !(self.rope_base > 0.0) {
            return Err(Error::config("rope_base", "must be positive"));
        }
        Ok(())
    }
}

/// One configuration row of the ViT → TrV ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationRow {
    pub norm: NormScheme,
    pub init: InitScheme,
    pub ffn: FfnType,
    pub pos: PosEmbed,
}

impl AblationRow {
    pub fn apply(&self, base: &TrVConfig) -> TrVConfig {
        TrVConfig {
            norm_scheme: self.norm,
            init_scheme: self.init,
            ffn_type: self.ffn,
            pos_embed: self.pos,
            ffn_hidden: None,
            ..base.clone()
        }
    }

    pub fn label(&self) -> String {
        format!("{}/{}/{}/{}", self.norm, self.init, self.ffn, self.pos)
    }
}

/// The eight architecture rows, from plain ViT down to the unstable variants.
pub fn ablation_rows() -> [AblationRow; 8] {
    use FfnType::*;
    use InitScheme::*;
    use NormScheme::*;
    use PosEmbed::*;
    let row = |norm, init, ffn, pos| AblationRow {
        norm,
        init,
        ffn,
        pos,
    };
    [
        row(PreLn, BeitStyle, Mlp, AbsPe),
        row(PreLn, XavierNormal, Mlp, AbsPe),
        row(PreLn, BeitStyle, SwiGlu, AbsPe),
        row(PreLn, XavierNormal, SwiGlu, AbsPe),
        row(SubLn, XavierNormal, SwiGlu, AbsPe),
        row(SubLn, XavierNormal, SwiGlu, Rope2d),
        row(SubLn, XavierNormal, SwiGlu, RelPe2d),
        row(PostLn, XavierNormal, SwiGlu, Rope2d),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hidden_dims_match_variant_table() {
        let got: Vec<usize> = [192, 384, 768, 1024]
            .iter()
            .map(|&w| ffn_hidden_dim(w, FfnType::SwiGlu))
            .collect();
        assert_eq!(got, [512, 1024, 2048, 2730]);
        assert_eq!(ffn_hidden_dim(768, FfnType::Mlp), 3072);
    }

    #[test]
    fn presets_validate() {
        for name in ["ti", "s", "b", "l"] {
            TrVConfig::preset(name).unwrap().validate().unwrap();
        }
        let b = TrVConfig::preset("b").unwrap();
        assert_eq!(
            (b.depth, b.width, b.num_heads, b.hidden_dim()),
            (12, 768, 12, 2048)
        );
        assert!(TrVConfig::preset("xl").is_err());
    }

    #[test]
    fn validation_errors_name_the_key() {
        let mut c = TrVConfig::toy();
        c.width = 10;
        c.num_heads = 3;
        let err = c.validate().unwrap_err();
        assert!(
            matches!(&err, Error::Config { key, .. } if key == "heads"),
            "{err}"
        );

        let mut c = TrVConfig::toy();
        c.width = 12;
        c.num_heads = 2; // head_dim 6
        assert!(c.validate().is_err());
        c.pos_embed = PosEmbed::AbsPe;
        c.validate().unwrap();

        let mut c = TrVConfig::toy();
        c.drop_path_rate = 1.0;
        assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "drop_path"));
    }

    #[test]
    fn enum_names_round_trip() {
        for v in PosEmbed::ALL {
            assert_eq!(v.as_str().parse::<PosEmbed>().unwrap(), *v);
        }
        assert!("gelu".parse::<FfnType>().is_err());
    }

    #[test]
    fn ablation_rows_are_distinct_and_end_with_trv() {
        let rows = ablation_rows();
        for (i, a) in rows.iter().enumerate() {
            for b in &rows[i + 1..] {
                assert_ne!(a, b);
            }
        }
        let trv = TrVConfig::toy();
        assert_eq!(rows[5].apply(&trv), trv);
    }
}
