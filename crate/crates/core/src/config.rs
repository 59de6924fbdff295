//! Run configuration: flat `key = value` files (or a flat JSON object),
//! presets and command-line overrides.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::arch::TrVConfig;
use crate::error::{Error, Result};
use crate::optim::{AdamWConfig, LrSchedule};
use crate::teacher::TeacherKind;

/// Accepted keys with a one-line description, in documentation order.
pub const KEYS: &[(&str, &str)] = &[
    (
        "preset",
        "architecture preset: toy, ti, s, b, l (applied before other keys)",
    ),
    ("depth", "number of blocks"),
    ("width", "token width"),
    ("heads", "attention heads"),
    ("ffn_type", "swiglu | mlp"),
    (
        "ffn_hidden",
        "feedforward hidden width (default 8w/3 for swiglu, 4w for mlp)",
    ),
    (
        "ffn_bias",
        "biases in the feedforward layers (true | false)",
    ),
    ("norm_scheme", "sub_ln | pre_ln | post_ln"),
    ("pos_embed", "rope2d | abs_pe | rel_pe2d | none"),
    ("init_scheme", "xavier_normal | beit_style"),
    ("drop_path", "maximum stochastic-depth rate (last block)"),
    ("patch_size", "patch side in pixels"),
    ("in_chans", "input channels"),
    ("grid_h", "patch rows"),
    ("grid_w", "patch columns"),
    ("class_token", "prepend a class token (true | false)"),
    (
        "mask_token",
        "learned [MASK] embedding (false: masked patches are zeroed)",
    ),
    ("rope_base", "RoPE frequency base"),
    (
        "teacher",
        "target generator: frozen (per patch) | pooled (image mean)",
    ),
    ("teacher_dim", "teacher feature width"),
    ("mask_ratio", "fraction of patches to mask"),
    ("peak_lr", "learning rate at the end of warmup"),
    ("min_lr", "learning rate at the end of the cosine decay"),
    ("warmup_steps", "linear warmup length"),
    ("total_steps", "schedule length"),
    ("layer_decay", "layer-wise lr decay factor in (0, 1]"),
    ("batch_size", "samples per step"),
    ("wd", "decoupled weight decay"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("eps", "Adam denominator epsilon"),
    (
        "seed",
        "training seed (student and teacher init, masks, drop path)",
    ),
    ("data_seed", "synthetic dataset seed"),
    ("n_samples", "synthetic dataset size"),
    (
        "ckpt_every",
        "checkpoint interval in steps (0: only at the end)",
    ),
    ("out_dir", "directory for metrics.jsonl and checkpoints"),
];

/// Raw key/value settings before interpretation.
pub type Settings = BTreeMap<String, String>;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: TrVConfig,
    pub preset: String,
    pub teacher: TeacherKind,
    pub mask_ratio: f64,
    pub schedule: LrSchedule,
    pub layer_decay: f64,
    pub batch_size: usize,
    pub adamw: AdamWConfig,
    pub seed: u64,
    pub data_seed: u64,
    pub n_samples: usize,
    pub ckpt_every: u64,
    pub out_dir: PathBuf,
}

/// Toy architecture on an 8×8 grid, large enough that 40% block masks
/// leave visible patches.
pub fn desk_model() -> TrVConfig {
    TrVConfig {
        grid_h: 8,
        grid_w: 8,
        ..TrVConfig::toy()
    }
}

pub fn model_preset(name: &str) -> Result<TrVConfig> {
    match name {
        "toy" => Ok(desk_model()),
        other => TrVConfig::preset(other).map_err(|_| {
            Error::config(
                "preset",
                format!("unknown preset {other:?}; expected one of toy, ti, s, b, l"),
            )
        }),
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: desk_model(),
            preset: "toy".into(),
            teacher: TeacherKind::Pooled,
            mask_ratio: 0.4,
            schedule: LrSchedule {
                peak_lr: 3e-3,
                warmup_steps: 25,
                total_steps: 500,
                floor_lr: 1e-5,
            },
            layer_decay: 1.0,
            batch_size: 8,
            adamw: AdamWConfig::default(),
            seed: 0,
            data_seed: 0,
            n_samples: 8,
            ckpt_every: 100,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::config(key, format!("cannot parse {value:?}: {e}")))
}

impl RunConfig {
    /// Builds a configuration from settings: defaults, then the preset (if
    /// any), then every other key. Unknown keys are rejected.
    pub fn from_settings(settings: &Settings) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(name) = settings.get("preset") {
            cfg.model = model_preset(name)?;
            cfg.preset = name.clone();
        }
        for (key, value) in settings {
            if key != "preset" {
                cfg.set(key, value)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let m = &mut self.model;
        match key {
            "depth" => m.depth = parse(key, value)?,
            "width" => m.width = parse(key, value)?,
            "heads" => m.num_heads = parse(key, value)?,
            "ffn_type" => m.ffn_type = parse(key, value)?,
            "ffn_hidden" => m.ffn_hidden = Some(parse(key, value)?),
            "ffn_bias" => m.ffn_bias = parse(key, value)?,
            "norm_scheme" => m.norm_scheme = parse(key, value)?,
            "pos_embed" => m.pos_embed = parse(key, value)?,
            "init_scheme" => m.init_scheme = parse(key, value)?,
            "drop_path" => m.drop_path_rate = parse(key, value)?,
            "patch_size" => m.patch_size = parse(key, value)?,
            "in_chans" => m.in_chans = parse(key, value)?,
            "grid_h" => m.grid_h = parse(key, value)?,
            "grid_w" => m.grid_w = parse(key, value)?,
            "class_token" => m.class_token = parse(key, value)?,
            "mask_token" => m.mask_token_enabled = parse(key, value)?,
            "rope_base" => m.rope_base = parse(key, value)?,
            "teacher_dim" => m.teacher_dim = parse(key, value)?,
            "teacher" => self.teacher = parse(key, value)?,
            "mask_ratio" => self.mask_ratio = parse(key, value)?,
            "peak_lr" => self.schedule.peak_lr = parse(key, value)?,
            "min_lr" => self.schedule.floor_lr = parse(key, value)?,
            "warmup_steps" => self.schedule.warmup_steps = parse(key, value)?,
            "total_steps" => self.schedule.total_steps = parse(key, value)?,
            "layer_decay" => self.layer_decay = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "wd" => self.adamw.weight_decay = parse(key, value)?,
            "beta1" => self.adamw.beta1 = parse(key, value)?,
            "beta2" => self.adamw.beta2 = parse(key, value)?,
            "eps" => self.adamw.eps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            "n_samples" => self.n_samples = parse(key, value)?,
            "ckpt_every" => self.ckpt_every = parse(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "preset" => {
                return Err(Error::config(key, "must be applied through from_settings"));
            }
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.adamw.validate()?;
        self.schedule.validate()?;
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::config(
                "mask_ratio",
                format!("must lie in (0, 1), got {}", self.mask_ratio),
            ));
        }
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return Err(Error::config(
                "layer_decay",
                format!("must lie in (0, 1], got {}", self.layer_decay),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.n_samples == 0 {
            return Err(Error::config("n_samples", "must be >= 1"));
        }
        Ok(())
    }

    /// Every key with its current value; `from_settings` of the result
    /// reproduces `self`.
    pub fn to_settings(&self) -> Settings {
        let m = &self.model;
        let mut s = Settings::new();
        let mut put = |k: &str, v: String| {
            s.insert(k.to_string(), v);
        };
        put("preset", self.preset.clone());
        put("depth", m.depth.to_string());
        put("width", m.width.to_string());
        put("heads", m.num_heads.to_string());
        put("ffn_type", m.ffn_type.to_string());
        if let Some(h) = m.ffn_hidden {
            put("ffn_hidden", h.to_string());
        }
        put("ffn_bias", m.ffn_bias.to_string());
        put("norm_scheme", m.norm_scheme.to_string());
        put("pos_embed", m.pos_embed.to_string());
        put("init_scheme", m.init_scheme.to_string());
        put("drop_path", m.drop_path_rate.to_string());
        put("patch_size", m.patch_size.to_string());
        put("in_chans", m.in_chans.to_string());
        put("grid_h", m.grid_h.to_string());
        put("grid_w", m.grid_w.to_string());
        put("class_token", m.class_token.to_string());
        put("mask_token", m.mask_token_enabled.to_string());
        put("rope_base", m.rope_base.to_string());
        put("teacher", self.teacher.as_str().to_string());
        put("teacher_dim", m.teacher_dim.to_string());
        put("mask_ratio", self.mask_ratio.to_string());
        put("peak_lr", self.schedule.peak_lr.to_string());
        put("min_lr", self.schedule.floor_lr.to_string());
        put("warmup_steps", self.schedule.warmup_steps.to_string());
        put("total_steps", self.schedule.total_steps.to_string());
        put("layer_decay", self.layer_decay.to_string());
        put("batch_size", self.batch_size.to_string());
        put("wd", self.adamw.weight_decay.to_string());
        put("beta1", self.adamw.beta1.to_string());
        put("beta2", self.adamw.beta2.to_string());
        put("eps", self.adamw.eps.to_string());
        put("seed", self.seed.to_string());
        put("data_seed", self.data_seed.to_string());
        put("n_samples", self.n_samples.to_string());
        put("ckpt_every", self.ckpt_every.to_string());
        put("out_dir", self.out_dir.display().to_string());
        s
    }

    /// `key = value` lines in key order.
    pub fn to_text(&self) -> String {
        settings_text(&self.to_settings())
    }

    /// [`RunConfig::to_text`] without `out_dir`, so the same run written to
    /// different directories stores identical bytes.
    pub fn run_text(&self) -> String {
        let mut s = self.to_settings();
        s.remove("out_dir");
        settings_text(&s)
    }
}

fn settings_text(s: &Settings) -> String {
    s.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are
/// skipped, repeated keys are an error.
pub fn parse_settings(text: &str, path: &Path) -> Result<Settings> {
    let mut out = Settings::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err(format!("expected `key = value`, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(parse_err("empty key".into()));
        }
        if out.insert(key.to_string(), value.to_string()).is_some() {
            return Err(parse_err(format!("key {key:?} given twice")));
        }
    }
    Ok(out)
}

/// Parses a flat JSON object whose values are strings, numbers or booleans.
pub fn parse_json_settings(text: &str, path: &Path) -> Result<Settings> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| parse_err(e.line(), e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| parse_err(1, "top level must be an object".into()))?;
    obj.iter()
        .map(|(k, v)| {
            let s = match v {
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Number(n) => n.to_string(),
                serde_json::Value::Bool(b) => b.to_string(),
                _ => {
                    return Err(Error::config(
                        k,
                        "value must be a string, number or boolean",
                    ))
                }
            };
            Ok((k.clone(), s))
        })
        .collect()
}

/// Reads settings from `path`, as JSON when the extension is `.json` or
/// the first non-blank character is `{`, else as `key = value` text.
pub fn load_settings(path: &Path) -> Result<Settings> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let is_json =
        path.extension().is_some_and(|e| e == "json") || text.trim_start().starts_with('{');
    if is_json {
        parse_json_settings(&text, path)
    } else {
        parse_settings(&text, path)
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::from_settings(&load_settings(path)?)
}
