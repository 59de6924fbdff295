use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trv_core::arch::{
    count_macs, count_params, FfnType, InitScheme, NormScheme, PosEmbed, TrVConfig,
};
use trv_core::checkpoint::{Checkpoint, Payload};
use trv_core::config::{load_settings, RunConfig, Settings, KEYS};
use trv_core::gradcheck::{gradcheck_mim, FdScheme};
use trv_core::mim::blockwise_mask;
use trv_core::train::{run_pretrain, RunOptions};

#[derive(Parser)]
#[command(
    name = "trv",
    version,
    about = "TrV encoder with masked-image-modeling pre-training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train on synthetic data, writing metrics.jsonl and checkpoints.
    Pretrain(PretrainArgs),
    /// Compare reverse-mode gradients of the MIM objective with finite differences.
    Gradcheck(GradcheckArgs),
    /// Print the analytic parameter count of a preset.
    CountParams(PresetArgs),
    /// Print the analytic multiply-accumulate count of a preset.
    CountMacs {
        #[command(flatten)]
        preset: PresetArgs,
        /// Tokens per image.
        #[arg(long, default_value_t = 196)]
        tokens: u64,
    },
    /// Sample block-wise masks and print masked-fraction statistics.
    MaskStats(MaskStatsArgs),
    /// List the entries of a checkpoint.
    InspectCkpt { path: PathBuf },
}

#[derive(clap::Args)]
struct PretrainArgs {
    /// Config file: `key = value` lines or a flat JSON object.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training seed; overrides `seed` in the config.
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    total_steps: Option<u64>,
    /// Any config key, repeatable: `--set peak_lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many completed steps (the schedule still spans `total_steps`).
    #[arg(long)]
    stop_after: Option<u64>,
}

#[derive(clap::Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    /// Patch grid side.
    #[arg(long, default_value_t = 4)]
    grid: usize,
    #[arg(long, default_value = "swiglu")]
    ffn_type: FfnType,
    #[arg(long, default_value = "sub_ln")]
    norm_scheme: NormScheme,
    #[arg(long, default_value = "rope2d")]
    pos_embed: PosEmbed,
    #[arg(long, default_value = "xavier_normal")]
    init_scheme: InitScheme,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    /// Use the 4th-order central stencil instead of the 2-point one.
    #[arg(long)]
    fourth_order: bool,
    /// Exit with status 1 when the max relative error reaches this value.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(clap::Args)]
struct PresetArgs {
    /// ti, s, b or l.
    #[arg(long)]
    preset: String,
    #[arg(long)]
    teacher_dim: Option<usize>,
}

#[derive(clap::Args)]
struct MaskStatsArgs {
    #[arg(long, default_value_t = 14)]
    grid_h: usize,
    #[arg(long, default_value_t = 14)]
    grid_w: usize,
    #[arg(long, default_value_t = 0.4)]
    ratio: f64,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn preset_config(args: &PresetArgs) -> Result<TrVConfig> {
    let mut cfg = TrVConfig::preset(&args.preset)?;
    if let Some(d) = args.teacher_dim {
        cfg.teacher_dim = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pretrain(args: PretrainArgs) -> Result<()> {
    let mut settings = match &args.config {
        Some(path) => load_settings(path)?,
        None => Settings::new(),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        let k = k.trim();
        if !KEYS.iter().any(|(known, _)| *known == k) {
            bail!("unknown config key {k:?} in --set");
        }
        settings.insert(k.to_string(), v.trim().to_string());
    }
    settings.insert("seed".into(), args.seed.to_string());
    if let Some(p) = args.preset {
        settings.insert("preset".into(), p);
    }
    if let Some(d) = args.out_dir {
        settings.insert("out_dir".into(), d.display().to_string());
    }
    if let Some(t) = args.total_steps {
        settings.insert("total_steps".into(), t.to_string());
    }
    let config = RunConfig::from_settings(&settings)?;
    let out_dir = config.out_dir.clone();
    let summary = run_pretrain(
        config,
        &RunOptions {
            resume: args.resume,
            stop_after: args.stop_after,
        },
    )?;
    match &summary.last {
        Some(m) => println!("step {} loss {:.6} lr {:.3e}", m.step, m.loss, m.lr),
        None => println!("nothing to do: already at step {}", summary.final_step),
    }
    println!("metrics: {}", summary.metrics_path.display());
    for c in &summary.checkpoints {
        println!("checkpoint: {}", c.display());
    }
    println!("out_dir: {}", out_dir.display());
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<bool> {
    let cfg = TrVConfig {
        ffn_type: args.ffn_type,
        norm_scheme: args.norm_scheme,
        pos_embed: args.pos_embed,
        init_scheme: args.init_scheme,
        grid_h: args.grid,
        grid_w: args.grid,
        ..TrVConfig {
            patch_size: 2,
            teacher_dim: 16,
            ..TrVConfig::trv(args.depth, args.width, args.heads)
        }
    };
    let scheme = if args.fourth_order {
        FdScheme::Central4 { h: args.h }
    } else {
        FdScheme::Central2 { h: args.h }
    };
    let r = gradcheck_mim(&cfg, args.seed, scheme)?;
    println!(
        "depth {} width {} heads {} grid {}x{} {}/{}/{}/{}",
        cfg.depth,
        cfg.width,
        cfg.num_heads,
        cfg.grid_h,
        cfg.grid_w,
        cfg.norm_scheme,
        cfg.init_scheme,
        cfg.ffn_type,
        cfg.pos_embed
    );
    println!("coordinates checked: {}", r.n_coords);
    println!("loss: {:.6}", r.loss);
    println!(
        "max rel err: {:.3e} (worst entry {})",
        r.max_rel_error, r.worst_entry
    );
    let ok = r.max_rel_error < args.tol;
    println!("{}", if ok { "PASS" } else { "FAIL" });
    Ok(ok)
}

fn mask_stats(args: MaskStatsArgs) -> Result<()> {
    if args.n == 0 {
        bail!("--n must be >= 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut fractions = Vec::with_capacity(args.n);
    let mut blocks = 0;
    for _ in 0..args.n {
        let plan = blockwise_mask(args.grid_h, args.grid_w, args.ratio, &mut rng)?;
        fractions.push(plan.masked_fraction());
        blocks += plan.blocks.len();
    }
    let n = args.n as f64;
    let mean = fractions.iter().sum::<f64>() / n;
    let std = (fractions.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / n).sqrt();
    let min = fractions.iter().copied().fold(f64::INFINITY, f64::min);
    let max = fractions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    println!(
        "plans: {}  grid: {}x{}  ratio: {}",
        args.n, args.grid_h, args.grid_w, args.ratio
    );
    println!("masked fraction: mean {mean:.4} std {std:.4} min {min:.4} max {max:.4}");
    println!("blocks per plan: {:.2}", blocks as f64 / n);
    Ok(())
}

fn inspect(path: PathBuf) -> Result<()> {
    let ckpt = Checkpoint::load(&path)?;
    if let Ok(step) = ckpt.scalar_u64("step") {
        println!("step: {step}");
    }
    println!("entries: {}", ckpt.entries.len());
    let mut total = 0;
    for e in &ckpt.entries {
        let dtype = match e.payload {
            Payload::F64(_) => "f64",
            Payload::U64(_) => "u64",
            Payload::U8(_) => "u8",
        };
        total += e.payload.len();
        println!("{:<40} {dtype:<4} {:?}", e.name, e.dims);
    }
    println!("elements: {total}");
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Pretrain(a) => pretrain(a)?,
        Command::Gradcheck(a) => return gradcheck(a),
        Command::CountParams(a) => {
            let n = count_params(&preset_config(&a)?);
            println!("{n} ({:.2}M)", n as f64 / 1e6);
        }
        Command::CountMacs { preset, tokens } => {
            let n = count_macs(&preset_config(&preset)?, tokens);
            println!("{n} ({:.2}G)", n as f64 / 1e9);
        }
        Command::MaskStats(a) => mask_stats(a)?,
        Command::InspectCkpt { path } => inspect(path)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
