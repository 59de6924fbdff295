//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Each criterion also has a wall-clock budget.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trv_core::arch::{
    ablation_rows, count_macs, count_params, ffn_hidden_dim, ffn_param_count, FfnType, Mode, Model,
    ParamKind, TrVConfig,
};
use trv_core::autodiff::Tape;
use trv_core::config::RunConfig;
use trv_core::gradcheck::{gradcheck_mim, FdScheme, ABLATION_FD};
use trv_core::metrics::read_metrics;
use trv_core::mim::{blockwise_mask, MIN_BLOCK};
use trv_core::optim::{adamw_step, cosine_lr, AdamWConfig, LrSchedule, OptimizerState, ParamHyper};
use trv_core::rope::{apply_rope, build_rope_table, GridPos, DEFAULT_ROPE_BASE};
use trv_core::tensor::Tensor;
use trv_core::train::{checkpoint_path, run_pretrain, RunOptions};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: String) -> Outcome {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn param_counts() -> Outcome {
    // Ti: the architecture table rounds to 6M; the small-model comparison
    // table gives 5.7M, which is the precision the ±2% band is applied at.
    let refs = [
        ("ti", 5.7e6, 6.0),
        ("s", 22e6, 22.0),
        ("b", 86e6, 86.0),
        ("l", 304e6, 304.0),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, reference, table_m) in refs {
        let n = count_params(&TrVConfig::preset(name).unwrap()) as f64;
        let pass = rel(n, reference) <= 0.02 && (n / 1e6).round() == table_m;
        ok &= pass;
        parts.push(format!(
            "{name}={:.2}M({:+.2}%)",
            n / 1e6,
            100.0 * (n - reference) / reference
        ));
    }
    let hidden: Vec<usize> = [192, 384, 768, 1024]
        .iter()
        .map(|&w| ffn_hidden_dim(w, FfnType::SwiGlu))
        .collect();
    ok &= hidden == [512, 1024, 2048, 2730];
    parts.push(format!("hidden={hidden:?}"));
    check(ok, parts.join(" "))
}

fn mac_counts() -> Outcome {
    let b = count_macs(&TrVConfig::preset("b").unwrap(), 196) as f64;
    let l = count_macs(&TrVConfig::preset("l").unwrap(), 196) as f64;
    check(
        rel(b, 18e9) <= 0.10 && rel(l, 62e9) <= 0.10,
        format!("B={:.2}G L={:.2}G", b / 1e9, l / 1e9),
    )
}

fn ffn_parity() -> Outcome {
    let swiglu = ffn_param_count(FfnType::SwiGlu, 768, 2048, false, false);
    let mlp = ffn_param_count(FfnType::Mlp, 768, 3072, false, false);
    check(swiglu == mlp, format!("swiglu={swiglu} mlp={mlp}"))
}

fn gradient_oracle() -> Outcome {
    let cfg = TrVConfig::toy();
    assert_eq!(
        (cfg.depth, cfg.width, cfg.num_heads, cfg.grid_h, cfg.grid_w),
        (2, 16, 2, 4, 4)
    );
    let r = gradcheck_mim(&cfg, 0, FdScheme::default()).map_err(|e| e.to_string())?;
    check(
        r.max_rel_error < 1e-4,
        format!(
            "max_rel_err={:.2e} worst={} coords={}",
            r.max_rel_error, r.worst_entry, r.n_coords
        ),
    )
}

fn rope_properties() -> Outcome {
    let (g, head_dim) = (14, 64);
    let table = build_rope_table(g, g, head_dim, DEFAULT_ROPE_BASE).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let vec = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..head_dim)
            .map(|_| 2.0 * rng.random::<f64>() - 1.0)
            .collect()
    };
    let rotate = |v: &[f64], p: GridPos| -> Vec<f64> {
        let t = Tensor::new(vec![1, 1, head_dim], v.to_vec()).unwrap();
        apply_rope(&t, &table, &[p]).unwrap().into_data()
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let norm = |a: &[f64]| dot(a, a).sqrt();
    let (mut norm_err, mut shift_err, mut identity) = (0.0f64, 0.0f64, true);
    for _ in 0..1000 {
        let (q, k) = (vec(&mut rng), vec(&mut rng));
        let mut pos = || (rng.random_range(0..g), rng.random_range(0..g));
        let (pq, pk) = (pos(), pos());
        let rq = rotate(&q, pq);
        norm_err = norm_err.max((norm(&rq) - norm(&q)).abs());
        // shift both positions by the largest offset that stays on the grid
        let max_r = g - 1 - pq.0.max(pk.0);
        let max_c = g - 1 - pq.1.max(pk.1);
        let (dr, dc) = (rng.random_range(0..=max_r), rng.random_range(0..=max_c));
        let a = dot(&rq, &rotate(&k, pk));
        let b = dot(
            &rotate(&q, (pq.0 + dr, pq.1 + dc)),
            &rotate(&k, (pk.0 + dr, pk.1 + dc)),
        );
        shift_err = shift_err.max((a - b).abs());
        identity &= rotate(&q, (0, 0))
            .iter()
            .zip(&q)
            .all(|(x, y)| x.to_bits() == y.to_bits());
    }
    check(
        norm_err < 1e-10 && shift_err < 1e-9 && identity,
        format!("norm_err={norm_err:.1e} shift_err={shift_err:.1e} origin_identity={identity}"),
    )
}

fn masking_statistics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut total, mut min_count, mut min_rect, mut unions_ok) =
        (0.0, usize::MAX, usize::MAX, true);
    let n = 10_000;
    for _ in 0..n {
        let plan = blockwise_mask(14, 14, 0.4, &mut rng).map_err(|e| e.to_string())?;
        total += plan.masked_fraction();
        min_count = min_count.min(plan.masked_count());
        let mut union = vec![false; 196];
        for b in &plan.blocks {
            min_rect = min_rect.min(b.area());
            b.cells().for_each(|(r, c)| union[r * 14 + c] = true);
        }
        unions_ok &= union == plan.masked;
    }
    let mean = total / n as f64;
    check(
        min_count >= 79 && (0.40..=0.46).contains(&mean) && min_rect >= MIN_BLOCK && unions_ok,
        format!("plans={n} mean_fraction={mean:.4} min_count={min_count} min_rect={min_rect} union_of_rects={unions_ok}"),
    )
}

fn optimizer_algebra() -> Outcome {
    let model = Model::new(TrVConfig::toy()).unwrap();
    let mut params = model.init_params(&mut ChaCha8Rng::seed_from_u64(1));
    let orig = params.clone();
    let hyper: Vec<ParamHyper> = model
        .layout
        .specs
        .iter()
        .map(|s| ParamHyper {
            decay: s.kind.decays(),
            lr_scale: 1.0,
        })
        .collect();
    let grads: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut state = OptimizerState::new(AdamWConfig::default(), &params);
    let (lr, wd) = (0.1, AdamWConfig::default().weight_decay);
    adamw_step(&mut state, &mut params, &grads, lr, &hyper).map_err(|e| e.to_string())?;
    let mut decay_ok = true;
    let mut exempt_ok = true;
    for ((spec, new), old) in model.layout.specs.iter().zip(&params).zip(&orig) {
        if spec.kind == ParamKind::Weight {
            decay_ok &= new
                .data()
                .iter()
                .zip(old.data())
                .all(|(a, b)| *a == b * (1.0 - lr * wd));
        } else {
            exempt_ok &= new == old;
        }
    }
    let s = LrSchedule {
        peak_lr: 1.5e-3,
        warmup_steps: 100,
        total_steps: 1000,
        floor_lr: 1e-6,
    };
    let peak = cosine_lr(100, &s);
    let floor = cosine_lr(1000, &s);
    let sched_ok = peak == 1.5e-3 && (floor - 1e-6).abs() < 1e-18;
    check(
        decay_ok && exempt_ok && sched_ok,
        format!("decayed_exact={decay_ok} exempt_untouched={exempt_ok} lr(warmup)={peak:e} lr(total)={floor:e}"),
    )
}

fn toy_convergence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        ckpt_every: 0,
        out_dir: dir.path().to_path_buf(),
        ..RunConfig::default()
    };
    let setup = format!(
        "samples={} teacher={} teacher_dim={} steps={} seed={}",
        cfg.n_samples,
        cfg.teacher.as_str(),
        cfg.model.teacher_dim,
        cfg.schedule.total_steps,
        cfg.seed
    );
    run_pretrain(cfg, &RunOptions::default()).map_err(|e| e.to_string())?;
    let losses: Vec<f64> = read_metrics(&dir.path().join("metrics.jsonl"))
        .map_err(|e| e.to_string())?
        .iter()
        .map(|m| m.loss)
        .collect();
    let means: Vec<f64> = losses
        .chunks(50)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    let strictly = means.windows(2).all(|w| w[1] < w[0]);
    let last = *losses.last().unwrap();
    let shown: Vec<String> = means.iter().map(|m| format!("{m:.4}")).collect();
    check(
        losses.len() == 500 && strictly && last < -0.9,
        format!(
            "{setup} block_means=[{}] strictly_decreasing={strictly} final={last:.4}",
            shown.join(",")
        ),
    )
}

fn run_config(dir: &Path) -> RunConfig {
    RunConfig {
        schedule: LrSchedule {
            total_steps: 200,
            ..RunConfig::default().schedule
        },
        ckpt_every: 100,
        out_dir: dir.to_path_buf(),
        ..RunConfig::default()
    }
}

fn determinism_and_resume() -> Outcome {
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let err = |e: trv_core::error::Error| e.to_string();
    run_pretrain(run_config(dirs[0].path()), &RunOptions::default()).map_err(err)?;
    run_pretrain(run_config(dirs[1].path()), &RunOptions::default()).map_err(err)?;
    let split = dirs[2].path();
    run_pretrain(
        run_config(split),
        &RunOptions {
            stop_after: Some(100),
            ..Default::default()
        },
    )
    .map_err(err)?;
    run_pretrain(
        run_config(split),
        &RunOptions {
            resume: Some(checkpoint_path(split, 100)),
            ..Default::default()
        },
    )
    .map_err(err)?;

    let metrics = |d: &Path| read_metrics(&d.join("metrics.jsonl")).unwrap();
    let same = |a: &[trv_core::metrics::StepMetrics], b: &[trv_core::metrics::StepMetrics]| {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.same_run_values(y))
    };
    let ckpt = |d: &Path, s| std::fs::read(checkpoint_path(d, s)).unwrap();
    let (m0, m1, m2) = (
        metrics(dirs[0].path()),
        metrics(dirs[1].path()),
        metrics(split),
    );
    let runs_equal = same(&m0, &m1) && m0.len() == 200;
    let ckpts_equal = [100, 200]
        .iter()
        .all(|&s| ckpt(dirs[0].path(), s) == ckpt(dirs[1].path(), s));
    let resume_equal = same(&m0, &m2) && ckpt(dirs[0].path(), 200) == ckpt(split, 200);
    check(
        runs_equal && ckpts_equal && resume_equal,
        format!("identical_metrics={runs_equal} identical_checkpoints={ckpts_equal} resume_200_eq_100+100={resume_equal}"),
    )
}

fn ablation_rows_constructible() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for (i, row) in ablation_rows().iter().enumerate() {
        let cfg = row.apply(&TrVConfig {
            drop_path_rate: 0.1,
            ..TrVConfig::toy()
        });
        let model = Model::new(cfg.clone()).map_err(|e| e.to_string())?;
        let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(i as u64));
        let mut tape = Tape::new();
        let p = model
            .record(&mut tape, &params)
            .map_err(|e| e.to_string())?;
        let x = tape.constant(Tensor::full(&[cfg.num_patches(), cfg.width], 0.1));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = model
            .encoder_forward(&mut tape, &p, x, &mut Mode::Train(&mut rng))
            .map_err(|e| e.to_string())?;
        let finite = tape.value(y).all_finite();
        let r = gradcheck_mim(
            &TrVConfig {
                drop_path_rate: 0.0,
                ..cfg
            },
            i as u64,
            ABLATION_FD,
        )
        .map_err(|e| e.to_string())?;
        let pass = finite && r.max_rel_error < 1e-4;
        ok &= pass;
        parts.push(format!("{}:{:.1e}", row.label(), r.max_rel_error));
    }
    check(ok, parts.join(" "))
}

fn main() {
    type Criterion = (u32, &'static str, u64, fn() -> Outcome);
    let criteria: [Criterion; 10] = [
        (1, "parameter counts", 1, param_counts),
        (2, "MAC counts", 1, mac_counts),
        (3, "SwiGLU/MLP parity", 1, ffn_parity),
        (4, "gradient oracle", 60, gradient_oracle),
        (5, "RoPE properties", 10, rope_properties),
        (6, "masking statistics", 30, masking_statistics),
        (7, "optimizer algebra", 1, optimizer_algebra),
        (8, "toy convergence", 300, toy_convergence),
        (9, "determinism & resume", 300, determinism_and_resume),
        (
            10,
            "ablation constructibility",
            120,
            ablation_rows_constructible,
        ),
    ];
    let mut failed = 0;
    for (id, name, budget, run) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(budget);
        let (pass, detail) = match outcome {
            Ok(d) => (in_time, d),
            Err(d) => (false, d),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "{} [{id:>2}] {name}: {detail} ({:.2}s / budget {budget}s)",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
