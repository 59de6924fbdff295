use std::path::Path;
use std::process::{Command, Output};

fn trv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trv"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn short_run(dir: &Path, seed: &str) -> Output {
    trv(&[
        "pretrain",
        "--seed",
        seed,
        "--total-steps",
        "12",
        "--set",
        "warmup_steps=3",
        "--set",
        "ckpt_every=6",
        "--set",
        "batch_size=2",
        "--out-dir",
        dir.to_str().unwrap(),
    ])
}

fn metrics_without_wall(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_ms");
            v
        })
        .collect()
}

#[test]
fn count_params_base_preset() {
    let o = trv(&["count-params", "--preset", "b"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let n: f64 = stdout(&o)
        .split_whitespace()
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!((n / 86e6 - 1.0).abs() < 0.02, "{n}");
}

#[test]
fn count_macs_reports_giga() {
    let o = trv(&["count-macs", "--preset", "l", "--tokens", "196"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("G)"));
}

#[test]
fn unknown_preset_is_runtime_error() {
    let o = trv(&["count-params", "--preset", "xl"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("preset"));
}

#[test]
fn gradcheck_toy_passes() {
    let o = trv(&["gradcheck"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("PASS"));
}

#[test]
fn gradcheck_fails_below_tolerance() {
    let o = trv(&[
        "gradcheck",
        "--depth",
        "1",
        "--width",
        "8",
        "--tol",
        "1e-14",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(trv(&["bogus"]).status.code(), Some(2));
    assert_eq!(trv(&["pretrain"]).status.code(), Some(2));
    assert_eq!(
        trv(&["gradcheck", "--ffn-type", "gelu"]).status.code(),
        Some(2)
    );
}

#[test]
fn mask_stats_near_target() {
    let o = trv(&["mask-stats", "--n", "500", "--seed", "4"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let mean: f64 = out
        .split("mean ")
        .nth(1)
        .and_then(|s| s.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!((0.4..0.5).contains(&mean), "{out}");
}

#[test]
fn pretrain_writes_artifacts_reproducibly() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        let o = short_run(d, "7");
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let ma = metrics_without_wall(&a.path().join("metrics.jsonl"));
    assert_eq!(ma.len(), 12);
    assert_eq!(ma, metrics_without_wall(&b.path().join("metrics.jsonl")));
    for name in ["ckpt_000006.trvc", "ckpt_000012.trvc"] {
        assert_eq!(
            std::fs::read(a.path().join(name)).unwrap(),
            std::fs::read(b.path().join(name)).unwrap()
        );
    }
    assert!(a.path().join("config.txt").exists());

    let o = trv(&[
        "inspect-ckpt",
        a.path().join("ckpt_000012.trvc").to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.starts_with("step: 12"), "{out}");
    assert!(out.contains("param/patch_embed.weight"));
    assert!(out.contains("adam_v/"));
}

#[test]
fn pretrain_resume_continues_metrics() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path().to_str().unwrap();
    let base = [
        "pretrain",
        "--seed",
        "1",
        "--total-steps",
        "8",
        "--set",
        "warmup_steps=2",
        "--out-dir",
        dir,
    ];
    let o = trv(&[&base[..], &["--stop-after", "4"]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = d.path().join("ckpt_000004.trvc");
    let o = trv(&[&base[..], &["--resume", ckpt.to_str().unwrap()]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    let m = metrics_without_wall(&d.path().join("metrics.jsonl"));
    let steps: Vec<u64> = m.iter().map(|v| v["step"].as_u64().unwrap()).collect();
    assert_eq!(steps, (1..=8).collect::<Vec<_>>());
}

#[test]
fn config_file_with_unknown_key_names_it() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.cfg");
    std::fs::write(&cfg, "preset = toy\nlearning_rate = 0.1\n").unwrap();
    let o = trv(&["pretrain", "--seed", "0", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn json_config_is_accepted() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.json");
    let out = d.path().join("out");
    std::fs::write(
        &cfg,
        format!(
            r#"{{"total_steps": 2, "warmup_steps": 1, "batch_size": 2, "out_dir": {:?}}}"#,
            out.to_str().unwrap()
        ),
    )
    .unwrap();
    let o = trv(&["pretrain", "--seed", "0", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(metrics_without_wall(&out.join("metrics.jsonl")).len(), 2);
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("bad.trvc");
    std::fs::write(&p, b"TRVC garbage").unwrap();
    let o = trv(&["inspect-ckpt", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("checkpoint"), "{}", stderr(&o));
}
