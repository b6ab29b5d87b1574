use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use normfuse::block::run_folded;
use normfuse::cli::{FoldedWeightsFile, RunConfig};
use normfuse::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("configs")
        .join(name)
}

fn normfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_normfuse"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn schema_validator() -> jsonschema::Validator {
    let text = std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas/report.schema.json"),
    )
    .unwrap();
    jsonschema::validator_for(&serde_json::from_str(&text).unwrap()).unwrap()
}

fn assert_schema_valid(stdout: &[u8]) {
    let report: Value = serde_json::from_slice(stdout).unwrap();
    let validator = schema_validator();
    let errors: Vec<String> = validator
        .iter_errors(&report)
        .map(|e| format!("{e} at {}", e.instance_path))
        .collect();
    assert!(errors.is_empty(), "schema errors: {errors:#?}");
}

/// Writes `cfg` with one field replaced.
fn variant_config(dir: &Path, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let mut v: Value =
        serde_json::from_str(&std::fs::read_to_string(config("small-gelu.json")).unwrap()).unwrap();
    edit(&mut v);
    let path = dir.join("edited.json");
    std::fs::write(&path, v.to_string()).unwrap();
    path
}

#[test]
fn verify_default_config_passes() {
    let out = normfuse(&["verify", path_str(&config("default.json")), "--quiet"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_schema_valid(&out.stdout);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["seed"], 42);
    for site in r["equivalence"]["sites"].as_array().unwrap() {
        assert!(site["max_rel_err"].as_f64().unwrap() <= 1e-10, "{site}");
    }
}

#[test]
fn verify_with_zero_tolerance_fails_numerically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = variant_config(dir.path(), |v| v["tolerance"] = 0.0.into());
    let out = normfuse(&["verify", path_str(&cfg), "--quiet"]);
    assert_eq!(out.status.code(), Some(1));
    assert_schema_valid(&out.stdout);
}

#[test]
fn config_errors_exit_with_usage_status() {
    let dir = tempfile::tempdir().unwrap();
    let heads = variant_config(dir.path(), |v| v["block"]["n_heads"] = 5.into());
    assert_eq!(
        normfuse(&["verify", path_str(&heads)]).status.code(),
        Some(2)
    );

    let unknown = variant_config(dir.path(), |v| v["unexpected"] = true.into());
    assert_eq!(
        normfuse(&["verify", path_str(&unknown)]).status.code(),
        Some(2)
    );

    let missing = dir.path().join("nope.json");
    assert_eq!(
        normfuse(&["simulate", path_str(&missing)]).status.code(),
        Some(2)
    );

    assert_eq!(normfuse(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn seed_flag_overrides_config() {
    let out = normfuse(&[
        "verify",
        path_str(&config("small-gelu.json")),
        "--seed",
        "99",
    ]);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["seed"], 99);
    assert_eq!(r["config"]["seed"], 99);
}

#[test]
fn simulate_default_lands_in_band_and_is_deterministic() {
    let cfg = config("default.json");
    let a = normfuse(&["simulate", path_str(&cfg), "--both", "--quiet"]);
    let b = normfuse(&["simulate", path_str(&cfg), "--both", "--quiet"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    assert!(a.stderr.is_empty());
    assert_schema_valid(&a.stdout);
    let r: Value = serde_json::from_slice(&a.stdout).unwrap();
    let speedup = r["latency"]["speedup_percent"].as_f64().unwrap();
    assert!((15.0..=20.0).contains(&speedup), "{speedup}");
}

#[test]
fn free_collectives_leave_only_read_cycles_to_hide() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = variant_config(dir.path(), |v| {
        let cm = &mut v["cost_model"];
        cm["collective_alpha"] = 0.into();
        cm["collective_beta"] = 0.into();
        cm["sync_overhead"] = 0.into();
        cm["vector_elems_per_cycle"] = 1e15.into();
    });
    let out = normfuse(&["simulate", path_str(&cfg), "--both"]);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    let conv = r["latency"]["conventional_total"].as_u64().unwrap();
    let fused = r["latency"]["fused_total"].as_u64().unwrap();
    // Each reduction still costs one cycle to read its input.
    assert!(conv - fused <= 3, "{conv} vs {fused}");
}

#[test]
fn simulate_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("timeline.csv");
    let out = normfuse(&[
        "simulate",
        path_str(&config("small-gelu.json")),
        "--fused",
        "--csv",
        path_str(&csv),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("node_id,kind,engine,start_cycle,end_cycle")
    );
    assert_eq!(lines.count(), 18);

    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(r.get("latency").is_none());
    assert!(r["timelines"].get("conventional").is_none());

    let out = normfuse(&[
        "simulate",
        path_str(&config("small-gelu.json")),
        "--both",
        "--csv",
        path_str(&csv),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(dir.path().join("timeline.conventional.csv").exists());
    assert!(dir.path().join("timeline.fused.csv").exists());
}

#[test]
fn conflicting_form_flags_are_rejected() {
    let out = normfuse(&[
        "simulate",
        path_str(&config("small-gelu.json")),
        "--fused",
        "--both",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fold_is_idempotent_and_round_trips_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = config("small-gelu.json");
    let weights = dir.path().join("weights.json");
    let (f1, f2) = (dir.path().join("f1.json"), dir.path().join("f2.json"));
    assert_eq!(
        normfuse(&[
            "init-weights",
            path_str(&cfg_path),
            path_str(&weights),
            "--quiet"
        ])
        .status
        .code(),
        Some(0)
    );
    for out in [&f1, &f2] {
        let o = normfuse(&[
            "fold",
            path_str(&cfg_path),
            path_str(&weights),
            path_str(out),
        ]);
        assert_eq!(o.status.code(), Some(0));
    }
    let bytes = std::fs::read(&f1).unwrap();
    assert_eq!(bytes, std::fs::read(&f2).unwrap());

    let cfg = RunConfig::load(&cfg_path).unwrap();
    let loaded = FoldedWeightsFile::from_json(std::str::from_utf8(&bytes).unwrap()).unwrap();
    let in_memory =
        normfuse::cli::fold(&cfg, &normfuse::cli::load_weights(&weights).unwrap()).unwrap();
    assert_eq!(loaded, in_memory);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let b = &cfg.block;
    let x = Matrix::new(
        b.seq_len,
        b.d_model,
        (0..b.seq_len * b.d_model)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    )
    .unwrap();
    let from_disk = run_folded(b, &loaded.folded, &x).unwrap();
    let direct = run_folded(b, &in_memory.folded, &x).unwrap();
    assert_eq!(from_disk, direct);
}

#[test]
fn fold_with_mismatched_weights_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("weights.json");
    normfuse(&[
        "init-weights",
        path_str(&config("small-gelu.json")),
        path_str(&weights),
    ]);
    let out = normfuse(&[
        "fold",
        path_str(&config("default.json")),
        path_str(&weights),
        path_str(&dir.path().join("out.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn identity_norm_fold_is_centered_weights() {
    let cfg = RunConfig::load(&config("small-gelu.json")).unwrap();
    let mut w = normfuse::cli::random_weights(&cfg).unwrap();
    let d = cfg.block.d_model;
    let ident = normfuse::norms::LayerNormParams::identity(d, cfg.block.epsilon_ln).unwrap();
    w.ln1 = normfuse::block::NormParams::LayerNorm(ident);
    let folded = normfuse::cli::fold(&cfg, &w).unwrap().folded;
    let normfuse::block::FoldedProjection::LayerNorm(q) = folded.q else {
        panic!("expected a layernorm fold");
    };
    assert!(q.folded_bias.iter().all(|&b| b == 0.0));
    let col_means = w.w_q.column_sums();
    for r in 0..d {
        for c in 0..d {
            let centered = w.w_q.get(r, c) - col_means[c] / d as f64;
            assert!((q.folded_weight.get(r, c) - centered).abs() <= 1e-15);
        }
    }
}
