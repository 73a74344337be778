// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::process::Command;

use actpatch::config::ExperimentConfig;
use actpatch::{io, runner};
use actpatch_core::{ModelConfig, Weights};
use serde_json::{json, Value};

const ASSETS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../assets");

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::toy(2, 2, 16, 50257);
        io::save_model_config(&dir.path().join("config.json"), &cfg).unwrap();
        io::save_weights(
            &dir.path().join("model.safetensors"),
            &cfg,
            &Weights::random(&cfg, 7),
        )
        .unwrap();
        Self { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn config(&self, overrides: Value) -> Value {
        let mut v = json!({
            "model": {
                "config": "config.json",
                "weights": "model.safetensors",
                "vocab": format!("{ASSETS}/gpt2/vocab.json"),
                "merges": format!("{ASSETS}/gpt2/merges.txt")
            },
            "task": {"kind": "ioi"},
            "corruption": {"method": "STR", "targets": ["S2"]},
            "metrics": ["logit_diff_norm", "prob", "kl"],
            "sweep": "heads_all_pos",
            "n_prompts": 6,
            "batch_size": 4,
            "output_dir": "out"
        });
        for (k, val) in overrides.as_object().unwrap() {
            v[k] = val.clone();
        }
        v
    }

    fn write(&self, name: &str, v: &Value) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
        p
    }
}

fn cli(args: &[&str], threads: Option<&str>) -> (i32, String, String) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_actpatch"));
    cmd.args(args);
    match threads {
        Some(t) => cmd.env(runner::THREADS_ENV, t),
        None => cmd.env_remove(runner::THREADS_ENV),
    };
    let out = cmd.output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn run_writes_all_artifacts_deterministically() {
    let fx = Fixture::new();
    let cfg = fx.write("exp.json", &fx.config(json!({})));
    let (code, stdout, stderr) = cli(&["run", cfg.to_str().unwrap()], Some("1"));
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("6 prompts, 4 targets"), "{stdout}");
    let out = fx.path("out");
    let first = read(&out.join("effects.csv"));
    for f in [
        "manifest.json",
        "detections.json",
        "heatmap_prob.svg",
        "heatmap_kl.svg",
        "heatmap_logit_diff_norm.svg",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let lines: Vec<&str> = first.lines().collect();
    assert_eq!(
        lines[0],
        "target,layer,head,position,window,logit_diff_norm,prob,kl"
    );
    assert_eq!(lines.len(), 1 + 4 + 2);
    assert!(lines[5].starts_with("mean,") && lines[6].starts_with("sd,"));

    let manifest: Value = serde_json::from_str(&read(&out.join("manifest.json"))).unwrap();
    assert_eq!(manifest["prompts"]["used"], 6);
    assert_eq!(manifest["targets"], 4);
    assert_eq!(manifest["config"]["sweep"], "heads_all_pos");
    assert!(manifest["version"]
        .as_str()
        .unwrap()
        .starts_with("actpatch "));

    let (code, _, stderr) = cli(&["run", cfg.to_str().unwrap()], None);
    assert_eq!(code, 0, "{stderr}");
    assert_eq!(
        read(&out.join("effects.csv")),
        first,
        "thread count must not change results"
    );
    let leftovers: Vec<_> = std::fs::read_dir(fx.dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().contains("staging"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn missing_weights_exit_2_without_outputs() {
    let fx = Fixture::new();
    let mut v = fx.config(json!({"output_dir": "never"}));
    v["model"]["weights"] = json!("nope.safetensors");
    let cfg = fx.write("bad.json", &v);
    let (code, _, stderr) = cli(&["run", cfg.to_str().unwrap()], None);
    assert_eq!(code, 2, "{stderr}");
    assert!(stderr.contains("nope.safetensors"));
    assert!(!fx.path("never").exists());
}

#[test]
fn invalid_configs_exit_2() {
    let fx = Fixture::new();
    let cases = [
        json!({"window": 5}),
        json!({"metrics": ["answer_set_prob"]}),
        json!({"unknown_field": true}),
        json!({"sweep": "heads_by_pos"}),
    ];
    for (i, o) in cases.iter().enumerate() {
        let cfg = fx.write(&format!("c{i}.json"), &fx.config(o.clone()));
        let (code, _, stderr) = cli(&["run", cfg.to_str().unwrap()], None);
        assert_eq!(code, 2, "{o}: {stderr}");
    }
    let (code, _, _) = cli(&["run", fx.path("absent.json").to_str().unwrap()], None);
    assert_eq!(code, 2);
}

#[test]
fn validate_and_render() {
    let fx = Fixture::new();
    let cfg = fx.write(
        "exp.json",
        &fx.config(json!({"corruption": {"method": "GN", "targets": ["S2"]}})),
    );
    let (code, stdout, stderr) = cli(&["validate", cfg.to_str().unwrap()], None);
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.starts_with("ok: 2 layers"), "{stdout}");
    assert!(!fx.path("out").exists(), "validate writes nothing");

    assert_eq!(cli(&["run", cfg.to_str().unwrap()], None).0, 0);
    let csv = fx.path("out/effects.csv");
    let rendered = fx.path("rendered");
    let (code, _, stderr) = cli(
        &[
            "render",
            csv.to_str().unwrap(),
            "--out",
            rendered.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code, 0, "{stderr}");
    assert_eq!(
        read(&rendered.join("heatmap_kl.svg"))
            .matches("<rect x=")
            .count(),
        4 + 11
    );

    std::fs::write(fx.path("junk.csv"), "a,b\n").unwrap();
    assert_eq!(
        cli(&["render", fx.path("junk.csv").to_str().unwrap()], None).0,
        2
    );
}

#[test]
fn init_toy_writes_a_loadable_model() {
    let fx = Fixture::new();
    let dir = fx.path("toy");
    let (code, _, stderr) = cli(
        &[
            "init-toy",
            dir.to_str().unwrap(),
            "--layers",
            "3",
            "--heads",
            "2",
            "--d-model",
            "8",
            "--vocab-size",
            "100",
        ],
        None,
    );
    assert_eq!(code, 0, "{stderr}");
    let m = io::load_model(&dir.join("config.json"), &dir.join("model.safetensors")).unwrap();
    assert_eq!((m.config().n_layers, m.config().vocab_size), (3, 100));
}

fn run_matrix(fx: &Fixture, name: &str, overrides: Value) -> actpatch_core::metrics::EffectMatrix {
    let cfg = fx.write(name, &fx.config(overrides));
    runner::run_config(&ExperimentConfig::load(&cfg).unwrap())
        .unwrap()
        .matrix
}

#[test]
fn mlp_sweeps_on_facts() {
    let fx = Fixture::new();
    let facts = json!({"kind": "facts", "path": format!("{ASSETS}/paired_facts.json")});
    let base = json!({
        "task": facts,
        "corruption": {"method": "GN", "targets": ["subject"], "seed": 3},
        "metrics": ["prob", "logit_diff_norm", "kl"],
        "sweep": "mlp_last_subject",
        "n_prompts": 8,
    });
    let with = |extra: Value| {
        let mut v = base.clone();
        for (k, val) in extra.as_object().unwrap() {
            v[k] = val.clone();
        }
        v
    };
    let joint1 = run_matrix(&fx, "a.json", with(json!({"window": 1, "output_dir": "a"})));
    let sum1 = run_matrix(
        &fx,
        "b.json",
        with(json!({"window": 1, "aggregation": "sum_single", "output_dir": "b"})),
    );
    assert_eq!(joint1.effects, sum1.effects);
    assert_eq!(joint1.targets.len(), 2);
    let joint2 = run_matrix(&fx, "c.json", with(json!({"window": 2, "output_dir": "c"})));
    assert!(joint2.is_finite());
    assert!(joint2.targets.iter().all(|t| t.window == 2));
    let all = run_matrix(
        &fx,
        "d.json",
        with(json!({"sweep": "mlp_all_pos", "output_dir": "d"})),
    );
    assert!(all.is_finite());
}

#[test]
fn per_position_sweeps_need_aligned_prompts() {
    let fx = Fixture::new();
    let m = run_matrix(
        &fx,
        "doc.json",
        json!({
            "task": {"kind": "docstring"},
            "corruption": {"method": "STR", "targets": ["C_def"]},
            "metrics": ["prob"],
            "sweep": "heads_by_pos",
            "n_prompts": 3,
            "output_dir": "doc"
        }),
    );
    let n = m.targets.iter().filter_map(|t| t.position).max().unwrap() + 1;
    assert_eq!(m.targets.len(), 2 * 2 * n);
    assert!(read(&fx.path("doc/heatmap_prob.svg")).contains("p0"));
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            let cfg =
                ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert!(
                cfg.prompt_count().is_some_and(|n| n > 0)
                    || matches!(cfg.task, actpatch::config::TaskConfig::Facts { .. })
            );
            seen += 1;
        }
    }
    assert!(seen >= 5);
}
