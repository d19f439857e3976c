use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_deconfound"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Overrides that keep a full train/eval run to a few seconds.
const SMALL: &[&str] = &[
    "--set",
    "schedule.pretrain.steps=4",
    "--set",
    "schedule.finetune.steps=6",
    "--set",
    "schedule.steps_per_epoch=20",
    "--set",
    "schedule.dictionary_scenes=200",
    "--set",
    "eval.n_scenes=20",
    "--set",
    "eval.cooccurrence_scenes=200",
    "--set",
    "eval.partner_scenes=20",
    "--sequential",
];

#[test]
fn gen_world_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = run(&["gen-world", "--seed", "7", "--scenes", "50", "--out", d.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (fa, fb) = (files(&a), files(&b));
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["manifest.json", "scenes.jsonl", "world.json"]);
    assert_eq!(fa, fb);

    let c = tmp.path().join("c");
    run(&["gen-world", "--seed", "8", "--scenes", "50", "--out", c.to_str().unwrap()]);
    assert_ne!(fs::read(a.join("world.json")).unwrap(), fs::read(c.join("world.json")).unwrap());
}

#[test]
fn manifest_records_config_and_output_hashes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["gen-world", "--scenes", "5", "--set", "world.k=9", "--out", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "gen-world");
    assert_eq!(m["config"]["world"]["k"], 9);
    assert_eq!(m["outputs"].as_object().unwrap().len(), 2);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn unknown_subcommand_exits_two_with_usage() {
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("Usage"), "{err}");
    assert!(o.stdout.is_empty());
}

#[test]
fn bad_override_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    for bad in ["world.nonexistent=1", "no_equals_sign", "world.k=\"twelve\""] {
        let o = run(&["gen-world", "--set", bad, "--out", out]);
        assert_eq!(o.status.code(), Some(2), "{bad}");
    }
}

#[test]
fn help_exits_zero() {
    let o = run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("repro"));
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&[
        "eval",
        "--checkpoint",
        tmp.path().join("absent.ckpt").to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn pipeline_stages_chain_through_files() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_str().unwrap().to_string();
    let step = |args: Vec<String>| {
        // Step arguments come last so their overrides win.
        let mut all: Vec<String> = SMALL.iter().map(|s| s.to_string()).collect();
        all.extend(args);
        let o = bin().args(&all).output().unwrap();
        assert!(o.status.success(), "{all:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();

    step(s(&["gen-world", "--scenes", "10", "--out", &p("world")]));
    let world = p("world/world.json");
    step(s(&["train", "--stage", "pretrain", "--set", "train.steps=3", "--world", &world, "--out", &p("pre")]));
    step(s(&[
        "train", "--stage", "finetune", "--set", "train.steps=3", "--init", &p("pre/model.ckpt"), "--world", &world,
        "--out", &p("fine"),
    ]));
    let before = fs::read(p("fine/model.ckpt")).unwrap();
    step(s(&["build-dict", "--checkpoint", &p("fine/model.ckpt"), "--world", &world, "--out", &p("dict")]));
    step(s(&[
        "train", "--stage", "pretrain", "--arm", "causal", "--set", "train.steps=2", "--dicts", &p("dict"), "--world",
        &world, "--out", &p("causal"),
    ]));
    step(s(&["eval", "--checkpoint", &p("causal/model.ckpt"), "--world", &world, "--out", &p("eval")]));
    step(s(&[
        "analyze", "--checkpoint", &p("fine/model.ckpt"), "--checkpoint", &p("causal/model.ckpt"), "--world", &world,
        "--set", "eval.n_scenes=400", "--out", &p("analysis"),
    ]));

    // Inputs are left untouched.
    assert_eq!(fs::read(p("fine/model.ckpt")).unwrap(), before);
    for d in ["pre", "fine", "dict", "causal", "eval", "analysis"] {
        assert!(tmp.path().join(d).join("manifest.json").exists(), "{d}");
    }
    assert_eq!(fs::read_to_string(p("pre/loss.csv")).unwrap().lines().count(), 4);
    assert!(tmp.path().join("dict/final_textual.dict").exists());
    let report: serde_json::Value = serde_json::from_slice(&fs::read(p("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report["n_eval"], 20);
    let csv = fs::read_to_string(p("analysis/profiles.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 7);
    let m: serde_json::Value = serde_json::from_slice(&fs::read(p("eval/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["inputs"].as_object().unwrap().len(), 2);
}

#[test]
fn repro_summary_has_one_row_per_arm_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["repro", "--seeds", "5", "--out", tmp.path().to_str().unwrap()];
    args.extend_from_slice(SMALL);
    let o = run(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(tmp.path().join("summary.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2 * 5);
    for seed in 0..5 {
        assert_eq!(rows.iter().filter(|r| r.starts_with(&format!("{seed},"))).count(), 2, "{csv}");
    }
    assert!(tmp.path().join("manifest.json").exists());
    assert!(tmp.path().join("run_manifest.json").exists());
}
