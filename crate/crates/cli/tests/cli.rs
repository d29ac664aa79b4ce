use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use circuitlab::model::{init_model, save_checkpoint, ModelConfig};
use circuitlab::patching::{InfluenceMap, CSV_HEADER};
use circuitlab::tasks::TaskClass;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_circuitlab"));
    c.env_remove("CIRCUITLAB_SEED");
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_checkpoint(dir: &Path) -> PathBuf {
    let model = init_model(&ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        max_seq_len: 64,
        seed: 3,
        ..ModelConfig::default()
    })
    .unwrap();
    let p = dir.join("tiny.ckpt");
    save_checkpoint(&model, &p).unwrap();
    p
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn missing_config_is_a_usage_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--config", "no/such/config.json", "--out", "t"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no/such/config.json"), "{}", stderr(&o));
}

#[test]
fn bad_flags_and_bad_config_fields_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["patch", "--bogus"], dir.path()).status.code(), Some(2));
    std::fs::write(dir.path().join("c.json"), r#"{"steps": 1, "nonsense": true}"#).unwrap();
    let o = run(&["train", "--config", "c.json", "--out", "t"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = run(&["patch", "--checkpoint", "x.ckpt", "--out", "m"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn corrupt_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.ckpt"), b"NOTACKPTxxxxxxxx").unwrap();
    let o = run(
        &["eval", "--checkpoint", "bad.ckpt", "--out", "e", "--max-digits", "1"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(!dir.path().join("e").exists());
}

#[test]
fn one_step_training_run_is_fast_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let start = std::time::Instant::now();
    let o = run(&["train", "--out", "t", "--steps", "1"], dir.path());
    let secs = start.elapsed().as_secs_f64();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(secs < 10.0, "took {secs:.1}s");
    let model = circuitlab::model::load_checkpoint(&dir.path().join("t/final.ckpt")).unwrap();
    assert_eq!(model.config, ModelConfig::default());
    let manifest: serde_json::Value = serde_json::from_slice(&read(dir.path().join("t/manifest.json"))).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config"]["steps"], 1);
}

#[test]
fn eval_grid_is_square_bounded_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    tiny_checkpoint(dir.path());
    let args = [
        "eval",
        "--checkpoint",
        "tiny.ckpt",
        "--max-digits",
        "2",
        "--samples",
        "10",
        "--seed",
        "4",
    ];
    let o = run(&[&args[..], &["--out", "a"]].concat(), dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    run(&[&args[..], &["--out", "b"]].concat(), dir.path());
    let a = read(dir.path().join("a/accuracy.csv"));
    assert_eq!(a, read(dir.path().join("b/accuracy.csv")));
    assert_eq!(
        read(dir.path().join("a/accuracy.svg")),
        read(dir.path().join("b/accuracy.svg"))
    );
    let text = String::from_utf8(a).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    for r in rows {
        let cells: Vec<f64> = r.split(',').skip(1).map(|c| c.parse().unwrap()).collect();
        assert_eq!(cells.len(), 2);
        assert!(cells.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn eval_beyond_context_names_the_prompt_length() {
    let dir = tempfile::tempdir().unwrap();
    tiny_checkpoint(dir.path());
    let o = run(
        &["eval", "--checkpoint", "tiny.ckpt", "--out", "e", "--max-digits", "6"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    let need = TaskClass::with_shots(6, 6, 2, 6).unwrap().max_prompt_tokens();
    assert!(stderr(&o).contains(&format!("{need} tokens")), "{}", stderr(&o));
}

#[test]
fn patch_emits_one_row_per_head_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    tiny_checkpoint(dir.path());
    let base = [
        "patch",
        "--checkpoint",
        "tiny.ckpt",
        "--m",
        "2",
        "--n",
        "1",
        "--pairs",
        "6",
        "--seed",
        "2",
    ];
    let o = run(&[&base[..], &["--out", "m"]].concat(), dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = dir.path().join("m/map_m2_n1_seed2.csv");
    let first = read(&csv);
    let text = String::from_utf8(first.clone()).unwrap();
    assert_eq!(text.lines().next(), Some(CSV_HEADER));
    assert_eq!(text.lines().count(), 1 + 2 * 2);
    let o = run(&[&base[..], &["--out", "m", "--resume", "false"]].concat(), dir.path());
    assert!(stderr(&o).contains("patched 2,1"), "{}", stderr(&o));
    assert_eq!(read(&csv), first);
    let o = run(&[&base[..], &["--out", "m"]].concat(), dir.path());
    assert!(stderr(&o).contains("reused 2,1"), "{}", stderr(&o));
}

#[test]
fn worker_count_does_not_change_maps() {
    let dir = tempfile::tempdir().unwrap();
    tiny_checkpoint(dir.path());
    let base = [
        "patch",
        "--checkpoint",
        "tiny.ckpt",
        "--all-classes",
        "--max-digits",
        "2",
        "--pairs",
        "4",
    ];
    for (jobs, out) in [("1", "one"), ("3", "three")] {
        let o = run(&[&base[..], &["--jobs", jobs, "--out", out]].concat(), dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let mut names: Vec<String> = std::fs::read_dir(dir.path().join("one"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("map_"))
        .collect();
    names.sort();
    assert_eq!(names.len(), 8);
    for n in names {
        assert_eq!(
            read(dir.path().join("one").join(&n)),
            read(dir.path().join("three").join(&n)),
            "{n}"
        );
    }
}

#[test]
fn manifest_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    tiny_checkpoint(dir.path());
    let o = run(
        &[
            "patch",
            "--checkpoint",
            "tiny.ckpt",
            "--out",
            "m",
            "--m",
            "1",
            "--n",
            "3",
            "--pairs",
            "5",
            "--seed",
            "8",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = dir.path().join("m/map_m1_n3_seed8.csv");
    let before = read(&csv);
    std::fs::copy(dir.path().join("m/manifest.json"), dir.path().join("rerun.json")).unwrap();
    std::fs::remove_dir_all(dir.path().join("m")).unwrap();
    let o = run(&["patch", "--config", "rerun.json"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read(&csv), before);
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    tiny_checkpoint(dir.path());
    let args = [
        "patch",
        "--checkpoint",
        "tiny.ckpt",
        "--out",
        "m",
        "--m",
        "1",
        "--n",
        "1",
        "--pairs",
        "2",
    ];
    let o = bin()
        .args(args)
        .env("CIRCUITLAB_SEED", "7")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("m/map_m1_n1_seed7.csv").exists());
    let o = bin()
        .args(args)
        .args(["--seed", "3"])
        .env("CIRCUITLAB_SEED", "7")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("m/map_m1_n1_seed3.csv").exists());
    let o = bin()
        .args(args)
        .env("CIRCUITLAB_SEED", "x")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

fn write_map(dir: &Path, m: u32, n: u32, shape: (usize, usize), scores: Vec<f64>) {
    let map = InfluenceMap {
        class: TaskClass::new(m, n).unwrap(),
        n_layers: shape.0,
        n_heads: shape.1,
        scores,
        n_pairs: 10,
        seed: 0,
        stderr: None,
        clean_prob: None,
        corrupt_prob: None,
    };
    std::fs::create_dir_all(dir).unwrap();
    std::fs::write(dir.join(format!("map_m{m}_n{n}_seed0.csv")), map.to_csv()).unwrap();
}

#[test]
fn identical_maps_are_stable() {
    let dir = tempfile::tempdir().unwrap();
    let maps = dir.path().join("maps");
    let scores = vec![0.3, -0.1, 0.05, 0.2];
    write_map(&maps, 1, 1, (2, 2), scores.clone());
    write_map(&maps, 2, 3, (2, 2), scores);
    let o = run(
        &["analyze", "--maps", "maps", "--out", "a", "--epsilon", "1e-9"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&read(dir.path().join("a/stability.json"))).unwrap();
    assert_eq!(report["stable"], true);
    assert_eq!(report["transitions"].as_array().unwrap().len(), 0);
}

#[test]
fn boundary_partition_gets_two_heatmaps() {
    let dir = tempfile::tempdir().unwrap();
    let maps = dir.path().join("maps");
    let mut k = 0.0;
    for (m, n) in [(1, 1), (1, 2), (2, 1), (2, 2), (3, 2)] {
        k += 1.0;
        write_map(
            &maps,
            m,
            n,
            (2, 3),
            (0..6).map(|i| ((i as f64 + k) * 0.37).sin()).collect(),
        );
    }
    let o = run(&["analyze", "--maps", "maps", "--out", "a"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    for label in ["symmetric", "boundary_a_greater", "boundary_b_greater", "interior"] {
        assert!(dir.path().join(format!("a/heatmap_{label}.csv")).exists(), "{label}");
        assert!(dir.path().join(format!("a/heatmap_{label}.svg")).exists(), "{label}");
    }
    let manifests = std::fs::read_dir(dir.path().join("a"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name() == "manifest.json")
        .count();
    assert_eq!(manifests, 1);
}

#[test]
fn shape_mismatch_lists_offenders() {
    let dir = tempfile::tempdir().unwrap();
    let maps = dir.path().join("maps");
    write_map(&maps, 1, 1, (2, 2), vec![0.1, 0.2, 0.3, 0.5]);
    write_map(&maps, 1, 2, (2, 2), vec![0.4, 0.2, 0.3, 0.1]);
    write_map(&maps, 3, 3, (3, 2), vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.7]);
    let o = run(&["analyze", "--maps", "maps", "--out", "a"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("3,3 (3, 2)"), "{}", stderr(&o));
    assert!(!dir.path().join("a/manifest.json").exists());
}
