use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn rlvr(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rlvr"))
        .args(args)
        .env("RLVR_OUT", root)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], root: &Path) -> String {
    let out = rlvr(args, root);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], root: &Path) -> i32 {
    rlvr(args, root).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn lines(p: &Path) -> Vec<String> {
    fs::read_to_string(p).unwrap().lines().map(String::from).collect()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn manifest(p: &Path) -> PathBuf {
    let mut name = p.file_name().unwrap().to_os_string();
    name.push(".manifest.json");
    p.with_file_name(name)
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn gen_pool_writes_the_requested_records_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    ok(&["gen-pool", "--size", "2000", "--seed", "7", "--out", s(&a)], dir.path());
    ok(&["gen-pool", "--size", "2000", "--seed", "7", "--out", s(&b)], dir.path());
    assert_eq!(lines(&a).len(), 2000);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let m = json(&manifest(&a));
    assert_eq!(m["records"], 2000);
    assert_eq!(m["pool_seed"], 7);
    assert_eq!(m["invocation"]["command"], "gen-pool");
}

#[test]
fn gen_pool_rejects_empty_pools_and_silent_overwrites() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.jsonl");
    assert_eq!(code(&["gen-pool", "--size", "0", "--out", s(&p)], dir.path()), 2);
    ok(&["gen-pool", "--size", "5", "--out", s(&p)], dir.path());
    assert_eq!(code(&["gen-pool", "--size", "5", "--out", s(&p)], dir.path()), 2);
    ok(&["gen-pool", "--size", "5", "--out", s(&p), "--force"], dir.path());
    assert_eq!(code(&["gen-pool", "--size", "5", "--kind", "XYZ", "--out", s(&p), "--force"], dir.path()), 2);
}

#[test]
fn default_outputs_land_under_the_environment_root() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-pool", "--size", "3", "--seed", "2"], dir.path());
    assert!(dir.path().join("pool_3_s2.jsonl").exists());
}

#[test]
fn fewshot_presets_and_counts() {
    let dir = tempfile::tempdir().unwrap();
    let pool = dir.path().join("pool.jsonl");
    ok(&["gen-pool", "--size", "600", "--seed", "1", "--out", s(&pool)], dir.path());

    let one = dir.path().join("pi1C.jsonl");
    ok(&["sample-fewshot", "--pool", s(&pool), "--preset", "pi1C", "--out", s(&one)], dir.path());
    let recs = lines(&one);
    assert_eq!(recs.len(), 128);
    assert!(recs.iter().all(|l| l == &recs[0]));
    assert!(recs[0].contains(r#""kind":"CLS""#));

    let big = dir.path().join("pi128.jsonl");
    ok(&["sample-fewshot", "--pool", s(&pool), "--preset", "pi128VCG", "--seed", "3", "--out", s(&big)], dir.path());
    let recs = lines(&big);
    assert_eq!(recs.len(), 128);
    for (kind, n) in [("VQA", 42), ("CLS", 42), ("VG", 44)] {
        let tag = format!(r#""kind":"{kind}""#);
        assert_eq!(recs.iter().filter(|l| l.contains(&tag)).count(), n);
    }
    let m = json(&manifest(&big));
    assert_eq!(m["provenance"]["selected"].as_array().unwrap().len(), 128);
    assert_eq!(m["pool_seed"], 1);

    let none = dir.path().join("none.jsonl");
    assert_eq!(code(&["sample-fewshot", "--pool", s(&pool), "--out", s(&none)], dir.path()), 2);
    assert_eq!(code(&["sample-fewshot", "--pool", s(&pool), "--cls", "9999", "--out", s(&none)], dir.path()), 2);
    assert_eq!(code(&["sample-fewshot", "--pool", s(&pool), "--preset", "pi3X", "--out", s(&none)], dir.path()), 2);
    let missing = dir.path().join("missing.jsonl");
    assert_eq!(code(&["sample-fewshot", "--pool", s(&missing), "--cls", "1", "--out", s(&none)], dir.path()), 3);
}

#[test]
fn plot_of_the_fixture_matches_the_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.svg");
    ok(&["plot", "--metrics", s(&fixture("metrics_10.csv")), "--label", "fixture", "--out", s(&out)], dir.path());
    assert_eq!(fs::read_to_string(&out).unwrap(), fs::read_to_string(fixture("metrics_10.golden.svg")).unwrap());
    let table = lines(&out.with_extension("csv"));
    assert_eq!(table.len(), 11);
    assert_eq!(table[0], "label,step,mean_total_reward,mean_completion_length,mean_kl");
    assert_eq!(code(&["plot", "--metrics", s(&fixture("metrics_10.csv")), "--label", "a", "--label", "b"], dir.path()), 2);
}

#[test]
fn eval_on_an_empty_checkpoint_dir_is_missing_input() {
    let dir = tempfile::tempdir().unwrap();
    let set = dir.path().join("set.jsonl");
    ok(&["gen-pool", "--size", "3", "--out", s(&set)], dir.path());
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(code(&["eval", "--ckpt-dir", s(&empty), "--eval-set", s(&set)], dir.path()), 3);
    assert_eq!(code(&["eval", "--ckpt-dir", s(&dir.path().join("nope")), "--eval-set", s(&set)], dir.path()), 3);
}

fn small_dataset(dir: &Path) -> PathBuf {
    let pool = dir.join("pool.jsonl");
    ok(&["gen-pool", "--size", "30", "--seed", "5", "--out", s(&pool)], dir);
    let ds = dir.join("ds.jsonl");
    ok(&["sample-fewshot", "--pool", s(&pool), "--preset", "pi2VC", "--batch", "4", "--out", s(&ds)], dir);
    ds
}

const TINY: [&str; 10] = [
    "--batch-size",
    "4",
    "--group-size",
    "2",
    "--max-new-tokens",
    "4",
    "--checkpoint-every",
    "1",
    "--no-wall-time",
    "--steps",
];

#[test]
fn train_eval_and_replay_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path());
    let cfg = dir.path().join("train.toml");
    fs::write(&cfg, "lr = 0.005\nbeta = 0.2\nseed = 4\n").unwrap();
    let run = dir.path().join("run");
    let mut args = vec!["train", "--dataset", s(&ds), "--config", s(&cfg), "--beta", "0.3", "--out", s(&run)];
    args.extend(TINY);
    args.push("3");
    ok(&args, dir.path());

    let m = json(&run.join("run_manifest.json"));
    assert_eq!(m["config"]["lr"], 0.005);
    assert_eq!(m["config"]["beta"], 0.3);
    assert_eq!(m["config"]["seed"], 4);
    assert_eq!(m["invocation"]["command"], "train");
    assert_eq!(lines(&run.join("metrics.csv")).len(), 4);
    let before = fs::read(run.join("metrics.csv")).unwrap();

    assert_eq!(code(&args, dir.path()), 2);
    ok(&["replay", s(&run.join("run_manifest.json"))], dir.path());
    assert_eq!(fs::read(run.join("metrics.csv")).unwrap(), before);

    let set = dir.path().join("set.jsonl");
    ok(&["gen-pool", "--size", "6", "--seed", "99", "--out", s(&set)], dir.path());
    let ev = dir.path().join("ev");
    let table = ok(
        &["eval", "--ckpt-dir", s(&run.join("checkpoints")), "--eval-set", s(&set), "--eval-max-new-tokens", "4", "--out", s(&ev)],
        dir.path(),
    );
    assert_eq!(table.lines().filter(|l| l.trim_start().starts_with(char::is_numeric)).count(), 4);
    assert!(ev.join("sweep.csv").exists());
    assert!(ev.join("predictions/step_000003.jsonl").exists());
    let em = json(&ev.join("eval_manifest.json"));
    assert!(em["best_step"]["mean_total_reward"].is_u64());

    let a = ev.join("reports/step_000000.json");
    let b = ev.join("reports/step_000003.json");
    let cmp = dir.path().join("cmp");
    let text = ok(&["compare", "--report", &format!("base={}", s(&a)), "--report", &format!("rl={}", s(&b)), "--out", s(&cmp)], dir.path());
    assert!(text.contains("delta rl"));
    assert!(cmp.with_extension("csv").exists());
}

#[test]
fn resume_from_a_corrupted_checkpoint_is_an_integrity_failure() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path());
    let run = dir.path().join("run");
    let mut args = vec!["train", "--dataset", s(&ds), "--out", s(&run)];
    args.extend(TINY);
    args.push("2");
    ok(&args, dir.path());
    let ck = run.join("checkpoints/step_000002.ckpt");
    let mut bytes = fs::read(&ck).unwrap();
    let n = bytes.len();
    bytes[n - 10] ^= 0xff;
    fs::write(&ck, bytes).unwrap();
    let mut resume = vec!["train", "--dataset", s(&ds), "--out", s(&run), "--resume", s(&ck)];
    resume.extend(TINY);
    resume.push("4");
    assert_eq!(code(&resume, dir.path()), 4);
    let gone = run.join("checkpoints/step_000009.ckpt");
    let mut missing = vec!["train", "--dataset", s(&ds), "--out", s(&run), "--resume", s(&gone)];
    missing.extend(TINY);
    missing.push("4");
    assert_eq!(code(&missing, dir.path()), 3);
}

#[test]
fn invalid_training_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path());
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "learning_rate = 1.0\n").unwrap();
    assert_eq!(code(&["train", "--dataset", s(&ds), "--config", s(&cfg)], dir.path()), 2);
    let mut args = vec!["train", "--dataset", s(&ds), "--grad-accum", "9"];
    args.extend(TINY);
    args.push("1");
    assert_eq!(code(&args, dir.path()), 2);
    assert_eq!(code(&["train"], dir.path()), 2);
}

#[test]
fn ablate_beta_emits_table_curves_and_paired_runs() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path());
    let out = dir.path().join("abl");
    let mut args = vec!["ablate-beta", "--dataset", s(&ds), "--seeds", "2", "--tail", "2", "--out", s(&out)];
    args.extend(TINY);
    args.push("3");
    let text = ok(&args, dir.path());
    assert!(text.contains("beta=0.001") && text.contains("beta=0.04"));
    assert!(text.contains("tail_mean_kl"));
    let m = json(&out.join("ablation_manifest.json"));
    let runs = m["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 4);
    let seeds: Vec<u64> = runs.iter().map(|r| r["seed"].as_u64().unwrap()).collect();
    assert_eq!(seeds, vec![0, 1, 0, 1]);
    let svg = fs::read_to_string(out.join("ablation.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2 * 3);
    assert_eq!(lines(&out.join("ablation.csv")).len(), 3);
}

#[test]
fn help_documents_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&["--help"], dir.path());
    for c in ["0  success", "2  usage", "3  missing input", "4  integrity", "5  numeric", "RLVR_OUT"] {
        assert!(text.contains(c), "{c}");
    }
}
