use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use rlvr_core::error::ErrorClass;
use rlvr_core::eval::{
    compare, evaluate_checkpoint, select_best, sweep, sweep_csv, sweep_table, EvalOptions, EvalReport, EvalSet,
    SweepResult, DEFAULT_EVAL_SEED,
};
use rlvr_core::policy::{Checkpoint, Policy, PolicyConfig, Vocabulary};
use rlvr_core::taskgen::io::{pool_id, read_dataset, read_samples, write_dataset};
use rlvr_core::taskgen::{
    duplicate_to_batch, render_kind_set, render_pool, sample_fewshot, Dataset, FewShotSpec, Provenance, SceneConfig,
    TaskKind,
};
use rlvr_core::trainer::warmstart::{warm_start, WarmStartConfig};
use rlvr_core::trainer::{
    checkpoint_path, policy_hash, read_metrics, resume, tail_summary, train, MetricsRow, RunManifest,
    CHECKPOINT_DIR, DIAGNOSTICS_FILE, MANIFEST_FILE, METRICS_FILE,
};
use rlvr_core::trainer::TrainConfig;
use rlvr_core::Error;
use serde_json::{json, Value};

use crate::manifest::{read_invocation, sidecar, write_json, Invocation};
use crate::plot::{self, Series};
use crate::{
    AblateArgs, Cli, Command, CompareArgs, EvalArgs, EvalOpts, GenPoolArgs, PlotArgs, PretrainArgs, ReplayArgs,
    SampleArgs, TrainArgs, TrainOverrides,
};

pub const OUT_ENV: &str = "RLVR_OUT";
pub const EVAL_MANIFEST: &str = "eval_manifest.json";
pub const ABLATION_MANIFEST: &str = "ablation_manifest.json";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e.class() {
                ErrorClass::Usage => 2,
                ErrorClass::MissingInput => 3,
                ErrorClass::Integrity => 4,
                ErrorClass::Numeric => 5,
                ErrorClass::Other => 1,
            },
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn resolve_out(given: Option<PathBuf>, default_name: &str) -> PathBuf {
    given.unwrap_or_else(|| out_root().join(default_name))
}

fn refuse_existing(path: &Path, force: bool) -> CliResult {
    if path.exists() && !force {
        return Err(usage(format!("{} already exists; pass --force to overwrite", path.display())));
    }
    Ok(())
}

fn ensure_parent(path: &Path) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_text(path: &Path) -> CliResult<String> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()).into());
    }
    Ok(fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// True when `dir` holds artifacts of an earlier training run.
fn is_run_dir(dir: &Path) -> bool {
    [MANIFEST_FILE, METRICS_FILE, CHECKPOINT_DIR].iter().any(|f| dir.join(f).exists())
}

/// Removes only the files a training run writes.
fn clear_run_dir(dir: &Path) -> CliResult {
    for f in [MANIFEST_FILE, METRICS_FILE, DIAGNOSTICS_FILE] {
        let p = dir.join(f);
        if p.exists() {
            fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    let ck = dir.join(CHECKPOINT_DIR);
    if ck.is_dir() {
        for entry in fs::read_dir(&ck).map_err(|e| Error::io(&ck, e))? {
            let p = entry.map_err(|e| Error::io(&ck, e))?.path();
            if p.extension().is_some_and(|e| e == "ckpt") {
                fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    Ok(())
}

pub fn run(cli: Cli, argv: &[String]) -> CliResult {
    if cli.threads == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    let threads = cli.threads;
    match cli.command {
        Command::GenPool(a) => gen_pool(a, Invocation::new("gen-pool", argv, threads)),
        Command::SampleFewshot(a) => sample(a, Invocation::new("sample-fewshot", argv, threads)),
        Command::Pretrain(a) => pretrain(a, Invocation::new("pretrain", argv, threads)),
        Command::Train(a) => train_cmd(a, Invocation::new("train", argv, threads)),
        Command::Eval(a) => eval_cmd(a, Invocation::new("eval", argv, threads)),
        Command::Compare(a) => compare_cmd(a, Invocation::new("compare", argv, threads)),
        Command::AblateBeta(a) => ablate(a, Invocation::new("ablate-beta", argv, threads)),
        Command::Plot(a) => plot_cmd(a, Invocation::new("plot", argv, threads)),
        Command::Replay(a) => replay(a),
    }
}

/// Dataset sidecar extended with the invocation record.
fn write_dataset_manifest(data: &Path, dm: Value, inv: &Invocation) -> CliResult {
    let mut v = dm;
    v["invocation"] = serde_json::to_value(inv).map_err(Error::from)?;
    write_json(&sidecar(data), &v)?;
    Ok(())
}

fn gen_pool(a: GenPoolArgs, mut inv: Invocation) -> CliResult {
    if a.size == 0 {
        return Err(usage("--size must be positive"));
    }
    let kind: Option<TaskKind> = a.kind.as_deref().map(str::parse).transpose().map_err(|e: Error| usage(e.to_string()))?;
    let default = match kind {
        Some(k) => format!("pool_{}_{}_s{}.jsonl", k.as_str().to_lowercase(), a.size, a.seed),
        None => format!("pool_{}_s{}.jsonl", a.size, a.seed),
    };
    let out = resolve_out(a.out, &default);
    refuse_existing(&out, a.force)?;
    ensure_parent(&out)?;
    let samples = match kind {
        Some(k) => render_kind_set(&SceneConfig::default(), k, a.size, a.seed),
        None => render_pool(a.size, a.seed)?,
    };
    let id = pool_id(&samples);
    let ds = Dataset {
        samples,
        provenance: Provenance {
            pool_id: id.clone(),
            ..Provenance::default()
        },
    };
    let dm = write_dataset(&out, &ds, Some(a.seed), Some(id))?;
    inv.config = json!({ "size": a.size, "seed": a.seed, "kind": kind });
    inv.seeds.insert("pool".into(), a.seed);
    inv.artifact(&out);
    write_dataset_manifest(&out, serde_json::to_value(&dm).map_err(Error::from)?, &inv)?;
    println!("wrote {} records to {} (sha256 {})", dm.records, out.display(), dm.file_hash);
    Ok(())
}

fn sample(a: SampleArgs, mut inv: Invocation) -> CliResult {
    let (spec, name) = match &a.preset {
        Some(p) => (FewShotSpec::preset(p, a.seed)?, p.clone()),
        None => {
            if a.vqa + a.cls + a.vg == 0 {
                return Err(usage("select at least one sample with --vqa, --cls, --vg or --preset"));
            }
            (FewShotSpec::new(a.vqa, a.cls, a.vg, a.seed)?, format!("v{}c{}g{}", a.vqa, a.cls, a.vg))
        }
    };
    let out = resolve_out(a.out, &format!("fewshot_{name}_s{}.jsonl", a.seed));
    refuse_existing(&out, a.force)?;
    let pool = read_samples(&a.pool)?;
    let pool_seed = fs::read_to_string(sidecar(&a.pool))
        .ok()
        .and_then(|t| serde_json::from_str::<Value>(&t).ok())
        .and_then(|v| v["pool_seed"].as_u64());
    let id = pool_id(&pool);
    let ds = duplicate_to_batch(&sample_fewshot(&pool, &id, &spec)?, a.batch)?;
    ensure_parent(&out)?;
    let dm = write_dataset(&out, &ds, pool_seed, Some(id))?;
    inv.input(&a.pool)?;
    inv.config = json!({ "spec": spec, "preset": a.preset, "batch": a.batch });
    inv.seeds.insert("fewshot".into(), a.seed);
    inv.artifact(&out);
    write_dataset_manifest(&out, serde_json::to_value(&dm).map_err(Error::from)?, &inv)?;
    println!(
        "selected {} samples (pool indices {:?}) duplicated to {} records in {}",
        spec.total(),
        ds.provenance.selected,
        ds.samples.len(),
        out.display()
    );
    Ok(())
}

fn policy_config(shape: &crate::PolicyShape, seed: u64) -> PolicyConfig {
    let d = PolicyConfig::default();
    PolicyConfig {
        embed_dim: shape.embed_dim.unwrap_or(d.embed_dim),
        num_layers: shape.layers.unwrap_or(d.num_layers),
        num_heads: shape.heads.unwrap_or(d.num_heads),
        mlp_dim: shape.mlp_dim.unwrap_or(d.mlp_dim),
        seed,
        ..d
    }
}

fn pretrain(a: PretrainArgs, mut inv: Invocation) -> CliResult {
    let mut cfg = match &a.config {
        Some(p) => {
            inv.input(p)?;
            WarmStartConfig::from_toml(&read_text(p)?)?
        }
        None => WarmStartConfig::default(),
    };
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    cfg.seed = a.seed;
    cfg.validate()?;
    let out = resolve_out(a.out, &format!("base_s{}.ckpt", a.seed));
    refuse_existing(&out, a.force)?;
    ensure_parent(&out)?;
    let pcfg = policy_config(&a.shape, a.seed);
    let mut policy = Policy::new(pcfg.clone(), Vocabulary::standard())?;
    let every = (cfg.steps / 20).max(1);
    warm_start(&mut policy, &cfg, |step, loss| {
        if step % every == 0 || step + 1 == cfg.steps {
            eprintln!("warm start {step:>6}/{} loss {loss:.4}", cfg.steps);
        }
    })?;
    Checkpoint::from_policy(0, &policy).save(&out)?;
    inv.config = json!({ "warm_start": cfg, "policy": pcfg });
    inv.seeds.insert("warm_start".into(), a.seed);
    inv.artifact(&out);
    let hash = policy_hash(&policy);
    write_json(&sidecar(&out), &json!({ "policy_hash": hash, "params": policy.params.numel(), "invocation": inv }))?;
    println!("wrote base policy ({} parameters) to {}", policy.params.numel(), out.display());
    Ok(())
}

fn apply_overrides(cfg: &mut TrainConfig, o: &TrainOverrides) {
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {$(
            if let Some(v) = o.$flag {
                cfg.$field = v;
            }
        )*};
    }
    set!(lr => lr, beta => beta, steps => total_steps, seed => seed, batch_size => batch_size,
         group_size => group_size, temperature => train_temperature, max_new_tokens => max_new_tokens,
         checkpoint_every => checkpoint_every, grad_accum => grad_accum);
    if o.no_wall_time {
        cfg.record_wall_time = false;
    }
}

/// Defaults, then the config file, then flags.
fn train_config(file: Option<&Path>, o: &TrainOverrides, threads: usize, inv: &mut Invocation) -> CliResult<TrainConfig> {
    let mut cfg = match file {
        Some(p) => {
            inv.input(p)?;
            TrainConfig::from_toml(&read_text(p)?)?
        }
        None => TrainConfig::default(),
    };
    apply_overrides(&mut cfg, o);
    cfg.threads = threads;
    cfg.validate()?;
    Ok(cfg)
}

fn load_base(path: Option<&Path>, seed: u64, inv: &mut Invocation) -> CliResult<Policy> {
    match path {
        Some(p) => {
            if !p.exists() {
                return Err(Error::Missing(p.to_path_buf()).into());
            }
            inv.input(p)?;
            Ok(Checkpoint::load(p)?.policy()?)
        }
        None => Ok(Policy::new(
            PolicyConfig {
                seed,
                ..PolicyConfig::default()
            },
            Vocabulary::standard(),
        )?),
    }
}

fn print_row(r: &MetricsRow) {
    eprintln!(
        "step {:>5} total {:.4} format {:.4} accuracy {:.4} length {:.2} kl {:.5}",
        r.step, r.mean_total_reward, r.mean_format_reward, r.mean_accuracy_reward, r.mean_completion_length, r.mean_kl
    );
}

fn progress(every: u64) -> impl FnMut(&MetricsRow) {
    move |r: &MetricsRow| {
        if r.step % every.max(1) == 0 {
            print_row(r);
        }
    }
}

fn attach_invocation(run_dir: &Path, inv: &Invocation) -> CliResult {
    let path = run_dir.join(MANIFEST_FILE);
    let mut m: RunManifest = serde_json::from_str(&read_text(&path)?).map_err(Error::from)?;
    m.invocation = Some(serde_json::to_value(inv).map_err(Error::from)?);
    write_json(&path, &m)?;
    Ok(())
}

fn train_cmd(a: TrainArgs, mut inv: Invocation) -> CliResult {
    let cfg = train_config(a.config.as_deref(), &a.overrides, inv.threads, &mut inv)?;
    let ds = read_dataset(&a.dataset)?;
    inv.input(&a.dataset)?;
    let out = resolve_out(a.out, &format!("train_s{}", cfg.seed));
    inv.config = serde_json::to_value(&cfg).map_err(Error::from)?;
    inv.seeds.insert("train".into(), cfg.seed);
    let mut report = progress(10);
    let summary = match &a.resume {
        Some(ckpt) => {
            if !ckpt.exists() {
                return Err(Error::Missing(ckpt.clone()).into());
            }
            inv.input(ckpt)?;
            resume(ckpt, &cfg, &ds, &out, &mut report)?
        }
        None => {
            if is_run_dir(&out) {
                refuse_existing(&out, a.force)?;
                clear_run_dir(&out)?;
            }
            let base = load_base(a.base.as_deref(), cfg.seed, &mut inv)?;
            train(&cfg, &ds, &base, &out, &mut report)?
        }
    };
    for p in &summary.checkpoints {
        inv.artifact(p);
    }
    inv.artifact(&summary.metrics_path);
    attach_invocation(&out, &inv)?;
    println!(
        "trained to step {} in {} ({} checkpoints)",
        summary.final_step,
        out.display(),
        summary.checkpoints.len()
    );
    Ok(())
}

fn eval_options(o: &EvalOpts, threads: usize) -> EvalOptions {
    EvalOptions {
        seed: o.eval_seed.unwrap_or(DEFAULT_EVAL_SEED),
        temperature: o.eval_temperature,
        max_new_tokens: o.eval_max_new_tokens,
        threads,
        ..EvalOptions::default()
    }
}

fn load_eval_set(path: &Path, inv: &mut Invocation) -> CliResult<EvalSet> {
    let samples = read_samples(path)?;
    inv.input(path)?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(EvalSet::new(name, samples))
}

fn step_name(r: &EvalReport) -> String {
    r.checkpoint_step.map_or_else(|| "final".to_string(), |s| format!("step_{s:06}"))
}

fn write_sweep(out: &Path, s: &SweepResult) -> CliResult {
    for sub in ["reports", "predictions"] {
        fs::create_dir_all(out.join(sub)).map_err(|e| Error::io(out, e))?;
    }
    for r in &s.reports {
        let name = step_name(r);
        write_json(&out.join("reports").join(format!("{name}.json")), r)?;
        r.write_predictions(&out.join("predictions").join(format!("{name}.jsonl")))?;
    }
    write_text(&out.join("sweep.txt"), &sweep_table(s))?;
    write_text(&out.join("sweep.csv"), &sweep_csv(s)?)?;
    Ok(())
}

fn eval_cmd(a: EvalArgs, mut inv: Invocation) -> CliResult {
    let out = resolve_out(a.out, "eval");
    refuse_existing(&out.join(EVAL_MANIFEST), a.force)?;
    let set = load_eval_set(&a.eval_set, &mut inv)?;
    let opts = eval_options(&a.opts, inv.threads);
    let result = match (&a.ckpt_dir, &a.ckpt) {
        (Some(dir), _) => sweep(dir, &set, &opts)?,
        (None, Some(p)) => {
            if !p.exists() {
                return Err(Error::Missing(p.clone()).into());
            }
            inv.input(p)?;
            select_best(vec![evaluate_checkpoint(p, &set, &opts)?])?
        }
        (None, None) => return Err(usage("pass --ckpt-dir or --ckpt")),
    };
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_sweep(&out, &result)?;
    inv.config = serde_json::to_value(&opts).map_err(Error::from)?;
    inv.seeds.insert("eval".into(), opts.seed);
    inv.artifact(&out.join("sweep.txt"));
    inv.artifact(&out.join("sweep.csv"));
    let best: serde_json::Map<String, Value> = result
        .best
        .iter()
        .map(|(m, i)| (m.clone(), json!(i.map(|i| result.reports[i].checkpoint_step))))
        .collect();
    write_json(
        &out.join(EVAL_MANIFEST),
        &json!({ "eval_set": set.name, "eval_set_hash": set.hash(), "best_step": best, "invocation": inv }),
    )?;
    print!("{}", sweep_table(&result));
    Ok(())
}

fn compare_cmd(a: CompareArgs, mut inv: Invocation) -> CliResult {
    let mut reports = Vec::new();
    for spec in &a.reports {
        let (label, path) = match spec.split_once('=') {
            Some((l, p)) => (l.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                (p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(), p)
            }
        };
        let r: EvalReport = serde_json::from_str(&read_text(&path)?).map_err(Error::from)?;
        inv.input(&path)?;
        reports.push((label, r));
    }
    let c = compare(&reports)?;
    let prefix = resolve_out(a.out, "compare");
    let txt = prefix.with_extension("txt");
    let csv = prefix.with_extension("csv");
    refuse_existing(&txt, a.force)?;
    ensure_parent(&txt)?;
    write_text(&txt, &c.to_text())?;
    write_text(&csv, &c.to_csv()?)?;
    inv.artifact(&txt);
    inv.artifact(&csv);
    write_json(&sidecar(&txt), &json!({ "invocation": inv }))?;
    print!("{}", c.to_text());
    Ok(())
}

#[derive(serde::Serialize)]
struct AblationRun {
    beta: f64,
    seed: u64,
    dir: String,
    tail: Option<rlvr_core::trainer::TailSummary>,
    eval: Option<Value>,
}

fn mean(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.collect::<Option<Vec<f64>>>()?;
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

const ABLATION_COLUMNS: [&str; 9] = [
    "tail_mean_kl",
    "tail_mean_total_reward",
    "tail_mean_accuracy_reward",
    "tail_mean_completion_length",
    "eval_mean_total_reward",
    "eval_cls_accuracy",
    "eval_vqa_accuracy",
    "eval_vg_precision_at_50",
    "eval_format_rate",
];

fn fmt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "N/A".into(), |x| format!("{x:.4}"))
}

fn ablate(a: AblateArgs, mut inv: Invocation) -> CliResult {
    if a.betas.is_empty() || a.seeds == 0 {
        return Err(usage("--betas and --seeds must be non-empty"));
    }
    let cfg0 = train_config(a.config.as_deref(), &a.overrides, inv.threads, &mut inv)?;
    let out = resolve_out(a.out, "ablate_beta");
    refuse_existing(&out.join(ABLATION_MANIFEST), a.force)?;
    let ds = read_dataset(&a.dataset)?;
    inv.input(&a.dataset)?;
    let base = load_base(a.base.as_deref(), cfg0.seed, &mut inv)?;
    let set = a.eval_set.as_deref().map(|p| load_eval_set(p, &mut inv)).transpose()?;
    let opts = eval_options(&a.eval, inv.threads);
    let mut runs: Vec<AblationRun> = Vec::new();
    let mut curves: Vec<Series> = Vec::new();
    let mut table: Vec<(f64, Vec<Option<f64>>)> = Vec::new();
    for &beta in &a.betas {
        let mut metrics = Vec::new();
        let mut evals: Vec<EvalReport> = Vec::new();
        for k in 0..a.seeds {
            let cfg = TrainConfig {
                beta,
                seed: cfg0.seed + k,
                ..cfg0.clone()
            };
            let dir = out.join(format!("beta_{beta}")).join(format!("seed_{}", cfg.seed));
            if is_run_dir(&dir) {
                refuse_existing(&dir, a.force)?;
                clear_run_dir(&dir)?;
            }
            eprintln!("beta {beta} seed {}", cfg.seed);
            let s = train(&cfg, &ds, &base, &dir, &mut progress(50))?;
            let rows = read_metrics(&s.metrics_path)?;
            let report = match &set {
                Some(set) => Some(evaluate_checkpoint(&checkpoint_path(&dir, s.final_step), set, &opts)?),
                None => None,
            };
            runs.push(AblationRun {
                beta,
                seed: cfg.seed,
                dir: dir.display().to_string(),
                tail: tail_summary(&rows, a.tail),
                eval: report.as_ref().map(|r| {
                    json!({ "step": r.checkpoint_step, "mean_total_reward": r.mean_total_reward,
                            "cls_accuracy": r.cls_accuracy, "vqa_accuracy": r.vqa_accuracy,
                            "vg_precision_at_50": r.vg_precision_at_50, "format_rate": r.format_rate })
                }),
            });
            metrics.push(rows);
            evals.extend(report);
        }
        let tails: Vec<_> = metrics.iter().map(|m| tail_summary(m, a.tail)).collect();
        let t = |f: fn(&rlvr_core::trainer::TailSummary) -> f64| mean(tails.iter().map(|x| x.as_ref().map(f)));
        let e = |f: fn(&EvalReport) -> Option<f64>| {
            if evals.is_empty() {
                None
            } else {
                mean(evals.iter().map(f))
            }
        };
        table.push((
            beta,
            vec![
                t(|x| x.mean_kl),
                t(|x| x.mean_total_reward),
                t(|x| x.mean_accuracy_reward),
                t(|x| x.mean_completion_length),
                e(|r| Some(r.mean_total_reward)),
                e(|r| r.cls_accuracy),
                e(|r| r.vqa_accuracy),
                e(|r| r.vg_precision_at_50),
                e(|r| Some(r.format_rate)),
            ],
        ));
        curves.push(Series {
            label: format!("beta={beta}"),
            rows: plot::average(&metrics),
        });
    }
    let (txt, csv) = ablation_tables(&table, a.seeds, a.tail);
    write_text(&out.join("ablation.txt"), &txt)?;
    write_text(&out.join("ablation.csv"), &csv)?;
    write_text(&out.join("ablation.svg"), &plot::render(&curves))?;
    write_text(&out.join("ablation_curves.csv"), &plot::data_table(&curves))?;
    for f in ["ablation.txt", "ablation.csv", "ablation.svg", "ablation_curves.csv"] {
        inv.artifact(&out.join(f));
    }
    inv.config = json!({ "train": cfg0, "betas": a.betas, "seeds": a.seeds, "tail": a.tail, "eval": opts });
    for k in 0..a.seeds {
        inv.seeds.insert(format!("pair_{k}"), cfg0.seed + k);
    }
    write_json(&out.join(ABLATION_MANIFEST), &json!({ "runs": runs, "invocation": inv }))?;
    print!("{txt}");
    Ok(())
}

fn ablation_tables(table: &[(f64, Vec<Option<f64>>)], seeds: u64, tail: usize) -> (String, String) {
    use std::fmt::Write as _;
    let mut txt = format!("beta ablation: mean over {seeds} seeds, training columns over the last {tail} steps\n");
    let _ = write!(txt, "{:<28}", "metric");
    for (b, _) in table {
        let _ = write!(txt, " {:>14}", format!("beta={b}"));
    }
    for (b, _) in &table[1..] {
        let _ = write!(txt, " {:>14}", format!("delta {b}"));
    }
    txt.push('\n');
    let mut csv = String::from("beta,seeds");
    for c in ABLATION_COLUMNS {
        csv.push(',');
        csv.push_str(c);
    }
    csv.push('\n');
    for (i, c) in ABLATION_COLUMNS.iter().enumerate() {
        let _ = write!(txt, "{c:<28}");
        for (_, v) in table {
            let _ = write!(txt, " {:>14}", fmt_cell(v[i]));
        }
        let base = table[0].1[i];
        for (_, v) in &table[1..] {
            let d = v[i].zip(base).map(|(x, b)| x - b);
            let _ = write!(txt, " {:>14}", d.map_or_else(|| "N/A".into(), |x| format!("{x:+.4}")));
        }
        txt.push('\n');
    }
    for (b, v) in table {
        let _ = write!(csv, "{b},{seeds}");
        for x in v {
            let _ = write!(csv, ",{}", fmt_cell(*x));
        }
        csv.push('\n');
    }
    (txt, csv)
}

fn plot_cmd(a: PlotArgs, mut inv: Invocation) -> CliResult {
    if !a.labels.is_empty() && a.labels.len() != a.metrics.len() {
        return Err(usage("give one --label per --metrics file, or none"));
    }
    let mut series = Vec::new();
    for (i, m) in a.metrics.iter().enumerate() {
        let rows = read_metrics(m)?;
        inv.input(m)?;
        let label = a.labels.get(i).cloned().unwrap_or_else(|| {
            m.parent()
                .and_then(|p| p.file_name())
                .map_or_else(|| format!("run{i}"), |n| n.to_string_lossy().into_owned())
        });
        series.push(Series { label, rows });
    }
    let out = resolve_out(a.out, "metrics.svg");
    refuse_existing(&out, a.force)?;
    ensure_parent(&out)?;
    let table = out.with_extension("csv");
    write_text(&out, &plot::render(&series))?;
    write_text(&table, &plot::data_table(&series))?;
    inv.artifact(&out);
    inv.artifact(&table);
    write_json(&sidecar(&out), &json!({ "invocation": inv }))?;
    println!("wrote {} and {}", out.display(), table.display());
    Ok(())
}

fn replay(a: ReplayArgs) -> CliResult {
    let inv = read_invocation(&a.manifest)?;
    let mut argv = vec!["rlvr".to_string()];
    argv.extend(inv.argv.iter().cloned());
    if !argv.iter().any(|s| s == "--force") {
        argv.push("--force".into());
    }
    std::env::set_current_dir(&inv.cwd).map_err(|e| Error::io(&inv.cwd, e))?;
    let cli = Cli::try_parse_from(&argv).map_err(|e| usage(format!("recorded arguments no longer parse: {e}")))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(usage("a replay manifest cannot point at another replay"));
    }
    eprintln!("replaying: {}", argv[1..].join(" "));
    run(cli, &argv[1..])
}
