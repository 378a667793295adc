//! Training loop: rollouts, reward scoring, GRPO updates, checkpoints and
//! metrics.
//!
//! Run directory layout:
//!
//! ```text
//! metrics.csv               one row per completed update
//! checkpoints/step_NNNNNN.ckpt
//! run_manifest.json         config echo, dataset hash, version, resume history
//! diagnostics.json          only after a numeric failure
//! ```

pub mod warmstart;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::grpo::{grpo_step, AdvantageMode, GrpoConfig, OptimState, RolloutGroup, STD_FLOOR};
use crate::policy::{Checkpoint, Completion, Policy, PromptInput};
use crate::rewards::{score, RewardConfig};
use crate::taskgen::io::pool_id;
use crate::taskgen::{mix_seed, Dataset, Sample};

pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
const REFERENCE_PREFIX: &str = "reference.";
const ADAM_M_PREFIX: &str = "adam.m.";
const ADAM_V_PREFIX: &str = "adam.v.";

/// Version string recorded in manifests and checkpoints.
pub fn version_string() -> String {
    format!("v{}-rlvr", env!("CARGO_PKG_VERSION"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub group_size: usize,
    pub train_temperature: f64,
    pub lr: f64,
    pub beta: f64,
    pub clip_eps: f64,
    pub max_new_tokens: usize,
    pub total_steps: u64,
    pub checkpoint_every: u64,
    pub grad_accum: usize,
    pub seed: u64,
    /// Worker threads for rollout sampling; results do not depend on it.
    pub threads: usize,
    pub advantage_mode: AdvantageMode,
    pub std_floor: f64,
    pub channel_weights: [f64; 2],
    /// Write measured `wall_ms`; when false the column is 0 so metrics files
    /// are reproducible byte for byte.
    pub record_wall_time: bool,
    pub px_per_cell: usize,
    pub reward: RewardConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            group_size: 4,
            train_temperature: 0.9,
            lr: 1e-4,
            beta: 0.001,
            clip_eps: 0.2,
            max_new_tokens: 64,
            total_steps: 1000,
            checkpoint_every: 100,
            grad_accum: 1,
            seed: 0,
            threads: 1,
            advantage_mode: AdvantageMode::Summed,
            std_floor: STD_FLOOR,
            channel_weights: [1.0, 1.0],
            record_wall_time: true,
            px_per_cell: 2,
            reward: RewardConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.group_size == 0 || self.max_new_tokens == 0 {
            return Err(Error::config("batch_size, group_size and max_new_tokens must be positive"));
        }
        if self.checkpoint_every == 0 || self.threads == 0 || self.px_per_cell == 0 {
            return Err(Error::config("checkpoint_every, threads and px_per_cell must be positive"));
        }
        if !(1..=8).contains(&self.grad_accum) {
            return Err(Error::config(format!("grad_accum {} outside [1, 8]", self.grad_accum)));
        }
        if self.batch_size % self.grad_accum != 0 {
            return Err(Error::config(format!(
                "batch_size {} not divisible by grad_accum {}",
                self.batch_size, self.grad_accum
            )));
        }
        let positive = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be positive, got {v}")))
            }
        };
        positive(self.train_temperature, "train_temperature")?;
        positive(self.lr, "lr")?;
        positive(self.clip_eps, "clip_eps")?;
        positive(self.std_floor, "std_floor")?;
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config(format!("beta must be non-negative, got {}", self.beta)));
        }
        if !self.channel_weights.iter().all(|w| *w >= 0.0 && w.is_finite()) {
            return Err(Error::config("channel_weights must be finite and non-negative"));
        }
        self.reward.validate()
    }

    pub fn grpo(&self) -> GrpoConfig {
        GrpoConfig {
            beta: self.beta,
            clip_eps: self.clip_eps,
            std_floor: self.std_floor,
            temperature: self.train_temperature,
            grad_accum: self.grad_accum,
            advantage_mode: self.advantage_mode,
            channel_weights: self.channel_weights,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config is always representable")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub mean_total_reward: f64,
    pub mean_format_reward: f64,
    pub mean_accuracy_reward: f64,
    pub mean_completion_length: f64,
    pub mean_kl: f64,
    pub pg_loss: f64,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str =
    "step,mean_total_reward,mean_format_reward,mean_accuracy_reward,mean_completion_length,mean_kl,pg_loss,wall_ms";

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(METRICS_HEADER.split(','))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn append_metrics(path: &Path, row: &MetricsRow) -> Result<()> {
    let file = fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.serialize(row)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Means over the final rows of a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailSummary {
    pub rows: usize,
    pub mean_total_reward: f64,
    pub mean_accuracy_reward: f64,
    pub mean_completion_length: f64,
    pub mean_kl: f64,
}

/// Averages over the last `n` rows; `None` for an empty run.
pub fn tail_summary(rows: &[MetricsRow], n: usize) -> Option<TailSummary> {
    let tail = &rows[rows.len().saturating_sub(n)..];
    if tail.is_empty() {
        return None;
    }
    let mean = |f: fn(&MetricsRow) -> f64| tail.iter().map(f).sum::<f64>() / tail.len() as f64;
    Some(TailSummary {
        rows: tail.len(),
        mean_total_reward: mean(|r| r.mean_total_reward),
        mean_accuracy_reward: mean(|r| r.mean_accuracy_reward),
        mean_completion_length: mean(|r| r.mean_completion_length),
        mean_kl: mean(|r| r.mean_kl),
    })
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("step_{step:06}.ckpt"))
}

/// Everything a run needs to continue exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub policy: Policy,
    pub reference: Policy,
    pub opt: OptimState,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh state: the reference is a frozen copy of `base`.
    pub fn new(base: &Policy, cfg: &TrainConfig) -> Self {
        TrainState {
            step: 0,
            policy: base.clone(),
            reference: base.clone(),
            opt: OptimState::new(&base.params, cfg.lr),
            rng: ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x7EA1)),
        }
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        let mut c = Checkpoint::from_policy(self.step, &self.policy);
        c.push_params(REFERENCE_PREFIX, &self.reference.params);
        let mut m = self.policy.params.clone();
        let mut v = self.policy.params.clone();
        for ((tm, tv), (om, ov)) in m
            .tensors
            .iter_mut()
            .zip(v.tensors.iter_mut())
            .zip(self.opt.m.iter().zip(&self.opt.v))
        {
            tm.data_mut().copy_from_slice(om);
            tv.data_mut().copy_from_slice(ov);
        }
        c.push_params(ADAM_M_PREFIX, &m);
        c.push_params(ADAM_V_PREFIX, &v);
        c.rng_state = Some(serde_json::to_string(&self.rng).expect("generator state serialises"));
        let mut meta = meta;
        if let serde_json::Value::Object(ref mut o) = meta {
            o.insert(
                "adam".into(),
                json!({
                    "step": self.opt.step,
                    "lr": self.opt.lr,
                    "beta1": self.opt.beta1,
                    "beta2": self.opt.beta2,
                    "eps": self.opt.eps,
                }),
            );
        }
        c.meta = meta;
        c
    }

    /// Restores a state written by [`TrainState::to_checkpoint`].
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let policy = c.policy()?;
        let reference = c.policy_with_prefix(REFERENCE_PREFIX)?;
        let m = c.params(ADAM_M_PREFIX, &policy.params)?;
        let v = c.params(ADAM_V_PREFIX, &policy.params)?;
        let bad = |msg: &str| Error::Integrity {
            path: String::new(),
            msg: msg.to_string(),
        };
        let adam = c.meta.get("adam").ok_or_else(|| bad("checkpoint has no optimiser state"))?;
        let num = |k: &str| adam.get(k).and_then(|x| x.as_f64()).ok_or_else(|| bad("malformed optimiser state"));
        let opt = OptimState {
            m: m.tensors.iter().map(|t| t.data().to_vec()).collect(),
            v: v.tensors.iter().map(|t| t.data().to_vec()).collect(),
            step: adam
                .get("step")
                .and_then(|x| x.as_u64())
                .ok_or_else(|| bad("malformed optimiser state"))?,
            lr: num("lr")?,
            beta1: num("beta1")?,
            beta2: num("beta2")?,
            eps: num("eps")?,
        };
        let rng: ChaCha8Rng = serde_json::from_str(
            c.rng_state
                .as_deref()
                .ok_or_else(|| bad("checkpoint has no generator state"))?,
        )
        .map_err(|e| bad(&format!("generator state: {e}")))?;
        Ok(TrainState {
            step: c.step,
            policy,
            reference,
            opt,
            rng,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: TrainConfig,
    pub dataset_hash: String,
    pub dataset_records: usize,
    pub base_policy_hash: String,
    pub seed: u64,
    /// One entry per resume: the step it started from and changed settings.
    pub resumes: Vec<serde_json::Value>,
    /// Caller-supplied record of how the run was launched.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invocation: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub final_step: u64,
    pub metrics_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub manifest_path: PathBuf,
}

/// Hash of a policy's stored form.
pub fn policy_hash(policy: &Policy) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(Checkpoint::from_policy(0, policy).to_bytes()))
}

struct Batch {
    prompts: Vec<PromptInput>,
    /// Batch position → index into `prompts`.
    slot: Vec<usize>,
}

fn prepare_batch(policy: &Policy, samples: &[Sample], cfg: &TrainConfig) -> Result<Batch> {
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut prompts = Vec::new();
    let mut slot = Vec::with_capacity(samples.len());
    for s in samples {
        let key = crate::taskgen::io::sample_to_line(s);
        let u = match index.get(&key) {
            Some(&u) => u,
            None => {
                prompts.push(policy.prompt_input(&s.prompt_text, &s.raster(cfg.px_per_cell))?);
                index.insert(key, prompts.len() - 1);
                prompts.len() - 1
            }
        };
        slot.push(u);
    }
    Ok(Batch { prompts, slot })
}

/// `group_size` completions for every batch position, each position drawing
/// from its own stream so the result does not depend on scheduling.
fn rollouts(policy: &Policy, batch: &Batch, cfg: &TrainConfig, step_seed: u64) -> Result<Vec<Vec<Completion>>> {
    let lp_max = batch
        .prompts
        .iter()
        .map(|p| policy.config.patch_count + p.tokens.len())
        .max()
        .unwrap_or(0);
    if lp_max + cfg.max_new_tokens > policy.config.max_seq_len {
        return Err(Error::config(format!(
            "prompt of {lp_max} plus max_new_tokens {} exceeds max_seq_len {}",
            cfg.max_new_tokens, policy.config.max_seq_len
        )));
    }
    let prefixes = batch
        .prompts
        .iter()
        .map(|p| policy.prefill(p))
        .collect::<Result<Vec<_>>>()?;
    let run = |i: usize| -> Vec<Completion> {
        let u = batch.slot[i];
        let lp = policy.config.patch_count + batch.prompts[u].tokens.len();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(step_seed, i as u64));
        (0..cfg.group_size)
            .map(|_| policy.continue_from(&prefixes[u], lp, cfg.train_temperature, cfg.max_new_tokens, &mut rng))
            .collect()
    };
    let n = batch.slot.len();
    let threads = cfg.threads.min(n).max(1);
    if threads == 1 {
        return Ok((0..n).map(run).collect());
    }
    let chunk = n.div_ceil(threads);
    let mut out = Vec::with_capacity(n);
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let run = &run;
                scope.spawn(move || (t * chunk..((t + 1) * chunk).min(n)).map(run).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            out.extend(h.join().expect("rollout worker panicked"));
        }
    });
    Ok(out)
}

/// Error plus the rollouts that produced it, for the diagnostic dump.
struct StepFailure {
    error: Error,
    groups: Vec<RolloutGroup>,
}

impl From<Error> for StepFailure {
    fn from(error: Error) -> Self {
        StepFailure {
            error,
            groups: Vec::new(),
        }
    }
}

/// Rollout, scoring and one GRPO update; returns the metrics row.
fn train_step(
    state: &mut TrainState,
    samples: &[Sample],
    batch: &Batch,
    cfg: &TrainConfig,
) -> std::result::Result<MetricsRow, StepFailure> {
    let t0 = Instant::now();
    let step_seed = state.rng.next_u64();
    let completions = rollouts(&state.policy, batch, cfg, step_seed)?;
    let mut groups = Vec::with_capacity(samples.len());
    let (mut tot, mut fmt, mut acc, mut len) = (0.0, 0.0, 0.0, 0.0);
    for (i, comps) in completions.into_iter().enumerate() {
        let scores: Vec<_> = comps.iter().map(|c| score(&samples[i], &c.text, &cfg.reward)).collect();
        for (s, c) in scores.iter().zip(&comps) {
            tot += s.total;
            fmt += s.format;
            acc += s.accuracy;
            len += c.length as f64;
        }
        groups.push(RolloutGroup::new(
            batch.slot[i],
            comps,
            scores.iter().map(|s| s.total).collect(),
            scores.iter().map(|s| [s.format, s.accuracy]).collect(),
        )?);
    }
    let n = (samples.len() * cfg.group_size) as f64;
    let terms = match grpo_step(
        &mut state.policy,
        &state.reference,
        &batch.prompts,
        &groups,
        &cfg.grpo(),
        &mut state.opt,
    ) {
        Ok(t) => t,
        Err(error) => return Err(StepFailure { error, groups }),
    };
    state.step += 1;
    Ok(MetricsRow {
        step: state.step,
        mean_total_reward: tot / n,
        mean_format_reward: fmt / n,
        mean_accuracy_reward: acc / n,
        mean_completion_length: len / n,
        mean_kl: terms.kl_loss,
        pg_loss: terms.pg_loss,
        wall_ms: if cfg.record_wall_time {
            t0.elapsed().as_millis() as u64
        } else {
            0
        },
    })
}

fn dump_diagnostics(
    out_dir: &Path,
    state: &TrainState,
    meta: &serde_json::Value,
    failure: &StepFailure,
) -> Result<PathBuf> {
    let groups: Vec<serde_json::Value> = failure
        .groups
        .iter()
        .map(|g| {
            json!({
                "prompt": g.prompt,
                "rewards": g.rewards,
                "completions": g.completions.iter().map(|c| &c.text).collect::<Vec<_>>(),
                "old_logprobs": g.old_logprobs,
            })
        })
        .collect();
    let ckpt = out_dir.join(CHECKPOINT_DIR).join(format!("step_{:06}_halt.ckpt", state.step));
    state.to_checkpoint(meta.clone()).save(&ckpt)?;
    let non_finite: Vec<&str> = state
        .policy
        .params
        .names
        .iter()
        .zip(&state.policy.params.tensors)
        .filter(|(_, t)| t.data().iter().any(|v| !v.is_finite()))
        .map(|(n, _)| n.as_str())
        .collect();
    let diag = json!({
        "step": state.step,
        "error": failure.error.to_string(),
        "halt_checkpoint": ckpt.display().to_string(),
        "non_finite_parameters": non_finite,
        "groups": groups,
    });
    let path = out_dir.join(DIAGNOSTICS_FILE);
    fs::write(&path, serde_json::to_string_pretty(&diag)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn run_meta(cfg: &TrainConfig, dataset_hash: &str) -> serde_json::Value {
    json!({
        "train_config": cfg,
        "dataset_hash": dataset_hash,
        "version": version_string(),
    })
}

fn run_loop(
    state: &mut TrainState,
    dataset: &Dataset,
    cfg: &TrainConfig,
    out_dir: &Path,
    checkpoints: &mut Vec<PathBuf>,
    progress: &mut dyn FnMut(&MetricsRow),
) -> Result<()> {
    let dataset_hash = pool_id(&dataset.samples);
    let meta = run_meta(cfg, &dataset_hash);
    let batch = prepare_batch(&state.policy, &dataset.samples, cfg)?;
    let metrics = out_dir.join(METRICS_FILE);
    while state.step < cfg.total_steps {
        let row = match train_step(state, &dataset.samples, &batch, cfg) {
            Ok(row) => row,
            Err(f) if matches!(f.error, Error::NonFinite { .. }) => {
                dump_diagnostics(out_dir, state, &meta, &f)?;
                return Err(f.error);
            }
            Err(f) => return Err(f.error),
        };
        append_metrics(&metrics, &row)?;
        progress(&row);
        if state.step % cfg.checkpoint_every == 0 {
            let p = checkpoint_path(out_dir, state.step);
            state.to_checkpoint(meta.clone()).save(&p)?;
            checkpoints.push(p);
        }
    }
    Ok(())
}

fn check_dataset(dataset: &Dataset, cfg: &TrainConfig) -> Result<()> {
    if dataset.samples.len() != cfg.batch_size {
        return Err(Error::contract(format!(
            "dataset has {} samples but batch_size is {}",
            dataset.samples.len(),
            cfg.batch_size
        )));
    }
    Ok(())
}

fn write_manifest(path: &Path, m: &RunManifest) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(m)?).map_err(|e| Error::io(path, e))
}

/// Trains `base` on `dataset` for `cfg.total_steps` updates, writing into
/// `out_dir`. Step 0 (the reference) is always checkpointed.
pub fn train(
    cfg: &TrainConfig,
    dataset: &Dataset,
    base: &Policy,
    out_dir: &Path,
    progress: &mut dyn FnMut(&MetricsRow),
) -> Result<RunSummary> {
    cfg.validate()?;
    check_dataset(dataset, cfg)?;
    fs::create_dir_all(out_dir.join(CHECKPOINT_DIR)).map_err(|e| Error::io(out_dir, e))?;
    let dataset_hash = pool_id(&dataset.samples);
    let manifest = RunManifest {
        command: "train".into(),
        version: version_string(),
        config: cfg.clone(),
        dataset_hash: dataset_hash.clone(),
        dataset_records: dataset.samples.len(),
        base_policy_hash: policy_hash(base),
        seed: cfg.seed,
        resumes: Vec::new(),
        invocation: None,
    };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    write_manifest(&manifest_path, &manifest)?;
    let metrics_path = out_dir.join(METRICS_FILE);
    write_metrics(&metrics_path, &[])?;
    let mut state = TrainState::new(base, cfg);
    let p0 = checkpoint_path(out_dir, 0);
    state.to_checkpoint(run_meta(cfg, &dataset_hash)).save(&p0)?;
    let mut checkpoints = vec![p0];
    run_loop(&mut state, dataset, cfg, out_dir, &mut checkpoints, progress)?;
    Ok(RunSummary {
        final_step: state.step,
        metrics_path,
        checkpoints,
        manifest_path,
    })
}

/// Settings that differ between the checkpointed run and `cfg`.
fn config_changes(old: &serde_json::Value, cfg: &TrainConfig) -> serde_json::Value {
    let new = serde_json::to_value(cfg).expect("config serialises");
    let mut changes = serde_json::Map::new();
    if let (Some(o), Some(n)) = (old.as_object(), new.as_object()) {
        for (k, nv) in n {
            let ov = o.get(k).cloned().unwrap_or(serde_json::Value::Null);
            if &ov != nv {
                changes.insert(k.clone(), json!({ "from": ov, "to": nv }));
            }
        }
    }
    serde_json::Value::Object(changes)
}

/// Continues a run from `checkpoint` up to `cfg.total_steps`. Metrics rows
/// after the checkpoint's step are discarded before appending.
pub fn resume(
    checkpoint: &Path,
    cfg: &TrainConfig,
    dataset: &Dataset,
    out_dir: &Path,
    progress: &mut dyn FnMut(&MetricsRow),
) -> Result<RunSummary> {
    cfg.validate()?;
    check_dataset(dataset, cfg)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut state = TrainState::from_checkpoint(&ckpt).map_err(|e| match e {
        Error::Integrity { msg, .. } => Error::Integrity {
            path: checkpoint.display().to_string(),
            msg,
        },
        other => other,
    })?;
    let dataset_hash = pool_id(&dataset.samples);
    if let Some(h) = ckpt.meta.get("dataset_hash").and_then(|v| v.as_str()) {
        if h != dataset_hash {
            return Err(Error::config(format!(
                "dataset hash {dataset_hash} differs from the checkpointed run's {h}"
            )));
        }
    }
    state.opt.lr = cfg.lr;
    fs::create_dir_all(out_dir.join(CHECKPOINT_DIR)).map_err(|e| Error::io(out_dir, e))?;
    let old_cfg = ckpt.meta.get("train_config").cloned().unwrap_or_default();
    let entry = json!({
        "from_checkpoint": checkpoint.display().to_string(),
        "from_step": state.step,
        "changed": config_changes(&old_cfg, cfg),
    });
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let mut manifest = match fs::read_to_string(&manifest_path) {
        Ok(text) => serde_json::from_str::<RunManifest>(&text)?,
        Err(_) => RunManifest {
            command: "train".into(),
            version: version_string(),
            config: cfg.clone(),
            dataset_hash: dataset_hash.clone(),
            dataset_records: dataset.samples.len(),
            base_policy_hash: policy_hash(&state.reference),
            seed: cfg.seed,
            resumes: Vec::new(),
            invocation: None,
        },
    };
    manifest.config = cfg.clone();
    manifest.resumes.push(entry);
    write_manifest(&manifest_path, &manifest)?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let kept: Vec<MetricsRow> = if metrics_path.exists() {
        read_metrics(&metrics_path)?
            .into_iter()
            .filter(|r| r.step <= state.step)
            .collect()
    } else {
        Vec::new()
    };
    write_metrics(&metrics_path, &kept)?;
    let mut checkpoints = Vec::new();
    run_loop(&mut state, dataset, cfg, out_dir, &mut checkpoints, progress)?;
    Ok(RunSummary {
        final_step: state.step,
        metrics_path,
        checkpoints,
        manifest_path,
    })
}
