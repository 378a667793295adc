//! Held-out evaluation: per-kind accuracy, grounding precision at IoU ≥ 0.5,
//! checkpoint sweeps and comparison tables. Averages are over samples.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Checkpoint, Policy};
use crate::rewards::{score, RewardConfig, ANSWER_CLOSE, ANSWER_OPEN, REASONING_CLOSE, REASONING_OPEN};
use crate::taskgen::io::{pool_id, sample_to_line};
use crate::taskgen::{mix_seed, Sample, TaskKind};

/// Grounding hit threshold.
pub const PRECISION_IOU: f64 = 0.5;
pub const DEFAULT_EVAL_SEED: u64 = 20_240_601;

/// Produces one completion per sample from that sample's own stream.
pub trait EvalPolicy: Sync {
    fn complete(&self, sample: &Sample, rng: &mut ChaCha8Rng) -> Result<String>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub seed: u64,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub px_per_cell: usize,
    pub threads: usize,
    pub reward: RewardConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            seed: DEFAULT_EVAL_SEED,
            temperature: 1.0,
            max_new_tokens: 64,
            px_per_cell: 2,
            threads: 1,
            reward: RewardConfig::default(),
        }
    }
}

/// A trained policy sampled at the evaluation temperature.
pub struct Sampler<'a> {
    pub policy: &'a Policy,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub px_per_cell: usize,
}

impl EvalPolicy for Sampler<'_> {
    fn complete(&self, sample: &Sample, rng: &mut ChaCha8Rng) -> Result<String> {
        let p = self.policy;
        let input = p.prompt_input(&sample.prompt_text, &sample.raster(self.px_per_cell))?;
        let budget = self
            .max_new_tokens
            .min(p.config.max_seq_len.saturating_sub(p.config.patch_count + input.tokens.len()));
        let mut out = p.sample(&input, 1, self.temperature, budget.max(1), rng)?;
        Ok(out.remove(0).text)
    }
}

fn tagged(answer: &str) -> String {
    format!("{REASONING_OPEN} look {REASONING_CLOSE} {ANSWER_OPEN} {answer} {ANSWER_CLOSE}")
}

/// Always emits the ground truth in a well-formed completion.
pub struct OraclePolicy;

impl EvalPolicy for OraclePolicy {
    fn complete(&self, sample: &Sample, _rng: &mut ChaCha8Rng) -> Result<String> {
        Ok(tagged(&sample.truth.answer_text()))
    }
}

/// Well-formed completions with a uniformly drawn answer of the right type.
pub struct UniformGuessPolicy;

impl EvalPolicy for UniformGuessPolicy {
    fn complete(&self, sample: &Sample, rng: &mut ChaCha8Rng) -> Result<String> {
        let options = sample.question.answer_options();
        if options.is_empty() {
            let mut axis = || {
                let a = rng.gen_range(0..=1000u32);
                let b = rng.gen_range(0..=1000u32);
                (a.min(b), a.max(b))
            };
            let (x0, x1) = axis();
            let (y0, y1) = axis();
            return Ok(tagged(&format!("[[{x0}, {y0}, {x1}, {y1}]]")));
        }
        Ok(tagged(options[rng.gen_range(0..options.len())]))
    }
}

/// A held-out set and its identity.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub name: String,
    pub samples: Vec<Sample>,
}

impl EvalSet {
    pub fn new(name: impl Into<String>, samples: Vec<Sample>) -> Self {
        EvalSet {
            name: name.into(),
            samples,
        }
    }

    pub fn hash(&self) -> String {
        pool_id(&self.samples)
    }
}

/// Samples present in both sets (by full record content, ignoring ids).
pub fn overlap(eval: &[Sample], train: &[Sample]) -> usize {
    let key = |s: &Sample| {
        let mut t = s.clone();
        t.id.clear();
        sample_to_line(&t)
    };
    let train_keys: std::collections::HashSet<String> = train.iter().map(key).collect();
    eval.iter().filter(|s| train_keys.contains(&key(s))).count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub kind: TaskKind,
    pub completion: String,
    pub format: f64,
    pub accuracy: f64,
    pub total: f64,
    pub iou: Option<f64>,
    pub parsed: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindCounts {
    pub cls: usize,
    pub vqa: usize,
    pub vg: usize,
}

impl KindCounts {
    fn get_mut(&mut self, k: TaskKind) -> &mut usize {
        match k {
            TaskKind::Cls => &mut self.cls,
            TaskKind::Vqa => &mut self.vqa,
            TaskKind::Vg => &mut self.vg,
        }
    }

    pub fn get(&self, k: TaskKind) -> usize {
        match k {
            TaskKind::Cls => self.cls,
            TaskKind::Vqa => self.vqa,
            TaskKind::Vg => self.vg,
        }
    }

    pub fn total(&self) -> usize {
        self.cls + self.vqa + self.vg
    }
}

/// Metrics of one policy on one set. Kinds absent from the set are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint_step: Option<u64>,
    pub eval_set: String,
    pub eval_set_hash: String,
    pub seed: u64,
    pub temperature: f64,
    pub cls_accuracy: Option<f64>,
    pub vqa_accuracy: Option<f64>,
    pub vg_precision_at_50: Option<f64>,
    pub format_rate: f64,
    pub mean_total_reward: f64,
    pub counts: KindCounts,
    /// Completions with no extractable answer (or box, for grounding).
    pub unparseable: usize,
    pub predictions: Vec<Prediction>,
}

/// Report columns that are selected on in sweeps, in display order.
pub const METRICS: [&str; 5] = [
    "cls_accuracy",
    "vqa_accuracy",
    "vg_precision_at_50",
    "format_rate",
    "mean_total_reward",
];

impl EvalReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "cls_accuracy" => self.cls_accuracy,
            "vqa_accuracy" => self.vqa_accuracy,
            "vg_precision_at_50" => self.vg_precision_at_50,
            "format_rate" => Some(self.format_rate),
            "mean_total_reward" => Some(self.mean_total_reward),
            _ => None,
        }
    }

    /// Precision at IoU ≥ 0.5 recomputed from the logged predictions.
    pub fn recompute_vg_precision(&self) -> Option<f64> {
        let vg: Vec<&Prediction> = self.predictions.iter().filter(|p| p.kind == TaskKind::Vg).collect();
        if vg.is_empty() {
            return None;
        }
        let hits = vg.iter().filter(|p| p.iou.is_some_and(|v| v >= PRECISION_IOU)).count();
        Some(hits as f64 / vg.len() as f64)
    }

    /// Prediction log: one JSON record per line.
    pub fn write_predictions(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for p in &self.predictions {
            text.push_str(&serde_json::to_string(p)?);
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Evaluates `policy` on every sample; sample `i` draws from stream `(seed, i)`.
pub fn evaluate(policy: &dyn EvalPolicy, set: &EvalSet, opts: &EvalOptions) -> Result<EvalReport> {
    let n = set.samples.len();
    let run = |i: usize| -> Result<Prediction> {
        let s = &set.samples[i];
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(opts.seed, i as u64));
        let completion = policy.complete(s, &mut rng)?;
        let r = score(s, &completion, &opts.reward);
        Ok(Prediction {
            id: s.id.clone(),
            kind: s.kind,
            completion,
            format: r.format,
            accuracy: r.accuracy,
            total: r.total,
            iou: r.iou,
            parsed: r.parsed && (s.kind != TaskKind::Vg || r.iou.is_some()),
        })
    };
    let threads = opts.threads.clamp(1, n.max(1));
    let predictions: Vec<Prediction> = if threads == 1 {
        (0..n).map(run).collect::<Result<_>>()?
    } else {
        let chunk = n.div_ceil(threads);
        let mut parts = Vec::with_capacity(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let run = &run;
                    scope.spawn(move || (t * chunk..((t + 1) * chunk).min(n)).map(run).collect::<Result<Vec<_>>>())
                })
                .collect();
            for h in handles {
                parts.push(h.join().expect("evaluation worker panicked"));
            }
        });
        let mut all = Vec::with_capacity(n);
        for p in parts {
            all.extend(p?);
        }
        all
    };
    Ok(assemble(None, set, opts, predictions))
}

fn assemble(step: Option<u64>, set: &EvalSet, opts: &EvalOptions, predictions: Vec<Prediction>) -> EvalReport {
    let mut counts = KindCounts::default();
    let mut hits: BTreeMap<TaskKind, f64> = BTreeMap::new();
    for p in &predictions {
        *counts.get_mut(p.kind) += 1;
        let hit = match p.kind {
            TaskKind::Vg => p.iou.is_some_and(|v| v >= PRECISION_IOU) as u8 as f64,
            _ => p.accuracy,
        };
        *hits.entry(p.kind).or_default() += hit;
    }
    let frac = |k: TaskKind| {
        let c = counts.get(k);
        (c > 0).then(|| hits.get(&k).copied().unwrap_or(0.0) / c as f64)
    };
    let n = predictions.len().max(1) as f64;
    EvalReport {
        checkpoint_step: step,
        eval_set: set.name.clone(),
        eval_set_hash: set.hash(),
        seed: opts.seed,
        temperature: opts.temperature,
        cls_accuracy: frac(TaskKind::Cls),
        vqa_accuracy: frac(TaskKind::Vqa),
        vg_precision_at_50: frac(TaskKind::Vg),
        format_rate: predictions.iter().map(|p| p.format).sum::<f64>() / n,
        mean_total_reward: predictions.iter().map(|p| p.total).sum::<f64>() / n,
        counts,
        unparseable: predictions.iter().filter(|p| !p.parsed).count(),
        predictions,
    }
}

pub fn evaluate_policy(policy: &Policy, set: &EvalSet, opts: &EvalOptions) -> Result<EvalReport> {
    let sampler = Sampler {
        policy,
        temperature: opts.temperature,
        max_new_tokens: opts.max_new_tokens,
        px_per_cell: opts.px_per_cell,
    };
    evaluate(&sampler, set, opts)
}

pub fn evaluate_checkpoint(path: &Path, set: &EvalSet, opts: &EvalOptions) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(path)?;
    let policy = ckpt.policy()?;
    let mut r = evaluate_policy(&policy, set, opts)?;
    r.checkpoint_step = Some(ckpt.step);
    Ok(r)
}

/// Checkpoint files in `dir` ordered by step; halt dumps are skipped.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Missing(dir.to_path_buf()));
    }
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let is_ckpt = path.extension().is_some_and(|e| e == "ckpt");
        if let (true, Some(step)) = (is_ckpt, stem.strip_prefix("step_").and_then(|s| s.parse::<u64>().ok())) {
            found.push((step, path));
        }
    }
    if found.is_empty() {
        return Err(Error::Missing(dir.to_path_buf()));
    }
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

/// Best report per metric; ties go to the earliest step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub reports: Vec<EvalReport>,
    /// Metric name → index into `reports`, `None` when not applicable.
    pub best: BTreeMap<String, Option<usize>>,
}

impl SweepResult {
    pub fn best_report(&self, metric: &str) -> Option<&EvalReport> {
        self.best.get(metric).copied().flatten().map(|i| &self.reports[i])
    }
}

/// Picks the best report per metric from reports in ascending step order.
pub fn select_best(mut reports: Vec<EvalReport>) -> Result<SweepResult> {
    if reports.is_empty() {
        return Err(Error::contract("sweep needs at least one report"));
    }
    reports.sort_by_key(|r| r.checkpoint_step);
    let mut best = BTreeMap::new();
    for m in METRICS {
        let mut arg: Option<(usize, f64)> = None;
        for (i, r) in reports.iter().enumerate() {
            if let Some(v) = r.metric(m) {
                if arg.is_none_or(|(_, b)| v > b) {
                    arg = Some((i, v));
                }
            }
        }
        best.insert(m.to_string(), arg.map(|(i, _)| i));
    }
    Ok(SweepResult { reports, best })
}

pub fn sweep(dir: &Path, set: &EvalSet, opts: &EvalOptions) -> Result<SweepResult> {
    let reports = list_checkpoints(dir)?
        .iter()
        .map(|p| evaluate_checkpoint(p, set, opts))
        .collect::<Result<Vec<_>>>()?;
    select_best(reports)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "N/A".to_string(), |x| format!("{x:.4}"))
}

fn step_label(s: Option<u64>) -> String {
    s.map_or_else(|| "-".to_string(), |x| x.to_string())
}

/// Aligned text table of every report plus the per-metric best rows.
pub fn sweep_table(s: &SweepResult) -> String {
    let mut out = format!(
        "{:>8} {:>12} {:>12} {:>18} {:>11} {:>17} {:>11}\n",
        "step", "cls_accuracy", "vqa_accuracy", "vg_precision_at_50", "format_rate", "mean_total_reward", "unparseable"
    );
    for r in &s.reports {
        let _ = writeln!(
            out,
            "{:>8} {:>12} {:>12} {:>18} {:>11} {:>17} {:>11}",
            step_label(r.checkpoint_step),
            cell(r.cls_accuracy),
            cell(r.vqa_accuracy),
            cell(r.vg_precision_at_50),
            cell(Some(r.format_rate)),
            cell(Some(r.mean_total_reward)),
            r.unparseable
        );
    }
    out.push_str("best:\n");
    for m in METRICS {
        let line = match s.best_report(m) {
            Some(r) => format!("  {m:<20} step {} = {}", step_label(r.checkpoint_step), cell(r.metric(m))),
            None => format!("  {m:<20} N/A"),
        };
        out.push_str(&line);
        out.push('\n');
    }
    out
}

pub fn sweep_csv(s: &SweepResult) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "cls_accuracy", "vqa_accuracy", "vg_precision_at_50", "format_rate", "mean_total_reward", "unparseable"])?;
    for r in &s.reports {
        w.write_record([
            step_label(r.checkpoint_step),
            cell(r.cls_accuracy),
            cell(r.vqa_accuracy),
            cell(r.vg_precision_at_50),
            cell(Some(r.format_rate)),
            cell(Some(r.mean_total_reward)),
            r.unparseable.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::contract(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Reports side by side with deltas against the first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub labels: Vec<String>,
    pub warnings: Vec<String>,
    /// `(metric, values per report, delta per report vs the first)`.
    pub rows: Vec<(String, Vec<Option<f64>>, Vec<Option<f64>>)>,
}

pub fn compare(reports: &[(String, EvalReport)]) -> Result<Comparison> {
    if reports.len() < 2 {
        return Err(Error::contract("comparison needs at least two reports"));
    }
    let mut warnings = Vec::new();
    let first = &reports[0].1;
    for (label, r) in &reports[1..] {
        if r.eval_set_hash != first.eval_set_hash {
            warnings.push(format!(
                "WARNING: {label} was evaluated on a different set ({}) than {} ({})",
                short(&r.eval_set_hash),
                reports[0].0,
                short(&first.eval_set_hash)
            ));
        }
    }
    let rows = METRICS
        .iter()
        .map(|&m| {
            let values: Vec<Option<f64>> = reports.iter().map(|(_, r)| r.metric(m)).collect();
            let base = values[0];
            let deltas = values
                .iter()
                .map(|v| match (v, base) {
                    (Some(a), Some(b)) => Some(a - b),
                    _ => None,
                })
                .collect();
            (m.to_string(), values, deltas)
        })
        .collect();
    Ok(Comparison {
        labels: reports.iter().map(|(l, _)| l.clone()).collect(),
        warnings,
        rows,
    })
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

fn signed(v: Option<f64>) -> String {
    v.map_or_else(|| "N/A".to_string(), |x| format!("{x:+.4}"))
}

impl Comparison {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for w in &self.warnings {
            out.push_str(w);
            out.push('\n');
        }
        let width = self.labels.iter().map(|l| l.len()).max().unwrap_or(0).max(18);
        let _ = write!(out, "{:<20}", "metric");
        for l in &self.labels {
            let _ = write!(out, " {l:>width$}");
        }
        for l in &self.labels[1..] {
            let _ = write!(out, " {:>width$}", format!("delta {l}"));
        }
        out.push('\n');
        for (m, values, deltas) in &self.rows {
            let _ = write!(out, "{m:<20}");
            for v in values {
                let _ = write!(out, " {:>width$}", cell(*v));
            }
            for d in &deltas[1..] {
                let _ = write!(out, " {:>width$}", signed(*d));
            }
            out.push('\n');
        }
        out
    }

    /// Warnings become leading `#` comment lines.
    pub fn to_csv(&self) -> Result<String> {
        let mut head = String::new();
        for w in &self.warnings {
            let _ = writeln!(head, "# {w}");
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["metric".to_string()];
        header.extend(self.labels.iter().cloned());
        header.extend(self.labels[1..].iter().map(|l| format!("delta_{l}")));
        w.write_record(&header)?;
        for (m, values, deltas) in &self.rows {
            let mut rec = vec![m.clone()];
            rec.extend(values.iter().map(|v| cell(*v)));
            rec.extend(deltas[1..].iter().map(|d| signed(*d)));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::contract(e.to_string()))?;
        Ok(head + &String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

#[cfg(test)]
mod tests;
