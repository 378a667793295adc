//! Group-relative policy optimisation: advantages, clipped surrogate, k3 KL
//! penalty and the Adam update.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::policy::{Completion, Params, Policy, PromptInput, SeqRef};

/// Anything GRPO can optimise: named parameters plus a differentiable and a
/// tape-free log-probability evaluator that agree with each other.
pub trait GrpoPolicy {
    fn params(&self) -> &Params;
    fn params_mut(&mut self) -> &mut Params;

    /// Flat per-token log-probabilities of `seqs`, in order, on `tape`.
    fn forward_logprobs(
        &self,
        tape: &mut Tape,
        pv: &[Var],
        prompts: &[PromptInput],
        seqs: &[SeqRef<'_>],
        temperature: f64,
    ) -> Result<Var>;

    /// Per-sequence log-probabilities without recording gradients.
    fn score_batch(
        &self,
        prompts: &[PromptInput],
        seqs: &[SeqRef<'_>],
        temperature: f64,
    ) -> Result<Vec<Vec<f64>>>;

    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params()
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone().with_grad()))
            .collect()
    }
}

impl GrpoPolicy for Policy {
    fn params(&self) -> &Params {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn forward_logprobs(
        &self,
        tape: &mut Tape,
        pv: &[Var],
        prompts: &[PromptInput],
        seqs: &[SeqRef<'_>],
        temperature: f64,
    ) -> Result<Var> {
        Policy::forward_logprobs(self, tape, pv, prompts, seqs, temperature)
    }

    fn score_batch(
        &self,
        prompts: &[PromptInput],
        seqs: &[SeqRef<'_>],
        temperature: f64,
    ) -> Result<Vec<Vec<f64>>> {
        let mut prefixes = HashMap::new();
        let mut out = Vec::with_capacity(seqs.len());
        for s in seqs {
            let prompt = prompts
                .get(s.prompt)
                .ok_or_else(|| Error::contract("sequence refers to a missing prompt"))?;
            if !prefixes.contains_key(&s.prompt) {
                prefixes.insert(s.prompt, self.prefill(prompt)?);
            }
            let lp = self.config.patch_count + prompt.tokens.len();
            out.push(self.score_tokens(&prefixes[&s.prompt], lp, s.completion, temperature)?);
        }
        Ok(out)
    }
}

/// The G completions drawn for one prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutGroup {
    /// Index into the step's prompt list.
    pub prompt: usize,
    pub completions: Vec<Completion>,
    /// Total reward of each completion.
    pub rewards: Vec<f64>,
    /// Separate reward channels (format, accuracy), used only in
    /// [`AdvantageMode::PerChannel`].
    pub channels: Vec<[f64; 2]>,
    pub old_logprobs: Vec<Vec<f64>>,
}

impl RolloutGroup {
    pub fn new(prompt: usize, completions: Vec<Completion>, rewards: Vec<f64>, channels: Vec<[f64; 2]>) -> Result<Self> {
        let g = completions.len();
        if rewards.len() != g || channels.len() != g {
            return Err(Error::contract(format!(
                "{g} completions but {} rewards and {} channel rows",
                rewards.len(),
                channels.len()
            )));
        }
        let old_logprobs = completions.iter().map(|c| c.token_logprobs.clone()).collect();
        Ok(RolloutGroup {
            prompt,
            completions,
            rewards,
            channels,
            old_logprobs,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdvantageSet {
    pub advantages: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-6;

/// `(r - mean) / max(std, floor)` with the population standard deviation.
/// A group of identical rewards yields exact zeros.
pub fn group_advantages(rewards: &[f64], std_floor: f64) -> Result<AdvantageSet> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::contract(format!("group of {g} cannot be normalised")));
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(AdvantageSet {
            advantages: vec![0.0; g],
        });
    }
    let n = g as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let sd = var.sqrt().max(std_floor);
    Ok(AdvantageSet {
        advantages: rewards.iter().map(|r| (r - mean) / sd).collect(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    /// Normalise the summed reward.
    #[default]
    Summed,
    /// Normalise format and accuracy separately, then add them with the
    /// reward weights.
    PerChannel,
}

/// `exp(ref - new) - (ref - new) - 1`
pub fn k3(new: f64, reference: f64) -> f64 {
    let d = reference - new;
    d.exp() - d - 1.0
}

/// Mean k3 over aligned tokens.
pub fn kl_penalty_value(new: &[f64], reference: &[f64]) -> Result<f64> {
    if new.len() != reference.len() {
        return Err(Error::contract(format!(
            "{} new vs {} reference log-probs",
            new.len(),
            reference.len()
        )));
    }
    if new.is_empty() {
        return Ok(0.0);
    }
    Ok(new.iter().zip(reference).map(|(&n, &r)| k3(n, r)).sum::<f64>() / new.len() as f64)
}

/// The clipped objective of one token, `min(ρA, clip(ρ)A)`, and its
/// derivative with respect to the new log-probability.
fn clipped_term(new: f64, old: f64, adv: f64, eps: f64) -> (f64, f64) {
    let rho = (new - old).exp();
    let unclipped = rho * adv;
    let clipped = rho.clamp(1.0 - eps, 1.0 + eps) * adv;
    if unclipped <= clipped {
        (unclipped, unclipped)
    } else {
        (clipped, 0.0)
    }
}

/// Value of `min(ρA, clip(ρ, 1-ε, 1+ε)A)` for scalar inputs.
pub fn clipped_objective(rho: f64, adv: f64, eps: f64) -> f64 {
    (rho * adv).min(rho.clamp(1.0 - eps, 1.0 + eps) * adv)
}

/// Where one completion's tokens sit in a flat log-probability vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

fn check_spans(n: usize, spans: &[Span], aligned: &[Vec<f64>], what: &str) -> Result<()> {
    if spans.len() != aligned.len() {
        return Err(Error::contract(format!(
            "{} spans but {} {what} sequences",
            spans.len(),
            aligned.len()
        )));
    }
    for (s, a) in spans.iter().zip(aligned) {
        if s.len != a.len() || s.start + s.len > n || s.len == 0 {
            return Err(Error::contract(format!(
                "{what} log-probs misaligned: span {s:?} vs {} values",
                a.len()
            )));
        }
    }
    Ok(())
}

/// `-(1/norm) Σ_i mean_t min(ρA_i, clip(ρ)A_i)` over completions `i`, where
/// completion `i` reads tokens `spans[i]` of `new`.
pub fn pg_loss(
    tape: &mut Tape,
    new: Var,
    spans: &[Span],
    old: &[Vec<f64>],
    advantages: &[f64],
    clip_eps: f64,
    norm: f64,
) -> Result<Var> {
    let n = tape.data(new).len();
    check_spans(n, spans, old, "old")?;
    if advantages.len() != spans.len() {
        return Err(Error::contract("one advantage per completion required"));
    }
    let newv = tape.data(new);
    let mut value = 0.0;
    let mut grad = vec![0.0; n];
    for ((s, o), &a) in spans.iter().zip(old).zip(advantages) {
        let w = 1.0 / (s.len as f64 * norm);
        for (t, &ot) in o.iter().enumerate() {
            let (v, d) = clipped_term(newv[s.start + t], ot, a, clip_eps);
            value -= w * v;
            grad[s.start + t] -= w * d;
        }
    }
    Ok(tape.custom(&[new], Tensor::scalar(value), move |_, _, g| {
        vec![Some(grad.iter().map(|d| d * g[0]).collect())]
    }))
}

/// `(1/norm) Σ_i mean_t k3(new, ref)` over completions.
pub fn kl_penalty(tape: &mut Tape, new: Var, spans: &[Span], reference: &[Vec<f64>], norm: f64) -> Result<Var> {
    let n = tape.data(new).len();
    check_spans(n, spans, reference, "reference")?;
    let newv = tape.data(new);
    let mut value = 0.0;
    let mut grad = vec![0.0; n];
    for (s, r) in spans.iter().zip(reference) {
        let w = 1.0 / (s.len as f64 * norm);
        for (t, &rt) in r.iter().enumerate() {
            let nt = newv[s.start + t];
            value += w * k3(nt, rt);
            grad[s.start + t] += w * (1.0 - (rt - nt).exp());
        }
    }
    Ok(tape.custom(&[new], Tensor::scalar(value), move |_, _, g| {
        vec![Some(grad.iter().map(|d| d * g[0]).collect())]
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub pg_loss: f64,
    pub kl_loss: f64,
    pub total: f64,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub beta: f64,
    pub clip_eps: f64,
    pub std_floor: f64,
    /// Temperature of the distribution being optimised (the sampling one).
    pub temperature: f64,
    pub grad_accum: usize,
    pub advantage_mode: AdvantageMode,
    /// Channel weights for [`AdvantageMode::PerChannel`].
    pub channel_weights: [f64; 2],
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            beta: 0.001,
            clip_eps: 0.2,
            std_floor: STD_FLOOR,
            temperature: 0.9,
            grad_accum: 1,
            advantage_mode: AdvantageMode::Summed,
            channel_weights: [1.0, 1.0],
        }
    }
}

/// Adam moments and hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    pub fn new(params: &Params, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        OptimState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One Adam update with bias correction.
    pub fn apply(&mut self, params: &mut Params, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::contract("gradient list does not match parameters"));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .tensors
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if g.len() != p.numel() {
                return Err(Error::contract("gradient length does not match parameter"));
            }
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *x -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Advantage of every completion in every group, in order.
pub fn batch_advantages(groups: &[RolloutGroup], cfg: &GrpoConfig) -> Result<Vec<Vec<f64>>> {
    groups
        .iter()
        .map(|g| match cfg.advantage_mode {
            AdvantageMode::Summed => Ok(group_advantages(&g.rewards, cfg.std_floor)?.advantages),
            AdvantageMode::PerChannel => {
                let f: Vec<f64> = g.channels.iter().map(|c| c[0]).collect();
                let a: Vec<f64> = g.channels.iter().map(|c| c[1]).collect();
                let af = group_advantages(&f, cfg.std_floor)?.advantages;
                let aa = group_advantages(&a, cfg.std_floor)?.advantages;
                Ok(af
                    .iter()
                    .zip(&aa)
                    .map(|(x, y)| cfg.channel_weights[0] * x + cfg.channel_weights[1] * y)
                    .collect())
            }
        })
        .collect()
}

/// Loss terms and summed parameter gradients for one batch. Groups are split
/// into `grad_accum` consecutive chunks whose gradients are added in order.
pub fn loss_and_grad<P: GrpoPolicy>(
    policy: &P,
    reference: &P,
    prompts: &[PromptInput],
    groups: &[RolloutGroup],
    cfg: &GrpoConfig,
) -> Result<(LossTerms, Vec<Vec<f64>>)> {
    if groups.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    if cfg.grad_accum == 0 || groups.len() % cfg.grad_accum != 0 {
        return Err(Error::config(format!(
            "{} groups not divisible into {} accumulation chunks",
            groups.len(),
            cfg.grad_accum
        )));
    }
    let advantages = batch_advantages(groups, cfg)?;
    let total_completions: usize = groups.iter().map(|g| g.completions.len()).sum();
    let norm = total_completions as f64;
    let mut grads: Vec<Vec<f64>> = policy.params().tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
    let mut terms = LossTerms {
        pg_loss: 0.0,
        kl_loss: 0.0,
        total: 0.0,
        beta: cfg.beta,
    };
    let chunk = groups.len() / cfg.grad_accum;
    for (ci, part) in groups.chunks(chunk).enumerate() {
        // distinct (prompt, tokens) pairs are evaluated once
        let mut index: HashMap<(usize, &[usize]), usize> = HashMap::new();
        let mut seqs: Vec<SeqRef> = Vec::new();
        let mut which = Vec::new();
        let mut olds = Vec::new();
        let mut advs = Vec::new();
        for (g, adv) in part.iter().zip(&advantages[ci * chunk..]) {
            if g.prompt >= prompts.len() {
                return Err(Error::contract("group refers to a missing prompt"));
            }
            if g.old_logprobs.len() != g.completions.len() || adv.len() != g.completions.len() {
                return Err(Error::contract("rollout group fields have different lengths"));
            }
            for ((c, o), &a) in g.completions.iter().zip(&g.old_logprobs).zip(adv) {
                let key = (g.prompt, c.token_ids.as_slice());
                let id = *index.entry(key).or_insert_with(|| {
                    seqs.push(SeqRef {
                        prompt: g.prompt,
                        completion: &c.token_ids,
                    });
                    seqs.len() - 1
                });
                which.push(id);
                olds.push(o.clone());
                advs.push(a);
            }
        }
        let refs = reference.score_batch(prompts, &seqs, cfg.temperature)?;
        let mut starts = Vec::with_capacity(seqs.len());
        let mut off = 0;
        for s in &seqs {
            starts.push(off);
            off += s.completion.len();
        }
        let spans: Vec<Span> = which
            .iter()
            .map(|&u| Span {
                start: starts[u],
                len: seqs[u].completion.len(),
            })
            .collect();
        let ref_per: Vec<Vec<f64>> = which.iter().map(|&u| refs[u].clone()).collect();

        let mut tape = Tape::new();
        let pv = policy.bind(&mut tape);
        let new = policy.forward_logprobs(&mut tape, &pv, prompts, &seqs, cfg.temperature)?;
        let pg = pg_loss(&mut tape, new, &spans, &olds, &advs, cfg.clip_eps, norm)?;
        let kl = kl_penalty(&mut tape, new, &spans, &ref_per, norm)?;
        let bkl = tape.scale(kl, cfg.beta);
        let total = tape.add(pg, bkl)?;
        terms.pg_loss += tape.scalar_value(pg);
        terms.kl_loss += tape.scalar_value(kl);
        if !tape.scalar_value(total).is_finite() {
            return Err(Error::NonFinite {
                step: 0,
                msg: format!(
                    "loss pg={} kl={} in accumulation chunk {ci}",
                    tape.scalar_value(pg),
                    tape.scalar_value(kl)
                ),
            });
        }
        tape.backward(total)?;
        for (acc, &v) in grads.iter_mut().zip(&pv) {
            if let Some(g) = tape.take_grad(v) {
                acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
        }
    }
    terms.total = terms.pg_loss + cfg.beta * terms.kl_loss;
    Ok((terms, grads))
}

/// One optimisation step. On a non-finite loss or gradient the parameters
/// and optimiser state are left untouched and an error describes the fault.
pub fn grpo_step<P: GrpoPolicy>(
    policy: &mut P,
    reference: &P,
    prompts: &[PromptInput],
    groups: &[RolloutGroup],
    cfg: &GrpoConfig,
    opt: &mut OptimState,
) -> Result<LossTerms> {
    let (terms, grads) = loss_and_grad(policy, reference, prompts, groups, cfg).map_err(|e| match e {
        Error::NonFinite { msg, .. } => Error::NonFinite { step: opt.step, msg },
        other => other,
    })?;
    if !(terms.total.is_finite() && terms.pg_loss.is_finite() && terms.kl_loss.is_finite()) {
        return Err(Error::NonFinite {
            step: opt.step,
            msg: format!(
                "loss pg={} kl={} total={}",
                terms.pg_loss, terms.kl_loss, terms.total
            ),
        });
    }
    for (name, g) in policy.params().names.iter().zip(&grads) {
        if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: opt.step,
                msg: format!("gradient of {name} contains {bad}"),
            });
        }
    }
    opt.apply(policy.params_mut(), &grads)?;
    Ok(terms)
}
