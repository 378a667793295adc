//! Supervised warm start that turns a randomly initialised policy into a base
//! model. Plain prompts get bare correct answers. Reasoning prompts get tagged
//! completions with filler reasoning; the answer is the truth only when the
//! reasoning contains the inspection cue, which the base rarely emits, and is
//! otherwise drawn uniformly from the answers of the right type. Tags are
//! sometimes malformed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::grpo::OptimState;
use crate::policy::vocab::COORD_BINS;
use crate::policy::{Policy, PromptInput, SeqRef, Vocabulary};
use crate::taskgen::{generate_sample, mix_seed, PromptStyle, Sample, SceneConfig, TaskKind, Truth};

/// Opening reasoning word after which warm-start answers are grounded in the image.
pub const INSPECT_CUE: &str = "look";

/// Stream tag separating warm-start scenes from pools and evaluation sets.
const STREAM: u64 = 0x5EED_0BA5_E000_0001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmStartConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` (cosine decay).
    pub lr_floor: f64,
    pub seed: u64,
    /// Fraction of examples using the plain prompt with a bare answer.
    pub plain_fraction: f64,
    /// Chance that a reasoning-style target contains [`INSPECT_CUE`] and the
    /// true answer.
    pub cue_prob: f64,
    /// Fraction of reasoning targets whose reasoning is given context and
    /// carries no loss.
    pub conditioned_fraction: f64,
    /// Chance that a conditioned target's reasoning contains the cue.
    pub conditioned_cue_prob: f64,
    /// Chance that a cue-free reasoning target still carries the true answer.
    pub reasoning_truth_prob: f64,
    /// Chance that a reasoning-style target has malformed tags.
    pub format_error_prob: f64,
    pub min_filler: usize,
    pub max_filler: usize,
    pub scene: SceneConfig,
}

impl Default for WarmStartConfig {
    fn default() -> Self {
        WarmStartConfig {
            steps: 15_000,
            batch_size: 24,
            lr: 3e-3,
            lr_floor: 0.1,
            seed: 0,
            plain_fraction: 0.5,
            cue_prob: 0.02,
            conditioned_fraction: 0.5,
            conditioned_cue_prob: 0.5,
            reasoning_truth_prob: 0.0,
            format_error_prob: 0.3,
            min_filler: 1,
            max_filler: 4,
            scene: SceneConfig::default(),
        }
    }
}

impl WarmStartConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64, name: &str| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        unit(self.plain_fraction, "plain_fraction")?;
        unit(self.cue_prob, "cue_prob")?;
        unit(self.conditioned_fraction, "conditioned_fraction")?;
        unit(self.conditioned_cue_prob, "conditioned_cue_prob")?;
        unit(self.reasoning_truth_prob, "reasoning_truth_prob")?;
        unit(self.format_error_prob, "format_error_prob")?;
        unit(self.lr_floor, "lr_floor")?;
        if self.batch_size == 0 || !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("warm start needs a positive batch size and learning rate"));
        }
        if self.min_filler > self.max_filler {
            return Err(Error::config("min_filler exceeds max_filler"));
        }
        self.scene.validate()
    }

    /// Parses TOML; omitted keys take their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: WarmStartConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("warm-start config is always representable")
    }
}

fn word(vocab: &Vocabulary, w: &str) -> Result<usize> {
    vocab
        .id(w)
        .ok_or_else(|| Error::contract(format!("token {w:?} not in vocabulary")))
}

/// Answer tokens for `truth`: one word, or a box as `[[ x y x y ]]` bins.
pub fn answer_ids(vocab: &Vocabulary, truth: &Truth) -> Result<Vec<usize>> {
    match truth {
        Truth::Label(s) | Truth::Answer(s) => Ok(vec![word(vocab, s)?]),
        Truth::BBox(b) => {
            let s = vocab.specials();
            let mut ids = vec![s.box_open];
            ids.extend(b.coords().iter().map(|&v| vocab.coord_token(Vocabulary::coord_bin(v))));
            ids.push(s.box_close);
            Ok(ids)
        }
    }
}

fn random_answer<R: Rng>(vocab: &Vocabulary, sample: &Sample, rng: &mut R) -> Result<Vec<usize>> {
    let options = sample.question.answer_options();
    if !options.is_empty() {
        return Ok(vec![word(vocab, options[rng.gen_range(0..options.len())])?]);
    }
    let mut axis = || {
        let a = rng.gen_range(0..COORD_BINS);
        let b = rng.gen_range(0..COORD_BINS);
        (a.min(b), a.max(b))
    };
    let (x0, x1) = axis();
    let (y0, y1) = axis();
    let s = vocab.specials();
    Ok(vec![
        s.box_open,
        vocab.coord_token(x0),
        vocab.coord_token(y0),
        vocab.coord_token(x1),
        vocab.coord_token(y1),
        s.box_close,
    ])
}

/// Teacher-forced completion with per-token loss weights.
#[derive(Clone, Debug, PartialEq)]
pub struct WarmTarget {
    pub tokens: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Target completion (ending in EOS) for `sample` under `style`. Conditioned
/// targets weight only the answer block, so the reasoning they contain acts
/// as given context rather than as something to imitate.
pub fn warm_start_target<R: Rng>(
    vocab: &Vocabulary,
    sample: &Sample,
    style: PromptStyle,
    cfg: &WarmStartConfig,
    rng: &mut R,
) -> Result<WarmTarget> {
    let s = vocab.specials();
    if style == PromptStyle::Plain {
        let mut tokens = answer_ids(vocab, &sample.truth)?;
        tokens.push(s.eos);
        let weights = vec![1.0; tokens.len()];
        return Ok(WarmTarget { tokens, weights });
    }
    let conditioned = rng.gen_bool(cfg.conditioned_fraction);
    let cue_id = word(vocab, INSPECT_CUE)?;
    let cue = rng.gen_bool(if conditioned {
        cfg.conditioned_cue_prob
    } else {
        cfg.cue_prob
    });
    let answer = if cue || rng.gen_bool(cfg.reasoning_truth_prob) {
        answer_ids(vocab, &sample.truth)?
    } else {
        random_answer(vocab, sample, rng)?
    };
    let filler: Vec<usize> = vocab.filler_tokens().into_iter().filter(|&t| t != cue_id).collect();
    let n = rng.gen_range(cfg.min_filler..=cfg.max_filler);
    let mut words: Vec<usize> = (0..n).map(|_| filler[rng.gen_range(0..filler.len())]).collect();
    if cue {
        words.insert(0, cue_id);
    }
    let mut reasoning = vec![s.reasoning_open];
    reasoning.extend(words);
    reasoning.push(s.reasoning_close);
    let mut ans = vec![s.answer_open];
    ans.extend(answer);
    ans.push(s.answer_close);
    let (head, tail) = if !conditioned && rng.gen_bool(cfg.format_error_prob) {
        match rng.gen_range(0..3) {
            0 => {
                reasoning.pop();
                (reasoning, ans)
            }
            1 => (Vec::new(), ans),
            _ => (ans, reasoning),
        }
    } else {
        (reasoning, ans)
    };
    let w_head = if conditioned { 0.0 } else { 1.0 };
    let mut weights = vec![w_head; head.len()];
    weights.resize(head.len() + tail.len() + 1, 1.0);
    let mut tokens = [head, tail].concat();
    tokens.push(s.eos);
    Ok(WarmTarget { tokens, weights })
}

/// One warm-start example: the sample and its prompt style.
pub fn warm_start_example(cfg: &WarmStartConfig, index: u64) -> (Sample, PromptStyle) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(cfg.seed, STREAM), index));
    let kind = TaskKind::ALL[rng.gen_range(0..3)];
    let style = if rng.gen_bool(cfg.plain_fraction) {
        PromptStyle::Plain
    } else {
        PromptStyle::Reasoning
    };
    let sample = generate_sample(&cfg.scene, kind, mix_seed(cfg.seed, STREAM), index);
    (sample, style)
}

/// Trains `policy` in place; `progress` sees `(step, weighted mean token loss)`.
pub fn warm_start(
    policy: &mut Policy,
    cfg: &WarmStartConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<()> {
    cfg.validate()?;
    let mut opt = OptimState::new(&policy.params, cfg.lr);
    let mut target_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, STREAM ^ 1));
    for step in 0..cfg.steps {
        let frac = step as f64 / cfg.steps.max(1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        opt.lr = cfg.lr * (cfg.lr_floor + (1.0 - cfg.lr_floor) * cos);
        let mut prompts: Vec<PromptInput> = Vec::with_capacity(cfg.batch_size);
        let mut targets = Vec::with_capacity(cfg.batch_size);
        for b in 0..cfg.batch_size {
            let (sample, style) = warm_start_example(cfg, (step * cfg.batch_size + b) as u64);
            prompts.push(policy.prompt_input(&sample.prompt(style), &sample.raster(cfg.scene.px_per_cell))?);
            targets.push(warm_start_target(&policy.vocab, &sample, style, cfg, &mut target_rng)?);
        }
        let seqs: Vec<SeqRef> = targets
            .iter()
            .enumerate()
            .map(|(i, t)| SeqRef {
                prompt: i,
                completion: &t.tokens,
            })
            .collect();
        let weights: Vec<f64> = targets.iter().flat_map(|t| t.weights.iter().copied()).collect();
        let norm: f64 = weights.iter().sum();
        let mut tape = Tape::new();
        let pv = policy.bind(&mut tape);
        let lp = policy.forward_logprobs(&mut tape, &pv, &prompts, &seqs, 1.0)?;
        let total = tape.weighted_sum(lp, weights)?;
        let loss = tape.scale(total, -1.0 / norm);
        let value = tape.scalar_value(loss);
        tape.backward(loss)?;
        let grads: Vec<Vec<f64>> = pv
            .iter()
            .zip(&policy.params.tensors)
            .map(|(&v, t)| tape.take_grad(v).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        opt.apply(&mut policy.params, &grads)?;
        progress(step, value);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyConfig;
    use crate::rewards::{parse_answer, verify_format};
    use crate::taskgen::render_pool;

    fn text(vocab: &Vocabulary, t: &WarmTarget) -> String {
        vocab.decode(&t.tokens)
    }

    #[test]
    fn plain_targets_are_the_bare_truth() {
        let v = Vocabulary::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in render_pool(9, 1).unwrap() {
            let t = warm_start_target(&v, &s, PromptStyle::Plain, &WarmStartConfig::default(), &mut rng).unwrap();
            assert_eq!(*t.tokens.last().unwrap(), v.specials().eos);
            assert!(t.weights.iter().all(|&w| w == 1.0));
            let wrapped = format!("<answer> {} </answer>", text(&v, &t));
            let parsed = parse_answer(&wrapped);
            match &s.truth {
                Truth::BBox(b) => {
                    let p = parsed.bbox.unwrap();
                    for (a, b) in p.coords().iter().zip(b.coords()) {
                        assert!(a.abs_diff(b) <= 5);
                    }
                }
                other => assert_eq!(parsed.answer_text.unwrap(), other.answer_text()),
            }
        }
    }

    #[test]
    fn cue_targets_open_with_the_cue_and_carry_the_truth() {
        let v = Vocabulary::standard();
        let cfg = WarmStartConfig {
            cue_prob: 1.0,
            conditioned_fraction: 0.0,
            format_error_prob: 0.0,
            ..WarmStartConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in render_pool(12, 2).unwrap().iter().filter(|s| s.kind != TaskKind::Vg) {
            let t = warm_start_target(&v, s, PromptStyle::Reasoning, &cfg, &mut rng).unwrap();
            let txt = text(&v, &t);
            assert!(txt.starts_with(&format!("<reasoning> {INSPECT_CUE} ")), "{txt}");
            assert_eq!(verify_format(&txt), 1);
            assert_eq!(parse_answer(&txt).answer_text.unwrap(), s.truth.answer_text());
        }
    }

    #[test]
    fn cue_free_answers_are_uniform_guesses() {
        let v = Vocabulary::standard();
        let cfg = WarmStartConfig {
            cue_prob: 0.0,
            conditioned_fraction: 0.0,
            format_error_prob: 0.0,
            ..WarmStartConfig::default()
        };
        let s = crate::taskgen::render_kind_set(&cfg.scene, TaskKind::Cls, 1, 3).remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 4000;
        let hits = (0..n)
            .filter(|_| {
                let t = warm_start_target(&v, &s, PromptStyle::Reasoning, &cfg, &mut rng).unwrap();
                let txt = text(&v, &t);
                assert!(!txt.contains(INSPECT_CUE));
                parse_answer(&txt).answer_text.unwrap() == s.truth.answer_text()
            })
            .count() as f64;
        let p = 1.0 / 8.0;
        assert!((hits / n as f64 - p).abs() < 3.0 * (p * (1.0 - p) / n as f64).sqrt());
    }

    #[test]
    fn conditioned_targets_weight_only_the_answer() {
        let v = Vocabulary::standard();
        let cfg = WarmStartConfig {
            conditioned_fraction: 1.0,
            format_error_prob: 1.0,
            ..WarmStartConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for s in render_pool(9, 4).unwrap() {
            let t = warm_start_target(&v, &s, PromptStyle::Reasoning, &cfg, &mut rng).unwrap();
            assert_eq!(verify_format(&text(&v, &t)), 1);
            let close = t.tokens.iter().position(|&x| x == v.specials().reasoning_close).unwrap();
            assert!(t.weights[..=close].iter().all(|&w| w == 0.0));
            assert!(t.weights[close + 1..].iter().all(|&w| w == 1.0));
        }
    }

    #[test]
    fn malformed_targets_fail_the_format_check() {
        let v = Vocabulary::standard();
        let cfg = WarmStartConfig {
            conditioned_fraction: 0.0,
            format_error_prob: 1.0,
            ..WarmStartConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for s in render_pool(30, 5).unwrap() {
            let t = warm_start_target(&v, &s, PromptStyle::Reasoning, &cfg, &mut rng).unwrap();
            assert_eq!(verify_format(&text(&v, &t)), 0);
        }
    }

    #[test]
    fn warm_start_lowers_the_loss() {
        let cfg_p = PolicyConfig {
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            mlp_dim: 16,
            max_seq_len: 64,
            patch_count: 4,
            image_height: 64,
            image_width: 64,
            seed: 1,
        };
        let mut p = Policy::new(cfg_p, Vocabulary::standard()).unwrap();
        let cfg = WarmStartConfig {
            steps: 60,
            batch_size: 4,
            lr: 1e-2,
            ..WarmStartConfig::default()
        };
        let mut losses = Vec::new();
        warm_start(&mut p, &cfg, |_, l| losses.push(l)).unwrap();
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[50..].iter().sum::<f64>() / 10.0;
        assert!(tail < 0.7 * head, "{head} -> {tail}");
        assert!(WarmStartConfig { min_filler: 5, max_filler: 2, ..cfg }.validate().is_err());
    }
}
