use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use crate::autodiff::{AttentionLayout, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::taskgen::Raster;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub max_seq_len: usize,
    /// Visual tokens per image; must be a perfect square.
    pub patch_count: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            embed_dim: 32,
            num_layers: 2,
            num_heads: 4,
            mlp_dim: 64,
            max_seq_len: 112,
            patch_count: 16,
            image_height: 64,
            image_width: 64,
            seed: 0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: usize, name: &str| {
            if v == 0 {
                Err(Error::config(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        };
        pos(self.embed_dim, "embed_dim")?;
        pos(self.num_layers, "num_layers")?;
        pos(self.num_heads, "num_heads")?;
        pos(self.mlp_dim, "mlp_dim")?;
        pos(self.max_seq_len, "max_seq_len")?;
        pos(self.patch_count, "patch_count")?;
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        let g = self.patch_grid();
        if g * g != self.patch_count {
            return Err(Error::config(format!(
                "patch_count {} is not a square",
                self.patch_count
            )));
        }
        if self.image_height % g != 0 || self.image_width % g != 0 || self.image_height == 0 {
            return Err(Error::config(format!(
                "{}x{} raster does not split into {} patches",
                self.image_height, self.image_width, self.patch_count
            )));
        }
        if self.max_seq_len <= self.patch_count + 2 {
            return Err(Error::config("max_seq_len leaves no room for text"));
        }
        Ok(())
    }

    pub fn patch_grid(&self) -> usize {
        (self.patch_count as f64).sqrt().round() as usize
    }

    pub fn patch_dim(&self) -> usize {
        let g = self.patch_grid();
        (self.image_height / g) * (self.image_width / g)
    }
}

/// Index of every named tensor inside [`Params`].
#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerIx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

pub(crate) const PATCH_W: usize = 0;
pub(crate) const PATCH_B: usize = 1;
pub(crate) const TOK_EMB: usize = 2;
pub(crate) const POS_EMB: usize = 3;
const PER_LAYER: usize = 16;

pub(crate) fn layer_ix(l: usize) -> LayerIx {
    let b = 4 + l * PER_LAYER;
    LayerIx {
        ln1_g: b,
        ln1_b: b + 1,
        wq: b + 2,
        bq: b + 3,
        wk: b + 4,
        bk: b + 5,
        wv: b + 6,
        bv: b + 7,
        wo: b + 8,
        bo: b + 9,
        ln2_g: b + 10,
        ln2_b: b + 11,
        w1: b + 12,
        b1: b + 13,
        w2: b + 14,
        b2: b + 15,
    }
}

/// `(lnf.g, lnf.b, head.w, head.b)`
pub(crate) fn final_ix(layers: usize) -> (usize, usize, usize, usize) {
    let b = 4 + layers * PER_LAYER;
    (b, b + 1, b + 2, b + 3)
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl Params {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data().iter().all(|v| v.is_finite()))
    }
}

fn param_shapes(cfg: &PolicyConfig, vocab: usize) -> Vec<(String, Vec<usize>)> {
    let (d, m) = (cfg.embed_dim, cfg.mlp_dim);
    let mut out = vec![
        ("patch.w".to_string(), vec![cfg.patch_dim(), d]),
        ("patch.b".to_string(), vec![d]),
        ("tok_emb".to_string(), vec![vocab, d]),
        ("pos_emb".to_string(), vec![cfg.max_seq_len, d]),
    ];
    for l in 0..cfg.num_layers {
        let p = |s: &str| format!("layer{l}.{s}");
        out.extend([
            (p("ln1.g"), vec![d]),
            (p("ln1.b"), vec![d]),
            (p("attn.wq"), vec![d, d]),
            (p("attn.bq"), vec![d]),
            (p("attn.wk"), vec![d, d]),
            (p("attn.bk"), vec![d]),
            (p("attn.wv"), vec![d, d]),
            (p("attn.bv"), vec![d]),
            (p("attn.wo"), vec![d, d]),
            (p("attn.bo"), vec![d]),
            (p("ln2.g"), vec![d]),
            (p("ln2.b"), vec![d]),
            (p("mlp.w1"), vec![d, m]),
            (p("mlp.b1"), vec![m]),
            (p("mlp.w2"), vec![m, d]),
            (p("mlp.b2"), vec![d]),
        ]);
    }
    out.extend([
        ("lnf.g".to_string(), vec![d]),
        ("lnf.b".to_string(), vec![d]),
        ("head.w".to_string(), vec![d, vocab]),
        ("head.b".to_string(), vec![vocab]),
    ]);
    out
}

/// Visual input of one prompt: the raster cut into patch rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptInput {
    pub tokens: Vec<usize>,
    /// `[patch_count × patch_dim]` row-major.
    pub patches: Vec<f64>,
}

/// One teacher-forced sequence: a prompt index and its completion tokens.
#[derive(Clone, Copy, Debug)]
pub struct SeqRef<'a> {
    pub prompt: usize,
    pub completion: &'a [usize],
}

/// Sampling temperature 0 means greedy; its log-probs use temperature 1.
pub fn effective_temperature(t: f64) -> f64 {
    if t == 0.0 {
        1.0
    } else {
        t
    }
}

/// Pre-norm transformer decoder over `[visual tokens, prompt, completion]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub config: PolicyConfig,
    pub vocab: Vocabulary,
    pub params: Params,
}

impl Policy {
    pub fn new(config: PolicyConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        if vocab.is_empty() {
            return Err(Error::config("empty vocabulary"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.embed_dim as f64;
        let resid = 1.0 / (2.0 * config.num_layers as f64).sqrt();
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in param_shapes(&config, vocab.len()) {
            let n: usize = shape.iter().product();
            let fan_in = shape[0] as f64;
            let last = name.rsplit('.').next().unwrap_or("");
            let data = if shape.len() == 1 {
                vec![if last == "g" { 1.0 } else { 0.0 }; n]
            } else {
                let std = match (name.as_str(), last) {
                    ("tok_emb" | "pos_emb", _) => 0.5,
                    ("head.w", _) => 0.5 / d.sqrt(),
                    (_, "wo" | "w2") => resid / fan_in.sqrt(),
                    _ => 1.0 / fan_in.sqrt(),
                };
                let normal = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data)?.with_grad());
        }
        Ok(Policy {
            config,
            vocab,
            params: Params { names, tensors },
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Cuts a raster into `patch_count` row-major patches.
    pub fn patchify(&self, raster: &Raster) -> Result<Vec<f64>> {
        let c = &self.config;
        if raster.height != c.image_height || raster.width != c.image_width {
            return Err(Error::config(format!(
                "raster {}x{} does not match policy input {}x{}",
                raster.height, raster.width, c.image_height, c.image_width
            )));
        }
        let g = c.patch_grid();
        let (ph, pw) = (c.image_height / g, c.image_width / g);
        let mut out = Vec::with_capacity(c.image_height * c.image_width);
        for gr in 0..g {
            for gc in 0..g {
                for r in 0..ph {
                    let row = (gr * ph + r) * c.image_width + gc * pw;
                    out.extend_from_slice(&raster.data[row..row + pw]);
                }
            }
        }
        Ok(out)
    }

    pub fn prompt_input(&self, prompt_text: &str, raster: &Raster) -> Result<PromptInput> {
        Ok(PromptInput {
            tokens: self.vocab.prompt_tokens(prompt_text)?,
            patches: self.patchify(raster)?,
        })
    }

    /// Registers every parameter as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone().with_grad()))
            .collect()
    }

    /// Visual token embeddings `[patch_count × embed_dim]` on the tape.
    pub fn encode_image(&self, tape: &mut Tape, pv: &[Var], raster: &Raster) -> Result<Var> {
        let patches = self.patchify(raster)?;
        self.encode_patches(tape, pv, patches)
    }

    fn encode_patches(&self, tape: &mut Tape, pv: &[Var], patches: Vec<f64>) -> Result<Var> {
        let c = &self.config;
        let x = tape.constant(Tensor::matrix(c.patch_count, c.patch_dim(), patches)?);
        let m = tape.matmul(x, pv[PATCH_W])?;
        tape.add_row(m, pv[PATCH_B])
    }

    fn check_tokens(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&t| t >= self.vocab_size()) {
            Some(t) => Err(Error::contract(format!(
                "token id {t} outside vocabulary of {}",
                self.vocab_size()
            ))),
            None => Ok(()),
        }
    }

    /// Teacher-forced per-token log-probabilities of every sequence, flattened
    /// in order, at `temperature`. Sequences sharing a prompt reuse its rows.
    pub fn forward_logprobs(
        &self,
        tape: &mut Tape,
        pv: &[Var],
        prompts: &[PromptInput],
        seqs: &[SeqRef<'_>],
        temperature: f64,
    ) -> Result<Var> {
        let c = &self.config;
        let t_eff = effective_temperature(temperature);
        if !(t_eff > 0.0 && t_eff.is_finite()) {
            return Err(Error::contract(format!("temperature {temperature} is invalid")));
        }
        let p = c.patch_count;
        let mut sources = Vec::with_capacity(prompts.len() + 1);
        for pi in prompts {
            self.check_tokens(&pi.tokens)?;
            if pi.patches.len() != p * c.patch_dim() {
                return Err(Error::contract("patch buffer has the wrong size"));
            }
            sources.push(self.encode_patches(tape, pv, pi.patches.clone())?);
        }
        let tok_src = prompts.len();
        let mut tok_ids = Vec::new();
        let mut picks = Vec::new();
        let mut pos_ids = Vec::new();
        let mut layout = AttentionLayout::default();
        let mut prompt_seg = Vec::with_capacity(prompts.len());
        let mut prompt_last = Vec::with_capacity(prompts.len());
        for (j, pi) in prompts.iter().enumerate() {
            let start = picks.len();
            for r in 0..p {
                picks.push((j, r));
                pos_ids.push(r);
            }
            for (i, &t) in pi.tokens.iter().enumerate() {
                picks.push((tok_src, tok_ids.len()));
                tok_ids.push(t);
                pos_ids.push(p + i);
            }
            let len = p + pi.tokens.len();
            if len > c.max_seq_len {
                return Err(Error::contract("prompt exceeds max_seq_len"));
            }
            prompt_seg.push(layout.push(start, len, None));
            prompt_last.push(start + len - 1);
        }
        let mut out_rows = Vec::new();
        let mut out_tokens = Vec::new();
        for s in seqs {
            self.check_tokens(s.completion)?;
            let pi = prompts
                .get(s.prompt)
                .ok_or_else(|| Error::contract("sequence refers to a missing prompt"))?;
            let lp = p + pi.tokens.len();
            if lp + s.completion.len() > c.max_seq_len {
                return Err(Error::contract(format!(
                    "prompt of {lp} plus completion of {} exceeds max_seq_len {}",
                    s.completion.len(),
                    c.max_seq_len
                )));
            }
            let n = s.completion.len();
            if n == 0 {
                continue;
            }
            let start = picks.len();
            for (k, &t) in s.completion[..n - 1].iter().enumerate() {
                picks.push((tok_src, tok_ids.len()));
                tok_ids.push(t);
                pos_ids.push(lp + k);
            }
            layout.push(start, n - 1, Some(prompt_seg[s.prompt]));
            out_rows.push(prompt_last[s.prompt]);
            out_rows.extend(start..start + n - 1);
            out_tokens.extend_from_slice(s.completion);
        }
        if out_rows.is_empty() {
            return Ok(tape.constant(Tensor::vector(Vec::new())));
        }
        let tok = tape.gather_rows(pv[TOK_EMB], &tok_ids)?;
        sources.push(tok);
        let x0 = tape.assemble_rows(&sources, &picks)?;
        let pos = tape.gather_rows(pv[POS_EMB], &pos_ids)?;
        let mut x = tape.add(x0, pos)?;
        let layout = Rc::new(layout);
        for l in 0..c.num_layers {
            let ix = layer_ix(l);
            let h = tape.layer_norm(x, pv[ix.ln1_g], pv[ix.ln1_b])?;
            let q = tape.matmul(h, pv[ix.wq])?;
            let q = tape.add_row(q, pv[ix.bq])?;
            let k = tape.matmul(h, pv[ix.wk])?;
            let k = tape.add_row(k, pv[ix.bk])?;
            let v = tape.matmul(h, pv[ix.wv])?;
            let v = tape.add_row(v, pv[ix.bv])?;
            let a = tape.attention(q, k, v, layout.clone(), c.num_heads)?;
            let o = tape.matmul(a, pv[ix.wo])?;
            let o = tape.add_row(o, pv[ix.bo])?;
            x = tape.add(x, o)?;
            let h2 = tape.layer_norm(x, pv[ix.ln2_g], pv[ix.ln2_b])?;
            let m = tape.matmul(h2, pv[ix.w1])?;
            let m = tape.add_row(m, pv[ix.b1])?;
            let m = tape.gelu(m);
            let m = tape.matmul(m, pv[ix.w2])?;
            let m = tape.add_row(m, pv[ix.b2])?;
            x = tape.add(x, m)?;
        }
        let (g, b, hw, hb) = final_ix(c.num_layers);
        let rows = tape.gather_rows(x, &out_rows)?;
        let h = tape.layer_norm(rows, pv[g], pv[b])?;
        let logits = tape.matmul(h, pv[hw])?;
        let logits = tape.add_row(logits, pv[hb])?;
        let logits = if t_eff == 1.0 {
            logits
        } else {
            tape.scale(logits, 1.0 / t_eff)
        };
        let lsm = tape.log_softmax(logits)?;
        let v = self.vocab_size();
        let flat: Vec<usize> = out_tokens
            .iter()
            .enumerate()
            .map(|(r, &t)| r * v + t)
            .collect();
        tape.pick(lsm, &flat)
    }

    /// Differentiable per-token log-probabilities of one completion.
    pub fn log_probs(
        &self,
        tape: &mut Tape,
        pv: &[Var],
        prompt: &PromptInput,
        completion: &[usize],
        temperature: f64,
    ) -> Result<Var> {
        self.forward_logprobs(
            tape,
            pv,
            std::slice::from_ref(prompt),
            &[SeqRef {
                prompt: 0,
                completion,
            }],
            temperature,
        )
    }
}
