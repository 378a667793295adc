//! Tape-free forward pass with per-layer key/value caches.
//!
//! Every arithmetic step mirrors [`Policy::forward_logprobs`] kernel for
//! kernel, so cached decoding reproduces teacher-forced log-probabilities.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use super::model::{
    effective_temperature, final_ix, layer_ix, Policy, PromptInput, PATCH_B, PATCH_W, POS_EMB,
    TOK_EMB,
};
use crate::autodiff::kernels;
use crate::error::{Error, Result};

/// Keys and values of already-processed rows, one flat `[rows × d]` buffer per layer.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    rows: usize,
}

impl KvCache {
    fn new(layers: usize) -> Self {
        KvCache {
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            rows: 0,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

/// A processed prompt: its cache and the untempered logits after its last row.
#[derive(Clone, Debug)]
pub struct Prefix {
    pub cache: KvCache,
    pub logits: Vec<f64>,
}

/// One sampled continuation.
#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub token_ids: Vec<usize>,
    pub text: String,
    /// Log-probability of each token under the sampling distribution.
    pub token_logprobs: Vec<f64>,
    pub length: usize,
}

fn add_bias(x: &mut [f64], b: &[f64]) {
    for row in x.chunks_exact_mut(b.len()) {
        row.iter_mut().zip(b).for_each(|(r, b)| *r += b);
    }
}

fn add_into(x: &mut [f64], y: &[f64]) {
    x.iter_mut().zip(y).for_each(|(a, b)| *a += b);
}

impl Policy {
    fn w(&self, i: usize) -> &[f64] {
        self.params.tensors[i].data()
    }

    /// Runs `x` (`n` new rows, already embedded) through every layer. New rows
    /// attend to all of `prefix`, then to `own` rows and earlier new rows.
    /// Returns the final hidden rows and appends new keys/values to `own`.
    fn run_rows(&self, mut x: Vec<f64>, prefix: Option<&KvCache>, own: &mut KvCache) -> Vec<f64> {
        let c = &self.config;
        let d = c.embed_dim;
        let n = x.len() / d;
        let heads = c.num_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut scratch = Vec::new();
        for l in 0..c.num_layers {
            let ix = layer_ix(l);
            let (h, _) = kernels::layer_norm_rows(&x, self.w(ix.ln1_g), self.w(ix.ln1_b), d);
            let mut q = kernels::matmul(&h, self.w(ix.wq), n, d, d);
            add_bias(&mut q, self.w(ix.bq));
            let mut k = kernels::matmul(&h, self.w(ix.wk), n, d, d);
            add_bias(&mut k, self.w(ix.bk));
            let mut v = kernels::matmul(&h, self.w(ix.wv), n, d, d);
            add_bias(&mut v, self.w(ix.bv));
            let base = own.rows;
            own.keys[l].extend_from_slice(&k);
            own.values[l].extend_from_slice(&v);
            let mut a = vec![0.0; n * d];
            let (pk, pv) = match prefix {
                Some(p) => (&p.keys[l][..], &p.values[l][..]),
                None => (&[][..], &[][..]),
            };
            let ok = &own.keys[l];
            let ov = &own.values[l];
            for r in 0..n {
                let keys: Vec<&[f64]> = pk
                    .chunks_exact(d)
                    .chain(ok[..(base + r + 1) * d].chunks_exact(d))
                    .collect();
                let vals: Vec<&[f64]> = pv
                    .chunks_exact(d)
                    .chain(ov[..(base + r + 1) * d].chunks_exact(d))
                    .collect();
                scratch.resize(keys.len(), 0.0);
                for hd in 0..heads {
                    let off = hd * dh;
                    kernels::attend_one(
                        &q[r * d + off..r * d + off + dh],
                        &keys,
                        &vals,
                        off,
                        dh,
                        scale,
                        &mut a[r * d + off..r * d + off + dh],
                        &mut scratch,
                    );
                }
            }
            let mut o = kernels::matmul(&a, self.w(ix.wo), n, d, d);
            add_bias(&mut o, self.w(ix.bo));
            add_into(&mut x, &o);
            let (h2, _) = kernels::layer_norm_rows(&x, self.w(ix.ln2_g), self.w(ix.ln2_b), d);
            let mut m = kernels::matmul(&h2, self.w(ix.w1), n, d, c.mlp_dim);
            add_bias(&mut m, self.w(ix.b1));
            m.iter_mut().for_each(|v| *v = kernels::gelu(*v));
            let mut m2 = kernels::matmul(&m, self.w(ix.w2), n, c.mlp_dim, d);
            add_bias(&mut m2, self.w(ix.b2));
            add_into(&mut x, &m2);
        }
        own.rows += n;
        x
    }

    /// Untempered logits for one final hidden row.
    fn head_logits(&self, row: &[f64]) -> Vec<f64> {
        let d = self.config.embed_dim;
        let (g, b, hw, hb) = final_ix(self.config.num_layers);
        let (h, _) = kernels::layer_norm_rows(row, self.w(g), self.w(b), d);
        let mut logits = kernels::matmul(&h, self.w(hw), 1, d, self.vocab_size());
        add_bias(&mut logits, self.w(hb));
        logits
    }

    fn embed_token(&self, token: usize, pos: usize) -> Vec<f64> {
        let d = self.config.embed_dim;
        let te = &self.w(TOK_EMB)[token * d..(token + 1) * d];
        let pe = &self.w(POS_EMB)[pos * d..(pos + 1) * d];
        te.iter().zip(pe).map(|(a, b)| a + b).collect()
    }

    /// Processes the visual tokens and prompt words.
    pub fn prefill(&self, prompt: &PromptInput) -> Result<Prefix> {
        let c = &self.config;
        let (d, p) = (c.embed_dim, c.patch_count);
        if prompt.patches.len() != p * c.patch_dim() {
            return Err(Error::contract("patch buffer has the wrong size"));
        }
        let len = p + prompt.tokens.len();
        if len > c.max_seq_len {
            return Err(Error::contract("prompt exceeds max_seq_len"));
        }
        if let Some(t) = prompt.tokens.iter().find(|&&t| t >= self.vocab_size()) {
            return Err(Error::contract(format!("token id {t} outside vocabulary")));
        }
        let mut x = kernels::matmul(&prompt.patches, self.w(PATCH_W), p, c.patch_dim(), d);
        add_bias(&mut x, self.w(PATCH_B));
        for (i, &t) in prompt.tokens.iter().enumerate() {
            let pe = &self.w(POS_EMB)[(p + i) * d..(p + i + 1) * d];
            let te = &self.w(TOK_EMB)[t * d..(t + 1) * d];
            x.extend(te.iter().zip(pe).map(|(a, b)| a + b));
        }
        for (r, row) in x.chunks_exact_mut(d).take(p).enumerate() {
            let pe = &self.w(POS_EMB)[r * d..(r + 1) * d];
            row.iter_mut().zip(pe).for_each(|(a, b)| *a += b);
        }
        let mut cache = KvCache::new(c.num_layers);
        let h = self.run_rows(x, None, &mut cache);
        let logits = self.head_logits(&h[(len - 1) * d..len * d]);
        Ok(Prefix { cache, logits })
    }

    /// Feeds one completion token at absolute position `pos`; returns the
    /// untempered logits for the next position.
    pub fn decode_step(&self, prefix: &Prefix, own: &mut KvCache, token: usize, pos: usize) -> Vec<f64> {
        let x = self.embed_token(token, pos);
        let h = self.run_rows(x, Some(&prefix.cache), own);
        self.head_logits(&h)
    }

    /// Draws `g` completions for one prompt. Temperature 0 decodes greedily.
    pub fn sample<R: Rng>(
        &self,
        prompt: &PromptInput,
        g: usize,
        temperature: f64,
        max_new_tokens: usize,
        rng: &mut R,
    ) -> Result<Vec<Completion>> {
        if g < 1 {
            return Err(Error::contract("group size must be at least 1"));
        }
        if max_new_tokens < 1 {
            return Err(Error::contract("max_new_tokens must be at least 1"));
        }
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(Error::contract(format!("temperature {temperature} is invalid")));
        }
        let lp = self.config.patch_count + prompt.tokens.len();
        if lp + max_new_tokens > self.config.max_seq_len {
            return Err(Error::contract(format!(
                "prompt of {lp} plus budget {max_new_tokens} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        let prefix = self.prefill(prompt)?;
        let mut out = Vec::with_capacity(g);
        for _ in 0..g {
            out.push(self.continue_from(&prefix, lp, temperature, max_new_tokens, rng));
        }
        Ok(out)
    }

    /// Samples one completion from an already-filled prefix of length `lp`.
    pub fn continue_from<R: Rng>(
        &self,
        prefix: &Prefix,
        lp: usize,
        temperature: f64,
        max_new_tokens: usize,
        rng: &mut R,
    ) -> Completion {
        let eos = self.vocab.specials().eos;
        let inv_t = 1.0 / effective_temperature(temperature);
        let mut own = KvCache::new(self.config.num_layers);
        let mut logits = prefix.logits.clone();
        let mut ids = Vec::new();
        let mut lps = Vec::new();
        for step in 0..max_new_tokens {
            let scaled: Vec<f64> = if inv_t == 1.0 {
                logits.clone()
            } else {
                logits.iter().map(|v| v * inv_t).collect()
            };
            let lsm = kernels::log_softmax_rows(&scaled, scaled.len());
            let tok = if temperature == 0.0 {
                argmax(&logits)
            } else {
                match WeightedIndex::new(lsm.iter().map(|v| v.exp())) {
                    Ok(dist) => dist.sample(rng),
                    Err(_) => argmax(&logits),
                }
            };
            ids.push(tok);
            lps.push(lsm[tok]);
            if tok == eos || step + 1 == max_new_tokens {
                break;
            }
            logits = self.decode_step(prefix, &mut own, tok, lp + step);
        }
        Completion {
            text: self.vocab.decode(&ids),
            length: ids.len(),
            token_ids: ids,
            token_logprobs: lps,
        }
    }

    /// Teacher-forced log-probabilities without a tape.
    pub fn score_tokens(&self, prefix: &Prefix, lp: usize, completion: &[usize], temperature: f64) -> Result<Vec<f64>> {
        if let Some(t) = completion.iter().find(|&&t| t >= self.vocab_size()) {
            return Err(Error::contract(format!("token id {t} outside vocabulary")));
        }
        if lp + completion.len() > self.config.max_seq_len {
            return Err(Error::contract("completion exceeds max_seq_len"));
        }
        let inv_t = 1.0 / effective_temperature(temperature);
        let mut own = KvCache::new(self.config.num_layers);
        let mut logits = prefix.logits.clone();
        let mut out = Vec::with_capacity(completion.len());
        for (k, &tok) in completion.iter().enumerate() {
            if inv_t != 1.0 {
                logits.iter_mut().for_each(|v| *v *= inv_t);
            }
            let lsm = kernels::log_softmax_rows(&logits, logits.len());
            out.push(lsm[tok]);
            if k + 1 < completion.len() {
                logits = self.decode_step(prefix, &mut own, tok, lp + k);
            }
        }
        Ok(out)
    }

    /// Tape-free teacher-forced log-probabilities of one completion.
    pub fn score_completion(&self, prompt: &PromptInput, completion: &[usize], temperature: f64) -> Result<Vec<f64>> {
        let prefix = self.prefill(prompt)?;
        self.score_tokens(&prefix, self.config.patch_count + prompt.tokens.len(), completion, temperature)
    }
}

impl Policy {
    /// Full next-token log-distributions before each completion token.
    pub fn position_logprobs(
        &self,
        prompt: &PromptInput,
        completion: &[usize],
        temperature: f64,
    ) -> Result<Vec<Vec<f64>>> {
        let prefix = self.prefill(prompt)?;
        let lp = self.config.patch_count + prompt.tokens.len();
        if lp + completion.len() > self.config.max_seq_len {
            return Err(Error::contract("completion exceeds max_seq_len"));
        }
        let inv_t = 1.0 / effective_temperature(temperature);
        let mut own = KvCache::new(self.config.num_layers);
        let mut logits = prefix.logits.clone();
        let mut out = Vec::with_capacity(completion.len());
        for (k, &tok) in completion.iter().enumerate() {
            let scaled: Vec<f64> = logits.iter().map(|v| v * inv_t).collect();
            out.push(kernels::log_softmax_rows(&scaled, scaled.len()));
            if k + 1 < completion.len() {
                logits = self.decode_step(&prefix, &mut own, tok, lp + k);
            }
        }
        Ok(out)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
