use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rewards::{ANSWER_CLOSE, ANSWER_OPEN, REASONING_CLOSE, REASONING_OPEN};
use crate::taskgen::prompt::{QA_SUFFIX, QA_SUFFIX_PLAIN, VG_SUFFIX, VG_SUFFIX_PLAIN};
use crate::taskgen::{Question, TaskKind, COLORS, COUNT_WORDS, SCENE_CLASSES, SHAPES};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
/// Stands in for the system prompt in model inputs.
pub const SYSTEM: &str = "<system>";
pub const BOX_OPEN: &str = "[[";
pub const BOX_CLOSE: &str = "]]";

/// Number of coordinate bins; bin `k` is the value `10 * k`.
pub const COORD_BINS: usize = 101;
pub const COORD_STEP: u32 = 10;

/// Short words the policy may use inside its reasoning block.
pub const FILLER: [&str; 10] = [
    "look", "see", "count", "compare", "check", "think", "wait", "so", "many", "few",
];

/// Special token ids. A bare vocabulary marks every absent one with
/// [`Specials::ABSENT`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Specials {
    pub pad: usize,
    pub bos: usize,
    pub eos: usize,
    pub system: usize,
    pub reasoning_open: usize,
    pub reasoning_close: usize,
    pub answer_open: usize,
    pub answer_close: usize,
    pub box_open: usize,
    pub box_close: usize,
}

impl Specials {
    pub const ABSENT: usize = usize::MAX;

    const NONE: Specials = Specials {
        pad: Self::ABSENT,
        bos: Self::ABSENT,
        eos: Self::ABSENT,
        system: Self::ABSENT,
        reasoning_open: Self::ABSENT,
        reasoning_close: Self::ABSENT,
        answer_open: Self::ABSENT,
        answer_close: Self::ABSENT,
        box_open: Self::ABSENT,
        box_close: Self::ABSENT,
    };
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    specials: Specials,
    coord_base: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from an ordered token list. The list must contain
    /// the special tokens and the 101 coordinate tokens `"0"`, `"10"`, … `"1000"`
    /// as a contiguous run.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::config(format!("bad token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::config(format!("duplicate token {t:?}")));
            }
        }
        let get = |t: &str| {
            index
                .get(t)
                .copied()
                .ok_or_else(|| Error::config(format!("vocabulary lacks {t:?}")))
        };
        let specials = Specials {
            pad: get(PAD)?,
            bos: get(BOS)?,
            eos: get(EOS)?,
            system: get(SYSTEM)?,
            reasoning_open: get(REASONING_OPEN)?,
            reasoning_close: get(REASONING_CLOSE)?,
            answer_open: get(ANSWER_OPEN)?,
            answer_close: get(ANSWER_CLOSE)?,
            box_open: get(BOX_OPEN)?,
            box_close: get(BOX_CLOSE)?,
        };
        let coord_base = get("0")?;
        for k in 0..COORD_BINS {
            if index.get(&(k as u32 * COORD_STEP).to_string()) != Some(&(coord_base + k)) {
                return Err(Error::config("coordinate tokens must be contiguous"));
            }
        }
        Ok(Vocabulary {
            tokens,
            index,
            specials,
            coord_base,
        })
    }

    /// A vocabulary of arbitrary distinct tokens with no special ids and no
    /// coordinate run. Useful for degenerate models.
    pub fn bare(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::config(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary {
            tokens,
            index,
            specials: Specials::NONE,
            coord_base: Specials::ABSENT,
        })
    }

    /// The vocabulary covering every prompt, answer and reasoning token the
    /// task family can produce.
    pub fn standard() -> Self {
        let mut tokens: Vec<String> = Vec::new();
        let mut push = |t: &str| {
            if !tokens.iter().any(|x| x == t) {
                tokens.push(t.to_owned());
            }
        };
        for t in [
            PAD,
            BOS,
            EOS,
            SYSTEM,
            REASONING_OPEN,
            REASONING_CLOSE,
            ANSWER_OPEN,
            ANSWER_CLOSE,
            BOX_OPEN,
            BOX_CLOSE,
        ] {
            push(t);
        }
        for k in 0..COORD_BINS {
            push(&(k as u32 * COORD_STEP).to_string());
        }
        for t in SCENE_CLASSES
            .iter()
            .chain(&["yes", "no", "rural", "urban"])
            .chain(&COUNT_WORDS)
            .chain(&FILLER)
            .chain(&SHAPES)
            .chain(&COLORS)
        {
            push(t);
        }
        let mut cores = vec![Question::Classify.core_text(), Question::RuralUrban.core_text()];
        for s in 0..SHAPES.len() {
            cores.push(Question::Presence { shape: s }.core_text());
            cores.push(Question::Count { shape: s }.core_text());
            cores.push(
                Question::Compare {
                    more: s,
                    than: (s + 1) % SHAPES.len(),
                }
                .core_text(),
            );
            for c in 0..COLORS.len() {
                cores.push(Question::Ground { shape: s, color: c }.core_text());
            }
        }
        for text in cores
            .iter()
            .map(String::as_str)
            .chain([QA_SUFFIX, VG_SUFFIX, QA_SUFFIX_PLAIN, VG_SUFFIX_PLAIN])
        {
            for w in text.split_whitespace() {
                push(w);
            }
        }
        Vocabulary::from_tokens(tokens).expect("standard vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn specials(&self) -> Specials {
        self.specials
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Whitespace-split lookup; unknown words are an error.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::contract(format!("token {w:?} not in vocabulary")))
            })
            .collect()
    }

    /// Joins tokens with single spaces, dropping padding, BOS and EOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        let s = self.specials;
        let mut out = String::new();
        for &id in ids {
            if id == s.pad || id == s.bos || id == s.eos {
                continue;
            }
            let Some(t) = self.token(id) else { continue };
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(t);
        }
        out
    }

    /// Model input for a user prompt: BOS, the system marker, then the words.
    pub fn prompt_tokens(&self, prompt_text: &str) -> Result<Vec<usize>> {
        let mut ids = vec![self.specials.bos, self.specials.system];
        ids.extend(self.encode(prompt_text)?);
        Ok(ids)
    }

    pub fn coord_token(&self, bin: usize) -> usize {
        self.coord_base.saturating_add(bin.min(COORD_BINS - 1))
    }

    /// Nearest bin for a value on the 0–1000 scale.
    pub fn coord_bin(value: u32) -> usize {
        ((value.min(1000) + COORD_STEP / 2) / COORD_STEP) as usize
    }

    pub fn coord_tokens(&self) -> std::ops::Range<usize> {
        if self.coord_base == Specials::ABSENT {
            return 0..0;
        }
        self.coord_base..self.coord_base + COORD_BINS
    }

    /// Token ids that can be a complete answer for closed-ended tasks.
    pub fn answer_tokens(&self, kind: TaskKind) -> Vec<usize> {
        let words: Vec<&str> = match kind {
            TaskKind::Cls => SCENE_CLASSES.to_vec(),
            TaskKind::Vqa => ["yes", "no", "rural", "urban"]
                .into_iter()
                .chain(COUNT_WORDS)
                .collect(),
            TaskKind::Vg => return self.coord_tokens().collect(),
        };
        words.iter().filter_map(|w| self.id(w)).collect()
    }

    pub fn filler_tokens(&self) -> Vec<usize> {
        FILLER.iter().filter_map(|w| self.id(w)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn standard_vocabulary_covers_prompts() {
        let v = Vocabulary::standard();
        for s in crate::taskgen::render_pool(60, 4).unwrap() {
            v.prompt_tokens(&s.prompt_text).unwrap();
            v.prompt_tokens(&s.prompt(crate::taskgen::PromptStyle::Plain))
                .unwrap();
        }
        assert_eq!(v.token(v.coord_token(10)), Some("100"));
        assert_eq!(v.token(v.coord_token(100)), Some("1000"));
        assert_eq!(Vocabulary::coord_bin(996), 100);
        assert_eq!(Vocabulary::coord_bin(994), 99);
        assert!(v.encode("hovercraft").is_err());
    }

    #[test]
    fn duplicate_tokens_rejected() {
        let mut toks: Vec<String> = Vocabulary::standard().tokens().to_vec();
        toks.push("yes".into());
        assert!(Vocabulary::from_tokens(toks).is_err());
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(ids in proptest::collection::vec(4usize..200, 0..20)) {
            let v = Vocabulary::standard();
            let ids: Vec<usize> = ids.into_iter().filter(|&i| i < v.len()).collect();
            let text = v.decode(&ids);
            prop_assert_eq!(v.decode(&v.encode(&text).unwrap()), text.clone());
            prop_assert_eq!(v.encode(&text).unwrap(), ids);
        }
    }
}
