//! Phrase vocabulary, prompts, negative-prompt sampling and the prompt
//! encoder.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{multi_head_attention, Linear};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub const VOCAB_SIZE: usize = 24;
pub const MAX_PROMPT_LEN: usize = 8;
pub const EMBED_DIM: usize = 32;
pub const ENCODER_HEADS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    Shape,
    Size,
    Intensity,
    Texture,
    Corruption,
    Background,
    Mark,
}

#[derive(Clone, Copy, Debug)]
pub struct Phrase {
    pub name: &'static str,
    pub group: Group,
}

const fn p(name: &'static str, group: Group) -> Phrase {
    Phrase { name, group }
}

/// The fixed phrase table. Token ids are indices into this array.
pub static PHRASES: [Phrase; VOCAB_SIZE] = [
    p("circle", Group::Shape),
    p("square", Group::Shape),
    p("cross", Group::Shape),
    p("triangle", Group::Shape),
    p("small", Group::Size),
    p("large", Group::Size),
    p("dim", Group::Intensity),
    p("bright", Group::Intensity),
    p("solid", Group::Texture),
    p("striped", Group::Texture),
    p("noisy", Group::Texture),
    p("blur", Group::Corruption),
    p("speckle", Group::Corruption),
    p("hole", Group::Corruption),
    p("dark", Group::Background),
    p("grey", Group::Background),
    p("topbar", Group::Mark),
    p("bottombar", Group::Mark),
    p("leftbar", Group::Mark),
    p("rightbar", Group::Mark),
    p("topleft", Group::Mark),
    p("topright", Group::Mark),
    p("bottomleft", Group::Mark),
    p("bottomright", Group::Mark),
];

/// Lookup helpers over [`PHRASES`].
pub struct Vocabulary;

impl Vocabulary {
    pub fn index(name: &str) -> Option<usize> {
        PHRASES.iter().position(|p| p.name == name)
    }

    pub fn name(id: usize) -> &'static str {
        PHRASES[id].name
    }

    pub fn group(id: usize) -> Group {
        PHRASES[id].group
    }

    pub fn in_group(group: Group) -> impl Iterator<Item = usize> {
        (0..VOCAB_SIZE).filter(move |&i| PHRASES[i].group == group)
    }

    /// Phrases that describe optional content and may be used as negatives:
    /// the non-solid textures, corruptions and marks.
    pub fn suppressible() -> Vec<usize> {
        (0..VOCAB_SIZE)
            .filter(|&i| match PHRASES[i].group {
                Group::Corruption | Group::Mark => true,
                Group::Texture => PHRASES[i].name != "solid",
                _ => false,
            })
            .collect()
    }
}

/// A sequence of at most [`MAX_PROMPT_LEN`] phrase ids. Empty means
/// unconditional.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Prompt {
    tokens: Vec<u8>,
}

impl Prompt {
    pub fn new(tokens: Vec<u8>) -> Result<Self> {
        if tokens.len() > MAX_PROMPT_LEN {
            return Err(Error::Prompt(format!(
                "{} tokens, at most {MAX_PROMPT_LEN} allowed",
                tokens.len()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
            return Err(Error::Prompt(format!("token {bad} is outside the vocabulary")));
        }
        Ok(Self { tokens })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Parses space-separated phrase names.
    pub fn parse(text: &str) -> Result<Self> {
        let tokens = text
            .split_whitespace()
            .map(|w| {
                Vocabulary::index(w)
                    .map(|i| i as u8)
                    .ok_or_else(|| Error::Prompt(format!("unknown phrase `{w}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(tokens)
    }

    pub fn tokens(&self) -> &[u8] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.tokens.iter().any(|&t| t as usize == id)
    }

    pub fn with(&self, id: usize) -> Result<Self> {
        let mut tokens = self.tokens.clone();
        tokens.push(id as u8);
        Self::new(tokens)
    }
}

impl fmt::Display for Prompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.tokens.iter().map(|&t| Vocabulary::name(t as usize)).collect();
        f.write_str(&names.join(" "))
    }
}

/// Draws `k` uniform in `0..=8`, then `k` distinct suppressible phrases in
/// random order.
pub fn sample_negative_prompt(rng: &mut Rng) -> Prompt {
    let k = rng.gen_range(0..=MAX_PROMPT_LEN);
    let mut pool = Vocabulary::suppressible();
    pool.shuffle(rng);
    Prompt {
        tokens: pool[..k].iter().map(|&i| i as u8).collect(),
    }
}

/// Embedded prompts on a tape: `[batch, MAX_PROMPT_LEN, EMBED_DIM]` plus a
/// keep-flag per position.
#[derive(Clone, Debug)]
pub struct EncodedPrompts {
    pub embedding: Var,
    pub keep: Vec<bool>,
    pub batch: usize,
}

/// Token table + learned positions + one masked self-attention mixing layer.
#[derive(Clone, Debug)]
pub struct PromptEncoder {
    tokens: ParamId,
    positions: ParamId,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
}

impl PromptEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut Rng) -> Self {
        let init = |rng: &mut Rng, shape: &[usize]| -> Tensor<f32> {
            let mut t = crate::rng::normal_tensor(rng, shape);
            t.data_mut().iter_mut().for_each(|v| *v *= 0.5);
            t
        };
        let tokens = store.add("encoder.tokens", init(rng, &[VOCAB_SIZE, EMBED_DIM]), true);
        let positions = store.add("encoder.positions", init(rng, &[MAX_PROMPT_LEN, EMBED_DIM]), true);
        Self {
            tokens,
            positions,
            wq: Linear::new(store, "encoder.q", EMBED_DIM, EMBED_DIM, false, rng),
            wk: Linear::new(store, "encoder.k", EMBED_DIM, EMBED_DIM, false, rng),
            wv: Linear::new(store, "encoder.v", EMBED_DIM, EMBED_DIM, false, rng),
            wo: Linear::new(store, "encoder.o", EMBED_DIM, EMBED_DIM, false, rng),
        }
    }

    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore,
        prompts: &[Prompt],
    ) -> Result<EncodedPrompts> {
        let b = prompts.len();
        let mut ids = Vec::with_capacity(b * MAX_PROMPT_LEN);
        let mut keep = Vec::with_capacity(b * MAX_PROMPT_LEN);
        for p in prompts {
            for i in 0..MAX_PROMPT_LEN {
                ids.push(p.tokens.get(i).map_or(0, |&t| t as usize));
                keep.push(i < p.len());
            }
        }
        let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..MAX_PROMPT_LEN).collect();
        let table = tape.param(store, self.tokens)?;
        let pos = tape.param(store, self.positions)?;
        let x = tape.gather_rows(table, &ids)?;
        let pe = tape.gather_rows(pos, &pos_ids)?;
        let x = tape.add(x, pe)?;
        let q = self.wq.forward(tape, store, x)?;
        let k = self.wk.forward(tape, store, x)?;
        let v = self.wv.forward(tape, store, x)?;
        let shape = [b, MAX_PROMPT_LEN, EMBED_DIM];
        let (q, k, v) = (tape.reshape(q, &shape)?, tape.reshape(k, &shape)?, tape.reshape(v, &shape)?);
        let a = multi_head_attention(tape, q, k, v, &keep, ENCODER_HEADS)?;
        let a = tape.reshape(a, &[b * MAX_PROMPT_LEN, EMBED_DIM])?;
        let a = self.wo.forward(tape, store, a)?;
        let x = tape.add(x, a)?;
        let x = tape.mask_rows(x, &keep)?;
        let embedding = tape.reshape(x, &shape)?;
        Ok(EncodedPrompts {
            embedding,
            keep,
            batch: b,
        })
    }
}
