//! Token vocabulary, prompt encoding and textual inversion of a style token.
//!
//! The vocabulary maps lowercase words to fixed random embedding vectors. The
//! placeholder [`PLACEHOLDER`] expands to `M` contiguous slot embeddings that
//! are the only learnable entries.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{noised_batch_at, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::image::ImageTensor;
use crate::manifest::write_atomic;
use crate::tensor::Tensor;

pub const PLACEHOLDER: &str = "T_*";
pub const STYLE_SLOT: &str = "{style}";

/// Words known to every vocabulary built by [`Vocabulary::standard`].
pub const BASE_WORDS: &[&str] = &[
    "a", "an", "picture", "rendering", "portrait", "image", "drawing", "in", "the", "style", "of",
    "photo", "poster", "sketch", "negative", "pastel",
];

/// Sequence of token embeddings for one prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    tokens: Vec<Vec<f32>>,
}

impl PromptEmbedding {
    pub fn new(tokens: Vec<Vec<f32>>) -> Self {
        assert!(!tokens.is_empty(), "empty prompt embedding");
        PromptEmbedding { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.tokens[0].len()
    }

    pub fn tokens(&self) -> &[Vec<f32>] {
        &self.tokens
    }

    /// Mean over the sequence, the vector the denoiser is conditioned on.
    pub fn pooled(&self) -> Vec<f32> {
        let n = self.tokens.len() as f32;
        let mut out = vec![0.0; self.dim()];
        for t in &self.tokens {
            for (o, v) in out.iter_mut().zip(t) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n);
        out
    }
}

/// One element of a tokenized prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Piece {
    Word(usize),
    Slot(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    dim: usize,
    tokens: Vec<String>,
    embeddings: Vec<Vec<f32>>,
    learnable: Vec<bool>,
    index: HashMap<String, usize>,
}

fn slot_name(i: usize) -> String {
    format!("{PLACEHOLDER}[{i}]")
}

impl Vocabulary {
    /// Random `N(0, 1)` embeddings for `words`, followed by `m` placeholder slots
    /// initialized from the embedding of `"style"` plus `N(0, 0.1²)` noise.
    pub fn new(words: &[&str], dim: usize, m: usize, seed: u64) -> Result<Self> {
        if dim == 0 || m == 0 {
            return Err(Error::Config("vocabulary needs dim >= 1 and m >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vocab = Vocabulary {
            dim,
            tokens: Vec::new(),
            embeddings: Vec::new(),
            learnable: Vec::new(),
            index: HashMap::new(),
        };
        for w in words {
            let w = w.to_lowercase();
            if vocab.index.contains_key(&w) || w.contains(char::is_whitespace) || w.is_empty() {
                return Err(Error::Config(format!("invalid or duplicate vocabulary word {w:?}")));
            }
            let e: Vec<f32> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            vocab.push(w, e, false);
        }
        let base = vocab
            .embedding("style")
            .ok_or_else(|| Error::Config("vocabulary must contain \"style\"".into()))?
            .to_vec();
        for i in 0..m {
            let e = base
                .iter()
                .map(|&b| b + 0.1 * rng.sample::<f32, _>(StandardNormal))
                .collect();
            vocab.push(slot_name(i), e, true);
        }
        Ok(vocab)
    }

    pub fn standard(dim: usize, m: usize, seed: u64) -> Result<Self> {
        Self::new(BASE_WORDS, dim, m, seed)
    }

    fn push(&mut self, token: String, e: Vec<f32>, learnable: bool) {
        self.index.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
        self.embeddings.push(e);
        self.learnable.push(learnable);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn m(&self) -> usize {
        self.learnable.iter().filter(|&&l| l).count()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn learnable_mask(&self) -> &[bool] {
        &self.learnable
    }

    /// Positions of the placeholder slots.
    pub fn slot_range(&self) -> Range<usize> {
        let start = self.learnable.iter().position(|&l| l).unwrap_or(self.tokens.len());
        start..start + self.m()
    }

    pub fn embedding(&self, token: &str) -> Option<&[f32]> {
        self.index.get(token).map(|&i| self.embeddings[i].as_slice())
    }

    pub fn style_embeddings(&self) -> Vec<Vec<f32>> {
        self.embeddings[self.slot_range()].to_vec()
    }

    pub fn set_style_embeddings(&mut self, vectors: &[Vec<f32>]) -> Result<()> {
        let range = self.slot_range();
        if vectors.len() != range.len() || vectors.iter().any(|v| v.len() != self.dim) {
            return Err(Error::Argument(format!(
                "expected {} style vectors of dim {}",
                range.len(),
                self.dim
            )));
        }
        for (slot, v) in range.zip(vectors) {
            self.embeddings[slot] = v.clone();
        }
        Ok(())
    }

    /// SHA-256 over every frozen token and embedding.
    pub fn frozen_hash(&self) -> String {
        let mut h = Sha256::new();
        for i in 0..self.tokens.len() {
            if self.learnable[i] {
                continue;
            }
            h.update(self.tokens[i].as_bytes());
            h.update([0]);
            for v in &self.embeddings[i] {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn tokenize(&self, prompt: &str) -> Result<Vec<Piece>> {
        let mut out = Vec::new();
        for raw in prompt.split_whitespace() {
            let word = raw.trim_end_matches(['.', ',', '!', '?']);
            if word.eq_ignore_ascii_case(PLACEHOLDER) {
                out.extend(self.slot_range().map(Piece::Slot));
                continue;
            }
            let lower = word.to_lowercase();
            match self.index.get(&lower) {
                Some(&i) if !self.learnable[i] => out.push(Piece::Word(i)),
                _ => return Err(Error::UnknownToken(raw.to_string())),
            }
        }
        if out.is_empty() {
            return Err(Error::Argument("empty prompt".into()));
        }
        Ok(out)
    }

    /// Embedding sequence of `prompt`; the placeholder contributes its `M`
    /// vectors in slot order.
    pub fn encode_prompt(&self, prompt: &str) -> Result<PromptEmbedding> {
        let pieces = self.tokenize(prompt)?;
        Ok(PromptEmbedding::new(
            pieces
                .iter()
                .map(|p| match *p {
                    Piece::Word(i) | Piece::Slot(i) => self.embeddings[i].clone(),
                })
                .collect(),
        ))
    }

    pub fn learned(&self) -> LearnedEmbedding {
        let vectors = self.style_embeddings();
        LearnedEmbedding {
            token: PLACEHOLDER.to_string(),
            m: vectors.len(),
            dim: self.dim,
            vectors_bits: vectors.iter().map(|v| v.iter().map(|x| x.to_bits()).collect()).collect(),
            vectors,
        }
    }

    pub fn apply_learned(&mut self, learned: &LearnedEmbedding) -> Result<()> {
        if learned.token != PLACEHOLDER {
            return Err(Error::Format(format!("unexpected token {:?}", learned.token)));
        }
        self.set_style_embeddings(&learned.vectors()?)
    }
}

/// Free-function form of [`Vocabulary::encode_prompt`].
pub fn encode_prompt(vocab: &Vocabulary, prompt: &str) -> Result<PromptEmbedding> {
    vocab.encode_prompt(prompt)
}

/// Serialized style-token embeddings. `vectors` is for reading; `vectors_bits`
/// carries the exact values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnedEmbedding {
    pub token: String,
    pub m: usize,
    pub dim: usize,
    pub vectors: Vec<Vec<f32>>,
    pub vectors_bits: Vec<Vec<u32>>,
}

impl LearnedEmbedding {
    pub fn vectors(&self) -> Result<Vec<Vec<f32>>> {
        if self.vectors_bits.len() != self.m || self.vectors_bits.iter().any(|v| v.len() != self.dim) {
            return Err(Error::Format("learned embedding shape disagrees with its header".into()));
        }
        Ok(self
            .vectors_bits
            .iter()
            .map(|v| v.iter().map(|&b| f32::from_bits(b)).collect())
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        write_atomic(path, s.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let out: LearnedEmbedding = serde_json::from_str(&s)?;
        out.vectors()?;
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplateSet {
    templates: Vec<String>,
}

impl Default for PromptTemplateSet {
    fn default() -> Self {
        PromptTemplateSet {
            templates: [
                "A picture in the style of {style}",
                "A rendering in the style of {style}",
                "a portrait in the style of {style}",
                "an image in the style of {style}",
                "a drawing in the style of {style}",
            ]
            .map(String::from)
            .to_vec(),
        }
    }
}

impl PromptTemplateSet {
    pub fn new(templates: Vec<String>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::Config("template set is empty".into()));
        }
        for t in &templates {
            if t.matches(STYLE_SLOT).count() != 1 {
                return Err(Error::Config(format!("template {t:?} needs exactly one {STYLE_SLOT}")));
            }
        }
        Ok(PromptTemplateSet { templates })
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn fill(template: &str, word: &str) -> String {
        template.replace(STYLE_SLOT, word)
    }

    /// Uniformly chosen template with the placeholder substituted.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> String {
        let t = &self.templates[rng.random_range(0..self.templates.len())];
        Self::fill(t, PLACEHOLDER)
    }
}

pub fn sample_template_prompt(templates: &PromptTemplateSet, rng_seed: u64) -> Result<String> {
    if templates.templates.is_empty() {
        return Err(Error::Config("template set is empty".into()));
    }
    Ok(templates.sample(&mut ChaCha8Rng::seed_from_u64(rng_seed)))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InversionOptions {
    pub iters: usize,
    pub lr: f32,
    pub seed: u64,
}

pub struct InversionOutcome {
    pub vocab: Vocabulary,
    pub losses: Vec<f32>,
}

/// Shuffled passes over `0..n`: every index once per pass, in a fresh order each pass.
struct Passes {
    order: Vec<usize>,
    pos: usize,
}

impl Passes {
    fn new(n: usize) -> Self {
        Passes {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Optimizes the placeholder slots of `vocab` by plain SGD (batch size 1) on
/// the ε-prediction loss of a frozen denoiser over the style images.
/// Images and timesteps are drawn in shuffled passes, so each stays uniform
/// while every stretch of the loss curve sees all noise levels evenly.
///
/// The denoiser sees the mean of the prompt's token embeddings, so each slot
/// receives the pooled gradient divided by the prompt length.
pub fn invert_style<D: Denoiser>(
    model: &D,
    vocab: &Vocabulary,
    style_set: &[ImageTensor],
    templates: &PromptTemplateSet,
    sched: &NoiseSchedule,
    opts: &InversionOptions,
) -> Result<InversionOutcome> {
    if !model.params().is_frozen() {
        return Err(Error::Contract("textual inversion requires a frozen denoiser".into()));
    }
    if style_set.is_empty() {
        return Err(Error::Argument("style set is empty".into()));
    }
    if vocab.dim() != model.cond_dim() {
        return Err(Error::Argument(format!(
            "vocabulary dim {} differs from denoiser conditioning dim {}",
            vocab.dim(),
            model.cond_dim()
        )));
    }
    let mut vocab = vocab.clone();
    let slots = vocab.slot_range();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut losses = Vec::with_capacity(opts.iters);
    let mut images = Passes::new(style_set.len());
    let mut steps = Passes::new(sched.n_steps());
    for it in 0..opts.iters {
        let img = &style_set[images.next(&mut rng)];
        let t = steps.next(&mut rng) + 1;
        let prompt = templates.sample(&mut rng);
        let pieces = vocab.tokenize(&prompt)?;
        let batch = noised_batch_at(&[img], &[t], sched, &mut rng);

        let emb = vocab.encode_prompt(&prompt)?;
        let mut g = Graph::new();
        let x = g.constant(batch.x_t);
        let cond = g.input(Tensor::from_vec(&[1, vocab.dim()], emb.pooled()));
        let pred = model.predict_eps(&mut g, x, &batch.t, cond);
        let target = g.constant(batch.eps);
        let loss = g.mse(pred, target);
        let lv = g.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::Numeric(format!("inversion loss diverged at iteration {it}")));
        }
        losses.push(lv);
        let grads = g.backward(loss);
        let gc = grads.wrt(cond).expect("conditioning gradient").data().to_vec();
        let share = opts.lr / pieces.len() as f32;
        for p in &pieces {
            if let Piece::Slot(i) = *p {
                debug_assert!(slots.contains(&i));
                for (e, gv) in vocab.embeddings[i].iter_mut().zip(&gc) {
                    *e -= share * gv;
                }
            }
        }
        if it % 100 == 0 {
            log::debug!("inversion iter {it}: loss {lv:.4}");
        }
    }
    Ok(InversionOutcome { vocab, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{
        make_schedule, train_denoiser, CaptionedImage, DenoiserConfig, TrainDenoiserOptions, UNetDenoiser,
    };

    #[test]
    fn passes_visit_every_index_once_per_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = Passes::new(7);
        for _ in 0..4 {
            let mut seen: Vec<usize> = (0..7).map(|_| p.next(&mut rng)).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..7).collect::<Vec<_>>());
        }
    }

    #[test]
    fn placeholder_expands_to_m_vectors() {
        let v = Vocabulary::standard(8, 8, 1).unwrap();
        assert_eq!(v.encode_prompt("T_*").unwrap().len(), 8);
        let v2 = Vocabulary::standard(8, 2, 1).unwrap();
        let e = v2.encode_prompt("a portrait of the T_*").unwrap();
        assert_eq!(e.len(), 6);
        assert_eq!(e, v2.encode_prompt("a portrait of the T_*").unwrap());
        assert_eq!(&e.tokens()[4], &v2.style_embeddings()[0]);
        assert_eq!(&e.tokens()[5], &v2.style_embeddings()[1]);
    }

    #[test]
    fn unknown_tokens_and_slot_names_are_rejected() {
        let v = Vocabulary::standard(4, 2, 1).unwrap();
        assert!(matches!(v.encode_prompt("a banana"), Err(Error::UnknownToken(t)) if t == "banana"));
        assert!(matches!(v.encode_prompt("T_*[0]"), Err(Error::UnknownToken(_))));
        assert!(v.encode_prompt("A Portrait.").is_ok());
    }

    #[test]
    fn mask_has_m_contiguous_learnable_slots() {
        let v = Vocabulary::standard(4, 3, 9).unwrap();
        let mask = v.learnable_mask();
        assert_eq!(mask.iter().filter(|&&b| b).count(), 3);
        let r = v.slot_range();
        assert!(mask[r.clone()].iter().all(|&b| b));
        assert_eq!(r.end, mask.len());
    }

    #[test]
    fn template_sampling() {
        let one = PromptTemplateSet::new(vec!["x {style}".into()]).unwrap();
        for s in 0..20 {
            assert_eq!(sample_template_prompt(&one, s).unwrap(), "x T_*");
        }
        let two = PromptTemplateSet::new(vec!["a {style}".into(), "b {style}".into()]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let first = (0..n).filter(|_| two.sample(&mut rng).starts_with('a')).count();
        let f = first as f64 / n as f64;
        assert!((0.45..=0.55).contains(&f), "{f}");
        for s in 0..50 {
            assert!(sample_template_prompt(&PromptTemplateSet::default(), s).unwrap().contains("T_*"));
        }
        assert!(matches!(PromptTemplateSet::new(vec![]), Err(Error::Config(_))));
        assert!(PromptTemplateSet::new(vec!["no slot".into()]).is_err());
    }

    #[test]
    fn every_default_template_encodes() {
        let v = Vocabulary::standard(4, 2, 0).unwrap();
        for t in PromptTemplateSet::default().templates() {
            v.encode_prompt(&PromptTemplateSet::fill(t, PLACEHOLDER)).unwrap();
            v.encode_prompt(&PromptTemplateSet::fill(t, "poster")).unwrap();
        }
    }

    #[test]
    fn learned_embedding_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut v = Vocabulary::standard(5, 3, 2).unwrap();
        v.set_style_embeddings(&vec![vec![0.1, -1e-30, 3.3e7, f32::MIN_POSITIVE, 1.0 / 3.0]; 3]).unwrap();
        let p = dir.path().join("tok.json");
        v.learned().save(&p).unwrap();
        let mut w = Vocabulary::standard(5, 3, 2).unwrap();
        w.apply_learned(&LearnedEmbedding::load(&p).unwrap()).unwrap();
        assert_eq!(v, w);
    }

    /// A few training steps so that the zero-initialized modulation layers
    /// pass gradient back to the conditioning vector.
    fn frozen_tiny() -> UNetDenoiser {
        let mut m = UNetDenoiser::new(
            DenoiserConfig {
                resolution: 32,
                base_channels: 4,
                cond_dim: 4,
                time_dim: 8,
                emb_dim: 8,
            },
            1,
        );
        let v = Vocabulary::standard(4, 2, 7).unwrap();
        let data: Vec<CaptionedImage> = (0..2)
            .map(|i| CaptionedImage {
                image: crate::datagen::gen_source_image(i, 32).unwrap(),
                cond: v.encode_prompt(["a photo", "a poster"][i as usize]).unwrap(),
            })
            .collect();
        let s = make_schedule(10, 0.01, 0.2).unwrap();
        let opts = TrainDenoiserOptions { steps: 3, batch: 2, lr: 1e-2, seed: 0, ema_decay: 0.0 };
        train_denoiser(&mut m, &data, &s, &opts).unwrap();
        m.freeze();
        m
    }

    #[test]
    fn inversion_contracts() {
        let s = make_schedule(10, 0.01, 0.2).unwrap();
        let v = Vocabulary::standard(4, 2, 7).unwrap();
        let imgs = vec![crate::datagen::gen_source_image(1, 32).unwrap()];
        let t = PromptTemplateSet::default();
        let m = frozen_tiny();
        let hash = m.param_hash();

        let opts = InversionOptions { iters: 0, lr: 1.0, seed: 0 };
        assert_eq!(invert_style(&m, &v, &imgs, &t, &s, &opts).unwrap().vocab, v);

        let opts = InversionOptions { iters: 5, lr: 5.0, seed: 0 };
        let a = invert_style(&m, &v, &imgs, &t, &s, &opts).unwrap();
        let b = invert_style(&m, &v, &imgs, &t, &s, &opts).unwrap();
        assert_eq!(a.vocab, b.vocab);
        assert_eq!(m.param_hash(), hash);
        assert_eq!(a.vocab.frozen_hash(), v.frozen_hash());
        assert_ne!(a.vocab.style_embeddings(), v.style_embeddings());

        let mut unfrozen = frozen_tiny();
        unfrozen.params_mut().set_frozen(false);
        assert!(matches!(
            invert_style(&unfrozen, &v, &imgs, &t, &s, &opts),
            Err(Error::Contract(_))
        ));
        assert!(matches!(invert_style(&m, &v, &[], &t, &s, &opts), Err(Error::Argument(_))));
    }
}
