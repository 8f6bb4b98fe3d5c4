//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tinyvlm::eval::Scorer;
use tinyvlm::features::FeatureStore;
use tinyvlm::model::{init_model, log_softmax, ModelConfig, ParameterSet, Scalar};
use tinyvlm::tokenizer::{train_bpe, SpecialNames, TokenId, Tokenizer};
use tinyvlm::{Error, Result, PLACEHOLDER_KEY};

/// Two layers, d=8, two heads, V=17, d_ff=16, 4-dim image features.
pub fn tiny_config() -> ModelConfig {
    ModelConfig::new(2, 8, 2, 16, 17, 12, 4)
}

/// Model whose every tensor (gains and biases included) is drawn from
/// N(0, scale²), with norm gains shifted to around one.
pub fn random_params<T: Scalar>(cfg: &ModelConfig, seed: u64, scale: f64) -> ParameterSet<T> {
    let mut p: ParameterSet<T> = init_model(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in p.iter_mut() {
        let is_gain = name.ends_with("norm");
        for x in &mut t.data {
            let g: f64 = rng.sample(rand_distr::StandardNormal);
            *x = T::of(if is_gain { 1.0 + 0.3 * g } else { scale * g });
        }
    }
    p
}

pub fn random_feature(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// In-memory store holding a zero placeholder plus `entries`.
pub fn store(dim: usize, entries: &[(&str, Vec<f32>)]) -> FeatureStore {
    let mut map = IndexMap::new();
    map.insert(PLACEHOLDER_KEY.to_string(), vec![0.0; dim]);
    for (k, v) in entries {
        map.insert(k.to_string(), v.clone());
    }
    FeatureStore::new(dim, map).unwrap()
}

/// BPE tokenizer trained to the largest vocabulary the corpus supports, so
/// every word of the corpus is a single token.
pub fn word_tokenizer(corpus: &[String]) -> Tokenizer {
    let specials = SpecialNames::default();
    match train_bpe(corpus.iter(), 1_000_000, &specials) {
        Err(Error::VocabExhausted { reachable, .. }) => {
            train_bpe(corpus.iter(), reachable, &specials).unwrap()
        }
        other => panic!("expected the vocabulary to run out, got {other:?}"),
    }
}

/// Small natural-language corpus for tokenizer and batching tests.
pub const TOY_TEXT: &[&str] = &[
    "the cat sat on the mat.",
    "a dog ran to the park, then it slept.",
    "the bird sang a song in the tree!",
    "don't stop the music now",
    "cats and dogs play in the garden",
    "the sun is warm and the sky is blue",
];

pub fn toy_corpus() -> Vec<String> {
    TOY_TEXT.iter().map(|s| s.to_string()).collect()
}

/// Text-only subject/verb agreement grammar: singular subjects take `-s` verbs.
pub const NOUNS: &[(&str, &str)] = &[
    ("dog", "dogs"),
    ("cat", "cats"),
    ("bird", "birds"),
    ("fox", "foxes"),
];
pub const VERBS: &[(&str, &str)] = &[
    ("runs", "run"),
    ("sleeps", "sleep"),
    ("jumps", "jump"),
    ("sings", "sing"),
];

/// All grammatical sentences of the agreement grammar.
pub fn agreement_sentences() -> Vec<String> {
    let mut out = Vec::new();
    for &(sg, pl) in NOUNS {
        for &(v_sg, v_pl) in VERBS {
            out.push(format!("the {sg} {v_sg}"));
            out.push(format!("the {pl} {v_pl}"));
        }
    }
    out
}

/// (good, bad) pairs that differ only in verb agreement.
pub fn agreement_pairs() -> Vec<(String, String)> {
    let mut out = Vec::new();
    for &(sg, pl) in NOUNS {
        for &(v_sg, v_pl) in VERBS {
            out.push((format!("the {sg} {v_sg}"), format!("the {sg} {v_pl}")));
            out.push((format!("the {pl} {v_pl}"), format!("the {pl} {v_sg}")));
        }
    }
    out
}

/// Captions over a vocabulary disjoint from the agreement grammar.
pub fn captions() -> Vec<(String, String)> {
    let colors = ["red", "green", "blue", "yellow"];
    let things = ["ball", "box", "cup", "hat"];
    let mut out = Vec::new();
    for (i, c) in colors.iter().enumerate() {
        for (j, t) in things.iter().enumerate() {
            out.push((format!("a {c} {t}"), format!("img_{i}_{j}")));
        }
    }
    out
}

/// Feature for caption image `img_{i}_{j}`: one-hot color and object slots.
pub fn caption_feature(key: &str, dim: usize) -> Vec<f32> {
    let parts: Vec<usize> = key.split('_').skip(1).map(|s| s.parse().unwrap()).collect();
    let mut f = vec![0.0; dim];
    f[parts[0] % dim] = 1.0;
    f[(4 + parts[1]) % dim] = 1.0;
    f
}

/// Bigram language model: `logits[prev][next]`, plus `image_gain · f[next % dim]`
/// when an image feature is supplied.
#[derive(Debug, Clone)]
pub struct BigramScorer {
    pub vocab: usize,
    pub logits: Vec<f64>,
    pub image_gain: f64,
}

impl BigramScorer {
    pub fn random(vocab: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            vocab,
            logits: (0..vocab * vocab).map(|_| rng.random_range(-3.0..3.0)).collect(),
            image_gain: 2.0,
        }
    }

    pub fn uniform(vocab: usize) -> Self {
        Self {
            vocab,
            logits: vec![0.0; vocab * vocab],
            image_gain: 0.0,
        }
    }

    /// `log p(next | prev)` for every `next`.
    pub fn row(&self, prev: TokenId, feature: Option<&[f32]>) -> Vec<f64> {
        let base = &self.logits[prev as usize * self.vocab..(prev as usize + 1) * self.vocab];
        let row: Vec<f64> = (0..self.vocab)
            .map(|j| base[j] + feature.map_or(0.0, |f| self.image_gain * f[j % f.len()] as f64))
            .collect();
        log_softmax(&row)
    }
}

impl Scorer for BigramScorer {
    fn token_logprobs(&self, ids: &[TokenId], feature: Option<&[f32]>) -> Result<Vec<f64>> {
        Ok(ids
            .windows(2)
            .map(|w| self.row(w[0], feature)[w[1] as usize])
            .collect())
    }
}

/// Scorer that assigns a fixed total to each token sequence: the value is
/// placed on the last position, all other positions score zero.
pub struct TableScorer<F: Fn(&[TokenId]) -> f64 + Sync>(pub F);

impl<F: Fn(&[TokenId]) -> f64 + Sync> Scorer for TableScorer<F> {
    fn token_logprobs(&self, ids: &[TokenId], _feature: Option<&[f32]>) -> Result<Vec<f64>> {
        let mut lp = vec![0.0; ids.len().saturating_sub(1)];
        if let Some(last) = lp.last_mut() {
            *last = (self.0)(ids);
        }
        Ok(lp)
    }
}

/// Sum of `terms` left to right, starting from zero.
pub fn ordered_sum(terms: impl IntoIterator<Item = f64>) -> f64 {
    terms.into_iter().fold(0.0, |a, b| a + b)
}
