//! Byte-pair-encoding tokenizer trained from scratch.
//!
//! Text is first split into units at whitespace and punctuation; every
//! punctuation character becomes its own unit. A unit that follows whitespace
//! (or starts the text) carries a leading [`WORD_MARKER`] symbol, which is how
//! decoding restores spaces and how word starts are recognised after merging.
//! Merges never cross unit boundaries and never involve special tokens.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unicode_general_category::{get_general_category, GeneralCategory};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Symbol prepended to units that start a whitespace-delimited word.
pub const WORD_MARKER: char = '\u{2581}';

/// Surface strings of the reserved tokens. Ids are assigned in field order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecialNames {
    pub pad: String,
    pub bos: String,
    pub eos: String,
    pub unk: String,
    pub img: String,
}

impl Default for SpecialNames {
    fn default() -> Self {
        Self {
            pad: "<pad>".into(),
            bos: "<s>".into(),
            eos: "</s>".into(),
            unk: "<unk>".into(),
            img: "<image>".into(),
        }
    }
}

impl SpecialNames {
    fn in_order(&self) -> [&str; 5] {
        [&self.pad, &self.bos, &self.eos, &self.unk, &self.img]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: TokenId,
    pub bos: TokenId,
    pub eos: TokenId,
    pub unk: TokenId,
    pub img: TokenId,
}

impl SpecialIds {
    pub fn contains(&self, id: TokenId) -> bool {
        id == self.pad || id == self.bos || id == self.eos || id == self.unk || id == self.img
    }

    fn as_map(&self) -> BTreeMap<String, TokenId> {
        BTreeMap::from([
            ("pad".to_string(), self.pad),
            ("bos".to_string(), self.bos),
            ("eos".to_string(), self.eos),
            ("unk".to_string(), self.unk),
            ("img".to_string(), self.img),
        ])
    }
}

/// One pre-tokenization unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unit<'a> {
    pub text: &'a str,
    pub word_start: bool,
}

/// Unicode punctuation (general category P*) plus the ASCII symbol ranges.
pub fn is_punctuation(c: char) -> bool {
    if c.is_ascii() {
        return c.is_ascii_punctuation();
    }
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    )
}

/// Splits `text` at whitespace and punctuation. No normalization is applied.
pub fn pre_tokenize(text: &str) -> Vec<Unit<'_>> {
    let mut units = Vec::new();
    let mut start: Option<usize> = None;
    let mut after_space = true;
    let mut unit_word_start = true;

    for (i, c) in text.char_indices() {
        if c.is_whitespace() || is_punctuation(c) {
            if let Some(s) = start.take() {
                units.push(Unit {
                    text: &text[s..i],
                    word_start: unit_word_start,
                });
            }
            if c.is_whitespace() {
                after_space = true;
            } else {
                units.push(Unit {
                    text: &text[i..i + c.len_utf8()],
                    word_start: after_space,
                });
                after_space = false;
            }
        } else if start.is_none() {
            start = Some(i);
            unit_word_start = after_space;
            after_space = false;
        }
    }
    if let Some(s) = start {
        units.push(Unit {
            text: &text[s..],
            word_start: unit_word_start,
        });
    }
    units
}

fn unit_symbols<'a>(unit: &Unit<'a>) -> impl Iterator<Item = char> + 'a {
    unit.word_start
        .then_some(WORD_MARKER)
        .into_iter()
        .chain(unit.text.chars())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, TokenId>,
    merges: Vec<(String, String)>,
    ranks: HashMap<(TokenId, TokenId), (usize, TokenId)>,
    specials: SpecialIds,
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    vocab: Vec<String>,
    merges: Vec<String>,
    specials: BTreeMap<String, TokenId>,
}

#[derive(PartialEq, Eq)]
struct Candidate {
    count: u64,
    pair: (TokenId, TokenId),
    left: String,
    right: String,
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        // Max-heap: higher count first, then the lexicographically smaller pair.
        self.count
            .cmp(&other.count)
            .then_with(|| other.left.cmp(&self.left))
            .then_with(|| other.right.cmp(&self.right))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn pairs_of(word: &[TokenId]) -> impl Iterator<Item = (TokenId, TokenId)> + '_ {
    word.windows(2).map(|w| (w[0], w[1]))
}

fn merge_in_place(word: &mut Vec<TokenId>, pair: (TokenId, TokenId), new_id: TokenId) -> bool {
    let mut out = Vec::with_capacity(word.len());
    let mut changed = false;
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && word[i] == pair.0 && word[i + 1] == pair.1 {
            out.push(new_id);
            i += 2;
            changed = true;
        } else {
            out.push(word[i]);
            i += 1;
        }
    }
    *word = out;
    changed
}

/// Learns a BPE vocabulary of exactly `vocab_size` entries.
pub fn train_bpe<I, S>(corpus: I, vocab_size: usize, specials: &SpecialNames) -> Result<Tokenizer>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let names = specials.in_order();
    let distinct: HashSet<&str> = names.iter().copied().collect();
    if distinct.len() != names.len() {
        return Err(Error::Config("special token names must be distinct".into()));
    }

    let mut unit_counts: HashMap<String, u64> = HashMap::new();
    for line in corpus {
        for unit in pre_tokenize(line.as_ref()) {
            let key: String = unit_symbols(&unit).collect();
            *unit_counts.entry(key).or_default() += 1;
        }
    }
    if unit_counts.is_empty() {
        return Err(Error::Empty("tokenizer training corpus".into()));
    }

    let mut alphabet: Vec<char> = unit_counts.keys().flat_map(|u| u.chars()).collect();
    alphabet.sort_unstable();
    alphabet.dedup();

    let base = names.len() + alphabet.len();
    if vocab_size <= base {
        return Err(Error::Config(format!(
            "vocab_size {vocab_size} must exceed specials + alphabet ({base})"
        )));
    }

    let mut vocab: Vec<String> = names.iter().map(|s| s.to_string()).collect();
    vocab.extend(alphabet.iter().map(|c| c.to_string()));
    let mut index: HashMap<String, TokenId> = vocab
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i as TokenId))
        .collect();
    if index.len() != vocab.len() {
        return Err(Error::Config(
            "a special token name collides with a corpus character".into(),
        ));
    }

    let mut keys: Vec<(String, u64)> = unit_counts.into_iter().collect();
    keys.sort_unstable();
    let mut words: Vec<Vec<TokenId>> = Vec::with_capacity(keys.len());
    let mut counts: Vec<u64> = Vec::with_capacity(keys.len());
    for (key, count) in keys {
        words.push(key.chars().map(|c| index[&c.to_string()]).collect());
        counts.push(count);
    }

    let mut pair_counts: HashMap<(TokenId, TokenId), u64> = HashMap::new();
    let mut locations: HashMap<(TokenId, TokenId), HashSet<usize>> = HashMap::new();
    for (w, word) in words.iter().enumerate() {
        for p in pairs_of(word) {
            *pair_counts.entry(p).or_default() += counts[w];
            locations.entry(p).or_default().insert(w);
        }
    }

    let candidate = |vocab: &[String], pair: (TokenId, TokenId), count: u64| Candidate {
        count,
        pair,
        left: vocab[pair.0 as usize].clone(),
        right: vocab[pair.1 as usize].clone(),
    };
    let mut heap: BinaryHeap<Candidate> = pair_counts
        .iter()
        .map(|(&p, &c)| candidate(&vocab, p, c))
        .collect();

    let mut merges = Vec::new();
    while vocab.len() < vocab_size {
        let Some(top) = heap.pop() else {
            return Err(Error::VocabExhausted {
                requested: vocab_size,
                reachable: vocab.len(),
            });
        };
        let current = pair_counts.get(&top.pair).copied().unwrap_or(0);
        if current == 0 {
            continue;
        }
        if current != top.count {
            heap.push(candidate(&vocab, top.pair, current));
            continue;
        }

        let merged = format!("{}{}", top.left, top.right);
        let new_id = match index.get(&merged) {
            Some(&id) => id,
            None => {
                let id = vocab.len() as TokenId;
                vocab.push(merged.clone());
                index.insert(merged, id);
                id
            }
        };
        merges.push((top.left, top.right));

        let mut affected: Vec<usize> = locations
            .remove(&top.pair)
            .map(|s| s.into_iter().collect())
            .unwrap_or_default();
        affected.sort_unstable();
        let mut grown: HashSet<(TokenId, TokenId)> = HashSet::new();
        for w in affected {
            let before = words[w].clone();
            if !merge_in_place(&mut words[w], top.pair, new_id) {
                continue;
            }
            for p in pairs_of(&before) {
                if let Some(c) = pair_counts.get_mut(&p) {
                    *c -= counts[w];
                }
            }
            for p in pairs_of(&words[w]) {
                *pair_counts.entry(p).or_default() += counts[w];
                locations.entry(p).or_default().insert(w);
                grown.insert(p);
            }
        }
        pair_counts.remove(&top.pair);
        let mut grown: Vec<_> = grown.into_iter().collect();
        grown.sort_unstable();
        for p in grown {
            if let Some(&c) = pair_counts.get(&p) {
                if c > 0 && p != top.pair {
                    heap.push(candidate(&vocab, p, c));
                }
            }
        }
    }

    Tokenizer::from_parts(vocab, merges, specials_ids())
}

fn specials_ids() -> SpecialIds {
    SpecialIds {
        pad: 0,
        bos: 1,
        eos: 2,
        unk: 3,
        img: 4,
    }
}

impl Tokenizer {
    fn from_parts(
        vocab: Vec<String>,
        merges: Vec<(String, String)>,
        specials: SpecialIds,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, tok) in vocab.iter().enumerate() {
            if index.insert(tok.clone(), i as TokenId).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry `{tok}`")));
            }
        }
        let ids = [specials.pad, specials.bos, specials.eos, specials.unk, specials.img];
        let distinct: HashSet<_> = ids.iter().collect();
        if distinct.len() != ids.len() || ids.iter().any(|&id| id as usize >= vocab.len()) {
            return Err(Error::Format(
                "special ids must be distinct and inside the vocabulary".into(),
            ));
        }

        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, (l, r)) in merges.iter().enumerate() {
            let lookup = |s: &str| {
                index
                    .get(s)
                    .copied()
                    .ok_or_else(|| Error::Format(format!("merge {rank} references unknown `{s}`")))
            };
            let (li, ri) = (lookup(l)?, lookup(r)?);
            if specials.contains(li) || specials.contains(ri) {
                return Err(Error::Format(format!("merge {rank} involves a special token")));
            }
            let out = lookup(&format!("{l}{r}"))?;
            ranks.entry((li, ri)).or_insert((rank, out));
        }

        Ok(Self {
            vocab,
            index,
            merges,
            ranks,
            specials,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn token_id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Whether `id` begins a whitespace-delimited word.
    pub fn starts_word(&self, id: TokenId) -> bool {
        !self.specials.contains(id)
            && self
                .vocab
                .get(id as usize)
                .is_some_and(|t| t.starts_with(WORD_MARKER))
    }

    fn encode_unit(&self, unit: &Unit<'_>, out: &mut Vec<TokenId>) {
        let mut symbols: Vec<TokenId> = unit_symbols(unit)
            .map(|c| {
                let mut buf = [0u8; 4];
                self.index
                    .get(&*c.encode_utf8(&mut buf))
                    .copied()
                    .unwrap_or(self.specials.unk)
            })
            .collect();
        loop {
            let best = pairs_of(&symbols)
                .filter_map(|p| self.ranks.get(&p).map(|&(rank, id)| (rank, p, id)))
                .min_by_key(|&(rank, _, _)| rank);
            let Some((_, pair, id)) = best else { break };
            merge_in_place(&mut symbols, pair, id);
        }
        out.extend(symbols);
    }

    /// Encodes raw text. Never emits special tokens other than UNK.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut ids = Vec::new();
        for unit in pre_tokenize(text) {
            self.encode_unit(&unit, &mut ids);
        }
        ids
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut text = String::new();
        for &id in ids {
            let tok = self.vocab.get(id as usize).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "token id {id} out of range for vocabulary of {}",
                    self.vocab.len()
                ))
            })?;
            if !self.specials.contains(id) {
                text.push_str(tok);
            }
        }
        let text = text.replace(WORD_MARKER, " ");
        Ok(text.strip_prefix(' ').map(str::to_string).unwrap_or(text))
    }

    pub fn to_json(&self) -> String {
        let file = TokenizerFile {
            vocab: self.vocab.clone(),
            merges: self.merges.iter().map(|(l, r)| format!("{l} {r}")).collect(),
            specials: self.specials.as_map(),
        };
        serde_json::to_string(&file).expect("tokenizer serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: TokenizerFile =
            serde_json::from_str(json).map_err(|e| Error::Format(format!("tokenizer: {e}")))?;
        let special = |name: &str| {
            file.specials
                .get(name)
                .copied()
                .ok_or_else(|| Error::Format(format!("tokenizer: missing special `{name}`")))
        };
        let specials = SpecialIds {
            pad: special("pad")?,
            bos: special("bos")?,
            eos: special("eos")?,
            unk: special("unk")?,
            img: special("img")?,
        };
        let merges = file
            .merges
            .iter()
            .map(|m| {
                m.split_once(' ')
                    .map(|(l, r)| (l.to_string(), r.to_string()))
                    .ok_or_else(|| Error::Format(format!("tokenizer: bad merge `{m}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(file.vocab, merges, specials)
    }

    /// SHA-256 of the serialized form; stored in checkpoint metadata.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&json)
    }

    /// Number of non-special tokens in `ids`.
    pub fn count_subwords(&self, ids: &[TokenId]) -> usize {
        ids.iter().filter(|&&id| !self.specials.contains(id)).count()
    }
}

pub fn word_subword_ratio(words: u64, subwords: u64) -> Result<f64> {
    if words == 0 {
        return Err(Error::InvalidArgument("word count must be positive".into()));
    }
    Ok(subwords as f64 / words as f64)
}
