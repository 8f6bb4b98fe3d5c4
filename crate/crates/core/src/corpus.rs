//! Corpus ingestion, train/validation splitting and fixed-length batching.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::mpsc;
use std::thread;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::PLACEHOLDER_KEY;
use crate::tokenizer::{TokenId, Tokenizer};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSample {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionSample {
    pub caption: String,
    pub image_key: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Sample {
    Text(TextSample),
    Caption(CaptionSample),
}

impl Sample {
    pub fn text(&self) -> &str {
        match self {
            Sample::Text(t) => &t.text,
            Sample::Caption(c) => &c.caption,
        }
    }

    /// Feature-store key; text-only samples map to the placeholder image.
    pub fn image_key(&self) -> &str {
        match self {
            Sample::Text(_) => PLACEHOLDER_KEY,
            Sample::Caption(c) => &c.image_key,
        }
    }
}

impl From<TextSample> for Sample {
    fn from(s: TextSample) -> Self {
        Sample::Text(s)
    }
}

impl From<CaptionSample> for Sample {
    fn from(s: CaptionSample) -> Self {
        Sample::Caption(s)
    }
}

fn read_lines(path: &Path) -> Result<impl Iterator<Item = (usize, Result<String>)> + '_> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .map(move |(i, l)| (i + 1, l.map_err(|e| Error::io(path, e)))))
}

fn is_jsonl(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("jsonl") | Some("json")
    )
}

/// Reads text samples: `.jsonl` files carry a `text` field, anything else is
/// one sample per line. Blank lines are skipped.
pub fn load_text_corpus<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<TextSample>> {
    let mut out = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let json = is_jsonl(path);
        for (line_no, line) in read_lines(path)? {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let sample = if json {
                serde_json::from_str::<TextSample>(&line).map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: e.to_string(),
                })?
            } else {
                TextSample { text: line }
            };
            if !sample.text.trim().is_empty() {
                out.push(sample);
            }
        }
    }
    Ok(out)
}

/// Reads a caption manifest (JSONL with `caption` and `image_key`).
pub fn load_captions<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<CaptionSample>> {
    let mut out = Vec::new();
    for path in paths {
        let path = path.as_ref();
        for (line_no, line) in read_lines(path)? {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let sample: CaptionSample = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: e.to_string(),
            })?;
            if sample.caption.trim().is_empty() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: "empty caption".into(),
                });
            }
            out.push(sample);
        }
    }
    Ok(out)
}

/// Size of the training part: floor(fraction * n), remainder to validation.
pub fn train_size(n: usize, train_fraction: f64) -> usize {
    (train_fraction * n as f64).floor() as usize
}

/// Deterministic shuffle-then-split.
pub fn split_train_val<T: Clone>(
    samples: &[T],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} sample(s)",
            samples.len()
        )));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = train_size(samples.len(), train_fraction);
    let train = order[..n_train].iter().map(|&i| samples[i].clone()).collect();
    let val = order[n_train..].iter().map(|&i| samples[i].clone()).collect();
    Ok((train, val))
}

/// Number of maximal non-whitespace runs.
pub fn count_words(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[batch, max_len]`, padded with PAD.
    pub token_ids: Vec<Vec<TokenId>>,
    /// True where the token at that position is a training target.
    pub loss_mask: Vec<Vec<bool>>,
    pub image_keys: Vec<String>,
    /// Whitespace words whose first token survived truncation.
    pub word_count: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Non-special tokens in the batch.
    pub fn subword_count(&self, tok: &Tokenizer) -> u64 {
        self.token_ids
            .iter()
            .map(|row| tok.count_subwords(row) as u64)
            .sum()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Batches {
    pub batches: Vec<Batch>,
    /// Samples dropped because their text encoded to nothing.
    pub skipped: usize,
}

/// Encodes one sample as `[BOS, IMG, tokens.., EOS, PAD..]`, truncated to
/// `max_len` with the prefix kept. Returns `None` if the text encodes to nothing.
pub fn encode_row(
    sample: &Sample,
    tok: &Tokenizer,
    max_len: usize,
) -> Option<(Vec<TokenId>, Vec<bool>, usize)> {
    let sp = tok.specials();
    let body = tok.encode(sample.text());
    if body.is_empty() {
        return None;
    }
    let mut ids = Vec::with_capacity(body.len() + 3);
    ids.push(sp.bos);
    ids.push(sp.img);
    ids.extend_from_slice(&body);
    ids.push(sp.eos);
    ids.truncate(max_len);
    let words = ids.iter().filter(|&&id| tok.starts_word(id)).count();
    let mut mask: Vec<bool> = ids
        .iter()
        .map(|&id| id != sp.pad && id != sp.bos && id != sp.img)
        .collect();
    ids.resize(max_len, sp.pad);
    mask.resize(max_len, false);
    Some((ids, mask, words))
}

/// Builds one epoch of batches; sample order is shuffled under `seed`.
pub fn make_batches(
    samples: &[Sample],
    tok: &Tokenizer,
    batch_size: usize,
    max_len: usize,
    seed: u64,
) -> Result<Batches> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    if max_len < 2 {
        return Err(Error::InvalidArgument("max_len must be at least 2".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut out = Batches::default();
    let mut current = Batch {
        token_ids: Vec::new(),
        loss_mask: Vec::new(),
        image_keys: Vec::new(),
        word_count: 0,
    };
    for i in order {
        let sample = &samples[i];
        let Some((ids, mask, words)) = encode_row(sample, tok, max_len) else {
            out.skipped += 1;
            continue;
        };
        current.token_ids.push(ids);
        current.loss_mask.push(mask);
        current.image_keys.push(sample.image_key().to_string());
        current.word_count += words;
        if current.len() == batch_size {
            out.batches.push(std::mem::replace(
                &mut current,
                Batch {
                    token_ids: Vec::new(),
                    loss_mask: Vec::new(),
                    image_keys: Vec::new(),
                    word_count: 0,
                },
            ));
        }
    }
    if !current.is_empty() {
        out.batches.push(current);
    }
    if out.skipped > 0 {
        log::warn!("skipped {} sample(s) with empty encodings", out.skipped);
    }
    Ok(out)
}

/// Seed used for epoch `epoch` when the base seed is `seed`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_add(epoch as u64)
}

/// Multi-epoch batch stream. Each epoch is reshuffled with [`epoch_seed`].
pub struct BatchStream<'a> {
    samples: &'a [Sample],
    tok: &'a Tokenizer,
    batch_size: usize,
    max_len: usize,
    seed: u64,
    epochs: usize,
    epoch: usize,
    current: std::vec::IntoIter<Batch>,
}

impl<'a> BatchStream<'a> {
    pub fn new(
        samples: &'a [Sample],
        tok: &'a Tokenizer,
        batch_size: usize,
        max_len: usize,
        seed: u64,
        epochs: usize,
    ) -> Result<Self> {
        // Validates arguments up front.
        make_batches(&[], tok, batch_size, max_len, seed)?;
        Ok(Self {
            samples,
            tok,
            batch_size,
            max_len,
            seed,
            epochs,
            epoch: 0,
            current: Vec::new().into_iter(),
        })
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        loop {
            if let Some(b) = self.current.next() {
                return Some(b);
            }
            if self.epoch >= self.epochs {
                return None;
            }
            let seed = epoch_seed(self.seed, self.epoch);
            self.epoch += 1;
            let batches = make_batches(self.samples, self.tok, self.batch_size, self.max_len, seed)
                .expect("arguments validated in BatchStream::new");
            self.current = batches.batches.into_iter();
        }
    }
}

/// Runs `source` on a background thread, keeping up to `depth` items queued.
/// Item order is unchanged, so any depth yields the same sequence.
pub fn prefetch<I>(source: I, depth: usize) -> impl Iterator<Item = I::Item>
where
    I: Iterator + Send + 'static,
    I::Item: Send + 'static,
{
    let (tx, rx) = mpsc::sync_channel(depth);
    thread::spawn(move || {
        for item in source {
            if tx.send(item).is_err() {
                break;
            }
        }
    });
    rx.into_iter()
}
