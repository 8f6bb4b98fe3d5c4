//! Zero-shot evaluation: minimal pairs, multiple-choice continuations,
//! correlation with human ratings, and the unpaired Winoground text score.
//!
//! Every scored sequence is `[BOS, IMG, tokens..]` without EOS. Text tasks
//! condition on the placeholder image feature, as in training, unless
//! [`TextConditioning::NoImage`] drops the IMG token. Scores are summed token
//! log-probabilities with no length normalization. A comparison that ties
//! counts as incorrect.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureStore;
use crate::model::{token_logprobs, ParameterSet, Scalar};
use crate::tokenizer::{TokenId, Tokenizer};

/// Anything that assigns next-token log-probabilities to a sequence.
pub trait Scorer: Sync {
    /// `log p(ids[t] | ids[..t])` for `t = 1..ids.len()`.
    fn token_logprobs(&self, ids: &[TokenId], feature: Option<&[f32]>) -> Result<Vec<f64>>;
}

impl<T: Scalar> Scorer for ParameterSet<T> {
    fn token_logprobs(&self, ids: &[TokenId], feature: Option<&[f32]>) -> Result<Vec<f64>> {
        let feature: Option<Vec<T>> = feature.map(|f| f.iter().map(|&x| T::of(x as f64)).collect());
        token_logprobs(self, ids, feature.as_deref())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextConditioning {
    #[default]
    Placeholder,
    NoImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correlation {
    #[default]
    Spearman,
    Pearson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalOptions {
    pub text_conditioning: TextConditioning,
    pub correlation: Correlation,
}

pub struct EvalContext<'a> {
    pub tokenizer: &'a Tokenizer,
    /// Required for Winoground and for placeholder-conditioned text tasks.
    pub features: Option<&'a FeatureStore>,
    pub options: EvalOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskType {
    MinimalPairs,
    MultipleChoice,
    Correlation,
    Winoground,
}

impl TaskType {
    pub const ALL: [TaskType; 4] = [
        TaskType::MinimalPairs,
        TaskType::MultipleChoice,
        TaskType::Correlation,
        TaskType::Winoground,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::MinimalPairs => "minimal-pairs",
            TaskType::MultipleChoice => "multiple-choice",
            TaskType::Correlation => "correlation",
            TaskType::Winoground => "winoground",
        }
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task type `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinimalPairItem {
    pub sentence_good: String,
    pub sentence_bad: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChoiceItem {
    pub prefix: String,
    pub options: Vec<String>,
    pub answer_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatingItem {
    pub stimulus: String,
    pub human_rating: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WinogroundItem {
    pub caption_0: String,
    pub caption_1: String,
    pub image_key_0: String,
    pub image_key_1: String,
}

trait Validate {
    fn validate(&self) -> std::result::Result<(), String>;
}

impl Validate for MinimalPairItem {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.sentence_good.trim().is_empty() || self.sentence_bad.trim().is_empty() {
            return Err("empty sentence".into());
        }
        Ok(())
    }
}

impl Validate for ChoiceItem {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.options.len() < 2 {
            return Err("fewer than two options".into());
        }
        if self.answer_index >= self.options.len() {
            return Err(format!(
                "answer_index {} out of range for {} options",
                self.answer_index,
                self.options.len()
            ));
        }
        Ok(())
    }
}

impl Validate for RatingItem {
    fn validate(&self) -> std::result::Result<(), String> {
        if !self.human_rating.is_finite() {
            return Err("non-finite human_rating".into());
        }
        if self.stimulus.trim().is_empty() {
            return Err("empty stimulus".into());
        }
        Ok(())
    }
}

impl Validate for WinogroundItem {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.caption_0 == self.caption_1 {
            return Err("captions are identical".into());
        }
        Ok(())
    }
}

fn load_jsonl<T: DeserializeOwned + Validate>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let item: T = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        item.validate().map_err(parse)?;
        out.push(item);
    }
    Ok(out)
}

pub fn load_minimal_pairs(path: &Path) -> Result<Vec<MinimalPairItem>> {
    load_jsonl(path)
}

pub fn load_choices(path: &Path) -> Result<Vec<ChoiceItem>> {
    load_jsonl(path)
}

pub fn load_ratings(path: &Path) -> Result<Vec<RatingItem>> {
    load_jsonl(path)
}

pub fn load_winoground(path: &Path) -> Result<Vec<WinogroundItem>> {
    load_jsonl(path)
}

/// One scored comparison. Winoground items produce two records (trials 0 and 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub index: usize,
    pub trial: usize,
    pub scores: Vec<f64>,
    pub predicted: Option<usize>,
    pub expected: Option<usize>,
    pub correct: Option<bool>,
    pub rating: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemError {
    pub index: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub length_normalization: String,
    pub text_conditioning: TextConditioning,
    pub correlation: Correlation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metric: String,
    pub value: f64,
    /// Items that were scored; errored items are listed in `errors` instead.
    pub n_items: usize,
    pub n_trials: usize,
    pub meta: ReportMeta,
    pub items: Vec<ItemRecord>,
    pub errors: Vec<ItemError>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Per-item decisions, one row per trial.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "index,trial,scores,predicted,expected,correct,rating")?;
        let opt = |x: Option<String>| x.unwrap_or_default();
        for r in &self.items {
            let scores: Vec<String> = r.scores.iter().map(f64::to_string).collect();
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.index,
                r.trial,
                scores.join(";"),
                opt(r.predicted.map(|x| x.to_string())),
                opt(r.expected.map(|x| x.to_string())),
                opt(r.correct.map(|x| x.to_string())),
                opt(r.rating.map(|x| x.to_string())),
            )?;
        }
        Ok(())
    }

    pub fn save(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        std::fs::write(json_path, self.to_json()).map_err(|e| Error::io(json_path, e))?;
        let f = std::fs::File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_csv(&mut w)
            .and_then(|()| w.flush())
            .map_err(|e| Error::io(csv_path, e))
    }
}

/// Index of the strict maximum, or `None` when the maximum is shared.
pub fn strict_argmax(scores: &[f64]) -> Option<usize> {
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut winners = scores.iter().enumerate().filter(|(_, &s)| s == best);
    let first = winners.next()?.0;
    winners.next().is_none().then_some(first)
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // Positions i..=j share the average of ranks i+1..=j+1.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidArgument(format!(
            "correlation inputs of length {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 3 {
        return Err(Error::UndefinedCorrelation(format!(
            "needs at least 3 points, got {}",
            xs.len()
        )));
    }
    if xs.iter().chain(ys).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("correlation input".into()));
    }
    Ok(())
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    pearson(&ranks(xs), &ranks(ys))
}

impl EvalContext<'_> {
    fn prefix(&self, feature: Option<&[f32]>) -> Vec<TokenId> {
        let sp = self.tokenizer.specials();
        match feature {
            Some(_) => vec![sp.bos, sp.img],
            None => vec![sp.bos],
        }
    }

    fn text_feature(&self) -> Result<Option<&[f32]>> {
        match self.options.text_conditioning {
            TextConditioning::NoImage => Ok(None),
            TextConditioning::Placeholder => {
                let store = self.features.ok_or_else(|| {
                    Error::InvalidArgument("placeholder conditioning needs a feature store".into())
                })?;
                Ok(Some(store.placeholder()))
            }
        }
    }

    fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        let ids = self.tokenizer.encode(text);
        if ids.is_empty() {
            return Err(Error::Empty(format!("`{text}` encodes to no tokens")));
        }
        Ok(ids)
    }

    /// Sum of log-probabilities of `text` after the conditioning prefix.
    pub fn sentence_score<S: Scorer + ?Sized>(
        &self,
        scorer: &S,
        text: &str,
        feature: Option<&[f32]>,
    ) -> Result<f64> {
        self.continuation_score(scorer, "", text, feature)
    }

    /// Sum of log-probabilities of the tokens of `continuation` given `context`.
    pub fn continuation_score<S: Scorer + ?Sized>(
        &self,
        scorer: &S,
        context: &str,
        continuation: &str,
        feature: Option<&[f32]>,
    ) -> Result<f64> {
        let mut ids = self.prefix(feature);
        ids.extend(self.tokenizer.encode(context));
        let start = ids.len();
        ids.extend(self.encode(continuation)?);
        let lp = scorer.token_logprobs(&ids, feature)?;
        if lp.len() + 1 != ids.len() {
            return Err(Error::Integrity(format!(
                "scorer returned {} log-probabilities for {} tokens",
                lp.len(),
                ids.len()
            )));
        }
        Ok(lp[start - 1..].iter().sum())
    }
}

fn meta(ctx: &EvalContext<'_>) -> ReportMeta {
    ReportMeta {
        length_normalization: "none".into(),
        text_conditioning: ctx.options.text_conditioning,
        correlation: ctx.options.correlation,
    }
}

fn split_results(
    results: Vec<Result<Vec<ItemRecord>>>,
) -> (Vec<ItemRecord>, Vec<ItemError>, usize) {
    let mut items = Vec::new();
    let mut errors = Vec::new();
    let mut n_ok = 0;
    for (index, r) in results.into_iter().enumerate() {
        match r {
            Ok(recs) => {
                n_ok += 1;
                items.extend(recs);
            }
            Err(e) => errors.push(ItemError {
                index,
                message: e.to_string(),
            }),
        }
    }
    (items, errors, n_ok)
}

fn accuracy_report(
    ctx: &EvalContext<'_>,
    task: TaskType,
    metric: &str,
    results: Vec<Result<Vec<ItemRecord>>>,
) -> Result<EvalReport> {
    let (items, errors, n_items) = split_results(results);
    if items.is_empty() {
        return Err(Error::Empty(format!(
            "{task}: no items could be scored ({} errors)",
            errors.len()
        )));
    }
    let correct = items.iter().filter(|r| r.correct == Some(true)).count();
    Ok(EvalReport {
        task: task.to_string(),
        metric: metric.into(),
        value: correct as f64 / items.len() as f64,
        n_items,
        n_trials: items.len(),
        meta: meta(ctx),
        items,
        errors,
    })
}

fn non_empty<T>(items: &[T], task: TaskType) -> Result<()> {
    if items.is_empty() {
        return Err(Error::Empty(format!("{task}: task file has no items")));
    }
    Ok(())
}

/// Correct iff the good sentence scores strictly higher.
pub fn eval_minimal_pairs<S: Scorer + ?Sized>(
    scorer: &S,
    ctx: &EvalContext<'_>,
    items: &[MinimalPairItem],
) -> Result<EvalReport> {
    non_empty(items, TaskType::MinimalPairs)?;
    let feature = ctx.text_feature()?;
    let results = items
        .par_iter()
        .enumerate()
        .map(|(index, it)| {
            let good = ctx.sentence_score(scorer, &it.sentence_good, feature)?;
            let bad = ctx.sentence_score(scorer, &it.sentence_bad, feature)?;
            Ok(vec![ItemRecord {
                index,
                trial: 0,
                scores: vec![good, bad],
                predicted: strict_argmax(&[good, bad]),
                expected: Some(0),
                correct: Some(good > bad),
                rating: None,
            }])
        })
        .collect();
    accuracy_report(ctx, TaskType::MinimalPairs, "accuracy", results)
}

/// Correct iff the answer option has the strictly highest continuation score.
pub fn eval_multiple_choice<S: Scorer + ?Sized>(
    scorer: &S,
    ctx: &EvalContext<'_>,
    items: &[ChoiceItem],
) -> Result<EvalReport> {
    non_empty(items, TaskType::MultipleChoice)?;
    let feature = ctx.text_feature()?;
    let results = items
        .par_iter()
        .enumerate()
        .map(|(index, it)| {
            let scores = it
                .options
                .iter()
                .map(|o| ctx.continuation_score(scorer, &it.prefix, o, feature))
                .collect::<Result<Vec<f64>>>()?;
            let predicted = strict_argmax(&scores);
            Ok(vec![ItemRecord {
                index,
                trial: 0,
                correct: Some(predicted == Some(it.answer_index)),
                scores,
                predicted,
                expected: Some(it.answer_index),
                rating: None,
            }])
        })
        .collect();
    accuracy_report(ctx, TaskType::MultipleChoice, "accuracy", results)
}

/// Rank (or linear) correlation between sentence scores and human ratings.
pub fn eval_correlation<S: Scorer + ?Sized>(
    scorer: &S,
    ctx: &EvalContext<'_>,
    items: &[RatingItem],
) -> Result<EvalReport> {
    non_empty(items, TaskType::Correlation)?;
    let feature = ctx.text_feature()?;
    let results = items
        .par_iter()
        .enumerate()
        .map(|(index, it)| {
            let s = ctx.sentence_score(scorer, &it.stimulus, feature)?;
            Ok(vec![ItemRecord {
                index,
                trial: 0,
                scores: vec![s],
                predicted: None,
                expected: None,
                correct: None,
                rating: Some(it.human_rating),
            }])
        })
        .collect();
    let (items, errors, n_items) = split_results(results);
    let xs: Vec<f64> = items.iter().map(|r| r.scores[0]).collect();
    let ys: Vec<f64> = items.iter().map(|r| r.rating.unwrap()).collect();
    let (metric, value) = match ctx.options.correlation {
        Correlation::Spearman => ("spearman_rho", spearman(&xs, &ys)?),
        Correlation::Pearson => ("pearson_r", pearson(&xs, &ys)?),
    };
    Ok(EvalReport {
        task: TaskType::Correlation.to_string(),
        metric: metric.into(),
        value,
        n_items,
        n_trials: items.len(),
        meta: meta(ctx),
        items,
        errors,
    })
}

/// Each item yields two trials, one per image: the matching caption must
/// score strictly higher than the other caption under that image.
pub fn eval_winoground<S: Scorer + ?Sized>(
    scorer: &S,
    ctx: &EvalContext<'_>,
    items: &[WinogroundItem],
) -> Result<EvalReport> {
    non_empty(items, TaskType::Winoground)?;
    let store = ctx
        .features
        .ok_or_else(|| Error::InvalidArgument("winoground needs a feature store".into()))?;
    let results = items
        .par_iter()
        .enumerate()
        .map(|(index, it)| {
            let images = [store.get(&it.image_key_0)?, store.get(&it.image_key_1)?];
            let captions = [&it.caption_0, &it.caption_1];
            images
                .iter()
                .enumerate()
                .map(|(trial, &img)| {
                    let scores = captions
                        .iter()
                        .map(|c| ctx.sentence_score(scorer, c, Some(img)))
                        .collect::<Result<Vec<f64>>>()?;
                    let other = 1 - trial;
                    Ok(ItemRecord {
                        index,
                        trial,
                        correct: Some(scores[trial] > scores[other]),
                        predicted: strict_argmax(&scores),
                        scores,
                        expected: Some(trial),
                        rating: None,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect();
    accuracy_report(ctx, TaskType::Winoground, "unpaired_text_accuracy", results)
}

/// Loads a JSONL task file of the given type and evaluates it.
pub fn evaluate_file<S: Scorer + ?Sized>(
    scorer: &S,
    ctx: &EvalContext<'_>,
    task: TaskType,
    path: &Path,
) -> Result<EvalReport> {
    match task {
        TaskType::MinimalPairs => eval_minimal_pairs(scorer, ctx, &load_minimal_pairs(path)?),
        TaskType::MultipleChoice => eval_multiple_choice(scorer, ctx, &load_choices(path)?),
        TaskType::Correlation => eval_correlation(scorer, ctx, &load_ratings(path)?),
        TaskType::Winoground => eval_winoground(scorer, ctx, &load_winoground(path)?),
    }
}
