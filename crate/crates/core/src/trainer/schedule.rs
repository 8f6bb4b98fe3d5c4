//! Words-seen bookkeeping and the checkpoint milestone schedule:
//! every 1M words up to 10M, every 10M up to 100M, every 100M up to 1B.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MILLION: u64 = 1_000_000;

/// The 28 milestone word counts, ascending.
pub fn milestones() -> Vec<u64> {
    let fine = (1..=10).map(|i| i * MILLION);
    let mid = (2..=10).map(|i| i * 10 * MILLION);
    let coarse = (2..=10).map(|i| i * 100 * MILLION);
    fine.chain(mid).chain(coarse).collect()
}

/// Milestones τ with `prev < τ ≤ new`, ascending.
pub fn schedule_crossings(prev_words: u64, new_words: u64) -> Vec<u64> {
    milestones()
        .into_iter()
        .filter(|&m| prev_words < m && m <= new_words)
        .collect()
}

/// `floor(subwords / ratio)`. Quotients within 1e-9 (relative) of an integer
/// snap to it, so decimal ratios such as 1.36 divide exactly.
pub fn estimate_words(subword_count: u64, ratio: f64) -> u64 {
    debug_assert!(ratio > 0.0);
    let q = subword_count as f64 / ratio;
    let nearest = q.round();
    if (q - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest as u64
    } else {
        q.floor() as u64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub words_seen: u64,
    pub emitted: BTreeSet<u64>,
}

impl ScheduleState {
    /// Moves to `words` and returns the milestones that fire now.
    pub fn advance(&mut self, words: u64) -> Result<Vec<u64>> {
        if words < self.words_seen {
            return Err(Error::InvalidArgument(format!(
                "words seen cannot decrease ({} -> {words})",
                self.words_seen
            )));
        }
        let fired: Vec<u64> = schedule_crossings(self.words_seen, words)
            .into_iter()
            .filter(|m| !self.emitted.contains(m))
            .collect();
        self.emitted.extend(&fired);
        self.words_seen = words;
        Ok(fired)
    }
}
