//! Character and word error rates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorUnit {
    #[default]
    Char,
    Word,
}

/// Levenshtein distance with unit insertion, deletion and substitution costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ErrorStats {
    pub distance: usize,
    pub length: usize,
}

impl ErrorStats {
    pub fn rate(&self) -> Result<f64> {
        if self.length == 0 {
            return Err(Error::Invalid("error rate undefined for an empty reference".into()));
        }
        Ok(self.distance as f64 / self.length as f64)
    }

    pub fn add(&mut self, other: ErrorStats) {
        self.distance += other.distance;
        self.length += other.length;
    }
}

fn units(text: &str, unit: ErrorUnit) -> Vec<&str> {
    match unit {
        ErrorUnit::Word => text.split_whitespace().collect(),
        ErrorUnit::Char => {
            let trimmed = text.trim();
            trimmed
                .char_indices()
                .map(|(i, c)| &trimmed[i..i + c.len_utf8()])
                .collect()
        }
    }
}

/// Distance and reference length between two transcripts.
pub fn edit_stats(reference: &str, hypothesis: &str, unit: ErrorUnit) -> ErrorStats {
    let r = units(reference, unit);
    let h = units(hypothesis, unit);
    ErrorStats {
        distance: edit_distance(&r, &h),
        length: r.len(),
    }
}

/// `(distance, reference length, rate)`; fails on an empty reference.
pub fn edit_distance_metrics(reference: &str, hypothesis: &str, unit: ErrorUnit) -> Result<(usize, usize, f64)> {
    let s = edit_stats(reference, hypothesis, unit);
    Ok((s.distance, s.length, s.rate()?))
}

/// Corpus-level CER and WER accumulated over utterance pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Scores {
    pub chars: ErrorStats,
    pub words: ErrorStats,
}

impl Scores {
    pub fn add(&mut self, reference: &str, hypothesis: &str) {
        self.chars.add(edit_stats(reference, hypothesis, ErrorUnit::Char));
        self.words.add(edit_stats(reference, hypothesis, ErrorUnit::Word));
    }

    pub fn cer(&self) -> Result<f64> {
        self.chars.rate()
    }

    pub fn wer(&self) -> Result<f64> {
        self.words.rate()
    }
}
