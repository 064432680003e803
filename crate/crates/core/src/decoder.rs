//! CTC prefix beam search with shallow n-gram LM fusion.
//!
//! A hypothesis is scored as
//! `ln P_ctc(prefix) + lm_weight * ln P_lm(prefix) + insertion_bonus * |prefix|`.
//! Complete transcripts additionally pay for `</s>` when the final one is picked.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_log_prob, log_add, Alphabet, BLANK};
use crate::error::{Error, Result};
use crate::lm::{char_token, ArpaModel, EOS};
use crate::tensor::Tensor;

/// Largest search space [`exhaustive_decode`] will enumerate.
pub const EXHAUSTIVE_LIMIT: u128 = 1_000_000;

const LN_10: f64 = std::f64::consts::LN_10;

/// What the LM sees as one token.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionUnit {
    /// Every emitted symbol is scored (spaces as `<sp>`).
    #[default]
    Char,
    /// Words are scored when a space completes them; a trailing word is scored
    /// when the final transcript is chosen.
    Word,
}

#[derive(Clone, Debug)]
pub struct DecoderConfig<'a> {
    pub beam_width: usize,
    pub lm_weight: f64,
    pub insertion_bonus: f64,
    pub fusion: FusionUnit,
    pub lm: Option<&'a ArpaModel>,
}

impl Default for DecoderConfig<'_> {
    fn default() -> Self {
        DecoderConfig {
            beam_width: 32,
            lm_weight: 1.0,
            insertion_bonus: 1.5,
            fusion: FusionUnit::Char,
            lm: None,
        }
    }
}

impl DecoderConfig<'_> {
    /// Pure CTC search (no LM, no bonus) with the given width.
    pub fn acoustic_only(beam_width: usize) -> Self {
        DecoderConfig {
            beam_width,
            lm_weight: 0.0,
            insertion_bonus: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::config("beam_width", "must be at least 1"));
        }
        if !(self.lm_weight >= 0.0 && self.lm_weight.is_finite()) {
            return Err(Error::config("lm_weight", "must be finite and non-negative"));
        }
        if !self.insertion_bonus.is_finite() {
            return Err(Error::config("insertion_bonus", "must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// Label indices, never containing the blank.
    pub prefix: Vec<usize>,
    pub log_p_blank: f64,
    pub log_p_nonblank: f64,
    /// LM context: the last tokens handed to the LM.
    pub lm_state: Vec<String>,
    /// Natural-log LM probability of the scored part of the prefix.
    pub lm_log_prob: f64,
    pub score: f64,
}

impl BeamHypothesis {
    pub fn log_p_ctc(&self) -> f64 {
        log_add(self.log_p_blank, self.log_p_nonblank)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub labels: Vec<usize>,
    pub text: String,
    pub score: f64,
}

/// Incremental LM scoring of label prefixes.
struct Fusion<'c, 'a> {
    cfg: &'c DecoderConfig<'a>,
    alphabet: &'c Alphabet,
    /// prefix -> (ln P_lm of scored part, LM context)
    cache: HashMap<Vec<usize>, (f64, Vec<String>)>,
}

impl<'c, 'a> Fusion<'c, 'a> {
    fn new(cfg: &'c DecoderConfig<'a>, alphabet: &'c Alphabet) -> Self {
        let mut cache = HashMap::new();
        cache.insert(Vec::new(), (0.0, vec![crate::lm::BOS.to_string()]));
        Fusion { cfg, alphabet, cache }
    }

    fn active(&self) -> Option<&'a ArpaModel> {
        self.cfg.lm.filter(|_| self.cfg.lm_weight > 0.0)
    }

    fn trim(&self, mut state: Vec<String>) -> Vec<String> {
        let keep = self.cfg.lm.map_or(0, |m| m.order().saturating_sub(1));
        if state.len() > keep {
            state.drain(..state.len() - keep);
        }
        state
    }

    /// LM part for `prefix`, derived from its parent (which must be cached).
    fn lm(&mut self, prefix: &[usize]) -> (f64, Vec<String>) {
        if let Some(v) = self.cache.get(prefix) {
            return v.clone();
        }
        let Some(lm) = self.active() else {
            return (0.0, Vec::new());
        };
        let (parent_lp, parent_state) = self.lm(&prefix[..prefix.len() - 1]);
        let c = self.alphabet.symbol(*prefix.last().unwrap()).unwrap_or('?');
        let (lp, state) = match self.cfg.fusion {
            FusionUnit::Char => {
                let tok = char_token(c);
                let lp = parent_lp + LN_10 * lm.score(&parent_state, &tok);
                let mut state = parent_state;
                state.push(tok);
                (lp, self.trim(state))
            }
            FusionUnit::Word if c == ' ' => {
                let word = self.trailing_word(&prefix[..prefix.len() - 1]);
                if word.is_empty() {
                    (parent_lp, parent_state)
                } else {
                    let lp = parent_lp + LN_10 * lm.score(&parent_state, &word);
                    let mut state = parent_state;
                    state.push(word);
                    (lp, self.trim(state))
                }
            }
            FusionUnit::Word => (parent_lp, parent_state),
        };
        self.cache.insert(prefix.to_vec(), (lp, state.clone()));
        (lp, state)
    }

    fn trailing_word(&self, prefix: &[usize]) -> String {
        let text = self.alphabet.decode(prefix);
        text.rsplit(' ').next().unwrap_or("").to_string()
    }

    /// Extra LM term applied only when ranking complete transcripts: the
    /// pending word (word fusion) and the end of sentence.
    fn final_term(&mut self, prefix: &[usize]) -> f64 {
        let Some(lm) = self.active() else { return 0.0 };
        let (_, mut state) = self.lm(prefix);
        let mut log10 = 0.0;
        if self.cfg.fusion == FusionUnit::Word {
            let word = self.trailing_word(prefix);
            if !word.is_empty() {
                log10 += lm.score(&state, &word);
                state.push(word);
                state = self.trim(state);
            }
        }
        log10 += lm.score(&state, EOS);
        LN_10 * log10
    }

    fn score(&self, log_p_ctc: f64, lm_log_prob: f64, len: usize) -> f64 {
        log_p_ctc + self.cfg.lm_weight * lm_log_prob + self.cfg.insertion_bonus * len as f64
    }
}

/// Higher score first; scores equal up to rounding are ordered
/// lexicographically, which also puts shorter prefixes first.
fn prefer(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    let tol = 1e-12 * a.0.abs().max(b.0.abs()).max(1.0);
    if (a.0 - b.0).abs() <= tol || a.0 == b.0 {
        a.1.cmp(b.1)
    } else if a.0 > b.0 {
        Ordering::Less
    } else {
        Ordering::Greater
    }
}

fn pick_best<'p>(candidates: impl Iterator<Item = (f64, &'p [usize])>) -> Option<(f64, &'p [usize])> {
    candidates.fold(None, |best, c| match best {
        Some(b) if prefer(b, c) != Ordering::Greater => Some(b),
        _ => Some(c),
    })
}

fn check_logprobs(logprobs: &Tensor, alphabet: &Alphabet) -> Result<Vec<Vec<f64>>> {
    let (rows, _) = logprobs.dims2()?;
    if rows != alphabet.len() + 1 {
        return Err(Error::dim(
            "prefix_beam_search",
            format!("{rows} rows for an alphabet of {} symbols", alphabet.len()),
        ));
    }
    logprobs.transpose().map(|t| t.to_rows())
}

/// Every hypothesis alive after the last frame, best first.
pub fn beam_hypotheses(frames: &[Vec<f64>], alphabet: &Alphabet, cfg: &DecoderConfig) -> Result<Vec<BeamHypothesis>> {
    cfg.validate()?;
    let labels = alphabet.len() + 1;
    if let Some(f) = frames.iter().find(|f| f.len() != labels) {
        return Err(Error::dim(
            "prefix_beam_search",
            format!("frame has {} entries, expected {labels}", f.len()),
        ));
    }
    let mut fusion = Fusion::new(cfg, alphabet);
    let mut beams: Vec<(Vec<usize>, f64, f64)> = vec![(Vec::new(), 0.0, f64::NEG_INFINITY)];
    for frame in frames {
        let mut next: HashMap<Vec<usize>, (f64, f64)> = HashMap::new();
        for (prefix, pb, pnb) in &beams {
            let total = log_add(*pb, *pnb);
            let e = next.entry(prefix.clone()).or_insert((f64::NEG_INFINITY, f64::NEG_INFINITY));
            e.0 = log_add(e.0, total + frame[BLANK]);
            for (c, &p) in frame.iter().enumerate().skip(1) {
                let mut extended = prefix.clone();
                extended.push(c);
                if prefix.last() == Some(&c) {
                    let same = next.get_mut(prefix).unwrap();
                    same.1 = log_add(same.1, pnb + p);
                    let e = next.entry(extended).or_insert((f64::NEG_INFINITY, f64::NEG_INFINITY));
                    e.1 = log_add(e.1, pb + p);
                } else {
                    let e = next.entry(extended).or_insert((f64::NEG_INFINITY, f64::NEG_INFINITY));
                    e.1 = log_add(e.1, total + p);
                }
            }
        }
        let mut scored: Vec<(f64, Vec<usize>, f64, f64)> = next
            .into_iter()
            .filter(|(_, (pb, pnb))| log_add(*pb, *pnb) > f64::NEG_INFINITY)
            .map(|(prefix, (pb, pnb))| {
                let (lm_lp, _) = fusion.lm(&prefix);
                (fusion.score(log_add(pb, pnb), lm_lp, prefix.len()), prefix, pb, pnb)
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        scored.truncate(cfg.beam_width);
        beams = scored.into_iter().map(|(_, p, pb, pnb)| (p, pb, pnb)).collect();
    }
    let mut out: Vec<BeamHypothesis> = beams
        .into_iter()
        .map(|(prefix, pb, pnb)| {
            let (lm_lp, state) = fusion.lm(&prefix);
            let lm_log_prob = lm_lp + fusion.final_term(&prefix);
            let score = fusion.score(log_add(pb, pnb), lm_log_prob, prefix.len());
            BeamHypothesis {
                prefix,
                log_p_blank: pb,
                log_p_nonblank: pnb,
                lm_state: state,
                lm_log_prob,
                score,
            }
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.prefix.cmp(&b.prefix)));
    Ok(out)
}

/// Decode per-frame log-probabilities given as `T` columns of `|A| + 1` values.
/// `T = 0` yields the empty transcript with score 0.
pub fn prefix_beam_search_frames(frames: &[Vec<f64>], alphabet: &Alphabet, cfg: &DecoderConfig) -> Result<Decoded> {
    let hyps = beam_hypotheses(frames, alphabet, cfg)?;
    let (score, labels) = pick_best(hyps.iter().map(|h| (h.score, h.prefix.as_slice())))
        .map(|(s, p)| (s, p.to_vec()))
        .unwrap_or((0.0, Vec::new()));
    Ok(Decoded {
        text: alphabet.decode(&labels),
        labels,
        score,
    })
}

/// Decode `[|A| + 1, T]` log-probabilities.
pub fn prefix_beam_search(logprobs: &Tensor, alphabet: &Alphabet, cfg: &DecoderConfig) -> Result<Decoded> {
    let frames = check_logprobs(logprobs, alphabet)?;
    prefix_beam_search_frames(&frames, alphabet, cfg)
}

/// Score every label sequence of length up to `T` exactly and return the best.
pub fn exhaustive_decode(logprobs: &Tensor, alphabet: &Alphabet, cfg: &DecoderConfig) -> Result<Decoded> {
    cfg.validate()?;
    let (rows, frames) = logprobs.dims2()?;
    check_logprobs(logprobs, alphabet)?;
    let size = (rows as u128).checked_pow(frames as u32).unwrap_or(u128::MAX);
    if size > EXHAUSTIVE_LIMIT {
        return Err(Error::TooLarge {
            size,
            limit: EXHAUSTIVE_LIMIT,
        });
    }
    let mut fusion = Fusion::new(cfg, alphabet);
    let mut best: Option<(f64, Vec<usize>)> = None;
    let symbols = alphabet.len();
    for len in 0..=frames {
        for code in 0..symbols.pow(len as u32) {
            let mut rest = code;
            let mut seq = vec![0usize; len];
            for slot in seq.iter_mut().rev() {
                *slot = rest % symbols + 1;
                rest /= symbols;
            }
            let lp = ctc_log_prob(logprobs, &seq)?;
            if lp == f64::NEG_INFINITY {
                continue;
            }
            let lm_lp = fusion.lm(&seq).0 + fusion.final_term(&seq);
            let score = fusion.score(lp, lm_lp, len);
            let replace = match &best {
                None => true,
                Some((s, p)) => prefer((score, &seq), (*s, p)) == Ordering::Less,
            };
            if replace {
                best = Some((score, seq));
            }
        }
    }
    let (score, labels) = best.expect("the empty transcript is always feasible");
    Ok(Decoded {
        text: alphabet.decode(&labels),
        labels,
        score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::{ctc_brute_force, greedy_decode};
    use crate::lm::{count, train_kn, Tokenization};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_logprobs(rng: &mut ChaCha8Rng, rows: usize, frames: usize) -> Tensor {
        let mut data = vec![0.0; rows * frames];
        for t in 0..frames {
            let logits: Vec<f64> = (0..rows).map(|_| rng.random_range(-3.0..3.0)).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            for r in 0..rows {
                data[r * frames + t] = logits[r] - z;
            }
        }
        Tensor::new(vec![rows, frames], data).unwrap()
    }

    fn ab() -> Alphabet {
        Alphabet::new(['a', 'b']).unwrap()
    }

    #[test]
    fn uniform_two_frames_prefers_a() {
        let alphabet = Alphabet::new(['a']).unwrap();
        let lp = Tensor::full(&[2, 2], 0.5f64.ln());
        let cfg = DecoderConfig::acoustic_only(4);
        let d = exhaustive_decode(&lp, &alphabet, &cfg).unwrap();
        assert_eq!(d.text, "a");
        assert!((d.score - 0.75f64.ln()).abs() < 1e-12);
        assert_eq!(prefix_beam_search(&lp, &alphabet, &cfg).unwrap(), d);
    }

    #[test]
    fn blank_frames_decode_empty() {
        let mut lp = Tensor::full(&[3, 4], -50.0);
        for t in 0..4 {
            lp.data_mut()[t] = 0.0;
        }
        let cfg = DecoderConfig::acoustic_only(8);
        assert_eq!(exhaustive_decode(&lp, &ab(), &cfg).unwrap().text, "");
        assert_eq!(prefix_beam_search(&lp, &ab(), &cfg).unwrap().text, "");
    }

    #[test]
    fn zero_frames_give_empty_transcript() {
        let d = prefix_beam_search_frames(&[], &ab(), &DecoderConfig::default()).unwrap();
        assert_eq!(d.text, "");
        assert_eq!(d.score, 0.0);
    }

    #[test]
    fn width_one_on_peaked_frames_matches_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let frames = rng.random_range(1..10);
            let mut lp = Tensor::full(&[3, frames], -30.0);
            for t in 0..frames {
                let r = rng.random_range(0..3);
                lp.data_mut()[r * frames + t] = -1e-12;
            }
            let g = greedy_decode(&lp);
            let d = prefix_beam_search(&lp, &ab(), &DecoderConfig::acoustic_only(1)).unwrap();
            assert_eq!(d.labels, g);
        }
    }

    #[test]
    fn unpruned_beam_matches_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let frames = rng.random_range(1..=5);
            let lp = random_logprobs(&mut rng, 3, frames);
            let cfg = DecoderConfig::acoustic_only(3usize.pow(frames as u32));
            let beam = prefix_beam_search(&lp, &ab(), &cfg).unwrap();
            let exact = exhaustive_decode(&lp, &ab(), &cfg).unwrap();
            assert_eq!(beam.labels, exact.labels);
            assert!((beam.score - exact.score).abs() < 1e-9);
        }
    }

    #[test]
    fn merged_prefix_probabilities_match_path_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let frames = rng.random_range(1..=5);
            let lp = random_logprobs(&mut rng, 3, frames);
            let cfg = DecoderConfig::acoustic_only(usize::MAX);
            let frames_cols = lp.transpose().unwrap().to_rows();
            let hyps = beam_hypotheses(&frames_cols, &ab(), &cfg).unwrap();
            for h in &hyps {
                let brute = -ctc_brute_force(&lp, &h.prefix).unwrap();
                assert!((h.log_p_ctc() - brute).abs() < 1e-10, "{:?}", h.prefix);
                assert!(!h.prefix.contains(&BLANK));
            }
        }
    }

    #[test]
    fn lm_can_override_acoustics() {
        let corpus: Vec<Vec<String>> = vec![Tokenization::Char.tokenize("ab"); 5];
        let lm = train_kn(&count(&corpus, 3).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lp = random_logprobs(&mut rng, 3, 4);
        let cfg = DecoderConfig {
            beam_width: 81,
            lm_weight: 200.0,
            insertion_bonus: 0.0,
            fusion: FusionUnit::Char,
            lm: Some(&lm),
        };
        assert_eq!(exhaustive_decode(&lp, &ab(), &cfg).unwrap().text, "ab");
        assert_eq!(prefix_beam_search(&lp, &ab(), &cfg).unwrap().text, "ab");
    }

    #[test]
    fn word_fusion_scores_completed_words() {
        let corpus: Vec<Vec<String>> = vec![Tokenization::Word.tokenize("ab ba"); 3];
        let lm = train_kn(&count(&corpus, 2).unwrap()).unwrap();
        let alphabet = Alphabet::new(['a', 'b', ' ']).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lp = random_logprobs(&mut rng, 4, 6);
        let cfg = DecoderConfig {
            beam_width: 4096,
            lm_weight: 0.5,
            insertion_bonus: 0.2,
            fusion: FusionUnit::Word,
            lm: Some(&lm),
        };
        let beam = prefix_beam_search(&lp, &alphabet, &cfg).unwrap();
        let exact = exhaustive_decode(&lp, &alphabet, &cfg).unwrap();
        assert_eq!(beam.labels, exact.labels);
        assert!((beam.score - exact.score).abs() < 1e-9);
    }

    #[test]
    fn refuses_large_exhaustive_search() {
        let lp = Tensor::full(&[3, 20], (1.0f64 / 3.0).ln());
        assert!(matches!(
            exhaustive_decode(&lp, &ab(), &DecoderConfig::acoustic_only(1)),
            Err(Error::TooLarge { .. })
        ));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let lp = Tensor::full(&[3, 2], (1.0f64 / 3.0).ln());
        let cfg = DecoderConfig {
            beam_width: 0,
            ..Default::default()
        };
        assert!(prefix_beam_search(&lp, &ab(), &cfg).is_err());
        let cfg = DecoderConfig {
            lm_weight: -1.0,
            ..Default::default()
        };
        assert!(prefix_beam_search(&lp, &ab(), &cfg).is_err());
        assert!(prefix_beam_search(&lp, &Alphabet::new(['a']).unwrap(), &DecoderConfig::default()).is_err());
    }
}
