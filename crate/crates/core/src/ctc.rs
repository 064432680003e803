//! Connectionist Temporal Classification: loss, gradient and decoding.
//!
//! Log-probabilities are laid out `[|A| + 1, T]` with the blank at row 0 and
//! alphabet symbol `i` at row `i` (1-based).

use std::collections::HashSet;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BLANK: usize = 0;

/// Upper bound on paths enumerated by [`ctc_brute_force`].
pub const BRUTE_FORCE_LIMIT: u128 = 10_000_000;

/// Ordered output symbols. The blank is implicit at index 0, so symbol `i` of
/// the alphabet has label index `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alphabet {
    symbols: Vec<char>,
}

impl Alphabet {
    pub fn new(symbols: impl IntoIterator<Item = char>) -> Result<Self> {
        let symbols: Vec<char> = symbols.into_iter().collect();
        let mut seen = HashSet::new();
        for &s in &symbols {
            if !seen.insert(s) {
                return Err(Error::config("alphabet", format!("duplicate symbol {s:?}")));
            }
        }
        if symbols.is_empty() {
            return Err(Error::config("alphabet", "empty"));
        }
        Ok(Alphabet { symbols })
    }

    /// Number of symbols, excluding blank.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.symbols.iter().position(|&s| s == c).map(|i| i + 1)
    }

    pub fn symbol(&self, label: usize) -> Option<char> {
        label.checked_sub(1).and_then(|i| self.symbols.get(i)).copied()
    }

    pub fn encode(&self, text: &str) -> Result<LabelSequence> {
        let indices = text
            .chars()
            .map(|c| {
                self.index_of(c)
                    .ok_or_else(|| Error::Invalid(format!("character {c:?} not in alphabet")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LabelSequence {
            indices,
            text: text.to_string(),
        })
    }

    pub fn decode(&self, labels: &[usize]) -> String {
        labels.iter().filter_map(|&l| self.symbol(l)).collect()
    }
}

impl fmt::Display for Alphabet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.symbols.iter().try_for_each(|c| write!(f, "{c}"))
    }
}

/// Transcript as 1-based alphabet indices, with the text it came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSequence {
    pub indices: Vec<usize>,
    pub text: String,
}

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Fewest frames that can emit `target`: one per label plus a separating blank
/// between equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_inputs(op: &'static str, logprobs: &Tensor, target: &[usize]) -> Result<(usize, usize)> {
    let (rows, frames) = logprobs.dims2()?;
    if let Some(&bad) = target.iter().find(|&&l| l == BLANK || l >= rows) {
        return Err(Error::contract(op, format!("label {bad} outside 1..{rows}")));
    }
    Ok((rows, frames))
}

fn extended(target: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &l in target {
        ext.push(l);
        ext.push(BLANK);
    }
    ext
}

/// Log-space forward variables `alpha[t][s]` over the blank-extended target.
fn forward(logprobs: &Tensor, ext: &[usize]) -> Vec<Vec<f64>> {
    let frames = logprobs.shape()[1];
    let s_len = ext.len();
    let mut alpha = vec![vec![f64::NEG_INFINITY; s_len]; frames];
    alpha[0][0] = logprobs.at2(ext[0], 0);
    if s_len > 1 {
        alpha[0][1] = logprobs.at2(ext[1], 0);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = log_add(acc, alpha[t - 1][s - 1]);
            }
            if s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2] {
                acc = log_add(acc, alpha[t - 1][s - 2]);
            }
            if acc != f64::NEG_INFINITY {
                alpha[t][s] = acc + logprobs.at2(ext[s], t);
            }
        }
    }
    alpha
}

/// `ln P(target | logprobs)`; `-inf` when the target cannot be emitted.
pub fn ctc_log_prob(logprobs: &Tensor, target: &[usize]) -> Result<f64> {
    let (_, frames) = check_inputs("ctc_log_prob", logprobs, target)?;
    if frames < min_frames(target) {
        return Ok(f64::NEG_INFINITY);
    }
    let ext = extended(target);
    let alpha = forward(logprobs, &ext);
    let last = &alpha[frames - 1];
    let s_len = ext.len();
    Ok(if s_len > 1 {
        log_add(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    })
}

/// Negative log-likelihood of `target` and its exact gradient with respect to
/// every entry of `logprobs` (treated as free variables).
pub fn ctc_loss(logprobs: &Tensor, target: &[usize]) -> Result<(f64, Tensor)> {
    let (rows, frames) = check_inputs("ctc_loss", logprobs, target)?;
    if frames < min_frames(target) {
        return Err(Error::Infeasible {
            target_len: target.len(),
            frames,
        });
    }
    let ext = extended(target);
    let s_len = ext.len();
    let alpha = forward(logprobs, &ext);
    let log_p = if s_len > 1 {
        log_add(alpha[frames - 1][s_len - 1], alpha[frames - 1][s_len - 2])
    } else {
        alpha[frames - 1][0]
    };
    if !log_p.is_finite() {
        return Err(Error::Infeasible {
            target_len: target.len(),
            frames,
        });
    }

    // beta[t][s]: log prob of completing the path from state s at t, excluding
    // the emission at t itself.
    let mut beta = vec![vec![f64::NEG_INFINITY; s_len]; frames];
    beta[frames - 1][s_len - 1] = 0.0;
    if s_len > 1 {
        beta[frames - 1][s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[t + 1][s] + logprobs.at2(ext[s], t + 1);
            if s + 1 < s_len {
                acc = log_add(acc, beta[t + 1][s + 1] + logprobs.at2(ext[s + 1], t + 1));
            }
            if s + 2 < s_len && ext[s + 2] != BLANK && ext[s + 2] != ext[s] {
                acc = log_add(acc, beta[t + 1][s + 2] + logprobs.at2(ext[s + 2], t + 1));
            }
            beta[t][s] = acc;
        }
    }

    let mut grad = vec![0.0; rows * frames];
    for t in 0..frames {
        for s in 0..s_len {
            let occ = alpha[t][s] + beta[t][s] - log_p;
            if occ > f64::NEG_INFINITY {
                grad[ext[s] * frames + t] -= occ.exp();
            }
        }
    }
    Ok((-log_p, Tensor::new(vec![rows, frames], grad)?))
}

/// Merge repeats, then drop blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &l in path {
        if Some(l) != prev && l != BLANK {
            out.push(l);
        }
        prev = Some(l);
    }
    out
}

/// Loss by summing the probability of every frame-level path that collapses
/// to `target`. Exponential in `T`; used as an oracle.
pub fn ctc_brute_force(logprobs: &Tensor, target: &[usize]) -> Result<f64> {
    let (rows, frames) = check_inputs("ctc_brute_force", logprobs, target)?;
    let size = (rows as u128).checked_pow(frames as u32).unwrap_or(u128::MAX);
    if size > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge {
            size,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let mut total = 0.0;
    let mut path = vec![0usize; frames];
    loop {
        if collapse(&path) == target {
            let lp: f64 = path.iter().enumerate().map(|(t, &l)| logprobs.at2(l, t)).sum();
            total += lp.exp();
        }
        // Odometer increment.
        let mut i = 0;
        loop {
            if i == frames {
                return if total > 0.0 {
                    Ok(-total.ln())
                } else {
                    Err(Error::Infeasible {
                        target_len: target.len(),
                        frames,
                    })
                };
            }
            path[i] += 1;
            if path[i] < rows {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Per-frame argmax, collapsed. Ties go to the lower label index.
pub fn greedy_decode(logprobs: &Tensor) -> Vec<usize> {
    let (rows, frames) = (logprobs.shape()[0], logprobs.shape()[1]);
    let path: Vec<usize> = (0..frames)
        .map(|t| {
            (0..rows).fold(0, |best, r| {
                if logprobs.at2(r, t) > logprobs.at2(best, t) {
                    r
                } else {
                    best
                }
            })
        })
        .collect();
    collapse(&path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform(rows: usize, frames: usize) -> Tensor {
        Tensor::full(&[rows, frames], -(rows as f64).ln())
    }

    fn one_hot(path: &[usize], rows: usize) -> Tensor {
        let mut t = Tensor::full(&[rows, path.len()], -30.0);
        for (i, &l) in path.iter().enumerate() {
            t.data_mut()[l * path.len() + i] = 0.0;
        }
        t
    }

    #[test]
    fn loss_examples() {
        let (l, _) = ctc_loss(&uniform(2, 1), &[1]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let (l, _) = ctc_loss(&uniform(2, 2), &[1]).unwrap();
        assert!((l - (4.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((ctc_brute_force(&uniform(2, 1), &[1]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((ctc_brute_force(&uniform(2, 2), &[1]).unwrap() - (4.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_target_is_all_blank_path() {
        let lp = Tensor::from_rows(&[vec![-0.1, -0.7, -1.2], vec![-2.4, -0.7, -0.36]]);
        let (l, _) = ctc_loss(&lp, &[]).unwrap();
        assert!((l - (0.1 + 0.7 + 1.2)).abs() < 1e-12);
    }

    #[test]
    fn infeasible_targets() {
        assert!(matches!(ctc_loss(&uniform(2, 1), &[1, 1]), Err(Error::Infeasible { .. })));
        assert!(matches!(ctc_loss(&uniform(3, 2), &[1, 1]), Err(Error::Infeasible { .. })));
        assert!(ctc_loss(&uniform(3, 2), &[1, 2]).is_ok());
        assert!(matches!(ctc_brute_force(&uniform(2, 2), &[1, 1, 1]), Err(Error::Infeasible { .. })));
        assert_eq!(ctc_log_prob(&uniform(2, 1), &[1, 1]).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn brute_force_refuses_large_instances() {
        assert!(matches!(ctc_brute_force(&uniform(4, 12), &[1]), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn one_hot_path_has_zero_loss() {
        let lp = one_hot(&[1, 0, 2, 2], 3).map(|x| if x == 0.0 { 0.0 } else { f64::NEG_INFINITY });
        assert_eq!(ctc_brute_force(&lp, &[1, 2]).unwrap(), 0.0);
    }

    #[test]
    fn greedy_examples() {
        assert_eq!(greedy_decode(&one_hot(&[1, 1, 0, 1], 2)), vec![1, 1]);
        assert_eq!(greedy_decode(&one_hot(&[0, 0, 0], 2)), Vec::<usize>::new());
        assert_eq!(greedy_decode(&one_hot(&[1, 2, 2, 0, 2], 3)), vec![1, 2, 2]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let lp = Tensor::from_rows(&[
            vec![-0.3, -1.2, -0.8, -2.0, -0.5],
            vec![-1.5, -0.4, -1.1, -0.2, -1.9],
            vec![-2.2, -2.5, -0.9, -1.7, -1.0],
        ]);
        let target = [1, 2, 2];
        let (_, grad) = ctc_loss(&lp, &target).unwrap();
        let eps = 1e-6;
        for i in 0..lp.len() {
            let mut p = lp.clone();
            p.data_mut()[i] += eps;
            let mut m = lp.clone();
            m.data_mut()[i] -= eps;
            let fd = (ctc_loss(&p, &target).unwrap().0 - ctc_loss(&m, &target).unwrap().0) / (2.0 * eps);
            let a = grad.data()[i];
            assert!((a - fd).abs() / a.abs().max(1.0) < 1e-5, "{i}: {a} vs {fd}");
        }
    }

    #[test]
    fn long_sequences_do_not_underflow() {
        let (l, g) = ctc_loss(&uniform(5, 400), &[1, 2, 3, 4, 1, 2]).unwrap();
        assert!(l.is_finite() && l > 0.0);
        assert!(g.is_finite());
    }

    #[test]
    fn alphabet_round_trip() {
        let a = Alphabet::new("ab c".chars()).unwrap();
        let seq = a.encode("a cb").unwrap();
        assert_eq!(seq.indices, vec![1, 3, 4, 2]);
        assert_eq!(a.decode(&seq.indices), "a cb");
        assert!(Alphabet::new("aba".chars()).is_err());
        assert!(a.encode("z").is_err());
    }

    fn log_normalize(raw: &[f64], rows: usize, frames: usize) -> Tensor {
        let mut data = raw.to_vec();
        for t in 0..frames {
            let lse = (0..rows).map(|r| raw[r * frames + t].exp()).sum::<f64>().ln();
            for r in 0..rows {
                data[r * frames + t] -= lse;
            }
        }
        Tensor::new(vec![rows, frames], data).unwrap()
    }

    proptest! {
        #[test]
        fn occupancy_per_frame_sums_to_one(
            raw in proptest::collection::vec(-3.0f64..3.0, 4 * 6),
            target in proptest::collection::vec(1usize..4, 0..3),
        ) {
            let lp = log_normalize(&raw, 4, 6);
            let (_, grad) = ctc_loss(&lp, &target).unwrap();
            for t in 0..6 {
                let s: f64 = (0..4).map(|r| grad.at2(r, t)).sum();
                prop_assert!((s + 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn relabeling_preserves_loss(
            raw in proptest::collection::vec(-3.0f64..3.0, 4 * 5),
            target in proptest::collection::vec(1usize..4, 0..3),
        ) {
            let lp = log_normalize(&raw, 4, 5);
            // Rotate the non-blank labels 1 -> 2 -> 3 -> 1.
            let perm = |l: usize| if l == 0 { 0 } else { l % 3 + 1 };
            let mut relabeled = lp.clone();
            for r in 0..4 {
                for t in 0..5 {
                    relabeled.data_mut()[perm(r) * 5 + t] = lp.at2(r, t);
                }
            }
            let mapped: Vec<usize> = target.iter().map(|&l| perm(l)).collect();
            let a = ctc_loss(&lp, &target).unwrap().0;
            let b = ctc_loss(&relabeled, &mapped).unwrap().0;
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn total_probability_over_targets_is_at_most_one(
            raw in proptest::collection::vec(-3.0f64..3.0, 3 * 4),
        ) {
            let lp = log_normalize(&raw, 3, 4);
            // Every target reachable in 4 frames has length <= 4.
            let mut total = 0.0;
            let mut stack: Vec<Vec<usize>> = vec![vec![]];
            while let Some(t) = stack.pop() {
                if let Ok(l) = ctc_brute_force(&lp, &t) {
                    total += (-l).exp();
                }
                if t.len() < 4 {
                    for s in 1..3 {
                        let mut n = t.clone();
                        n.push(s);
                        stack.push(n);
                    }
                }
            }
            prop_assert!(total <= 1.0 + 1e-12);
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }
}
