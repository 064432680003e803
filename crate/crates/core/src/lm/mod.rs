//! Interpolated modified Kneser-Ney n-gram language models.
//!
//! Training goes corpus -> [`CountTable`] -> [`ArpaModel`]. The model is stored
//! in backoff form (log10 probabilities and backoff weights, as in ARPA files)
//! and queried with the usual backoff recursion.

mod arpa;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use arpa::{arpa_read, arpa_read_str, arpa_write, arpa_write_string};

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
/// Stand-in for a space character in character-level corpora.
pub const SPACE: &str = "<sp>";

/// Log10 probability stored for `<s>`, which is never predicted.
pub const BOS_LOG10: f64 = -99.0;
/// Log10 probability for unknown tokens when a model has no `<unk>` entry.
pub const MISSING_UNK_LOG10: f64 = -100.0;

const FALLBACK_DISCOUNT: f64 = 0.75;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tokenization {
    Word,
    #[default]
    Char,
}

impl Tokenization {
    pub fn tokenize(self, line: &str) -> Vec<String> {
        match self {
            Tokenization::Word => line.split_whitespace().map(str::to_string).collect(),
            Tokenization::Char => line
                .trim()
                .chars()
                .map(|c| if c == ' ' { SPACE.to_string() } else { c.to_string() })
                .collect(),
        }
    }
}

pub fn char_token(c: char) -> String {
    if c == ' ' {
        SPACE.to_string()
    } else {
        c.to_string()
    }
}

/// Token ids for a vocabulary. `<s>`, `</s>` and `<unk>` always exist.
#[derive(Clone, Debug, Default)]
struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn with_markers() -> Self {
        let mut v = Vocab::default();
        for w in [BOS, EOS, UNK] {
            v.intern(w);
        }
        v
    }

    fn intern(&mut self, w: &str) -> u32 {
        if let Some(&i) = self.index.get(w) {
            return i;
        }
        let i = self.words.len() as u32;
        self.words.push(w.to_string());
        self.index.insert(w.to_string(), i);
        i
    }

    fn get(&self, w: &str) -> Option<u32> {
        self.index.get(w).copied()
    }
}

/// Raw n-gram counts of a sentence-padded corpus for every order up to `order`.
#[derive(Clone, Debug)]
pub struct CountTable {
    order: usize,
    vocab: Vocab,
    /// `raw[k - 1]`: counts of k-grams. `<s>` is never counted as a unigram.
    raw: Vec<HashMap<Vec<u32>, u64>>,
}

impl CountTable {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn count(&self, ngram: &[&str]) -> u64 {
        let Some(ids) = ngram.iter().map(|w| self.vocab.get(w)).collect::<Option<Vec<_>>>() else {
            return 0;
        };
        self.raw
            .get(ngram.len().wrapping_sub(1))
            .and_then(|m| m.get(&ids))
            .copied()
            .unwrap_or(0)
    }

    /// All n-grams of one order with their raw counts.
    pub fn ngrams(&self, order: usize) -> Vec<(Vec<String>, u64)> {
        let mut out: Vec<_> = self.raw[order - 1]
            .iter()
            .map(|(k, &c)| (self.words(k), c))
            .collect();
        out.sort();
        out
    }

    /// Number of distinct tokens `v` such that `v + ngram` was observed.
    pub fn continuation_count(&self, ngram: &[&str]) -> u64 {
        let Some(ids) = ngram.iter().map(|w| self.vocab.get(w)).collect::<Option<Vec<_>>>() else {
            return 0;
        };
        if ids.len() >= self.order {
            return 0;
        }
        self.raw[ids.len()].keys().filter(|k| k[1..] == ids[..]).count() as u64
    }

    /// Counts-of-counts `n_1..n_4` of the Kneser-Ney adjusted counts of one order.
    pub fn counts_of_counts(&self, order: usize) -> [u64; 4] {
        let adjusted = self.adjusted();
        count_of_counts(&adjusted[order - 1])
    }

    fn words(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.vocab.words[i as usize].clone()).collect()
    }

    /// Highest order and n-grams beginning with `<s>` keep raw counts; every
    /// other n-gram is replaced by its number of distinct left extensions.
    fn adjusted(&self) -> Vec<HashMap<Vec<u32>, u64>> {
        let bos = self.vocab.get(BOS).expect("marker");
        let mut out = Vec::with_capacity(self.order);
        for k in 1..=self.order {
            if k == self.order {
                out.push(self.raw[k - 1].clone());
                continue;
            }
            let mut cont: HashMap<Vec<u32>, u64> = HashMap::new();
            for key in self.raw[k].keys() {
                *cont.entry(key[1..].to_vec()).or_default() += 1;
            }
            let adjusted = self.raw[k - 1]
                .iter()
                .map(|(g, &raw)| {
                    let c = if g[0] == bos { raw } else { cont.get(g).copied().unwrap_or(0) };
                    (g.clone(), c)
                })
                .filter(|(_, c)| *c > 0)
                .collect();
            out.push(adjusted);
        }
        out
    }
}

fn count_of_counts(table: &HashMap<Vec<u32>, u64>) -> [u64; 4] {
    let mut n = [0u64; 4];
    for &c in table.values() {
        if (1..=4).contains(&c) {
            n[c as usize - 1] += 1;
        }
    }
    n
}

/// Count all n-grams up to `order` over sentences padded as `<s> w.. </s>`.
pub fn count<S: AsRef<str>>(corpus: &[Vec<S>], order: usize) -> Result<CountTable> {
    if order == 0 {
        return Err(Error::config("order", "must be at least 1"));
    }
    if corpus.iter().all(|s| s.is_empty()) {
        return Err(Error::Invalid("cannot train a language model on an empty corpus".into()));
    }
    let mut vocab = Vocab::with_markers();
    let mut raw = vec![HashMap::new(); order];
    for sentence in corpus.iter().filter(|s| !s.is_empty()) {
        let mut ids = vec![vocab.get(BOS).unwrap()];
        for w in sentence {
            let w = w.as_ref();
            if w == BOS || w == EOS {
                return Err(Error::Invalid(format!("corpus contains reserved token {w}")));
            }
            ids.push(vocab.intern(w));
        }
        ids.push(vocab.get(EOS).unwrap());
        for k in 1..=order {
            for (start, window) in ids.windows(k).enumerate() {
                if k == 1 && start == 0 {
                    continue;
                }
                *raw[k - 1].entry(window.to_vec()).or_insert(0u64) += 1;
            }
        }
    }
    Ok(CountTable { order, vocab, raw })
}

/// Discounts for counts 1, 2 and 3+ of one order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Discounts(pub [f64; 3]);

impl Discounts {
    pub fn for_count(&self, c: u64) -> f64 {
        self.0[(c.min(3) - 1) as usize]
    }

    /// `Y = n1/(n1 + 2 n2)`, `D_k = k - (k+1) Y n_{k+1}/n_k`. `None` when the
    /// counts-of-counts are degenerate or a discount falls outside `(0, k]`.
    pub fn estimate(n: [u64; 4]) -> Option<Discounts> {
        if n.contains(&0) {
            return None;
        }
        let n: [f64; 4] = n.map(|v| v as f64);
        let y = n[0] / (n[0] + 2.0 * n[1]);
        let mut d = [0.0; 3];
        for k in 1..=3 {
            let dk = k as f64 - (k + 1) as f64 * y * n[k] / n[k - 1];
            if !(dk > 0.0 && dk <= k as f64) {
                return None;
            }
            d[k - 1] = dk;
        }
        Some(Discounts(d))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NgramEntry {
    pub log10_prob: f64,
    pub log10_backoff: f64,
}

/// Backoff n-gram model.
#[derive(Clone, Debug)]
pub struct ArpaModel {
    order: usize,
    vocab: Vocab,
    /// `ngrams[k - 1]`: k-gram entries.
    ngrams: Vec<HashMap<Vec<u32>, NgramEntry>>,
    discounts: Vec<Discounts>,
    warnings: Vec<String>,
}

/// Train an interpolated modified Kneser-Ney model and convert it to backoff form.
pub fn train_kn(counts: &CountTable) -> Result<ArpaModel> {
    let n_order = counts.order;
    let adjusted = counts.adjusted();
    let vocab = counts.vocab.clone();
    let bos = vocab.get(BOS).unwrap();
    let mut warnings = Vec::new();
    let discounts: Vec<Discounts> = (1..=n_order)
        .map(|k| {
            let coc = count_of_counts(&adjusted[k - 1]);
            Discounts::estimate(coc).unwrap_or_else(|| {
                let msg = format!(
                    "order {k}: degenerate counts-of-counts {coc:?}, using fixed discount {FALLBACK_DISCOUNT}"
                );
                log::warn!("{msg}");
                warnings.push(msg);
                Discounts([FALLBACK_DISCOUNT; 3])
            })
        })
        .collect();

    // Interpolated probabilities (natural scale) and per-context gammas.
    let mut probs: Vec<HashMap<Vec<u32>, f64>> = Vec::with_capacity(n_order);
    let mut gammas: Vec<HashMap<Vec<u32>, f64>> = Vec::with_capacity(n_order);
    for k in 1..=n_order {
        let table = &adjusted[k - 1];
        let d = discounts[k - 1];
        // Per-context total and discounted mass.
        let mut ctx: HashMap<&[u32], (u64, f64)> = HashMap::new();
        for (g, &c) in table {
            let e = ctx.entry(&g[..k - 1]).or_default();
            e.0 += c;
            e.1 += d.for_count(c);
        }
        let gamma: HashMap<Vec<u32>, f64> = ctx
            .iter()
            .map(|(h, &(total, mass))| (h.to_vec(), mass / total as f64))
            .collect();
        let predictable = (vocab.words.len() - 1) as f64;
        let mut p = HashMap::with_capacity(table.len() + 1);
        for (g, &c) in table {
            let (total, _) = ctx[&g[..k - 1]];
            let lower = if k == 1 {
                1.0 / predictable
            } else {
                probs[k - 2][&g[1..]]
            };
            let own = (c as f64 - d.for_count(c)) / total as f64;
            p.insert(g.clone(), own + gamma[&g[..k - 1]] * lower);
        }
        if k == 1 {
            // Every predictable token gets at least the uniform share.
            for (i, _) in vocab.words.iter().enumerate() {
                let id = i as u32;
                if id != bos {
                    p.entry(vec![id]).or_insert(gamma[&Vec::new()] / predictable);
                }
            }
        }
        probs.push(p);
        gammas.push(gamma);
    }

    let mut ngrams = Vec::with_capacity(n_order);
    for k in 1..=n_order {
        let mut entries: HashMap<Vec<u32>, NgramEntry> = probs[k - 1]
            .iter()
            .map(|(g, &p)| {
                let backoff = gammas.get(k).and_then(|m| m.get(g)).copied().unwrap_or(1.0);
                (
                    g.clone(),
                    NgramEntry {
                        log10_prob: p.log10(),
                        log10_backoff: backoff.log10(),
                    },
                )
            })
            .collect();
        if k == 1 {
            let backoff = gammas.get(1).and_then(|m| m.get(&vec![bos])).copied().unwrap_or(1.0);
            entries.insert(
                vec![bos],
                NgramEntry {
                    log10_prob: BOS_LOG10,
                    log10_backoff: backoff.log10(),
                },
            );
        }
        ngrams.push(entries);
    }
    Ok(ArpaModel {
        order: n_order,
        vocab,
        ngrams,
        discounts,
        warnings,
    })
}

impl ArpaModel {
    pub fn order(&self) -> usize {
        self.order
    }

    /// Discounts used per order (empty for models read from files).
    pub fn discounts(&self) -> &[Discounts] {
        &self.discounts
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn num_ngrams(&self, order: usize) -> usize {
        self.ngrams[order - 1].len()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.vocab.get(token).is_some()
    }

    /// Every token that can be predicted: the vocabulary minus `<s>`.
    pub fn predictable_vocab(&self) -> Vec<&str> {
        self.vocab
            .words
            .iter()
            .map(String::as_str)
            .filter(|w| *w != BOS)
            .collect()
    }

    /// Stored entry of an n-gram, if present.
    pub fn entry(&self, ngram: &[&str]) -> Option<NgramEntry> {
        let ids = ngram.iter().map(|w| self.vocab.get(w)).collect::<Option<Vec<_>>>()?;
        self.ngrams.get(ids.len().checked_sub(1)?)?.get(&ids).copied()
    }

    /// Observed contexts of order `k` n-grams, i.e. distinct `(k-1)`-token prefixes.
    pub fn contexts(&self, order: usize) -> Vec<Vec<String>> {
        let mut out: Vec<Vec<String>> = self.ngrams[order - 1]
            .keys()
            .map(|g| g[..order - 1].iter().map(|&i| self.vocab.words[i as usize].clone()).collect())
            .collect();
        out.sort();
        out.dedup();
        out
    }

    fn id_or_unk(&self, w: &str) -> Option<u32> {
        self.vocab.get(w).or_else(|| self.vocab.get(UNK))
    }

    /// `log10 p(token | context)`, using at most the last `order - 1` context tokens.
    pub fn score<S: AsRef<str>>(&self, context: &[S], token: &str) -> f64 {
        let Some(w) = self.id_or_unk(token) else {
            return MISSING_UNK_LOG10;
        };
        let keep = context.len().min(self.order - 1);
        let ctx: Vec<Option<u32>> = context[context.len() - keep..]
            .iter()
            .map(|c| self.id_or_unk(c.as_ref()))
            .collect();
        self.score_ids(&ctx, w)
    }

    fn score_ids(&self, ctx: &[Option<u32>], w: u32) -> f64 {
        let mut backoff = 0.0;
        for start in 0..=ctx.len() {
            let suffix = &ctx[start..];
            let Some(mut key) = suffix.iter().copied().collect::<Option<Vec<u32>>>() else {
                continue;
            };
            key.push(w);
            if let Some(e) = self.ngrams[key.len() - 1].get(&key) {
                return backoff + e.log10_prob;
            }
            key.pop();
            if !key.is_empty() {
                if let Some(e) = self.ngrams[key.len() - 1].get(&key) {
                    backoff += e.log10_backoff;
                }
            }
        }
        // Unreachable for trained models: every predictable token has a unigram.
        backoff + MISSING_UNK_LOG10
    }

    /// Log10 probability of a full sentence including `</s>`.
    pub fn sentence_log10<S: AsRef<str>>(&self, tokens: &[S]) -> f64 {
        let mut ctx: Vec<&str> = vec![BOS];
        let mut total = 0.0;
        for t in tokens.iter().map(AsRef::as_ref).chain(std::iter::once(EOS)) {
            total += self.score(&ctx, t);
            ctx.push(t);
        }
        total
    }

    /// Per-token perplexity (including one `</s>` per sentence).
    pub fn perplexity<S: AsRef<str>>(&self, corpus: &[Vec<S>]) -> f64 {
        let mut total = 0.0;
        let mut n = 0usize;
        for s in corpus.iter().filter(|s| !s.is_empty()) {
            total += self.sentence_log10(s);
            n += s.len() + 1;
        }
        10f64.powf(-total / n as f64)
    }

    /// `sum_w p(w | context)` over [`Self::predictable_vocab`].
    pub fn context_mass<S: AsRef<str>>(&self, context: &[S]) -> f64 {
        self.predictable_vocab()
            .iter()
            .map(|w| 10f64.powf(self.score(context, w)))
            .sum()
    }

    fn sorted_entries(&self, order: usize) -> Vec<(Vec<&str>, NgramEntry)> {
        let mut v: Vec<(Vec<&str>, NgramEntry)> = self.ngrams[order - 1]
            .iter()
            .map(|(g, e)| (g.iter().map(|&i| self.vocab.words[i as usize].as_str()).collect(), *e))
            .collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    fn from_entries(order: usize, sections: Vec<BTreeMap<Vec<String>, NgramEntry>>) -> Self {
        let mut vocab = Vocab::default();
        for g in sections[0].keys() {
            vocab.intern(&g[0]);
        }
        let ngrams = sections
            .into_iter()
            .map(|sec| {
                sec.into_iter()
                    .map(|(g, e)| (g.iter().map(|w| vocab.intern(w)).collect(), e))
                    .collect()
            })
            .collect();
        ArpaModel {
            order,
            vocab,
            ngrams,
            discounts: Vec::new(),
            warnings: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(lines: &[&str]) -> Vec<Vec<String>> {
        lines.iter().map(|l| Tokenization::Word.tokenize(l)).collect()
    }

    #[test]
    fn count_examples() {
        let c = count(&corpus(&["a b"]), 2).unwrap();
        let bigrams = c.ngrams(2);
        assert_eq!(
            bigrams,
            vec![
                (vec!["<s>".to_string(), "a".to_string()], 1),
                (vec!["a".to_string(), "b".to_string()], 1),
                (vec!["b".to_string(), "</s>".to_string()], 1),
            ]
        );
        let c = count(&corpus(&["a a a"]), 1).unwrap();
        assert_eq!(c.count(&["a"]), 3);
        assert!(count(&corpus(&[""]), 2).is_err());
        assert!(count(&corpus(&["a"]), 0).is_err());
    }

    #[test]
    fn continuation_counts_match_brute_force() {
        let lines = ["a b c", "b c", "c b a", "a c", "b b c"];
        let c = count(&corpus(&lines), 3).unwrap();
        // Recount distinct left neighbours directly from the padded text.
        for w in ["a", "b", "c", "</s>"] {
            let mut left = std::collections::HashSet::new();
            for l in &lines {
                let padded: Vec<&str> = std::iter::once("<s>")
                    .chain(l.split_whitespace())
                    .chain(std::iter::once("</s>"))
                    .collect();
                for win in padded.windows(2) {
                    if win[1] == w {
                        left.insert(win[0]);
                    }
                }
            }
            assert_eq!(c.continuation_count(&[w]), left.len() as u64, "{w}");
        }
        assert_eq!(c.continuation_count(&["b", "c"]), 3); // "a b c", "<s> b c", "b b c"
    }

    #[test]
    fn discount_formula() {
        let d = Discounts::estimate([10, 5, 3, 2]).unwrap();
        let y = 10.0 / 20.0;
        assert!((d.0[0] - (1.0 - 2.0 * y * 5.0 / 10.0)).abs() < 1e-15);
        assert!((d.0[1] - (2.0 - 3.0 * y * 3.0 / 5.0)).abs() < 1e-15);
        assert!((d.0[2] - (3.0 - 4.0 * y * 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(Discounts::estimate([3, 0, 1, 1]), None);
    }

    /// Interpolated KN evaluated by hand for the one-sentence corpus "a b" with
    /// the fixed 0.75 discount (every counts-of-counts table is degenerate).
    #[test]
    fn single_sentence_bigram_by_hand() {
        let c = count(&corpus(&["a b"]), 2).unwrap();
        let m = train_kn(&c).unwrap();
        assert_eq!(m.warnings().len(), 2);
        // Unigram adjusted counts are continuation counts: a<-{<s>}, b<-{a}, </s><-{b}.
        // Predictable vocab {</s>, <unk>, a, b}; gamma_1 = 3 * 0.75 / 3.
        let d: f64 = 0.75;
        let gamma1 = 3.0 * d / 3.0;
        let p1_b = (1.0 - d) / 3.0 + gamma1 / 4.0;
        // Context "a" has a single continuation b with raw count 1.
        let gamma_a = d / 1.0;
        let p_b_given_a = (1.0 - d) / 1.0 + gamma_a * p1_b;
        assert!((m.score(&["a"], "b") - p_b_given_a.log10()).abs() < 1e-12);
        // Unseen bigram "a a" backs off through gamma(a).
        let p1_a = (1.0 - d) / 3.0 + gamma1 / 4.0;
        assert!((m.score(&["a"], "a") - (gamma_a * p1_a).log10()).abs() < 1e-12);
        assert!((m.score::<&str>(&[], "<unk>") - (gamma1 / 4.0).log10()).abs() < 1e-12);
    }

    #[test]
    fn unigram_model_matches_hand_estimate() {
        let lines = ["a b a", "a c", "b"];
        let m = train_kn(&count(&corpus(&lines), 1).unwrap()).unwrap();
        // Raw unigram counts: a=3 b=2 c=1 </s>=3; counts-of-counts degenerate.
        let d: f64 = 0.75;
        let total = 9.0;
        let gamma = 4.0 * d / total;
        let uniform = 1.0 / 5.0; // </s>, <unk>, a, b, c
        for (w, c) in [("a", 3.0), ("b", 2.0), ("c", 1.0), ("</s>", 3.0)] {
            let expected = (c - d) / total + gamma * uniform;
            assert!((m.score(&["x", "y"], w) - expected.log10()).abs() < 1e-12, "{w}");
        }
    }

    #[test]
    fn every_context_normalizes() {
        let lines = [
            "the cat sat", "the cat ran", "a dog sat", "the dog ran far", "a cat sat down",
            "the bird flew", "a bird sat", "the cat sat down", "dog ran", "cat",
        ];
        let m = train_kn(&count(&corpus(&lines), 3).unwrap()).unwrap();
        for k in 1..=3 {
            for ctx in m.contexts(k) {
                let mass = m.context_mass(&ctx);
                assert!((mass - 1.0).abs() < 1e-8, "{ctx:?}: {mass}");
            }
        }
        assert!((m.context_mass(&["zebra", "the"]) - 1.0).abs() < 1e-8);
        assert!(m.score(&["the"], "zebra").is_finite());
    }

    #[test]
    fn char_tokenization_maps_spaces() {
        assert_eq!(Tokenization::Char.tokenize("ab c"), vec!["a", "b", "<sp>", "c"]);
        assert_eq!(Tokenization::Word.tokenize(" ab  c "), vec!["ab", "c"]);
    }
}
