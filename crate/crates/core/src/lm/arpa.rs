use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{ArpaModel, NgramEntry};
use crate::error::{Error, Result};

/// Render a model in ARPA format. Numbers use the shortest representation that
/// parses back to the same `f64`, so a write/read cycle is lossless.
pub fn arpa_write_string(model: &ArpaModel) -> String {
    let mut out = String::from("\n\\data\\\n");
    for k in 1..=model.order {
        writeln!(out, "ngram {k}={}", model.num_ngrams(k)).unwrap();
    }
    for k in 1..=model.order {
        writeln!(out, "\n\\{k}-grams:").unwrap();
        for (words, e) in model.sorted_entries(k) {
            write!(out, "{}\t{}", e.log10_prob, words.join(" ")).unwrap();
            if k < model.order {
                write!(out, "\t{}", e.log10_backoff).unwrap();
            }
            out.push('\n');
        }
    }
    out.push_str("\n\\end\\\n");
    out
}

pub fn arpa_write(model: &ArpaModel, path: &Path) -> Result<()> {
    std::fs::write(path, arpa_write_string(model)).map_err(|e| Error::io(path, e))
}

pub fn arpa_read(path: &Path) -> Result<ArpaModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    arpa_read_str(&text, &path.display().to_string())
}

/// Parse ARPA text. `source` names the input in error messages.
pub fn arpa_read_str(text: &str, source: &str) -> Result<ArpaModel> {
    let err = |line: usize, msg: String| Error::Parse {
        path: source.to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));

    // Header.
    let mut declared: Vec<usize> = Vec::new();
    let mut in_data = false;
    let mut pending: Option<(usize, usize)> = None;
    for (no, line) in lines.by_ref() {
        if line.is_empty() {
            continue;
        }
        if !in_data {
            if line == "\\data\\" {
                in_data = true;
                continue;
            }
            return Err(err(no, format!("expected \\data\\, found {line:?}")));
        }
        if let Some(rest) = line.strip_prefix("ngram ") {
            let (k, n) = rest
                .split_once('=')
                .ok_or_else(|| err(no, format!("malformed count line {line:?}")))?;
            let k: usize = k.trim().parse().map_err(|_| err(no, format!("bad order in {line:?}")))?;
            let n: usize = n.trim().parse().map_err(|_| err(no, format!("bad count in {line:?}")))?;
            if k != declared.len() + 1 {
                return Err(err(no, format!("expected ngram {}, found order {k}", declared.len() + 1)));
            }
            declared.push(n);
            continue;
        }
        pending = Some((no, section_order(line).ok_or_else(|| err(no, format!("unexpected line {line:?}")))?));
        break;
    }
    if declared.is_empty() {
        return Err(err(0, "no ngram counts declared".into()));
    }
    let order = declared.len();

    let mut sections: Vec<BTreeMap<Vec<String>, NgramEntry>> = vec![BTreeMap::new(); order];
    let mut current = pending.map(|(_, k)| k);
    let mut ended = false;
    let mut last_no = 0;
    for (no, line) in lines {
        last_no = no;
        if line.is_empty() {
            continue;
        }
        if line == "\\end\\" {
            ended = true;
            break;
        }
        if line.starts_with('\\') {
            let k = section_order(line).ok_or_else(|| err(no, format!("unexpected line {line:?}")))?;
            current = Some(k);
            continue;
        }
        let k = current.ok_or_else(|| err(no, "n-gram outside a section".into()))?;
        if k == 0 || k > order {
            return Err(err(no, format!("section {k} not declared in header")));
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != k + 1 && fields.len() != k + 2 {
            return Err(err(no, format!("expected {k} tokens with a probability and optional backoff")));
        }
        let log10_prob: f64 = fields[0]
            .parse()
            .map_err(|_| err(no, format!("bad probability {:?}", fields[0])))?;
        let log10_backoff: f64 = match fields.get(k + 1) {
            Some(b) => b.parse().map_err(|_| err(no, format!("bad backoff {b:?}")))?,
            None => 0.0,
        };
        let words: Vec<String> = fields[1..=k].iter().map(|s| s.to_string()).collect();
        if sections[k - 1]
            .insert(words, NgramEntry { log10_prob, log10_backoff })
            .is_some()
        {
            return Err(err(no, "duplicate n-gram".into()));
        }
    }
    if !ended {
        return Err(err(last_no, "missing \\end\\".into()));
    }
    for (k, (sec, &n)) in sections.iter().zip(&declared).enumerate() {
        if sec.len() != n {
            return Err(err(0, format!("header declares {n} {}-grams, found {}", k + 1, sec.len())));
        }
    }
    for (k, sec) in sections.iter().enumerate().skip(1) {
        for g in sec.keys() {
            if !sections[0].contains_key(&g[k..]) || g.iter().any(|w| !sections[0].contains_key(std::slice::from_ref(w))) {
                return Err(err(0, format!("n-gram {g:?} uses a token without a unigram")));
            }
        }
    }
    Ok(ArpaModel::from_entries(order, sections))
}

fn section_order(line: &str) -> Option<usize> {
    line.strip_prefix('\\')?.strip_suffix("-grams:")?.parse().ok()
}

#[cfg(test)]
mod tests {
    use super::super::{count, train_kn, Tokenization};
    use super::*;

    const KENLM_STYLE: &str = "
\\data\\
ngram 1=5
ngram 2=4

\\1-grams:
-1.2041200\t<unk>\t0
0\t<s>\t-0.30103
-0.60206\t</s>
-0.47712\ta\t-0.17609
-0.69897\tb\t-0.22185

\\2-grams:
-0.30103\t<s> a
-0.12494\ta b
-0.39794\tb </s>
-0.52288\ta </s>

\\end\\
";

    #[test]
    fn reads_external_style_file() {
        let m = arpa_read_str(KENLM_STYLE, "fixture").unwrap();
        assert_eq!(m.order(), 2);
        assert_eq!(m.num_ngrams(1), 5);
        assert!((m.score(&["a"], "b") + 0.12494).abs() < 1e-12);
        // Backoff: b(a) + p(a) for unseen "a a".
        assert!((m.score(&["a"], "a") - (-0.17609 - 0.47712)).abs() < 1e-12);
        // Missing backoff on a unigram means 0.
        assert!((m.score(&["</s>"], "a") + 0.47712).abs() < 1e-12);
        // Unknown words map to <unk>.
        assert!((m.score(&["zzz"], "qqq") + 1.20412).abs() < 1e-12);
    }

    #[test]
    fn write_read_is_lossless() {
        let lines = ["the cat sat", "a cat ran", "the dog sat down", "dog ran"];
        let corpus: Vec<Vec<String>> = lines.iter().map(|l| Tokenization::Word.tokenize(l)).collect();
        let m = train_kn(&count(&corpus, 3).unwrap()).unwrap();
        let text = arpa_write_string(&m);
        let back = arpa_read_str(&text, "mem").unwrap();
        for k in 1..=3 {
            assert_eq!(back.num_ngrams(k), m.num_ngrams(k));
            for (g, e) in m.sorted_entries(k) {
                let got = back.entry(&g).unwrap();
                assert_eq!(got.log10_prob.to_bits(), e.log10_prob.to_bits());
                if k < 3 {
                    assert_eq!(got.log10_backoff.to_bits(), e.log10_backoff.to_bits());
                }
            }
        }
        assert_eq!(arpa_write_string(&back), text);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let bad = KENLM_STYLE.replace("-0.12494\ta b", "oops\ta b");
        match arpa_read_str(&bad, "f") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 15),
            other => panic!("{other:?}"),
        }
        let short = KENLM_STYLE.replace("ngram 2=4", "ngram 2=5");
        assert!(matches!(arpa_read_str(&short, "f"), Err(Error::Parse { .. })));
        let unterminated = KENLM_STYLE.replace("\\end\\", "");
        assert!(matches!(arpa_read_str(&unterminated, "f"), Err(Error::Parse { .. })));
        assert!(matches!(arpa_read_str("hello", "f"), Err(Error::Parse { line: 1, .. })));
    }
}
