//! Pipeline stages shared by the CLI and the tests: loading corpora,
//! featurizing, LM training, decoding, and the four-variant comparison.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::blocks::ConnectivityKind;
use crate::config::RunConfig;
use crate::ctc::{greedy_decode, Alphabet};
use crate::decoder::{prefix_beam_search, DecoderConfig};
use crate::error::{Error, Result};
use crate::features::{
    normalize, read_features, read_manifest, read_wav, spectrogram, write_features, write_manifest, FeatureMatrix,
    FeatureParams, ManifestEntry,
};
use crate::lm::{arpa_read, count, train_kn, ArpaModel, Tokenization};
use crate::metrics::Scores;
use crate::model::AcousticModel;
use crate::train::{train, TrainOutputs, TrainReport, Utterance};

pub const FEATURE_EXT: &str = "feat";
pub const TABLE_HEADER: &str = "architecture,wer,cer,greedy_wer,greedy_cer,params,epochs,train_cer";

/// Features for one manifest entry: read from a cache file (`.feat`) or
/// computed from a WAV file.
pub fn load_features(path: &Path, params: &FeatureParams, normalized: bool) -> Result<FeatureMatrix> {
    if path.extension().is_some_and(|e| e == FEATURE_EXT) {
        return read_features(path);
    }
    let spec = spectrogram(&read_wav(path)?, params)?;
    if normalized {
        normalize(&spec)
    } else {
        Ok(spec)
    }
}

pub fn load_corpus(manifest: &Path, cfg: &RunConfig, alphabet: &Alphabet) -> Result<Vec<Utterance>> {
    let entries = read_manifest(manifest)?;
    entries
        .par_iter()
        .map(|e| {
            let f = load_features(&e.path, &cfg.features, cfg.normalize_features)?;
            if f.features.shape()[0] != cfg.model.input_features {
                return Err(Error::config(
                    "model.input_features",
                    format!("{} has {} feature rows", e.path.display(), f.features.shape()[0]),
                ));
            }
            Utterance::new(e.id.clone(), f.features, &e.transcript, alphabet)
        })
        .collect()
}

/// Write one feature cache per utterance plus a manifest pointing at them.
pub fn featurize(manifest: &Path, out_dir: &Path, cfg: &RunConfig) -> Result<Vec<ManifestEntry>> {
    cfg.features.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let entries = read_manifest(manifest)?;
    let out: Vec<ManifestEntry> = entries
        .par_iter()
        .map(|e| {
            let f = load_features(&e.path, &cfg.features, cfg.normalize_features)?;
            let path = out_dir.join(format!("{}.{FEATURE_EXT}", e.id));
            write_features(&path, &f)?;
            Ok(ManifestEntry {
                id: e.id.clone(),
                path,
                transcript: e.transcript.clone(),
            })
        })
        .collect::<Result<_>>()?;
    write_manifest(&out_dir.join("manifest.tsv"), &out)?;
    Ok(out)
}

pub fn train_lm<S: AsRef<str>>(texts: &[S], tokenization: Tokenization, order: usize) -> Result<ArpaModel> {
    let corpus: Vec<Vec<String>> = texts.iter().map(|t| tokenization.tokenize(t.as_ref())).collect();
    train_kn(&count(&corpus, order)?)
}

/// LM symbols must be producible by the acoustic model.
pub fn check_lm_alphabet(lm: &ArpaModel, alphabet: &Alphabet, tokenization: Tokenization) -> Result<()> {
    if tokenization != Tokenization::Char {
        return Ok(());
    }
    let known: Vec<String> = alphabet.symbols().iter().map(|&c| crate::lm::char_token(c)).collect();
    for w in lm.predictable_vocab() {
        if w.starts_with('<') && w.ends_with('>') && w.len() > 1 && w != crate::lm::SPACE {
            continue;
        }
        if !known.iter().any(|k| k == w) {
            return Err(Error::config("decoder", format!("LM token {w:?} is not in the alphabet")));
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Hypothesis {
    pub id: String,
    pub reference: String,
    pub greedy: String,
    pub beam: String,
}

pub fn decode_all(model: &AcousticModel, utts: &[Utterance], alphabet: &Alphabet, cfg: &DecoderConfig) -> Result<Vec<Hypothesis>> {
    utts.par_iter()
        .map(|u| {
            let lp = model.infer(&u.features)?;
            Ok(Hypothesis {
                id: u.id.clone(),
                reference: u.transcript.clone(),
                greedy: alphabet.decode(&greedy_decode(&lp)),
                beam: prefix_beam_search(&lp, alphabet, cfg)?.text,
            })
        })
        .collect()
}

/// `utt-id<TAB>transcript` lines.
pub fn write_hypotheses(path: &Path, rows: &[(String, String)]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for (id, text) in rows {
        writeln!(f, "{id}\t{text}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// `utt-id<TAB>transcript` lines, or three-column manifest lines whose last
/// field is the transcript.
pub fn read_transcripts(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let fields: Vec<&str> = l.split('\t').collect();
            match fields.as_slice() {
                [id, text] | [id, _, text] => Ok((id.to_string(), text.to_string())),
                _ => Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    msg: "expected utt-id<TAB>transcript".into(),
                }),
            }
        })
        .collect()
}

/// Corpus CER/WER of hypotheses against references, matched by utterance id.
pub fn score_files(reference: &[(String, String)], hypothesis: &[(String, String)]) -> Result<Scores> {
    let hyp: std::collections::HashMap<&str, &str> =
        hypothesis.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    let mut scores = Scores::default();
    for (id, r) in reference {
        let h = hyp
            .get(id.as_str())
            .ok_or_else(|| Error::Invalid(format!("no hypothesis for utterance {id}")))?;
        scores.add(r, h);
    }
    Ok(scores)
}

#[derive(Clone, Debug)]
pub struct VariantSummary {
    pub kind: ConnectivityKind,
    pub params: usize,
    pub report: TrainReport,
    pub greedy: Scores,
    pub beam: Scores,
    pub hypotheses: Vec<Hypothesis>,
    pub dir: PathBuf,
}

impl VariantSummary {
    pub fn table_row(&self) -> Result<String> {
        Ok(format!(
            "{},{},{},{},{},{},{},{}",
            self.kind,
            self.beam.wer()?,
            self.beam.cer()?,
            self.greedy.wer()?,
            self.greedy.cer()?,
            self.params,
            self.report.epochs_run,
            self.report.final_train_cer
        ))
    }
}

/// Train and decode one connectivity variant into `dir`.
pub fn run_variant(
    cfg: &RunConfig,
    kind: ConnectivityKind,
    train_set: &[Utterance],
    eval_set: &[Utterance],
    lm: Option<&ArpaModel>,
    dir: &Path,
) -> Result<VariantSummary> {
    let alphabet = cfg.alphabet()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.connectivity = kind;
    let mut model = AcousticModel::new(model_cfg, cfg.train.seed)?;
    let valid: &[Utterance] = if std::ptr::eq(train_set, eval_set) { &[] } else { eval_set };
    let report = train(&mut model, train_set, valid, &alphabet, &cfg.train, &TrainOutputs::in_dir(dir))?;
    if let Some(h) = &report.halted {
        return Err(Error::Invalid(format!("{kind}: training halted: {h}")));
    }
    let dec = cfg.decoder.with_lm(lm);
    let hypotheses = decode_all(&model, eval_set, &alphabet, &dec)?;
    let mut greedy = Scores::default();
    let mut beam = Scores::default();
    for h in &hypotheses {
        greedy.add(&h.reference, &h.greedy);
        beam.add(&h.reference, &h.beam);
    }
    let rows = |f: fn(&Hypothesis) -> &String| -> Vec<(String, String)> {
        hypotheses.iter().map(|h| (h.id.clone(), f(h).clone())).collect()
    };
    write_hypotheses(&dir.join("greedy.hyp"), &rows(|h| &h.greedy))?;
    write_hypotheses(&dir.join("beam.hyp"), &rows(|h| &h.beam))?;
    Ok(VariantSummary {
        kind,
        params: model.param_count(),
        report,
        greedy,
        beam,
        hypotheses,
        dir: dir.to_path_buf(),
    })
}

/// Train every connectivity kind from one config and write `table.csv`.
/// Evaluation uses the validation manifest when given, the training set otherwise.
pub fn run_all_variants(cfg: &RunConfig, kinds: &[ConnectivityKind], out_dir: &Path) -> Result<Vec<VariantSummary>> {
    cfg.validate()?;
    let alphabet = cfg.alphabet()?;
    let train_manifest = cfg
        .paths
        .train_manifest
        .as_deref()
        .ok_or_else(|| Error::config("paths.train_manifest", "required"))?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    cfg.embed(out_dir)?;
    let train_set = load_corpus(train_manifest, cfg, &alphabet)?;
    let valid_set = match &cfg.paths.valid_manifest {
        Some(p) => Some(load_corpus(p, cfg, &alphabet)?),
        None => None,
    };
    let tokenization = cfg.decoder.tokenization();
    let lm = match &cfg.paths.lm {
        Some(p) => arpa_read(p)?,
        None => {
            let texts: Vec<&str> = train_set.iter().map(|u| u.transcript.as_str()).collect();
            let lm = train_lm(&texts, tokenization, cfg.decoder.lm_order)?;
            crate::lm::arpa_write(&lm, &out_dir.join("lm.arpa"))?;
            lm
        }
    };
    check_lm_alphabet(&lm, &alphabet, tokenization)?;
    let eval_set: &[Utterance] = valid_set.as_deref().unwrap_or(&train_set);
    let mut out = Vec::new();
    for &kind in kinds {
        log::info!("training {kind}");
        out.push(run_variant(cfg, kind, &train_set, eval_set, Some(&lm), &out_dir.join(kind.as_str()))?);
    }
    write_table(&out_dir.join("table.csv"), &out)?;
    Ok(out)
}

pub fn write_table(path: &Path, rows: &[VariantSummary]) -> Result<()> {
    let mut text = format!("{TABLE_HEADER}\n");
    for r in rows {
        text.push_str(&r.table_row()?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
