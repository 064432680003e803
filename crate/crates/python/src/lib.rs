//! Python bindings. Matrices cross the boundary as lists of rows
//! (`[C][T]` floats); errors surface as `ValueError`.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use skipnet::blocks::ConnectivityKind;
use skipnet::ctc::{self, Alphabet};
use skipnet::decoder::{self, DecoderConfig, FusionUnit};
use skipnet::gradcheck;
use skipnet::lm::{self, ArpaModel, Tokenization};
use skipnet::metrics::{edit_distance_metrics, ErrorUnit};
use skipnet::model::{AcousticModel, ModelConfig};
use skipnet::synth::{self, SynthConfig};
use skipnet::train::{self, TrainConfig, TrainOutputs, Utterance};
use skipnet::Tensor;

fn err(e: skipnet::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || width == 0 {
        return Err(PyValueError::new_err("expected a non-empty list of non-empty rows"));
    }
    if rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Ok(Tensor::from_rows(&rows))
}

fn alphabet(symbols: &str) -> PyResult<Alphabet> {
    Alphabet::new(symbols.chars()).map_err(err)
}

fn tokenization(unit: &str) -> PyResult<Tokenization> {
    match unit {
        "char" => Ok(Tokenization::Char),
        "word" => Ok(Tokenization::Word),
        other => Err(PyValueError::new_err(format!("unit must be 'char' or 'word', got {other:?}"))),
    }
}

/// CTC negative log-likelihood and its gradient with respect to the log-probabilities.
#[pyfunction]
fn ctc_loss(logprobs: Vec<Vec<f64>>, target: Vec<usize>) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let (loss, grad) = ctc::ctc_loss(&matrix(logprobs)?, &target).map_err(err)?;
    Ok((loss, grad.to_rows()))
}

/// Path-enumeration oracle for `ctc_loss`.
#[pyfunction]
fn ctc_brute_force(logprobs: Vec<Vec<f64>>, target: Vec<usize>) -> PyResult<f64> {
    ctc::ctc_brute_force(&matrix(logprobs)?, &target).map_err(err)
}

#[pyfunction]
fn greedy_decode(logprobs: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
    Ok(ctc::greedy_decode(&matrix(logprobs)?))
}

/// Returns `(transcript, fused score)`.
#[pyfunction]
#[pyo3(signature = (logprobs, symbols, beam_width=32, lm=None, lm_weight=1.0, insertion_bonus=1.5, unit="char"))]
fn prefix_beam_search(
    logprobs: Vec<Vec<f64>>,
    symbols: &str,
    beam_width: usize,
    lm: Option<&LanguageModel>,
    lm_weight: f64,
    insertion_bonus: f64,
    unit: &str,
) -> PyResult<(String, f64)> {
    let fusion = match tokenization(unit)? {
        Tokenization::Char => FusionUnit::Char,
        Tokenization::Word => FusionUnit::Word,
    };
    let cfg = DecoderConfig {
        beam_width,
        lm_weight,
        insertion_bonus,
        fusion,
        lm: lm.map(|l| &l.inner),
    };
    let d = decoder::prefix_beam_search(&matrix(logprobs)?, &alphabet(symbols)?, &cfg).map_err(err)?;
    Ok((d.text, d.score))
}

/// Best transcript by enumerating every label sequence (acoustic score only).
#[pyfunction]
fn exhaustive_decode(logprobs: Vec<Vec<f64>>, symbols: &str) -> PyResult<(String, f64)> {
    let d = decoder::exhaustive_decode(&matrix(logprobs)?, &alphabet(symbols)?, &DecoderConfig::acoustic_only(1))
        .map_err(err)?;
    Ok((d.text, d.score))
}

/// `(edits, reference length, rate)` at character or word level.
#[pyfunction]
#[pyo3(signature = (reference, hypothesis, unit="char"))]
fn error_rate(reference: &str, hypothesis: &str, unit: &str) -> PyResult<(usize, usize, f64)> {
    let unit = match unit {
        "char" => ErrorUnit::Char,
        "word" => ErrorUnit::Word,
        other => return Err(PyValueError::new_err(format!("unit must be 'char' or 'word', got {other:?}"))),
    };
    edit_distance_metrics(reference, hypothesis, unit).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (epoch, lr0=0.1, drops=vec![82, 123], factor=10.0))]
fn lr_at(epoch: usize, lr0: f64, drops: Vec<usize>, factor: f64) -> f64 {
    let cfg = TrainConfig {
        lr0,
        lr_drop_epochs: drops,
        lr_drop_factor: factor,
        ..Default::default()
    };
    train::lr_at(&cfg, epoch)
}

/// Write the synthetic tone corpus; returns `(id, wav path, transcript)` rows.
#[pyfunction]
#[pyo3(signature = (out_dir, num_utterances=20, seed=7))]
fn synth_data(out_dir: PathBuf, num_utterances: usize, seed: u64) -> PyResult<Vec<(String, String, String)>> {
    let cfg = SynthConfig {
        num_utterances,
        seed,
        ..Default::default()
    };
    let entries = synth::synth_data(&out_dir, &cfg).map_err(err)?;
    Ok(entries
        .into_iter()
        .map(|e| (e.id, e.path.display().to_string(), e.transcript))
        .collect())
}

/// Every finite-difference suite: `(name, max relative error, passed)`.
#[pyfunction]
fn gradcheck_all() -> PyResult<Vec<(String, f64, bool)>> {
    let results = gradcheck::all_suites().map_err(err)?;
    Ok(results.into_iter().map(|r| (r.name.clone(), r.max_rel_error, r.passed())).collect())
}

/// Modified Kneser-Ney n-gram model in ARPA backoff form.
#[pyclass]
struct LanguageModel {
    inner: ArpaModel,
}

#[pymethods]
impl LanguageModel {
    #[staticmethod]
    #[pyo3(signature = (sentences, order=4, unit="char"))]
    fn train(sentences: Vec<String>, order: usize, unit: &str) -> PyResult<Self> {
        let unit = tokenization(unit)?;
        let corpus: Vec<Vec<String>> = sentences.iter().map(|s| unit.tokenize(s)).collect();
        let inner = lm::train_kn(&lm::count(&corpus, order).map_err(err)?).map_err(err)?;
        Ok(LanguageModel { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(LanguageModel {
            inner: lm::arpa_read(&path).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_arpa(text: &str) -> PyResult<Self> {
        Ok(LanguageModel {
            inner: lm::arpa_read_str(text, "<string>").map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        lm::arpa_write(&self.inner, &path).map_err(err)
    }

    fn to_arpa(&self) -> String {
        lm::arpa_write_string(&self.inner)
    }

    #[getter]
    fn order(&self) -> usize {
        self.inner.order()
    }

    /// `log10 p(token | context)`.
    fn score(&self, context: Vec<String>, token: &str) -> f64 {
        self.inner.score(&context, token)
    }

    /// Total probability over the predictable vocabulary after `context`.
    fn context_mass(&self, context: Vec<String>) -> f64 {
        self.inner.context_mass(&context)
    }

    #[pyo3(signature = (sentences, unit="char"))]
    fn perplexity(&self, sentences: Vec<String>, unit: &str) -> PyResult<f64> {
        let unit = tokenization(unit)?;
        let corpus: Vec<Vec<String>> = sentences.iter().map(|s| unit.tokenize(s)).collect();
        Ok(self.inner.perplexity(&corpus))
    }

    fn warnings(&self) -> Vec<String> {
        self.inner.warnings().to_vec()
    }
}

/// Fully convolutional CTC acoustic model.
#[pyclass]
struct Model {
    inner: AcousticModel,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (connectivity="plain", input_features=257, width=32, alphabet_size=6, seed=0))]
    fn new(connectivity: &str, input_features: usize, width: usize, alphabet_size: usize, seed: u64) -> PyResult<Self> {
        let connectivity: ConnectivityKind = connectivity.parse().map_err(err)?;
        let cfg = ModelConfig {
            connectivity,
            input_features,
            width,
            alphabet_size,
            ..Default::default()
        };
        Ok(Model {
            inner: AcousticModel::new(cfg, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model {
            inner: AcousticModel::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn connectivity(&self) -> String {
        self.inner.connectivity().to_string()
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn output_length(&self, frames: usize) -> usize {
        self.inner.output_length(frames)
    }

    /// Eval-mode log-probabilities, `[|A| + 1][T']`.
    fn infer(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(self.inner.infer(&matrix(features)?).map_err(err)?.to_rows())
    }

    /// Train on `(features, transcript)` pairs in place; returns the train
    /// CER after each epoch.
    #[pyo3(signature = (features, transcripts, symbols, epochs=50, lr0=0.05, batch_size=4, seed=0, out_dir=None))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        &mut self,
        features: Vec<Vec<Vec<f64>>>,
        transcripts: Vec<String>,
        symbols: &str,
        epochs: usize,
        lr0: f64,
        batch_size: usize,
        seed: u64,
        out_dir: Option<PathBuf>,
    ) -> PyResult<Vec<f64>> {
        if features.len() != transcripts.len() {
            return Err(PyValueError::new_err("features and transcripts differ in length"));
        }
        let alphabet = alphabet(symbols)?;
        let utts = features
            .into_iter()
            .zip(&transcripts)
            .enumerate()
            .map(|(i, (f, t))| Utterance::new(format!("utt{i:04}"), matrix(f)?, t, &alphabet).map_err(err))
            .collect::<PyResult<Vec<_>>>()?;
        let cfg = TrainConfig {
            lr0,
            epochs,
            batch_size,
            seed,
            lr_drop_epochs: Vec::new(),
            ..Default::default()
        };
        let outputs = match &out_dir {
            Some(d) => TrainOutputs::in_dir(d),
            None => TrainOutputs::default(),
        };
        let report = train::train(&mut self.inner, &utts, &[], &alphabet, &cfg, &outputs).map_err(err)?;
        if let Some(h) = report.halted {
            return Err(PyValueError::new_err(h));
        }
        Ok(report.rows.iter().filter(|r| r.split == "train").map(|r| r.cer).collect())
    }
}

#[pymodule]
fn pyskipnet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(ctc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ctc_brute_force, m)?)?;
    m.add_function(wrap_pyfunction!(greedy_decode, m)?)?;
    m.add_function(wrap_pyfunction!(prefix_beam_search, m)?)?;
    m.add_function(wrap_pyfunction!(exhaustive_decode, m)?)?;
    m.add_function(wrap_pyfunction!(error_rate, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(synth_data, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck_all, m)?)?;
    m.add_class::<LanguageModel>()?;
    m.add_class::<Model>()?;
    Ok(())
}
