//! SGD training with a step learning-rate schedule.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_log_prob, greedy_decode, min_frames, Alphabet};
use crate::error::{Error, Result};
use crate::metrics::Scores;
use crate::model::AcousticModel;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "epoch,split,loss,cer,wer,lr,wall_s";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Stop once the training-set CER is at or below this value.
    pub target_train_cer: Option<f64>,
    /// Process the utterances of a batch on several threads. The reduction
    /// order is fixed, so results do not depend on the thread count.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.1,
            momentum: 0.9,
            lr_drop_epochs: vec![82, 123],
            lr_drop_factor: 10.0,
            epochs: 200,
            batch_size: 4,
            seed: 0,
            clip_norm: Some(5.0),
            target_train_cer: None,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config("train.lr0", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must be in [0, 1)"));
        }
        if !(self.lr_drop_factor > 1.0 && self.lr_drop_factor.is_finite()) {
            return Err(Error::config("train.lr_drop_factor", "must be greater than 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("train.clip_norm", "must be positive"));
            }
        }
        Ok(())
    }
}

/// `lr0 / factor^(number of drop epochs <= epoch)`.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    let drops = cfg.lr_drop_epochs.iter().filter(|&&d| d <= epoch).count();
    cfg.lr0 / cfg.lr_drop_factor.powi(drops as i32)
}

/// Momentum buffers, one per parameter.
#[derive(Clone, Debug, Default)]
pub struct SgdState {
    velocity: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Clip the accumulated gradients by global norm, then
/// `v = momentum * v + g; p -= lr * v`. Nothing changes if a gradient is not finite.
pub fn sgd_step(
    params: &mut ParamStore,
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    clip: Option<f64>,
) -> Result<StepReport> {
    if params.iter().any(|p| !p.grad.is_finite()) {
        return Err(Error::NonFinite { op: "sgd_step" });
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    }
    if state.velocity.len() != params.len() {
        return Err(Error::dim("sgd_step", "optimizer state does not match parameters"));
    }
    let norm = params
        .iter()
        .map(|p| p.grad.data().iter().map(|g| g * g).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    let scale = match clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    for (p, v) in params.iter_mut().zip(&mut state.velocity) {
        if v.shape() != p.value.shape() {
            return Err(Error::dim("sgd_step", format!("velocity shape mismatch for {}", p.name)));
        }
        for ((w, vel), g) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(p.grad.data()) {
            *vel = momentum * *vel + scale * g;
            *w -= lr * *vel;
        }
    }
    Ok(StepReport {
        grad_norm: norm,
        clipped: scale < 1.0,
    })
}

/// A featurized utterance with its encoded transcript.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub features: Tensor,
    pub target: Vec<usize>,
    pub transcript: String,
}

impl Utterance {
    pub fn new(id: impl Into<String>, features: Tensor, transcript: &str, alphabet: &Alphabet) -> Result<Self> {
        Ok(Utterance {
            id: id.into(),
            features,
            target: alphabet.encode(transcript)?.indices,
            transcript: transcript.to_string(),
        })
    }

    pub fn frames(&self) -> usize {
        self.features.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub cer: f64,
    pub wer: f64,
    pub lr: f64,
    pub wall_s: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.epoch, self.split, self.loss, self.cer, self.wer, self.lr, self.wall_s
        )
    }
}

/// Where training writes its artifacts. Any field may be absent.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub metrics_csv: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
}

impl TrainOutputs {
    pub fn in_dir(dir: &Path) -> Self {
        TrainOutputs {
            metrics_csv: Some(dir.join("metrics.csv")),
            best_checkpoint: Some(dir.join("best.ckpt")),
            last_checkpoint: Some(dir.join("last.ckpt")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub rows: Vec<MetricsRow>,
    pub epochs_run: usize,
    pub best_wer: f64,
    pub final_train_cer: f64,
    pub skipped: Vec<String>,
    /// Set when training stopped because the loss diverged. The model is
    /// restored to the last epoch that finished cleanly.
    pub halted: Option<String>,
}

/// Eval-mode loss and greedy-decoding error rates over a set of utterances.
pub fn evaluate(model: &AcousticModel, utts: &[Utterance], alphabet: &Alphabet, parallel: bool) -> Result<(f64, Scores)> {
    let run = |u: &Utterance| -> Result<(f64, String)> {
        let lp = model.infer(&u.features)?;
        let loss = -ctc_log_prob(&lp, &u.target)?;
        Ok((loss, alphabet.decode(&greedy_decode(&lp))))
    };
    let results: Vec<Result<(f64, String)>> = if parallel {
        utts.par_iter().map(run).collect()
    } else {
        utts.iter().map(run).collect()
    };
    let mut scores = Scores::default();
    let mut total = 0.0;
    for (u, r) in utts.iter().zip(results) {
        let (loss, hyp) = r?;
        total += loss;
        scores.add(&u.transcript, &hyp);
    }
    Ok((total / utts.len().max(1) as f64, scores))
}

fn batches(utts: &[Utterance], batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..utts.len()).collect();
    order.sort_by_key(|&i| (utts[i].frames(), i));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Train `model` in place. Utterances whose transcript cannot fit in the
/// model's output length are skipped with a warning.
pub fn train(
    model: &mut AcousticModel,
    train_set: &[Utterance],
    valid_set: &[Utterance],
    alphabet: &Alphabet,
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainReport> {
    cfg.validate()?;
    if model.config().alphabet_size != alphabet.len() {
        return Err(Error::config(
            "model.alphabet_size",
            format!("{} does not match the {}-symbol alphabet", model.config().alphabet_size, alphabet.len()),
        ));
    }
    let mut skipped = Vec::new();
    let usable: Vec<Utterance> = train_set
        .iter()
        .filter(|u| {
            let ok = u.features.shape()[0] == model.config().input_features
                && min_frames(&u.target) <= model.output_length(u.frames());
            if !ok {
                log::warn!("skipping {}: {} frames cannot emit {:?}", u.id, u.frames(), u.transcript);
                skipped.push(u.id.clone());
            }
            ok
        })
        .cloned()
        .collect();
    if usable.is_empty() {
        return Err(Error::Invalid("no trainable utterances".into()));
    }
    let valid: Vec<Utterance> = valid_set
        .iter()
        .filter(|u| min_frames(&u.target) <= model.output_length(u.frames()))
        .cloned()
        .collect();

    let mut csv = match &outputs.metrics_csv {
        Some(p) => {
            let f = File::create(p).map_err(|e| Error::io(p, e))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "{METRICS_HEADER}").map_err(|e| Error::io(p, e))?;
            Some((w, p.clone()))
        }
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = SgdState::default();
    let mut batch_list = batches(&usable, cfg.batch_size);
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut best_wer = f64::INFINITY;
    let mut last_good = model.clone();
    let mut halted = None;
    let mut final_train_cer = f64::NAN;
    let mut epochs_run = 0;

    'epochs: for epoch in 1..=cfg.epochs {
        let lr = lr_at(cfg, epoch);
        batch_list.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in &batch_list {
            let items: Vec<(&Tensor, &[usize])> =
                batch.iter().map(|&i| (&usable[i].features, usable[i].target.as_slice())).collect();
            let g = match model.batch_loss_and_grads(&items) {
                Ok(g) if g.loss.is_finite() => g,
                Ok(_) | Err(Error::NonFinite { .. }) => {
                    halted = Some(format!("loss diverged in epoch {epoch}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            epoch_loss += g.loss * batch.len() as f64;
            model.params_mut().zero_grad();
            model.params_mut().accumulate_grads(&g.grads, 1.0)?;
            model.apply_batch_stats(&g.batch_stats);
            match sgd_step(model.params_mut(), &mut state, lr, cfg.momentum, cfg.clip_norm) {
                Ok(_) => {}
                Err(Error::NonFinite { .. }) => {
                    halted = Some(format!("non-finite gradient in epoch {epoch}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        epochs_run = epoch;

        let (_, train_scores) = evaluate(model, &usable, alphabet, cfg.parallel)?;
        let train_row = MetricsRow {
            epoch,
            split: "train".into(),
            loss: epoch_loss / usable.len() as f64,
            cer: train_scores.cer()?,
            wer: train_scores.wer()?,
            lr,
            wall_s: start.elapsed().as_secs_f64(),
        };
        final_train_cer = train_row.cer;
        let mut epoch_rows = vec![train_row];
        if !valid.is_empty() {
            let (loss, scores) = evaluate(model, &valid, alphabet, cfg.parallel)?;
            epoch_rows.push(MetricsRow {
                epoch,
                split: "valid".into(),
                loss,
                cer: scores.cer()?,
                wer: scores.wer()?,
                lr,
                wall_s: start.elapsed().as_secs_f64(),
            });
        }
        let selection_wer = epoch_rows.last().unwrap().wer;
        if let Some((w, p)) = &mut csv {
            for r in &epoch_rows {
                writeln!(w, "{}", r.to_csv()).map_err(|e| Error::io(&*p, e))?;
            }
            w.flush().map_err(|e| Error::io(&*p, e))?;
        }
        log::info!(
            "epoch {epoch}: loss {:.4} train cer {:.4} lr {lr}",
            epoch_rows[0].loss,
            epoch_rows[0].cer
        );
        rows.extend(epoch_rows);
        if !epoch_loss.is_finite() {
            halted = Some(format!("loss diverged in epoch {epoch}"));
            break;
        }
        last_good = model.clone();
        if selection_wer < best_wer {
            best_wer = selection_wer;
            if let Some(p) = &outputs.best_checkpoint {
                model.save(p)?;
            }
        }
        if cfg.target_train_cer.is_some_and(|t| final_train_cer <= t) {
            break;
        }
    }
    if halted.is_some() {
        *model = last_good;
    }
    if let Some(p) = &outputs.last_checkpoint {
        model.save(p)?;
    }
    Ok(TrainReport {
        rows,
        epochs_run,
        best_wer,
        final_train_cer,
        skipped,
        halted,
    })
}
