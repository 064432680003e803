//! Fully-convolutional acoustic model.
//!
//! Layout, for every connectivity kind:
//!
//! ```text
//! strided conv layer -> body (body_layers convs, width C) -> head conv (large kernel)
//!     -> 1x1 conv to |A| + 1 -> log_softmax
//! ```
//!
//! Only the body differs. Plain stacks the layers; residual and highway pair
//! them into two-layer blocks, leaving the first body layer unpaired when
//! the count is odd; dense replaces the body with one dense block of equal
//! depth and a transition back to width C.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{conv_out_len, BatchStats, Pointwise, Tape, Var, BN_MOMENTUM};
use crate::blocks::{BlockConfig, ConnectivityKind, Conv, ConvLayer, DenseBlock, HighwayBlock, ResidualBlock};
use crate::error::{Error, Result};
use crate::params::{Init, Mode, ParamStore, Session, StatsId};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub connectivity: ConnectivityKind,
    pub input_features: usize,
    pub width: usize,
    pub body_layers: usize,
    pub body_kernel: usize,
    pub stride_kernel: usize,
    pub stride: usize,
    pub head_kernel: usize,
    /// Symbols excluding blank.
    pub alphabet_size: usize,
    pub nonlinearity: Pointwise,
    pub gate_bias_init: f64,
    pub per_channel_gate: bool,
    /// Dense growth rate; `width / 4` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub growth_rate: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            connectivity: ConnectivityKind::Plain,
            input_features: 257,
            width: 32,
            body_layers: 7,
            body_kernel: 5,
            stride_kernel: 11,
            stride: 2,
            head_kernel: 15,
            alphabet_size: 28,
            nonlinearity: Pointwise::Hardtanh,
            gate_bias_init: -3.0,
            per_channel_gate: false,
            growth_rate: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_features", self.input_features),
            ("width", self.width),
            ("body_layers", self.body_layers),
            ("stride", self.stride),
            ("alphabet_size", self.alphabet_size),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        for (field, k) in [
            ("body_kernel", self.body_kernel),
            ("stride_kernel", self.stride_kernel),
            ("head_kernel", self.head_kernel),
        ] {
            if k % 2 == 0 {
                return Err(Error::config(field, format!("kernel {k} must be odd")));
            }
        }
        if self.growth_rate == Some(0) {
            return Err(Error::config("growth_rate", "must be at least 1"));
        }
        self.block_config().validate()
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            channels: self.width,
            kernel_size: self.body_kernel,
            growth_rate: self.growth_rate.unwrap_or((self.width / 4).max(1)),
            dense_block_depth: self.body_layers,
            gate_bias_init: self.gate_bias_init,
            per_channel_gate: self.per_channel_gate,
            nonlinearity: self.nonlinearity,
        }
    }

    pub fn output_channels(&self) -> usize {
        self.alphabet_size + 1
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config is always serializable")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("model", e.to_string()))
    }
}

#[derive(Clone, Debug)]
enum Body {
    Plain(Vec<ConvLayer>),
    Residual { lead: Vec<ConvLayer>, blocks: Vec<ResidualBlock> },
    Highway { lead: Vec<ConvLayer>, blocks: Vec<HighwayBlock> },
    Dense(DenseBlock),
}

/// Result of one training-mode evaluation of an utterance.
#[derive(Clone, Debug)]
pub struct UtteranceGrad {
    pub loss: f64,
    /// One gradient per parameter, in store order.
    pub grads: Vec<Tensor>,
    pub batch_stats: Vec<(StatsId, BatchStats)>,
}

#[derive(Clone, Debug)]
pub struct AcousticModel {
    config: ModelConfig,
    store: ParamStore,
    front: ConvLayer,
    body: Body,
    head: ConvLayer,
    output: Conv,
}

impl AcousticModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let (c, act) = (config.width, config.nonlinearity);
        let front = ConvLayer::init(
            &mut init,
            "front",
            config.input_features,
            c,
            config.stride_kernel,
            config.stride,
            act,
        );
        let block_cfg = config.block_config();
        let plain_layer = |init: &mut Init<'_, ChaCha8Rng>, i: usize| {
            ConvLayer::init(init, &format!("body.{i}"), c, c, config.body_kernel, 1, act)
        };
        let lead_count = config.body_layers % 2;
        let block_count = config.body_layers / 2;
        let body = match config.connectivity {
            ConnectivityKind::Plain => {
                Body::Plain((0..config.body_layers).map(|i| plain_layer(&mut init, i)).collect())
            }
            ConnectivityKind::Residual => Body::Residual {
                lead: (0..lead_count).map(|i| plain_layer(&mut init, i)).collect(),
                blocks: (0..block_count)
                    .map(|b| ResidualBlock::init(&mut init, &format!("body.block{b}"), &block_cfg))
                    .collect(),
            },
            ConnectivityKind::Highway => Body::Highway {
                lead: (0..lead_count).map(|i| plain_layer(&mut init, i)).collect(),
                blocks: (0..block_count)
                    .map(|b| HighwayBlock::init(&mut init, &format!("body.block{b}"), &block_cfg))
                    .collect(),
            },
            ConnectivityKind::Dense => Body::Dense(DenseBlock::init(&mut init, "body.dense", &block_cfg, c)),
        };
        let head = ConvLayer::init(&mut init, "head", c, c, config.head_kernel, 1, act);
        let output = Conv::init(&mut init, "output", c, config.output_channels(), 1, 1);
        Ok(AcousticModel {
            config,
            store,
            front,
            body,
            head,
            output,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn connectivity(&self) -> ConnectivityKind {
        self.config.connectivity
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    /// Frames emitted for `frames` input frames.
    pub fn output_length(&self, frames: usize) -> usize {
        let k = self.config.stride_kernel;
        // Every later layer uses symmetric padding and stride 1.
        conv_out_len(frames, k, self.config.stride, (k - 1) / 2)
    }

    pub fn min_input_frames(&self) -> usize {
        1
    }

    /// Per-frame log-probabilities `[|A| + 1, T']` for features bound to `x`.
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let (f, t) = s.tape.value(x).dims2()?;
        if f != self.config.input_features {
            return Err(Error::dim(
                "forward",
                format!("expected {} feature rows, got {f}", self.config.input_features),
            ));
        }
        if t < self.min_input_frames() {
            return Err(Error::UtteranceTooShort {
                frames: t,
                required: self.min_input_frames(),
            });
        }
        let mut h = self.front.forward(s, x)?;
        match &self.body {
            Body::Plain(layers) => {
                for l in layers {
                    h = l.forward(s, h)?;
                }
            }
            Body::Residual { lead, blocks } => {
                for l in lead {
                    h = l.forward(s, h)?;
                }
                for b in blocks {
                    h = b.forward(s, h)?;
                }
            }
            Body::Highway { lead, blocks } => {
                for l in lead {
                    h = l.forward(s, h)?;
                }
                for b in blocks {
                    h = b.forward(s, h)?;
                }
            }
            Body::Dense(block) => h = block.forward(s, h)?,
        }
        let h = self.head.forward(s, h)?;
        let logits = self.output.forward(s, h)?;
        s.tape.log_softmax(logits)
    }

    /// Eval-mode log-probabilities.
    pub fn infer(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &self.store, Mode::Eval, false);
        let x = s.tape.leaf(features.clone(), false);
        let y = self.forward(&mut s, x)?;
        Ok(tape.value(y).clone())
    }

    /// Run several utterances through one forward pass, laid end to end in
    /// time. Train-mode normalization then pools statistics over the whole
    /// batch. Returns one `[|A| + 1, T_i']` log-probability map per utterance.
    pub fn forward_batch(&self, s: &mut Session<'_>, features: &[&Tensor]) -> Result<Vec<Var>> {
        let first = features
            .first()
            .ok_or_else(|| Error::contract("forward_batch", "empty batch"))?;
        let rows = first.dims2()?.0;
        let mut lengths = Vec::with_capacity(features.len());
        for f in features {
            let (r, t) = f.dims2()?;
            if r != rows {
                return Err(Error::dim("forward_batch", format!("feature rows {r} vs {rows}")));
            }
            lengths.push(t);
        }
        let total: usize = lengths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for f in features {
                data.extend_from_slice(f.row(r));
            }
        }
        let x = s.tape.leaf(Tensor::new(vec![rows, total], data)?, false);
        let saved = s.segments.replace(lengths);
        let lp = self.forward(s, x);
        let out_lengths = std::mem::replace(&mut s.segments, saved);
        let lp = lp?;
        let out_lengths = out_lengths.expect("set above");
        let mut out = Vec::with_capacity(out_lengths.len());
        let mut start = 0;
        for len in out_lengths {
            out.push(s.tape.slice_time(lp, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// Mean CTC loss of a batch, with batch-pooled normalization statistics.
    pub fn batch_loss(&self, s: &mut Session<'_>, batch: &[(&Tensor, &[usize])]) -> Result<Var> {
        let features: Vec<&Tensor> = batch.iter().map(|(f, _)| *f).collect();
        let lps = self.forward_batch(s, &features)?;
        let mut total = None;
        for (lp, (_, target)) in lps.into_iter().zip(batch) {
            let l = s.tape.ctc_loss(lp, target)?;
            total = Some(match total {
                None => l,
                Some(t) => s.tape.add(t, l)?,
            });
        }
        s.tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64)
    }

    /// Train-mode mean CTC loss of a batch with parameter gradients. Does not
    /// mutate the model.
    pub fn batch_loss_and_grads(&self, batch: &[(&Tensor, &[usize])]) -> Result<UtteranceGrad> {
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &self.store, Mode::Train, true);
        let loss = self.batch_loss(&mut s, batch)?;
        let Session { vars, batch_stats, .. } = s;
        tape.backward(loss)?;
        Ok(UtteranceGrad {
            loss: tape.value(loss).data()[0],
            grads: self.store.collect_grads(&tape, &vars),
            batch_stats,
        })
    }

    /// Train-mode CTC loss with parameter gradients. Does not mutate the model.
    pub fn loss_and_grads(&self, features: &Tensor, target: &[usize]) -> Result<UtteranceGrad> {
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &self.store, Mode::Train, true);
        let x = s.tape.leaf(features.clone(), false);
        let lp = self.forward(&mut s, x)?;
        let loss = s.tape.ctc_loss(lp, target)?;
        let Session { vars, batch_stats, .. } = s;
        tape.backward(loss)?;
        Ok(UtteranceGrad {
            loss: tape.value(loss).data()[0],
            grads: self.store.collect_grads(&tape, &vars),
            batch_stats,
        })
    }

    pub fn apply_batch_stats(&mut self, stats: &[(StatsId, BatchStats)]) {
        for (id, b) in stats {
            self.store.stats_mut(*id).update(b, BN_MOMENTUM);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        let header = self.config.to_toml();
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(header.as_bytes());
        let records = self.records();
        buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
        for (name, shape, data) in records {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in &shape {
                buf.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |msg: String| Error::Invalid(format!("{}: bad checkpoint: {msg}", path.display()));
        let mut r = ByteReader { bytes: &bytes, pos: 0 };
        if r.take(CHECKPOINT_MAGIC.len()).ok_or_else(|| bad("truncated".into()))? != CHECKPOINT_MAGIC {
            return Err(bad("wrong magic".into()));
        }
        let header_len = r.u64().ok_or_else(|| bad("truncated header".into()))? as usize;
        let header = r.take(header_len).ok_or_else(|| bad("truncated header".into()))?;
        let header = std::str::from_utf8(header).map_err(|e| bad(e.to_string()))?;
        let config = ModelConfig::from_toml(header)?;
        let mut model = AcousticModel::new(config, 0)?;
        let expected = model.records();
        let count = r.u64().ok_or_else(|| bad("truncated".into()))? as usize;
        if count != expected.len() {
            return Err(bad(format!("{count} records, model needs {}", expected.len())));
        }
        let mut seen = std::collections::HashSet::new();
        for _ in 0..count {
            let name_len = r.u32().ok_or_else(|| bad("truncated record".into()))? as usize;
            let name = r.take(name_len).ok_or_else(|| bad("truncated record".into()))?;
            let name = String::from_utf8(name.to_vec()).map_err(|e| bad(e.to_string()))?;
            let ndim = r.u32().ok_or_else(|| bad(format!("{name}: truncated")))? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad(format!("{name}: truncated shape")))?;
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| r.f64())
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad(format!("{name}: truncated data")))?;
            let Some((_, want, _)) = expected.iter().find(|(n, _, _)| *n == name) else {
                return Err(bad(format!("unknown record {name}")));
            };
            if *want != shape {
                return Err(bad(format!("{name}: shape {shape:?}, expected {want:?}")));
            }
            if !seen.insert(name.clone()) {
                return Err(bad(format!("duplicate record {name}")));
            }
            model.set_record(&name, data);
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes".into()));
        }
        Ok(model)
    }

    fn records(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out: Vec<_> = self
            .store
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec(), p.value.data().to_vec()))
            .collect();
        for (name, s) in self.store.stats_entries() {
            out.push((format!("{name}.mean"), vec![s.mean.len()], s.mean.clone()));
            out.push((format!("{name}.var"), vec![s.var.len()], s.var.clone()));
        }
        out
    }

    fn set_record(&mut self, name: &str, data: Vec<f64>) {
        if let Some(p) = self.store.by_name_mut(name) {
            p.value.data_mut().copy_from_slice(&data);
            return;
        }
        let (stats_name, field) = name.rsplit_once('.').expect("validated record name");
        let stats = self.store.stats_by_name_mut(stats_name).expect("validated record name");
        match field {
            "mean" => stats.mean = data,
            _ => stats.var = data,
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SKPTv001";

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small(kind: ConnectivityKind) -> ModelConfig {
        ModelConfig {
            connectivity: kind,
            input_features: 4,
            width: 8,
            alphabet_size: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn output_has_blank_plus_alphabet_rows() {
        let m = AcousticModel::new(small(ConnectivityKind::Plain), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = m.infer(&Tensor::randn(&[4, 30], 1.0, &mut rng)).unwrap();
        assert_eq!(y.shape(), &[4, 15]);
        for t in 0..15 {
            let s: f64 = (0..4).map(|c| y.at2(c, t).exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_counts() {
        let count = |k| AcousticModel::new(small(k), 0).unwrap().param_count();
        let plain = count(ConnectivityKind::Plain);
        assert_eq!(count(ConnectivityKind::Residual), plain);
        // Three gated blocks, each with a C-wide gate vector and a scalar bias.
        assert_eq!(count(ConnectivityKind::Highway), plain + 3 * (8 + 1));
        // Direct count of the plain layout.
        let (f, c, a) = (4, 8, 3);
        let layer = |cin: usize, cout: usize, k: usize| cout * cin * k + cout + 2 * cout;
        let expected = layer(f, c, 11) + 7 * layer(c, c, 5) + layer(c, c, 15) + (a + 1) * c + (a + 1);
        assert_eq!(plain, expected);
    }

    #[test]
    fn output_length_matches_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = AcousticModel::new(small(ConnectivityKind::Residual), 0).unwrap();
        assert_eq!(m.output_length(100), 50);
        for _ in 0..20 {
            let cfg = ModelConfig {
                stride: rng.random_range(1..4),
                stride_kernel: 2 * rng.random_range(0..6) + 1,
                body_kernel: 2 * rng.random_range(0..3) + 1,
                head_kernel: 2 * rng.random_range(0..4) + 1,
                body_layers: rng.random_range(1..5),
                connectivity: ConnectivityKind::ALL[rng.random_range(0..4)],
                ..small(ConnectivityKind::Plain)
            };
            let m = AcousticModel::new(cfg.clone(), 0).unwrap();
            let t = rng.random_range(1..40);
            let y = m.infer(&Tensor::randn(&[4, t], 1.0, &mut rng)).unwrap();
            assert_eq!(y.shape()[1], m.output_length(t), "{cfg:?} T={t}");
            assert_eq!(m.output_length(t), t.div_ceil(cfg.stride));
        }
        let stride1 = AcousticModel::new(ModelConfig { stride: 1, ..small(ConnectivityKind::Dense) }, 0).unwrap();
        assert_eq!(stride1.output_length(37), 37);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn(&[4, 20], 1.0, &mut rng);
        let m = AcousticModel::new(small(ConnectivityKind::Highway), 3).unwrap();
        let a = m.infer(&x).unwrap();
        let b = m.infer(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn invalid_config_names_field() {
        let err = AcousticModel::new(ModelConfig { head_kernel: 4, ..small(ConnectivityKind::Plain) }, 0).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "head_kernel"));
        let err = AcousticModel::new(ModelConfig { width: 0, ..ModelConfig::default() }, 0).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "width"));
    }

    #[test]
    fn feature_count_mismatch_is_dimension_error() {
        let m = AcousticModel::new(small(ConnectivityKind::Plain), 0).unwrap();
        assert!(matches!(m.infer(&Tensor::zeros(&[5, 10])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn batch_eval_matches_single_utterances() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xs: Vec<Tensor> = [13, 7, 20].iter().map(|&t| Tensor::randn(&[4, t], 1.0, &mut rng)).collect();
        for kind in ConnectivityKind::ALL {
            let mut m = AcousticModel::new(small(kind), 4).unwrap();
            let g = m.loss_and_grads(&xs[0], &[1]).unwrap();
            m.apply_batch_stats(&g.batch_stats);
            let mut tape = Tape::new();
            let mut s = Session::new(&mut tape, m.params(), Mode::Eval, false);
            let refs: Vec<&Tensor> = xs.iter().collect();
            let lps = m.forward_batch(&mut s, &refs).unwrap();
            for (lp, x) in lps.iter().zip(&xs) {
                let single = m.infer(x).unwrap();
                let batched = tape.value(*lp);
                assert_eq!(batched.shape(), single.shape());
                for (a, b) in batched.data().iter().zip(single.data()) {
                    assert!((a - b).abs() < 1e-12, "{kind}");
                }
            }
        }
    }

    #[test]
    fn batch_of_one_matches_single_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[4, 18], 1.0, &mut rng);
        for kind in ConnectivityKind::ALL {
            let m = AcousticModel::new(small(kind), 2).unwrap();
            let a = m.loss_and_grads(&x, &[1, 2]).unwrap();
            let b = m.batch_loss_and_grads(&[(&x, &[1, 2])]).unwrap();
            assert!((a.loss - b.loss).abs() < 1e-12);
            for (ga, gb) in a.grads.iter().zip(&b.grads) {
                for (p, q) in ga.data().iter().zip(gb.data()) {
                    assert!((p - q).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut m = AcousticModel::new(small(ConnectivityKind::Dense), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[4, 16], 1.0, &mut rng);
        let g = m.loss_and_grads(&x, &[1, 2]).unwrap();
        m.apply_batch_stats(&g.batch_stats);
        m.save(&path).unwrap();
        let loaded = AcousticModel::load(&path).unwrap();
        assert_eq!(loaded.config(), m.config());
        assert_eq!(loaded.infer(&x).unwrap().data(), m.infer(&x).unwrap().data());

        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(AcousticModel::load(&path).is_err());
    }

    #[test]
    fn checkpoint_rejects_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = AcousticModel::new(small(ConnectivityKind::Plain), 9).unwrap();
        m.save(&path).unwrap();
        // Rewrite the header so that the model built from it has a wider front layer.
        let bytes = fs::read(&path).unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + header_len]).unwrap();
        let patched = header.replace("input_features = 4", "input_features = 5");
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(patched.len() as u64).to_le_bytes());
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[16 + header_len..]);
        fs::write(&path, out).unwrap();
        let err = AcousticModel::load(&path).unwrap_err().to_string();
        assert!(err.contains("front.conv.weight"), "{err}");
    }
}
