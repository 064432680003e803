//! Skip-connectivity building blocks over `[C, T]` feature maps.
//!
//! * residual: `y = act(F(x) + x)` with `F = conv -> BN -> act -> conv -> BN`
//! * highway: `y = H(x) * tau + x * (1 - tau)` with a sigmoid transform gate
//!   `tau = sigmoid(w_T . x[:, t] + b_T)` (one scalar per frame by default)
//! * dense: every layer sees the channel concatenation of all earlier
//!   outputs and appends `growth_rate` channels (BN -> act -> conv)
//! * transition: 1x1 convolution that shrinks the concatenated width

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Pointwise, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore, Session, StatsId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConnectivityKind {
    Plain,
    Residual,
    Highway,
    Dense,
}

impl ConnectivityKind {
    pub const ALL: [ConnectivityKind; 4] = [
        ConnectivityKind::Plain,
        ConnectivityKind::Residual,
        ConnectivityKind::Highway,
        ConnectivityKind::Dense,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConnectivityKind::Plain => "plain",
            ConnectivityKind::Residual => "residual",
            ConnectivityKind::Highway => "highway",
            ConnectivityKind::Dense => "dense",
        }
    }
}

impl fmt::Display for ConnectivityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConnectivityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ConnectivityKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::config("connectivity", format!("unknown kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub channels: usize,
    /// Odd, so that symmetric padding keeps the time length.
    pub kernel_size: usize,
    pub growth_rate: usize,
    pub dense_block_depth: usize,
    /// Initial transform-gate bias; negative favours carrying the input.
    pub gate_bias_init: f64,
    /// One gate per channel instead of one scalar per frame.
    pub per_channel_gate: bool,
    pub nonlinearity: Pointwise,
}

impl BlockConfig {
    pub fn new(channels: usize, kernel_size: usize) -> Self {
        BlockConfig {
            channels,
            kernel_size,
            growth_rate: (channels / 4).max(1),
            dense_block_depth: 7,
            gate_bias_init: -3.0,
            per_channel_gate: false,
            nonlinearity: Pointwise::Hardtanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("channels", "must be positive"));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::config("kernel_size", "must be odd"));
        }
        if self.growth_rate == 0 {
            return Err(Error::config("growth_rate", "must be at least 1"));
        }
        if self.dense_block_depth == 0 {
            return Err(Error::config("dense_block_depth", "must be at least 1"));
        }
        if !(self.gate_bias_init < 0.0) {
            return Err(Error::config("gate_bias_init", "must be negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    pub(crate) fn init<R: Rng>(
        init: &mut Init<'_, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let (weight, bias) = init.conv(name, c_out, c_in, kernel);
        Conv {
            weight,
            bias,
            stride,
            padding: (kernel - 1) / 2,
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let (w, b) = (s.var(self.weight), s.var(self.bias));
        let pointwise = s.tape.value(w).shape()[2] == 1 && self.stride == 1;
        let segments = match &s.segments {
            Some(segs) if segs.len() > 1 && !pointwise => segs.clone(),
            _ => {
                let y = s.tape.conv1d(x, w, b, self.stride, self.padding)?;
                if let Some([len]) = s.segments.as_deref_mut() {
                    *len = s.tape.value(y).shape()[1];
                }
                return Ok(y);
            }
        };
        let t = s.tape.value(x).dims2()?.1;
        if segments.iter().sum::<usize>() != t {
            return Err(Error::dim("conv_forward", format!("segments {segments:?} do not cover {t} frames")));
        }
        let mut outs = Vec::with_capacity(segments.len());
        let mut start = 0;
        for &len in &segments {
            let piece = s.tape.slice_time(x, start, len)?;
            outs.push(s.tape.conv1d(piece, w, b, self.stride, self.padding)?);
            start += len;
        }
        s.segments = Some(outs.iter().map(|v| s.tape.value(*v).shape()[1]).collect());
        s.tape.concat_time(&outs)
    }

    pub fn kernel(&self, store: &ParamStore) -> usize {
        store.get(self.weight).value.shape()[2]
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
}

impl BatchNorm {
    pub(crate) fn init<R: Rng>(init: &mut Init<'_, R>, name: &str, c: usize) -> Self {
        let (gamma, beta, stats) = init.batchnorm(name, c);
        BatchNorm { gamma, beta, stats }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        s.batchnorm(x, self.gamma, self.beta, self.stats)
    }
}

/// `conv -> BN -> act`.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub conv: Conv,
    pub bn: BatchNorm,
    pub act: Pointwise,
}

impl ConvLayer {
    pub(crate) fn init<R: Rng>(
        init: &mut Init<'_, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        act: Pointwise,
    ) -> Self {
        ConvLayer {
            conv: Conv::init(init, &format!("{name}.conv"), c_in, c_out, kernel, stride),
            bn: BatchNorm::init(init, &format!("{name}.bn"), c_out),
            act,
        }
    }

    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        act: Pointwise,
    ) -> Self {
        Self::init(&mut Init { store, rng }, name, c_in, c_out, kernel, 1, act)
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        let y = self.bn.forward(s, y)?;
        s.tape.pointwise(self.act, y)
    }
}

fn check_channels(op: &'static str, s: &Session<'_>, x: Var, expected: usize) -> Result<()> {
    let c = s.tape.value(x).dims2()?.0;
    if c != expected {
        return Err(Error::dim(op, format!("input has {c} channels, block expects {expected}")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub first: ConvLayer,
    pub conv2: Conv,
    pub bn2: BatchNorm,
    pub act: Pointwise,
    channels: usize,
}

impl ResidualBlock {
    pub(crate) fn init<R: Rng>(init: &mut Init<'_, R>, name: &str, cfg: &BlockConfig) -> Self {
        let (c, k) = (cfg.channels, cfg.kernel_size);
        ResidualBlock {
            first: ConvLayer::init(init, &format!("{name}.layer1"), c, c, k, 1, cfg.nonlinearity),
            conv2: Conv::init(init, &format!("{name}.layer2.conv"), c, c, k, 1),
            bn2: BatchNorm::init(init, &format!("{name}.layer2.bn"), c),
            act: cfg.nonlinearity,
            channels: c,
        }
    }

    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cfg: &BlockConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::init(&mut Init { store, rng }, name, cfg))
    }

    /// The residual branch `F(x)`, before the skip is added.
    pub fn branch(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let h = self.first.forward(s, x)?;
        let h = self.conv2.forward(s, h)?;
        self.bn2.forward(s, h)
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        check_channels("residual_forward", s, x, self.channels)?;
        let f = self.branch(s, x)?;
        let sum = s.tape.add(f, x)?;
        s.tape.pointwise(self.act, sum)
    }
}

#[derive(Clone, Debug)]
pub struct HighwayBlock {
    pub layers: [ConvLayer; 2],
    /// 1x1 convolution producing the gate pre-activation, `[1, T]` or `[C, T]`.
    pub gate: Conv,
    channels: usize,
}

impl HighwayBlock {
    pub(crate) fn init<R: Rng>(init: &mut Init<'_, R>, name: &str, cfg: &BlockConfig) -> Self {
        let (c, k) = (cfg.channels, cfg.kernel_size);
        let gate_rows = if cfg.per_channel_gate { c } else { 1 };
        let weight = init.store.add(
            format!("{name}.gate.weight"),
            Tensor::randn(&[gate_rows, c, 1], (1.0 / c as f64).sqrt(), init.rng),
        );
        let bias = init.store.add(
            format!("{name}.gate.bias"),
            Tensor::full(&[gate_rows], cfg.gate_bias_init),
        );
        HighwayBlock {
            layers: [
                ConvLayer::init(init, &format!("{name}.layer1"), c, c, k, 1, cfg.nonlinearity),
                ConvLayer::init(init, &format!("{name}.layer2"), c, c, k, 1, cfg.nonlinearity),
            ],
            gate: Conv {
                weight,
                bias,
                stride: 1,
                padding: 0,
            },
            channels: c,
        }
    }

    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cfg: &BlockConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::init(&mut Init { store, rng }, name, cfg))
    }

    /// The transform branch `H(x)`.
    pub fn transform(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let h = self.layers[0].forward(s, x)?;
        self.layers[1].forward(s, h)
    }

    /// Transform-gate activations `tau`.
    pub fn gate(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let pre = self.gate.forward(s, x)?;
        s.tape.sigmoid(pre)
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        check_channels("highway_forward", s, x, self.channels)?;
        let h = self.transform(s, x)?;
        let tau = self.gate(s, x)?;
        let carry = s.tape.affine(tau, -1.0, 1.0)?;
        let transformed = s.tape.mul(h, tau)?;
        let carried = s.tape.mul(x, carry)?;
        s.tape.add(transformed, carried)
    }
}

/// `BN -> act -> conv` over the channel concatenation of all earlier features.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub bn: BatchNorm,
    pub act: Pointwise,
    pub conv: Conv,
    in_channels: usize,
}

impl DenseLayer {
    pub(crate) fn init<R: Rng>(
        init: &mut Init<'_, R>,
        name: &str,
        in_channels: usize,
        cfg: &BlockConfig,
    ) -> Self {
        DenseLayer {
            bn: BatchNorm::init(init, &format!("{name}.bn"), in_channels),
            act: cfg.nonlinearity,
            conv: Conv::init(init, &format!("{name}.conv"), in_channels, cfg.growth_rate, cfg.kernel_size, 1),
            in_channels,
        }
    }

    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        cfg: &BlockConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::init(&mut Init { store, rng }, name, in_channels, cfg))
    }

    /// Emits exactly `growth_rate` channels; the caller appends them to `features`.
    pub fn forward(&self, s: &mut Session<'_>, features: &[Var]) -> Result<Var> {
        let x = s.tape.concat_channels(features)?;
        check_channels("dense_layer_forward", s, x, self.in_channels)?;
        let y = self.bn.forward(s, x)?;
        let y = s.tape.pointwise(self.act, y)?;
        self.conv.forward(s, y)
    }
}

#[derive(Clone, Debug)]
pub struct Transition {
    pub conv: Conv,
}

impl Transition {
    pub(crate) fn init<R: Rng>(init: &mut Init<'_, R>, name: &str, c_in: usize, c_out: usize) -> Self {
        Transition {
            conv: Conv::init(init, &format!("{name}.conv"), c_in, c_out, 1, 1),
        }
    }

    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        if c_out == 0 || c_out > c_in {
            return Err(Error::config("transition", format!("cannot reduce {c_in} channels to {c_out}")));
        }
        Ok(Self::init(&mut Init { store, rng }, name, c_in, c_out))
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        self.conv.forward(s, x)
    }
}

/// `dense_block_depth` dense layers followed by a transition back to `out_channels`.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub layers: Vec<DenseLayer>,
    pub transition: Transition,
}

impl DenseBlock {
    pub(crate) fn init<R: Rng>(init: &mut Init<'_, R>, name: &str, cfg: &BlockConfig, out_channels: usize) -> Self {
        let c0 = cfg.channels;
        let layers = (0..cfg.dense_block_depth)
            .map(|l| DenseLayer::init(init, &format!("{name}.layer{}", l + 1), c0 + l * cfg.growth_rate, cfg))
            .collect();
        let width = c0 + cfg.dense_block_depth * cfg.growth_rate;
        DenseBlock {
            layers,
            transition: Transition::init(init, &format!("{name}.transition"), width, out_channels),
        }
    }

    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cfg: &BlockConfig,
        out_channels: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::init(&mut Init { store, rng }, name, cfg, out_channels))
    }

    /// Concatenated features `[x_0, y_1, ..., y_L]` before the transition.
    pub fn features(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let mut features = vec![x];
        for layer in &self.layers {
            let y = layer.forward(s, &features)?;
            features.push(y);
        }
        s.tape.concat_channels(&features)
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let all = self.features(s, x)?;
        self.transition.forward(s, all)
    }
}
