//! Finite-difference gradient suites for every differentiable op, every
//! block, and a tiny end-to-end model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchNormMode, Pointwise, RunningStats, Tape, Var};
use crate::blocks::{
    BlockConfig, ConnectivityKind, ConvLayer, DenseBlock, DenseLayer, HighwayBlock, ResidualBlock, Transition,
};
use crate::error::Result;
use crate::model::{AcousticModel, ModelConfig};
use crate::params::{Mode, ParamStore, Session};
use crate::tensor::Tensor;

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Smallest distance of any relu/hardtanh input from a kink for a check to count.
pub const MIN_KINK_MARGIN: f64 = 1e-3;
const MAX_DRAWS: u64 = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    /// Worst `|analytic - numeric| / max(1, |analytic|)` over all checked entries.
    pub max_rel_error: f64,
    pub kink_margin: f64,
    pub entries: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE && self.kink_margin >= MIN_KINK_MARGIN
    }
}

/// Compare reverse-mode gradients of the scalar `f` with respect to every
/// entry of every input against central differences.
pub fn check_inputs<F>(name: &str, f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let kink_margin = tape.kink_margin();
    tape.backward(out)?;
    let mut worst = 0.0f64;
    let mut entries = 0;
    let mut values = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let orig = values[k].data()[i];
            values[k].data_mut()[i] = orig + eps;
            let plus = eval(&values)?;
            values[k].data_mut()[i] = orig - eps;
            let minus = eval(&values)?;
            values[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
            entries += 1;
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        max_rel_error: worst,
        kink_margin,
        entries,
    })
}

/// Redraw the random instance until it stays clear of every kink.
fn away_from_kinks(name: &str, build: impl Fn(&mut ChaCha8Rng) -> Result<GradCheck>) -> Result<GradCheck> {
    let mut last = None;
    for seed in 0..MAX_DRAWS {
        let r = build(&mut ChaCha8Rng::seed_from_u64(seed))?;
        if r.kink_margin >= MIN_KINK_MARGIN {
            return Ok(r);
        }
        last = Some(r);
    }
    let mut r = last.expect("at least one draw");
    r.name = format!("{name} (no kink-free draw)");
    Ok(r)
}

/// Random linear read-out so every output entry reaches the scalar loss.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let w = Tensor::randn(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(1000 + seed));
    let w = tape.leaf(w, false);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn op(name: &str, shapes: &[&[usize]], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<GradCheck> {
    away_from_kinks(name, |rng| {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| randn(rng, s)).collect();
        check_inputs(name, &f, &inputs, EPS)
    })
}

/// Every differentiable tape operation.
pub fn op_suite() -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        out.push(op(
            &format!("conv1d stride {stride} pad {pad}"),
            &[&[3, 9], &[2, 3, 3], &[2]],
            move |t, v| {
                let y = t.conv1d(v[0], v[1], v[2], stride, pad)?;
                project(t, y, 0)
            },
        )?);
    }
    out.push(op("batchnorm1d train", &[&[3, 6], &[3], &[3]], |t, v| {
        let (y, _) = t.batchnorm1d(v[0], v[1], v[2], BatchNormMode::Train)?;
        project(t, y, 1)
    })?);
    let stats = RunningStats {
        mean: vec![0.3, -0.2, 0.1],
        var: vec![1.5, 0.7, 2.0],
    };
    out.push(op("batchnorm1d eval", &[&[3, 6], &[3], &[3]], |t, v| {
        let (y, _) = t.batchnorm1d(v[0], v[1], v[2], BatchNormMode::Eval(&stats))?;
        project(t, y, 2)
    })?);
    for f in [Pointwise::Relu, Pointwise::Sigmoid, Pointwise::Hardtanh] {
        out.push(op(&format!("{f:?}").to_lowercase(), &[&[2, 5]], move |t, v| {
            let x = t.scale(v[0], 1.5)?;
            let y = t.pointwise(f, x)?;
            project(t, y, 3)
        })?);
    }
    out.push(op("add", &[&[2, 4], &[2, 4]], |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, 4)
    })?);
    out.push(op("mul", &[&[2, 4], &[2, 4]], |t, v| {
        let y = t.mul(v[0], v[1])?;
        project(t, y, 5)
    })?);
    out.push(op("mul broadcast", &[&[3, 4], &[1, 4]], |t, v| {
        let y = t.mul(v[0], v[1])?;
        project(t, y, 6)
    })?);
    out.push(op("scale", &[&[2, 3]], |t, v| {
        let y = t.scale(v[0], -0.7)?;
        project(t, y, 7)
    })?);
    out.push(op("affine", &[&[2, 3]], |t, v| {
        let y = t.affine(v[0], -1.0, 1.0)?;
        project(t, y, 8)
    })?);
    out.push(op("concat_channels", &[&[2, 3], &[1, 3], &[3, 3]], |t, v| {
        let y = t.concat_channels(v)?;
        project(t, y, 9)
    })?);
    out.push(op("log_softmax", &[&[4, 3]], |t, v| {
        let y = t.log_softmax(v[0])?;
        project(t, y, 10)
    })?);
    out.push(op("mean_over_time", &[&[3, 5]], |t, v| {
        let y = t.mean_over_time(v[0])?;
        project(t, y, 11)
    })?);
    out.push(op("sum", &[&[3, 5]], |t, v| t.sum(v[0]))?);
    out.push(op("slice_time", &[&[2, 7]], |t, v| {
        let y = t.slice_time(v[0], 2, 4)?;
        project(t, y, 12)
    })?);
    out.push(op("concat_time", &[&[2, 3], &[2, 1], &[2, 4]], |t, v| {
        let y = t.concat_time(v)?;
        project(t, y, 13)
    })?);
    for target in [vec![1, 2], vec![1, 1], vec![2]] {
        out.push(op(&format!("ctc_loss {target:?}"), &[&[3, 6]], move |t, v| {
            let lp = t.log_softmax(v[0])?;
            t.ctc_loss(lp, &target)
        })?);
    }
    Ok(out)
}

/// Check a layer against its input and every parameter it owns.
fn block<B>(name: &str, channels: usize, frames: usize, build: B) -> Result<GradCheck>
where
    B: Fn(&mut ParamStore, &mut ChaCha8Rng) -> Result<Box<dyn Fn(&mut Session<'_>, Var) -> Result<Var>>>,
{
    away_from_kinks(name, |rng| {
        let mut store = ParamStore::new();
        let forward = build(&mut store, rng)?;
        // Randomize BN affine parameters too, so they are not at their init values.
        for p in store.iter_mut() {
            if p.name.ends_with(".gamma") || p.name.ends_with(".beta") {
                p.value = Tensor::uniform(p.value.shape(), 0.5, 1.5, rng);
            }
        }
        let x = randn(rng, &[channels, frames]);
        let mut inputs = vec![x];
        inputs.extend(store.iter().map(|p| p.value.clone()));
        let store = &store;
        check_inputs(
            name,
            |tape, vars| {
                let mut s = Session::with_vars(tape, store, vars[1..].to_vec(), Mode::Train);
                let y = forward(&mut s, vars[0])?;
                project(s.tape, y, 20)
            },
            &inputs,
            EPS,
        )
    })
}

/// Every connectivity block and its parts, in train mode.
pub fn block_suite() -> Result<Vec<GradCheck>> {
    let (c, t) = (4, 8);
    let cfg = BlockConfig::new(c, 3);
    let per_channel = BlockConfig {
        per_channel_gate: true,
        ..cfg.clone()
    };
    let relu = BlockConfig {
        nonlinearity: Pointwise::Relu,
        ..cfg.clone()
    };
    let dense_cfg = BlockConfig {
        growth_rate: 2,
        dense_block_depth: 3,
        ..cfg.clone()
    };
    let mut out = Vec::new();
    out.push(block("plain layer", c, t, |s, r| {
        let l = ConvLayer::new(s, r, "plain", c, c, 3, Pointwise::Hardtanh);
        Ok(Box::new(move |s, x| l.forward(s, x)))
    })?);
    for (name, bc) in [("residual block", &cfg), ("residual block relu", &relu)] {
        out.push(block(name, c, t, |s, r| {
            let b = ResidualBlock::new(s, r, "res", bc)?;
            Ok(Box::new(move |s, x| b.forward(s, x)))
        })?);
    }
    for (name, bc) in [("highway block", &cfg), ("highway block per-channel gate", &per_channel)] {
        out.push(block(name, c, t, |s, r| {
            let b = HighwayBlock::new(s, r, "hw", bc)?;
            Ok(Box::new(move |s, x| b.forward(s, x)))
        })?);
    }
    out.push(block("dense layer", c, t, |s, r| {
        let l = DenseLayer::new(s, r, "dl", c, &dense_cfg)?;
        Ok(Box::new(move |s, x| l.forward(s, &[x])))
    })?);
    out.push(block("transition", c, t, |s, r| {
        let l = Transition::new(s, r, "tr", c, 2)?;
        Ok(Box::new(move |s, x| l.forward(s, x)))
    })?);
    out.push(block("dense block", c, t, |s, r| {
        let b = DenseBlock::new(s, r, "db", &dense_cfg, c)?;
        Ok(Box::new(move |s, x| b.forward(s, x)))
    })?);
    Ok(out)
}

/// Tiny acoustic model settings: 3 features, width 4, 2 symbols.
pub fn tiny_model_config(kind: ConnectivityKind) -> ModelConfig {
    ModelConfig {
        connectivity: kind,
        input_features: 3,
        width: 4,
        alphabet_size: 2,
        ..Default::default()
    }
}

/// CTC loss of the full tiny model (12 input frames) against its input and
/// every parameter.
pub fn model_check(kind: ConnectivityKind) -> Result<GradCheck> {
    let name = format!("{kind} tiny model");
    away_from_kinks(&name, |rng| {
        let model = AcousticModel::new(tiny_model_config(kind), rng.random())?;
        let x = randn(rng, &[3, 12]);
        let target = [1, 2];
        let mut inputs = vec![x];
        inputs.extend(model.params().iter().map(|p| p.value.clone()));
        check_inputs(
            &name,
            |tape, vars| {
                let mut s = Session::with_vars(tape, model.params(), vars[1..].to_vec(), Mode::Train);
                let lp = model.forward(&mut s, vars[0])?;
                s.tape.ctc_loss(lp, &target)
            },
            &inputs,
            EPS,
        )
    })
}

/// Mean CTC loss of a two-utterance batch through the tiny model, against
/// every parameter. Normalization statistics pool over both utterances.
pub fn batch_model_check(kind: ConnectivityKind) -> Result<GradCheck> {
    let name = format!("{kind} tiny model batch");
    away_from_kinks(&name, |rng| {
        let model = AcousticModel::new(tiny_model_config(kind), rng.random())?;
        let a = randn(rng, &[3, 12]);
        let b = randn(rng, &[3, 9]);
        let inputs: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
        check_inputs(
            &name,
            |tape, vars| {
                let mut s = Session::with_vars(tape, model.params(), vars.to_vec(), Mode::Train);
                model.batch_loss(&mut s, &[(&a, &[1, 2]), (&b, &[2])])
            },
            &inputs,
            EPS,
        )
    })
}

pub fn model_suite() -> Result<Vec<GradCheck>> {
    let mut out: Vec<GradCheck> = ConnectivityKind::ALL.iter().map(|&k| model_check(k)).collect::<Result<_>>()?;
    for &k in &ConnectivityKind::ALL {
        out.push(batch_model_check(k)?);
    }
    Ok(out)
}

pub fn all_suites() -> Result<Vec<GradCheck>> {
    let mut out = op_suite()?;
    out.extend(block_suite()?);
    out.extend(model_suite()?);
    Ok(out)
}
