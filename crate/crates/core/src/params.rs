//! Named parameter registry and the per-call binding of parameters to a tape.

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{BatchNormMode, BatchStats, RunningStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StatsId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Trainable tensors plus batch-norm running statistics, both addressable by
/// unique names.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    stats: Vec<(String, RunningStats)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name) && !self.stats.iter().any(|(n, _)| *n == name),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        self.stats.push((name, RunningStats::new(channels)));
        StatsId(self.stats.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.id(name).map(|id| self.get_mut(id))
    }

    pub fn stats(&self, id: StatsId) -> &RunningStats {
        &self.stats[id.0].1
    }

    pub fn stats_mut(&mut self, id: StatsId) -> &mut RunningStats {
        &mut self.stats[id.0].1
    }

    pub fn stats_entries(&self) -> impl Iterator<Item = (&str, &RunningStats)> {
        self.stats.iter().map(|(n, s)| (n.as_str(), s))
    }

    pub fn stats_by_name_mut(&mut self, name: &str) -> Option<&mut RunningStats> {
        self.stats.iter_mut().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Register every parameter as a tape leaf, in id order.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), requires_grad))
            .collect()
    }

    /// Gradients reached by a backward pass on `tape`, one per parameter.
    pub fn collect_grads(&self, tape: &Tape, vars: &[Var]) -> Vec<Tensor> {
        self.params
            .iter()
            .zip(vars)
            .map(|(p, v)| {
                tape.grad(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
            })
            .collect()
    }

    pub fn accumulate_grads(&mut self, grads: &[Tensor], scale: f64) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::dim("accumulate_grads", "gradient count mismatch"));
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            if p.grad.shape() != g.shape() {
                return Err(Error::dim("accumulate_grads", format!("shape mismatch for {}", p.name)));
            }
            p.grad.add_assign_scaled(g, scale);
        }
        Ok(())
    }
}

/// Initializers used when building layers.
pub(crate) struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    /// He-normal weight and zero bias for a `[c_out, c_in, k]` convolution.
    pub fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) -> (ParamId, ParamId) {
        let std = (2.0 / (c_in * k) as f64).sqrt();
        let w = Tensor::randn(&[c_out, c_in, k], std, self.rng);
        (
            self.store.add(format!("{name}.weight"), w),
            self.store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])),
        )
    }

    pub fn batchnorm(&mut self, name: &str, c: usize) -> (ParamId, ParamId, StatsId) {
        (
            self.store.add(format!("{name}.gamma"), Tensor::full(&[c], 1.0)),
            self.store.add(format!("{name}.beta"), Tensor::zeros(&[c])),
            self.store.add_stats(format!("{name}.running"), c),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward evaluation: a tape, the tape variables of every parameter, and
/// the batch statistics gathered by normalization layers in train mode.
pub struct Session<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub vars: Vec<Var>,
    pub mode: Mode,
    pub batch_stats: Vec<(StatsId, BatchStats)>,
    /// Lengths of the utterances laid end to end along the time axis of the
    /// current feature maps; convolutions never mix frames across them.
    pub segments: Option<Vec<usize>>,
}

impl<'a> Session<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, mode: Mode, requires_grad: bool) -> Self {
        let vars = store.bind(tape, requires_grad);
        Self::with_vars(tape, store, vars, mode)
    }

    pub fn with_vars(tape: &'a mut Tape, store: &'a ParamStore, vars: Vec<Var>, mode: Mode) -> Self {
        Session {
            tape,
            store,
            vars,
            mode,
            batch_stats: Vec::new(),
            segments: None,
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn batchnorm(&mut self, x: Var, gamma: ParamId, beta: ParamId, stats: StatsId) -> Result<Var> {
        let (g, b) = (self.var(gamma), self.var(beta));
        let mode = match self.mode {
            Mode::Train => BatchNormMode::Train,
            Mode::Eval => BatchNormMode::Eval(self.store.stats(stats)),
        };
        let (y, batch) = self.tape.batchnorm1d(x, g, b, mode)?;
        if let Some(batch) = batch {
            self.batch_stats.push((stats, batch));
        }
        Ok(y)
    }
}
