//! Parameters, the forward context, and the basic conv layers every block is built from.

mod conv;

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

pub use conv::{Conv, ConvBnAct, DwSeparable};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tape, Tensor};

static NEXT_PARAM: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

/// What a parameter tensor is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight,
    Bias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
}

impl ParamKind {
    /// Learnable (as opposed to a running statistic).
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }

    pub fn code(self) -> u8 {
        match self {
            ParamKind::ConvWeight => 0,
            ParamKind::Bias => 1,
            ParamKind::BnGamma => 2,
            ParamKind::BnBeta => 3,
            ParamKind::BnRunningMean => 4,
            ParamKind::BnRunningVar => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => ParamKind::ConvWeight,
            1 => ParamKind::Bias,
            2 => ParamKind::BnGamma,
            3 => ParamKind::BnBeta,
            4 => ParamKind::BnRunningMean,
            5 => ParamKind::BnRunningVar,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Param<T: Element> {
    id: ParamId,
    kind: ParamKind,
    value: Tensor<T>,
}

impl<T: Element> Param<T> {
    pub fn new(kind: ParamKind, value: Tensor<T>) -> Self {
        Param {
            id: ParamId(NEXT_PARAM.fetch_add(1, Ordering::Relaxed)),
            kind,
            value: value.detach(),
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn kind(&self) -> ParamKind {
        self.kind
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    /// Replace the value; the shape must not change.
    pub fn set(&mut self, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::shape(
                "Param::set",
                format!("{:?}", self.kind),
                format!("{:?}", self.value.shape()),
                format!("{:?}", value.shape()),
            ));
        }
        self.value = value.detach();
        Ok(())
    }

    pub fn fill(&mut self, v: T) {
        self.value = Tensor::full(self.value.shape().to_vec(), v);
    }
}

/// Anything owning parameters. Order of the returned lists is stable and
/// defines the weight-file layout.
pub trait Module<T: Element> {
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    /// Number of learnable scalars.
    fn num_params(&self) -> usize {
        self.params()
            .iter()
            .filter(|p| p.kind().trainable())
            .map(|p| p.numel())
            .sum()
    }

    /// Zero every conv weight and bias (batch-norm statistics untouched).
    fn zero_weights(&mut self) {
        for p in self.params_mut() {
            if matches!(p.kind(), ParamKind::ConvWeight | ParamKind::Bias) {
                p.fill(T::zero());
            }
        }
    }

    /// Redraw every parameter at unit-gain scale, for numerical tests where
    /// the default 0.02 init would make gradients vanishingly small.
    fn randomize(&mut self, rng: &mut Rng) {
        for p in self.params_mut() {
            let shape = p.shape().to_vec();
            let v = match p.kind() {
                ParamKind::ConvWeight => {
                    let fan_in: usize = shape[1..].iter().product();
                    rng.normal_tensor(&shape, 1.0 / (fan_in.max(1) as f64).sqrt())
                }
                ParamKind::Bias | ParamKind::BnBeta | ParamKind::BnRunningMean => rng.normal_tensor(&shape, 0.1),
                ParamKind::BnGamma => rng.uniform_tensor(&shape, 0.8, 1.2),
                ParamKind::BnRunningVar => rng.uniform_tensor(&shape, 0.5, 1.5),
            };
            p.set(v).expect("same shape");
        }
    }
}

/// Collect params of several children in order.
pub(crate) fn chain<'a, T: Element>(parts: impl IntoIterator<Item = Vec<&'a Param<T>>>) -> Vec<&'a Param<T>> {
    parts.into_iter().flatten().collect()
}

pub(crate) fn chain_mut<'a, T: Element>(
    parts: impl IntoIterator<Item = Vec<&'a mut Param<T>>>,
) -> Vec<&'a mut Param<T>> {
    parts.into_iter().flatten().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-stat updates recorded.
    Train,
    /// Running statistics only.
    Eval,
}

struct StatUpdate<T> {
    mean: ParamId,
    var: ParamId,
    new_mean: Vec<T>,
    new_var: Vec<T>,
}

/// Per-forward-pass state: BN mode, optional tape, pending running-stat updates.
pub struct Ctx<T: Element> {
    mode: Mode,
    tape: Option<Tape<T>>,
    momentum: Option<f64>,
    leaves: RefCell<HashMap<ParamId, Tensor<T>>>,
    updates: RefCell<Vec<StatUpdate<T>>>,
}

impl<T: Element> Ctx<T> {
    pub fn new(mode: Mode, tape: Option<Tape<T>>) -> Self {
        Ctx {
            mode,
            tape,
            momentum: None,
            leaves: RefCell::new(HashMap::new()),
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval, None)
    }

    /// Training-mode context whose recorded running statistics are exactly
    /// this pass's batch statistics (momentum 1), for calibrating a module
    /// before evaluating it.
    pub fn calibration() -> Self {
        Ctx {
            momentum: Some(1.0),
            ..Self::new(Mode::Train, None)
        }
    }

    pub(crate) fn bn_momentum(&self) -> Option<f64> {
        self.momentum
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn tape(&self) -> Option<&Tape<T>> {
        self.tape.as_ref()
    }

    /// Tensor for a parameter: a tape leaf (created once) when differentiating.
    pub fn p(&self, param: &Param<T>) -> Tensor<T> {
        match &self.tape {
            Some(tape) if param.kind().trainable() => self
                .leaves
                .borrow_mut()
                .entry(param.id())
                .or_insert_with(|| tape.leaf(param.value()))
                .clone(),
            _ => param.value().clone(),
        }
    }

    pub fn grad(&self, param: &Param<T>) -> Option<Tensor<T>> {
        self.leaves.borrow().get(&param.id()).and_then(|t| t.grad())
    }

    pub(crate) fn push_stats(&self, mean: &Param<T>, var: &Param<T>, new_mean: Vec<T>, new_var: Vec<T>) {
        self.updates.borrow_mut().push(StatUpdate {
            mean: mean.id(),
            var: var.id(),
            new_mean,
            new_var,
        });
    }

    /// Write recorded running-statistic updates into `module`.
    pub fn apply_stat_updates(&self, module: &mut dyn Module<T>) -> Result<usize> {
        let updates = std::mem::take(&mut *self.updates.borrow_mut());
        let mut by_id: HashMap<ParamId, Vec<T>> = HashMap::new();
        for u in updates {
            by_id.insert(u.mean, u.new_mean);
            by_id.insert(u.var, u.new_var);
        }
        let mut applied = 0;
        for p in module.params_mut() {
            if let Some(v) = by_id.remove(&p.id()) {
                let shape = p.shape().to_vec();
                p.set(Tensor::from_vec(shape, v)?)?;
                applied += 1;
            }
        }
        Ok(applied)
    }
}
