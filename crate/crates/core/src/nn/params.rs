use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::{Error, FlopCounter, Real, Result, Rng, Tensor};

/// Freezing group a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Patch projection and position embedding.
    Embed,
    /// First layer norm and attention of a block.
    Mhsa,
    /// Second layer norm and feed-forward network of a block.
    Ffn,
    /// Final layer norm of the backbone.
    Norm,
    Decoder,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub kind: ParamKind,
    /// Depth used for layer-wise learning-rate decay.
    pub layer: usize,
    /// Owning task for task-specific tensors.
    pub task: Option<usize>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
    /// Permanently fixed at initialisation.
    pub fixed: bool,
    /// Excluded from training by a freeze mask.
    pub frozen: bool,
}

impl ParamInfo {
    pub fn is_trainable(&self) -> bool {
        self.kind != ParamKind::Buffer && !self.fixed && !self.frozen
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    TruncNormal(f64),
    Zeros,
    Ones,
    /// Columns `[start, start + len)` of a shared truncated-normal matrix
    /// `[rows, cols]` drawn once per `key`.
    ColumnSlice {
        key: usize,
        cols: usize,
        start: usize,
        std: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub info: ParamInfo,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Named tensors of a model, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    infos: Vec<ParamInfo>,
    values: Vec<Tensor<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            infos: Vec::new(),
            values: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Materialises `specs` in order, drawing random values from `rng`.
    pub fn from_specs(specs: &[ParamSpec], rng: &mut Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut shared: BTreeMap<usize, Tensor<T>> = BTreeMap::new();
        for spec in specs {
            let t = match spec.init {
                Init::TruncNormal(std) => Tensor::trunc_normal(&spec.shape, std, rng),
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::ones(&spec.shape),
                Init::ColumnSlice { key, cols, start, std } => {
                    let rows = spec.shape[0];
                    let len = spec.numel() / rows;
                    let full = shared
                        .entry(key)
                        .or_insert_with(|| Tensor::trunc_normal(&[rows, cols], std, rng));
                    let d = full.data();
                    let data = (0..rows)
                        .flat_map(|r| d[r * cols + start..r * cols + start + len].iter().copied())
                        .collect();
                    Tensor::new(&spec.shape, data)?
                }
            };
            store.insert(spec.info.clone(), t)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, info: ParamInfo, value: Tensor<T>) -> Result<usize> {
        if self.by_name.contains_key(&info.name) {
            return Err(Error::Config(format!("duplicate parameter {}", info.name)));
        }
        let i = self.infos.len();
        self.by_name.insert(info.name.clone(), i);
        self.infos.push(info);
        self.values.push(value);
        Ok(i)
    }

    pub fn len(&self) -> usize {
        self.infos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.infos.is_empty()
    }

    pub fn index(&self, name: &str) -> Result<usize> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.into()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.values[self.index(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let i = self.index(name)?;
        Ok(&mut self.values[i])
    }

    pub fn info(&self, i: usize) -> &ParamInfo {
        &self.infos[i]
    }

    pub fn infos(&self) -> &[ParamInfo] {
        &self.infos
    }

    pub fn value(&self, i: usize) -> &Tensor<T> {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.values[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamInfo, &Tensor<T>)> {
        self.infos.iter().zip(&self.values)
    }

    /// Parameters, excluding buffers.
    pub fn num_params(&self) -> usize {
        self.iter()
            .filter(|(i, _)| i.kind != ParamKind::Buffer)
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.iter()
            .filter(|(i, _)| i.is_trainable())
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn set_frozen(&mut self, pred: impl Fn(&ParamInfo) -> bool) {
        for info in &mut self.infos {
            info.frozen = pred(info);
        }
    }

    /// FNV-1a hash over names and value bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for (info, t) in self.iter() {
            info.name.bytes().for_each(&mut eat);
            for v in t.data() {
                v.as_f64().to_bits().to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            infos: self.infos.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Blends batch statistics into running statistics with `momentum`.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>], momentum: f64) {
        let m = T::of_f64(momentum);
        for u in updates {
            for (idx, batch) in [(u.mean, &u.batch_mean), (u.var, &u.batch_var)] {
                for (r, &b) in self.values[idx].data_mut().iter_mut().zip(batch) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Stochastic depth active, batch-norm uses batch statistics.
    Train,
    Eval,
}

/// Batch statistics observed by one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate<T> {
    pub mean: usize,
    pub var: usize,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// One forward pass over a [`ParamStore`]: a fresh graph plus the bindings
/// from store entries to graph leaves.
pub struct Session<'s, T: Real> {
    pub g: Graph<T>,
    store: &'s ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    rng: Option<Rng>,
    frozen_all: bool,
    bn_updates: Vec<BnUpdate<T>>,
}

/// Parameter gradients of a finished session, indexed like the store.
pub struct StepResult<T> {
    pub loss: T,
    pub grads: Vec<Option<Tensor<T>>>,
    pub bn_updates: Vec<BnUpdate<T>>,
}

impl<'s, T: Real> Session<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode) -> Self {
        Session {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            rng: None,
            frozen_all: false,
            bn_updates: Vec::new(),
        }
    }

    /// Random source for stochastic depth.
    pub fn with_rng(mut self, rng: Rng) -> Self {
        self.rng = Some(rng);
        self
    }

    /// Binds every store entry as a constant.
    pub fn frozen(mut self) -> Self {
        self.frozen_all = true;
        self
    }

    pub fn counting_flops(mut self) -> Self {
        self.g.count_flops();
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn rng(&mut self) -> Option<&mut Rng> {
        self.rng.as_mut()
    }

    pub fn scope(&mut self, name: &str) {
        self.g.set_scope(name);
    }

    /// Graph leaf for the named tensor, created on first use.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        let i = self.store.index(name)?;
        if let Some(v) = self.bound[i] {
            return Ok(v);
        }
        let info = self.store.info(i);
        let grad = !self.frozen_all && info.is_trainable();
        let v = self.g.leaf(self.store.value(i).clone(), grad);
        self.bound[i] = Some(v);
        Ok(v)
    }

    pub fn buffer(&self, name: &str) -> Result<&'s Tensor<T>> {
        self.store.get(name)
    }

    pub(crate) fn record_bn(&mut self, mean: &str, var: &str, batch_mean: Vec<T>, batch_var: Vec<T>) -> Result<()> {
        let (mean, var) = (self.store.index(mean)?, self.store.index(var)?);
        self.bn_updates.push(BnUpdate {
            mean,
            var,
            batch_mean,
            batch_var,
        });
        Ok(())
    }

    pub fn take_flops(&mut self) -> Option<FlopCounter> {
        self.g.take_flops()
    }

    /// Statistics gathered without a backward pass.
    pub fn into_bn_updates(self) -> Vec<BnUpdate<T>> {
        self.bn_updates
    }

    pub fn backward(self, loss: Var) -> Result<StepResult<T>> {
        let value = self.g.value(loss).item();
        let bound = self.bound;
        let mut grads = self.g.backward(loss)?;
        let grads = bound
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect();
        Ok(StepResult {
            loss: value,
            grads,
            bn_updates: self.bn_updates,
        })
    }

    /// Like [`Session::backward`] but also returns gradients of extra
    /// variables (for example a knowledge token).
    pub fn backward_with(self, loss: Var, extra: &[Var]) -> Result<(StepResult<T>, Vec<Option<Tensor<T>>>)> {
        let value = self.g.value(loss).item();
        let bound = self.bound;
        let mut grads = self.g.backward(loss)?;
        let extra = extra.iter().map(|&v| grads.take(v)).collect();
        let grads = bound
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect();
        Ok((
            StepResult {
                loss: value,
                grads,
                bn_updates: self.bn_updates,
            },
            extra,
        ))
    }
}
