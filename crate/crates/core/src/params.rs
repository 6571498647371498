//! Named parameter storage and the per-forward [`Session`] that binds
//! parameters onto a fresh tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{lit, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a stored tensor is; decides weight decay and whether it is learnable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Matrices and convolution kernels. The only decayed group.
    Weight,
    Bias,
    /// Affine terms of layer and batch normalization.
    Norm,
    /// Learnable positional codes, part prototypes, relative tables.
    Code,
    /// Non-learnable running statistics.
    Buffer,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }

    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.entries.push(ParamEntry {
            name: name.into(),
            kind,
            value,
            grad,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Replaces a value, keeping the shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::shape("set_param", e.value.shape(), value.shape()));
        }
        e.value = value;
        Ok(())
    }

    /// Number of learnable scalars.
    pub fn count_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind.trainable())
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Global L2 norm of the accumulated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.grad.data())
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

/// Parameter initialization policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    /// Truncated normal (std 0.02) matrices and codes, fan-in scaled
    /// convolutions, zero biases, unit norms, and zeroed residual-branch
    /// outputs so every block starts as the identity.
    Standard,
    /// Every learnable tensor drawn from N(0, std²) (norm scales around 1).
    /// Used for gradient and oracle checks, where zero-initialized branches
    /// would hide whole sub-graphs.
    Dense { std: f64 },
}

/// Allocates parameters into a store with a seeded initializer.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    scheme: InitScheme,
    prefix: Vec<String>,
}

pub(crate) fn trunc_normal(rng: &mut impl Rng, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Role of a weight, which picks its initializer under [`InitScheme::Standard`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightInit {
    TruncNormal,
    FanIn(usize),
    Zero,
    Identity,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64, scheme: InitScheme) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            scheme,
            prefix: Vec::new(),
        }
    }

    pub fn push_scope(&mut self, name: impl Into<String>) {
        self.prefix.push(name.into());
    }

    pub fn pop_scope(&mut self) {
        self.prefix.pop();
    }

    fn full_name(&self, name: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(name);
        s
    }

    fn dense(&mut self, shape: &[usize], center: f64) -> Option<Tensor<T>> {
        match self.scheme {
            InitScheme::Dense { std } => {
                let rng = &mut self.rng;
                Some(Tensor::from_fn(shape, |_| lit(center + trunc_normal(rng, std))))
            }
            InitScheme::Standard => None,
        }
    }

    pub fn weight(&mut self, name: &str, shape: &[usize], init: WeightInit) -> ParamId {
        let value = self.dense(shape, 0.0).unwrap_or_else(|| {
            let rng = &mut self.rng;
            match init {
                WeightInit::TruncNormal => Tensor::from_fn(shape, |_| lit(trunc_normal(rng, 0.02))),
                WeightInit::FanIn(fan_in) => {
                    let std = (2.0 / fan_in.max(1) as f64).sqrt();
                    Tensor::from_fn(shape, |_| lit(trunc_normal(rng, std)))
                }
                WeightInit::Zero => Tensor::zeros(shape),
                WeightInit::Identity => {
                    let cols = *shape.last().unwrap_or(&1);
                    Tensor::from_fn(shape, |i| if i / cols == i % cols { T::one() } else { T::zero() })
                }
            }
        });
        let name = self.full_name(name);
        self.store.add(name, ParamKind::Weight, value)
    }

    pub fn bias(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let value = self.dense(shape, 0.0).unwrap_or_else(|| Tensor::zeros(shape));
        let name = self.full_name(name);
        self.store.add(name, ParamKind::Bias, value)
    }

    pub fn code(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let value = self.dense(shape, 0.0).unwrap_or_else(|| {
            let rng = &mut self.rng;
            Tensor::from_fn(shape, |_| lit(trunc_normal(rng, 0.02)))
        });
        let name = self.full_name(name);
        self.store.add(name, ParamKind::Code, value)
    }

    pub fn norm(&mut self, name: &str, channels: usize) -> LayerNorm {
        let g = self
            .dense(&[channels], 1.0)
            .unwrap_or_else(|| Tensor::ones(&[channels]));
        let b = self.dense(&[channels], 0.0).unwrap_or_else(|| Tensor::zeros(&[channels]));
        let gamma = self.store.add(self.full_name(&format!("{name}.weight")), ParamKind::Norm, g);
        let beta = self.store.add(self.full_name(&format!("{name}.bias")), ParamKind::Norm, b);
        LayerNorm { gamma, beta }
    }

    pub fn buffer(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let name = self.full_name(name);
        self.store.add(name, ParamKind::Buffer, value)
    }

    /// `x·W + b` with `W` stored `[in, out]`.
    pub fn linear(&mut self, name: &str, input: usize, output: usize, init: WeightInit) -> Linear {
        let weight = self.weight(&format!("{name}.weight"), &[input, output], init);
        let bias = self.bias(&format!("{name}.bias"), &[output]);
        Linear { weight, bias }
    }

    /// Pre-normalized two-layer perceptron `W2·σ(W1·LN(x))`.
    pub fn mlp(&mut self, name: &str, channels: usize, hidden: usize) -> Mlp {
        self.push_scope(name);
        let norm = self.norm("norm", channels);
        let fc1 = self.linear("fc1", channels, hidden, WeightInit::TruncNormal);
        let fc2 = self.linear("fc2", hidden, channels, WeightInit::Zero);
        self.pop_scope();
        Mlp { norm, fc1, fc2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mlp {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub const LN_EPS: f64 = 1e-6;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Whether a forward pass is a training pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward (and optionally backward) pass over a [`ParamStore`].
///
/// Parameters are bound to the tape lazily, so parameters that a pass never
/// touches stay off the graph and report zero gradient.
pub struct Session<'a, T> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    rng: ChaCha8Rng,
    buffer_updates: Vec<(ParamId, Tensor<T>)>,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode, seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            buffer_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Tape handle of a stored parameter.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let e = self.store.entry(id);
        let v = self.tape.leaf(e.value.clone(), e.kind.trainable());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.tape.constant(value)
    }

    pub fn linear(&mut self, x: Var, l: &Linear) -> Result<Var> {
        let w = self.param(l.weight);
        let b = self.param(l.bias);
        let y = self.tape.matmul(x, w)?;
        self.tape.add(y, b)
    }

    pub fn layer_norm(&mut self, x: Var, n: &LayerNorm) -> Result<Var> {
        let g = self.param(n.gamma);
        let b = self.param(n.beta);
        self.tape.layer_norm(x, g, b, LN_EPS)
    }

    /// `W2·σ(W1·LN(x))` without the residual.
    pub fn mlp(&mut self, x: Var, m: &Mlp) -> Result<Var> {
        let h = self.layer_norm(x, &m.norm)?;
        let h = self.linear(h, &m.fc1)?;
        let h = self.tape.gelu(h);
        self.linear(h, &m.fc2)
    }

    /// Batch normalization over every axis but the last. Training passes
    /// normalize with batch statistics and queue a running-estimate update;
    /// evaluation passes use the running estimates.
    pub fn batch_norm(&mut self, x: Var, n: &BatchNorm) -> Result<Var> {
        let gamma = self.param(n.affine.gamma);
        let beta = self.param(n.affine.beta);
        match self.mode {
            Mode::Train => {
                let (y, mean, var) = self.tape.batch_norm(x, gamma, beta, BN_EPS)?;
                let rows = self.tape.value(x).numel() / mean.len().max(1);
                let m: T = lit(BN_MOMENTUM);
                let keep = T::one() - m;
                let unbias: T = lit(rows as f64 / (rows.max(2) - 1) as f64);
                let rm = self.store.get(n.running_mean);
                let rv = self.store.get(n.running_var);
                let new_mean = Tensor::from_fn(rm.shape(), |j| keep * rm.data()[j] + m * mean[j]);
                let new_var = Tensor::from_fn(rv.shape(), |j| keep * rv.data()[j] + m * var[j] * unbias);
                self.buffer_updates.push((n.running_mean, new_mean));
                self.buffer_updates.push((n.running_var, new_var));
                Ok(y)
            }
            Mode::Eval => {
                let rm = self.store.get(n.running_mean);
                let rv = self.store.get(n.running_var);
                let eps: T = lit(BN_EPS);
                let scale = Tensor::from_fn(rv.shape(), |j| T::one() / (rv.data()[j] + eps).sqrt());
                let shift = Tensor::from_fn(rm.shape(), |j| -rm.data()[j] * scale.data()[j]);
                let s = self.tape.constant(scale);
                let t = self.tape.constant(shift);
                let y = self.tape.mul(x, s)?;
                let y = self.tape.add(y, t)?;
                let y = self.tape.mul(y, gamma)?;
                self.tape.add(y, beta)
            }
        }
    }

    /// Stochastic depth on a residual branch `[B, ...]`: each sample's branch
    /// is kept with probability `1 − rate` and rescaled by `1/(1 − rate)`.
    /// Identity in evaluation mode or at rate zero.
    pub fn drop_path(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !self.training() || rate <= 0.0 {
            return Ok(x);
        }
        let shape = self.tape.shape(x).to_vec();
        let mask = drop_path_mask::<T>(shape[0], rate, &mut self.rng);
        let mut mshape = vec![1; shape.len()];
        mshape[0] = shape[0];
        let m = self.tape.constant(Tensor::new(&mshape, mask)?);
        self.tape.mul(x, m)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradient of the last backward target for every stored parameter
    /// (zeros for parameters not on the graph).
    pub fn param_grad(&self, id: ParamId) -> Tensor<T> {
        self.bound[id.0]
            .and_then(|v| self.tape.grad(v))
            .unwrap_or_else(|| Tensor::zeros(self.store.get(id).shape()))
    }

    /// Consumes the session, returning accumulated-gradient contributions
    /// and queued running-statistic updates.
    pub fn finish(self) -> SessionOutput<T> {
        let grads = (0..self.store.len())
            .map(|i| {
                let id = ParamId(i);
                if self.store.entry(id).kind.trainable() {
                    self.bound[i].and_then(|v| self.tape.grad(v))
                } else {
                    None
                }
            })
            .collect();
        SessionOutput {
            grads,
            buffer_updates: self.buffer_updates,
        }
    }
}

pub struct SessionOutput<T> {
    pub grads: Vec<Option<Tensor<T>>>,
    pub buffer_updates: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Scalar> SessionOutput<T> {
    /// Adds gradients into the store (`+=`) and applies buffer updates.
    pub fn apply(self, store: &mut ParamStore<T>) {
        for (e, g) in store.entries_mut().iter_mut().zip(self.grads) {
            if let Some(g) = g {
                for (a, b) in e.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
        }
        for (id, v) in self.buffer_updates {
            store.entries_mut()[id.0].value = v;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchNorm {
    pub affine: LayerNorm,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl<T: Scalar> ParamBuilder<'_, T> {
    pub fn batch_norm(&mut self, name: &str, channels: usize) -> BatchNorm {
        let affine = self.norm(name, channels);
        let running_mean = self.buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels]));
        let running_var = self.buffer(&format!("{name}.running_var"), Tensor::ones(&[channels]));
        BatchNorm {
            affine,
            running_mean,
            running_var,
        }
    }
}

/// Per-sample keep/scale factors for stochastic depth.
pub fn drop_path_mask<T: Scalar>(batch: usize, rate: f64, rng: &mut impl Rng) -> Vec<T> {
    let keep = 1.0 - rate;
    let scale: T = lit(1.0 / keep);
    (0..batch)
        .map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() })
        .collect()
}
