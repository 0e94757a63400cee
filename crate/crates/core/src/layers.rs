//! Layers and the two shared-trunk architectures.
//!
//! Every network consists of a convolutional trunk whose parameters are keyed
//! only by architecture (so any number of networks with different input
//! lengths can share them through one [`ParamStore`]) and a private head:
//! `flatten → BN → Dense(fc1) → ReLU → BN → Dense(fc2)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPSILON: f64 = 1e-3;
pub const DROPOUT_KEEP: f64 = 0.95;
/// Number of pooling stages in the trunk.
pub const POOL_STAGES: u32 = 6;
pub const TRUNK_CHANNELS: usize = 24;
/// Smallest input length that survives six halvings.
pub const MIN_INPUT_LEN: usize = 1 << POOL_STAGES;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv1dLayer {
    pub weight: String,
    pub bias: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub filter_len: usize,
}

impl Conv1dLayer {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        filter_len: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let layer = Self {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            in_channels,
            out_channels,
            filter_len,
        };
        let wshape = [out_channels, in_channels, filter_len];
        store.register(&layer.weight, ParamKind::Trainable, &wshape, || {
            he_normal(&wshape, in_channels * filter_len, rng)
        })?;
        store.register(&layer.bias, ParamKind::Trainable, &[out_channels], || {
            Tensor::zeros(vec![out_channels])
        })?;
        Ok(layer)
    }

    /// `x: [n, in_channels, p]` → `[n, out_channels, p]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight)?;
        let b = g.param(store, &self.bias)?;
        g.conv1d(x, w, b)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchNormLayer {
    pub gamma: String,
    pub beta: String,
    pub running_mean: String,
    pub running_var: String,
    pub features: usize,
}

/// A pending running-statistics update produced by a training-mode forward.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub running_mean: String,
    pub running_var: String,
    pub stats: BatchStats,
}

impl BatchNormLayer {
    pub fn register(store: &mut ParamStore, prefix: &str, features: usize) -> Result<Self> {
        let layer = Self {
            gamma: format!("{prefix}.gamma"),
            beta: format!("{prefix}.beta"),
            running_mean: format!("{prefix}.running_mean"),
            running_var: format!("{prefix}.running_var"),
            features,
        };
        let s = [features];
        store.register(&layer.gamma, ParamKind::Trainable, &s, || {
            Tensor::full(vec![features], 1.0)
        })?;
        store.register(&layer.beta, ParamKind::Trainable, &s, || {
            Tensor::zeros(vec![features])
        })?;
        store.register(&layer.running_mean, ParamKind::Buffer, &s, || {
            Tensor::zeros(vec![features])
        })?;
        store.register(&layer.running_var, ParamKind::Buffer, &s, || {
            Tensor::full(vec![features], 1.0)
        })?;
        Ok(layer)
    }

    /// Train mode normalises with batch statistics and queues a running-stat
    /// update; eval mode uses the running statistics. A layer whose scale is
    /// frozen always behaves as in eval mode.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mode: Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let gamma = g.param(store, &self.gamma)?;
        let beta = g.param(store, &self.beta)?;
        if mode == Mode::Train && !store.is_frozen(&self.gamma)? {
            let (y, stats) = g.batch_norm_train(x, gamma, beta, BN_EPSILON)?;
            updates.push(BnUpdate {
                running_mean: self.running_mean.clone(),
                running_var: self.running_var.clone(),
                stats,
            });
            Ok(y)
        } else {
            let mean = store.get(&self.running_mean)?.data().to_vec();
            let var = store.get(&self.running_var)?.data().to_vec();
            g.batch_norm_eval(x, gamma, beta, &mean, &var, BN_EPSILON)
        }
    }
}

/// Folds batch statistics into running statistics:
/// `running ← momentum · running + (1 − momentum) · batch`.
/// Frozen buffers are left alone.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) -> Result<()> {
    for u in updates {
        for (id, batch) in [
            (&u.running_mean, &u.stats.mean),
            (&u.running_var, &u.stats.var),
        ] {
            if store.is_frozen(id)? {
                continue;
            }
            let slot = store.get_mut(id)?;
            for (r, b) in slot.data_mut().iter_mut().zip(batch) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
    }
    Ok(())
}

/// Drops whole channels with probability `1 − p_keep` and rescales the
/// survivors by `1 / p_keep`; identity in eval mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialDropoutLayer {
    pub p_keep: f64,
}

impl Default for SpatialDropoutLayer {
    fn default() -> Self {
        Self {
            p_keep: DROPOUT_KEEP,
        }
    }
}

impl SpatialDropoutLayer {
    pub fn sample_mask(&self, batch: usize, channels: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..batch * channels)
            .map(|_| {
                if rng.random::<f64>() < self.p_keep {
                    1.0 / self.p_keep
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode, rng: &mut impl Rng) -> Result<Var> {
        if mode == Mode::Eval || self.p_keep >= 1.0 {
            return Ok(x);
        }
        let shape = g.value(x).shape().to_vec();
        let (n, c) = (shape[0], shape[1]);
        let mask = self.sample_mask(n, c, rng);
        g.channel_scale(x, mask)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: String,
    pub bias: String,
    pub in_units: usize,
    pub out_units: usize,
}

impl DenseLayer {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        in_units: usize,
        out_units: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let layer = Self {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            in_units,
            out_units,
        };
        let ws = [in_units, out_units];
        store.register(&layer.weight, ParamKind::Trainable, &ws, || {
            he_normal(&ws, in_units, rng)
        })?;
        store.register(&layer.bias, ParamKind::Trainable, &[out_units], || {
            Tensor::zeros(vec![out_units])
        })?;
        Ok(layer)
    }

    /// `x: [n, in_units]` → `x · W + b`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight)?;
        let b = g.param(store, &self.bias)?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TrunkLayer {
    /// Convolution followed by ReLU.
    Conv(Conv1dLayer),
    MaxPool,
    BatchNorm(BatchNormLayer),
    Dropout(SpatialDropoutLayer),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    /// Filter lengths 11, 11, 11, 11, 6, 6.
    One,
    /// Filter lengths 11, 11, 8, 8, 6, 6.
    Two,
}

impl Architecture {
    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            1 => Ok(Self::One),
            2 => Ok(Self::Two),
            other => Err(Error::invalid(format!(
                "unknown architecture id {other} (expected 1 or 2)"
            ))),
        }
    }

    pub fn id(self) -> u8 {
        match self {
            Self::One => 1,
            Self::Two => 2,
        }
    }

    pub fn filter_lengths(self) -> [usize; 6] {
        match self {
            Self::One => [11, 11, 11, 11, 6, 6],
            Self::Two => [11, 11, 8, 8, 6, 6],
        }
    }

    pub fn channels(self) -> [usize; 6] {
        [8, 8, 16, 16, 24, 24]
    }

    pub fn trunk_prefix(self) -> String {
        format!("trunk.arch{}", self.id())
    }
}

/// Builds the shared convolutional stack. Calling this twice on the same
/// store yields layers referring to the same parameters.
pub fn build_trunk(
    arch: Architecture,
    store: &mut ParamStore,
    rng: &mut impl Rng,
) -> Result<Vec<TrunkLayer>> {
    let prefix = arch.trunk_prefix();
    let filters = arch.filter_lengths();
    let channels = arch.channels();
    let mut layers = Vec::new();
    let mut in_ch = 1;
    for (i, (&k, &out_ch)) in filters.iter().zip(&channels).enumerate() {
        let conv =
            Conv1dLayer::register(store, &format!("{prefix}.conv{i}"), in_ch, out_ch, k, rng)?;
        layers.push(TrunkLayer::Conv(conv));
        layers.push(TrunkLayer::MaxPool);
        // dropout after every second block; batch norm between blocks
        if i % 2 == 1 {
            layers.push(TrunkLayer::Dropout(SpatialDropoutLayer::default()));
        }
        if i < filters.len() - 1 {
            layers.push(TrunkLayer::BatchNorm(BatchNormLayer::register(
                store,
                &format!("{prefix}.bn{i}"),
                out_ch,
            )?));
        }
        in_ch = out_ch;
    }
    Ok(layers)
}

/// Length after `POOL_STAGES` floor-halvings.
pub fn pooled_len(input_len: usize) -> usize {
    input_len >> POOL_STAGES
}

pub fn flatten_len(input_len: usize) -> usize {
    TRUNK_CHANNELS * pooled_len(input_len)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Unique per network within a store; prefixes the head parameter ids.
    pub name: String,
    pub arch: Architecture,
    pub input_len: usize,
    pub fc1: usize,
    pub fc2: usize,
}

impl NetworkSpec {
    pub fn new(
        name: impl Into<String>,
        arch: Architecture,
        input_len: usize,
        fc1: usize,
        fc2: usize,
    ) -> Self {
        Self {
            name: name.into(),
            arch,
            input_len,
            fc1,
            fc2,
        }
    }
}

/// Output of a forward pass.
#[derive(Debug)]
pub struct Forward {
    /// `[batch, targets]` predictions.
    pub output: Var,
    pub bn_updates: Vec<BnUpdate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub spec: NetworkSpec,
    pub trunk: Vec<TrunkLayer>,
    pub flatten_bn: BatchNormLayer,
    pub fc1: DenseLayer,
    pub head_bn: BatchNormLayer,
    pub fc2: DenseLayer,
}

pub fn build_network(
    spec: &NetworkSpec,
    store: &mut ParamStore,
    rng: &mut impl Rng,
) -> Result<Network> {
    if spec.input_len < MIN_INPUT_LEN {
        return Err(Error::invalid(format!(
            "input length {} is too short; the trunk needs at least {MIN_INPUT_LEN}",
            spec.input_len
        )));
    }
    if spec.fc1 == 0 || spec.fc2 == 0 {
        return Err(Error::invalid("head widths must be positive"));
    }
    let trunk = build_trunk(spec.arch, store, rng)?;
    let head = format!("{}.arch{}", spec.name, spec.arch.id());
    let flat = flatten_len(spec.input_len);
    let flatten_bn = BatchNormLayer::register(store, &format!("{head}.flatten_bn"), flat)?;
    let fc1 = DenseLayer::register(store, &format!("{head}.fc1"), flat, spec.fc1, rng)?;
    let head_bn = BatchNormLayer::register(store, &format!("{head}.head_bn"), spec.fc1)?;
    let fc2 = DenseLayer::register(store, &format!("{head}.fc2"), spec.fc1, spec.fc2, rng)?;
    Ok(Network {
        spec: spec.clone(),
        trunk,
        flatten_bn,
        fc1,
        head_bn,
        fc2,
    })
}

fn bn_ids(bn: &BatchNormLayer) -> [String; 4] {
    [
        bn.gamma.clone(),
        bn.beta.clone(),
        bn.running_mean.clone(),
        bn.running_var.clone(),
    ]
}

impl Network {
    pub fn input_len(&self) -> usize {
        self.spec.input_len
    }

    pub fn outputs(&self) -> usize {
        self.spec.fc2
    }

    pub fn flatten_len(&self) -> usize {
        flatten_len(self.spec.input_len)
    }

    /// Ids of trunk parameters and buffers, in layer order.
    pub fn trunk_param_ids(&self) -> Vec<String> {
        let mut ids = Vec::new();
        for layer in &self.trunk {
            match layer {
                TrunkLayer::Conv(c) => ids.extend([c.weight.clone(), c.bias.clone()]),
                TrunkLayer::BatchNorm(bn) => ids.extend(bn_ids(bn)),
                TrunkLayer::MaxPool | TrunkLayer::Dropout(_) => {}
            }
        }
        ids
    }

    /// Ids of the private head parameters and buffers.
    pub fn head_param_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = bn_ids(&self.flatten_bn).into();
        ids.extend([self.fc1.weight.clone(), self.fc1.bias.clone()]);
        ids.extend(bn_ids(&self.head_bn));
        ids.extend([self.fc2.weight.clone(), self.fc2.bias.clone()]);
        ids
    }

    pub fn param_ids(&self) -> Vec<String> {
        let mut ids = self.trunk_param_ids();
        ids.extend(self.head_param_ids());
        ids
    }

    /// Forward pass for a `[batch, input_len]` block of spectra.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Tensor,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Forward> {
        let n = match *batch.shape() {
            [n, p] if p == self.spec.input_len => n,
            [_, p] => {
                return Err(Error::invalid(format!(
                    "network {} expects input length {}, got {p}",
                    self.spec.name, self.spec.input_len
                )))
            }
            _ => {
                return Err(Error::invalid(format!(
                    "network input must be [batch, length], got {:?}",
                    batch.shape()
                )))
            }
        };
        let mut updates = Vec::new();
        let x = g.constant(batch.reshape(vec![n, 1, self.spec.input_len])?);
        let mut h = x;
        for layer in &self.trunk {
            h = match layer {
                TrunkLayer::Conv(c) => {
                    let y = c.forward(g, store, h)?;
                    g.relu(y)
                }
                TrunkLayer::MaxPool => g.maxpool2(h)?,
                TrunkLayer::BatchNorm(bn) => bn.forward(g, store, h, mode, &mut updates)?,
                TrunkLayer::Dropout(d) => d.forward(g, h, mode, rng)?,
            };
        }
        let flat = g.reshape(h, &[n, self.flatten_len()])?;
        let h = self
            .flatten_bn
            .forward(g, store, flat, mode, &mut updates)?;
        let h = self.fc1.forward(g, store, h)?;
        let h = g.relu(h);
        let h = self.head_bn.forward(g, store, h, mode, &mut updates)?;
        let output = self.fc2.forward(g, store, h)?;
        Ok(Forward {
            output,
            bn_updates: updates,
        })
    }

    /// Eval-mode predictions, processed in chunks, without keeping a graph.
    pub fn predict(&self, store: &ParamStore, spectra: &Tensor, chunk: usize) -> Result<Tensor> {
        let n = spectra.shape().first().copied().unwrap_or(0);
        let mut out = Vec::with_capacity(n * self.outputs());
        // eval mode never samples dropout masks
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let idx: Vec<usize> = (0..n).collect();
        for rows in idx.chunks(chunk.max(1)) {
            let block = spectra.select_rows(rows)?;
            let mut g = Graph::new();
            let f = self.forward(&mut g, store, &block, Mode::Eval, &mut rng)?;
            out.extend_from_slice(g.value(f.output).data());
        }
        Tensor::new(vec![n, self.outputs()], out)
    }
}
