//! Reusing a pretrained trunk on a dataset with a different input length.
//!
//! With [`ResizeMode::WeightShare`] the trunk is applied at the new length
//! directly and only the head is sized for it. The other two resize modes
//! map the new spectra onto the pretrained length first, by padding or by
//! cubic-spline resampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataio::DatasetBundle;
use crate::error::{Error, Result};
use crate::layers::{build_network, Network, NetworkSpec};
use crate::params::ParamStore;
use crate::training::{train_single, Task, TrainConfig, TrainOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Trunk frozen; only the head learns.
    Stop,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMode {
    WeightShare,
    Pad,
    Spline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferMode {
    pub gradient: GradientMode,
    pub resize: ResizeMode,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadValue {
    /// Repeat the first and last value.
    #[default]
    Edge,
    Zero,
}

/// Pads `x` to length `q`, `floor((q − p)/2)` values on the left and the
/// rest on the right.
pub fn pad_spectra(x: &[f64], q: usize, value: PadValue) -> Result<Vec<f64>> {
    let p = x.len();
    if q < p {
        return Err(Error::invalid(format!(
            "cannot pad a spectrum of length {p} down to {q}"
        )));
    }
    if p == 0 {
        return Err(Error::invalid("cannot pad an empty spectrum"));
    }
    let left = (q - p) / 2;
    let right = q - p - left;
    let (lv, rv) = match value {
        PadValue::Edge => (x[0], x[p - 1]),
        PadValue::Zero => (0.0, 0.0),
    };
    let mut out = Vec::with_capacity(q);
    out.resize(left, lv);
    out.extend_from_slice(x);
    out.resize(left + p + right, rv);
    Ok(out)
}

/// Second derivatives of the natural cubic spline through `y` at unit
/// knot spacing (Thomas algorithm on the tridiagonal system).
fn natural_second_derivatives(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    let inner = n - 2;
    let mut diag = vec![4.0; inner];
    let mut rhs: Vec<f64> = (1..n - 1)
        .map(|i| 6.0 * (y[i + 1] - 2.0 * y[i] + y[i - 1]))
        .collect();
    for i in 1..inner {
        let f = 1.0 / diag[i - 1];
        diag[i] -= f;
        rhs[i] -= f * rhs[i - 1];
    }
    m[inner] = rhs[inner - 1] / diag[inner - 1];
    for i in (0..inner - 1).rev() {
        m[i + 1] = (rhs[i] - m[i + 2]) / diag[i];
    }
    m
}

/// Resamples `x` to `q` points with a natural cubic spline. Knots sit at
/// `i/(p−1)` and samples at `j/(q−1)`, so both endpoints are kept exactly.
pub fn spline_resample(x: &[f64], q: usize) -> Result<Vec<f64>> {
    let p = x.len();
    if p < 4 {
        return Err(Error::invalid(format!(
            "spline resampling needs at least 4 points, got {p}"
        )));
    }
    if q < 2 {
        return Err(Error::invalid("spline target length must be at least 2"));
    }
    let m = natural_second_derivatives(x);
    let out = (0..q)
        .map(|j| {
            // position in knot-index units
            let s = (j * (p - 1)) as f64 / (q - 1) as f64;
            let i = (s.floor() as usize).min(p - 2);
            let b = s - i as f64;
            let a = 1.0 - b;
            a * x[i] + b * x[i + 1] + ((a * a * a - a) * m[i] + (b * b * b - b) * m[i + 1]) / 6.0
        })
        .collect();
    Ok(out)
}

/// Input length a network needs when reusing a trunk pretrained at
/// `pretrained_len` on data of length `data_len`.
pub fn network_input_len(resize: ResizeMode, pretrained_len: usize, data_len: usize) -> usize {
    match resize {
        ResizeMode::WeightShare => data_len,
        ResizeMode::Pad | ResizeMode::Spline => pretrained_len,
    }
}

/// Resizes every spectrum of `bundle` for the given mode.
pub fn resize_bundle(
    bundle: &DatasetBundle,
    resize: ResizeMode,
    target_len: usize,
    pad: PadValue,
) -> Result<DatasetBundle> {
    match resize {
        ResizeMode::WeightShare => Ok(bundle.clone()),
        ResizeMode::Pad => bundle.map_spectra(|x| pad_spectra(x, target_len, pad)),
        ResizeMode::Spline => bundle.map_spectra(|x| spline_resample(x, target_len)),
    }
}

/// Builds `spec` in a fresh store with a newly initialised head and the
/// trunk copied from `source` (EMA values for trainable parameters, saved
/// running statistics for buffers). In stop mode the trunk is frozen.
pub fn transfer_trunk(
    source: &Checkpoint,
    spec: &NetworkSpec,
    mode: TransferMode,
    rng: &mut impl Rng,
) -> Result<(Network, ParamStore)> {
    let Some(src) = source.nets.iter().find(|r| r.spec.arch == spec.arch) else {
        return Err(Error::invalid(format!(
            "checkpoint has no network with architecture {}",
            spec.arch.id()
        )));
    };
    if mode.resize != ResizeMode::WeightShare && spec.input_len != src.spec.input_len {
        return Err(Error::invalid(format!(
            "resized transfer needs input length {}, got {}",
            src.spec.input_len, spec.input_len
        )));
    }
    let weights = source.eval_store()?;
    let mut store = ParamStore::new();
    let net = build_network(spec, &mut store, rng)?;
    for id in net.trunk_param_ids() {
        let value = weights
            .get(&id)
            .map_err(|_| Error::data(format!("checkpoint lacks trunk parameter {id}")))?;
        store.set(&id, value.clone())?;
        store.set_frozen(&id, mode.gradient == GradientMode::Stop)?;
    }
    Ok((net, store))
}

/// Trains a transferred network. Frozen parameters never enter a gradient
/// map, so the optimizer holds no state for them and they stay bitwise
/// unchanged.
pub fn finetune(
    task: &Task<'_>,
    store: &mut ParamStore,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_single(task, store, config)
}
