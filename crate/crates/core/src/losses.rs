//! Training costs and evaluation metrics.
//!
//! The `*_graph` functions build differentiable costs on a [`Graph`]; the
//! plain functions evaluate metrics on finished predictions.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-target means of the training targets; denominators of the WRMSE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetMeans(Vec<f64>);

impl TargetMeans {
    pub fn new(means: Vec<f64>) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::invalid("target means are empty"));
        }
        if let Some(m) = means.iter().find(|m| !(**m > 0.0)) {
            return Err(Error::invalid(format!(
                "target means must be positive, got {m}"
            )));
        }
        Ok(Self(means))
    }

    /// Column means of a `[n, t]` target matrix.
    pub fn from_targets(targets: &Tensor) -> Result<Self> {
        let (n, t) = match *targets.shape() {
            [n, t] if n > 0 => (n, t),
            _ => {
                return Err(Error::invalid(
                    "target means need a non-empty [n, t] matrix",
                ))
            }
        };
        let mut means = vec![0.0; t];
        for row in targets.data().chunks(t) {
            for (m, v) in means.iter_mut().zip(row) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= n as f64);
        Self::new(means)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_pair(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape {
            op: "metric",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    if pred.is_empty() {
        return Err(Error::invalid("metric of empty predictions"));
    }
    Ok(())
}

/// `sqrt(mean((ŷ − y)²))` over every entry.
pub fn rmse_graph(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    check_pair(g.value(pred), target)?;
    let y = g.constant(target.clone());
    let e = g.sub(pred, y)?;
    let sq = g.square(e)?;
    let m = g.mean(sq)?;
    g.sqrt(m)
}

/// `(1/t) Σ_t RMSE_t / ȳ_t` for `[n, t]` predictions.
pub fn wrmse_graph(g: &mut Graph, pred: Var, target: &Tensor, means: &TargetMeans) -> Result<Var> {
    check_pair(g.value(pred), target)?;
    let t = match *target.shape() {
        [_, t] if t == means.len() => t,
        _ => {
            return Err(Error::invalid(format!(
                "wrmse: {:?} targets but {} means",
                target.shape(),
                means.len()
            )))
        }
    };
    let y = g.constant(target.clone());
    let e = g.sub(pred, y)?;
    let sq = g.square(e)?;
    let col = g.mean_axis0(sq)?;
    let per_target = g.sqrt(col)?;
    let inv = Tensor::new(vec![t], means.values().iter().map(|m| 1.0 / m).collect())?;
    let weighted = g.mul_const(per_target, &inv)?;
    g.mean(weighted)
}

/// Decoupling penalty on a `[p_in, p_out]` weight matrix; see
/// [`Graph::decouple_penalty`].
pub fn decouple_penalty_graph(
    g: &mut Graph,
    weight: Var,
    lambda: f64,
    include_diagonal: bool,
) -> Result<Var> {
    g.decouple_penalty(weight, lambda, include_diagonal)
}

/// Direct evaluation of the decoupling penalty.
pub fn decouple_penalty(weight: &Tensor, lambda: f64, include_diagonal: bool) -> Result<f64> {
    let mut g = Graph::new();
    let w = g.constant(weight.clone());
    let p = g.decouple_penalty(w, lambda, include_diagonal)?;
    g.value(p).item()
}

fn errors(pred: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    if pred.len() != target.len() {
        return Err(Error::Shape {
            op: "metric",
            lhs: vec![pred.len()],
            rhs: vec![target.len()],
        });
    }
    if pred.is_empty() {
        return Err(Error::invalid("metric of empty predictions"));
    }
    Ok(pred.iter().zip(target).map(|(p, y)| y - p).collect())
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    let e = errors(pred, target)?;
    Ok((e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64).sqrt())
}

/// Per-column RMSE of `[n, t]` matrices.
pub fn rmse_columns(pred: &Tensor, target: &Tensor) -> Result<Vec<f64>> {
    check_pair(pred, target)?;
    let t = target.shape().get(1).copied().unwrap_or(1);
    (0..t)
        .map(|c| {
            let p: Vec<f64> = pred.data().iter().skip(c).step_by(t).copied().collect();
            let y: Vec<f64> = target.data().iter().skip(c).step_by(t).copied().collect();
            rmse(&p, &y)
        })
        .collect()
}

pub fn wrmse(pred: &Tensor, target: &Tensor, means: &TargetMeans) -> Result<f64> {
    let per = rmse_columns(pred, target)?;
    if per.len() != means.len() {
        return Err(Error::invalid(format!(
            "wrmse: {} targets but {} means",
            per.len(),
            means.len()
        )));
    }
    Ok(per
        .iter()
        .zip(means.values())
        .map(|(r, m)| r / m)
        .sum::<f64>()
        / per.len() as f64)
}

/// Median with the average of the two central values for even lengths.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("median of empty input"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Median absolute deviation of the prediction errors about their median.
/// Shifting every prediction by a constant leaves it unchanged.
pub fn mad(pred: &[f64], target: &[f64]) -> Result<f64> {
    let e = errors(pred, target)?;
    let m = median(&e)?;
    let dev: Vec<f64> = e.iter().map(|v| (v - m).abs()).collect();
    median(&dev)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SepR2Bias {
    pub sep: f64,
    pub r2: f64,
    pub bias: f64,
}

/// Bias is the mean error `y − ŷ`; SEP its `n − 1` standard deviation.
pub fn sep_r2_bias(pred: &[f64], target: &[f64]) -> Result<SepR2Bias> {
    let e = errors(pred, target)?;
    let n = e.len();
    if n < 2 {
        return Err(Error::invalid("SEP needs at least two samples"));
    }
    let bias = e.iter().sum::<f64>() / n as f64;
    let sep = (e.iter().map(|v| (v - bias).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let ybar = target.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = target.iter().map(|y| (y - ybar).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::numerical("R² is undefined for constant targets"));
    }
    let r2 = 1.0 - e.iter().map(|v| v * v).sum::<f64>() / ss_tot;
    Ok(SepR2Bias { sep, r2, bias })
}

/// All metrics of one target column.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetMetrics {
    pub rmse: f64,
    pub mad: f64,
    pub sep: f64,
    pub r2: f64,
    pub bias: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_target: Vec<TargetMetrics>,
    pub wrmse: Option<f64>,
}

impl MetricReport {
    pub fn compute(pred: &Tensor, target: &Tensor, means: Option<&TargetMeans>) -> Result<Self> {
        check_pair(pred, target)?;
        let t = target.shape().get(1).copied().unwrap_or(1);
        let mut per_target = Vec::with_capacity(t);
        for c in 0..t {
            let p: Vec<f64> = pred.data().iter().skip(c).step_by(t).copied().collect();
            let y: Vec<f64> = target.data().iter().skip(c).step_by(t).copied().collect();
            let srb = sep_r2_bias(&p, &y)?;
            per_target.push(TargetMetrics {
                rmse: rmse(&p, &y)?,
                mad: mad(&p, &y)?,
                sep: srb.sep,
                r2: srb.r2,
                bias: srb.bias,
            });
        }
        let wrmse = means.map(|m| wrmse(pred, target, m)).transpose()?;
        Ok(Self { per_target, wrmse })
    }
}
