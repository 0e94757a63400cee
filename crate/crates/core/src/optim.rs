//! Adam, parameter EMA and the patience-based learning-rate schedule.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;
pub const EMA_DECAY: f64 = 0.99;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Bias-corrected Adam. Moments are created lazily the first time a
/// parameter appears in a gradient map, and each parameter keeps its own
/// step count so that sparse updates (one network at a time) are corrected
/// consistently.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    moments: IndexMap<String, Moments>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
            moments: IndexMap::new(),
        }
    }

    pub fn step_count(&self, id: &str) -> u64 {
        self.moments.get(id).map_or(0, |m| m.step)
    }

    pub fn first_moment(&self, id: &str) -> Option<&[f64]> {
        self.moments.get(id).map(|m| m.m.as_slice())
    }

    pub fn tracked(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }

    /// Applies one update to every parameter in `grads`. Parameters missing
    /// from the map are not touched. Frozen parameters are rejected.
    pub fn step(&mut self, store: &mut ParamStore, grads: &IndexMap<String, Tensor>) -> Result<()> {
        for (id, g) in grads {
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical(format!("non-finite gradient for {id}")));
            }
            let entry = store.entry(id)?;
            if entry.frozen || entry.kind != ParamKind::Trainable {
                return Err(Error::invalid(format!(
                    "{id} is not an updatable parameter"
                )));
            }
            if entry.value.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: entry.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        for (id, g) in grads {
            let mom = self.moments.entry(id.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                step: 0,
            });
            mom.step += 1;
            let t = mom.step as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let value = store.get_mut(id)?;
            for (i, (p, &gv)) in value.data_mut().iter_mut().zip(g.data()).enumerate() {
                mom.m[i] = self.beta1 * mom.m[i] + (1.0 - self.beta1) * gv;
                mom.v[i] = self.beta2 * mom.v[i] + (1.0 - self.beta2) * gv * gv;
                let mhat = mom.m[i] / c1;
                let vhat = mom.v[i] / c2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Exponential moving average of the trainable parameters:
/// `shadow ← γ · shadow + (1 − γ) · value`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ema {
    pub decay: f64,
    shadows: IndexMap<String, Tensor>,
}

impl Ema {
    /// Shadows start at the current parameter values. Frozen parameters are
    /// not shadowed since they never move.
    pub fn new(store: &ParamStore, decay: f64) -> Self {
        let shadows = store
            .iter()
            .filter(|(_, e)| e.kind == ParamKind::Trainable && !e.frozen)
            .map(|(id, e)| (id.to_string(), e.value.clone()))
            .collect();
        Self { decay, shadows }
    }

    pub fn from_shadows(shadows: IndexMap<String, Tensor>, decay: f64) -> Self {
        Self { decay, shadows }
    }

    pub fn shadows(&self) -> &IndexMap<String, Tensor> {
        &self.shadows
    }

    pub fn shadow(&self, id: &str) -> Option<&Tensor> {
        self.shadows.get(id)
    }

    pub fn update(&mut self, store: &ParamStore) -> Result<()> {
        for (id, shadow) in self.shadows.iter_mut() {
            let value = store.get(id)?;
            if value.shape() != shadow.shape() {
                return Err(Error::Shape {
                    op: "ema_update",
                    lhs: shadow.shape().to_vec(),
                    rhs: value.shape().to_vec(),
                });
            }
            for (s, v) in shadow.data_mut().iter_mut().zip(value.data()) {
                *s = self.decay * *s + (1.0 - self.decay) * v;
            }
        }
        Ok(())
    }

    /// A copy of `store` with every shadowed parameter replaced by its
    /// shadow. Buffers (running statistics) are copied as they are.
    pub fn apply_to(&self, store: &ParamStore) -> Result<ParamStore> {
        let mut out = store.clone();
        for (id, shadow) in &self.shadows {
            out.set(id, shadow.clone())?;
        }
        Ok(out)
    }
}

/// Halves the learning rate after `patience` consecutive evaluations
/// without improvement, never going below `min_lr`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr: f64,
    pub min_lr: f64,
    pub factor: f64,
    pub patience: usize,
    streak: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrStep {
    pub lr: f64,
    pub dropped: bool,
    /// Patience ran out while already at the floor.
    pub exhausted: bool,
}

impl LrSchedule {
    pub fn new(lr: f64, min_lr: f64, factor: f64, patience: usize) -> Result<Self> {
        if min_lr > lr {
            return Err(Error::invalid(format!(
                "min lr {min_lr} exceeds initial lr {lr}"
            )));
        }
        if patience == 0 {
            return Err(Error::invalid("patience must be at least 1"));
        }
        if factor <= 1.0 {
            return Err(Error::invalid("lr drop factor must exceed 1"));
        }
        Ok(Self {
            lr,
            min_lr,
            factor,
            patience,
            streak: 0,
        })
    }

    pub fn streak(&self) -> usize {
        self.streak
    }

    pub fn step(&mut self, improved: bool) -> LrStep {
        if improved {
            self.streak = 0;
            return LrStep {
                lr: self.lr,
                dropped: false,
                exhausted: false,
            };
        }
        self.streak += 1;
        if self.streak < self.patience {
            return LrStep {
                lr: self.lr,
                dropped: false,
                exhausted: false,
            };
        }
        self.streak = 0;
        if self.lr <= self.min_lr {
            return LrStep {
                lr: self.lr,
                dropped: false,
                exhausted: true,
            };
        }
        self.lr = (self.lr / self.factor).max(self.min_lr);
        LrStep {
            lr: self.lr,
            dropped: true,
            exhausted: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Vec<f64>)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (id, v) in values {
            let t = Tensor::from_vec(v.clone());
            s.register(id, ParamKind::Trainable, t.shape(), || t.clone())
                .unwrap();
        }
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = store_with(&[("a", vec![1.0, -2.0])]);
        let mut adam = Adam::new(1e-3);
        let grads: IndexMap<_, _> = [("a".to_string(), Tensor::zeros(vec![2]))]
            .into_iter()
            .collect();
        adam.step(&mut store, &grads).unwrap();
        assert_eq!(store.get("a").unwrap().data(), &[1.0, -2.0]);
        assert_eq!(adam.first_moment("a").unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn first_step_has_magnitude_lr() {
        let mut store = store_with(&[("a", vec![0.0, 0.0])]);
        let mut adam = Adam::new(1e-3);
        let grads: IndexMap<_, _> = [("a".to_string(), Tensor::from_vec(vec![0.5, -3.0]))]
            .into_iter()
            .collect();
        adam.step(&mut store, &grads).unwrap();
        let v = store.get("a").unwrap().data();
        assert!((v[0] + 1e-3).abs() < 1e-10, "{}", v[0]);
        assert!((v[1] - 1e-3).abs() < 1e-10, "{}", v[1]);
    }

    #[test]
    fn sparse_gradient_map() {
        let mut store = store_with(&[("a", vec![1.0]), ("b", vec![2.0])]);
        let mut adam = Adam::new(1e-2);
        let grads: IndexMap<_, _> = [("a".to_string(), Tensor::from_vec(vec![1.0]))]
            .into_iter()
            .collect();
        adam.step(&mut store, &grads).unwrap();
        assert_eq!(
            store.get("b").unwrap().data()[0].to_bits(),
            2.0f64.to_bits()
        );
        assert_ne!(store.get("a").unwrap().data()[0], 1.0);
    }

    #[test]
    fn nan_gradient_fails_fast() {
        let mut store = store_with(&[("a", vec![1.0])]);
        let mut adam = Adam::new(1e-2);
        let grads: IndexMap<_, _> = [("a".to_string(), Tensor::from_vec(vec![f64::NAN]))]
            .into_iter()
            .collect();
        assert!(matches!(
            adam.step(&mut store, &grads),
            Err(Error::Numerical(_))
        ));
        assert_eq!(store.get("a").unwrap().data(), &[1.0]);
    }

    #[test]
    fn ema_fixed_point_and_geometric_series() {
        let store = store_with(&[("a", vec![1.0])]);
        let mut ema = Ema::new(&store, EMA_DECAY);
        ema.update(&store).unwrap();
        assert_eq!(ema.shadow("a").unwrap().data(), &[1.0]);

        let zero = store_with(&[("a", vec![0.0])]);
        let mut ema = Ema::new(&zero, EMA_DECAY);
        ema.update(&store).unwrap();
        assert!((ema.shadow("a").unwrap().data()[0] - 0.01).abs() < 1e-15);
        for t in 2..=50 {
            ema.update(&store).unwrap();
            let expect = 1.0 - EMA_DECAY.powi(t);
            assert!((ema.shadow("a").unwrap().data()[0] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn ema_detects_shape_drift() {
        let store = store_with(&[("a", vec![1.0])]);
        let mut ema = Ema::new(&store, EMA_DECAY);
        let other = store_with(&[("a", vec![1.0, 2.0])]);
        assert!(ema.update(&other).is_err());
    }

    #[test]
    fn schedule_patience_and_floor() {
        let mut s = LrSchedule::new(1e-3, 3e-5, 2.0, 10).unwrap();
        for _ in 0..9 {
            assert!(!s.step(false).dropped);
        }
        let step = s.step(false);
        assert!(step.dropped);
        assert_eq!(step.lr, 5e-4);

        let mut s = LrSchedule::new(1e-3, 3e-5, 2.0, 10).unwrap();
        for _ in 0..9 {
            s.step(false);
        }
        s.step(true);
        assert_eq!(s.streak(), 0);
        assert_eq!(s.lr, 1e-3);

        let mut s = LrSchedule::new(1e-3, 3e-5, 2.0, 1).unwrap();
        let lrs: Vec<f64> = (0..6).map(|_| s.step(false).lr).collect();
        assert_eq!(lrs, vec![5e-4, 2.5e-4, 1.25e-4, 6.25e-5, 3.125e-5, 3e-5]);
        assert!(s.step(false).exhausted);
        assert_eq!(s.lr, 3e-5);
        assert!(LrSchedule::new(1e-5, 3e-5, 2.0, 1).is_err());
        assert!(LrSchedule::new(1e-3, 3e-5, 2.0, 0).is_err());
    }
}
