//! Mini-batch training: single networks and alternating co-training.
//!
//! Both entry points share one loop. A *round* draws one batch per task and
//! applies, in task order, one Adam step on that task's own cost, each
//! followed by an EMA update. An *epoch* is the number of rounds needed to
//! pass once over the largest training set; after every epoch the EMA
//! parameters are scored on each task's validation split in eval mode and
//! the best summed score is kept.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::{Checkpoint, NetRecord};
use crate::dataio::Samples;
use crate::error::{Error, Result};
use crate::layers::{apply_bn_updates, Mode, Network};
use crate::losses::{self, TargetMeans};
use crate::optim::{Adam, Ema, LrSchedule, EMA_DECAY};
use crate::params::{ParamKind, ParamStore};

/// Rows per forward pass when scoring without gradients.
const EVAL_CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyLayer {
    Fc1,
    Fc2,
}

/// Training and validation cost of one network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostKind {
    Rmse,
    /// WRMSE plus the decoupling penalty on one head layer.
    WrmsePenalized {
        lambda: f64,
        include_diagonal: bool,
        layer: PenaltyLayer,
    },
}

impl CostKind {
    pub fn wrmse_penalized() -> Self {
        CostKind::WrmsePenalized {
            lambda: 0.1,
            include_diagonal: true,
            layer: PenaltyLayer::Fc1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Upper bound on epochs; `None` means unbounded.
    pub epochs: Option<usize>,
    /// Upper bound on rounds; `None` means unbounded.
    pub max_updates: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_factor: f64,
    /// Epochs without improvement before the learning rate drops.
    pub patience: usize,
    pub min_lr: f64,
    pub ema_decay: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Settings for (co-)training from scratch.
    pub fn cotrain(seed: u64) -> Self {
        Self {
            epochs: None,
            max_updates: Some(50_000),
            batch_size: 128,
            lr: 1e-3,
            lr_factor: 2.0,
            patience: 10,
            min_lr: 3e-5,
            ema_decay: EMA_DECAY,
            seed,
        }
    }

    /// Settings for fine-tuning a transferred trunk.
    pub fn transfer(seed: u64) -> Self {
        Self {
            epochs: Some(200),
            max_updates: None,
            patience: 50,
            ..Self::cotrain(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs.is_none() && self.max_updates.is_none() {
            return Err(Error::invalid("training needs an epoch or update budget"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size must be at least 2"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::invalid("EMA decay must lie in [0, 1)"));
        }
        LrSchedule::new(self.lr, self.min_lr, self.lr_factor, self.patience).map(|_| ())
    }
}

/// One network together with the data and cost that drive it.
#[derive(Clone, Copy, Debug)]
pub struct Task<'a> {
    pub net: &'a Network,
    pub train: &'a Samples,
    pub val: &'a Samples,
    pub cost: CostKind,
    /// Required by weighted costs.
    pub means: Option<&'a TargetMeans>,
}

/// Differentiable cost of `pred` against `targets`.
pub fn cost_graph(
    g: &mut Graph,
    net: &Network,
    store: &ParamStore,
    pred: Var,
    targets: &crate::tensor::Tensor,
    cost: CostKind,
    means: Option<&TargetMeans>,
) -> Result<Var> {
    match cost {
        CostKind::Rmse => losses::rmse_graph(g, pred, targets),
        CostKind::WrmsePenalized {
            lambda,
            include_diagonal,
            layer,
        } => {
            let fit = losses::wrmse_graph(g, pred, targets, need_means(net, means)?)?;
            let w = g.param(store, penalty_weight(net, layer))?;
            let pen = losses::decouple_penalty_graph(g, w, lambda, include_diagonal)?;
            g.add(fit, pen)
        }
    }
}

fn need_means<'m>(net: &Network, means: Option<&'m TargetMeans>) -> Result<&'m TargetMeans> {
    means.ok_or_else(|| {
        Error::invalid(format!(
            "{} uses a weighted cost but has no positive target means",
            net.spec.name
        ))
    })
}

fn penalty_weight(net: &Network, layer: PenaltyLayer) -> &str {
    match layer {
        PenaltyLayer::Fc1 => &net.fc1.weight,
        PenaltyLayer::Fc2 => &net.fc2.weight,
    }
}

/// Eval-mode cost of `net` on `samples` with the parameters in `store`.
pub fn evaluate_cost(
    net: &Network,
    store: &ParamStore,
    samples: &Samples,
    cost: CostKind,
    means: Option<&TargetMeans>,
) -> Result<f64> {
    let pred = net.predict(store, &samples.spectra, EVAL_CHUNK)?;
    let score = match cost {
        CostKind::Rmse => losses::rmse(pred.data(), samples.targets.data())?,
        CostKind::WrmsePenalized {
            lambda,
            include_diagonal,
            layer,
        } => {
            losses::wrmse(&pred, &samples.targets, need_means(net, means)?)?
                + losses::decouple_penalty(
                    store.get(penalty_weight(net, layer))?,
                    lambda,
                    include_diagonal,
                )?
        }
    };
    if !score.is_finite() {
        return Err(Error::numerical(format!(
            "non-finite validation cost for {}",
            net.spec.name
        )));
    }
    Ok(score)
}

/// Shuffled mini-batches without replacement, reshuffled every pass. A
/// trailing batch of a single row is merged into its predecessor because
/// batch normalization cannot use it.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    batch: usize,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid(format!(
                "training split needs at least 2 rows, got {n}"
            )));
        }
        Ok(Self {
            order: (0..n).collect(),
            batch: batch.max(2),
            pos: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn end_of(&self, start: usize) -> usize {
        let n = self.order.len();
        let end = (start + self.batch).min(n);
        if n - end == 1 {
            n
        } else {
            end
        }
    }

    /// Number of batches in one pass.
    pub fn batches_per_pass(&self) -> usize {
        let mut count = 0;
        let mut start = 0;
        while start < self.order.len() {
            start = self.end_of(start);
            count += 1;
        }
        count
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = self.end_of(self.pos);
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        batch
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub updates: usize,
    pub lr: f64,
    pub scores: Vec<f64>,
    pub improved: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest summed validation score.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Trains one network.
pub fn train_single(
    task: &Task<'_>,
    store: &mut ParamStore,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    run(std::slice::from_ref(task), store, config)
}

/// Alternating co-training of networks that share a trunk.
pub fn cotrain(
    tasks: &[Task<'_>],
    store: &mut ParamStore,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    check_registry(tasks, store)?;
    run(tasks, store, config)
}

fn check_registry(tasks: &[Task<'_>], store: &ParamStore) -> Result<()> {
    let Some(first) = tasks.first() else {
        return Err(Error::invalid("co-training needs at least one network"));
    };
    let trunk = first.net.trunk_param_ids();
    for (i, t) in tasks.iter().enumerate() {
        if t.net.trunk_param_ids() != trunk {
            return Err(Error::invalid(format!(
                "network {} does not share the trunk of {}",
                t.net.spec.name, first.net.spec.name
            )));
        }
        if tasks[..i]
            .iter()
            .any(|o| o.net.spec.name == t.net.spec.name)
        {
            return Err(Error::invalid(format!(
                "duplicate network name {}",
                t.net.spec.name
            )));
        }
        for id in t.net.param_ids() {
            if !store.contains(&id) {
                return Err(Error::invalid(format!(
                    "network {} refers to {id}, which is not in the parameter store",
                    t.net.spec.name
                )));
            }
        }
    }
    Ok(())
}

fn check_task(t: &Task<'_>) -> Result<()> {
    let name = &t.net.spec.name;
    if t.train.is_empty() {
        return Err(Error::invalid(format!("empty training split for {name}")));
    }
    if t.val.is_empty() {
        return Err(Error::invalid(format!("empty validation split for {name}")));
    }
    for s in [t.train, t.val] {
        if s.targets_per_row() != t.net.outputs() {
            return Err(Error::invalid(format!(
                "{name} predicts {} targets but the data has {}",
                t.net.outputs(),
                s.targets_per_row()
            )));
        }
    }
    Ok(())
}

fn score_all(tasks: &[Task<'_>], eval_store: &ParamStore) -> Result<Vec<f64>> {
    tasks
        .iter()
        .map(|t| evaluate_cost(t.net, eval_store, t.val, t.cost, t.means))
        .collect()
}

/// Sum of per-task scores in task order.
pub fn total_score(scores: &[f64]) -> f64 {
    scores.iter().sum()
}

fn run(tasks: &[Task<'_>], store: &mut ParamStore, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if tasks.is_empty() {
        return Err(Error::invalid("nothing to train"));
    }
    for t in tasks {
        check_task(t)?;
    }

    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let mut samplers = tasks
        .iter()
        .map(|t| BatchSampler::new(t.train.len(), config.batch_size, master.random()))
        .collect::<Result<Vec<_>>>()?;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(master.random());

    let mut ids: Vec<String> = Vec::new();
    for t in tasks {
        for id in t.net.param_ids() {
            if !ids.contains(&id) {
                ids.push(id);
            }
        }
    }
    let shadows = ids
        .iter()
        .filter_map(|id| {
            let e = store.entry(id).ok()?;
            (e.kind == ParamKind::Trainable && !e.frozen).then(|| (id.clone(), e.value.clone()))
        })
        .collect();
    let mut ema = Ema::from_shadows(shadows, config.ema_decay);
    // one optimizer per network, as if each net had its own training op
    let mut adams: Vec<Adam> = tasks.iter().map(|_| Adam::new(config.lr)).collect();
    let mut schedule =
        LrSchedule::new(config.lr, config.min_lr, config.lr_factor, config.patience)?;

    let records: Vec<NetRecord> = tasks
        .iter()
        .map(|t| NetRecord {
            spec: t.net.spec.clone(),
            cost: t.cost,
            means: t.means.map(|m| m.values().to_vec()).unwrap_or_default(),
        })
        .collect();
    let snapshot = |store: &ParamStore, ema: &Ema, updates, epoch, scores: Vec<f64>| Checkpoint {
        params: store.clone(),
        shadows: ema.shadows().clone(),
        update: updates,
        epoch,
        score: total_score(&scores),
        scores,
        nets: records.clone(),
        config: config.clone(),
    };

    let init_scores = score_all(tasks, &ema.apply_to(store)?)?;
    let mut best = snapshot(store, &ema, 0, 0, init_scores);
    let mut history = Vec::new();
    let rounds_per_epoch = samplers
        .iter()
        .map(BatchSampler::batches_per_pass)
        .max()
        .unwrap_or(1);

    let mut updates = 0usize;
    let mut epoch = 0usize;
    loop {
        if config.epochs.is_some_and(|e| epoch >= e)
            || config.max_updates.is_some_and(|m| updates >= m)
        {
            break;
        }
        for _ in 0..rounds_per_epoch {
            if config.max_updates.is_some_and(|m| updates >= m) {
                break;
            }
            for ((t, sampler), adam) in tasks.iter().zip(samplers.iter_mut()).zip(adams.iter_mut())
            {
                let batch = t.train.select(&sampler.next_batch())?;
                let mut g = Graph::new();
                let f =
                    t.net
                        .forward(&mut g, store, &batch.spectra, Mode::Train, &mut dropout_rng)?;
                let loss = cost_graph(
                    &mut g,
                    t.net,
                    store,
                    f.output,
                    &batch.targets,
                    t.cost,
                    t.means,
                )?;
                let value = g.value(loss).item()?;
                if !value.is_finite() {
                    return Err(Error::numerical(format!(
                        "training cost of {} became {value} at update {updates}",
                        t.net.spec.name
                    )));
                }
                let grads = g.backward(loss)?.into_params();
                adam.step(store, &grads)?;
                apply_bn_updates(store, &f.bn_updates)?;
                ema.update(store)?;
            }
            updates += 1;
        }
        epoch += 1;

        let scores = score_all(tasks, &ema.apply_to(store)?)?;
        let improved = total_score(&scores) < best.score;
        if improved {
            best = snapshot(store, &ema, updates, epoch, scores.clone());
        }
        let step = schedule.step(improved);
        for adam in &mut adams {
            adam.lr = step.lr;
        }
        history.push(EpochRecord {
            epoch,
            updates,
            lr: step.lr,
            scores,
            improved,
        });
        if step.exhausted {
            break;
        }
    }

    Ok(TrainOutcome {
        checkpoint: best,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{build_network, Architecture, NetworkSpec};
    use crate::tensor::Tensor;
    use rand_distr::{Distribution, StandardNormal};

    fn linear_data(n: usize, p: usize, seed: u64) -> Samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..p)
            .map(|i| (i as f64 * 0.2).sin() / (p as f64).sqrt())
            .collect();
        let mut xs = Vec::with_capacity(n * p);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            // smooth spectra: random mixtures of a few broad curves
            let z: Vec<f64> = (0..4).map(|_| StandardNormal.sample(&mut rng)).collect();
            let x: Vec<f64> = (0..p)
                .map(|i| {
                    let u = i as f64 / p as f64;
                    z.iter()
                        .enumerate()
                        .map(|(k, zk)| zk * (std::f64::consts::PI * (k + 1) as f64 * u).cos())
                        .sum()
                })
                .collect();
            let noise: f64 = StandardNormal.sample(&mut rng);
            ys.push(w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + 0.05 * noise);
            xs.extend(x);
        }
        Samples::new(
            Tensor::new(vec![n, p], xs).unwrap(),
            Tensor::new(vec![n, 1], ys).unwrap(),
        )
        .unwrap()
    }

    fn quick(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: Some(epochs),
            max_updates: None,
            batch_size: 32,
            patience: 5,
            ..TrainConfig::cotrain(seed)
        }
    }

    fn net(name: &str, p: usize, store: &mut ParamStore, seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        build_network(
            &NetworkSpec::new(name, Architecture::One, p, 10, 1),
            store,
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn sampler_covers_each_row_once_per_pass() {
        let mut s = BatchSampler::new(10, 4, 1).unwrap();
        assert_eq!(s.batches_per_pass(), 3);
        for _ in 0..3 {
            let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch()).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..10).collect::<Vec<_>>());
        }
    }

    #[test]
    fn sampler_merges_a_trailing_single_row() {
        let mut s = BatchSampler::new(5, 2, 1).unwrap();
        assert_eq!(s.batches_per_pass(), 2);
        assert_eq!(s.next_batch().len(), 2);
        assert_eq!(s.next_batch().len(), 3);
        assert!(BatchSampler::new(1, 2, 1).is_err());
    }

    #[test]
    fn linear_smoke_halves_validation_error() {
        let (train, val) = (linear_data(200, 64, 1), linear_data(60, 64, 2));
        let mut store = ParamStore::new();
        let n = net("lin", 64, &mut store, 3);
        let task = Task {
            net: &n,
            train: &train,
            val: &val,
            cost: CostKind::Rmse,
            means: None,
        };
        let out = train_single(&task, &mut store, &quick(40, 4)).unwrap();
        let initial = {
            let mut s = ParamStore::new();
            let n0 = net("lin", 64, &mut s, 3);
            evaluate_cost(&n0, &s, &val, CostKind::Rmse, None).unwrap()
        };
        assert!(
            out.checkpoint.score < 0.5 * initial,
            "final {} initial {initial}",
            out.checkpoint.score
        );
    }

    #[test]
    fn zero_epochs_returns_the_initialisation() {
        let (train, val) = (linear_data(40, 64, 1), linear_data(10, 64, 2));
        let mut store = ParamStore::new();
        let n = net("z", 64, &mut store, 3);
        let init = store.clone();
        let task = Task {
            net: &n,
            train: &train,
            val: &val,
            cost: CostKind::Rmse,
            means: None,
        };
        let out = train_single(&task, &mut store, &quick(0, 4)).unwrap();
        assert_eq!(out.checkpoint.params, init);
        assert_eq!(out.checkpoint.eval_store().unwrap(), init);
        assert_eq!((out.checkpoint.update, out.checkpoint.epoch), (0, 0));
        assert!(out.history.is_empty());
        assert_eq!(
            out.checkpoint.score,
            evaluate_cost(&n, &init, &val, CostKind::Rmse, None).unwrap()
        );
    }

    #[test]
    fn training_is_deterministic() {
        let (train, val) = (linear_data(80, 64, 1), linear_data(20, 64, 2));
        let run_once = || {
            let mut store = ParamStore::new();
            let n = net("d", 64, &mut store, 3);
            let task = Task {
                net: &n,
                train: &train,
                val: &val,
                cost: CostKind::Rmse,
                means: None,
            };
            let out = train_single(&task, &mut store, &quick(3, 4)).unwrap();
            (out.checkpoint, out.history, store)
        };
        assert_eq!(run_once(), run_once());
    }

    #[test]
    fn restored_checkpoint_reproduces_its_score() {
        let (train, val) = (linear_data(80, 64, 1), linear_data(20, 64, 2));
        let mut store = ParamStore::new();
        let n = net("r", 64, &mut store, 3);
        let task = Task {
            net: &n,
            train: &train,
            val: &val,
            cost: CostKind::Rmse,
            means: None,
        };
        let out = train_single(&task, &mut store, &quick(4, 4)).unwrap();
        let ck = Checkpoint::from_bytes(&out.checkpoint.to_bytes().unwrap()).unwrap();
        assert_eq!(ck, out.checkpoint);
        let nets = ck.networks().unwrap();
        let eval = ck.eval_store().unwrap();
        let again = evaluate_cost(&nets[0], &eval, &val, ck.nets[0].cost, None).unwrap();
        assert_eq!(again, ck.score);
        assert_eq!(
            evaluate_cost(&nets[0], &eval, &val, CostKind::Rmse, None).unwrap(),
            again
        );
    }

    #[test]
    fn lr_never_increases() {
        let (train, val) = (linear_data(60, 64, 1), linear_data(20, 64, 2));
        let mut store = ParamStore::new();
        let n = net("l", 64, &mut store, 3);
        let task = Task {
            net: &n,
            train: &train,
            val: &val,
            cost: CostKind::Rmse,
            means: None,
        };
        let config = TrainConfig {
            patience: 1,
            lr: 1e-2,
            ..quick(25, 4)
        };
        let out = train_single(&task, &mut store, &config).unwrap();
        assert!(out.history.windows(2).all(|w| w[1].lr <= w[0].lr));
        assert!(out
            .history
            .iter()
            .all(|r| r.lr <= config.lr && r.lr >= config.min_lr));
    }

    #[test]
    fn empty_splits_are_rejected() {
        let train = linear_data(20, 64, 1);
        let empty = train.select(&[]).unwrap();
        let mut store = ParamStore::new();
        let n = net("e", 64, &mut store, 3);
        let t = Task {
            net: &n,
            train: &empty,
            val: &train,
            cost: CostKind::Rmse,
            means: None,
        };
        assert!(train_single(&t, &mut store, &quick(1, 1)).is_err());
        let t = Task {
            net: &n,
            train: &train,
            val: &empty,
            cost: CostKind::Rmse,
            means: None,
        };
        assert!(train_single(&t, &mut store, &quick(1, 1)).is_err());
    }

    #[test]
    fn cotrain_rejects_mismatched_registries() {
        let data = linear_data(20, 64, 1);
        let mut store = ParamStore::new();
        let a = net("a", 64, &mut store, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = build_network(
            &NetworkSpec::new("b", Architecture::Two, 64, 10, 1),
            &mut store,
            &mut rng,
        )
        .unwrap();
        let task = |n| Task {
            net: n,
            train: &data,
            val: &data,
            cost: CostKind::Rmse,
            means: None,
        };
        assert!(cotrain(&[task(&a), task(&b)], &mut store, &quick(1, 1)).is_err());
        assert!(cotrain(&[task(&a), task(&a)], &mut store, &quick(1, 1)).is_err());
        let mut other = ParamStore::new();
        let c = net("c", 64, &mut other, 3);
        assert!(cotrain(&[task(&a), task(&c)], &mut store, &quick(1, 1)).is_err());
    }

    #[test]
    fn a_sub_step_only_reaches_its_own_head() {
        let da = linear_data(16, 64, 1);
        let mut store = ParamStore::new();
        let a = net("a", 64, &mut store, 3);
        let b = net("b", 96, &mut store, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let f = a
            .forward(&mut g, &store, &da.spectra, Mode::Train, &mut rng)
            .unwrap();
        let loss = cost_graph(
            &mut g,
            &a,
            &store,
            f.output,
            &da.targets,
            CostKind::Rmse,
            None,
        )
        .unwrap();
        let grads = g.backward(loss).unwrap().into_params();
        for id in b.head_param_ids() {
            assert!(!grads.contains_key(&id), "{id}");
        }
        for id in a.head_param_ids().iter().chain(&a.trunk_param_ids()) {
            if store.entry(id).unwrap().kind == ParamKind::Trainable {
                assert!(grads.contains_key(id), "{id}");
            }
        }
    }

    #[test]
    fn alternation_gradients_sum_to_the_joint_gradient() {
        let (da, db) = (linear_data(16, 64, 1), linear_data(16, 96, 2));
        let mut store = ParamStore::new();
        let a = net("a", 64, &mut store, 3);
        let b = net("b", 96, &mut store, 4);
        let loss_of = |g: &mut Graph, n: &Network, d: &Samples, seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = n
                .forward(g, &store, &d.spectra, Mode::Train, &mut rng)
                .unwrap();
            cost_graph(g, n, &store, f.output, &d.targets, CostKind::Rmse, None).unwrap()
        };
        let single = |n: &Network, d: &Samples, seed| {
            let mut g = Graph::new();
            let l = loss_of(&mut g, n, d, seed);
            g.backward(l).unwrap().into_params()
        };
        let (ga, gb) = (single(&a, &da, 1), single(&b, &db, 2));
        let mut g = Graph::new();
        let la = loss_of(&mut g, &a, &da, 1);
        let lb = loss_of(&mut g, &b, &db, 2);
        let total = g.add(la, lb).unwrap();
        let joint = g.backward(total).unwrap().into_params();
        for id in a.trunk_param_ids() {
            let Some(j) = joint.get(&id) else { continue };
            for ((j, x), y) in j.data().iter().zip(ga[&id].data()).zip(gb[&id].data()) {
                assert!((j - (x + y)).abs() <= 1e-12 * (1.0 + j.abs()), "{id}");
            }
        }
    }

    #[test]
    fn evaluation_is_repeatable() {
        let val = linear_data(30, 64, 2);
        let mut store = ParamStore::new();
        let n = net("v", 64, &mut store, 3);
        let x = evaluate_cost(&n, &store, &val, CostKind::Rmse, None).unwrap();
        assert_eq!(
            x,
            evaluate_cost(&n, &store, &val, CostKind::Rmse, None).unwrap()
        );
    }
}
