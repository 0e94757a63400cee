//! Repeated experiments over paired data splits, run records, summary
//! reports and statistical comparisons.
//!
//! An experiment trains one or more [`Strategy`] values at every
//! repetition. All strategies of one repetition see the same splits, so the
//! per-repetition scores form paired samples. Each strategy trains every
//! requested architecture and keeps, per dataset, the one with the lower
//! holdout cost.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataio::{
    augment, split_repetition, AugmentationConfig, DatasetBundle, Registry, Samples,
};
use crate::error::{Error, Result};
use crate::layers::{build_network, Architecture, Network, NetworkSpec};
use crate::losses::{MetricReport, TargetMeans};
use crate::params::ParamStore;
use crate::stats::{
    f_variance_test, friedman_iman_davenport, nemenyi_cd, rank_groups, summary_stats,
    wilcoxon_signed_rank, ComparisonTable, Orientation, Summary,
};
use crate::training::{cotrain, evaluate_cost, train_single, CostKind, Task, TrainConfig};
use crate::transfer::{
    finetune, network_input_len, resize_bundle, transfer_trunk, GradientMode, PadValue, ResizeMode,
    TransferMode,
};

/// Current version of the experiment configuration format.
pub const CONFIG_VERSION: u32 = 1;

const PREDICT_CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Every dataset trained on its own.
    Single,
    /// Individual training against co-training with a shared trunk.
    Cotrain,
    /// Strategies for a small target dataset helped by a larger source.
    Transfer,
}

impl ExperimentKind {
    pub fn default_strategies(self) -> Vec<Strategy> {
        match self {
            Self::Single => vec![Strategy::Individual],
            Self::Cotrain => vec![Strategy::Individual, Strategy::WeightShare],
            Self::Transfer => vec![
                Strategy::WeightShare,
                Strategy::TlWsStop,
                Strategy::TlWsFull,
                Strategy::TlStop,
                Strategy::TlFull,
            ],
        }
    }

    fn allows(self, s: Strategy) -> bool {
        match self {
            Self::Single => s == Strategy::Individual,
            Self::Cotrain => matches!(s, Strategy::Individual | Strategy::WeightShare),
            Self::Transfer => s != Strategy::Individual,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Individual,
    WeightShare,
    /// Trunk reused at the new length, only the head trained.
    TlWsStop,
    TlWsFull,
    /// Spectra resized to the pretrained length, only the head trained.
    TlStop,
    TlFull,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Individual,
        Strategy::WeightShare,
        Strategy::TlWsStop,
        Strategy::TlWsFull,
        Strategy::TlStop,
        Strategy::TlFull,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Self::Individual => "individual",
            Self::WeightShare => "weight_share",
            Self::TlWsStop => "tl_ws_stop",
            Self::TlWsFull => "tl_ws_full",
            Self::TlStop => "tl_stop",
            Self::TlFull => "tl_full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.key() == s.trim())
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|v| v.key()).collect();
                Error::invalid(format!(
                    "unknown strategy {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }

    fn transfer_mode(self, resize: ResizeMode) -> Option<TransferMode> {
        let (gradient, resize) = match self {
            Self::TlWsStop => (GradientMode::Stop, ResizeMode::WeightShare),
            Self::TlWsFull => (GradientMode::Full, ResizeMode::WeightShare),
            Self::TlStop => (GradientMode::Stop, resize),
            Self::TlFull => (GradientMode::Full, resize),
            Self::Individual | Self::WeightShare => return None,
        };
        Some(TransferMode { gradient, resize })
    }
}

/// Architectures to train; `Both` selects per dataset on the holdout split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ArchField", into = "ArchField")]
pub enum ArchChoice {
    One,
    Two,
    #[default]
    Both,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ArchField {
    Id(u8),
    Name(String),
}

impl TryFrom<ArchField> for ArchChoice {
    type Error = Error;
    fn try_from(v: ArchField) -> Result<Self> {
        match v {
            ArchField::Id(id) => Self::parse(&id.to_string()),
            ArchField::Name(s) => Self::parse(&s),
        }
    }
}

impl From<ArchChoice> for ArchField {
    fn from(v: ArchChoice) -> Self {
        match v {
            ArchChoice::One => ArchField::Id(1),
            ArchChoice::Two => ArchField::Id(2),
            ArchChoice::Both => ArchField::Name("both".into()),
        }
    }
}

impl ArchChoice {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "1" => Ok(Self::One),
            "2" => Ok(Self::Two),
            "both" => Ok(Self::Both),
            other => Err(Error::invalid(format!(
                "architecture must be 1, 2 or both, not {other:?}"
            ))),
        }
    }

    pub fn architectures(self) -> Vec<Architecture> {
        match self {
            Self::One => vec![Architecture::One],
            Self::Two => vec![Architecture::Two],
            Self::Both => vec![Architecture::One, Architecture::Two],
        }
    }
}

/// Optional replacements for [`TrainConfig`] fields.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub max_updates: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub lr_factor: Option<f64>,
    pub patience: Option<usize>,
    pub min_lr: Option<f64>,
    pub ema_decay: Option<f64>,
}

impl TrainOverrides {
    pub fn apply(&self, mut c: TrainConfig) -> TrainConfig {
        if self.epochs.is_some() {
            c.epochs = self.epochs;
        }
        if self.max_updates.is_some() {
            c.max_updates = self.max_updates;
        }
        c.batch_size = self.batch_size.unwrap_or(c.batch_size);
        c.lr = self.lr.unwrap_or(c.lr);
        c.lr_factor = self.lr_factor.unwrap_or(c.lr_factor);
        c.patience = self.patience.unwrap_or(c.patience);
        c.min_lr = self.min_lr.unwrap_or(c.min_lr);
        c.ema_decay = self.ema_decay.unwrap_or(c.ema_decay);
        c
    }
}

/// Optional replacements for [`AugmentationConfig`] fields.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentOverrides {
    pub multiplier: Option<usize>,
    pub offset_scale: Option<f64>,
    pub slope_scale: Option<f64>,
    pub multiplicative_scale: Option<f64>,
    pub noise_scale: Option<f64>,
}

impl AugmentOverrides {
    fn config(&self, seed: u64) -> AugmentationConfig {
        let d = AugmentationConfig::default();
        AugmentationConfig {
            multiplier: self.multiplier.unwrap_or(d.multiplier),
            offset_scale: self.offset_scale.unwrap_or(d.offset_scale),
            slope_scale: self.slope_scale.unwrap_or(d.slope_scale),
            multiplicative_scale: self.multiplicative_scale.unwrap_or(d.multiplicative_scale),
            noise_scale: self.noise_scale.unwrap_or(d.noise_scale),
            seed,
        }
    }
}

/// Head widths and cost of the network for one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSettings {
    #[serde(default = "default_fc1")]
    pub fc1: usize,
    /// Defaults to the number of targets.
    #[serde(default)]
    pub fc2: Option<usize>,
    #[serde(default = "default_cost")]
    pub cost: CostKind,
}

fn default_fc1() -> usize {
    10
}

fn default_cost() -> CostKind {
    CostKind::Rmse
}

impl Default for NetSettings {
    fn default() -> Self {
        Self {
            fc1: default_fc1(),
            fc2: None,
            cost: default_cost(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSettings {
    pub target: String,
    pub source: String,
    /// How the non-weight-share strategies fit spectra to the source length.
    #[serde(default = "default_resize")]
    pub resize: ResizeMode,
    #[serde(default)]
    pub pad_value: PadValue,
    /// Pretrained source checkpoints by architecture id. Without one, the
    /// source is trained individually at every repetition.
    #[serde(default)]
    pub checkpoints: IndexMap<String, PathBuf>,
}

fn default_resize() -> ResizeMode {
    ResizeMode::Pad
}

fn default_reps() -> usize {
    40
}

fn default_true() -> bool {
    true
}

/// Versioned TOML experiment description. Relative paths are resolved
/// against the directory of the configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub kind: Option<ExperimentKind>,
    pub registry: PathBuf,
    pub datasets: Vec<String>,
    #[serde(default)]
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_reps")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub arch: ArchChoice,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default = "default_true")]
    pub save_checkpoints: bool,
    /// Overrides for (co-)training from scratch.
    #[serde(default)]
    pub train: TrainOverrides,
    /// Overrides for fine-tuning transferred networks.
    #[serde(default)]
    pub finetune: TrainOverrides,
    #[serde(default)]
    pub augment: AugmentOverrides,
    #[serde(default)]
    pub nets: IndexMap<String, NetSettings>,
    #[serde(default)]
    pub transfer: Option<TransferSettings>,
    #[serde(skip)]
    pub base: PathBuf,
}

impl ExperimentConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut c: Self =
            toml::from_str(text).map_err(|e| Error::invalid(format!("experiment config: {e}")))?;
        if c.version != CONFIG_VERSION {
            return Err(Error::invalid(format!(
                "experiment config version {} is not supported (expected {CONFIG_VERSION})",
                c.version
            )));
        }
        c.base = base.to_path_buf();
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn kind(&self) -> Result<ExperimentKind> {
        self.kind
            .ok_or_else(|| Error::invalid("experiment config does not name its kind"))
    }

    pub fn strategies(&self) -> Result<Vec<Strategy>> {
        let kind = self.kind()?;
        Ok(if self.strategies.is_empty() {
            kind.default_strategies()
        } else {
            self.strategies.clone()
        })
    }

    pub fn net_settings(&self, dataset: &str) -> NetSettings {
        self.nets.get(dataset).cloned().unwrap_or_default()
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        self.train.apply(TrainConfig::cotrain(seed))
    }

    pub fn finetune_config(&self, seed: u64) -> TrainConfig {
        self.finetune.apply(TrainConfig::transfer(seed))
    }

    /// Datasets that receive run records.
    pub fn evaluated(&self) -> Result<Vec<String>> {
        Ok(match self.kind()? {
            ExperimentKind::Transfer => vec![self.transfer_settings()?.target.clone()],
            _ => self.datasets.clone(),
        })
    }

    fn transfer_settings(&self) -> Result<&TransferSettings> {
        self.transfer
            .as_ref()
            .ok_or_else(|| Error::invalid("a transfer experiment needs a [transfer] section"))
    }

    /// Checks everything that can be checked without training.
    pub fn validate(&self, registry: &Registry) -> Result<()> {
        let kind = self.kind()?;
        if self.datasets.is_empty() {
            return Err(Error::invalid("the experiment lists no datasets"));
        }
        for (i, d) in self.datasets.iter().enumerate() {
            if self.datasets[..i].contains(d) {
                return Err(Error::invalid(format!("dataset {d} is listed twice")));
            }
            registry.check_files(d)?;
        }
        for name in self.nets.keys() {
            if !self.datasets.contains(name) {
                return Err(Error::invalid(format!(
                    "[nets.{name}] refers to a dataset that is not in the experiment"
                )));
            }
        }
        if self.repetitions == 0 {
            return Err(Error::invalid("repetitions must be at least 1"));
        }
        let strategies = self.strategies()?;
        for (i, s) in strategies.iter().enumerate() {
            if !kind.allows(*s) {
                return Err(Error::invalid(format!(
                    "strategy {} does not apply to a {kind:?} experiment",
                    s.key()
                )));
            }
            if strategies[..i].contains(s) {
                return Err(Error::invalid(format!(
                    "strategy {} is listed twice",
                    s.key()
                )));
            }
        }
        if strategies.contains(&Strategy::WeightShare) && self.datasets.len() < 2 {
            return Err(Error::invalid("weight sharing needs at least two datasets"));
        }
        self.train_config(0).validate()?;
        if kind == ExperimentKind::Transfer {
            let t = self.transfer_settings()?;
            for d in [&t.target, &t.source] {
                if !self.datasets.contains(d) {
                    return Err(Error::invalid(format!(
                        "transfer dataset {d} is not in the experiment's dataset list"
                    )));
                }
            }
            if t.target == t.source {
                return Err(Error::invalid("transfer target and source must differ"));
            }
            if t.resize == ResizeMode::WeightShare {
                return Err(Error::invalid("transfer.resize must be pad or spline"));
            }
            for (arch, path) in &t.checkpoints {
                ArchChoice::parse(arch)?;
                let p = self.resolve(path);
                if !p.is_file() {
                    return Err(Error::data(format!("missing checkpoint {}", p.display())));
                }
            }
            self.finetune_config(0).validate()?;
        }
        Ok(())
    }
}

/// Outcome of one strategy on one dataset at one repetition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub rep: usize,
    pub strategy: Strategy,
    pub dataset: String,
    /// Chosen by holdout cost.
    pub arch: u8,
    pub holdout: f64,
    /// Test metrics by name, see [`metric_values`].
    pub metrics: IndexMap<String, f64>,
    pub checkpoint: Option<PathBuf>,
    /// Wall time of the strategy at this repetition; kept in the log only.
    #[serde(skip)]
    pub seconds: f64,
}

/// Flattens a metric report into named values: `rmse`, `mad`, `sep`, `r2`
/// and `bias` (suffixed `_1`, `_2`, ... for several targets) and `wrmse`
/// when target means exist.
pub fn metric_values(report: &MetricReport) -> IndexMap<String, f64> {
    let mut out = IndexMap::new();
    let many = report.per_target.len() > 1;
    for (j, m) in report.per_target.iter().enumerate() {
        let suffix = if many {
            format!("_{}", j + 1)
        } else {
            String::new()
        };
        for (name, v) in [
            ("rmse", m.rmse),
            ("mad", m.mad),
            ("sep", m.sep),
            ("r2", m.r2),
            ("bias", m.bias),
        ] {
            out.insert(format!("{name}{suffix}"), v);
        }
    }
    if let Some(w) = report.wrmse {
        out.insert("wrmse".into(), w);
    }
    out
}

/// How a metric is compared: R² higher, biases by magnitude, the rest
/// lower.
pub fn orientation_of(metric: &str) -> Orientation {
    if metric.starts_with("r2") {
        Orientation::HigherIsBetter
    } else if metric.starts_with("bias") {
        Orientation::LowerAbsIsBetter
    } else {
        Orientation::LowerIsBetter
    }
}

/// Stable seed derivation from a list of parts (SplitMix64 mixing).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243F_6A88_85A3_08D3;
    for &p in parts {
        h = h.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Everything produced by [`run_experiment`].
#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub records: Vec<RunRecord>,
    pub log: String,
}

struct Prepared {
    name: String,
    bundle: DatasetBundle,
    settings: NetSettings,
}

impl Prepared {
    fn spec(&self, arch: Architecture, input_len: usize) -> NetworkSpec {
        let fc2 = self.settings.fc2.unwrap_or(self.bundle.targets_per_row());
        NetworkSpec::new(self.name.clone(), arch, input_len, self.settings.fc1, fc2)
    }
}

/// A trained network with the parameters used to score it and the data it
/// is scored on.
struct Trained {
    net: Network,
    params: ParamStore,
    bundle: DatasetBundle,
    cost: CostKind,
}

impl Trained {
    fn holdout(&self) -> Result<f64> {
        let h = self.bundle.holdout_samples()?;
        evaluate_cost(
            &self.net,
            &self.params,
            &h,
            self.cost,
            self.bundle.means.as_ref(),
        )
    }

    fn test_metrics(&self) -> Result<IndexMap<String, f64>> {
        let t = self.bundle.test_samples()?;
        let pred = self.net.predict(&self.params, &t.spectra, PREDICT_CHUNK)?;
        let report = MetricReport::compute(&pred, &t.targets, self.bundle.means.as_ref())?;
        Ok(metric_values(&report))
    }
}

fn task<'a>(
    net: &'a Network,
    train: &'a Samples,
    val: &'a Samples,
    p: &'a Prepared,
    means: Option<&'a TargetMeans>,
) -> Task<'a> {
    Task {
        net,
        train,
        val,
        cost: p.settings.cost,
        means,
    }
}

/// Architecture id, trained networks and checkpoint path of one fit.
type Candidate = (u8, Trained, Option<PathBuf>);

/// Runs the experiment; writes run records, summaries, comparison tables
/// and checkpoints under `out` when given.
pub fn run_experiment(config: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentOutput> {
    let registry = Registry::load(&config.resolve(&config.registry))?;
    config.validate(&registry)?;
    let strategies = config.strategies()?;
    let archs = config.arch.architectures();
    let kind = config.kind()?;

    // load and split every repetition first so data errors surface early
    let mut raw = Vec::new();
    for name in &config.datasets {
        let entry = registry.entry(name)?;
        let bundle = registry.open(name)?;
        for rep in 0..config.repetitions {
            split_repetition(&bundle, entry.counts, rep, config.seed, entry.carve_test)?;
        }
        raw.push((name.clone(), bundle, entry.counts, entry.carve_test));
    }
    let fixed_sources = load_source_checkpoints(config)?;
    if let Some(t) = &config.transfer {
        check_resize(config, &raw, t, &fixed_sources)?;
    }

    let ckpt_dir = out
        .filter(|_| config.save_checkpoints)
        .map(|o| o.join("checkpoints"));
    if let Some(d) = &ckpt_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut records = Vec::new();
    let mut log = String::new();
    for rep in 0..config.repetitions {
        let mut prepared = Vec::new();
        for (k, (name, bundle, counts, carve)) in raw.iter().enumerate() {
            let split = split_repetition(bundle, *counts, rep, config.seed, *carve)?;
            let aug_seed = derive_seed(&[config.seed, rep as u64, k as u64, 0xA5]);
            let bundle = augment(&split, &config.augment.config(aug_seed))?;
            prepared.push(Prepared {
                name: name.clone(),
                bundle,
                settings: config.net_settings(name),
            });
        }
        let mut sources: HashMap<Architecture, Checkpoint> = HashMap::new();
        for &strategy in &strategies {
            let start = Instant::now();
            // per dataset: candidates over architectures
            let mut candidates: IndexMap<String, Vec<Candidate>> = IndexMap::new();
            for &arch in &archs {
                let seed =
                    derive_seed(&[config.seed, rep as u64, strategy as u64, arch.id() as u64]);
                let trained = match strategy {
                    Strategy::Individual => train_individual(config, &prepared, arch, seed)?,
                    Strategy::WeightShare => train_shared(config, &prepared, arch, seed)?,
                    _ => {
                        let t = config.transfer_settings()?;
                        if let Entry::Vacant(slot) = sources.entry(arch) {
                            slot.insert(match fixed_sources.get(&arch) {
                                Some(c) => c.clone(),
                                None => pretrain_source(
                                    config, &prepared, &t.source, arch, rep, &ckpt_dir,
                                )?,
                            });
                        }
                        let mode = strategy.transfer_mode(t.resize).expect("transfer strategy");
                        vec![train_transferred(
                            config,
                            &prepared,
                            &sources[&arch],
                            mode,
                            seed,
                        )?]
                    }
                };
                for (tr, ck) in trained {
                    let path = match &ckpt_dir {
                        Some(d) => {
                            let name = if kind == ExperimentKind::Cotrain
                                && strategy == Strategy::Individual
                                || kind == ExperimentKind::Single
                            {
                                format!(
                                    "r{rep:02}_{}_{}_arch{}.ckpt",
                                    strategy.key(),
                                    tr.net.spec.name,
                                    arch.id()
                                )
                            } else {
                                format!("r{rep:02}_{}_arch{}.ckpt", strategy.key(), arch.id())
                            };
                            let p = d.join(name);
                            if !p.exists() {
                                ck.save(&p)?;
                            }
                            Some(p)
                        }
                        None => None,
                    };
                    candidates
                        .entry(tr.net.spec.name.clone())
                        .or_default()
                        .push((arch.id(), tr, path));
                }
            }
            let seconds = start.elapsed().as_secs_f64();
            for dataset in config.evaluated()? {
                let list = candidates.get(&dataset).ok_or_else(|| {
                    Error::invalid(format!("no network was trained for {dataset}"))
                })?;
                let mut best: Option<(f64, &Candidate)> = None;
                for c in list {
                    let h = c.1.holdout()?;
                    if best.is_none_or(|(b, _)| h < b) {
                        best = Some((h, c));
                    }
                }
                let (holdout, (arch, tr, path)) = best.expect("at least one architecture");
                records.push(RunRecord {
                    rep,
                    strategy,
                    dataset: dataset.clone(),
                    arch: *arch,
                    holdout,
                    metrics: tr.test_metrics()?,
                    checkpoint: path.as_ref().map(|p| relative_to(p, out)),
                    seconds,
                });
            }
            let _ = writeln!(log, "rep {rep} {} {seconds:.2}s", strategy.key());
        }
    }
    if let Some(o) = out {
        write_outputs(&records, o)?;
        let p = o.join("log.txt");
        std::fs::write(&p, &log).map_err(|e| Error::io(&p, e))?;
    }
    Ok(ExperimentOutput { records, log })
}

fn relative_to(p: &Path, base: Option<&Path>) -> PathBuf {
    base.and_then(|b| p.strip_prefix(b).ok())
        .unwrap_or(p)
        .to_path_buf()
}

fn load_source_checkpoints(config: &ExperimentConfig) -> Result<HashMap<Architecture, Checkpoint>> {
    let mut out = HashMap::new();
    if let Some(t) = &config.transfer {
        for (arch, path) in &t.checkpoints {
            let arch = match ArchChoice::parse(arch)? {
                ArchChoice::One => Architecture::One,
                ArchChoice::Two => Architecture::Two,
                ArchChoice::Both => {
                    return Err(Error::invalid(
                        "transfer checkpoints are keyed by architecture 1 or 2",
                    ))
                }
            };
            let ck = Checkpoint::load(&config.resolve(path))?;
            if !ck.nets.iter().any(|n| n.spec.arch == arch) {
                return Err(Error::data(format!(
                    "checkpoint {} has no architecture {} network",
                    path.display(),
                    arch.id()
                )));
            }
            out.insert(arch, ck);
        }
    }
    Ok(out)
}

fn check_resize(
    config: &ExperimentConfig,
    raw: &[(
        String,
        DatasetBundle,
        crate::dataio::SplitCounts,
        Option<usize>,
    )],
    t: &TransferSettings,
    fixed: &HashMap<Architecture, Checkpoint>,
) -> Result<()> {
    let len_of = |name: &str| raw.iter().find(|r| r.0 == name).map(|r| r.1.input_len());
    let target = len_of(&t.target).unwrap_or(0);
    let mut lens = vec![len_of(&t.source).unwrap_or(0)];
    lens.extend(
        fixed
            .values()
            .flat_map(|c| c.nets.iter().map(|n| n.spec.input_len)),
    );
    let resizing = config
        .strategies()?
        .iter()
        .any(|s| matches!(s, Strategy::TlStop | Strategy::TlFull));
    for q in lens {
        if resizing && t.resize == ResizeMode::Pad && q < target {
            return Err(Error::invalid(format!(
                "cannot pad {}-point spectra to the {q}-point source length; use resize = \"spline\"",
                target
            )));
        }
    }
    Ok(())
}

fn bundle_parts(p: &Prepared) -> Result<(Samples, Samples)> {
    Ok((p.bundle.train_samples()?, p.bundle.val_samples()?))
}

fn train_individual(
    config: &ExperimentConfig,
    prepared: &[Prepared],
    arch: Architecture,
    seed: u64,
) -> Result<Vec<(Trained, Checkpoint)>> {
    let wanted = config.evaluated()?;
    let mut out = Vec::new();
    for (k, p) in prepared.iter().enumerate() {
        if !wanted.contains(&p.name) {
            continue;
        }
        let s = derive_seed(&[seed, k as u64]);
        let (net, params, ck) = fit_single(config, p, arch, s)?;
        out.push((
            Trained {
                net,
                params,
                bundle: p.bundle.clone(),
                cost: p.settings.cost,
            },
            ck,
        ));
    }
    Ok(out)
}

/// Trains one dataset's network from scratch; returns the network, its
/// evaluation parameters and the best checkpoint.
fn fit_single(
    config: &ExperimentConfig,
    p: &Prepared,
    arch: Architecture,
    seed: u64,
) -> Result<(Network, ParamStore, Checkpoint)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = build_network(&p.spec(arch, p.bundle.input_len()), &mut store, &mut rng)?;
    let (train, val) = bundle_parts(p)?;
    let t = task(&net, &train, &val, p, p.bundle.means.as_ref());
    let outcome = train_single(&t, &mut store, &config.train_config(seed))?;
    let params = outcome.checkpoint.eval_store()?;
    Ok((net, params, outcome.checkpoint))
}

fn train_shared(
    config: &ExperimentConfig,
    prepared: &[Prepared],
    arch: Architecture,
    seed: u64,
) -> Result<Vec<(Trained, Checkpoint)>> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nets = prepared
        .iter()
        .map(|p| build_network(&p.spec(arch, p.bundle.input_len()), &mut store, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let parts = prepared
        .iter()
        .map(bundle_parts)
        .collect::<Result<Vec<_>>>()?;
    let tasks: Vec<Task<'_>> = prepared
        .iter()
        .zip(&nets)
        .zip(&parts)
        .map(|((p, n), (tr, va))| task(n, tr, va, p, p.bundle.means.as_ref()))
        .collect();
    let outcome = cotrain(&tasks, &mut store, &config.train_config(seed))?;
    let params = outcome.checkpoint.eval_store()?;
    Ok(nets
        .into_iter()
        .zip(prepared)
        .map(|(net, p)| {
            (
                Trained {
                    net,
                    params: params.clone(),
                    bundle: p.bundle.clone(),
                    cost: p.settings.cost,
                },
                outcome.checkpoint.clone(),
            )
        })
        .collect())
}

fn pretrain_source(
    config: &ExperimentConfig,
    prepared: &[Prepared],
    source: &str,
    arch: Architecture,
    rep: usize,
    ckpt_dir: &Option<PathBuf>,
) -> Result<Checkpoint> {
    let (k, p) = prepared
        .iter()
        .enumerate()
        .find(|(_, p)| p.name == source)
        .ok_or_else(|| Error::invalid(format!("source dataset {source} is not loaded")))?;
    let seed = derive_seed(&[config.seed, rep as u64, 0x50, arch.id() as u64, k as u64]);
    let (_, _, ck) = fit_single(config, p, arch, seed)?;
    if let Some(d) = ckpt_dir {
        ck.save(&d.join(format!("r{rep:02}_source_arch{}.ckpt", arch.id())))?;
    }
    Ok(ck)
}

fn train_transferred(
    config: &ExperimentConfig,
    prepared: &[Prepared],
    source: &Checkpoint,
    mode: TransferMode,
    seed: u64,
) -> Result<(Trained, Checkpoint)> {
    let t = config.transfer_settings()?;
    let p = prepared
        .iter()
        .find(|p| p.name == t.target)
        .ok_or_else(|| Error::invalid(format!("target dataset {} is not loaded", t.target)))?;
    let arch = source.nets[0].spec.arch;
    let src = source
        .nets
        .iter()
        .find(|n| n.spec.arch == arch)
        .expect("source network");
    let len = network_input_len(mode.resize, src.spec.input_len, p.bundle.input_len());
    let bundle = resize_bundle(&p.bundle, mode.resize, len, t.pad_value)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (net, mut store) = transfer_trunk(source, &p.spec(arch, len), mode, &mut rng)?;
    let (train, val) = (bundle.train_samples()?, bundle.val_samples()?);
    let tk = Task {
        net: &net,
        train: &train,
        val: &val,
        cost: p.settings.cost,
        means: bundle.means.as_ref(),
    };
    let outcome = finetune(&tk, &mut store, &config.finetune_config(seed))?;
    let params = outcome.checkpoint.eval_store()?;
    Ok((
        Trained {
            net,
            params,
            bundle,
            cost: p.settings.cost,
        },
        outcome.checkpoint,
    ))
}

// ---------------------------------------------------------------- records on disk

const RECORD_COLUMNS: [&str; 6] = [
    "rep",
    "strategy",
    "dataset",
    "arch",
    "holdout",
    "checkpoint",
];

pub fn write_runs_csv(records: &[RunRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut metric_names: Vec<String> = Vec::new();
    for r in records {
        for k in r.metrics.keys() {
            if !metric_names.contains(k) {
                metric_names.push(k.clone());
            }
        }
    }
    let mut header: Vec<String> = RECORD_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(metric_names.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for r in records {
        let mut row = vec![
            r.rep.to_string(),
            r.strategy.key().to_string(),
            r.dataset.clone(),
            r.arch.to_string(),
            format!("{:?}", r.holdout),
            r.checkpoint
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        ];
        row.extend(metric_names.iter().map(|m| {
            r.metrics
                .get(m)
                .map(|v| format!("{v:?}"))
                .unwrap_or_default()
        }));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::data(format!("{}: {e}", path.display()))
}

pub fn read_runs_csv(path: &Path) -> Result<Vec<RunRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < RECORD_COLUMNS.len() || header[..RECORD_COLUMNS.len()] != RECORD_COLUMNS {
        return Err(Error::data(format!(
            "{}: not a run record file (expected columns {})",
            path.display(),
            RECORD_COLUMNS.join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let bad =
            |what: &str| Error::data(format!("{}: row {}: bad {what}", path.display(), i + 1));
        let num = |s: &str, what: &str| s.parse::<f64>().map_err(|_| bad(what));
        let mut metrics = IndexMap::new();
        for (name, v) in header.iter().zip(rec.iter()).skip(RECORD_COLUMNS.len()) {
            if !v.is_empty() {
                metrics.insert(name.clone(), num(v, name)?);
            }
        }
        out.push(RunRecord {
            rep: rec[0].parse().map_err(|_| bad("rep"))?,
            strategy: Strategy::parse(&rec[1])?,
            dataset: rec[2].to_string(),
            arch: rec[3].parse().map_err(|_| bad("arch"))?,
            holdout: num(&rec[4], "holdout")?,
            checkpoint: (!rec[5].is_empty()).then(|| PathBuf::from(&rec[5])),
            metrics,
            seconds: 0.0,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------- reports

fn datasets_of(records: &[RunRecord]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in records {
        if !out.contains(&r.dataset) {
            out.push(r.dataset.clone());
        }
    }
    out
}

fn strategies_of(records: &[RunRecord]) -> Vec<Strategy> {
    let mut out: Vec<Strategy> = Vec::new();
    for r in records {
        if !out.contains(&r.strategy) {
            out.push(r.strategy);
        }
    }
    out
}

fn metrics_of(records: &[RunRecord]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in records {
        for k in r.metrics.keys() {
            if !out.contains(k) {
                out.push(k.clone());
            }
        }
    }
    out
}

/// Per-strategy summary statistics of every metric of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryTable {
    pub dataset: String,
    pub strategies: Vec<Strategy>,
    /// `(metric, summary per strategy)`.
    pub metrics: Vec<(String, Vec<Summary>)>,
}

pub fn summary_tables(records: &[RunRecord]) -> Result<Vec<SummaryTable>> {
    let mut out = Vec::new();
    for dataset in datasets_of(records) {
        let rows: Vec<&RunRecord> = records.iter().filter(|r| r.dataset == dataset).collect();
        let owned: Vec<RunRecord> = rows.iter().map(|r| (*r).clone()).collect();
        let strategies = strategies_of(&owned);
        let mut metrics = Vec::new();
        for m in metrics_of(&owned) {
            let per = strategies
                .iter()
                .map(|s| {
                    let v: Vec<f64> = rows
                        .iter()
                        .filter(|r| r.strategy == *s)
                        .filter_map(|r| r.metrics.get(&m).copied())
                        .collect();
                    summary_stats(&v)
                })
                .collect::<Result<Vec<_>>>()?;
            metrics.push((m, per));
        }
        out.push(SummaryTable {
            dataset,
            strategies,
            metrics,
        });
    }
    Ok(out)
}

const STAT_ROWS: [&str; 7] = ["mean", "std", "min", "25%", "50%", "75%", "max"];

/// The std of a single value is undefined and reported as NaN.
fn stat_values(s: &Summary) -> [f64; 7] {
    let std = if s.std_defined { s.std } else { f64::NAN };
    [s.mean, std, s.min, s.q25, s.q50, s.q75, s.max]
}

impl SummaryTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stat");
        for (m, _) in &self.metrics {
            for s in &self.strategies {
                let _ = write!(out, ",{m}:{}", s.key());
            }
        }
        out.push('\n');
        for (i, stat) in STAT_ROWS.iter().enumerate() {
            out.push_str(stat);
            for (_, per) in &self.metrics {
                for s in per {
                    let _ = write!(out, ",{:?}", stat_values(s)[i]);
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("dataset {}\n", self.dataset);
        let width = self
            .strategies
            .iter()
            .map(|s| s.key().len())
            .max()
            .unwrap_or(0)
            .max(10);
        for (m, per) in &self.metrics {
            let _ = write!(out, "\n{m:<6}");
            for s in &self.strategies {
                let _ = write!(out, " {:>width$}", s.key());
            }
            out.push('\n');
            for (i, stat) in STAT_ROWS.iter().enumerate() {
                let _ = write!(out, "{stat:<6}");
                for s in per {
                    match stat_values(s)[i] {
                        v if v.is_nan() => {
                            let _ = write!(out, " {:>width$}", "-");
                        }
                        v => {
                            let _ = write!(out, " {v:>width$.4}");
                        }
                    }
                }
                out.push('\n');
            }
        }
        out
    }
}

/// One comparison table per dataset and metric, rows ordered by
/// repetition, columns by strategy. Repetitions missing any strategy are
/// skipped.
pub fn comparison_tables(records: &[RunRecord]) -> Result<Vec<(String, ComparisonTable)>> {
    let mut out = Vec::new();
    for dataset in datasets_of(records) {
        let own: Vec<RunRecord> = records
            .iter()
            .filter(|r| r.dataset == dataset)
            .cloned()
            .collect();
        let strategies = strategies_of(&own);
        if strategies.len() < 2 {
            continue;
        }
        let mut reps: Vec<usize> = own.iter().map(|r| r.rep).collect();
        reps.sort_unstable();
        reps.dedup();
        for m in metrics_of(&own) {
            let mut rows = Vec::new();
            for &rep in &reps {
                let row: Option<Vec<f64>> = strategies
                    .iter()
                    .map(|s| {
                        own.iter()
                            .find(|r| r.rep == rep && r.strategy == *s)
                            .and_then(|r| r.metrics.get(&m).copied())
                    })
                    .collect();
                rows.extend(row);
            }
            if rows.len() < 2 {
                continue;
            }
            let names = strategies.iter().map(|s| s.key().to_string()).collect();
            let table = ComparisonTable::new(m.clone(), names, rows, orientation_of(&m))?;
            out.push((format!("{dataset}__{m}"), table));
        }
    }
    Ok(out)
}

/// Writes `runs.csv`, `summary_<dataset>.{csv,txt}` and
/// `compare/<dataset>__<metric>.csv` under `out`.
pub fn write_outputs(records: &[RunRecord], out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_runs_csv(records, &out.join("runs.csv"))?;
    write_reports(records, out)
}

/// Summaries and comparison tables from existing records.
pub fn write_reports(records: &[RunRecord], out: &Path) -> Result<()> {
    let write = |p: PathBuf, text: &str| std::fs::write(&p, text).map_err(|e| Error::io(&p, e));
    for t in summary_tables(records)? {
        write(out.join(format!("summary_{}.csv", t.dataset)), &t.to_csv())?;
        write(out.join(format!("summary_{}.txt", t.dataset)), &t.to_text())?;
    }
    let dir = out.join("compare");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (name, table) in comparison_tables(records)? {
        let p = dir.join(format!("{name}.csv"));
        let f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
        table.write_csv(std::io::BufWriter::new(f))?;
    }
    Ok(())
}

// ---------------------------------------------------------------- comparisons

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompareMode {
    /// Wilcoxon and F test of exactly two strategies.
    Pairwise,
    /// Friedman, Iman–Davenport and Nemenyi over all strategies.
    Multiple,
}

/// Reads a comparison CSV. The metric name is the file stem after the
/// last `__`, which also fixes the orientation.
pub fn load_comparison(path: &Path) -> Result<ComparisonTable> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::invalid(format!("{}: no file name", path.display())))?;
    let metric = stem.rsplit("__").next().unwrap_or(stem);
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut t = ComparisonTable::read_csv(f, metric, orientation_of(metric))
        .map_err(|e| name_error(&path.display().to_string(), e))?;
    t.metric = stem.to_string();
    Ok(t)
}

/// Prefixes the message of `e` with `name`, keeping its kind.
fn name_error(name: &str, e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::invalid(format!("{name}: {m}")),
        Error::Data(m) => Error::data(format!("{name}: {m}")),
        Error::Numerical(m) => Error::numerical(format!("{name}: {m}")),
        other => other,
    }
}

/// Text and CSV renderings of a comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct CompareReport {
    pub text: String,
    pub csv: String,
}

/// Pairwise mode treats the first column as the baseline: `R₊` sums the
/// ranks where the second strategy does better and `F > 1` means the
/// second strategy varies less. Biases are ranked by magnitude.
pub fn run_compare(
    tables: &[ComparisonTable],
    mode: CompareMode,
    alpha: f64,
) -> Result<CompareReport> {
    if tables.is_empty() {
        return Err(Error::invalid("nothing to compare"));
    }
    let mut text = String::new();
    let mut csv = String::new();
    match mode {
        CompareMode::Pairwise => {
            csv.push_str(
                "metric,baseline,other,n,wilcoxon_z,wilcoxon_p,r_plus,r_minus,f,f_df1,f_df2,f_p\n",
            );
            let _ = writeln!(
                text,
                "{:<24} {:>9} {:>7} {:>8} {:>8} {:>8} {:>7}",
                "metric", "z", "p", "R+", "R-", "F", "p"
            );
            for t in tables {
                if t.strategies.len() != 2 {
                    return Err(Error::invalid(format!(
                        "pairwise comparison needs exactly 2 strategies, {} has {}",
                        t.metric,
                        t.strategies.len()
                    )));
                }
                let w = wilcoxon_signed_rank(&t.cost_column(0), &t.cost_column(1))
                    .map_err(|e| name_error(&t.metric, e))?;
                let f = f_variance_test(&t.column(0), &t.column(1))
                    .map_err(|e| name_error(&t.metric, e))?;
                let _ = writeln!(
                    text,
                    "{:<24} {:>9.3} {:>7.3} {:>8} {:>8} {:>8.3} {:>7.3}",
                    t.metric, w.z, w.p_value, w.r_plus, w.r_minus, f.f, f.p_value
                );
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{:?},{:?},{:?},{:?},{:?},{},{},{:?}",
                    t.metric,
                    t.strategies[0],
                    t.strategies[1],
                    w.n,
                    w.z,
                    w.p_value,
                    w.r_plus,
                    w.r_minus,
                    f.f,
                    f.df1,
                    f.df2,
                    f.p_value
                );
            }
            text.push_str("\nR+ sums the ranks where the second column beats the first.\n");
        }
        CompareMode::Multiple => {
            csv.push_str("metric,strategy,average_rank,group,f,df1,df2,p,cd\n");
            for t in tables {
                let k = t.strategies.len();
                let fr = friedman_iman_davenport(t)?;
                let cd = nemenyi_cd(k, t.blocks(), alpha)?;
                let groups = rank_groups(&fr.average_ranks, cd);
                let _ = writeln!(
                    text,
                    "{} (N = {}, k = {k})\n  Iman-Davenport F = {:.3} (df {}, {}), p = {:.3}\n  Nemenyi CD (alpha {alpha}) = {:.4}",
                    t.metric,
                    t.blocks(),
                    fr.f,
                    fr.df1,
                    fr.df2,
                    fr.p_value,
                    cd
                );
                for (g, members) in groups.iter().enumerate() {
                    for &j in members {
                        let _ = writeln!(
                            text,
                            "  group {} {:<16} {:.4}",
                            g + 1,
                            t.strategies[j],
                            fr.average_ranks[j]
                        );
                        let _ = writeln!(
                            csv,
                            "{},{},{:?},{},{:?},{},{},{:?},{:?}",
                            t.metric,
                            t.strategies[j],
                            fr.average_ranks[j],
                            g + 1,
                            fr.f,
                            fr.df1,
                            fr.df2,
                            fr.p_value,
                            cd
                        );
                    }
                }
                text.push('\n');
            }
        }
    }
    Ok(CompareReport { text, csv })
}
