//! Datasets: CSV loading, repetition splits and scatter augmentation.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::TargetMeans;
use crate::tensor::Tensor;

/// Paired spectra `[n, p]` and targets `[n, t]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Samples {
    pub spectra: Tensor,
    pub targets: Tensor,
}

impl Samples {
    pub fn new(spectra: Tensor, targets: Tensor) -> Result<Self> {
        match (spectra.shape(), targets.shape()) {
            ([n, _], [m, _]) if n == m => Ok(Self { spectra, targets }),
            (a, b) => Err(Error::invalid(format!(
                "spectra {a:?} and targets {b:?} must be 2-D with equal row counts"
            ))),
        }
    }

    pub fn len(&self) -> usize {
        self.spectra.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_len(&self) -> usize {
        self.spectra.shape()[1]
    }

    pub fn targets_per_row(&self) -> usize {
        self.targets.shape()[1]
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            spectra: self.spectra.select_rows(idx)?,
            targets: self.targets.select_rows(idx)?,
        })
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Samples) -> Result<Self> {
        if self.input_len() != other.input_len()
            || self.targets_per_row() != other.targets_per_row()
        {
            return Err(Error::data(format!(
                "cannot join samples of width {}+{} with {}+{}",
                self.targets_per_row(),
                self.input_len(),
                other.targets_per_row(),
                other.input_len()
            )));
        }
        let join = |a: &Tensor, b: &Tensor| {
            let mut data = a.data().to_vec();
            data.extend_from_slice(b.data());
            Tensor::new(vec![a.shape()[0] + b.shape()[0], a.shape()[1]], data)
        };
        Samples::new(
            join(&self.spectra, &other.spectra)?,
            join(&self.targets, &other.targets)?,
        )
    }
}

/// Reads rows of `targets` target values followed by spectral values.
/// Row numbers in error messages are 1-based file lines.
pub fn load_csv(path: &Path, targets: usize, header: bool) -> Result<Samples> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, targets, header).map_err(|e| match e {
        Error::Data(msg) => Error::data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn read_csv(input: impl std::io::Read, targets: usize, header: bool) -> Result<Samples> {
    if targets == 0 {
        return Err(Error::invalid("at least one target column is required"));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut width = None;
    let mut ys = Vec::new();
    let mut xs = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::data(format!("malformed csv: {e}")))?;
        let row = record.position().map_or(0, |p| p.line());
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(Error::data(format!(
                "row {row} has {} fields, expected {w}",
                record.len()
            )));
        }
        if w <= targets {
            return Err(Error::data(format!(
                "row {row} has {w} fields, which leaves no spectrum after {targets} targets"
            )));
        }
        for (col, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                Error::data(format!(
                    "row {row}, column {}: {field:?} is not a number",
                    col + 1
                ))
            })?;
            if col < targets {
                ys.push(v);
            } else {
                xs.push(v);
            }
        }
    }
    let Some(w) = width else {
        return Err(Error::data("no data rows"));
    };
    let n = ys.len() / targets;
    Samples::new(
        Tensor::new(vec![n, w - targets], xs)?,
        Tensor::new(vec![n, targets], ys)?,
    )
}

pub fn write_csv(path: &Path, samples: &Samples) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for i in 0..samples.len() {
        let row: Vec<String> = samples
            .targets
            .row(i)
            .iter()
            .chain(samples.spectra.row(i))
            .map(|v| format!("{v:?}"))
            .collect();
        w.write_record(&row).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub holdout: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.holdout
    }
}

/// All rows of one dataset and the index sets of the current repetition.
///
/// `data` holds the pool of training candidates, then the fixed test rows,
/// then any augmented copies appended by [`augment`].
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub name: String,
    pub data: Samples,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub holdout: Vec<usize>,
    pub test: Vec<usize>,
    /// Rows eligible for train/val/holdout.
    pub pool: Vec<usize>,
    /// Target means of the (pre-augmentation) training rows, when every
    /// mean is strictly positive.
    pub means: Option<TargetMeans>,
}

impl DatasetBundle {
    /// An unsplit bundle. With a separate test file its rows form the fixed
    /// test set; otherwise the test set is empty until carved by
    /// [`split_repetition`].
    pub fn new(name: impl Into<String>, pool: Samples, test: Option<Samples>) -> Result<Self> {
        let n = pool.len();
        let (data, test) = match test {
            Some(t) => {
                let m = t.len();
                (pool.concat(&t)?, (n..n + m).collect())
            }
            None => (pool, Vec::new()),
        };
        Ok(Self {
            name: name.into(),
            data,
            train: Vec::new(),
            val: Vec::new(),
            holdout: Vec::new(),
            test,
            pool: (0..n).collect(),
            means: None,
        })
    }

    pub fn input_len(&self) -> usize {
        self.data.input_len()
    }

    pub fn targets_per_row(&self) -> usize {
        self.data.targets_per_row()
    }

    pub fn train_samples(&self) -> Result<Samples> {
        self.data.select(&self.train)
    }

    pub fn val_samples(&self) -> Result<Samples> {
        self.data.select(&self.val)
    }

    pub fn holdout_samples(&self) -> Result<Samples> {
        self.data.select(&self.holdout)
    }

    pub fn test_samples(&self) -> Result<Samples> {
        self.data.select(&self.test)
    }

    /// A copy with every spectrum mapped through `f` (resizing).
    pub fn map_spectra(&self, f: impl Fn(&[f64]) -> Result<Vec<f64>>) -> Result<Self> {
        let n = self.data.len();
        let mut out = Vec::new();
        let mut width = None;
        for i in 0..n {
            let row = f(self.data.spectra.row(i))?;
            if *width.get_or_insert(row.len()) != row.len() {
                return Err(Error::invalid("resizing produced rows of varying length"));
            }
            out.extend(row);
        }
        let width = width.unwrap_or(0);
        let mut next = self.clone();
        next.data = Samples::new(Tensor::new(vec![n, width], out)?, self.data.targets.clone())?;
        Ok(next)
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws the train/validation/holdout split of repetition `rep`.
///
/// The split is a pure function of `(bundle, counts, rep, seed)`, so every
/// strategy evaluated at one repetition sees the same rows. With
/// `carve_test = Some(m)` the test set is not fixed: each repetition takes
/// its own block of `m` pool rows, and blocks never overlap across
/// repetitions.
pub fn split_repetition(
    bundle: &DatasetBundle,
    counts: SplitCounts,
    rep: usize,
    seed: u64,
    carve_test: Option<usize>,
) -> Result<DatasetBundle> {
    let mut pool = bundle.pool.clone();
    let mut test = bundle.test.clone();
    if let Some(m) = carve_test {
        // one permutation per master seed, cut into consecutive blocks
        let mut order = pool.clone();
        order.shuffle(&mut stream_rng(seed, 0));
        let max_reps = order.len() / m.max(1);
        if m == 0 || rep >= max_reps {
            return Err(Error::data(format!(
                "{}: only {max_reps} non-overlapping test blocks of {m} rows fit in {} samples",
                bundle.name,
                order.len()
            )));
        }
        test = order[rep * m..(rep + 1) * m].to_vec();
        test.sort_unstable();
        pool.retain(|i| test.binary_search(i).is_err());
    }
    if counts.total() > pool.len() {
        return Err(Error::data(format!(
            "{}: split needs {} rows but only {} are available",
            bundle.name,
            counts.total(),
            pool.len()
        )));
    }
    pool.shuffle(&mut stream_rng(seed, rep as u64 + 1));
    let (train, rest) = pool.split_at(counts.train);
    let (val, rest) = rest.split_at(counts.val);
    let holdout = &rest[..counts.holdout];
    let mut next = bundle.clone();
    next.train = train.to_vec();
    next.val = val.to_vec();
    next.holdout = holdout.to_vec();
    next.test = test;
    next.means = TargetMeans::from_targets(&next.train_samples()?.targets).ok();
    Ok(next)
}

/// Random scatter added to copies of the training and validation spectra.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Final size relative to the original (1 = no copies).
    pub multiplier: usize,
    /// Offset drawn from `±offset_scale · σ`, σ the training absorbance std.
    pub offset_scale: f64,
    /// Slope of the centred ramp drawn from `±slope_scale · σ`.
    pub slope_scale: f64,
    /// Multiplicative factor drawn from `1 ± multiplicative_scale`.
    pub multiplicative_scale: f64,
    /// Per-value Gaussian noise with std `noise_scale · σ`.
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            multiplier: 10,
            offset_scale: 0.1,
            slope_scale: 0.1,
            multiplicative_scale: 0.1,
            noise_scale: 0.0,
            seed: 0,
        }
    }
}

fn global_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Appends `multiplier − 1` scattered copies of every training and
/// validation row and adds them to the respective index sets. Holdout and
/// test rows are untouched, as are the stored target means.
pub fn augment(bundle: &DatasetBundle, config: &AugmentationConfig) -> Result<DatasetBundle> {
    if config.multiplier == 0 {
        return Err(Error::invalid("augmentation multiplier must be at least 1"));
    }
    if config.multiplier == 1 {
        return Ok(bundle.clone());
    }
    let p = bundle.input_len();
    let sigma = global_std(bundle.train_samples()?.spectra.data());
    let ramp: Vec<f64> = (0..p)
        .map(|i| {
            if p > 1 {
                i as f64 / (p - 1) as f64 - 0.5
            } else {
                0.0
            }
        })
        .collect();
    let noise = Normal::new(0.0, (config.noise_scale * sigma).max(0.0))
        .map_err(|e| Error::invalid(format!("noise scale: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sym = |scale: f64, rng: &mut ChaCha8Rng| scale * (2.0 * rng.random::<f64>() - 1.0);

    let mut next = bundle.clone();
    let mut xs = bundle.data.spectra.data().to_vec();
    let mut ys = bundle.data.targets.data().to_vec();
    let mut rows = bundle.data.len();
    for which in [0, 1] {
        let source = if which == 0 {
            &bundle.train
        } else {
            &bundle.val
        };
        let mut added = Vec::new();
        for &i in source {
            let x = bundle.data.spectra.row(i);
            for _ in 1..config.multiplier {
                let mul = 1.0 + sym(config.multiplicative_scale, &mut rng);
                let off = sym(config.offset_scale * sigma, &mut rng);
                let slope = sym(config.slope_scale * sigma, &mut rng);
                for (v, g) in x.iter().zip(&ramp) {
                    let e = if config.noise_scale > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    xs.push(mul * v + off + slope * g + e);
                }
                ys.extend_from_slice(bundle.data.targets.row(i));
                added.push(rows);
                rows += 1;
            }
        }
        if which == 0 {
            next.train.extend(added);
        } else {
            next.val.extend(added);
        }
    }
    let t = bundle.targets_per_row();
    next.data = Samples::new(
        Tensor::new(vec![rows, p], xs)?,
        Tensor::new(vec![rows, t], ys)?,
    )?;
    Ok(next)
}

/// Current version of the dataset registry format.
pub const REGISTRY_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub path: PathBuf,
    pub targets: usize,
    #[serde(default)]
    pub header: bool,
    /// Separate file with the fixed test set.
    #[serde(default)]
    pub test_path: Option<PathBuf>,
    /// Rows carved per repetition when there is no test file.
    #[serde(default)]
    pub carve_test: Option<usize>,
    pub counts: SplitCounts,
}

/// Named datasets, read from a versioned TOML file. Relative paths are
/// resolved against the registry file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Registry {
    pub version: u32,
    pub datasets: IndexMap<String, DatasetEntry>,
    #[serde(skip)]
    pub base: PathBuf,
}

impl Registry {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut reg: Registry =
            toml::from_str(text).map_err(|e| Error::data(format!("dataset registry: {e}")))?;
        if reg.version != REGISTRY_VERSION {
            return Err(Error::data(format!(
                "dataset registry version {} is not supported (expected {REGISTRY_VERSION})",
                reg.version
            )));
        }
        for (name, e) in &reg.datasets {
            if e.test_path.is_some() == e.carve_test.is_some() {
                return Err(Error::data(format!(
                    "dataset {name}: give exactly one of test_path and carve_test"
                )));
            }
        }
        reg.base = base.to_path_buf();
        Ok(reg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn entry(&self, name: &str) -> Result<&DatasetEntry> {
        self.datasets
            .get(name)
            .ok_or_else(|| Error::data(format!("dataset {name} is not in the registry")))
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// Loads the named dataset as an unsplit bundle.
    pub fn open(&self, name: &str) -> Result<DatasetBundle> {
        let e = self.entry(name)?;
        let pool = load_csv(&self.resolve(&e.path), e.targets, e.header)?;
        let test = match &e.test_path {
            Some(p) => Some(load_csv(&self.resolve(p), e.targets, e.header)?),
            None => None,
        };
        DatasetBundle::new(name, pool, test)
    }

    /// Fails unless every data file of `name` exists.
    pub fn check_files(&self, name: &str) -> Result<()> {
        let e = self.entry(name)?;
        for p in std::iter::once(&e.path).chain(e.test_path.as_ref()) {
            let full = self.resolve(p);
            if !full.is_file() {
                return Err(Error::data(format!(
                    "dataset {name}: missing file {}",
                    full.display()
                )));
            }
        }
        Ok(())
    }
}

/// Settings of the synthetic spectra generator.
///
/// A spectrum is a sum of Gaussian bands of a few shapes (one width per
/// shape) at uniformly random positions, plus baseline scatter and noise.
/// The number of bands scales with the length, so spectra of any length
/// share the same local statistics. Each target is a fixed combination of
/// the mean band amplitude per shape; the combination weights come from
/// `family_seed`, so that datasets of one family share the generating rule
/// and differ only in length and sample count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub samples: usize,
    pub input_len: usize,
    pub targets: usize,
    /// Band standard deviation in index units, one entry per shape.
    pub band_widths: Vec<f64>,
    /// Index units per band of each shape.
    pub band_spacing: f64,
    /// Std of additive white noise.
    pub noise: f64,
    /// Range of the random baseline offset and slope; the multiplicative
    /// factor varies by twice this around 1.
    pub scatter: f64,
    pub family_seed: u64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn medium(seed: u64) -> Self {
        Self {
            samples: 5000,
            input_len: 96,
            targets: 1,
            band_widths: vec![1.5, 4.0],
            band_spacing: 12.0,
            noise: 0.005,
            scatter: 0.05,
            family_seed: 7,
            seed,
        }
    }

    pub fn small(seed: u64) -> Self {
        Self {
            samples: 150,
            input_len: 64,
            ..Self::medium(seed)
        }
    }
}

/// Generates a synthetic dataset; see [`SyntheticConfig`].
pub fn synthetic(config: &SyntheticConfig) -> Result<Samples> {
    let (p, t) = (config.input_len, config.targets);
    let widths = &config.band_widths;
    if p < 2 || t == 0 || widths.is_empty() || widths.iter().any(|w| !(*w > 0.0)) {
        return Err(Error::invalid(
            "synthetic data needs p ≥ 2, t ≥ 1 and at least one positive band width",
        ));
    }
    if !(config.band_spacing > 0.0) {
        return Err(Error::invalid("band spacing must be positive"));
    }
    let per_shape = ((p as f64 / config.band_spacing).round() as usize).max(1);
    let mut family = ChaCha8Rng::seed_from_u64(config.family_seed);
    // signed weights: a target contrasts shapes instead of measuring total area
    let weights: Vec<Vec<f64>> = (0..t)
        .map(|_| {
            widths
                .iter()
                .map(|_| family.random_range(-1.0..1.0))
                .collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.noise.max(0.0))
        .map_err(|e| Error::invalid(format!("noise: {e}")))?;
    let mut xs = Vec::with_capacity(config.samples * p);
    let mut ys = Vec::with_capacity(config.samples * t);
    let mut signal = vec![0.0; p];
    for _ in 0..config.samples {
        signal.fill(0.0);
        let mut mean_amp = Vec::with_capacity(widths.len());
        for w in widths {
            let mut total = 0.0;
            for _ in 0..per_shape {
                let amp: f64 = rng.random_range(0.0..1.0);
                let mu = rng.random_range(0.0..(p - 1) as f64);
                total += amp;
                for (i, s) in signal.iter_mut().enumerate() {
                    *s += amp * (-0.5 * ((i as f64 - mu) / w).powi(2)).exp();
                }
            }
            mean_amp.push(total / per_shape as f64);
        }
        let mul = 1.0 + 2.0 * config.scatter * (2.0 * rng.random::<f64>() - 1.0);
        let off = config.scatter * (2.0 * rng.random::<f64>() - 1.0);
        let slope = config.scatter * (2.0 * rng.random::<f64>() - 1.0);
        for (i, s) in signal.iter().enumerate() {
            let ramp = i as f64 / (p - 1) as f64 - 0.5;
            xs.push(mul * s + off + slope * ramp + noise.sample(&mut rng));
        }
        for wt in &weights {
            let y: f64 = wt.iter().zip(&mean_amp).map(|(a, m)| a * (m - 0.5)).sum();
            ys.push(2.0 + y);
        }
    }
    Samples::new(
        Tensor::new(vec![config.samples, p], xs)?,
        Tensor::new(vec![config.samples, t], ys)?,
    )
}

/// Writes a medium (96 points) and a small (64 points) synthetic dataset of
/// one family, each with a fixed test file, and a registry `datasets.toml`
/// naming them. Returns the registry path.
pub fn write_demo_data(dir: &Path, seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let sets = [
        (
            "medium",
            SyntheticConfig::medium(0),
            4250,
            500,
            (3000, 750, 500),
        ),
        ("small", SyntheticConfig::small(0), 150, 100, (100, 30, 20)),
    ];
    let mut registry = Registry {
        version: REGISTRY_VERSION,
        datasets: IndexMap::new(),
        base: dir.to_path_buf(),
    };
    for (k, (name, base, pool, test, (train, val, holdout))) in sets.into_iter().enumerate() {
        for (file, samples, part) in [
            (format!("{name}.csv"), pool, 0u64),
            (format!("{name}_test.csv"), test, 1),
        ] {
            let config = SyntheticConfig {
                samples,
                seed: seed.wrapping_mul(4).wrapping_add(2 * k as u64 + part),
                ..base.clone()
            };
            write_csv(&dir.join(&file), &synthetic(&config)?)?;
        }
        registry.datasets.insert(
            name.to_string(),
            DatasetEntry {
                path: format!("{name}.csv").into(),
                targets: 1,
                header: false,
                test_path: Some(format!("{name}_test.csv").into()),
                carve_test: None,
                counts: SplitCounts {
                    train,
                    val,
                    holdout,
                },
            },
        );
    }
    let path = dir.join("datasets.toml");
    let text = toml::to_string(&registry).map_err(|e| Error::invalid(format!("registry: {e}")))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
