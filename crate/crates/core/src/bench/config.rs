use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{
    build_equivalence_classes, load_dataset_csv, make_dataset, split_semi, ClassMode, Dataset, DatasetKind,
    PartialDataset,
};
use crate::trainer::{Method, TrainConfig};
use crate::{Error, Result};

/// Where examples come from and how many are held out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    /// Synthetic generator; ignored when `csv` is set.
    pub generator: DatasetKind,
    /// Existing `f0,…,label` file to use instead of a generator.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    /// Examples available for the labeled and unlabeled subsets.
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    /// Seed of the generator; splits are seeded per run.
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            generator: DatasetKind::TwoMoons { noise: 0.1 },
            csv: None,
            train: 2000,
            validation: 0,
            test: 500,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    /// Dataset name used in result rows.
    pub fn name(&self) -> String {
        match &self.csv {
            Some(path) => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "csv".into()),
            None => self.generator.name().to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.test == 0 {
            return Err(Error::Config("dataset.test must be ≥ 1".into()));
        }
        if self.csv.is_none() && self.train == 0 {
            return Err(Error::Config("dataset.train must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Generates (or loads) the full dataset.
    pub fn materialize(&self) -> Result<Dataset> {
        self.validate()?;
        match &self.csv {
            Some(path) => load_dataset_csv(path),
            None => make_dataset(&self.generator, self.train + self.validation + self.test, self.seed),
        }
    }
}

/// Splits `data` for one run and attaches equivalence classes.
pub fn prepare_split(
    data: &Dataset,
    spec: &DatasetSpec,
    mode: ClassMode,
    n_labeled: usize,
    seed: u64,
) -> Result<PartialDataset> {
    let split = split_semi(data, n_labeled, spec.validation, spec.test, seed)?;
    build_equivalence_classes(&split, mode, seed)
}

/// A sweep over methods, labeled budgets and seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub dataset: DatasetSpec,
    pub equivalence: ClassMode,
    pub methods: Vec<Method>,
    pub n_labeled: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Template; `method` and `seed` are overwritten per run.
    pub train: TrainConfig,
    pub output: PathBuf,
    /// Write measured wall-clock seconds instead of 0.
    pub record_seconds: bool,
}

/// Hyperparameters the grid search can vary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridParam {
    #[serde(rename = "alpha")]
    Alpha,
    #[serde(rename = "lambda_U")]
    LambdaU,
    #[serde(rename = "lambda_E")]
    LambdaE,
}

impl GridParam {
    pub fn name(self) -> &'static str {
        match self {
            GridParam::Alpha => "alpha",
            GridParam::LambdaU => "lambda_U",
            GridParam::LambdaE => "lambda_E",
        }
    }

    pub fn get(self, config: &TrainConfig) -> f64 {
        match self {
            GridParam::Alpha => config.mix.alpha,
            GridParam::LambdaU => config.weights.lambda_u,
            GridParam::LambdaE => config.weights.lambda_e,
        }
    }

    /// Copy of `config` with only this hyperparameter replaced.
    pub fn apply(self, config: &TrainConfig, value: f64) -> TrainConfig {
        let mut out = config.clone();
        match self {
            GridParam::Alpha => out.mix.alpha = value,
            GridParam::LambdaU => out.weights.lambda_u = value,
            GridParam::LambdaE => out.weights.lambda_e = value,
        }
        out
    }

    fn check(self, value: f64) -> Result<()> {
        let ok = match self {
            GridParam::Alpha => value > 0.0,
            GridParam::LambdaU | GridParam::LambdaE => value >= 0.0,
        } && value.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "grid value {value} not allowed for {}",
                self.name()
            )))
        }
    }
}

/// Univariate search over one hyperparameter; the other two stay at the
/// values of `train`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub dataset: DatasetSpec,
    pub equivalence: ClassMode,
    pub param: GridParam,
    pub values: Vec<f64>,
    pub method: Method,
    pub n_labeled: usize,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub output: PathBuf,
    pub record_seconds: bool,
}

/// A parsed configuration file.
#[derive(Clone, Debug, PartialEq)]
pub enum LabConfig {
    Sweep(ExperimentSpec),
    Grid(GridSpec),
}

impl LabConfig {
    pub fn dataset(&self) -> &DatasetSpec {
        match self {
            LabConfig::Sweep(s) => &s.dataset,
            LabConfig::Grid(g) => &g.dataset,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepTable {
    methods: Vec<Method>,
    n_labeled: Vec<usize>,
    seeds: Vec<u64>,
}

fn default_grid_method() -> Method {
    Method::MixmatchNst
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridTable {
    param: GridParam,
    values: Vec<f64>,
    #[serde(default = "default_grid_method")]
    method: Method,
    n_labeled: usize,
    seeds: Vec<u64>,
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

fn default_mode() -> ClassMode {
    ClassMode::PerLabel
}

/// On-disk layout of a configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileLayout {
    #[serde(default = "default_output")]
    output: PathBuf,
    #[serde(default)]
    record_seconds: bool,
    #[serde(default)]
    dataset: DatasetSpec,
    #[serde(default = "default_mode")]
    equivalence: ClassMode,
    #[serde(default)]
    train: TrainConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    sweep: Option<SweepTable>,
    #[serde(skip_serializing_if = "Option::is_none")]
    grid: Option<GridTable>,
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::Config("seeds must not be empty".into()));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = seeds.iter().find(|s| !seen.insert(**s)) {
        return Err(Error::Config(format!("seed {dup} listed twice")));
    }
    Ok(())
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("sweep.methods must not be empty".into()));
        }
        if self.n_labeled.is_empty() {
            return Err(Error::Config("sweep.n_labeled must not be empty".into()));
        }
        check_seeds(&self.seeds)?;
        self.dataset.validate()?;
        self.train.validate()
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("grid.values must not be empty".into()));
        }
        for &v in &self.values {
            self.param.check(v)?;
        }
        check_seeds(&self.seeds)?;
        self.dataset.validate()?;
        self.train.validate()
    }
}

impl LabConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            LabConfig::Sweep(s) => s.validate(),
            LabConfig::Grid(g) => g.validate(),
        }
    }

    fn from_layout(file: FileLayout) -> Result<Self> {
        let config = match (file.sweep, file.grid) {
            (Some(s), None) => LabConfig::Sweep(ExperimentSpec {
                dataset: file.dataset,
                equivalence: file.equivalence,
                methods: s.methods,
                n_labeled: s.n_labeled,
                seeds: s.seeds,
                train: file.train,
                output: file.output,
                record_seconds: file.record_seconds,
            }),
            (None, Some(g)) => LabConfig::Grid(GridSpec {
                dataset: file.dataset,
                equivalence: file.equivalence,
                param: g.param,
                values: g.values,
                method: g.method,
                n_labeled: g.n_labeled,
                seeds: g.seeds,
                train: file.train,
                output: file.output,
                record_seconds: file.record_seconds,
            }),
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "a config holds either [sweep] or [grid], not both".into(),
                ))
            }
            (None, None) => return Err(Error::Config("missing [sweep] or [grid] table".into())),
        };
        config.validate()?;
        Ok(config)
    }

    fn to_layout(&self) -> FileLayout {
        match self {
            LabConfig::Sweep(s) => FileLayout {
                output: s.output.clone(),
                record_seconds: s.record_seconds,
                dataset: s.dataset.clone(),
                equivalence: s.equivalence,
                train: s.train.clone(),
                sweep: Some(SweepTable {
                    methods: s.methods.clone(),
                    n_labeled: s.n_labeled.clone(),
                    seeds: s.seeds.clone(),
                }),
                grid: None,
            },
            LabConfig::Grid(g) => FileLayout {
                output: g.output.clone(),
                record_seconds: g.record_seconds,
                dataset: g.dataset.clone(),
                equivalence: g.equivalence,
                train: g.train.clone(),
                sweep: None,
                grid: Some(GridTable {
                    param: g.param,
                    values: g.values.clone(),
                    method: g.method,
                    n_labeled: g.n_labeled,
                    seeds: g.seeds.clone(),
                }),
            },
        }
    }

    /// TOML text that [`parse_config_str`] turns back into `self`.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(&self.to_layout()).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Parses TOML text; unknown keys, type mismatches and missing required
/// keys are configuration errors that name the key.
pub fn parse_config_str(text: &str) -> Result<LabConfig> {
    let layout: FileLayout = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    LabConfig::from_layout(layout)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<LabConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}
