use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::config::{prepare_split, ExperimentSpec, GridParam, GridSpec};
use crate::bench::config::DatasetSpec;
use crate::datagen::{ClassMode, Dataset};
use crate::trainer::{train, EvalRecord, Method, TrainConfig};
use crate::{Error, Result};

pub const RAW_HEADER: [&str; 6] = ["method", "dataset", "n_labeled", "seed", "test_error", "seconds"];
pub const AGGREGATE_HEADER: [&str; 6] = ["method", "dataset", "n_labeled", "mean_error", "std_error", "n_seeds"];
pub const HISTORY_HEADER: [&str; 4] = ["step", "train_loss", "validation_error", "test_error"];

/// Outcome of one (method, n_labeled, seed) cell. A failed run has a NaN
/// error.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub method: Method,
    pub dataset: String,
    pub n_labeled: usize,
    pub seed: u64,
    pub test_error: f64,
    pub seconds: f64,
}

impl ResultRow {
    pub fn failed(&self) -> bool {
        self.test_error.is_nan()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub method: Method,
    pub dataset: String,
    pub n_labeled: usize,
    pub mean_error: f64,
    /// Sample (n − 1) standard deviation; 0 for a single seed.
    pub std_error: f64,
    pub n_seeds: usize,
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

/// One row per (method, dataset, n_labeled) over successful runs, in that
/// order. Groups where every run failed are left out.
pub fn aggregate(rows: &[ResultRow]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(Method, String, usize), Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| !r.failed()) {
        groups
            .entry((r.method, r.dataset.clone(), r.n_labeled))
            .or_default()
            .push(r.test_error);
    }
    groups
        .into_iter()
        .map(|((method, dataset, n_labeled), errors)| {
            let (mean_error, std_error) = mean_std(&errors);
            AggregateRow {
                method,
                dataset,
                n_labeled,
                mean_error,
                std_error,
                n_seeds: errors.len(),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutcome {
    pub rows: Vec<ResultRow>,
    pub aggregate: Vec<AggregateRow>,
    /// One message per failed run.
    pub failures: Vec<String>,
}

struct Cell {
    method: Method,
    n_labeled: usize,
    seed: u64,
    config: TrainConfig,
}

fn run_cell(
    data: &Dataset,
    spec: &DatasetSpec,
    mode: ClassMode,
    cell: &Cell,
    record_seconds: bool,
) -> (ResultRow, Option<String>) {
    let outcome =
        prepare_split(data, spec, mode, cell.n_labeled, cell.seed).and_then(|split| train(&cell.config, &split));
    let mut row = ResultRow {
        method: cell.method,
        dataset: spec.name(),
        n_labeled: cell.n_labeled,
        seed: cell.seed,
        test_error: f64::NAN,
        seconds: 0.0,
    };
    match outcome {
        Ok(result) => {
            row.test_error = result.final_test_error;
            if record_seconds {
                row.seconds = result.seconds;
            }
            (row, None)
        }
        Err(e) => {
            let msg = format!("{} n_labeled={} seed={}: {e}", cell.method, cell.n_labeled, cell.seed);
            (row, Some(msg))
        }
    }
}

fn run_cells(
    data: &Dataset,
    spec: &DatasetSpec,
    mode: ClassMode,
    cells: &[Cell],
    record_seconds: bool,
    jobs: usize,
) -> Result<Vec<(ResultRow, Option<String>)>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        cells
            .par_iter()
            .map(|c| run_cell(data, spec, mode, c, record_seconds))
            .collect()
    }))
}

fn sort_key(r: &ResultRow) -> (Method, usize, u64) {
    (r.method, r.n_labeled, r.seed)
}

/// Runs every (method, n_labeled, seed) cell on up to `jobs` threads.
/// Runs that fail are kept as NaN rows and reported in `failures`.
pub fn run_sweep(spec: &ExperimentSpec, jobs: usize) -> Result<SweepOutcome> {
    spec.validate()?;
    let data = spec.dataset.materialize()?;
    let mut cells = Vec::new();
    for &method in &spec.methods {
        for &n_labeled in &spec.n_labeled {
            for &seed in &spec.seeds {
                cells.push(Cell {
                    method,
                    n_labeled,
                    seed,
                    config: TrainConfig {
                        method,
                        seed,
                        ..spec.train.clone()
                    },
                });
            }
        }
    }
    let mut results = run_cells(
        &data,
        &spec.dataset,
        spec.equivalence,
        &cells,
        spec.record_seconds,
        jobs,
    )?;
    results.sort_by_key(|(r, _)| sort_key(r));
    let failures = results.iter().filter_map(|(_, f)| f.clone()).collect();
    let rows: Vec<ResultRow> = results.into_iter().map(|(r, _)| r).collect();
    Ok(SweepOutcome {
        aggregate: aggregate(&rows),
        rows,
        failures,
    })
}

/// Runs of one grid value.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub value: f64,
    pub rows: Vec<ResultRow>,
    pub aggregate: AggregateRow,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridOutcome {
    pub param: GridParam,
    pub points: Vec<GridPoint>,
    /// Grid value with the lowest mean error (first one on ties).
    pub selected: f64,
    pub failures: Vec<String>,
}

/// Training configs of a grid search, one per value, in grid order.
pub fn grid_configs(spec: &GridSpec) -> Vec<(f64, TrainConfig)> {
    let base = TrainConfig {
        method: spec.method,
        ..spec.train.clone()
    };
    spec.values.iter().map(|&v| (v, spec.param.apply(&base, v))).collect()
}

/// Varies one hyperparameter over its grid, the rest held at the base
/// config, and selects the value with the lowest mean test error.
pub fn grid_search(spec: &GridSpec, jobs: usize) -> Result<GridOutcome> {
    spec.validate()?;
    let data = spec.dataset.materialize()?;
    let configs = grid_configs(spec);
    let mut cells = Vec::new();
    for (_, config) in &configs {
        for &seed in &spec.seeds {
            cells.push(Cell {
                method: spec.method,
                n_labeled: spec.n_labeled,
                seed,
                config: TrainConfig { seed, ..config.clone() },
            });
        }
    }
    let results = run_cells(
        &data,
        &spec.dataset,
        spec.equivalence,
        &cells,
        spec.record_seconds,
        jobs,
    )?;
    let failures = results.iter().filter_map(|(_, f)| f.clone()).collect();
    let per_value = spec.seeds.len();
    let mut points = Vec::with_capacity(configs.len());
    for ((value, _), chunk) in configs.iter().zip(results.chunks(per_value)) {
        let mut rows: Vec<ResultRow> = chunk.iter().map(|(r, _)| r.clone()).collect();
        rows.sort_by_key(sort_key);
        let ok: Vec<f64> = rows.iter().filter(|r| !r.failed()).map(|r| r.test_error).collect();
        let (mean_error, std_error) = mean_std(&ok);
        points.push(GridPoint {
            value: *value,
            aggregate: AggregateRow {
                method: spec.method,
                dataset: spec.dataset.name(),
                n_labeled: spec.n_labeled,
                mean_error,
                std_error,
                n_seeds: ok.len(),
            },
            rows,
        });
    }
    let selected = points
        .iter()
        .filter(|p| !p.aggregate.mean_error.is_nan())
        .fold(None::<&GridPoint>, |best, p| match best {
            Some(b) if b.aggregate.mean_error <= p.aggregate.mean_error => Some(b),
            _ => Some(p),
        })
        .map(|p| p.value)
        .ok_or_else(|| Error::Config("every grid run failed".into()))?;
    Ok(GridOutcome {
        param: spec.param,
        points,
        selected,
        failures,
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Format(format!("{}: {e}", path.display()))
}

fn raw_fields(r: &ResultRow) -> [String; 6] {
    [
        r.method.to_string(),
        r.dataset.clone(),
        r.n_labeled.to_string(),
        r.seed.to_string(),
        r.test_error.to_string(),
        r.seconds.to_string(),
    ]
}

fn aggregate_fields(a: &AggregateRow) -> [String; 6] {
    [
        a.method.to_string(),
        a.dataset.clone(),
        a.n_labeled.to_string(),
        a.mean_error.to_string(),
        a.std_error.to_string(),
        a.n_seeds.to_string(),
    ]
}

pub fn write_raw_csv(rows: &[ResultRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    w.write_record(RAW_HEADER).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(raw_fields(r)).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Evaluation history of one run; the validation cell is empty when the
/// split has no validation set.
pub fn write_history_csv(history: &[EvalRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    w.write_record(HISTORY_HEADER).map_err(csv_err(path))?;
    for h in history {
        let validation = h.validation_error.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([
            h.step.to_string(),
            h.train_loss.to_string(),
            validation,
            h.test_error.to_string(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_aggregate_csv(rows: &[AggregateRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    w.write_record(AGGREGATE_HEADER).map_err(csv_err(path))?;
    for a in rows {
        w.write_record(aggregate_fields(a)).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn parse_field<T: std::str::FromStr>(record: &csv::StringRecord, i: usize, name: &str, line: usize) -> Result<T> {
    let raw = record.get(i).unwrap_or("");
    raw.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad {name} `{raw}`"),
    })
}

fn read_table(path: &Path, header: &[&str]) -> Result<Vec<(usize, csv::StringRecord)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let record = record.map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        if line == 1 {
            if record.iter().ne(header.iter().copied()) {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected header `{}`", header.join(",")),
                });
            }
            continue;
        }
        if record.len() != header.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        out.push((line, record));
    }
    if out.is_empty() && reader.position().record() == 0 {
        return Err(Error::Parse {
            line: 1,
            msg: "missing header".into(),
        });
    }
    Ok(out)
}

pub fn read_raw_csv(path: impl AsRef<Path>) -> Result<Vec<ResultRow>> {
    read_table(path.as_ref(), &RAW_HEADER)?
        .into_iter()
        .map(|(line, r)| {
            Ok(ResultRow {
                method: parse_field(&r, 0, "method", line)?,
                dataset: r[1].to_string(),
                n_labeled: parse_field(&r, 2, "n_labeled", line)?,
                seed: parse_field(&r, 3, "seed", line)?,
                test_error: parse_field(&r, 4, "test_error", line)?,
                seconds: parse_field(&r, 5, "seconds", line)?,
            })
        })
        .collect()
}

pub fn read_aggregate_csv(path: impl AsRef<Path>) -> Result<Vec<AggregateRow>> {
    read_table(path.as_ref(), &AGGREGATE_HEADER)?
        .into_iter()
        .map(|(line, r)| {
            let row = AggregateRow {
                method: parse_field(&r, 0, "method", line)?,
                dataset: r[1].to_string(),
                n_labeled: parse_field(&r, 2, "n_labeled", line)?,
                mean_error: parse_field(&r, 3, "mean_error", line)?,
                std_error: parse_field(&r, 4, "std_error", line)?,
                n_seeds: parse_field(&r, 5, "n_seeds", line)?,
            };
            if !row.mean_error.is_finite() || !row.std_error.is_finite() || row.std_error < 0.0 {
                return Err(Error::Parse {
                    line,
                    msg: "mean_error and std_error must be finite, std_error ≥ 0".into(),
                });
            }
            Ok(row)
        })
        .collect()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_failures(failures: &[String], path: &Path) -> Result<()> {
    let mut text = failures.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `raw.csv`, `aggregate.csv` and `errors.log` into `dir`.
pub fn write_sweep(outcome: &SweepOutcome, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    ensure_dir(dir)?;
    write_raw_csv(&outcome.rows, dir.join("raw.csv"))?;
    write_aggregate_csv(&outcome.aggregate, dir.join("aggregate.csv"))?;
    write_failures(&outcome.failures, &dir.join("errors.log"))
}

/// Writes `grid_raw.csv` and `grid_aggregate.csv` (the sweep schemas with
/// leading `param,value` columns), `selected.txt` and `errors.log`.
pub fn write_grid(outcome: &GridOutcome, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    ensure_dir(dir)?;
    let name = outcome.param.name();

    let path = dir.join("grid_raw.csv");
    let mut w = csv_writer(&path)?;
    let header: Vec<&str> = ["param", "value"].into_iter().chain(RAW_HEADER).collect();
    w.write_record(&header).map_err(csv_err(&path))?;
    for p in &outcome.points {
        for r in &p.rows {
            let fields = [name.to_string(), p.value.to_string()].into_iter().chain(raw_fields(r));
            w.write_record(fields).map_err(csv_err(&path))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("grid_aggregate.csv");
    let mut w = csv_writer(&path)?;
    let header: Vec<&str> = ["param", "value"].into_iter().chain(AGGREGATE_HEADER).collect();
    w.write_record(&header).map_err(csv_err(&path))?;
    for p in &outcome.points {
        let fields = [name.to_string(), p.value.to_string()]
            .into_iter()
            .chain(aggregate_fields(&p.aggregate));
        w.write_record(fields).map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("selected.txt");
    fs::write(&path, format!("{name}={}\n", outcome.selected)).map_err(|e| Error::io(&path, e))?;
    write_failures(&outcome.failures, &dir.join("errors.log"))
}
