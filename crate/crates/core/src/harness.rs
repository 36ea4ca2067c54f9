//! Experiment configuration, the multi-seed runner, CSV tables and SVG plots.
//!
//! Config files are plain `key = value` lines with `#` comments. Relative
//! paths are resolved against the directory holding the config file.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::continual::{run_task_sequence, AccuracyMatrix, Method, TrainConfig};
use crate::data::{
    load_idx, make_permuted_tasks, make_split_tasks, make_synthetic_tasks, Dataset, SyntheticSpec, TaskStream,
    STANDARD_SPLIT_PAIRS,
};
use crate::error::{Error, Result};

pub const RAW_HEADER: &str = "method,seed,after_task,eval_task,accuracy";
pub const AGGREGATE_HEADER: &str = "method,after_task,avg_accuracy_mean,avg_accuracy_std,forgetting_mean";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Benchmark {
    PermutedMnist,
    SplitMnist,
    SplitFashion,
    Synthetic,
}

impl Benchmark {
    pub fn name(self) -> &'static str {
        match self {
            Benchmark::PermutedMnist => "permuted_mnist",
            Benchmark::SplitMnist => "split_mnist",
            Benchmark::SplitFashion => "split_fashion",
            Benchmark::Synthetic => "synthetic",
        }
    }

    pub fn default_n_tasks(self) -> usize {
        5
    }

    pub fn default_hidden_dims(self) -> Vec<usize> {
        match self {
            Benchmark::PermutedMnist => vec![100, 100],
            Benchmark::SplitMnist => vec![256, 256],
            Benchmark::SplitFashion => vec![150; 4],
            Benchmark::Synthetic => vec![40, 40],
        }
    }

    fn max_tasks(self) -> Option<usize> {
        match self {
            Benchmark::SplitMnist | Benchmark::SplitFashion => Some(STANDARD_SPLIT_PAIRS.len()),
            _ => None,
        }
    }
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Benchmark {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "permuted_mnist" => Ok(Benchmark::PermutedMnist),
            "split_mnist" => Ok(Benchmark::SplitMnist),
            "split_fashion" => Ok(Benchmark::SplitFashion),
            "synthetic" => Ok(Benchmark::Synthetic),
            other => Err(Error::Argument(format!("unknown benchmark '{other}'"))),
        }
    }
}

/// IDX files for one dataset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataPaths {
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticParams {
    pub n_per_class: usize,
    pub input_dim: usize,
    pub separation: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            n_per_class: 313,
            input_dim: 20,
            separation: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub benchmark: Benchmark,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub n_tasks: usize,
    /// Shared training settings; `seed` is replaced per run.
    pub train: TrainConfig,
    pub mnist: DataPaths,
    pub fashion: DataPaths,
    pub max_train: Option<usize>,
    pub max_test: Option<usize>,
    pub synthetic: SyntheticParams,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    /// Config with every default applied for `benchmark`.
    pub fn new(benchmark: Benchmark, methods: Vec<Method>) -> Self {
        ExperimentConfig {
            benchmark,
            methods,
            seeds: vec![0, 1, 2],
            n_tasks: benchmark.default_n_tasks(),
            train: TrainConfig {
                hidden_dims: benchmark.default_hidden_dims(),
                ..TrainConfig::default()
            },
            mnist: DataPaths::default(),
            fashion: DataPaths::default(),
            max_train: None,
            max_test: None,
            synthetic: SyntheticParams::default(),
            out_dir: PathBuf::from("results"),
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Argument("no methods given".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Argument("no seeds given".into()));
        }
        if self.n_tasks == 0 {
            return Err(Error::Argument("n_tasks must be at least 1".into()));
        }
        if let Some(max) = self.benchmark.max_tasks() {
            if self.n_tasks > max {
                return Err(Error::Argument(format!(
                    "{} has at most {max} tasks, got {}",
                    self.benchmark, self.n_tasks
                )));
            }
        }
        self.train.validate()
    }

    fn data_paths(&self) -> Option<&DataPaths> {
        match self.benchmark {
            Benchmark::PermutedMnist | Benchmark::SplitMnist => Some(&self.mnist),
            Benchmark::SplitFashion => Some(&self.fashion),
            Benchmark::Synthetic => None,
        }
    }
}

fn config_err(line: usize, message: impl Into<String>) -> Error {
    Error::Config {
        line,
        message: message.into(),
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| config_err(line, format!("malformed value '{value}' for {key}")))
}

fn parse_list<T: FromStr>(line: usize, key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|item| parse_value(line, key, item.trim()))
        .collect()
}

fn parse_nonneg(line: usize, key: &str, value: &str) -> Result<f64> {
    let v: f64 = parse_value(line, key, value)?;
    if !(v >= 0.0) || !v.is_finite() {
        return Err(config_err(line, format!("{key} must be a finite nonnegative number")));
    }
    Ok(v)
}

fn parse_positive<T: FromStr + PartialOrd + Default>(line: usize, key: &str, value: &str) -> Result<T> {
    let v: T = parse_value(line, key, value)?;
    if v <= T::default() {
        return Err(config_err(line, format!("{key} must be positive")));
    }
    Ok(v)
}

/// Reads and parses a config file.
pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    parse_config_str(&text, base)
}

/// Parses config text; relative paths are joined onto `base`.
pub fn parse_config_str(text: &str, base: &Path) -> Result<ExperimentConfig> {
    let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| config_err(line, format!("expected 'key = value', found '{content}'")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(config_err(line, format!("expected 'key = value', found '{content}'")));
        }
        if let Some((first, _)) = entries.get(key) {
            return Err(config_err(line, format!("duplicate key '{key}' (first set on line {first})")));
        }
        entries.insert(key.to_string(), (line, value.to_string()));
    }

    let take = |entries: &mut BTreeMap<String, (usize, String)>, key: &str| entries.remove(key);
    let (line, value) = take(&mut entries, "benchmark").ok_or(Error::MissingKey {
        key: "benchmark".into(),
    })?;
    let benchmark: Benchmark = value
        .parse()
        .map_err(|_| config_err(line, format!("unknown benchmark '{value}'")))?;
    let (line, value) = take(&mut entries, "methods").ok_or(Error::MissingKey { key: "methods".into() })?;
    let mut methods = Vec::new();
    for name in value.split(',') {
        let m: Method = name
            .trim()
            .parse()
            .map_err(|_| config_err(line, format!("unknown method '{}'", name.trim())))?;
        if methods.contains(&m) {
            return Err(config_err(line, format!("method '{m}' listed twice")));
        }
        methods.push(m);
    }

    let mut cfg = ExperimentConfig::new(benchmark, methods);
    let mut n_tasks_line = 0;
    let resolve = |v: &str| {
        let p = PathBuf::from(v);
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    };

    let mut ordered: Vec<(String, (usize, String))> = entries.into_iter().collect();
    ordered.sort_by_key(|(_, (line, _))| *line);
    for (key, (line, value)) in ordered {
        let v = value.as_str();
        let k = key.as_str();
        match k {
            "seeds" => {
                cfg.seeds = parse_list(line, k, v)?;
                let mut sorted = cfg.seeds.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != cfg.seeds.len() {
                    return Err(config_err(line, "seeds contain duplicates"));
                }
            }
            "n_tasks" => {
                cfg.n_tasks = parse_positive(line, k, v)?;
                n_tasks_line = line;
            }
            "epochs" => cfg.train.epochs = parse_positive(line, k, v)?,
            "batch_size" => cfg.train.batch_size = parse_positive(line, k, v)?,
            "learning_rate" => cfg.train.learning_rate = parse_positive(line, k, v)?,
            "lambda" => cfg.train.hp.lambda = parse_nonneg(line, k, v)?,
            "k" => cfg.train.hp.k = parse_nonneg(line, k, v)?,
            "fisher_samples" => cfg.train.fisher_samples = parse_positive(line, k, v)?,
            "coreset_size" => cfg.train.coreset_size = parse_value(line, k, v)?,
            "eval_samples" => {
                cfg.train.eval_samples = parse_positive(line, k, v)?;
                cfg.train.hp.mc_eval_samples = cfg.train.eval_samples;
            }
            "mc_train_samples" => cfg.train.hp.mc_train_samples = parse_positive(line, k, v)?,
            "hidden_dims" => {
                let dims: Vec<usize> = parse_list(line, k, v)?;
                if dims.contains(&0) {
                    return Err(config_err(line, "hidden_dims entries must be positive"));
                }
                cfg.train.hidden_dims = dims;
            }
            "max_train" => cfg.max_train = Some(parse_positive(line, k, v)?),
            "max_test" => cfg.max_test = Some(parse_positive(line, k, v)?),
            "synthetic_per_class" => cfg.synthetic.n_per_class = parse_positive(line, k, v)?,
            "synthetic_dim" => cfg.synthetic.input_dim = parse_positive(line, k, v)?,
            "synthetic_separation" => cfg.synthetic.separation = parse_nonneg(line, k, v)?,
            "mnist_images" => cfg.mnist.images = Some(resolve(v)),
            "mnist_labels" => cfg.mnist.labels = Some(resolve(v)),
            "mnist_test_images" => cfg.mnist.test_images = Some(resolve(v)),
            "mnist_test_labels" => cfg.mnist.test_labels = Some(resolve(v)),
            "fashion_images" => cfg.fashion.images = Some(resolve(v)),
            "fashion_labels" => cfg.fashion.labels = Some(resolve(v)),
            "fashion_test_images" => cfg.fashion.test_images = Some(resolve(v)),
            "fashion_test_labels" => cfg.fashion.test_labels = Some(resolve(v)),
            "out_dir" => cfg.out_dir = resolve(v),
            _ => return Err(config_err(line, format!("unknown key '{k}'"))),
        }
    }
    if cfg.out_dir.is_relative() {
        cfg.out_dir = base.join(&cfg.out_dir);
    }

    if let Some(max) = benchmark.max_tasks() {
        if cfg.n_tasks > max {
            return Err(config_err(
                n_tasks_line,
                format!("{benchmark} has at most {max} tasks, got {}", cfg.n_tasks),
            ));
        }
    }
    if let Some(paths) = cfg.data_paths() {
        let prefix = if benchmark == Benchmark::SplitFashion { "fashion" } else { "mnist" };
        let required = [
            ("images", &paths.images),
            ("labels", &paths.labels),
            ("test_images", &paths.test_images),
            ("test_labels", &paths.test_labels),
        ];
        for (suffix, p) in required {
            if p.is_none() {
                return Err(Error::MissingKey {
                    key: format!("{prefix}_{suffix}"),
                });
            }
        }
    }
    Ok(cfg)
}

/// Loaded base datasets shared by every run of an experiment.
struct BaseData {
    train: Dataset,
    test: Dataset,
}

fn load_base(config: &ExperimentConfig) -> Result<Option<BaseData>> {
    let Some(paths) = config.data_paths() else {
        return Ok(None);
    };
    let get = |p: &Option<PathBuf>, what: &str| {
        p.clone()
            .ok_or_else(|| Error::Argument(format!("no {what} path configured for {}", config.benchmark)))
    };
    let train = load_idx(get(&paths.images, "images")?, get(&paths.labels, "labels")?)?;
    let test = load_idx(get(&paths.test_images, "test images")?, get(&paths.test_labels, "test labels")?)?;
    Ok(Some(BaseData { train, test }))
}

/// The task stream for one run. Permuted and synthetic streams depend on
/// `seed`; split streams do not.
fn build_stream(config: &ExperimentConfig, base: Option<&BaseData>, seed: u64) -> Result<TaskStream> {
    let need_base = || base.ok_or_else(|| Error::Internal("benchmark data not loaded".into()));
    let stream = match config.benchmark {
        Benchmark::PermutedMnist => {
            let b = need_base()?;
            make_permuted_tasks(&b.train, &b.test, config.n_tasks, seed)?.0
        }
        Benchmark::SplitMnist | Benchmark::SplitFashion => {
            let b = need_base()?;
            make_split_tasks(&b.train, &b.test, &STANDARD_SPLIT_PAIRS[..config.n_tasks])?
        }
        Benchmark::Synthetic => make_synthetic_tasks(&SyntheticSpec {
            n_tasks: config.n_tasks,
            n_per_class: config.synthetic.n_per_class,
            input_dim: config.synthetic.input_dim,
            class_separation: config.synthetic.separation,
            seed,
        })?,
    };
    let stream = stream.limit(config.max_train, config.max_test);
    stream.validate()?;
    Ok(stream)
}

/// One accuracy entry; tasks are numbered from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRow {
    pub method: String,
    pub seed: u64,
    pub after_task: usize,
    pub eval_task: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub method: String,
    pub after_task: usize,
    pub avg_accuracy_mean: f64,
    /// Sample standard deviation over seeds; 0 with a single seed.
    pub avg_accuracy_std: f64,
    /// Mean over seeds of the forgetting measure of the first `after_task`
    /// tasks; 0 after the first task.
    pub forgetting_mean: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<RawRow>,
    pub aggregates: Vec<AggregateRow>,
}

fn row_order(a: &RawRow, b: &RawRow) -> std::cmp::Ordering {
    (&a.method, a.seed, a.after_task, a.eval_task).cmp(&(&b.method, b.seed, b.after_task, b.eval_task))
}

impl ResultsTable {
    /// Sorts `rows` and derives the aggregates from them.
    pub fn from_rows(mut rows: Vec<RawRow>) -> Result<Self> {
        rows.sort_by(row_order);
        let aggregates = aggregate(&rows)?;
        Ok(ResultsTable { rows, aggregates })
    }

    pub fn from_matrices(runs: &[(Method, u64, AccuracyMatrix)]) -> Result<Self> {
        let mut rows = Vec::new();
        for (method, seed, acc) in runs {
            for (s, row) in acc.rows().iter().enumerate() {
                for (t, &a) in row.iter().enumerate() {
                    rows.push(RawRow {
                        method: method.name().to_string(),
                        seed: *seed,
                        after_task: s + 1,
                        eval_task: t + 1,
                        accuracy: a,
                    });
                }
            }
        }
        Self::from_rows(rows)
    }

    pub fn methods(&self) -> Vec<String> {
        let mut names: Vec<String> = self.aggregates.iter().map(|a| a.method.clone()).collect();
        names.dedup();
        names
    }
}

/// Rebuilds each (method, seed) accuracy matrix from sorted raw rows.
fn matrices(rows: &[RawRow]) -> Result<Vec<(String, u64, AccuracyMatrix)>> {
    let mut out: Vec<(String, u64, Vec<Vec<f64>>)> = Vec::new();
    for r in rows {
        let fresh = match out.last() {
            Some((m, s, _)) => m != &r.method || *s != r.seed,
            None => true,
        };
        if fresh {
            out.push((r.method.clone(), r.seed, Vec::new()));
        }
        let acc = &mut out.last_mut().expect("pushed above").2;
        if r.after_task == 0 || r.eval_task == 0 {
            return Err(Error::Consistency(format!(
                "task indices start at 1 ({} seed {})",
                r.method, r.seed
            )));
        }
        if r.after_task > acc.len() {
            acc.push(Vec::new());
        }
        if acc.len() != r.after_task || acc[r.after_task - 1].len() + 1 != r.eval_task {
            return Err(Error::Consistency(format!(
                "rows for {} seed {} do not form a lower-triangular accuracy table",
                r.method, r.seed
            )));
        }
        acc[r.after_task - 1].push(r.accuracy);
    }
    out.into_iter()
        .map(|(m, s, rows)| Ok((m, s, AccuracyMatrix::from_rows(rows)?)))
        .collect()
}

fn leading_forgetting(acc: &AccuracyMatrix, n: usize) -> f64 {
    if n < 2 {
        return 0.0;
    }
    let sub = AccuracyMatrix::from_rows(acc.rows()[..n].to_vec()).expect("prefix of a valid matrix");
    sub.forgetting_measure().expect("at least two tasks")
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn aggregate(rows: &[RawRow]) -> Result<Vec<AggregateRow>> {
    let runs = matrices(rows)?;
    let mut by_method: BTreeMap<&str, Vec<&AccuracyMatrix>> = BTreeMap::new();
    for (m, _, acc) in &runs {
        by_method.entry(m.as_str()).or_default().push(acc);
    }
    let mut out = Vec::new();
    for (method, accs) in by_method {
        let tasks = accs.iter().map(|a| a.n_tasks()).min().unwrap_or(0);
        for s in 0..tasks {
            let avgs: Vec<f64> = accs.iter().map(|a| a.average_after(s)).collect();
            let forgets: Vec<f64> = accs.iter().map(|a| leading_forgetting(a, s + 1)).collect();
            let (mean, std) = mean_std(&avgs);
            out.push(AggregateRow {
                method: method.to_string(),
                after_task: s + 1,
                avg_accuracy_mean: mean,
                avg_accuracy_std: std,
                forgetting_mean: mean_std(&forgets).0,
            });
        }
    }
    Ok(out)
}

/// Runs every (method, seed) pair on a pool of `workers` threads. Results
/// are merged in sorted order, so output never depends on scheduling. The
/// first failing run in (method, seed) order is reported.
pub fn run_experiment(config: &ExperimentConfig, workers: usize) -> Result<ResultsTable> {
    config.validate()?;
    let base = load_base(config)?;
    let jobs: Vec<(Method, u64)> = config
        .methods
        .iter()
        .flat_map(|&m| config.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Internal(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<AccuracyMatrix>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(method, seed)| {
                let stream = build_stream(config, base.as_ref(), seed)?;
                run_task_sequence(method, &config.train_config(seed), &stream)
            })
            .collect()
    });
    let mut runs = Vec::with_capacity(jobs.len());
    for ((method, seed), r) in jobs.into_iter().zip(results) {
        let acc = r.map_err(|e| Error::Run {
            method: method.name().to_string(),
            seed,
            source: Box::new(e),
        })?;
        runs.push((method, seed, acc));
    }
    ResultsTable::from_matrices(&runs)
}

/// Raw table as CSV text.
pub fn raw_csv(table: &ResultsTable) -> String {
    let mut rows: Vec<&RawRow> = table.rows.iter().collect();
    rows.sort_by(|a, b| row_order(a, b));
    let mut s = String::from(RAW_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6}",
            r.method, r.seed, r.after_task, r.eval_task, r.accuracy
        );
    }
    s
}

/// Aggregate table as CSV text.
pub fn aggregate_csv(table: &ResultsTable) -> String {
    let mut s = String::from(AGGREGATE_HEADER);
    s.push('\n');
    for a in &table.aggregates {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6}",
            a.method, a.after_task, a.avg_accuracy_mean, a.avg_accuracy_std, a.forgetting_mean
        );
    }
    s
}

/// Where the aggregate table goes for a raw table written at `path`:
/// `results.csv` pairs with `results_aggregate.csv`.
pub fn aggregate_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("results");
    path.with_file_name(format!("{stem}_aggregate.csv"))
}

/// Writes the raw table to `path` and the aggregates next to it.
pub fn write_results_csv(table: &ResultsTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, raw_csv(table)).map_err(|e| Error::io(path, e))?;
    let agg = aggregate_path(path);
    fs::write(&agg, aggregate_csv(table)).map_err(|e| Error::io(&agg, e))
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Reads a raw or aggregate CSV written by [`write_results_csv`]. A raw file
/// yields rows and recomputed aggregates; an aggregate file yields
/// aggregates only.
pub fn read_results_csv(path: impl AsRef<Path>) -> Result<ResultsTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, h)| h.trim()).unwrap_or("");
    let raw = match header {
        RAW_HEADER => true,
        AGGREGATE_HEADER => false,
        _ => return Err(format_err(path, format!("unrecognized header '{header}'"))),
    };
    let mut rows = Vec::new();
    let mut aggregates = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || format_err(path, format!("malformed row on line {}", i + 1));
        if fields.len() != 5 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad());
        if raw {
            rows.push(RawRow {
                method: fields[0].to_string(),
                seed: fields[1].parse().map_err(|_| bad())?,
                after_task: int(fields[2])?,
                eval_task: int(fields[3])?,
                accuracy: num(fields[4])?,
            });
        } else {
            aggregates.push(AggregateRow {
                method: fields[0].to_string(),
                after_task: int(fields[1])?,
                avg_accuracy_mean: num(fields[2])?,
                avg_accuracy_std: num(fields[3])?,
                forgetting_mean: num(fields[4])?,
            });
        }
    }
    if raw {
        ResultsTable::from_rows(rows)
    } else {
        Ok(ResultsTable {
            rows: Vec::new(),
            aggregates,
        })
    }
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Mean average accuracy against tasks trained, one polyline per method.
pub fn accuracy_svg(table: &ResultsTable) -> Result<String> {
    if table.aggregates.is_empty() {
        return Err(Error::Argument("no aggregate rows to plot".into()));
    }
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (70.0, 170.0, 30.0, 60.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let max_task = table.aggregates.iter().map(|a| a.after_task).max().unwrap_or(1).max(1);
    let x = |task: usize| {
        if max_task == 1 {
            left + pw / 2.0
        } else {
            left + pw * (task - 1) as f64 / (max_task - 1) as f64
        }
    };
    let y = |v: f64| top + ph * (1.0 - v.clamp(0.0, 1.0));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<g stroke="black" stroke-width="1"><line x1="{left}" y1="{}" x2="{}" y2="{}"/><line x1="{left}" y1="{top}" x2="{left}" y2="{}"/></g>"#,
        top + ph,
        left + pw,
        top + ph,
        top + ph
    );
    s.push_str(r#"<g font-family="sans-serif" font-size="12">"#);
    s.push('\n');
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{yy:.2}" x2="{left}" y2="{yy:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{v:.1}</text>"##,
            left - 5.0,
            left - 8.0,
            y(v) + 4.0,
            yy = y(v)
        );
    }
    for t in 1..=max_task {
        let _ = writeln!(
            s,
            r#"<line x1="{xx:.2}" y1="{}" x2="{xx:.2}" y2="{}" stroke="black"/><text x="{xx:.2}" y="{}" text-anchor="middle">{t}</text>"#,
            top + ph,
            top + ph + 5.0,
            top + ph + 20.0,
            xx = x(t)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">Tasks trained</text>"#,
        left + pw / 2.0,
        h - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(18,{}) rotate(-90)" text-anchor="middle">Average accuracy</text>"#,
        top + ph / 2.0
    );
    s.push_str("</g>\n");

    for (i, method) in table.methods().iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = table
            .aggregates
            .iter()
            .filter(|a| &a.method == method)
            .map(|a| format!("{:.2},{:.2}", x(a.after_task), y(a.avg_accuracy_mean)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        let ly = top + 10.0 + 20.0 * i as f64;
        let lx = left + pw + 20.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}" font-family="sans-serif" font-size="12">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape_xml(method)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn render_accuracy_svg(table: &ResultsTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let svg = accuracy_svg(table)?;
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}
