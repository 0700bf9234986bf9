//! Result rows, CSV emission and parsing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::{ExperimentConfig, FORMAT_VERSION};
use crate::error::{LabError, Result};
use crate::stats;

pub const CSV_HEADER: &str = "experiment,seed,n,depth_or_width,variant,metric,value";
pub const PLOT_HEADER: &str = "experiment,n,depth_or_width,variant,metric,mean,std,median,count";

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub experiment: String,
    pub seed: u64,
    pub n: usize,
    pub depth_or_width: usize,
    pub variant: String,
    pub metric: String,
    pub value: f64,
}

impl Row {
    fn sort_key(&self) -> (&str, &str, usize, usize, &str, u64) {
        (&self.experiment, &self.variant, self.n, self.depth_or_width, &self.metric, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub experiment: String,
    pub config_hash: String,
    pub format_version: u32,
    pub rows: Vec<Row>,
}

/// Aggregate of one metric across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub count: usize,
}

type GroupKey = (String, usize, usize, String, String);

impl ResultTable {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            experiment: cfg.experiment.clone(),
            config_hash: cfg.hash(),
            format_version: FORMAT_VERSION,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, seed: u64, n: usize, depth_or_width: usize, variant: &str, metric: &str, value: f64) {
        self.rows.push(Row {
            experiment: self.experiment.clone(),
            seed,
            n,
            depth_or_width,
            variant: variant.to_string(),
            metric: metric.to_string(),
            value,
        });
    }

    /// Puts rows in the canonical emission order.
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    }

    /// Values of one `(variant, n, depth_or_width, metric)` cell across seeds.
    pub fn values(&self, variant: &str, n: usize, depth_or_width: usize, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.variant == variant && r.n == n && r.depth_or_width == depth_or_width && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    /// Mean, std, median and count per `(variant, n, depth_or_width, metric)`.
    pub fn summaries(&self) -> BTreeMap<GroupKey, Summary> {
        let mut groups: BTreeMap<GroupKey, Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            groups
                .entry((r.variant.clone(), r.n, r.depth_or_width, r.metric.clone(), r.experiment.clone()))
                .or_default()
                .push(r.value);
        }
        groups
            .into_iter()
            .map(|(k, v)| {
                let s = Summary {
                    mean: stats::mean(&v),
                    std: stats::std_dev(&v),
                    median: stats::median(&v),
                    count: v.len(),
                };
                (k, s)
            })
            .collect()
    }
}

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn format_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

fn check_field(s: &str) -> Result<&str> {
    if s.contains([',', '\n', '\r', '"']) {
        return Err(LabError::Parse(format!("field {s:?} contains a separator")));
    }
    Ok(s)
}

/// The main results CSV: a metadata comment line, the header, then rows.
pub fn results_csv(table: &ResultTable) -> Result<String> {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# format_version={} config_hash={}",
        table.format_version, table.config_hash
    );
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in &table.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            check_field(&r.experiment)?,
            r.seed,
            r.n,
            r.depth_or_width,
            check_field(&r.variant)?,
            check_field(&r.metric)?,
            format_float(r.value)
        );
    }
    Ok(out)
}

/// Long-format aggregates across seeds, one line per cell.
pub fn plot_csv(table: &ResultTable) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# format_version={} config_hash={}", table.format_version, table.config_hash);
    out.push_str(PLOT_HEADER);
    out.push('\n');
    for ((variant, n, dw, metric, experiment), s) in table.summaries() {
        let _ = writeln!(
            out,
            "{experiment},{n},{dw},{variant},{metric},{},{},{},{}",
            format_float(s.mean),
            format_float(s.std),
            format_float(s.median),
            s.count
        );
    }
    out
}

/// Parses text produced by [`results_csv`].
pub fn parse_results_csv(text: &str) -> Result<ResultTable> {
    let mut lines = text.lines();
    let meta = lines.next().ok_or_else(|| LabError::Parse("empty file".into()))?;
    let mut version = None;
    let mut hash = None;
    for part in meta.trim_start_matches('#').split_whitespace() {
        match part.split_once('=') {
            Some(("format_version", v)) => version = v.parse().ok(),
            Some(("config_hash", h)) => hash = Some(h.to_string()),
            _ => {}
        }
    }
    let (format_version, config_hash) = match (version, hash) {
        (Some(v), Some(h)) => (v, h),
        _ => return Err(LabError::Parse(format!("bad metadata line {meta:?}"))),
    };
    if lines.next() != Some(CSV_HEADER) {
        return Err(LabError::Parse("missing or wrong header".into()));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || LabError::Parse(format!("row {}: {line:?}", i + 1));
        if f.len() != 7 {
            return Err(bad());
        }
        rows.push(Row {
            experiment: f[0].to_string(),
            seed: f[1].parse().map_err(|_| bad())?,
            n: f[2].parse().map_err(|_| bad())?,
            depth_or_width: f[3].parse().map_err(|_| bad())?,
            variant: f[4].to_string(),
            metric: f[5].to_string(),
            value: f[6].parse().map_err(|_| bad())?,
        });
    }
    let experiment = rows.first().map(|r| r.experiment.clone()).unwrap_or_default();
    Ok(ResultTable {
        experiment,
        config_hash,
        format_version,
        rows,
    })
}

#[derive(Debug, Clone)]
pub struct EmittedFiles {
    pub results: PathBuf,
    pub config: PathBuf,
    pub plot: PathBuf,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| LabError::Io(path.display().to_string(), e))
}

/// Writes `<experiment>.csv`, `<experiment>.config` and
/// `<experiment>_plot.csv` into `dir`, creating it if needed.
pub fn emit(table: &ResultTable, cfg: &ExperimentConfig, dir: &Path) -> Result<EmittedFiles> {
    std::fs::create_dir_all(dir).map_err(|e| LabError::Io(dir.display().to_string(), e))?;
    let mut sorted = table.clone();
    sorted.sort();
    let files = EmittedFiles {
        results: dir.join(format!("{}.csv", table.experiment)),
        config: dir.join(format!("{}.config", table.experiment)),
        plot: dir.join(format!("{}_plot.csv", table.experiment)),
    };
    write(&files.results, &results_csv(&sorted)?)?;
    write(&files.config, &cfg.to_text())?;
    write(&files.plot, &plot_csv(&sorted))?;
    Ok(files)
}
