//! Flat `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};

/// Version of the emitted file layout.
pub const FORMAT_VERSION: u32 = 1;

pub const EXPERIMENTS: [&str; 6] = ["fig1", "depth", "scaling", "frozen", "mnist", "ntk"];

/// Experiment name, seeds, sample-size grid and a sorted map of model
/// parameters. Every parameter the experiment reads is present, so the text
/// form is a complete snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub seeds: Vec<u64>,
    pub n_grid: Vec<usize>,
    pub format_version: u32,
    params: BTreeMap<String, String>,
}

fn seeds_from(first: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| first + i).collect()
}

type Defaults = (Vec<u64>, Vec<usize>, Vec<(&'static str, String)>);

fn defaults(experiment: &str, preset: &str) -> Result<Defaults> {
    let quick = match preset {
        "default" => false,
        "quick" => true,
        other => return Err(LabError::Config(format!("unknown preset {other:?} (expected default or quick)"))),
    };
    let s = |v: &str| v.to_string();
    let out = match experiment {
        "fig1" => (
            seeds_from(0, if quick { 3 } else { 25 }),
            if quick { vec![10, 100, 300] } else { vec![10, 50, 100, 200, 300, 400, 500, 600, 700, 800, 900] },
            vec![
                ("design", s("fig1")),
                ("design_seed", s("0")),
                ("align_k", s("50")),
                ("source_norm", s("1")),
                ("diff_norm", s("1")),
                ("bound_k", s("auto")),
                ("gap_ratio", s("0.5")),
                ("c", s("1")),
                ("delta", s("1")),
            ],
        ),
        "depth" => (
            seeds_from(0, if quick { 3 } else { 25 }),
            vec![10],
            vec![
                ("d", s("100")),
                ("alphas", s("0.5,1,2,5")),
                ("depths", s("1,2,3,5,7,10")),
                ("noise_ratio", s("0.5")),
                ("root_tol", s("1e-14")),
            ],
        ),
        "scaling" => (
            seeds_from(0, if quick { 3 } else { 10 }),
            vec![10],
            vec![
                ("d", s("100")),
                ("depth", s("7")),
                ("alignment", s("0.1")),
                ("alphas", s("0.25,0.5,1,2,4,8")),
                ("train_gd", s(if quick { "false" } else { "true" })),
                ("gd_eta_scale", s("0.5")),
                ("gd_tol", s("1e-10")),
                ("gd_max_iters", s("2000000")),
                ("root_tol", s("1e-14")),
            ],
        ),
        "frozen" => (
            seeds_from(0, if quick { 2 } else { 10 }),
            vec![10, 50],
            vec![
                ("d", s("100")),
                ("top_count", s("10")),
                ("top_eigenvalue", s("5")),
                ("bottom_eigenvalue", s("0.2")),
                ("design_seed", s("3")),
                ("align_k", s("10")),
                ("source_samples", s("200")),
                ("init_scale", s("1e-5")),
                ("eta_scale", s("0.5")),
                ("tol", s("1e-12")),
                ("max_iters", s("2000000")),
                ("frozen_steps", s("20000")),
            ],
        ),
        "mnist" => (
            seeds_from(0, if quick { 2 } else { 10 }),
            vec![10, 15, 20, 25, 30],
            vec![
                ("data_dir", s("")),
                ("pairs", s("0-1,2-3,4-5,6-7,8-9")),
                ("resamples", s(if quick { "5" } else { "25" })),
                ("bound_k", s("2")),
                ("c", s("1")),
                ("delta", s("1")),
                ("center", s("false")),
            ],
        ),
        "ntk" => (
            seeds_from(0, if quick { 3 } else { 10 }),
            vec![10],
            vec![
                ("d", s("5")),
                ("widths", s(if quick { "100,1000" } else { "100,1000,10000" })),
                ("source_samples", s("20")),
                ("alignment", s("0.1")),
                ("kappa", s("1")),
                ("eta_scale", s("1")),
                ("pretrain_tol", s("1e-4")),
                ("pretrain_max_iters", s("200000")),
                ("horizon_factor", s("10")),
                ("records", s("50")),
                ("delta", s("0.05")),
            ],
        ),
        other => return Err(LabError::Config(format!("unknown experiment {other:?}"))),
    };
    Ok(out)
}

fn parse_list<T: FromStr>(key: &str, text: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| LabError::Config(format!("bad list entry {t:?} for {key}"))))
        .collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Defaults for `experiment` under the named preset (`default` or `quick`).
    pub fn preset(experiment: &str, preset: &str) -> Result<Self> {
        let (seeds, n_grid, params) = defaults(experiment, preset)?;
        Ok(Self {
            experiment: experiment.to_string(),
            seeds,
            n_grid,
            format_version: FORMAT_VERSION,
            params: params.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        })
    }

    /// Applies one `key = value` assignment. `seeds`, `n_grid` and the
    /// experiment's own parameter keys are accepted; anything else is an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "experiment" => {
                if value != self.experiment {
                    return Err(LabError::Config(format!(
                        "config is for {value:?} but the command runs {:?}",
                        self.experiment
                    )));
                }
            }
            "format_version" => {
                let v: u32 = value.parse().map_err(|_| LabError::Config(format!("bad format_version {value:?}")))?;
                if v != FORMAT_VERSION {
                    return Err(LabError::Config(format!("format_version {v} is not supported (expected {FORMAT_VERSION})")));
                }
            }
            "seeds" => self.seeds = parse_list(key, value)?,
            "n_grid" => self.n_grid = parse_list(key, value)?,
            _ => match self.params.get_mut(key) {
                Some(slot) => *slot = value.to_string(),
                None => return Err(LabError::Config(format!("unknown key {key:?} for {}", self.experiment))),
            },
        }
        Ok(())
    }

    pub fn set_seeds(&mut self, first: u64, count: usize) {
        self.seeds = seeds_from(first, count);
    }

    /// Applies a flat text config: one `key = value` per line, `#` comments.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LabError::Config(format!("line {}: expected key = value", lineno + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::Io(path.display().to_string(), e))?;
        self.apply_text(&text)
    }

    /// Canonical text form; parsing it back reproduces the config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "experiment = {}", self.experiment);
        let _ = writeln!(out, "format_version = {}", self.format_version);
        let _ = writeln!(out, "seeds = {}", join(&self.seeds));
        let _ = writeln!(out, "n_grid = {}", join(&self.n_grid));
        for (k, v) in &self.params {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let name = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .find(|(k, _)| k.trim() == "experiment")
            .map(|(_, v)| v.trim().to_string())
            .ok_or_else(|| LabError::Config("missing experiment key".into()))?;
        let mut cfg = Self::preset(&name, "default")?;
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        format!("{:x}", Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        self.params
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| LabError::Config(format!("missing key {key:?}")))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key)?;
        v.parse().map_err(|_| LabError::Config(format!("bad value {v:?} for {key}")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        parse_list(key, self.raw(key)?)
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        match self.raw(key)? {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(LabError::Config(format!("bad boolean {v:?} for {key}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(LabError::Config("seed list is empty".into()));
        }
        if self.n_grid.is_empty() || self.n_grid.contains(&0) {
            return Err(LabError::Config("n_grid must be non-empty and positive".into()));
        }
        Ok(())
    }
}
