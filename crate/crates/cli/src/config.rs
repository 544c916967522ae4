//! Run configuration files.
//!
//! A config names a benchmark (or carries a custom `[problem]` block) and
//! overrides any subset of the search settings. Missing settings come from
//! the benchmark's preset, not from generic defaults, so the resolution
//! merges the user's table over the preset's table before deserializing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fex_core::controller::PolicyConfig;
use fex_core::problems::{make_benchmark_with_seed, PdeProblem, Precision, BENCHMARK_IDS, DEFAULT_GEOMETRY_SEED};
use fex_core::search::SearchConfig;
use fex_core::tuner::Schedule;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub search: u64,
    pub metrics: u64,
    /// Random hole radii of the 3-d perforated benchmarks.
    pub geometry: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            search: 0,
            metrics: 1,
            geometry: DEFAULT_GEOMETRY_SEED,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub iterations: usize,
    pub batch_size: usize,
    pub pool_capacity: usize,
    pub n_interior: usize,
    pub n_boundary: usize,
    pub fine_interior: usize,
    pub fine_boundary: usize,
    pub eval_points: usize,
    pub grouping: bool,
    pub trace_every: usize,
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection::from(&SearchConfig::default())
    }
}

impl From<&SearchConfig> for SearchSection {
    fn from(c: &SearchConfig) -> Self {
        SearchSection {
            iterations: c.iterations,
            batch_size: c.batch_size,
            pool_capacity: c.pool_capacity,
            n_interior: c.n_interior,
            n_boundary: c.n_boundary,
            fine_interior: c.fine_interior,
            fine_boundary: c.fine_boundary,
            eval_points: c.eval_points,
            grouping: c.grouping,
            trace_every: c.trace_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Operators {
    pub depth: u8,
    pub base_frequencies: Vec<u32>,
}

impl Default for Operators {
    fn default() -> Self {
        let c = SearchConfig::default();
        Operators {
            depth: c.depth,
            base_frequencies: c.base_frequencies,
        }
    }
}

/// A fully resolved run configuration. Written back next to the artifacts;
/// parsing that echo yields the same configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Benchmark id, or `custom` together with a `[problem]` block.
    pub benchmark: String,
    pub precision: Precision,
    pub output_dir: PathBuf,
    pub seeds: Seeds,
    pub search: SearchSection,
    pub operators: Operators,
    pub schedule: Schedule,
    pub controller: PolicyConfig,
    pub problem: Option<PdeProblem>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            benchmark: String::new(),
            precision: Precision::Double,
            output_dir: PathBuf::from("fex-out"),
            seeds: Seeds::default(),
            search: SearchSection::default(),
            operators: Operators::default(),
            schedule: Schedule::default(),
            controller: PolicyConfig::default(),
            problem: None,
        }
    }
}

pub const CUSTOM: &str = "custom";

impl RunConfig {
    /// Preset for a benchmark id, or generic defaults for `custom`.
    pub fn preset(benchmark: &str) -> Result<Self, CliError> {
        let search = if benchmark == CUSTOM {
            SearchConfig::default()
        } else {
            SearchConfig::preset(benchmark).map_err(|_| unknown_benchmark(benchmark))?
        };
        Ok(RunConfig {
            benchmark: benchmark.to_string(),
            output_dir: PathBuf::from(format!("fex-out/{benchmark}")),
            search: SearchSection::from(&search),
            operators: Operators {
                depth: search.depth,
                base_frequencies: search.base_frequencies.clone(),
            },
            schedule: search.schedule.clone(),
            controller: search.controller,
            ..RunConfig::default()
        })
    }

    /// Parses `text`, then fills every unset field from the preset of the
    /// benchmark it names.
    pub fn resolve(text: &str) -> Result<Self, CliError> {
        // full typed parse first: reports unknown keys and bad values with
        // their line numbers
        let user: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        let benchmark = match (user.benchmark.as_str(), &user.problem) {
            ("", None) => {
                return Err(CliError::Config(format!(
                    "config must set `benchmark` (one of: {}) or provide a [problem] block",
                    BENCHMARK_IDS.join(", ")
                )))
            }
            ("", Some(_)) | (CUSTOM, Some(_)) => CUSTOM.to_string(),
            (CUSTOM, None) => return Err(CliError::Config("benchmark `custom` needs a [problem] block".into())),
            (id, Some(_)) => {
                return Err(CliError::Config(format!(
                    "benchmark `{id}` and a [problem] block are mutually exclusive"
                )))
            }
            (id, None) => id.to_string(),
        };
        let preset = RunConfig::preset(&benchmark)?;
        let mut merged = toml::Table::try_from(&preset).map_err(|e| CliError::Config(e.to_string()))?;
        merge(&mut merged, table);
        merged.insert("benchmark".into(), toml::Value::String(benchmark));
        let resolved: RunConfig = merged.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        resolved.search_config()?;
        Ok(resolved)
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::resolve(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// TOML text of the resolved configuration.
    pub fn echo(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// The problem to solve, with precision applied.
    pub fn problem(&self) -> Result<PdeProblem, CliError> {
        let mut p = match &self.problem {
            Some(p) => {
                p.domain.validate().map_err(|e| CliError::Config(e.to_string()))?;
                p.clone()
            }
            None => make_benchmark_with_seed(&self.benchmark, self.seeds.geometry)
                .map_err(|e| CliError::Runtime(e.into()))?,
        };
        p.precision = self.precision;
        Ok(p)
    }

    pub fn search_config(&self) -> Result<SearchConfig, CliError> {
        let s = &self.search;
        let cfg = SearchConfig {
            iterations: s.iterations,
            batch_size: s.batch_size,
            pool_capacity: s.pool_capacity,
            n_interior: s.n_interior,
            n_boundary: s.n_boundary,
            fine_interior: s.fine_interior,
            fine_boundary: s.fine_boundary,
            eval_points: s.eval_points,
            grouping: s.grouping,
            seed: self.seeds.search,
            metrics_seed: self.seeds.metrics,
            depth: self.operators.depth,
            base_frequencies: self.operators.base_frequencies.clone(),
            trace_every: s.trace_every,
            schedule: self.schedule.clone(),
            controller: self.controller,
        };
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }
}

pub fn unknown_benchmark(id: &str) -> CliError {
    CliError::Config(format!("unknown benchmark `{id}`; valid ids: {}", BENCHMARK_IDS.join(", ")))
}

/// Recursively overwrites `base` with `over`; tables merge key by key,
/// everything else is replaced.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
