//! Optional TOML file of defaults. Values given as flags or `HOLOMASK_*`
//! variables take precedence over anything read here.
//!
//! ```toml
//! size = "256x256"
//! iters = 25
//! precision = "double"
//!
//! [solve]
//! pattern = "spots:3x3"
//!
//! [bench]
//! sizes = ["256", "512"]
//!
//! [serve]
//! bind = "127.0.0.1:7878"
//! budget_ms = 10.0
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use holomask_service::ServiceConfig;
use serde::Deserialize;

use crate::Failure;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub size: Option<String>,
    pub iters: Option<usize>,
    pub precision: Option<String>,
    pub strategy: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub server: Option<String>,
    pub solve: SolveSection,
    pub patterns: PatternsSection,
    pub bench: BenchSection,
    pub serve: ServiceConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveSection {
    pub pattern: Option<String>,
    pub target: Option<PathBuf>,
    pub record_every: Option<usize>,
    pub deadline_ms: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatternsSection {
    pub kind: Option<String>,
    pub spokes: Option<usize>,
    pub grid: Option<String>,
    pub count: Option<usize>,
    pub scale: Option<String>,
    pub depth: Option<u8>,
    pub format: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub sizes: Option<Vec<String>>,
    pub repetitions: Option<usize>,
    pub warmup: Option<usize>,
    pub strategies: Option<Vec<String>>,
    pub precisions: Option<Vec<String>>,
    pub format: Option<String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))
    }
}

/// Parses an optional config string, naming the key on failure.
pub fn parsed<T>(key: &str, value: Option<&str>) -> Result<Option<T>, Failure>
where
    T: FromStr,
    T::Err: std::fmt::Display,
{
    value
        .map(|v| v.parse().map_err(|e| Failure::Usage(format!("config key `{key}`: {e}"))))
        .transpose()
}

pub fn parsed_list<T>(key: &str, values: Option<&[String]>) -> Result<Option<Vec<T>>, Failure>
where
    T: FromStr,
    T::Err: std::fmt::Display,
{
    values
        .map(|vs| vs.iter().map(|v| parsed(key, Some(v)).map(Option::unwrap)).collect())
        .transpose()
}
