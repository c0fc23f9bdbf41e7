//! Run configuration: TOML file plus dotted-key overrides, strict about
//! unknown keys, hashed for provenance.

use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;
use crate::stability::DisturbancePolicy;
use crate::synthetic::{Ar2TrendConfig, SinusoidMixtureConfig};
use serde::{Deserialize, Serialize};
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Csv,
    /// AR(2) + trend + seasonal testbed.
    Ar2,
    /// Sinusoid-mixture family.
    Sinusoid,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// CSV source only.
    pub path: Option<PathBuf>,
    pub value_columns: Vec<String>,
    pub timestamp_column: Option<String>,
    /// Synthetic sources only.
    pub channels: usize,
    pub data_seed: u64,
    pub ar2: Ar2TrendConfig,
    pub sinusoid: SinusoidMixtureConfig,
    /// (train, val, test) fractions.
    pub split: (f64, f64, f64),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Ar2,
            path: None,
            value_columns: Vec::new(),
            timestamp_column: None,
            channels: 1,
            data_seed: 0,
            ar2: Ar2TrendConfig::default(),
            sinusoid: SinusoidMixtureConfig::default(),
            split: (0.7, 0.15, 0.15),
        }
    }
}

impl DataConfig {
    /// Materialize the frame and attach split indices.
    pub fn load_frame(&self, min_window: usize) -> Result<crate::series::SeriesFrame> {
        let frame = match self.source {
            DataSource::Csv => {
                let path = self
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::Config("csv source requires data.path".into()))?;
                let cols: Vec<&str> = self.value_columns.iter().map(|s| s.as_str()).collect();
                if cols.is_empty() {
                    return Err(Error::Config("csv source requires data.value_columns".into()));
                }
                crate::series::load_series_csv(path, &cols, self.timestamp_column.as_deref())?
            }
            DataSource::Ar2 => crate::synthetic::ar2_trend_frame(
                &self.ar2,
                self.channels,
                &mut crate::rng::seed_rng(self.data_seed),
            )?,
            DataSource::Sinusoid => crate::synthetic::pretraining_corpus(
                &self.sinusoid,
                self.channels,
                &mut crate::rng::seed_rng(self.data_seed),
            )?,
        };
        crate::series::chronological_split(&frame, self.split, min_window)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilityRunConfig {
    /// Eigenvalue scales of the diagonalizable test Jacobian.
    pub scales: Vec<f64>,
    /// Target closed-loop contraction for the synthesized gain.
    pub q: f64,
    pub gamma: f64,
    pub steps: usize,
    pub policy: DisturbancePolicy,
    /// Matrix seed for the testbed.
    pub seed: u64,
}

impl Default for StabilityRunConfig {
    fn default() -> Self {
        StabilityRunConfig {
            scales: vec![1.25, 0.6, 0.3, 0.1],
            q: 0.5,
            gamma: 0.1,
            steps: 200,
            policy: DisturbancePolicy::WorstCase,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Seeds for multi-seed runs; falls back to `[seed]` when empty.
    pub seeds: Vec<u64>,
    pub horizons: Vec<usize>,
    pub dataset_name: String,
    pub data: DataConfig,
    pub experiment: ExperimentConfig,
    pub stability: StabilityRunConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            seeds: Vec::new(),
            horizons: vec![96, 192],
            dataset_name: "ar2".into(),
            data: DataConfig::default(),
            experiment: ExperimentConfig::desk_scale(),
            stability: StabilityRunConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn effective_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    /// Stable hash of the resolved configuration (canonical JSON bytes).
    pub fn config_hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = DefaultHasher::new();
        json.hash(&mut h);
        h.finish()
    }
}

/// Parse one `--set key.path=value` override value: any TOML scalar/array,
/// falling back to a bare string.
fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        table = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                Error::Config(format!("override {key:?} descends into a non-table value"))
            })?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Load a config file (or defaults when `None`) and apply `key=value`
/// overrides. Unknown keys anywhere are an error.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut table: toml::Table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            text.parse()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => {
            // Round-trip the defaults so overrides land on a full table.
            let text = toml::to_string(&RunConfig::default())
                .map_err(|e| Error::Config(e.to_string()))?;
            text.parse().expect("defaults serialize to valid TOML")
        }
    };
    for spec in overrides {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {spec:?} is not KEY=VALUE")))?;
        set_dotted(&mut table, key.trim(), parse_override_value(raw.trim()))?;
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn defaults_load_without_a_file() {
        let cfg = load_config(None, &[]).unwrap();
        assert_eq!(cfg.horizons, vec![96, 192]);
        assert_eq!(cfg.effective_seeds(), vec![0]);
    }

    #[test]
    fn file_and_overrides_compose() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "seed = 3\nhorizons = [16]\n[experiment]\nlookback = 64").unwrap();
        let cfg = load_config(
            Some(f.path()),
            &[
                "experiment.stage1.lr=0.005".into(),
                "dataset_name=mix".into(),
                "seeds=[1,2,3]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.horizons, vec![16]);
        assert_eq!(cfg.experiment.lookback, 64);
        assert_eq!(cfg.experiment.stage1.lr, 0.005);
        assert_eq!(cfg.dataset_name, "mix");
        assert_eq!(cfg.effective_seeds(), vec![1, 2, 3]);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "sede = 3").unwrap();
        assert!(matches!(
            load_config(Some(f.path()), &[]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            load_config(None, &["experiment.no_such_knob=1".into()]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bad_override_shapes_rejected() {
        assert!(load_config(None, &["novaluehere".into()]).is_err());
        assert!(load_config(None, &["a..b=1".into()]).is_err());
        assert!(load_config(None, &["seed.x=1".into()]).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = load_config(None, &[]).unwrap();
        let b = load_config(None, &["seed=1".into()]).unwrap();
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash(), load_config(None, &[]).unwrap().config_hash());
    }

    #[test]
    fn synthetic_frames_materialize() {
        let cfg = load_config(None, &["data.ar2.length=400".into()]).unwrap();
        let frame = cfg.data.load_frame(16).unwrap();
        assert_eq!(frame.length(), 400);
        assert!(frame.split.is_some());
    }
}
