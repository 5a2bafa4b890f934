//! Layered run configuration: preset defaults, then the TOML file, then flags.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sepcount_core::{DatasetConfig, ModelConfig, Preset, TrainConfig, DEFAULT_GDE_SCALE, DEFAULT_RANK_THRESHOLD};

use crate::Failure;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum CountModeName {
    Oracle,
    Gde,
    Rank,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountConfig {
    pub mode: CountModeName,
    /// Scale `c` of the GDE threshold factor.
    pub gde_scale: f64,
    /// Rank-baseline threshold relative to the largest eigenvalue.
    pub rank_threshold: f64,
    /// Source count used in oracle mode when no reference is available.
    pub num_speakers: Option<usize>,
}

impl Default for CountConfig {
    fn default() -> Self {
        Self {
            mode: CountModeName::Gde,
            gde_scale: DEFAULT_GDE_SCALE,
            rank_threshold: DEFAULT_RANK_THRESHOLD,
            num_speakers: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; data generation, initialization and shuffling derive
    /// their streams from it.
    pub seed: u64,
    pub preset: Preset,
    pub data: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub count: CountConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (data, train) = match preset {
            Preset::Paper => (DatasetConfig::default(), TrainConfig::default()),
            Preset::Toy => (DatasetConfig::toy(), TrainConfig::toy()),
        };
        Self {
            seed: 0,
            preset,
            data,
            model: ModelConfig::preset(preset),
            train,
            count: CountConfig::default(),
        }
    }

    /// Builds the configuration from an optional file and a preset override.
    pub fn load(path: Option<&Path>, preset: Option<Preset>) -> Result<Self, Failure> {
        let table: toml::Table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))?;
                text.parse()
                    .map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        // Section seeds are echoes of the root seed; a differing value is an error.
        let root_seed = table.get("seed").cloned().unwrap_or(toml::Value::Integer(0));
        for section in ["data", "train"] {
            if let Some(s) = table.get(section).and_then(|v| v.as_table()).and_then(|t| t.get("seed")) {
                if *s != root_seed {
                    return Err(Failure::Config(format!(
                        "`{section}.seed` differs from the top-level `seed`; set only the top-level key"
                    )));
                }
            }
        }
        let preset = match (preset, table.get("preset")) {
            (Some(p), _) => p,
            (None, Some(v)) => v
                .as_str()
                .ok_or_else(|| Failure::Config("`preset` must be a string".into()))?
                .parse()
                .map_err(|e: sepcount_core::Error| Failure::Config(e.to_string()))?,
            (None, None) => Preset::Paper,
        };
        let mut base = toml::Table::try_from(Self::preset(preset)).map_err(|e| Failure::Config(e.to_string()))?;
        merge(&mut base, table);
        base.insert("preset".into(), toml::Value::try_from(preset).map_err(|e| Failure::Config(e.to_string()))?);
        let mut cfg: RunConfig = base
            .try_into()
            .map_err(|e: toml::de::Error| Failure::Config(e.to_string()))?;
        cfg.set_seed(cfg.seed);
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.seed = seed;
        self.train.seed = seed;
    }
}

/// Recursively overlays `over` onto `base`. Keys absent from `base` are
/// kept so deserialization can reject them.
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
