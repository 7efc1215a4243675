//! Experiment configuration: a TOML document with `seed` and the sections
//! `run`, `dataset`, `search`, `derive` and `eval`. Every key has a default,
//! unknown keys are rejected, and `section.key=value` overrides are applied
//! on top of the file before validation.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nas_core::allocation::{AllocationMode, DEFAULT_FIXED_CHANNELS};
use nas_core::data::SyntheticConfig;
use nas_core::search::SearchConfig;
use nas_core::seed::derive_seed;
use nas_core::space::SpaceId;
use nas_core::supernet::SuperNetConfig;
use nas_core::targetnet::{AblationMode, TargetConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Every random stream of the run is derived from this value.
    pub seed: u64,
    pub run: RunSection,
    pub dataset: DatasetSection,
    pub search: SearchSection,
    pub derive: DeriveSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Directory name under the run root.
    pub name: String,
    /// Record elapsed seconds in the CSV traces (breaks byte reproducibility).
    pub wall_time: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub source: DataSource,
    pub num_samples: usize,
    pub classes: usize,
    pub size: usize,
    pub channels: usize,
    pub noise: f64,
    /// Raw image file, used when `source = "raw"`.
    pub images: String,
    pub labels: String,
    /// Share of the data used for search and target training; the rest is
    /// the validation part.
    pub train_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub space: String,
    pub n: usize,
    /// Intermediate nodes per cell.
    pub nodes: usize,
    pub init_channels: usize,
    pub sepconv_repeats: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub w_learning_rate: f64,
    pub w_momentum: f64,
    pub w_weight_decay: f64,
    pub alpha_learning_rate: f64,
    pub alpha_weight_decay: f64,
    pub alpha_beta1: f64,
    pub alpha_beta2: f64,
    pub split_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeriveMode {
    Aca,
    DartsS,
    /// Full-width operations without refill.
    DartsBaseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeriveSection {
    pub mode: DeriveMode,
    pub fixed_channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoSkip,
    NoChannel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n: usize,
    pub init_channels: usize,
    pub sepconv_repeats: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub ablation_mode: Ablation,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            name: "default".into(),
            wall_time: false,
        }
    }
}

impl Default for DatasetSection {
    fn default() -> Self {
        let s = SyntheticConfig::default();
        DatasetSection {
            source: DataSource::Synthetic,
            num_samples: s.num_samples,
            classes: s.classes,
            size: s.size,
            channels: s.channels,
            noise: s.noise as f64,
            images: String::new(),
            labels: String::new(),
            train_fraction: 0.5,
        }
    }
}

impl Default for SearchSection {
    fn default() -> Self {
        let s = SearchConfig::default();
        let net = SuperNetConfig::default();
        SearchSection {
            space: net.space.name().into(),
            n: net.n,
            nodes: net.nodes,
            init_channels: net.init_channels,
            sepconv_repeats: net.sepconv_repeats,
            epochs: 10,
            batch_size: s.batch_size,
            w_learning_rate: 0.05,
            w_momentum: 0.9,
            w_weight_decay: 3e-4,
            alpha_learning_rate: 3e-4,
            alpha_weight_decay: 1e-3,
            alpha_beta1: 0.5,
            alpha_beta2: 0.999,
            split_fraction: s.split_fraction,
        }
    }
}

impl Default for DeriveSection {
    fn default() -> Self {
        DeriveSection {
            mode: DeriveMode::Aca,
            fixed_channels: DEFAULT_FIXED_CHANNELS,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        EvalSection {
            n: 1,
            init_channels: 16,
            sepconv_repeats: 1,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 3e-4,
            ablation_mode: Ablation::Full,
        }
    }
}

/// Value of an override, typed after the default at the same key so that
/// `--run.name 007` stays a string.
fn override_value(key: &str, raw: &str, hint: &Value) -> Result<Value> {
    if hint.is_str() {
        return Ok(Value::String(raw.to_string()));
    }
    let doc: Table = format!("v = {raw}")
        .parse()
        .with_context(|| format!("override {key}: `{raw}` is not a valid value"))?;
    Ok(doc["v"].clone())
}

/// Applies `key=value` overrides (`seed=3`, `search.space=S`) to `table`.
pub fn apply_overrides(table: &mut Table, overrides: &[(String, String)]) -> Result<()> {
    let defaults = Table::try_from(ExperimentConfig::default())?;
    for (key, raw) in overrides {
        let parts: Vec<&str> = key.split('.').collect();
        let (section, field) = match parts.as_slice() {
            [field] => (None, *field),
            [section, field] => (Some(*section), *field),
            _ => bail!("unknown configuration key `{key}`"),
        };
        let hint = match section {
            None => defaults.get(field),
            Some(s) => defaults.get(s).and_then(Value::as_table).and_then(|t| t.get(field)),
        };
        let Some(hint) = hint.filter(|h| !h.is_table()) else {
            bail!("unknown configuration key `{key}`");
        };
        let value = override_value(key, raw, hint)?;
        match section {
            None => {
                table.insert(field.to_string(), value);
            }
            Some(s) => {
                let entry = table.entry(s.to_string()).or_insert_with(|| Value::Table(Table::new()));
                let Some(t) = entry.as_table_mut() else {
                    bail!("`{s}` must be a section");
                };
                t.insert(field.to_string(), value);
            }
        }
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_table(table: Table) -> Result<Self> {
        let cfg: ExperimentConfig = table.try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (if any), applies the overrides and validates.
    pub fn resolve(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                text.parse::<Table>()
                    .with_context(|| format!("parsing {}", p.display()))?
            }
            None => Table::new(),
        };
        apply_overrides(&mut table, overrides)?;
        Self::from_table(table)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.space()?;
        self.search_config().validate()?;
        self.train_config().validate()?;
        let d = &self.dataset;
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            bail!("dataset.train_fraction {} must lie in (0, 1)", d.train_fraction);
        }
        if d.source == DataSource::Raw && (d.images.is_empty() || d.labels.is_empty()) {
            bail!("dataset.source = \"raw\" needs dataset.images and dataset.labels");
        }
        if self.derive.fixed_channels == 0 {
            bail!("derive.fixed_channels must be at least 1");
        }
        if self.search.nodes == 0 {
            bail!("search.nodes must be at least 1");
        }
        Ok(())
    }

    pub fn space(&self) -> Result<SpaceId> {
        Ok(self.search.space.parse()?)
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        let d = &self.dataset;
        SyntheticConfig {
            seed: derive_seed(self.seed, "data.generate"),
            num_samples: d.num_samples,
            classes: d.classes,
            size: d.size,
            channels: d.channels,
            noise: d.noise as f32,
        }
    }

    pub fn search_config(&self) -> SearchConfig {
        let s = &self.search;
        SearchConfig {
            epochs: s.epochs,
            batch_size: s.batch_size,
            w_learning_rate: s.w_learning_rate as f32,
            w_momentum: s.w_momentum as f32,
            w_weight_decay: s.w_weight_decay as f32,
            alpha_learning_rate: s.alpha_learning_rate as f32,
            alpha_weight_decay: s.alpha_weight_decay as f32,
            alpha_beta1: s.alpha_beta1 as f32,
            alpha_beta2: s.alpha_beta2 as f32,
            split_fraction: s.split_fraction,
            wall_time: self.run.wall_time,
        }
    }

    pub fn supernet_config(&self, num_classes: usize, in_channels: usize) -> Result<SuperNetConfig> {
        Ok(SuperNetConfig {
            space: self.space()?,
            n: self.search.n,
            nodes: self.search.nodes,
            init_channels: self.search.init_channels,
            num_classes,
            in_channels,
            sepconv_repeats: self.search.sepconv_repeats,
        })
    }

    pub fn allocation_mode(&self) -> AllocationMode {
        match self.derive.mode {
            DeriveMode::Aca => AllocationMode::Aca,
            DeriveMode::DartsS => AllocationMode::DartsS {
                fixed: self.derive.fixed_channels,
            },
            DeriveMode::DartsBaseline => AllocationMode::Full,
        }
    }

    pub fn target_config(&self, num_classes: usize, in_channels: usize, image_size: usize) -> TargetConfig {
        TargetConfig {
            n: self.eval.n,
            init_channels: self.eval.init_channels,
            num_classes,
            in_channels,
            image_size,
            sepconv_repeats: self.eval.sepconv_repeats,
            mode: match self.eval.ablation_mode {
                Ablation::Full => AblationMode::Full,
                Ablation::NoSkip => AblationMode::NoSkip,
                Ablation::NoChannel => AblationMode::NoChannel,
            },
            fixed_channels: self.derive.fixed_channels,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let e = &self.eval;
        TrainConfig {
            epochs: e.epochs,
            batch_size: e.batch_size,
            learning_rate: e.learning_rate as f32,
            momentum: e.momentum as f32,
            weight_decay: e.weight_decay as f32,
            wall_time: self.run.wall_time,
        }
    }
}

/// Run directory: explicit, or `<root>/<run.name>` with the root taken from
/// [`RUN_ROOT_ENV`] (default `runs`).
pub fn run_dir(explicit: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let root = std::env::var_os(RUN_ROOT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| "runs".into());
            root.join(&cfg.run.name)
        }
    }
}

pub const RUN_ROOT_ENV: &str = "ACANAS_RUN_ROOT";
