//! Dataset specs: `synth:NAME`, `csv:PATH`, `cifar10:DIR` or `fixture`.

use std::path::PathBuf;

use ajem_core::data::{
    fixture_records, load_cifar10, make_synth2d, records_to_dataset, CifarScale, CifarSplit, Synth2DOracle, Synth2DSpec,
};
use ajem_core::Dataset;
use anyhow::{bail, Context, Result};

use crate::config::{key, Key, RunConfig};

/// Keys read by [`load`]; the spec string itself lives under a
/// command-specific key.
pub const DATA_KEYS: &[Key] = &[
    key("points_per_class", "100", "points per class for synth:NAME data"),
    key("data_seed", "auto", "seed for synthetic data (auto = master seed)"),
    key("cifar_split", "train", "train or test batches for cifar10:DIR"),
    key(
        "cifar_scale",
        "down8",
        "full (32x32) or down8 (8x8) for cifar10 and fixture data",
    ),
    key(
        "data_limit",
        "1000",
        "maximum records for cifar10:DIR, record count for fixture",
    ),
];

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synth(String),
    Csv(PathBuf),
    Cifar(PathBuf),
    Fixture,
}

impl DataSource {
    pub fn parse(spec: &str) -> Result<Self> {
        if spec == "fixture" {
            return Ok(Self::Fixture);
        }
        match spec.split_once(':') {
            Some(("synth", name)) => Ok(Self::Synth(name.to_string())),
            Some(("csv", path)) => Ok(Self::Csv(PathBuf::from(path))),
            Some(("cifar10", dir)) => Ok(Self::Cifar(PathBuf::from(dir))),
            _ => bail!("unknown data spec `{spec}` (expected synth:NAME, csv:PATH, cifar10:DIR or fixture)"),
        }
    }
}

pub struct Loaded {
    pub dataset: Dataset,
    /// Exact density for synthetic 2D presets.
    pub oracle: Option<Synth2DOracle>,
}

fn scale(cfg: &RunConfig) -> Result<CifarScale> {
    match cfg.raw("cifar_scale") {
        "full" => Ok(CifarScale::Full),
        "down8" => Ok(CifarScale::Down8),
        other => bail!("cifar_scale must be full or down8, got `{other}`"),
    }
}

pub fn data_seed(cfg: &RunConfig) -> Result<u64> {
    Ok(cfg.get_opt("data_seed")?.map_or(cfg.seed()?, |s| s))
}

pub fn load(cfg: &RunConfig, spec: &str) -> Result<Loaded> {
    let seed = data_seed(cfg)?;
    let loaded = match DataSource::parse(spec)? {
        DataSource::Synth(name) => {
            let (dataset, oracle) = make_synth2d(&Synth2DSpec::preset(&name, cfg.get("points_per_class")?, seed)?)?;
            Loaded {
                dataset,
                oracle: Some(oracle),
            }
        }
        DataSource::Csv(path) => Loaded {
            dataset: Dataset::load_csv(&path, None).with_context(|| format!("loading {}", path.display()))?,
            oracle: None,
        },
        DataSource::Cifar(dir) => {
            let split = match cfg.raw("cifar_split") {
                "train" => CifarSplit::Train,
                "test" => CifarSplit::Test,
                other => bail!("cifar_split must be train or test, got `{other}`"),
            };
            Loaded {
                dataset: load_cifar10(&dir, split, scale(cfg)?, Some(cfg.get("data_limit")?))?,
                oracle: None,
            }
        }
        DataSource::Fixture => {
            let records = fixture_records(cfg.get("data_limit")?, seed);
            Loaded {
                dataset: records_to_dataset(&records, scale(cfg)?, "fixture")?,
                oracle: None,
            }
        }
    };
    Ok(loaded)
}
