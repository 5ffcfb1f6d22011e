//! Run configuration: flat `section.key = value` files plus overrides.
//!
//! Every key has a default listed in [`KEYS`]. Files may set any subset;
//! `#` starts a comment. Unknown keys and malformed values are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use pdsa_core::data::DatasetConfig;
use pdsa_core::lcsd::InitEncoding;
use pdsa_core::network::{Ablation, ModelConfig, StageConfig, Variant};

use crate::train::TrainConfig;

/// Environment variable holding the default output directory.
pub const OUT_DIR_ENV: &str = "PDSA_OUT_DIR";

/// Every accepted key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("model.variant", "pdsa", "pdsa or sa_baseline"),
    (
        "model.channels",
        "16",
        "width of the first stage (doubles per stage)",
    ),
    ("model.la_blocks", "0", "extra stride-1 blocks per stage"),
    ("model.strides", "4,4", "downsampling stride per stage"),
    ("model.radii", "0.4,0.8", "ball query radius per stage"),
    ("model.k", "16,16", "neighbors per center per stage"),
    ("model.a_dim", "3", "compressed descriptor width per octant"),
    (
        "model.rho",
        "0.25",
        "key-point ratio for attention on large stages",
    ),
    ("model.hidden", "16", "hidden width of the denoising MLPs"),
    ("model.cdip", "true", "neighbor denoising correction"),
    (
        "model.dw",
        "true",
        "distance weighting inside the descriptor",
    ),
    ("model.cics", "true", "descriptor self-attention correction"),
    (
        "model.init_encoding",
        "octant_distribution",
        "octant_distribution or octant_centroid",
    ),
    (
        "model.full_attention_max",
        "256",
        "largest stage that attends over all centers",
    ),
    ("train.lr", "0.002", "peak learning rate (cosine decay)"),
    ("train.weight_decay", "0.0001", "AdamW weight decay"),
    ("train.epochs", "60", "training epochs"),
    ("train.batch", "16", "objects per optimizer step"),
    ("train.seed", "0", "initialization and shuffling seed"),
    ("train.smoothing", "0.1", "label smoothing epsilon"),
    (
        "train.threads",
        "1",
        "worker threads (0 = all cores); results are reproducible only with 1",
    ),
    (
        "data.kind",
        "shapes",
        "dataset; only the synthetic shapes are available",
    ),
    ("data.points", "1024", "points per object"),
    ("data.train_per_class", "200", "training objects per class"),
    ("data.test_per_class", "50", "test objects per class"),
    ("data.noise", "0.01", "Gaussian surface noise"),
    (
        "data.outlier_fraction",
        "0",
        "fraction of points replaced by outliers",
    ),
    ("data.outlier_spread", "1", "half-width of the outlier box"),
    (
        "ablate.sweep",
        "ladder",
        "ladder (correction ladder) or a_dim",
    ),
    (
        "ablate.seeds",
        "5",
        "seeds per variant, starting at train.seed",
    ),
    (
        "ablate.a_dims",
        "1,2,3,4",
        "descriptor widths for the a_dim sweep",
    ),
    (
        "ablate.neighborhoods",
        "256",
        "sampled neighborhoods for the variance column",
    ),
    (
        "io.out_dir",
        "",
        "output directory (empty: $PDSA_OUT_DIR, else ./runs)",
    ),
    (
        "io.checkpoint",
        "",
        "checkpoint to read (empty: <out_dir>/final.ckpt)",
    ),
];

/// Help text listing every key and its default.
pub fn keys_help() -> String {
    let mut s = String::from("Config keys (default in brackets):\n");
    for (k, d, h) in KEYS {
        let _ = writeln!(s, "  {k:<26} [{d}]  {h}");
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    Ladder,
    ADim,
}

impl FromStr for Sweep {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ladder" => Ok(Self::Ladder),
            "a_dim" => Ok(Self::ADim),
            _ => bail!("unknown sweep `{s}` (expected ladder or a_dim)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblateConfig {
    pub sweep: Sweep,
    pub seeds: usize,
    pub a_dims: Vec<usize>,
    pub neighborhoods: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub dataset: DatasetConfig,
    pub train_per_class: u64,
    pub test_per_class: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Effective key/value pairs, defaults included.
    pub values: BTreeMap<String, String>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub ablate: AblateConfig,
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
}

/// Parses `section.key = value` lines into `map`.
pub fn parse_into(text: &str, map: &mut BTreeMap<String, String>) -> Result<()> {
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected `key = value`", i + 1))?;
        set(map, k.trim(), v.trim()).with_context(|| format!("line {}", i + 1))?;
    }
    Ok(())
}

fn set(map: &mut BTreeMap<String, String>, key: &str, value: &str) -> Result<()> {
    if !KEYS.iter().any(|(k, _, _)| *k == key) {
        bail!("unknown config key `{key}`");
    }
    map.insert(key.to_string(), value.to_string());
    Ok(())
}

/// Applies a `key=value` override.
pub fn apply_override(map: &mut BTreeMap<String, String>, kv: &str) -> Result<()> {
    let (k, v) = kv
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{kv}` is not of the form key=value"))?;
    set(map, k.trim(), v.trim())
}

fn parse<T: FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let v = &map[key];
    v.parse().map_err(|e| anyhow!("{key} = `{v}`: {e}"))
}

fn parse_list<T: FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let v = &map[key];
    v.split(',')
        .map(|s| s.trim().parse().map_err(|e| anyhow!("{key} = `{v}`: {e}")))
        .collect()
}

fn parse_encoding(s: &str) -> Result<InitEncoding> {
    match s {
        "octant_distribution" => Ok(InitEncoding::OctantDistribution),
        "octant_centroid" => Ok(InitEncoding::OctantCentroid),
        _ => bail!("model.init_encoding = `{s}`: expected octant_distribution or octant_centroid"),
    }
}

impl RunConfig {
    /// Defaults, then `file` (if any), then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut map: BTreeMap<String, String> = KEYS
            .iter()
            .map(|(k, d, _)| (k.to_string(), d.to_string()))
            .collect();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            parse_into(&text, &mut map).with_context(|| format!("in {}", path.display()))?;
        }
        for kv in overrides {
            apply_override(&mut map, kv)?;
        }
        Self::from_map(map)
    }

    pub fn from_map(map: BTreeMap<String, String>) -> Result<Self> {
        let strides: Vec<usize> = parse_list(&map, "model.strides")?;
        let radii: Vec<f64> = parse_list(&map, "model.radii")?;
        let ks: Vec<usize> = parse_list(&map, "model.k")?;
        if strides.len() != radii.len() || strides.len() != ks.len() {
            bail!(
                "model.strides, model.radii and model.k must have the same length ({}, {}, {})",
                strides.len(),
                radii.len(),
                ks.len()
            );
        }
        let model = ModelConfig {
            variant: parse::<Variant>(&map, "model.variant")?,
            channels: parse(&map, "model.channels")?,
            la_blocks: parse(&map, "model.la_blocks")?,
            stages: strides
                .iter()
                .zip(&radii)
                .zip(&ks)
                .map(|((&stride, &radius), &k)| StageConfig { stride, radius, k })
                .collect(),
            a_dim: parse(&map, "model.a_dim")?,
            rho: parse(&map, "model.rho")?,
            hidden: parse(&map, "model.hidden")?,
            ablation: Ablation {
                cdip: parse(&map, "model.cdip")?,
                dw: parse(&map, "model.dw")?,
                cics: parse(&map, "model.cics")?,
            },
            init_encoding: parse_encoding(&map["model.init_encoding"])?,
            full_attention_max: parse(&map, "model.full_attention_max")?,
        };
        model.validate()?;

        let train = TrainConfig {
            lr: parse(&map, "train.lr")?,
            weight_decay: parse(&map, "train.weight_decay")?,
            epochs: parse(&map, "train.epochs")?,
            batch: parse(&map, "train.batch")?,
            seed: parse(&map, "train.seed")?,
            smoothing: parse(&map, "train.smoothing")?,
            threads: parse(&map, "train.threads")?,
        };
        if train.batch == 0 {
            bail!("train.batch must be at least 1");
        }
        if !(0.0..1.0).contains(&train.smoothing) {
            bail!("train.smoothing must be in [0, 1)");
        }

        if map["data.kind"] != "shapes" {
            bail!(
                "data.kind = `{}`: only `shapes` is available",
                map["data.kind"]
            );
        }
        let data = DataConfig {
            dataset: DatasetConfig {
                points: parse(&map, "data.points")?,
                noise: parse(&map, "data.noise")?,
                outlier_fraction: parse(&map, "data.outlier_fraction")?,
                outlier_spread: parse(&map, "data.outlier_spread")?,
            },
            train_per_class: parse(&map, "data.train_per_class")?,
            test_per_class: parse(&map, "data.test_per_class")?,
        };
        if data.dataset.points == 0 {
            bail!("data.points must be at least 1");
        }

        let ablate = AblateConfig {
            sweep: parse(&map, "ablate.sweep")?,
            seeds: parse(&map, "ablate.seeds")?,
            a_dims: parse_list(&map, "ablate.a_dims")?,
            neighborhoods: parse(&map, "ablate.neighborhoods")?,
        };
        if ablate.a_dims.contains(&0) {
            bail!("ablate.a_dims entries must be at least 1");
        }

        let out_dir = match map["io.out_dir"].as_str() {
            "" => {
                std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
            }
            d => PathBuf::from(d),
        };
        let checkpoint = match map["io.checkpoint"].as_str() {
            "" => out_dir.join("final.ckpt"),
            c => PathBuf::from(c),
        };
        Ok(Self {
            values: map,
            model,
            train,
            data,
            ablate,
            out_dir,
            checkpoint,
        })
    }

    /// The effective configuration in file syntax, keys in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, _, _) in KEYS {
            let v = match *k {
                "io.out_dir" => self.out_dir.display().to_string(),
                "io.checkpoint" => self.checkpoint.display().to_string(),
                _ => self.values[*k].clone(),
            };
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
