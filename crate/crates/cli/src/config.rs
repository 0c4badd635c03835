//! `key = value` run configuration.
//!
//! | key           | default  | meaning                                          |
//! |---------------|----------|--------------------------------------------------|
//! | `data`        | required | dataset root (`benign/`, `malignant/`)           |
//! | `out`         | required | output directory                                 |
//! | `preset`      | `full`   | `full` or `tiny`                                 |
//! | `variant`     | `csa_moe`| `csa_moe`, `resnet_moe` or `resnet18`            |
//! | `drop_expert` | `none`   | `none`, `tumor` or `boundary`                    |
//! | `epochs`      | `30`     |                                                  |
//! | `batch_size`  | `32`     |                                                  |
//! | `lr`          | `5e-5`   | initial Adam learning rate                       |
//! | `weight_decay`| `0`      |                                                  |
//! | `lr_factor`   | `0.5`    | plateau reduction factor                         |
//! | `lr_patience` | `3`      | epochs without val-loss improvement before a cut |
//! | `min_lr`      | `1e-6`   | learning-rate floor                              |
//! | `seed`        | `42`     | seed of run 0; run `k` uses `seed + k`           |
//! | `split_seed`  | `42`     | seed of the stratified split, shared by all runs |
//! | `runs`        | `1`      | number of seeded runs                            |
//! | `augment`     | `true`   | flips and rotations on the training part         |
//! | `workers`     | `4`      | view-generation threads (capped by `CSAMOE_THREADS`) |

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use csamoe::backbone::Preset;
use csamoe::moe::{Expert, Variant};
use csamoe::train::TrainConfig;

use crate::error::{CliError, CliResult};

pub const KEYS: [&str; 17] = [
    "data",
    "out",
    "preset",
    "variant",
    "drop_expert",
    "epochs",
    "batch_size",
    "lr",
    "weight_decay",
    "lr_factor",
    "lr_patience",
    "min_lr",
    "seed",
    "split_seed",
    "runs",
    "augment",
    "workers",
];

#[derive(Clone, Debug, PartialEq)]
pub struct CliConfig {
    pub data: PathBuf,
    pub out: PathBuf,
    pub train: TrainConfig,
    pub split_seed: u64,
    pub runs: usize,
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> CliResult<T> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("config key `{key}`: cannot parse `{value}`")))
}

pub fn parse_preset(value: &str) -> CliResult<Preset> {
    Preset::parse(value)
        .ok_or_else(|| CliError::Usage(format!("unknown preset `{value}` (expected full or tiny)")))
}

pub fn parse_variant(value: &str) -> CliResult<Variant> {
    Variant::parse(value).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown variant `{value}` (expected csa_moe, resnet_moe or resnet18)"
        ))
    })
}

pub fn parse_expert(value: &str) -> CliResult<Option<Expert>> {
    match value {
        "none" => Ok(None),
        "tumor" => Ok(Some(Expert::Tumor)),
        "boundary" => Ok(Some(Expert::Boundary)),
        other => Err(CliError::Usage(format!(
            "cannot drop expert `{other}` (expected none, tumor or boundary)"
        ))),
    }
}

impl CliConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut train = TrainConfig::default();
        let (mut data, mut out) = (None, None);
        let (mut split_seed, mut runs) = (42, 1);
        let mut seen = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Usage(format!(
                    "config line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                )));
            };
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(CliError::Usage(format!(
                    "config line {}: unknown key `{key}`",
                    lineno + 1
                )));
            }
            if !seen.insert(key.to_string()) {
                return Err(CliError::Usage(format!(
                    "config line {}: duplicate key `{key}`",
                    lineno + 1
                )));
            }
            match key {
                "data" => data = Some(PathBuf::from(value)),
                "out" => out = Some(PathBuf::from(value)),
                "preset" => train.preset = parse_preset(value)?,
                "variant" => train.variant = parse_variant(value)?,
                "drop_expert" => train.dropped = parse_expert(value)?,
                "epochs" => train.epochs = parse_num(key, value)?,
                "batch_size" => train.batch_size = parse_num(key, value)?,
                "lr" => train.lr = parse_num(key, value)?,
                "weight_decay" => train.weight_decay = parse_num(key, value)?,
                "lr_factor" => train.lr_factor = parse_num(key, value)?,
                "lr_patience" => train.lr_patience = parse_num(key, value)?,
                "min_lr" => train.min_lr = parse_num(key, value)?,
                "seed" => train.seed = parse_num(key, value)?,
                "split_seed" => split_seed = parse_num(key, value)?,
                "runs" => runs = parse_num(key, value)?,
                "augment" => train.augment = parse_num(key, value)?,
                "workers" => train.workers = parse_num(key, value)?,
                _ => unreachable!("key list and match arms disagree"),
            }
        }
        let require = |v: Option<PathBuf>, key: &str| {
            v.ok_or_else(|| CliError::Usage(format!("config is missing required key `{key}`")))
        };
        let cfg = Self {
            data: require(data, "data")?,
            out: require(out, "out")?,
            train,
            split_seed,
            runs,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.runs == 0 {
            return Err(CliError::Usage("runs must be at least 1".into()));
        }
        self.train.validate().map_err(|e| CliError::Usage(e.to_string()))
    }
}

/// Worker count after applying the `CSAMOE_THREADS` cap.
pub fn capped_workers(requested: usize) -> CliResult<usize> {
    match std::env::var("CSAMOE_THREADS") {
        Ok(v) => {
            let cap: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| CliError::Usage(format!("CSAMOE_THREADS must be a positive integer, got `{v}`")))?;
            Ok(requested.clamp(1, cap))
        }
        Err(_) => Ok(requested.max(1)),
    }
}
