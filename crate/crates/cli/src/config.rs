//! Config resolution: CLI flag > config file > built-in default.

use std::fs;
use std::path::Path;

use anyhow::Context;
use protoseg::data::GenConfig;
use protoseg::evaluation::EvalConfig;
use protoseg::heads::Reduction;
use protoseg::metrics::Accumulation;
use protoseg::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::args::{EvalOverrides, GenArgs, TrainOverrides};
use crate::UsageError;

pub const LAMBDA_GRID: [f64; 11] = [0.01, 0.05, 0.075, 0.09, 0.1, 0.15, 0.2, 0.3, 0.5, 0.75, 1.0];
pub const LR_MULTIPLIERS: [f64; 3] = [1.0, 2.0, 4.0];
pub const BATCH_GRID: [usize; 3] = [1, 2, 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepFile {
    pub lambdas: Vec<f64>,
    pub lrs: Option<Vec<f64>>,
    pub batches: Vec<usize>,
    /// Training episodes per grid point.
    pub episodes: usize,
    pub eval_runs: usize,
    pub eval_episodes: usize,
}

impl Default for SweepFile {
    fn default() -> Self {
        Self {
            lambdas: LAMBDA_GRID.to_vec(),
            lrs: None,
            batches: BATCH_GRID.to_vec(),
            episodes: 2000,
            eval_runs: 1,
            eval_episodes: 200,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepFile,
}

pub fn load(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())).into())
}

pub fn apply_gen(mut cfg: GenConfig, a: &GenArgs) -> GenConfig {
    if let Some(v) = a.classes {
        cfg.num_classes = v;
    }
    if let Some(v) = a.per_class {
        cfg.images_per_class = v;
    }
    if let Some(v) = a.size {
        cfg.image_size = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg
}

pub fn apply_train(mut cfg: TrainConfig, a: &TrainOverrides) -> TrainConfig {
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = a.$field {
                cfg.$field = v;
            }
        )*};
    }
    set!(episodes, lr0, momentum, weight_decay, poly_power, batch_size, lambda_mcl, seed, validate_every, validation_episodes);
    if a.no_mcl {
        cfg.flags.use_mcl = false;
    }
    if a.no_pff {
        cfg.flags.use_pff = false;
    }
    if a.no_spt {
        cfg.flags.use_spt = false;
    }
    if a.freeze_encoder {
        cfg.flags.freeze_encoder = true;
    }
    if a.sum_loss {
        cfg.reduction = Reduction::Sum;
    }
    if a.no_flip {
        cfg.flip = false;
    }
    cfg
}

pub fn apply_eval(mut cfg: EvalConfig, a: &EvalOverrides) -> EvalConfig {
    if let Some(v) = a.runs {
        cfg.runs = v;
    }
    if let Some(v) = a.episodes {
        cfg.episodes = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.prototype {
        cfg.prototype = v.into();
    }
    if let Some(v) = a.annotation {
        cfg.annotation = v.into();
    }
    if let Some(v) = a.shots {
        cfg.shots = v;
    }
    if let Some(v) = a.draw_shots {
        cfg.draw_shots = Some(v);
    }
    if a.include_pseudo {
        cfg.include_pseudo = true;
    }
    if a.per_episode {
        cfg.accumulation = Accumulation::PerEpisode;
    }
    cfg
}
