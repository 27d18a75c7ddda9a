//! Episodic test protocol: `runs` independent draws of `episodes` test-class
//! episodes, scored per run and averaged.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_episode, save_mask_png, weaken_annotation, Annotation, ClassId, Dataset, Phase, SplitConfig};
use crate::error::{Error, Result};
use crate::inference::{PredMask, PrototypeMode};
use crate::metrics::{aggregate_runs, Accumulation, MetricsReport, SplitAccumulator};
use crate::model::Network;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub runs: usize,
    pub episodes: usize,
    pub seed: u64,
    /// Prototype used for one-shot episodes.
    pub prototype: PrototypeMode,
    pub annotation: Annotation,
    pub shots: usize,
    /// Supports drawn per episode, of which the first `shots` are used. Arms
    /// with different `shots` but equal `draw_shots` see the same queries.
    pub draw_shots: Option<usize>,
    /// k-shot only: refine with the pseudo-prototype (average of k + 1).
    pub include_pseudo: bool,
    pub accumulation: Accumulation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            runs: 3,
            episodes: 200,
            seed: 0,
            prototype: PrototypeMode::Fused,
            annotation: Annotation::Dense,
            shots: 1,
            draw_shots: None,
            include_pseudo: false,
            accumulation: Accumulation::Split,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 || self.episodes == 0 {
            return Err(Error::InvalidConfig("runs and episodes must be at least 1".into()));
        }
        if self.shots == 0 {
            return Err(Error::InvalidConfig("shots must be at least 1".into()));
        }
        if self.draw_shots.is_some_and(|d| d < self.shots) {
            return Err(Error::InvalidConfig("draw_shots must be at least shots".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub run: usize,
    pub episode: usize,
    pub class_id: ClassId,
    pub query_id: usize,
    /// Foreground IoU of this episode alone.
    pub iou: f64,
    pub pass_index: u8,
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub split_index: usize,
    pub per_run: Vec<MetricsReport>,
    pub aggregate: MetricsReport,
    pub episodes: Vec<EpisodeRecord>,
}

/// Episode draws depend only on `(seed, run)`, so arms differing in prototype
/// mode or annotation see the same episodes.
fn episode_rng(seed: u64, run: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x6576_616c_0000_0000 ^ run as u64)
}

fn annotation_rng(seed: u64, run: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x7765_616b_0000_0000 ^ run as u64)
}

pub fn evaluate(net: &Network<f32>, dataset: &Dataset, split: &SplitConfig, config: &EvalConfig) -> Result<EvalReport> {
    evaluate_with(net, dataset, split, config, |_, _| Ok(()))
}

/// Like [`evaluate`], handing every prediction to `sink` as it is produced.
pub fn evaluate_with(
    net: &Network<f32>,
    dataset: &Dataset,
    split: &SplitConfig,
    config: &EvalConfig,
    mut sink: impl FnMut(&EpisodeRecord, &PredMask<f32>) -> Result<()>,
) -> Result<EvalReport> {
    config.validate()?;
    let mut per_run = Vec::with_capacity(config.runs);
    let mut records = Vec::with_capacity(config.runs * config.episodes);
    for run in 0..config.runs {
        let mut ep_rng = episode_rng(config.seed, run);
        let mut weak_rng = annotation_rng(config.seed, run);
        let mut acc = SplitAccumulator::new(&split.test_classes, config.accumulation);
        for i in 0..config.episodes {
            let mut ep = sample_episode(dataset, split, Phase::Test, config.draw_shots.unwrap_or(config.shots), &mut ep_rng)?;
            ep.supports.truncate(config.shots);
            for s in &mut ep.supports {
                s.mask = weaken_annotation(&s.mask, config.annotation, &mut weak_rng)?;
            }
            let pred = if config.shots == 1 {
                net.segment(&ep, config.prototype)?
            } else {
                net.segment_kshot(&ep, config.include_pseudo)?
            };
            let fg = acc.add(ep.target_class, &pred.mask, &ep.query_mask)?;
            let record = EpisodeRecord {
                run,
                episode: i,
                class_id: ep.target_class,
                query_id: ep.query_id,
                iou: crate::metrics::iou(&fg),
                pass_index: pred.pass_index,
                fallback: pred.fallback,
            };
            sink(&record, &pred)?;
            records.push(record);
        }
        per_run.push(acc.report());
    }
    Ok(EvalReport {
        aggregate: aggregate_runs(&per_run)?,
        config: config.clone(),
        split_index: split.split_index,
        per_run,
        episodes: records,
    })
}

impl EvalReport {
    pub fn mean_iou(&self) -> f64 {
        self.aggregate.mean_iou
    }

    pub fn to_csv(&self) -> String {
        self.aggregate.to_csv(self.split_index, self.config.seed)
    }

    /// One JSON object per line.
    pub fn episodes_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.episodes {
            writeln!(out, "{}", serde_json::to_string(r).expect("record serializes")).expect("writing to a String");
        }
        out
    }

    pub fn fallback_count(&self) -> usize {
        self.episodes.iter().filter(|r| r.fallback).count()
    }
}

/// File name used for an exported prediction.
pub fn mask_file_name(record: &EpisodeRecord) -> String {
    format!("run{}_ep{:04}_class{}.png", record.run, record.episode, record.class_id)
}

/// Sink for [`evaluate_with`] writing each predicted mask as a 0/1 PNG under `dir`.
pub fn png_sink(dir: &Path) -> Result<impl FnMut(&EpisodeRecord, &PredMask<f32>) -> Result<()> + '_> {
    fs::create_dir_all(dir).map_err(Error::io("creating mask directory", dir))?;
    Ok(move |record: &EpisodeRecord, pred: &PredMask<f32>| save_mask_png(&pred.mask, &dir.join(mask_file_name(record))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, load_mask_png, make_splits, GenConfig};
    use crate::model::ModelConfig;

    fn setup() -> (Network<f32>, Dataset, SplitConfig) {
        let ds = generate_dataset(&GenConfig {
            num_classes: 8,
            images_per_class: 10,
            image_size: 32,
            seed: 4,
        })
        .unwrap();
        let split = make_splits(8, 0).unwrap();
        let net = Network::new(ModelConfig::micro(split.train_classes.len()), 3).unwrap();
        (net, ds, split)
    }

    fn small(prototype: PrototypeMode) -> EvalConfig {
        EvalConfig {
            runs: 2,
            episodes: 6,
            seed: 11,
            prototype,
            ..EvalConfig::default()
        }
    }

    #[test]
    fn report_shape_and_determinism() {
        let (net, ds, split) = setup();
        let cfg = small(PrototypeMode::Fused);
        let a = evaluate(&net, &ds, &split, &cfg).unwrap();
        let b = evaluate(&net, &ds, &split, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.per_run.len(), 2);
        assert_eq!(a.episodes.len(), 12);
        assert_eq!(a.aggregate.runs, 2);
        let avg = (a.per_run[0].mean_iou + a.per_run[1].mean_iou) / 2.0;
        assert!((a.mean_iou() - avg).abs() < 1e-15);
        assert_eq!(a.episodes_jsonl().lines().count(), 12);
        assert!(a.episodes.iter().all(|r| split.test_classes.contains(&r.class_id)));
    }

    #[test]
    fn arms_share_episodes() {
        let (net, ds, split) = setup();
        let s = evaluate(&net, &ds, &split, &small(PrototypeMode::Support)).unwrap();
        let f = evaluate(&net, &ds, &split, &small(PrototypeMode::Fused)).unwrap();
        let key = |r: &EpisodeRecord| (r.run, r.episode, r.class_id, r.query_id);
        assert!(s.episodes.iter().map(key).eq(f.episodes.iter().map(key)));
        assert!(s.episodes.iter().all(|r| r.pass_index == 1 && !r.fallback));
        assert!(f.episodes.iter().all(|r| r.pass_index == 2 || r.fallback));

        let mut weak = small(PrototypeMode::Fused);
        weak.annotation = Annotation::Bbox;
        let w = evaluate(&net, &ds, &split, &weak).unwrap();
        assert!(w.episodes.iter().map(key).eq(f.episodes.iter().map(key)));
    }

    #[test]
    fn per_episode_iou_matches_a_fresh_recount() {
        let (net, ds, split) = setup();
        let cfg = EvalConfig {
            runs: 1,
            episodes: 5,
            ..small(PrototypeMode::Support)
        };
        let mut preds = Vec::new();
        let rep = evaluate_with(&net, &ds, &split, &cfg, |r, p| {
            preds.push((*r, p.mask.clone()));
            Ok(())
        })
        .unwrap();
        for (r, mask) in preds {
            let gt = crate::data::binarize_mask(&ds.samples[r.query_id].label_map, r.class_id);
            let inter = mask.data().iter().zip(gt.data()).filter(|(&p, &g)| p != 0 && g != 0).count();
            let union = mask.data().iter().zip(gt.data()).filter(|(&p, &g)| p != 0 || g != 0).count();
            let expect = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
            assert_eq!(r.iou, expect);
        }
        assert_eq!(rep.episodes.len(), 5);
    }

    #[test]
    fn png_export_round_trips() {
        let (net, ds, split) = setup();
        let dir = tempfile::tempdir().unwrap();
        let cfg = EvalConfig {
            runs: 1,
            episodes: 3,
            ..small(PrototypeMode::Fused)
        };
        let mut kept = Vec::new();
        let mut write = png_sink(dir.path()).unwrap();
        let rep = evaluate_with(&net, &ds, &split, &cfg, |r, p| {
            kept.push(p.mask.clone());
            write(r, p)
        })
        .unwrap();
        for (r, m) in rep.episodes.iter().zip(kept) {
            assert_eq!(load_mask_png(&dir.path().join(mask_file_name(r))).unwrap(), m);
        }
    }

    #[test]
    fn kshot_evaluation_runs() {
        let (net, ds, split) = setup();
        let cfg = EvalConfig {
            shots: 3,
            include_pseudo: true,
            ..small(PrototypeMode::Support)
        };
        let rep = evaluate(&net, &ds, &split, &cfg).unwrap();
        assert_eq!(rep.episodes.len(), 12);
        assert!(EvalConfig { shots: 0, ..cfg.clone() }.validate().is_err());
        assert!(EvalConfig { draw_shots: Some(2), ..cfg }.validate().is_err());
    }

    #[test]
    fn draw_shots_pairs_queries_across_k() {
        let (net, ds, split) = setup();
        let paired = |shots| EvalConfig {
            shots,
            draw_shots: Some(3),
            ..small(PrototypeMode::Support)
        };
        let one = evaluate(&net, &ds, &split, &paired(1)).unwrap();
        let three = evaluate(&net, &ds, &split, &paired(3)).unwrap();
        let key = |r: &EpisodeRecord| (r.class_id, r.query_id);
        assert!(one.episodes.iter().map(key).eq(three.episodes.iter().map(key)));
        let plain = evaluate(&net, &ds, &split, &EvalConfig { shots: 3, ..small(PrototypeMode::Support) }).unwrap();
        assert_eq!(plain.episodes, three.episodes);
    }
}
