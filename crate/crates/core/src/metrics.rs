//! Confusion counts, IoU, split-level mean-IoU / binary-IoU and run aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{ClassId, Mask, IGNORE_LABEL};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// Counts with the roles of prediction and ground truth exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            tp: self.tp,
            fp: self.fn_,
            fn_: self.fp,
        }
    }
}

/// Foreground confusion of a binary prediction (nonzero = foreground).
/// Ground-truth pixels equal to `ignore` are skipped.
pub fn confusion(pred: &Mask, gt: &Mask, ignore: Option<u8>) -> Result<ConfusionCounts> {
    if pred.dims() != gt.dims() {
        return Err(Error::ShapeMismatch(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if Some(g) == ignore {
            continue;
        }
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(c)
}

/// `tp / (tp + fp + fn)`, with the empty-vs-empty case defined as 1.
pub fn iou(c: &ConfusionCounts) -> f64 {
    let denom = c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        c.tp as f64 / denom as f64
    }
}

/// How per-episode results are combined into split scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Accumulation {
    /// Sum confusion counts over the split, then divide.
    #[default]
    Split,
    /// Average per-episode IoUs.
    PerEpisode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_iou: BTreeMap<ClassId, f64>,
    pub per_class_counts: BTreeMap<ClassId, ConfusionCounts>,
    pub mean_iou: f64,
    pub binary_iou: f64,
    pub runs: usize,
    pub episodes_per_run: usize,
}

/// Swaps foreground and background, keeping ignored pixels.
fn background_lut() -> [u8; 256] {
    let mut lut = [0u8; 256];
    lut[0] = 1;
    lut[IGNORE_LABEL as usize] = IGNORE_LABEL;
    lut
}

/// Incremental form of [`split_report`].
#[derive(Clone, Debug)]
pub struct SplitAccumulator {
    accumulation: Accumulation,
    classes: BTreeMap<ClassId, ClassTally>,
    fg: ConfusionCounts,
    bg: ConfusionCounts,
    binary_sum: f64,
    episodes: usize,
}

#[derive(Clone, Copy, Debug, Default)]
struct ClassTally {
    counts: ConfusionCounts,
    iou_sum: f64,
    episodes: usize,
}

impl SplitAccumulator {
    pub fn new(test_classes: &[ClassId], accumulation: Accumulation) -> Self {
        Self {
            accumulation,
            classes: test_classes.iter().map(|&c| (c, ClassTally::default())).collect(),
            fg: ConfusionCounts::default(),
            bg: ConfusionCounts::default(),
            binary_sum: 0.0,
            episodes: 0,
        }
    }

    /// Records one episode and returns its foreground confusion.
    pub fn add(&mut self, class_id: ClassId, pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
        let tally = self.classes.get_mut(&class_id).ok_or(Error::UnknownClass(class_id))?;
        let fg = confusion(pred, gt, Some(IGNORE_LABEL))?;
        let pred_bg = Mask::from_vec(pred.height(), pred.width(), pred.data().iter().map(|&v| (v == 0) as u8).collect());
        let gt_bg = gt.remap(&background_lut());
        let bg = confusion(&pred_bg, &gt_bg, Some(IGNORE_LABEL))?;
        tally.counts.add(&fg);
        tally.iou_sum += iou(&fg);
        tally.episodes += 1;
        self.fg.add(&fg);
        self.bg.add(&bg);
        self.binary_sum += 0.5 * (iou(&fg) + iou(&bg));
        self.episodes += 1;
        Ok(fg)
    }

    pub fn report(&self) -> MetricsReport {
        let per_class_iou: BTreeMap<ClassId, f64> = self
            .classes
            .iter()
            .map(|(&c, t)| {
                let v = match self.accumulation {
                    Accumulation::Split => iou(&t.counts),
                    Accumulation::PerEpisode if t.episodes == 0 => 1.0,
                    Accumulation::PerEpisode => t.iou_sum / t.episodes as f64,
                };
                (c, v)
            })
            .collect();
        let mean_iou = if per_class_iou.is_empty() {
            0.0
        } else {
            per_class_iou.values().sum::<f64>() / per_class_iou.len() as f64
        };
        let binary_iou = match self.accumulation {
            Accumulation::Split => 0.5 * (iou(&self.fg) + iou(&self.bg)),
            Accumulation::PerEpisode if self.episodes == 0 => 1.0,
            Accumulation::PerEpisode => self.binary_sum / self.episodes as f64,
        };
        MetricsReport {
            per_class_counts: self.classes.iter().map(|(&c, t)| (c, t.counts)).collect(),
            per_class_iou,
            mean_iou,
            binary_iou,
            runs: 1,
            episodes_per_run: self.episodes,
        }
    }
}

/// One evaluated episode: binary prediction, binary ground truth, class.
pub type EpisodeResult<'a> = (&'a Mask, &'a Mask, ClassId);

pub fn split_report(episodes: &[EpisodeResult<'_>], test_classes: &[ClassId], accumulation: Accumulation) -> Result<MetricsReport> {
    let mut acc = SplitAccumulator::new(test_classes, accumulation);
    for &(pred, gt, class) in episodes {
        acc.add(class, pred, gt)?;
    }
    Ok(acc.report())
}

/// Averages mean-IoU, binary-IoU and per-class IoU across runs; counts are summed.
pub fn aggregate_runs(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = reports.first().ok_or(Error::Empty("run reports"))?;
    let n = reports.len() as f64;
    let mut per_class_iou = BTreeMap::new();
    let mut per_class_counts: BTreeMap<ClassId, ConfusionCounts> = BTreeMap::new();
    for r in reports {
        if r.per_class_iou.keys().ne(first.per_class_iou.keys()) {
            return Err(Error::ShapeMismatch("run reports cover different classes".into()));
        }
        for (&c, &v) in &r.per_class_iou {
            *per_class_iou.entry(c).or_insert(0.0) += v / n;
        }
        for (&c, counts) in &r.per_class_counts {
            per_class_counts.entry(c).or_default().add(counts);
        }
    }
    Ok(MetricsReport {
        per_class_iou,
        per_class_counts,
        mean_iou: reports.iter().map(|r| r.mean_iou).sum::<f64>() / n,
        binary_iou: reports.iter().map(|r| r.binary_iou).sum::<f64>() / n,
        runs: reports.iter().map(|r| r.runs).sum(),
        episodes_per_run: first.episodes_per_run,
    })
}

pub const CSV_HEADER: &str = "split,class,tp,fp,fn,iou,mean_iou,binary_iou,runs,seed";

impl MetricsReport {
    /// One CSV row per class (header not included).
    pub fn csv_rows(&self, split: usize, seed: u64) -> String {
        let mut out = String::new();
        for (c, v) in &self.per_class_iou {
            let k = self.per_class_counts.get(c).copied().unwrap_or_default();
            writeln!(
                out,
                "{split},{c},{},{},{},{v},{},{},{},{seed}",
                k.tp, k.fp, k.fn_, self.mean_iou, self.binary_iou, self.runs
            )
            .expect("writing to a String");
        }
        out
    }

    pub fn to_csv(&self, split: usize, seed: u64) -> String {
        format!("{CSV_HEADER}\n{}", self.csv_rows(split, seed))
    }
}
