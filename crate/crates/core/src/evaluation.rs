//! Meta-test protocols and parsing metrics.
//!
//! mIoU aggregates intersections and unions over all episodes before
//! dividing. Binary-IoU is averaged per episode.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::episodic_data::{write_mask, Dataset, Episode, FoldSpec, TestPair, Way};
use crate::error::{Error, Result};
use crate::labels::{derive_binary_mask, LabelMap, BACKGROUND};

/// Per-class intersection/union counts plus pixel accuracy counters.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionAccumulator {
    /// `class → (intersection, union)`; a key exists once the class was evaluated.
    counts: BTreeMap<u8, (u64, u64)>,
    correct: u64,
    total: u64,
}

impl ConfusionAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one episode. Every class of `class_set` is marked evaluated.
    pub fn score_episode(&mut self, pred: &LabelMap, gt: &LabelMap, class_set: &[u8]) -> Result<()> {
        if !pred.same_shape(gt) {
            return Err(Error::shape(
                "score_episode",
                format!(
                    "prediction {}x{} vs ground truth {}x{}",
                    pred.height(),
                    pred.width(),
                    gt.height(),
                    gt.width()
                ),
            ));
        }
        let mut inter = [0u64; 256];
        let mut pred_n = [0u64; 256];
        let mut gt_n = [0u64; 256];
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            pred_n[p as usize] += 1;
            gt_n[g as usize] += 1;
            if p == g {
                inter[p as usize] += 1;
                self.correct += 1;
            }
        }
        self.total += pred.len() as u64;
        for &c in class_set {
            let c_ = c as usize;
            let e = self.counts.entry(c).or_default();
            e.0 += inter[c_];
            e.1 += pred_n[c_] + gt_n[c_] - inter[c_];
        }
        Ok(())
    }

    /// Adds another accumulator's counts; associative and commutative.
    pub fn merge(&mut self, other: &ConfusionAccumulator) {
        for (&c, &(i, u)) in &other.counts {
            let e = self.counts.entry(c).or_default();
            e.0 += i;
            e.1 += u;
        }
        self.correct += other.correct;
        self.total += other.total;
    }

    pub fn counts(&self, class: u8) -> Option<(u64, u64)> {
        self.counts.get(&class).copied()
    }

    /// IoU of `class` as a fraction; `None` if it was never evaluated or its union is empty.
    pub fn iou(&self, class: u8) -> Option<f64> {
        match self.counts.get(&class) {
            Some(&(i, u)) if u > 0 => Some(i as f64 / u as f64),
            _ => None,
        }
    }

    /// Mean IoU over the members of `classes` that have an IoU.
    pub fn mean_iou(&self, classes: &BTreeSet<u8>) -> Option<f64> {
        let ious: Vec<f64> = classes.iter().filter_map(|&c| self.iou(c)).collect();
        (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
    }

    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }

    pub fn per_class_iou(&self) -> BTreeMap<u8, f64> {
        self.counts
            .keys()
            .filter_map(|&c| self.iou(c).map(|v| (c, v)))
            .collect()
    }
}

/// Mean of foreground and background IoU of two binary maps (nonzero is
/// foreground). An empty union counts as a perfect match.
pub fn binary_iou(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    if !pred.same_shape(gt) {
        return Err(Error::shape("binary_iou", "prediction and ground truth differ in size"));
    }
    let mut i = [0u64; 2];
    let mut u = [0u64; 2];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = ((p != BACKGROUND) as usize, (g != BACKGROUND) as usize);
        for k in 0..2 {
            let (pk, gk) = (p == k, g == k);
            i[k] += (pk && gk) as u64;
            u[k] += (pk || gk) as u64;
        }
    }
    let iou = |k: usize| if u[k] == 0 { 1.0 } else { i[k] as f64 / u[k] as f64 };
    Ok((iou(0) + iou(1)) / 2.0)
}

/// Anything that parses a query into the support's classes.
pub trait OneShotParser {
    /// Label map at query image resolution, using only ids of `episode.class_set`.
    /// `episode.query_mask` is ground truth and must not be read by real models.
    fn parse(&self, episode: &Episode) -> Result<LabelMap>;
}

/// Scores of one protocol on one fold, as fractions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaTestScores {
    pub protocol: Way,
    pub episodes: usize,
    pub novel_miou: Option<f64>,
    pub human_miou: Option<f64>,
    pub accuracy: Option<f64>,
    /// Mean per-episode Binary-IoU (1-way only).
    pub binary_iou: Option<f64>,
    pub per_class_iou: BTreeMap<u8, f64>,
    pub confusion: ConfusionAccumulator,
}

/// Runs every pair of `pairs` through `parser`.
///
/// `k_way` parses the support's whole class set; `one_way` parses only the
/// pair's target class. When `dump_dir` is given, predicted label maps are
/// written there as `{episode:06}.png`.
pub fn run_meta_test(
    parser: &dyn OneShotParser,
    dataset: &Dataset,
    pairs: &[TestPair],
    protocol: Way,
    fold: &FoldSpec,
    dump_dir: Option<&Path>,
) -> Result<MetaTestScores> {
    let mut acc = ConfusionAccumulator::new();
    let mut biou_sum = 0.0;
    for (k, pair) in pairs.iter().enumerate() {
        let class_set = match protocol {
            Way::KWay => pair.class_set.clone(),
            Way::OneWay => vec![BACKGROUND, pair.target],
        };
        let episode = Episode::assemble(dataset, pair.support_index, pair.query_index, class_set)?;
        let pred = parser.parse(&episode)?;
        let gt = episode.query_mask.as_ref().expect("assembled episodes carry ground truth");
        if let Some(&bad) = pred.data().iter().find(|l| !episode.class_set.contains(l)) {
            return Err(Error::Contract(format!(
                "parser predicted label {bad} outside the class set {:?}",
                episode.class_set
            )));
        }
        acc.score_episode(&pred, gt, &episode.class_set)?;
        if protocol == Way::OneWay {
            biou_sum += binary_iou(&derive_binary_mask(&pred), &derive_binary_mask(gt))?;
        }
        if let Some(dir) = dump_dir {
            write_mask(&dir.join(format!("{k:06}.png")), &pred)?;
        }
    }
    let n = pairs.len();
    Ok(MetaTestScores {
        protocol,
        episodes: n,
        novel_miou: acc.mean_iou(&fold.novel_classes),
        human_miou: acc.mean_iou(&fold.human_classes()),
        accuracy: acc.accuracy(),
        binary_iou: (protocol == Way::OneWay && n > 0).then(|| biou_sum / n as f64),
        per_class_iou: acc.per_class_iou(),
        confusion: acc,
    })
}

/// One table row, in percent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FoldRow {
    pub fold: String,
    pub k_way_novel: Option<f64>,
    pub k_way_human: Option<f64>,
    pub k_way_accuracy: Option<f64>,
    pub one_way_novel: Option<f64>,
    pub one_way_human: Option<f64>,
    pub one_way_binary_iou: Option<f64>,
}

impl FoldRow {
    pub fn from_scores(fold: &str, k_way: Option<&MetaTestScores>, one_way: Option<&MetaTestScores>) -> Self {
        let pct = |v: Option<f64>| v.map(|x| 100.0 * x);
        Self {
            fold: fold.to_string(),
            k_way_novel: k_way.and_then(|s| pct(s.novel_miou)),
            k_way_human: k_way.and_then(|s| pct(s.human_miou)),
            k_way_accuracy: k_way.and_then(|s| pct(s.accuracy)),
            one_way_novel: one_way.and_then(|s| pct(s.novel_miou)),
            one_way_human: one_way.and_then(|s| pct(s.human_miou)),
            one_way_binary_iou: one_way.and_then(|s| pct(s.binary_iou)),
        }
    }

    fn values(&self) -> [Option<f64>; 6] {
        [
            self.k_way_novel,
            self.k_way_human,
            self.k_way_accuracy,
            self.one_way_novel,
            self.one_way_human,
            self.one_way_binary_iou,
        ]
    }
}

/// Per-fold results with their average.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<FoldRow>,
}

impl EvalReport {
    pub fn new(rows: Vec<FoldRow>) -> Self {
        Self { rows }
    }

    /// Adds `row`, replacing an existing row of the same fold.
    pub fn upsert(&mut self, row: FoldRow) {
        match self.rows.iter_mut().find(|r| r.fold == row.fold) {
            Some(r) => {
                let merged = FoldRow {
                    fold: row.fold.clone(),
                    k_way_novel: row.k_way_novel.or(r.k_way_novel),
                    k_way_human: row.k_way_human.or(r.k_way_human),
                    k_way_accuracy: row.k_way_accuracy.or(r.k_way_accuracy),
                    one_way_novel: row.one_way_novel.or(r.one_way_novel),
                    one_way_human: row.one_way_human.or(r.one_way_human),
                    one_way_binary_iou: row.one_way_binary_iou.or(r.one_way_binary_iou),
                };
                *r = merged;
            }
            None => self.rows.push(row),
        }
    }

    /// Column-wise mean over the folds that report each column.
    pub fn average(&self) -> FoldRow {
        let mut cols = [None; 6];
        for (k, col) in cols.iter_mut().enumerate() {
            let vals: Vec<f64> = self.rows.iter().filter_map(|r| r.values()[k]).collect();
            if !vals.is_empty() {
                *col = Some(vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        FoldRow {
            fold: "Ave".into(),
            k_way_novel: cols[0],
            k_way_human: cols[1],
            k_way_accuracy: cols[2],
            one_way_novel: cols[3],
            one_way_human: cols[4],
            one_way_binary_iou: cols[5],
        }
    }

    /// Plain-text table, one line per fold followed by the average.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} | {:>12} {:>12} {:>8} | {:>12} {:>12} {:>10}",
            "", "k-way", "", "", "1-way", "", ""
        );
        let _ = writeln!(
            out,
            "{:<10} | {:>12} {:>12} {:>8} | {:>12} {:>12} {:>10}",
            "Fold", "C_novel mIoU", "C_human mIoU", "Acc", "C_novel mIoU", "C_human mIoU", "Bi-IoU"
        );
        let _ = writeln!(out, "{}", "-".repeat(96));
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
        let rows = self.rows.iter().cloned().chain(std::iter::once(self.average()));
        for r in rows {
            let v = r.values();
            let _ = writeln!(
                out,
                "{:<10} | {:>12} {:>12} {:>8} | {:>12} {:>12} {:>10}",
                r.fold,
                cell(v[0]),
                cell(v[1]),
                cell(v[2]),
                cell(v[3]),
                cell(v[4]),
                cell(v[5])
            );
        }
        let _ = writeln!(out, "mIoU: intersections and unions summed over episodes; Bi-IoU: per-episode mean");
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Contract(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
