//! Classification and detection evaluation, refocus-step taxonomy and report tables.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{center_distance, contains, iou, BBox};
use crate::rewards::GroundTruth;
use crate::transcript::{Category, Presence, Transcript};

pub const IOU_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

pub const UNANSWERED_CONVENTION: &str = "records without a well-formed answer count as wrong";
pub const MISSING_BOX_CONVENTION: &str =
    "positives without a predicted box score IoU 0 and are excluded from mean center distance";

/// One prediction paired with its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub prediction: Transcript,
    pub gt: GroundTruth,
}

fn check_unique(records: &[EvalRecord]) -> Result<()> {
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::InvalidInput(format!("duplicate record id {}", r.id)));
        }
    }
    Ok(())
}

/// Per-class row of the support table. `class` is a category name or `"none"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: String,
    pub support: usize,
    pub predicted: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub binary_acc: f64,
    pub category_acc: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub n_records: usize,
    pub n_positive: usize,
    pub n_unanswered: usize,
    pub per_class: Vec<ClassRow>,
    pub unanswered_convention: String,
}

/// Label space for category scoring: the five categories plus a missing prediction.
const NONE_CLASS: usize = 5;

fn class_name(c: usize) -> String {
    Category::from_index(c).map_or_else(|| "none".to_string(), |c| c.as_str().to_string())
}

/// Binary accuracy over all records; category metrics over positives, weighted by true support.
pub fn classification_report(records: &[EvalRecord]) -> Result<ClassificationReport> {
    if records.is_empty() {
        return Err(Error::InvalidInput("classification report needs at least one record".into()));
    }
    check_unique(records)?;
    let n = records.len();
    let binary_hits = records
        .iter()
        .filter(|r| r.prediction.answer == Some(Presence::from_bool(r.gt.present)))
        .count();
    let n_unanswered = records.iter().filter(|r| r.prediction.answer.is_none()).count();

    // confusion[true][pred]
    let mut confusion = [[0usize; 6]; 6];
    let mut n_positive = 0;
    for r in records.iter().filter(|r| r.gt.present) {
        let Some(truth) = r.gt.category else { continue };
        let pred = r.prediction.category.map_or(NONE_CLASS, Category::index);
        confusion[truth.index()][pred] += 1;
        n_positive += 1;
    }

    let mut per_class = Vec::new();
    let (mut wp, mut wr, mut wf, mut hits) = (0.0, 0.0, 0.0, 0usize);
    for c in 0..6 {
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = (0..6).map(|t| confusion[t][c]).sum();
        if support == 0 && predicted == 0 {
            continue;
        }
        let tp = confusion[c][c];
        hits += tp;
        let precision = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
        let recall = if support == 0 { 0.0 } else { tp as f64 / support as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        let weight = support as f64;
        wp += weight * precision;
        wr += weight * recall;
        wf += weight * f1;
        per_class.push(ClassRow {
            class: class_name(c),
            support,
            predicted,
            precision,
            recall,
            f1,
        });
    }
    let denom = n_positive.max(1) as f64;
    Ok(ClassificationReport {
        binary_acc: binary_hits as f64 / n as f64,
        category_acc: hits as f64 / denom,
        weighted_precision: wp / denom,
        weighted_recall: wr / denom,
        weighted_f1: wf / denom,
        n_records: n,
        n_positive,
        n_unanswered,
        per_class,
        unanswered_convention: UNANSWERED_CONVENTION.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub miou: f64,
    /// Percentages of positives with IoU at or above 0.3, 0.5 and 0.7.
    pub frac_iou_ge_03: f64,
    pub frac_iou_ge_05: f64,
    pub frac_iou_ge_07: f64,
    /// Pixels; `None` when no positive has a predicted box.
    pub mean_center_distance: Option<f64>,
    pub n_positive: usize,
    pub n_missing_boxes: usize,
    pub missing_box_convention: String,
}

/// Best IoU against any truth box, and the center distance to that box
/// (ties broken toward the nearer center).
fn best_match(pred: &BBox, truths: &[BBox]) -> Option<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for t in truths {
        let cand = (iou(pred, t), center_distance(pred, t));
        best = match best {
            Some(b) if b.0 > cand.0 || (b.0 == cand.0 && b.1 <= cand.1) => Some(b),
            _ => Some(cand),
        };
    }
    best
}

/// Localization metrics over positive records.
pub fn detection_report(records: &[EvalRecord]) -> Result<DetectionReport> {
    check_unique(records)?;
    let mut ious = Vec::new();
    let mut distances = Vec::new();
    let mut missing = 0;
    for r in records.iter().filter(|r| r.gt.present) {
        match r.prediction.bbox.as_ref().and_then(|b| best_match(b, &r.gt.boxes)) {
            Some((v, d)) => {
                ious.push(v);
                distances.push(d);
            }
            None => {
                if r.prediction.bbox.is_none() {
                    missing += 1;
                }
                ious.push(0.0);
            }
        }
    }
    if ious.is_empty() {
        return Err(Error::InvalidInput("detection report needs at least one positive record".into()));
    }
    let n = ious.len() as f64;
    let pct = |t: f64| 100.0 * ious.iter().filter(|&&v| v >= t).count() as f64 / n;
    Ok(DetectionReport {
        miou: ious.iter().sum::<f64>() / n,
        frac_iou_ge_03: pct(IOU_THRESHOLDS[0]),
        frac_iou_ge_05: pct(IOU_THRESHOLDS[1]),
        frac_iou_ge_07: pct(IOU_THRESHOLDS[2]),
        mean_center_distance: (!distances.is_empty())
            .then(|| distances.iter().sum::<f64>() / distances.len() as f64),
        n_positive: ious.len(),
        n_missing_boxes: missing,
        missing_box_convention: MISSING_BOX_CONVENTION.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RefocusLabel {
    Focus,
    Rethink,
    Backtrace,
    None,
}

impl RefocusLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            RefocusLabel::Focus => "Focus",
            RefocusLabel::Rethink => "Rethink",
            RefocusLabel::Backtrace => "Backtrace",
            RefocusLabel::None => "None",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefocusConfig {
    /// Maximum area ratio for a zoom-in (its inverse bounds a zoom-out).
    pub ratio: f64,
    /// Containment slack in pixels.
    pub slack: f64,
}

impl Default for RefocusConfig {
    fn default() -> Self {
        RefocusConfig { ratio: 0.8, slack: 2.0 }
    }
}

pub fn classify_pair(prev: &BBox, next: &BBox, cfg: &RefocusConfig) -> RefocusLabel {
    let inward = contains(prev, next, cfg.slack);
    let outward = contains(next, prev, cfg.slack);
    if inward && next.area() <= cfg.ratio * prev.area() {
        RefocusLabel::Focus
    } else if outward && next.area() >= prev.area() / cfg.ratio {
        RefocusLabel::Backtrace
    } else if iou(prev, next) > 0.0 && !inward && !outward {
        RefocusLabel::Rethink
    } else {
        RefocusLabel::None
    }
}

/// One label per consecutive pair; shorter trajectories give no labels.
pub fn classify_refocus_steps(trajectory: &[BBox], cfg: &RefocusConfig) -> Vec<RefocusLabel> {
    trajectory
        .windows(2)
        .map(|w| classify_pair(&w[0], &w[1], cfg))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefocusStats {
    /// Label name to count; labels never seen are omitted.
    pub histogram: BTreeMap<String, usize>,
    pub transitions: usize,
    pub records_with_boxes: usize,
    /// Mean number of explore boxes over records that have any.
    pub mean_trajectory_length: f64,
}

impl RefocusStats {
    pub fn count(&self, label: RefocusLabel) -> usize {
        self.histogram.get(label.as_str()).copied().unwrap_or(0)
    }
}

pub fn refocus_stats(records: &[EvalRecord], cfg: &RefocusConfig) -> RefocusStats {
    let mut stats = RefocusStats::default();
    let mut total_len = 0;
    for r in records {
        let traj = r.prediction.trajectory();
        if traj.is_empty() {
            continue;
        }
        stats.records_with_boxes += 1;
        total_len += traj.len();
        for label in classify_refocus_steps(&traj, cfg) {
            *stats.histogram.entry(label.as_str().to_string()).or_default() += 1;
            stats.transitions += 1;
        }
    }
    if stats.records_with_boxes > 0 {
        stats.mean_trajectory_length = total_len as f64 / stats.records_with_boxes as f64;
    }
    stats
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Markdown,
    Csv,
}

impl std::str::FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markdown" => Ok(TableFormat::Markdown),
            "csv" => Ok(TableFormat::Csv),
            other => Err(Error::Config(format!("unknown table format {other:?}"))),
        }
    }
}

pub const CLASSIFICATION_HEADERS: [&str; 5] = ["Binary Acc", "Category Acc", "Precision", "Recall", "F1"];
pub const DETECTION_HEADERS: [&str; 5] = [
    "mIOU",
    "IoU ≥ 0.3(%)",
    "IoU ≥ 0.5(%)",
    "IoU ≥ 0.7(%)",
    "Mean center distance(px)",
];

fn table_cells(cls: &ClassificationReport, det: &DetectionReport) -> ([String; 5], [String; 5]) {
    let f3 = |v: f64| format!("{v:.3}");
    let f2 = |v: f64| format!("{v:.2}");
    (
        [
            f3(cls.binary_acc),
            f3(cls.category_acc),
            f3(cls.weighted_precision),
            f3(cls.weighted_recall),
            f3(cls.weighted_f1),
        ],
        [
            f3(det.miou),
            f2(det.frac_iou_ge_03),
            f2(det.frac_iou_ge_05),
            f2(det.frac_iou_ge_07),
            det.mean_center_distance.map_or_else(|| "n/a".to_string(), f2),
        ],
    )
}

/// Two tables (classification, then detection) as markdown or `section,metric,value` CSV.
pub fn render_tables(cls: &ClassificationReport, det: &DetectionReport, format: TableFormat) -> String {
    let (c, d) = table_cells(cls, det);
    match format {
        TableFormat::Markdown => {
            let mut out = String::new();
            for (headers, cells) in [(CLASSIFICATION_HEADERS, c), (DETECTION_HEADERS, d)] {
                if !out.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "| {} |", headers.join(" | "));
                let _ = writeln!(out, "|{}", "---|".repeat(headers.len()));
                let _ = writeln!(out, "| {} |", cells.join(" | "));
            }
            out
        }
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["section", "metric", "value"]).expect("in-memory csv");
            for (section, headers, cells) in [
                ("classification", CLASSIFICATION_HEADERS, c),
                ("detection", DETECTION_HEADERS, d),
            ] {
                for (h, v) in headers.iter().zip(cells.iter()) {
                    w.write_record([section, h, v.as_str()]).expect("in-memory csv");
                }
            }
            String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8 csv")
        }
    }
}

/// Everything `eval` writes as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classification: ClassificationReport,
    pub detection: DetectionReport,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub refocus: Option<RefocusStats>,
}
