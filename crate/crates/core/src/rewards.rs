//! Per-component rewards and their staged composition.
//!
//! Stage 1 scores format and presence accuracy, stage 2 adds category
//! correctness and stage 3 adds box overlap. Every component is computed for
//! every output so that inactive ones can still be logged.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::transcript::{format_reward, parse_transcript, Category, Presence, Transcript};

/// Curriculum stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StageId {
    Stage1,
    Stage2,
    Stage3,
}

impl StageId {
    pub fn number(self) -> u8 {
        match self {
            StageId::Stage1 => 1,
            StageId::Stage2 => 2,
            StageId::Stage3 => 3,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(StageId::Stage1),
            2 => Ok(StageId::Stage2),
            3 => Ok(StageId::Stage3),
            _ => Err(Error::InvalidInput(format!("stage must be 1, 2 or 3, got {n}"))),
        }
    }

    /// Next stage, saturating at stage 3.
    pub fn next(self) -> Self {
        match self {
            StageId::Stage1 => StageId::Stage2,
            _ => StageId::Stage3,
        }
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

impl Serialize for StageId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.number())
    }
}

impl<'de> Deserialize<'de> for StageId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let n = u8::deserialize(d)?;
        StageId::from_number(n).map_err(serde::de::Error::custom)
    }
}

/// Ground truth for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub present: bool,
    pub category: Option<Category>,
    pub boxes: Vec<BBox>,
}

impl GroundTruth {
    pub fn positive(category: Category, boxes: Vec<BBox>) -> Result<Self> {
        let gt = GroundTruth {
            present: true,
            category: Some(category),
            boxes,
        };
        gt.validate()?;
        Ok(gt)
    }

    pub fn negative() -> Self {
        GroundTruth {
            present: false,
            category: None,
            boxes: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.present {
            if self.category.is_none() || self.boxes.is_empty() {
                return Err(Error::InvalidInput(
                    "a present object needs a category and at least one box".into(),
                ));
            }
            if let Some(b) = self.boxes.iter().find(|b| !b.is_valid()) {
                return Err(Error::InvalidInput(format!("invalid truth box {b:?}")));
            }
        } else if self.category.is_some() || !self.boxes.is_empty() {
            return Err(Error::InvalidInput(
                "an absent object cannot carry a category or boxes".into(),
            ));
        }
        Ok(())
    }

    /// The transcript a perfect generator would emit for this image.
    pub fn ideal_transcript(&self) -> Transcript {
        Transcript {
            explore: Vec::new(),
            bbox: self.boxes.first().copied(),
            category: self.category,
            answer: Some(Presence::from_bool(self.present)),
        }
    }
}

/// Trade-off coefficients; all default to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub fmt: f64,
    pub acc: f64,
    pub cat: f64,
    pub iou: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            fmt: 1.0,
            acc: 1.0,
            cat: 1.0,
            iou: 1.0,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.fmt, self.acc, self.cat, self.iou]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0)
        {
            Ok(())
        } else {
            Err(Error::Config(format!("reward weights must be finite and >= 0: {self:?}")))
        }
    }

    /// Largest total reachable at `stage` with every component at 1.
    pub fn stage_max(&self, stage: StageId) -> f64 {
        staged_reward(&RewardComponents::ones(), stage, self)
    }
}

/// How outputs for images without an object are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeScoring {
    /// A correct "No" with no spurious category earns the category point.
    #[default]
    Extended,
    /// Category and box rewards are only earned on images with an object.
    PositivesOnly,
}

/// Raw component values, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardComponents {
    pub fmt: f64,
    pub acc: f64,
    pub cat: f64,
    pub iou: f64,
}

impl RewardComponents {
    pub fn ones() -> Self {
        RewardComponents {
            fmt: 1.0,
            acc: 1.0,
            cat: 1.0,
            iou: 1.0,
        }
    }
}

/// Components, active stage and the stage total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub fmt: f64,
    pub acc: f64,
    pub cat: f64,
    pub iou: f64,
    pub stage: StageId,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn components(&self) -> RewardComponents {
        RewardComponents {
            fmt: self.fmt,
            acc: self.acc,
            cat: self.cat,
            iou: self.iou,
        }
    }

    /// Total as if `stage` were active.
    pub fn total_at(&self, stage: StageId, w: &RewardWeights) -> f64 {
        staged_reward(&self.components(), stage, w)
    }
}

/// 1 iff the answer is present and agrees with ground-truth presence.
pub fn accuracy_reward(t: &Transcript, gt: &GroundTruth) -> f64 {
    match t.answer {
        Some(a) if a.as_bool() == gt.present => 1.0,
        _ => 0.0,
    }
}

/// Category point; see [`NegativeScoring`] for images without an object.
pub fn category_reward(t: &Transcript, gt: &GroundTruth, negatives: NegativeScoring) -> f64 {
    if gt.present {
        return match (t.category, gt.category) {
            (Some(p), Some(g)) if p == g => 1.0,
            _ => 0.0,
        };
    }
    match negatives {
        NegativeScoring::PositivesOnly => 0.0,
        NegativeScoring::Extended => {
            let said_no = t.answer == Some(Presence::No);
            let no_spurious = matches!(t.category, None | Some(Category::Other));
            if said_no && no_spurious {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Best overlap between the predicted box and any truth box.
pub fn iou_reward(t: &Transcript, gt: &GroundTruth) -> f64 {
    if !gt.present {
        return 0.0;
    }
    let Some(pred) = &t.bbox else {
        return 0.0;
    };
    gt.boxes.iter().map(|g| iou(pred, g)).fold(0.0, f64::max)
}

/// Weighted sum of the components active at `stage`.
pub fn staged_reward(parts: &RewardComponents, stage: StageId, w: &RewardWeights) -> f64 {
    let mut total = w.fmt * parts.fmt + w.acc * parts.acc;
    if stage >= StageId::Stage2 {
        total += w.cat * parts.cat;
    }
    if stage >= StageId::Stage3 {
        total += w.iou * parts.iou;
    }
    total
}

/// Scores an already parsed transcript whose format reward is known.
pub fn score_transcript(
    t: &Transcript,
    fmt: f64,
    gt: &GroundTruth,
    stage: StageId,
    w: &RewardWeights,
    negatives: NegativeScoring,
) -> RewardBreakdown {
    let parts = RewardComponents {
        fmt,
        acc: accuracy_reward(t, gt),
        cat: category_reward(t, gt, negatives),
        iou: iou_reward(t, gt),
    };
    RewardBreakdown {
        fmt: parts.fmt,
        acc: parts.acc,
        cat: parts.cat,
        iou: parts.iou,
        stage,
        total: staged_reward(&parts, stage, w),
    }
}

/// Parses raw generator text and scores it.
pub fn score_output(
    raw: &str,
    gt: &GroundTruth,
    stage: StageId,
    w: &RewardWeights,
    negatives: NegativeScoring,
) -> RewardBreakdown {
    let (t, report) = parse_transcript(raw);
    score_transcript(&t, format_reward(&report), gt, stage, w, negatives)
}
