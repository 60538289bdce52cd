//! Tagged refocus-transcript grammar.
//!
//! A transcript is free text containing an optional `<explore>…</explore>`
//! block of narrated refocus steps followed by three answer tags:
//!
//! ```text
//! <explore>
//! Overview (x=0, y=0, w=64, h=64): scan the whole scene
//!
//! Focus (x=0, y=0, w=32, h=32): zoom into the top-left quadrant
//! </explore>
//! <bbox>(x=112, y=98, w=64, h=52)</bbox>
//! <category>Flying</category>
//! <answer>Yes</answer>
//! ```
//!
//! Parsing is total: malformed input never fails, it only shows up in the
//! [`ParseReport`].

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// One of the five camouflage super-categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Aquatic,
    Terrestrial,
    Flying,
    Amphibian,
    Other,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Aquatic,
        Category::Terrestrial,
        Category::Flying,
        Category::Amphibian,
        Category::Other,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Category> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Aquatic => "Aquatic",
            Category::Terrestrial => "Terrestrial",
            Category::Flying => "Flying",
            Category::Amphibian => "Amphibian",
            Category::Other => "Other",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    /// Case-insensitive, surrounding whitespace ignored.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        Category::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(t))
            .ok_or_else(|| Error::InvalidInput(format!("unknown category {t:?}")))
    }
}

/// The Yes/No presence claim.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Presence {
    Yes,
    No,
}

impl Presence {
    pub fn from_bool(present: bool) -> Self {
        if present {
            Presence::Yes
        } else {
            Presence::No
        }
    }

    pub fn as_bool(self) -> bool {
        self == Presence::Yes
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Presence::Yes => "Yes",
            Presence::No => "No",
        }
    }
}

impl FromStr for Presence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("yes") {
            Ok(Presence::Yes)
        } else if t.eq_ignore_ascii_case("no") {
            Ok(Presence::No)
        } else {
            Err(Error::InvalidInput(format!("unknown answer {t:?}")))
        }
    }
}

/// Step kinds recognised at the start of an explore line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StepLabel {
    Overview,
    Focus,
    Rethink,
    Backtracing,
    Summary,
}

impl StepLabel {
    pub const ALL: [StepLabel; 5] = [
        StepLabel::Overview,
        StepLabel::Focus,
        StepLabel::Rethink,
        StepLabel::Backtracing,
        StepLabel::Summary,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StepLabel::Overview => "Overview",
            StepLabel::Focus => "Focus",
            StepLabel::Rethink => "Rethink",
            StepLabel::Backtracing => "Backtracing",
            StepLabel::Summary => "Summary",
        }
    }

    fn from_word(w: &str) -> Option<StepLabel> {
        StepLabel::ALL.into_iter().find(|l| l.as_str() == w)
    }
}

/// One narrated step of the exploration trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefocusStep {
    pub label: Option<StepLabel>,
    pub bbox: Option<BBox>,
    pub narration: String,
}

/// Structured view of a generator output.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub explore: Vec<RefocusStep>,
    pub bbox: Option<BBox>,
    pub category: Option<Category>,
    pub answer: Option<Presence>,
}

impl Transcript {
    /// All three answer fields present.
    pub fn is_complete(&self) -> bool {
        self.bbox.is_some() && self.category.is_some() && self.answer.is_some()
    }

    /// Boxes recorded in the explore block, in order.
    pub fn trajectory(&self) -> Vec<BBox> {
        self.explore.iter().filter_map(|s| s.bbox).collect()
    }

    /// Checks that the transcript has a canonical text form that parses back to itself.
    pub fn validate(&self) -> Result<()> {
        if let Some(b) = &self.bbox {
            if !b.is_valid() {
                return Err(Error::InvalidInput("answer bbox is invalid".into()));
            }
        }
        for (i, step) in self.explore.iter().enumerate() {
            step.validate()
                .map_err(|e| Error::InvalidInput(format!("explore step {i}: {e}")))?;
        }
        Ok(())
    }
}

impl RefocusStep {
    fn validate(&self) -> std::result::Result<(), String> {
        let n = &self.narration;
        if n.trim().is_empty() {
            return Err("narration is empty".into());
        }
        if n.trim() != n {
            return Err("narration has surrounding whitespace".into());
        }
        if n.contains('\r') || n.contains("<explore>") || n.contains("</explore>") {
            return Err("narration contains reserved text".into());
        }
        if let Some(b) = &self.bbox {
            if !b.is_valid() {
                return Err("step box is invalid".into());
            }
        } else if box_re().is_match(n) {
            return Err("narration embeds a box but the step has none".into());
        }
        for (li, line) in n.split('\n').enumerate() {
            let t = line.trim();
            if t.is_empty() {
                return Err("narration contains a blank line".into());
            }
            if t.starts_with("====") {
                return Err("narration contains an example delimiter".into());
            }
            let starts_new_step = StepLabel::from_word(leading_word(t)).is_some();
            if starts_new_step && (li > 0 || (self.label.is_none() && self.bbox.is_none())) {
                return Err("narration line would start a new step".into());
            }
        }
        Ok(())
    }
}

/// Outcome of looking for one answer tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldStatus {
    PresentWellformed,
    PresentMalformed,
    Absent,
}

impl FieldStatus {
    pub fn is_wellformed(self) -> bool {
        self == FieldStatus::PresentWellformed
    }
}

/// A parser complaint anchored at a byte offset of the raw text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub offset: usize,
    pub message: String,
}

/// Evidence gathered while parsing; consumed by [`format_reward`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    pub bbox_status: FieldStatus,
    pub category_status: FieldStatus,
    pub answer_status: FieldStatus,
    pub explore_present: bool,
    pub diagnostics: Vec<Diagnostic>,
}

const NUM: &str = r"(-?\d+(?:\.\d+)?)";

fn box_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(&format!(
            r"\(\s*x\s*=\s*{NUM}\s*,\s*y\s*=\s*{NUM}\s*,\s*w\s*=\s*{NUM}\s*,\s*h\s*=\s*{NUM}\s*\)"
        ))
        .expect("box regex")
    })
}

fn anchored_box_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(&format!(r"^\s*{}\s*$", box_re().as_str())).expect("box regex"))
}

fn leading_box_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(&format!("^{}", box_re().as_str())).expect("box regex"))
}

fn box_from_captures(c: &regex::Captures<'_>) -> std::result::Result<BBox, String> {
    let v: Vec<f64> = (1..=4)
        .map(|i| c[i].parse::<f64>().map_err(|e| e.to_string()))
        .collect::<std::result::Result<_, _>>()?;
    if v[0] < 0.0 || v[1] < 0.0 {
        return Err("negative origin".into());
    }
    if v[2] <= 0.0 || v[3] <= 0.0 {
        return Err(if v[2] < 0.0 || v[3] < 0.0 {
            "negative extent".into()
        } else {
            "zero extent".into()
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err("non-finite coordinate".into());
    }
    Ok(BBox {
        x: v[0],
        y: v[1],
        w: v[2],
        h: v[3],
    })
}

/// Parses a `(x=…, y=…, w=…, h=…)` payload, the whole string must match.
pub fn parse_bbox_payload(s: &str) -> std::result::Result<BBox, String> {
    match anchored_box_re().captures(s) {
        Some(c) => box_from_captures(&c),
        None => Err("payload does not match (x=<num>, y=<num>, w=<num>, h=<num>)".into()),
    }
}

/// Canonical `(x=…, y=…, w=…, h=…)` rendering; integers print without a fraction.
pub fn format_bbox(b: &BBox) -> String {
    format!("(x={}, y={}, w={}, h={})", b.x, b.y, b.w, b.h)
}

fn leading_word(s: &str) -> &str {
    let end = s
        .find(|c: char| !c.is_ascii_alphabetic())
        .unwrap_or(s.len());
    &s[..end]
}

struct TagScan<T> {
    status: FieldStatus,
    value: Option<T>,
}

/// Finds the first well-formed `<tag>payload</tag>` outside `skip`.
fn scan_tag<T>(
    raw: &str,
    tag: &str,
    skip: Option<(usize, usize)>,
    diags: &mut Vec<Diagnostic>,
    parse: impl Fn(&str) -> std::result::Result<T, String>,
) -> TagScan<T> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let mut status = FieldStatus::Absent;
    let mut value = None;
    let mut pos = 0;
    while let Some(rel) = raw[pos..].find(&open) {
        let start = pos + rel;
        if let Some((s0, s1)) = skip {
            if start >= s0 && start < s1 {
                pos = s1;
                continue;
            }
        }
        let body = start + open.len();
        if value.is_some() {
            diags.push(Diagnostic {
                offset: start,
                message: format!("duplicate {open} ignored"),
            });
            pos = body;
            continue;
        }
        let Some(crel) = raw[body..].find(&close) else {
            diags.push(Diagnostic {
                offset: start,
                message: format!("{open} is never closed"),
            });
            status = FieldStatus::PresentMalformed;
            break;
        };
        let end = body + crel;
        let payload = &raw[body..end];
        if let Some(inner) = payload.find(&open) {
            diags.push(Diagnostic {
                offset: start,
                message: format!("{open} reopened before {close}"),
            });
            status = FieldStatus::PresentMalformed;
            pos = body + inner;
            continue;
        }
        match parse(payload) {
            Ok(v) => {
                value = Some(v);
                status = FieldStatus::PresentWellformed;
            }
            Err(msg) => {
                diags.push(Diagnostic {
                    offset: body,
                    message: format!("malformed {open}: {msg}"),
                });
                status = FieldStatus::PresentMalformed;
            }
        }
        pos = end + close.len();
    }
    TagScan { status, value }
}

fn parse_step(text: &str, offset: usize, diags: &mut Vec<Diagnostic>) -> RefocusStep {
    let word = leading_word(text);
    let label = StepLabel::from_word(word);
    let mut rest = if label.is_some() { &text[word.len()..] } else { text };
    let mut header = label.is_some();
    let mut bbox = None;
    let trimmed = rest.trim_start();
    if let Some(c) = leading_box_re().captures(trimmed) {
        match box_from_captures(&c) {
            Ok(b) => {
                bbox = Some(b);
                header = true;
                rest = &trimmed[c.get(0).map_or(0, |m| m.end())..];
            }
            Err(msg) => diags.push(Diagnostic {
                offset,
                message: format!("ignored step box: {msg}"),
            }),
        }
    }
    let mut narration = rest.trim_start();
    if header {
        narration = narration.strip_prefix(':').unwrap_or(narration).trim();
    }
    let narration = if narration.is_empty() { text } else { narration };
    if bbox.is_none() {
        for c in box_re().captures_iter(narration) {
            match box_from_captures(&c) {
                Ok(b) => {
                    bbox = Some(b);
                    break;
                }
                Err(msg) => diags.push(Diagnostic {
                    offset,
                    message: format!("ignored step box: {msg}"),
                }),
            }
        }
    }
    RefocusStep {
        label,
        bbox,
        narration: narration.to_string(),
    }
}

fn parse_explore(body: &str, base: usize, diags: &mut Vec<Diagnostic>) -> Vec<RefocusStep> {
    let mut steps = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    let mut current_offset = base;
    let mut offset = base;

    let mut flush = |lines: &mut Vec<&str>, at: usize, steps: &mut Vec<RefocusStep>| {
        if lines.is_empty() {
            return;
        }
        let joined = lines.join("\n");
        let text = joined.trim();
        if !text.is_empty() {
            steps.push(parse_step(text, at, diags));
        }
        lines.clear();
    };

    for line in body.split('\n') {
        let line_offset = offset;
        offset += line.len() + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        let t = line.trim();
        if t.is_empty() || t.starts_with("====") {
            flush(&mut current, current_offset, &mut steps);
            continue;
        }
        if StepLabel::from_word(leading_word(t)).is_some() {
            flush(&mut current, current_offset, &mut steps);
        }
        if current.is_empty() {
            current_offset = line_offset;
        }
        current.push(line);
    }
    flush(&mut current, current_offset, &mut steps);
    steps
}

/// Parses arbitrary generator text. Never fails.
pub fn parse_transcript(raw: &str) -> (Transcript, ParseReport) {
    let mut diags = Vec::new();
    let mut explore = Vec::new();
    let mut explore_present = false;
    let mut skip = None;

    if let Some(start) = raw.find("<explore>") {
        let body = start + "<explore>".len();
        match raw[body..].find("</explore>") {
            Some(rel) => {
                let end = body + rel;
                explore_present = true;
                explore = parse_explore(&raw[body..end], body, &mut diags);
                let block_end = end + "</explore>".len();
                skip = Some((start, block_end));
                if let Some(dup) = raw[block_end..].find("<explore>") {
                    diags.push(Diagnostic {
                        offset: block_end + dup,
                        message: "duplicate <explore> ignored".into(),
                    });
                }
            }
            None => diags.push(Diagnostic {
                offset: start,
                message: "<explore> is never closed".into(),
            }),
        }
    }

    let bbox = scan_tag(raw, "bbox", skip, &mut diags, parse_bbox_payload);
    let category = scan_tag(raw, "category", skip, &mut diags, |s| {
        s.parse::<Category>().map_err(|e| e.to_string())
    });
    let answer = scan_tag(raw, "answer", skip, &mut diags, |s| {
        s.parse::<Presence>().map_err(|e| e.to_string())
    });
    diags.sort_by_key(|d| d.offset);

    (
        Transcript {
            explore,
            bbox: bbox.value,
            category: category.value,
            answer: answer.value,
        },
        ParseReport {
            bbox_status: bbox.status,
            category_status: category.status,
            answer_status: answer.status,
            explore_present,
            diagnostics: diags,
        },
    )
}

fn serialize_step(s: &RefocusStep) -> String {
    let mut head = String::new();
    if let Some(l) = s.label {
        head.push_str(l.as_str());
    }
    if let Some(b) = &s.bbox {
        if !head.is_empty() {
            head.push(' ');
        }
        head.push_str(&format_bbox(b));
    }
    if head.is_empty() {
        s.narration.clone()
    } else {
        format!("{head}: {}", s.narration)
    }
}

fn serialize_explore_body(steps: &[RefocusStep]) -> String {
    steps
        .iter()
        .map(serialize_step)
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn serialize_answers(t: &Transcript, out: &mut Vec<String>) {
    if let Some(b) = &t.bbox {
        out.push(format!("<bbox>{}</bbox>", format_bbox(b)));
    }
    if let Some(c) = t.category {
        out.push(format!("<category>{c}</category>"));
    }
    if let Some(a) = t.answer {
        out.push(format!("<answer>{}</answer>", a.as_str()));
    }
}

/// Canonical text form: explore block, then bbox, category, answer.
pub fn serialize_transcript(t: &Transcript) -> String {
    let mut parts = Vec::new();
    if !t.explore.is_empty() {
        parts.push(format!("<explore>\n{}\n</explore>", serialize_explore_body(&t.explore)));
    }
    serialize_answers(t, &mut parts);
    parts.join("\n")
}

/// Fraction of the three answer tags that are present and well-formed.
pub fn format_reward(report: &ParseReport) -> f64 {
    let n = [
        report.bbox_status,
        report.category_status,
        report.answer_status,
    ]
    .iter()
    .filter(|s| s.is_wellformed())
    .count();
    n as f64 / 3.0
}

pub const REFOCUS_INSTRUCTION: &str = "Refocus before answering: start from an overview of the whole image, \
zoom into suspicious regions (Focus), adjust the region when the evidence shifts (Rethink), \
and zoom back out when a part of the object is found (Backtracing). \
Record every attended region as (x=, y=, w=, h=) in pixels.";

pub const FORMAT_REQUIREMENT: &str = "Write your reasoning inside the explore tags. \
Then give exactly one bbox tag holding (x=, y=, w=, h=), one category tag chosen from \
Aquatic, Terrestrial, Flying, Amphibian, Other, and one answer tag that is Yes or No.";

/// Builds the in-context prompt with one `==== example i ====` block per demonstration.
pub fn build_incontext_prompt(
    question: &str,
    demos: &[Transcript],
    require_format: bool,
) -> Result<String> {
    for (i, d) in demos.iter().enumerate() {
        if !d.is_complete() {
            return Err(Error::InvalidInput(format!(
                "demonstration {} is missing bbox, category or answer",
                i + 1
            )));
        }
        d.validate()?;
    }
    let mut out = String::new();
    out.push_str(question.trim());
    out.push('\n');
    out.push_str(REFOCUS_INSTRUCTION);
    out.push('\n');
    if require_format {
        out.push_str(FORMAT_REQUIREMENT);
        out.push('\n');
    }
    out.push_str("\n# explore\n");
    if demos.is_empty() {
        out.push_str("<explore></explore>\n");
    } else {
        out.push_str("<explore>\n");
        for (i, d) in demos.iter().enumerate() {
            out.push_str(&format!("==== example {} ====\n", i + 1));
            if !d.explore.is_empty() {
                out.push_str(&serialize_explore_body(&d.explore));
                out.push_str("\n\n");
            }
            if d.explore.last().and_then(|s| s.label) != Some(StepLabel::Summary) {
                let (b, c, a) = (d.bbox.unwrap(), d.category.unwrap(), d.answer.unwrap());
                out.push_str(&format!(
                    "Summary: final region {}, category {}, answer {}.\n",
                    format_bbox(&b),
                    c,
                    a.as_str()
                ));
            }
        }
        out.push_str("</explore>\n");
    }
    out.push_str("# answers\n");
    out.push_str("<bbox>(x=<x>, y=<y>, w=<w>, h=<h>)</bbox>\n");
    out.push_str("<category>Camouflaged Category</category>\n");
    out.push_str("<answer>Yes or No</answer>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIG: &str =
        "<bbox>(x=112, y=98, w=64, h=52)</bbox><category>Flying</category><answer>Yes</answer>";

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox { x, y, w, h }
    }

    #[test]
    fn parses_answer_block() {
        let (t, r) = parse_transcript(FIG);
        assert_eq!(t.bbox, Some(bx(112., 98., 64., 52.)));
        assert_eq!(t.category, Some(Category::Flying));
        assert_eq!(t.answer, Some(Presence::Yes));
        assert_eq!(r.bbox_status, FieldStatus::PresentWellformed);
        assert_eq!(r.category_status, FieldStatus::PresentWellformed);
        assert_eq!(r.answer_status, FieldStatus::PresentWellformed);
        assert!(r.diagnostics.is_empty());
        assert_eq!(format_reward(&r), 1.0);
    }

    #[test]
    fn empty_input() {
        let (t, r) = parse_transcript("");
        assert_eq!(t, Transcript::default());
        assert_eq!(r.bbox_status, FieldStatus::Absent);
        assert_eq!(r.category_status, FieldStatus::Absent);
        assert_eq!(r.answer_status, FieldStatus::Absent);
        assert!(!r.explore_present);
        assert_eq!(format_reward(&r), 0.0);
    }

    #[test]
    fn negative_extent_is_malformed() {
        let (t, r) = parse_transcript("<bbox>(x=5, y=5, w=-3, h=4)</bbox>");
        assert_eq!(t.bbox, None);
        assert_eq!(r.bbox_status, FieldStatus::PresentMalformed);
        assert!(r.diagnostics[0].message.contains("negative extent"));
    }

    #[test]
    fn missing_category_scores_two_thirds() {
        let (_, r) = parse_transcript("<bbox>(x=1,y=2,w=3,h=4)</bbox><answer>No</answer>");
        assert_eq!(format_reward(&r), 2.0 / 3.0);
    }

    #[test]
    fn tags_are_case_sensitive_and_payload_case_insensitive() {
        let (t, _) = parse_transcript("<BBOX>(x=1, y=1, w=1, h=1)</BBOX><category>  fLyInG </category>");
        assert_eq!(t.bbox, None);
        assert_eq!(t.category, Some(Category::Flying));
    }

    #[test]
    fn first_wellformed_occurrence_wins() {
        let raw = "<answer>maybe</answer><answer>No</answer><answer>Yes</answer>";
        let (t, r) = parse_transcript(raw);
        assert_eq!(t.answer, Some(Presence::No));
        assert_eq!(r.answer_status, FieldStatus::PresentWellformed);
        assert_eq!(r.diagnostics.len(), 2);
        assert!(r.diagnostics[1].message.contains("duplicate"));
    }

    #[test]
    fn unclosed_and_reopened_tags() {
        let (_, r) = parse_transcript("<category>Flying");
        assert_eq!(r.category_status, FieldStatus::PresentMalformed);
        let (t, r) = parse_transcript("<bbox>junk <bbox>(x=1, y=1, w=2, h=2)</bbox>");
        assert_eq!(t.bbox, Some(bx(1., 1., 2., 2.)));
        assert_eq!(r.bbox_status, FieldStatus::PresentWellformed);
    }

    #[test]
    fn answer_tags_inside_explore_are_ignored() {
        let raw = "<explore>\nFocus: maybe <answer>No</answer>\n</explore>\n<answer>Yes</answer>";
        let (t, r) = parse_transcript(raw);
        assert_eq!(t.answer, Some(Presence::Yes));
        assert!(r.explore_present);
        assert_eq!(t.explore.len(), 1);
    }

    #[test]
    fn explore_steps_split_on_labels_and_blank_lines() {
        let raw = "<explore>\n==== example 1 ====\nOverview...\nthe scene is mostly sand\nFocus (global to local zoom)...\n\nsomething unlabeled\nRethink (x=1, y=2, w=3, h=4): shift right\nBacktracing: widen to (x=0, y=0, w=10, h=10)\nSummary.\n</explore>";
        let (t, _) = parse_transcript(raw);
        let labels: Vec<_> = t.explore.iter().map(|s| s.label).collect();
        assert_eq!(
            labels,
            vec![
                Some(StepLabel::Overview),
                Some(StepLabel::Focus),
                None,
                Some(StepLabel::Rethink),
                Some(StepLabel::Backtracing),
                Some(StepLabel::Summary),
            ]
        );
        assert_eq!(t.explore[0].narration, "...\nthe scene is mostly sand");
        assert_eq!(t.explore[1].narration, "(global to local zoom)...");
        assert_eq!(t.explore[1].bbox, None);
        assert_eq!(t.explore[3].bbox, Some(bx(1., 2., 3., 4.)));
        assert_eq!(t.explore[3].narration, "shift right");
        assert_eq!(t.explore[4].bbox, Some(bx(0., 0., 10., 10.)));
        assert_eq!(t.explore[5].narration, ".");
    }

    #[test]
    fn serialize_orders_fields() {
        let t = Transcript {
            bbox: Some(bx(112., 98., 64., 52.)),
            category: Some(Category::Flying),
            answer: Some(Presence::Yes),
            ..Default::default()
        };
        let s = serialize_transcript(&t);
        assert_eq!(
            s,
            "<bbox>(x=112, y=98, w=64, h=52)</bbox>\n<category>Flying</category>\n<answer>Yes</answer>"
        );
        assert_eq!(serialize_transcript(&Transcript::default()), "");
        assert_eq!(parse_transcript(&s).0, t);
    }

    #[test]
    fn decimal_coordinates_round_trip() {
        let t = Transcript {
            bbox: Some(bx(0.1, 2.5, 1e-3, 123456.789)),
            ..Default::default()
        };
        assert_eq!(parse_transcript(&serialize_transcript(&t)).0, t);
    }

    #[test]
    fn validate_rejects_ambiguous_steps() {
        let mut t = Transcript::default();
        t.explore.push(RefocusStep {
            label: None,
            bbox: None,
            narration: "Focus here".into(),
        });
        assert!(t.validate().is_err());
        t.explore[0].narration = "see (x=1, y=1, w=1, h=1)".into();
        assert!(t.validate().is_err());
        t.explore[0].narration = "plain words".into();
        assert!(t.validate().is_ok());
    }

    fn complete_demo() -> Transcript {
        let (t, _) = parse_transcript(
            "<explore>\nOverview (x=0, y=0, w=64, h=64): whole scene\nFocus (x=0, y=0, w=32, h=32): top-left looks odd\n</explore>\n<bbox>(x=4, y=4, w=20, h=16)</bbox><category>Aquatic</category><answer>Yes</answer>",
        );
        t
    }

    #[test]
    fn prompt_with_demos() {
        let q = "Does this image contain the camouflaged object?";
        let one = build_incontext_prompt(q, &[complete_demo()], true).unwrap();
        assert_eq!(one.matches("==== example 1 ====").count(), 1);
        assert!(one.starts_with(q));
        assert!(one.contains(FORMAT_REQUIREMENT));

        let three = build_incontext_prompt(q, &vec![complete_demo(); 3], true).unwrap();
        let p1 = three.find("==== example 1 ====").unwrap();
        let p2 = three.find("==== example 2 ====").unwrap();
        let p3 = three.find("==== example 3 ====").unwrap();
        assert!(p1 < p2 && p2 < p3);
        assert!(!three.contains("==== example 4 ===="));
        // the demos stay inside the explore block and do not leak answers
        let (parsed, _) = parse_transcript(&three);
        assert_eq!(parsed.bbox, None);
        assert_eq!(parsed.explore.len(), 9);
    }

    #[test]
    fn prompt_without_demos() {
        let p = build_incontext_prompt("Q?", &[], false).unwrap();
        assert!(p.contains("<explore></explore>"));
        assert!(p.contains("<bbox>") && p.contains("<category>") && p.contains("<answer>"));
        assert!(!p.contains(FORMAT_REQUIREMENT));
    }

    #[test]
    fn prompt_rejects_incomplete_demo() {
        let mut d = complete_demo();
        d.category = None;
        assert!(build_incontext_prompt("Q?", &[d], true).is_err());
    }
}
