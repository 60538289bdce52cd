//! A small parametric refocus policy with exact log-probabilities.
//!
//! The policy observes a patch-statistics summary of the scene, takes up to
//! `t_max` discrete refocus actions on a current box (starting from the whole
//! image), then reads out presence, category and four binned box coordinates.
//! Every head is a single linear map followed by a tempered softmax, so the
//! log-probability of a rollout and its gradient are available in closed form.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::env::Scene;
use crate::geometry::BBox;
use crate::transcript::{Category, Presence, RefocusStep, StepLabel, Transcript};

pub const CHECKPOINT_FORMAT: &str = "refocus-policy";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Patch variance that maps to feature value 1.
const VARIANCE_SCALE: f64 = 0.02;
/// Gain applied to patch-mean deviations from the image median.
const MEAN_GAIN: f64 = 2.0;
/// A pixel is bright when it exceeds the image median by this much (on a 0..1 scale).
const BRIGHT_MARGIN: f64 = 0.1;
pub const TEXTURE_BINS: usize = 8;
/// Center spacing of the texture histogram bins.
const TEXTURE_STEP: f64 = 0.05;
/// Row lag used to measure band texture.
const TEXTURE_LAG: usize = 2;

pub const EXPAND_FACTOR: f64 = 2.0;
pub const NUM_ACTIONS: usize = 10;

/// Shape of the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Patches per image side.
    pub patch_grid: usize,
    /// Bins per box coordinate.
    pub bins: usize,
    /// Maximum number of refocus actions.
    pub t_max: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            patch_grid: 8,
            bins: 16,
            t_max: 4,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_grid == 0 || self.bins == 0 {
            return Err(Error::Config("patch grid and bins must be >= 1".into()));
        }
        Ok(())
    }

    fn feature_dim(&self) -> usize {
        2 * self.patch_grid * self.patch_grid + 2 * self.profile_len() + TEXTURE_BINS
    }

    fn profile_len(&self) -> usize {
        2 * self.patch_grid
    }

    /// Presence and category heads: features + bias.
    pub fn scene_input_dim(&self) -> usize {
        self.feature_dim() + 1
    }

    /// Box heads: features + final refocus box + bias.
    pub fn bbox_input_dim(&self) -> usize {
        self.feature_dim() + 5
    }

    /// Refocus head: features + box + quadrant means + quadrant variances + progress + bias.
    pub fn refocus_input_dim(&self) -> usize {
        self.feature_dim() + 14
    }
}

/// Image summary fed to every head; all values lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFeatures {
    pub grid: usize,
    /// Row-major patch means, `0.5 + 2·(mean - median)` clamped.
    pub means: Vec<f64>,
    /// Row-major patch variances scaled and clamped.
    pub vars: Vec<f64>,
    /// Share of bright pixels per column strip, relative to the busiest strip.
    pub col_profile: Vec<f64>,
    /// Same per row strip.
    pub row_profile: Vec<f64>,
    /// Soft histogram of the row-band texture amplitude among bright pixels.
    pub texture: Vec<f64>,
}

impl SceneFeatures {
    fn len(&self) -> usize {
        self.means.len() + self.vars.len() + self.col_profile.len() + self.row_profile.len() + self.texture.len()
    }

    /// Head input; patch means are centered so they do not act as a second bias.
    fn flat_into(&self, out: &mut Vec<f64>) {
        out.extend(self.means.iter().map(|m| m - 0.5));
        out.extend_from_slice(&self.vars);
        out.extend_from_slice(&self.col_profile);
        out.extend_from_slice(&self.row_profile);
        out.extend_from_slice(&self.texture);
    }
}

fn patch_edges(n: usize, grid: usize) -> Vec<usize> {
    (0..=grid).map(|i| i * n / grid).collect()
}

/// Patch mean and variance summary. Images smaller than the grid reuse pixels.
pub fn featurize(scene: &Scene, grid: usize) -> SceneFeatures {
    let xs = patch_edges(scene.width, grid);
    let ys = patch_edges(scene.height, grid);
    let mut raw_means = Vec::with_capacity(grid * grid);
    let mut vars = Vec::with_capacity(grid * grid);
    for py in 0..grid {
        for px in 0..grid {
            let (x0, x1) = (xs[px], xs[px + 1].max(xs[px] + 1).min(scene.width));
            let (y0, y1) = (ys[py], ys[py + 1].max(ys[py] + 1).min(scene.height));
            let (x0, y0) = (x0.min(x1 - 1), y0.min(y1 - 1));
            // integer moments keep flat patches at exactly zero variance
            let (mut sum, mut sq) = (0u64, 0u64);
            let n = ((x1 - x0) * (y1 - y0)) as u64;
            for y in y0..y1 {
                for x in x0..x1 {
                    let v = scene.pixels[y * scene.width + x] as u64;
                    sum += v;
                    sq += v * v;
                }
            }
            let scale = 255.0 * 255.0 * (n * n) as f64;
            raw_means.push(sum as f64 / (255.0 * n as f64));
            let var = (n * sq - sum * sum) as f64 / scale;
            vars.push((var / VARIANCE_SCALE).min(1.0));
        }
    }
    let mut sorted = raw_means.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 0 {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    } else {
        sorted[mid]
    };
    let means = raw_means
        .iter()
        .map(|m| (0.5 + MEAN_GAIN * (m - median)).clamp(0.0, 1.0))
        .collect();
    let (col_profile, row_profile, texture) = bright_summary(scene, 2 * grid);
    SceneFeatures {
        grid,
        means,
        vars,
        col_profile,
        row_profile,
        texture,
    }
}

fn normalize_by_max(v: &mut [f64]) {
    let max = v.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        v.iter_mut().for_each(|x| *x /= max);
    }
}

/// Column/row profiles of bright pixels and the texture histogram.
fn bright_summary(scene: &Scene, strips: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (w, h) = (scene.width, scene.height);
    let mut sorted = scene.pixels.clone();
    sorted.sort_unstable();
    let threshold = sorted[sorted.len() / 2] as f64 + BRIGHT_MARGIN * 255.0;
    let bright = |x: usize, y: usize| scene.pixels[y * w + x] as f64 > threshold;

    let mut cols = vec![0.0; strips];
    let mut rows = vec![0.0; strips];
    let (mut diff_sum, mut pairs) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if !bright(x, y) {
                continue;
            }
            cols[x * strips / w] += 1.0;
            rows[y * strips / h] += 1.0;
            if y + TEXTURE_LAG < h && bright(x, y + TEXTURE_LAG) {
                diff_sum += (scene.luminance(x, y) - scene.luminance(x, y + TEXTURE_LAG)).abs();
                pairs += 1;
            }
        }
    }
    normalize_by_max(&mut cols);
    normalize_by_max(&mut rows);
    let mut texture = vec![0.0; TEXTURE_BINS];
    if pairs > 0 {
        // triangular soft binning of the mean absolute lag difference
        let pos = (diff_sum / pairs as f64 / TEXTURE_STEP).min((TEXTURE_BINS - 1) as f64);
        let lo = pos.floor() as usize;
        let frac = pos - lo as f64;
        texture[lo] += 1.0 - frac;
        if lo + 1 < TEXTURE_BINS {
            texture[lo + 1] += frac;
        }
    }
    (cols, rows, texture)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    N,
    S,
    E,
    W,
}

/// A discrete refocus instruction applied to the current box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RefocusAction {
    /// Zoom into quadrant 1..=4 (top-left, top-right, bottom-left, bottom-right).
    Shrink(u8),
    /// Grow about the center by [`EXPAND_FACTOR`], clamped to the image.
    Expand,
    /// Move by half the box size, clamped to the image.
    Shift(Direction),
    Stop,
}

impl RefocusAction {
    pub fn index(self) -> usize {
        match self {
            RefocusAction::Shrink(q) => (q as usize).clamp(1, 4) - 1,
            RefocusAction::Expand => 4,
            RefocusAction::Shift(Direction::N) => 5,
            RefocusAction::Shift(Direction::S) => 6,
            RefocusAction::Shift(Direction::E) => 7,
            RefocusAction::Shift(Direction::W) => 8,
            RefocusAction::Stop => 9,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Some(match i {
            0..=3 => RefocusAction::Shrink(i as u8 + 1),
            4 => RefocusAction::Expand,
            5 => RefocusAction::Shift(Direction::N),
            6 => RefocusAction::Shift(Direction::S),
            7 => RefocusAction::Shift(Direction::E),
            8 => RefocusAction::Shift(Direction::W),
            9 => RefocusAction::Stop,
            _ => return None,
        })
    }

    /// New current box after applying the action inside a `width x height` image.
    pub fn apply(self, b: &BBox, width: f64, height: f64) -> BBox {
        match self {
            RefocusAction::Shrink(q) => {
                let (hw, hh) = (b.w / 2.0, b.h / 2.0);
                let (dx, dy) = match q {
                    1 => (0.0, 0.0),
                    2 => (hw, 0.0),
                    3 => (0.0, hh),
                    _ => (hw, hh),
                };
                BBox {
                    x: b.x + dx,
                    y: b.y + dy,
                    w: hw,
                    h: hh,
                }
            }
            RefocusAction::Expand => {
                let w = (b.w * EXPAND_FACTOR).min(width);
                let h = (b.h * EXPAND_FACTOR).min(height);
                let (cx, cy) = b.center();
                BBox {
                    x: (cx - w / 2.0).clamp(0.0, width - w),
                    y: (cy - h / 2.0).clamp(0.0, height - h),
                    w,
                    h,
                }
            }
            RefocusAction::Shift(d) => {
                let (dx, dy) = match d {
                    Direction::N => (0.0, -b.h / 2.0),
                    Direction::S => (0.0, b.h / 2.0),
                    Direction::E => (b.w / 2.0, 0.0),
                    Direction::W => (-b.w / 2.0, 0.0),
                };
                BBox {
                    x: (b.x + dx).clamp(0.0, (width - b.w).max(0.0)),
                    y: (b.y + dy).clamp(0.0, (height - b.h).max(0.0)),
                    ..*b
                }
            }
            RefocusAction::Stop => *b,
        }
    }

    fn step_label(self) -> StepLabel {
        match self {
            RefocusAction::Shrink(_) => StepLabel::Focus,
            RefocusAction::Expand => StepLabel::Backtracing,
            RefocusAction::Shift(_) | RefocusAction::Stop => StepLabel::Rethink,
        }
    }

    fn narration(self) -> &'static str {
        match self {
            RefocusAction::Shrink(1) => "zoom into the top-left quadrant",
            RefocusAction::Shrink(2) => "zoom into the top-right quadrant",
            RefocusAction::Shrink(3) => "zoom into the bottom-left quadrant",
            RefocusAction::Shrink(_) => "zoom into the bottom-right quadrant",
            RefocusAction::Expand => "widen the view around the current region",
            RefocusAction::Shift(Direction::N) => "shift the region up",
            RefocusAction::Shift(Direction::S) => "shift the region down",
            RefocusAction::Shift(Direction::E) => "shift the region right",
            RefocusAction::Shift(Direction::W) => "shift the region left",
            RefocusAction::Stop => "stop",
        }
    }
}

/// Policy state `(x, q, h_t)`: scene features, prompt template and visited boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct RefocusState {
    pub features: SceneFeatures,
    pub width: f64,
    pub height: f64,
    /// Only one prompt template exists; kept for parity with the state definition.
    pub question_id: usize,
    pub history: Vec<BBox>,
}

impl RefocusState {
    pub fn initial(scene: &Scene, cfg: &PolicyConfig) -> Self {
        RefocusState {
            features: featurize(scene, cfg.patch_grid),
            width: scene.width as f64,
            height: scene.height as f64,
            question_id: 0,
            history: Vec::new(),
        }
    }

    fn frame(&self) -> BBox {
        BBox {
            x: 0.0,
            y: 0.0,
            w: self.width,
            h: self.height,
        }
    }

    fn current_box(&self) -> BBox {
        self.history.last().copied().unwrap_or_else(|| self.frame())
    }
}

/// One linear head: `logits = W · input`, `W` row-major `rows x cols`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
}

impl Head {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Head {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
        }
    }

    pub fn logits(&self, input: &[f64]) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.cols);
        self.weights
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(input).map(|(w, x)| w * x).sum())
            .collect()
    }

    /// `W += scale · coeff ⊗ input`.
    fn add_outer(&mut self, coeff: &[f64], input: &[f64], scale: f64) {
        for (row, &c) in self.weights.chunks_exact_mut(self.cols).zip(coeff) {
            let s = scale * c;
            if s == 0.0 {
                continue;
            }
            for (w, x) in row.iter_mut().zip(input) {
                *w += s * x;
            }
        }
    }
}

/// All policy weights plus the sampling temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    pub temperature: f64,
    pub presence: Head,
    pub category: Head,
    /// x, y, w, h bin heads.
    pub bbox: [Head; 4],
    pub refocus: Head,
}

impl PolicyParams {
    pub fn zeros(config: PolicyConfig) -> Self {
        let s = config.scene_input_dim();
        let b = config.bbox_input_dim();
        PolicyParams {
            config,
            temperature: 1.0,
            presence: Head::zeros(2, s),
            category: Head::zeros(5, s),
            bbox: std::array::from_fn(|_| Head::zeros(config.bins, b)),
            refocus: Head::zeros(NUM_ACTIONS, config.refocus_input_dim()),
        }
    }

    /// Weights drawn uniformly from `[-scale, scale]`.
    pub fn random(config: PolicyConfig, seed: u64, scale: f64) -> Self {
        let mut p = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for h in p.heads_mut() {
            for w in &mut h.weights {
                *w = rng.gen_range(-scale..=scale);
            }
        }
        p
    }

    pub fn heads(&self) -> [&Head; 7] {
        [
            &self.presence,
            &self.category,
            &self.bbox[0],
            &self.bbox[1],
            &self.bbox[2],
            &self.bbox[3],
            &self.refocus,
        ]
    }

    pub fn heads_mut(&mut self) -> [&mut Head; 7] {
        let [bx, by, bw, bh] = &mut self.bbox;
        [
            &mut self.presence,
            &mut self.category,
            bx,
            by,
            bw,
            bh,
            &mut self.refocus,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.heads().iter().map(|h| h.weights.len()).sum()
    }

    /// Flattened weight by global index (head order as in [`PolicyParams::heads`]).
    pub fn get(&self, mut i: usize) -> f64 {
        for h in self.heads() {
            if i < h.weights.len() {
                return h.weights[i];
            }
            i -= h.weights.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set(&mut self, mut i: usize, v: f64) {
        for h in self.heads_mut() {
            if i < h.weights.len() {
                h.weights[i] = v;
                return;
            }
            i -= h.weights.len();
        }
        panic!("parameter index out of range")
    }

    /// `self += alpha · other` over every weight.
    pub fn axpy(&mut self, alpha: f64, other: &PolicyParams) {
        for (a, b) in self.heads_mut().into_iter().zip(other.heads()) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for h in self.heads_mut() {
            h.weights.iter_mut().for_each(|w| *w *= alpha);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.heads()
            .iter()
            .all(|h| h.weights.iter().all(|w| w.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.heads()
            .iter()
            .flat_map(|h| h.weights.iter())
            .fold(0.0, |m, w| m.max(w.abs()))
    }

    /// Zero-valued parameters with the same shape (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let mut z = PolicyParams::zeros(self.config);
        z.temperature = self.temperature;
        z
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expect = PolicyParams::zeros(self.config);
        for (name, (h, e)) in ["presence", "category", "bbox_x", "bbox_y", "bbox_w", "bbox_h", "refocus"]
            .iter()
            .zip(self.heads().into_iter().zip(expect.heads()))
        {
            if h.rows != e.rows || h.cols != e.cols || h.weights.len() != e.weights.len() {
                return Err(Error::InvalidInput(format!(
                    "head {name}: shape {}x{} ({} weights), expected {}x{}",
                    h.rows,
                    h.cols,
                    h.weights.len(),
                    e.rows,
                    e.cols
                )));
            }
        }
        if !self.is_finite() {
            return Err(Error::InvalidInput("non-finite parameter".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "temperature must be finite and >= 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            params: self.clone(),
        };
        let text = serde_json::to_string(&ck).expect("checkpoint serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::schema(path, e.line(), e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::schema(
                path,
                1,
                format!("unsupported checkpoint {} v{}", ck.format, ck.version),
            ));
        }
        ck.params
            .validate()
            .map_err(|e| Error::schema(path, 1, e.to_string()))?;
        Ok(ck.params)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    params: PolicyParams,
}

/// Every sampled choice of one rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutChoices {
    /// Refocus actions in order; ends with `Stop` unless `t_max` was reached.
    pub refocus: Vec<RefocusAction>,
    pub presence: Presence,
    pub category: Category,
    /// Bin indices for x, y, w, h.
    pub bins: [usize; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub choices: RolloutChoices,
    pub logp: f64,
    pub transcript: Transcript,
    /// The distribution each choice was drawn from, in choice order.
    pub per_step_dists: Vec<Vec<f64>>,
}

/// Tempered softmax; `temperature == 0` gives the one-hot argmax (lowest index on ties).
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 0.0 {
        let best = argmax(logits);
        return (0..logits.len()).map(|i| if i == best { 1.0 } else { 0.0 }).collect();
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| ((z - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax_at(logits: &[f64], temperature: f64, k: usize) -> f64 {
    if temperature == 0.0 {
        return if argmax(logits) == k { 0.0 } else { f64::NEG_INFINITY };
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits
        .iter()
        .map(|z| ((z - max) / temperature).exp())
        .sum::<f64>()
        .ln();
    (logits[k] - max) / temperature - lse
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding: fall back to the last index with mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn box_encoding(b: &BBox, width: f64, height: f64) -> [f64; 4] {
    [b.x / width, b.y / height, b.w / width, b.h / height]
}

fn scene_input(state: &RefocusState) -> Vec<f64> {
    let mut v = Vec::with_capacity(state.features.len() + 1);
    state.features.flat_into(&mut v);
    v.push(1.0);
    v
}

fn bbox_input(state: &RefocusState, final_box: &BBox) -> Vec<f64> {
    let mut v = Vec::with_capacity(state.features.len() + 5);
    state.features.flat_into(&mut v);
    v.extend_from_slice(&box_encoding(final_box, state.width, state.height));
    v.push(1.0);
    v
}

/// Mean centered patch-mean and mean patch-variance over patches whose centers fall in `b`.
fn region_stats(f: &SceneFeatures, b: &BBox, width: f64, height: f64) -> (f64, f64) {
    let g = f.grid;
    let (mut m, mut v, mut n) = (0.0, 0.0, 0usize);
    for py in 0..g {
        let cy = (py as f64 + 0.5) * height / g as f64;
        if cy < b.y || cy >= b.bottom() {
            continue;
        }
        for px in 0..g {
            let cx = (px as f64 + 0.5) * width / g as f64;
            if cx < b.x || cx >= b.right() {
                continue;
            }
            m += f.means[py * g + px] - 0.5;
            v += f.vars[py * g + px];
            n += 1;
        }
    }
    if n == 0 {
        (0.0, 0.0)
    } else {
        (m / n as f64, v / n as f64)
    }
}

fn refocus_input(state: &RefocusState, current: &BBox, step: usize, t_max: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(state.features.len() + 14);
    state.features.flat_into(&mut v);
    v.extend_from_slice(&box_encoding(current, state.width, state.height));
    let mut vars = [0.0; 4];
    for q in 1..=4u8 {
        let quad = RefocusAction::Shrink(q).apply(current, state.width, state.height);
        let (m, var) = region_stats(&state.features, &quad, state.width, state.height);
        v.push(m);
        vars[q as usize - 1] = var;
    }
    v.extend_from_slice(&vars);
    v.push(step as f64 / t_max.max(1) as f64);
    v.push(1.0);
    v
}

/// Which head a choice was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum HeadId {
    Presence,
    Category,
    Bbox(usize),
    Refocus,
}

/// Replays a rollout, yielding `(head, input, chosen index)` per choice.
fn replay(
    params: &PolicyParams,
    choices: &RolloutChoices,
    state0: &RefocusState,
) -> Result<Vec<(HeadId, Vec<f64>, usize)>> {
    let cfg = &params.config;
    if choices.refocus.len() > cfg.t_max {
        return Err(Error::InvalidInput(format!(
            "{} refocus actions exceed t_max {}",
            choices.refocus.len(),
            cfg.t_max
        )));
    }
    if let Some(pos) = choices.refocus.iter().position(|a| *a == RefocusAction::Stop) {
        if pos + 1 != choices.refocus.len() {
            return Err(Error::InvalidInput("action after stop".into()));
        }
    } else if choices.refocus.len() != cfg.t_max {
        return Err(Error::InvalidInput(
            "rollout neither stops nor reaches t_max".into(),
        ));
    }
    if choices.bins.iter().any(|&b| b >= cfg.bins) {
        return Err(Error::InvalidInput(format!(
            "bin index outside 0..{}",
            cfg.bins
        )));
    }
    for a in &choices.refocus {
        if let RefocusAction::Shrink(q) = a {
            if !(1..=4).contains(q) {
                return Err(Error::InvalidInput(format!("quadrant {q} outside 1..=4")));
            }
        }
    }
    let mut out = Vec::with_capacity(choices.refocus.len() + 6);
    let mut current = state0.current_box();
    for (t, a) in choices.refocus.iter().enumerate() {
        out.push((HeadId::Refocus, refocus_input(state0, &current, t, cfg.t_max), a.index()));
        current = a.apply(&current, state0.width, state0.height);
    }
    let s = scene_input(state0);
    out.push((HeadId::Presence, s.clone(), usize::from(choices.presence == Presence::Yes)));
    out.push((HeadId::Category, s, choices.category.index()));
    let b = bbox_input(state0, &current);
    for (axis, &bin) in choices.bins.iter().enumerate() {
        out.push((HeadId::Bbox(axis), b.clone(), bin));
    }
    Ok(out)
}

fn head(params: &PolicyParams, id: HeadId) -> &Head {
    match id {
        HeadId::Presence => &params.presence,
        HeadId::Category => &params.category,
        HeadId::Bbox(a) => &params.bbox[a],
        HeadId::Refocus => &params.refocus,
    }
}

fn head_mut(params: &mut PolicyParams, id: HeadId) -> &mut Head {
    match id {
        HeadId::Presence => &mut params.presence,
        HeadId::Category => &mut params.category,
        HeadId::Bbox(a) => &mut params.bbox[a],
        HeadId::Refocus => &mut params.refocus,
    }
}

/// Samples one rollout at `params.temperature` (0 means greedy argmax decoding).
pub fn sample_rollout(params: &PolicyParams, state0: &RefocusState, rng: &mut impl Rng) -> Rollout {
    let cfg = params.config;
    let t = params.temperature;
    let mut logp = 0.0;
    let mut dists = Vec::new();
    let mut draw = |h: &Head, input: &[f64], rng: &mut dyn rand::RngCore| {
        let logits = h.logits(input);
        let probs = softmax(&logits, t);
        let k = if t == 0.0 {
            argmax(&logits)
        } else {
            sample_index(&probs, &mut RngRef(rng))
        };
        logp += log_softmax_at(&logits, t, k);
        dists.push(probs);
        k
    };
    let rng: &mut dyn rand::RngCore = &mut RngRef(rng);

    let mut refocus = Vec::new();
    let mut current = state0.current_box();
    for step in 0..cfg.t_max {
        let input = refocus_input(state0, &current, step, cfg.t_max);
        let a = RefocusAction::from_index(draw(&params.refocus, &input, rng)).expect("action index");
        refocus.push(a);
        if a == RefocusAction::Stop {
            break;
        }
        current = a.apply(&current, state0.width, state0.height);
    }
    let s = scene_input(state0);
    let presence = if draw(&params.presence, &s, rng) == 1 {
        Presence::Yes
    } else {
        Presence::No
    };
    let category = Category::from_index(draw(&params.category, &s, rng)).expect("category index");
    let b = bbox_input(state0, &current);
    let bins = std::array::from_fn(|axis| draw(&params.bbox[axis], &b, rng));
    let choices = RolloutChoices {
        refocus,
        presence,
        category,
        bins,
    };
    let transcript = decode_rollout(&choices, cfg.bins, state0.width, state0.height);
    Rollout {
        choices,
        logp,
        transcript,
        per_step_dists: dists,
    }
}

/// Adapter so generic and dynamic rngs can share the sampling closure.
struct RngRef<'a, R: ?Sized>(&'a mut R);

impl<R: rand::RngCore + ?Sized> rand::RngCore for RngRef<'_, R> {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.0.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.0.try_fill_bytes(dest)
    }
}

/// Seeded convenience wrapper around [`sample_rollout`].
pub fn sample_rollout_seeded(params: &PolicyParams, state0: &RefocusState, seed: u64) -> Rollout {
    sample_rollout(params, state0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Log-probability of `choices` under `params`.
pub fn rollout_logp(params: &PolicyParams, choices: &RolloutChoices, state0: &RefocusState) -> Result<f64> {
    let t = params.temperature;
    let mut total = 0.0;
    for (id, input, k) in replay(params, choices, state0)? {
        total += log_softmax_at(&head(params, id).logits(&input), t, k);
    }
    if total == f64::NEG_INFINITY {
        return Err(Error::InvalidInput(
            "choice has zero probability under greedy decoding".into(),
        ));
    }
    Ok(total)
}

/// Distributions of every visited choice point under `params`, in choice order.
pub fn step_distributions(
    params: &PolicyParams,
    choices: &RolloutChoices,
    state0: &RefocusState,
) -> Result<Vec<Vec<f64>>> {
    Ok(replay(params, choices, state0)?
        .into_iter()
        .map(|(id, input, _)| softmax(&head(params, id).logits(&input), params.temperature))
        .collect())
}

fn require_positive_temperature(params: &PolicyParams) -> Result<f64> {
    let t = params.temperature;
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "gradients need a positive temperature, got {t}"
        )));
    }
    Ok(t)
}

/// `∇θ log π(choices)`: per choice, `(onehot - p) / T ⊗ input`.
pub fn logp_grad(params: &PolicyParams, choices: &RolloutChoices, state0: &RefocusState) -> Result<PolicyParams> {
    let mut grad = params.zeros_like();
    accumulate_logp_grad(params, choices, state0, 1.0, &mut grad)?;
    Ok(grad)
}

/// `grad += scale · ∇θ log π(choices)`.
pub fn accumulate_logp_grad(
    params: &PolicyParams,
    choices: &RolloutChoices,
    state0: &RefocusState,
    scale: f64,
    grad: &mut PolicyParams,
) -> Result<()> {
    let t = require_positive_temperature(params)?;
    for (id, input, k) in replay(params, choices, state0)? {
        let mut coeff = softmax(&head(params, id).logits(&input), t);
        coeff.iter_mut().for_each(|p| *p = -*p / t);
        coeff[k] += 1.0 / t;
        head_mut(grad, id).add_outer(&coeff, &input, scale);
    }
    Ok(())
}

/// Exact summed KL between `params` and `reference` over the rollout's visited
/// choice points, and `grad += scale · ∇θ KL`.
pub fn accumulate_kl_grad(
    params: &PolicyParams,
    reference: &PolicyParams,
    choices: &RolloutChoices,
    state0: &RefocusState,
    scale: f64,
    grad: &mut PolicyParams,
) -> Result<f64> {
    let t = require_positive_temperature(params)?;
    let mut total = 0.0;
    for (id, input, _) in replay(params, choices, state0)? {
        let p = softmax(&head(params, id).logits(&input), t);
        let q = softmax(&head(reference, id).logits(&input), reference.temperature);
        let log_ratio: Vec<f64> = p
            .iter()
            .zip(&q)
            .map(|(&pk, &qk)| if pk > 0.0 { (pk / qk).ln() } else { 0.0 })
            .collect();
        let kl: f64 = p.iter().zip(&log_ratio).map(|(pk, lr)| pk * lr).sum();
        total += kl;
        let coeff: Vec<f64> = p
            .iter()
            .zip(&log_ratio)
            .map(|(pk, lr)| pk * (lr - kl) / t)
            .collect();
        head_mut(grad, id).add_outer(&coeff, &input, scale);
    }
    Ok(total)
}

/// Turns choices into a transcript: an Overview step on the full image, one step per
/// refocus action with the box it leads to, then the binned answer box.
pub fn decode_rollout(choices: &RolloutChoices, bins: usize, width: f64, height: f64) -> Transcript {
    let frame = BBox {
        x: 0.0,
        y: 0.0,
        w: width,
        h: height,
    };
    let mut explore = vec![RefocusStep {
        label: Some(StepLabel::Overview),
        bbox: Some(frame),
        narration: "scan the whole image".into(),
    }];
    let mut current = frame;
    for a in &choices.refocus {
        if *a == RefocusAction::Stop {
            break;
        }
        current = a.apply(&current, width, height);
        explore.push(RefocusStep {
            label: Some(a.step_label()),
            bbox: Some(current),
            narration: a.narration().into(),
        });
    }
    let center = |k: usize, extent: f64| (k as f64 + 0.5) * extent / bins as f64;
    let [bx, by, bw, bh] = choices.bins;
    Transcript {
        explore,
        bbox: Some(BBox {
            x: center(bx, width),
            y: center(by, height),
            w: center(bw, width),
            h: center(bh, height),
        }),
        category: Some(choices.category),
        answer: Some(choices.presence),
    }
}
