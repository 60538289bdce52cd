//! Seeded synthetic camouflage scenes.
//!
//! A scene is a mid-gray textured background that may hide one rectangular
//! target. The target is offset in luminance by a contrast `c` and carries a
//! stripe pattern whose amplitude encodes its category. Hard scenes use small
//! contrast, weak stripes and stronger noise.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{mask_to_bbox, BBox, Mask};
use crate::rewards::GroundTruth;
use crate::transcript::Category;

pub const DATASET_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "scenes.jsonl";

/// Contrast separating the tiers: hard scenes stay strictly below it.
pub const TIER_CONTRAST_THRESHOLD: f64 = 0.15;

/// Fraction of positives in the reference training corpus (9,083 of 14,017).
pub const DEFAULT_P_POS: f64 = 9083.0 / 14017.0;

/// Stripe amplitude per category, indexed like [`Category::ALL`].
const STRIPE_AMPLITUDE: [f64; 5] = [0.06, 0.12, 0.18, 0.24, 0.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Easy,
    Hard,
}

impl std::str::FromStr for Tier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Tier::Easy),
            "hard" => Ok(Tier::Hard),
            _ => Err(Error::InvalidInput(format!("unknown tier {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Flat,
    Blotches,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub tier: Tier,
    pub texture: Texture,
    /// Peak amplitude of the background blotches.
    pub texture_amplitude: f64,
    /// Half-width of the uniform per-pixel noise.
    pub noise: f64,
    /// Target side length as a fraction of the image side, `[min, max]`.
    pub target_size: (f64, f64),
    /// Mean luminance offset of the target, `[min, max]`.
    pub contrast: (f64, f64),
    /// Multiplier on the per-category stripe amplitude.
    pub pattern_scale: f64,
    pub p_pos: f64,
}

impl SceneSpec {
    pub fn easy(size: usize) -> Self {
        SceneSpec {
            width: size,
            height: size,
            tier: Tier::Easy,
            texture: Texture::Blotches,
            texture_amplitude: 0.06,
            noise: 0.03,
            target_size: (0.2, 0.45),
            contrast: (0.2, 0.3),
            pattern_scale: 1.0,
            p_pos: DEFAULT_P_POS,
        }
    }

    pub fn hard(size: usize) -> Self {
        SceneSpec {
            tier: Tier::Hard,
            noise: 0.08,
            contrast: (0.03, 0.10),
            pattern_scale: 0.3,
            ..SceneSpec::easy(size)
        }
    }

    pub fn for_tier(tier: Tier, size: usize) -> Self {
        match tier {
            Tier::Easy => Self::easy(size),
            Tier::Hard => Self::hard(size),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene spec: {m}")));
        if self.width < 4 || self.height < 4 {
            return bad("image must be at least 4x4");
        }
        let (s0, s1) = self.target_size;
        if !(s0 > 0.0 && s0 <= s1 && s1 < 1.0) {
            return bad("target size fractions must satisfy 0 < min <= max < 1");
        }
        let (c0, c1) = self.contrast;
        if !(0.0 <= c0 && c0 <= c1 && c1 <= 1.0) {
            return bad("contrast must satisfy 0 <= min <= max <= 1");
        }
        if self.tier == Tier::Hard && c1 >= TIER_CONTRAST_THRESHOLD {
            return bad("hard tier contrast must stay below the tier threshold");
        }
        if !(0.0..=1.0).contains(&self.p_pos) {
            return bad("p_pos must lie in [0, 1]");
        }
        if self.noise < 0.0 || self.texture_amplitude < 0.0 || self.pattern_scale < 0.0 {
            return bad("noise, texture and pattern amplitudes must be >= 0");
        }
        Ok(())
    }
}

/// A quantized grayscale scene with ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub width: usize,
    pub height: usize,
    /// Row-major 8-bit luminance.
    pub pixels: Vec<u8>,
    pub gt: GroundTruth,
    pub tier: Tier,
    pub seed: u64,
    /// Contrast the target was drawn with (0 for negatives).
    pub contrast: f64,
}

impl Scene {
    /// Luminance in `[0, 1]` at column `x`, row `y`.
    pub fn luminance(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x] as f64 / 255.0
    }

    /// The full-image box.
    pub fn frame(&self) -> BBox {
        BBox {
            x: 0.0,
            y: 0.0,
            w: self.width as f64,
            h: self.height as f64,
        }
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

struct Blotch {
    cx: f64,
    cy: f64,
    radius: f64,
    amplitude: f64,
}

struct Placement {
    bbox: BBox,
    category: Category,
    contrast: f64,
}

fn draw_scene(spec: &SceneSpec, seed: u64) -> (Vec<u8>, Option<Placement>) {
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let present = rng.gen_bool(spec.p_pos);
    let blotches: Vec<Blotch> = match spec.texture {
        Texture::Flat => Vec::new(),
        Texture::Blotches => (0..4)
            .map(|_| Blotch {
                cx: rng.gen_range(0.0..w as f64),
                cy: rng.gen_range(0.0..h as f64),
                radius: rng.gen_range(0.1..0.3) * w.min(h) as f64,
                amplitude: rng.gen_range(-1.0..1.0) * spec.texture_amplitude,
            })
            .collect(),
    };
    let placement = present.then(|| {
        let category = Category::ALL[rng.gen_range(0..5)];
        let side = |rng: &mut ChaCha8Rng, n: usize| {
            let f = rng.gen_range(spec.target_size.0..=spec.target_size.1);
            ((f * n as f64).round() as usize).clamp(2, n)
        };
        let tw = side(&mut rng, w);
        let th = side(&mut rng, h);
        let tx = rng.gen_range(0..=w - tw);
        let ty = rng.gen_range(0..=h - th);
        let contrast = rng.gen_range(spec.contrast.0..=spec.contrast.1);
        Placement {
            bbox: BBox {
                x: tx as f64,
                y: ty as f64,
                w: tw as f64,
                h: th as f64,
            },
            category,
            contrast,
        }
    });
    let stripe = placement
        .as_ref()
        .map_or(0.0, |p| STRIPE_AMPLITUDE[p.category.index()] * spec.pattern_scale);
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let mut v = 0.5;
            for b in &blotches {
                let d2 = (x as f64 + 0.5 - b.cx).powi(2) + (y as f64 + 0.5 - b.cy).powi(2);
                v += b.amplitude * (-d2 / (2.0 * b.radius * b.radius)).exp();
            }
            if spec.noise > 0.0 {
                v += rng.gen_range(-1.0..=1.0) * spec.noise;
            }
            if let Some(p) = &placement {
                let (fx, fy) = (x as f64, y as f64);
                if fx >= p.bbox.x && fx < p.bbox.right() && fy >= p.bbox.y && fy < p.bbox.bottom() {
                    let band = ((fy - p.bbox.y) as usize / 2).is_multiple_of(2);
                    v += p.contrast + if band { stripe / 2.0 } else { -stripe / 2.0 };
                }
            }
            pixels.push(quantize(v));
        }
    }
    (pixels, placement)
}

/// Deterministic in `(spec, seed)`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    Ok(scene_from_draw(spec, seed, format!("seed-{seed}")))
}

fn scene_from_draw(spec: &SceneSpec, seed: u64, id: String) -> Scene {
    let (pixels, placement) = draw_scene(spec, seed);
    let (gt, contrast) = match placement {
        Some(p) => (
            GroundTruth {
                present: true,
                category: Some(p.category),
                boxes: vec![p.bbox],
            },
            p.contrast,
        ),
        None => (GroundTruth::negative(), 0.0),
    };
    Scene {
        id,
        width: spec.width,
        height: spec.height,
        pixels,
        gt,
        tier: spec.tier,
        seed,
        contrast,
    }
}

/// The generator's own target mask for a scene (empty for negatives).
pub fn target_mask(scene: &Scene) -> Mask {
    let mut m = Mask::empty(scene.width, scene.height);
    for b in &scene.gt.boxes {
        for r in b.y as usize..b.bottom() as usize {
            for c in b.x as usize..b.right() as usize {
                m.set(r, c, true);
            }
        }
    }
    m
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub total: usize,
    pub positives: usize,
    pub negatives: usize,
    pub easy: usize,
    pub hard: usize,
}

impl DatasetCounts {
    fn tally(scenes: &[Scene]) -> Self {
        let mut c = DatasetCounts {
            total: scenes.len(),
            ..Default::default()
        };
        for s in scenes {
            if s.gt.present {
                c.positives += 1;
            } else {
                c.negatives += 1;
            }
            match s.tier {
                Tier::Easy => c.easy += 1,
                Tier::Hard => c.hard += 1,
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub spec: Option<SceneSpec>,
    pub records: String,
    pub counts: DatasetCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SceneRecord {
    id: String,
    tier: Tier,
    present: bool,
    category: Option<Category>,
    boxes: Vec<[f64; 4]>,
    image: String,
    seed: u64,
    contrast: f64,
}

fn image_name(id: &str) -> String {
    format!("images/{id}.pgm")
}

fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(pixels, width as u32, height as u32, ExtendedColorType::L8)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    out.flush().map_err(|e| Error::io(path, e))
}

fn read_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path)
        .map_err(|e| Error::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, e)))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw()))
}

/// Writes `n` scenes (seeds `seed..seed+n`) under `dir` and returns the manifest.
pub fn generate_dataset(spec: &SceneSpec, n: usize, seed: u64, dir: &Path) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::InvalidInput("dataset size must be >= 1".into()));
    }
    spec.validate()?;
    let scenes: Vec<Scene> = (0..n)
        .into_par_iter()
        .map(|i| scene_from_draw(spec, seed + i as u64, format!("{i:06}")))
        .collect();
    write_dataset(&scenes, Some(spec.clone()), seed, dir)
}

/// Persists scenes in the dataset layout.
pub fn write_dataset(scenes: &[Scene], spec: Option<SceneSpec>, seed: u64, dir: &Path) -> Result<DatasetManifest> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let records_path = dir.join(RECORDS_FILE);
    let file = File::create(&records_path).map_err(|e| Error::io(&records_path, e))?;
    let mut out = BufWriter::new(file);
    for s in scenes {
        let image = image_name(&s.id);
        write_pgm(&dir.join(&image), s.width, s.height, &s.pixels)?;
        let rec = SceneRecord {
            id: s.id.clone(),
            tier: s.tier,
            present: s.gt.present,
            category: s.gt.category,
            boxes: s.gt.boxes.iter().map(|b| b.to_array()).collect(),
            image,
            seed: s.seed,
            contrast: s.contrast,
        };
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(&records_path, e))?;
    }
    out.flush().map_err(|e| Error::io(&records_path, e))?;
    let manifest = DatasetManifest {
        schema_version: DATASET_SCHEMA_VERSION,
        seed,
        spec,
        records: RECORDS_FILE.into(),
        counts: DatasetCounts::tally(scenes),
    };
    let mpath = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

/// Resolves a dataset directory or a manifest path to `(dir, manifest path)`.
fn resolve(path: &Path) -> (PathBuf, PathBuf) {
    if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        (dir, path.to_path_buf())
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let (_, mpath) = resolve(path);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::schema(&mpath, e.line(), e.to_string()))?;
    if manifest.schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::schema(
            &mpath,
            1,
            format!(
                "schema version {} is not supported (expected {})",
                manifest.schema_version, DATASET_SCHEMA_VERSION
            ),
        ));
    }
    Ok(manifest)
}

/// Loads every scene of a dataset written by [`generate_dataset`].
pub fn load_dataset(path: &Path) -> Result<Vec<Scene>> {
    let (dir, _) = resolve(path);
    let manifest = load_manifest(path)?;
    let rpath = dir.join(&manifest.records);
    let file = File::open(&rpath).map_err(|e| Error::io(&rpath, e))?;
    let mut scenes = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(&rpath, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SceneRecord = serde_json::from_str(&line)
            .map_err(|e| Error::schema(&rpath, lineno, format!("corrupted record: {e}")))?;
        let boxes = rec
            .boxes
            .iter()
            .map(|b| BBox::new(b[0], b[1], b[2], b[3]))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::schema(&rpath, lineno, e.to_string()))?;
        let gt = GroundTruth {
            present: rec.present,
            category: rec.category,
            boxes,
        };
        gt.validate()
            .map_err(|e| Error::schema(&rpath, lineno, e.to_string()))?;
        let (width, height, pixels) = read_gray(&dir.join(&rec.image))?;
        scenes.push(Scene {
            id: rec.id,
            width,
            height,
            pixels,
            gt,
            tier: rec.tier,
            seed: rec.seed,
            contrast: rec.contrast,
        });
    }
    if scenes.len() != manifest.counts.total {
        return Err(Error::schema(
            &rpath,
            scenes.len() + 1,
            format!(
                "manifest lists {} records but the file holds {}",
                manifest.counts.total,
                scenes.len()
            ),
        ));
    }
    Ok(scenes)
}

/// Builds a scene from a real image plus segmentation mask.
///
/// The mask may be a grayscale image (any value above zero is set) or a
/// `.json`/`.jsonl` run-length record. An empty mask yields a negative scene.
pub fn scene_from_files(
    id: &str,
    image: &Path,
    mask: &Path,
    category: Option<Category>,
    tier: Tier,
) -> Result<Scene> {
    let (width, height, pixels) = read_gray(image)?;
    let is_json = matches!(
        mask.extension().and_then(|e| e.to_str()),
        Some("json" | "jsonl")
    );
    let m = if is_json {
        let text = fs::read_to_string(mask).map_err(|e| Error::io(mask, e))?;
        let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
        Mask::from_rle_json(first).map_err(|e| Error::schema(mask, 1, e.to_string()))?
    } else {
        Mask::from_image(mask)?
    };
    if m.width() != width || m.height() != height {
        return Err(Error::InvalidInput(format!(
            "mask is {}x{} but image is {width}x{height}",
            m.width(),
            m.height()
        )));
    }
    let gt = match mask_to_bbox(&m) {
        Some(b) => GroundTruth::positive(category.unwrap_or(Category::Other), vec![b])?,
        None => GroundTruth::negative(),
    };
    Ok(Scene {
        id: id.to_string(),
        width,
        height,
        pixels,
        gt,
        tier,
        seed: 0,
        contrast: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec::easy(64);
        assert_eq!(generate_scene(&spec, 11).unwrap(), generate_scene(&spec, 11).unwrap());
        assert_ne!(
            generate_scene(&spec, 11).unwrap().pixels,
            generate_scene(&spec, 12).unwrap().pixels
        );
    }

    #[test]
    fn full_contrast_target_on_mid_gray() {
        let spec = SceneSpec {
            texture: Texture::Flat,
            noise: 0.0,
            contrast: (1.0, 1.0),
            pattern_scale: 0.0,
            p_pos: 1.0,
            ..SceneSpec::easy(64)
        };
        let s = generate_scene(&spec, 3).unwrap();
        let b = s.gt.boxes[0];
        let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0, 0.0, 0);
        for y in 0..s.height {
            for x in 0..s.width {
                let v = s.luminance(x, y);
                let (fx, fy) = (x as f64, y as f64);
                if fx >= b.x && fx < b.right() && fy >= b.y && fy < b.bottom() {
                    inside += v;
                    n_in += 1;
                } else {
                    outside += v;
                    n_out += 1;
                }
            }
        }
        let diff = inside / n_in as f64 - outside / n_out as f64;
        assert!((diff - 0.5).abs() < 0.01, "diff {diff}");
    }

    #[test]
    fn no_positives_when_p_pos_zero() {
        let spec = SceneSpec {
            p_pos: 0.0,
            ..SceneSpec::easy(32)
        };
        for seed in 0..50 {
            assert!(!generate_scene(&spec, seed).unwrap().gt.present);
        }
    }

    #[test]
    fn truth_matches_generator_mask() {
        for tier in [Tier::Easy, Tier::Hard] {
            let spec = SceneSpec::for_tier(tier, 48);
            for seed in 0..40 {
                let s = generate_scene(&spec, seed).unwrap();
                if s.gt.present {
                    let derived = mask_to_bbox(&target_mask(&s)).unwrap();
                    assert_eq!(iou(&derived, &s.gt.boxes[0]), 1.0);
                    assert!(s.gt.boxes[0].right() <= 48.0 && s.gt.boxes[0].bottom() <= 48.0);
                }
            }
        }
    }

    #[test]
    fn hard_scenes_have_lower_contrast() {
        let mean = |tier| {
            let spec = SceneSpec::for_tier(tier, 32);
            let cs: Vec<f64> = (0..60)
                .map(|s| generate_scene(&spec, s).unwrap())
                .filter(|s| s.gt.present)
                .map(|s| s.contrast)
                .collect();
            assert!(cs.iter().all(|&c| match tier {
                Tier::Hard => c < TIER_CONTRAST_THRESHOLD,
                Tier::Easy => c >= TIER_CONTRAST_THRESHOLD,
            }));
            cs.iter().sum::<f64>() / cs.len() as f64
        };
        assert!(mean(Tier::Hard) < mean(Tier::Easy));
    }

    #[test]
    fn spec_validation() {
        let mut s = SceneSpec::hard(32);
        s.contrast = (0.1, 0.3);
        assert!(s.validate().is_err());
        let mut s = SceneSpec::easy(32);
        s.p_pos = 1.5;
        assert!(s.validate().is_err());
        let mut s = SceneSpec::easy(32);
        s.target_size = (0.0, 0.5);
        assert!(s.validate().is_err());
    }

    #[test]
    fn default_ratio_matches_corpus() {
        assert!((DEFAULT_P_POS - 0.648).abs() < 0.001);
    }
}
