//! Synthetic moving-glyph video clips. Eight classes are defined purely by
//! motion (translation in four directions, growth, shrinkage, rotation in two
//! directions) so that appearance alone cannot solve the task. Each clip
//! records the set of tokens its glyph overlaps, which serves as the
//! ground-truth discriminative token set for oracle sanity checks.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const CLASS_NAMES: [&str; 8] = [
    "translate-left",
    "translate-right",
    "translate-up",
    "translate-down",
    "grow",
    "shrink",
    "rotate-cw",
    "rotate-ccw",
];

pub const NUM_CLASSES: usize = CLASS_NAMES.len();

const TRANSLATE_SPEED: f64 = 1.6; // pixels per frame
const ROTATE_SPEED: f64 = 0.22; // radians per frame
const GROW_MIN: f64 = 0.65;
const GROW_MAX: f64 = 1.4;
const BACKGROUND: f64 = 0.12;
const DISTRACTOR_VALUE: f32 = 0.45;
const DISTRACTOR_SIZE: usize = 3;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetSpec {
    pub clips_per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Glyph bar length in pixels.
    pub glyph_size: f64,
    /// Amplitude of per-pixel, per-frame background noise.
    pub noise_level: f64,
    pub distractor_count: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn desk() -> Self {
        DatasetSpec {
            clips_per_class: 170,
            frames: 8,
            height: 32,
            width: 32,
            glyph_size: 10.0,
            noise_level: 0.1,
            distractor_count: 2,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clips_per_class == 0 {
            return Err(Error::config("dataset.clips_per_class must be positive"));
        }
        if self.frames < 2 {
            return Err(Error::config("dataset.frames must be at least 2"));
        }
        if self.glyph_size <= 0.0 {
            return Err(Error::config("dataset.glyph_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::config("dataset.noise_level must be in [0, 1]"));
        }
        // worst-case glyph extent: bar diagonal at max growth, plus travel
        let radius = glyph_radius(self.glyph_size);
        let travel = TRANSLATE_SPEED * (self.frames - 1) as f64;
        let needed = 2.0 * radius + travel + 2.0;
        if needed >= self.height as f64 || needed >= self.width as f64 {
            return Err(Error::config(format!(
                "dataset: glyph of size {} cannot stay inside a {}x{} frame",
                self.glyph_size, self.height, self.width
            )));
        }
        Ok(())
    }
}

fn glyph_radius(glyph_size: f64) -> f64 {
    let half_len = glyph_size / 2.0 * GROW_MAX;
    let half_wid = (glyph_size / 6.0).max(0.8) * GROW_MAX;
    (half_len * half_len + half_wid * half_wid).sqrt()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Clip {
    pub id: usize,
    pub class: usize,
    #[serde(skip)]
    pub pixels: Vec<f32>,
    /// Tokens (under the model's token grid) that the glyph overlaps.
    pub gt_tokens: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn all() -> [Split; 3] {
        [Split::Train, Split::Val, Split::Test]
    }

    pub fn dir_name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub clips: Vec<Clip>,
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Clip> {
        let idx = match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        };
        idx.iter().map(|&i| &self.clips[i]).collect()
    }

    pub fn clip_by_id(&self, id: usize) -> Option<&Clip> {
        self.clips.iter().find(|c| c.id == id)
    }
}

/// Deterministic per-clip RNG stream, keyed by (dataset seed, clip id).
fn clip_rng(seed: u64, clip_id: usize) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(clip_id as u64).to_le_bytes());
    key[16] = 0xd5; // dataset domain tag
    ChaCha20Rng::from_seed(key)
}

struct GlyphFrame {
    cx: f64,
    cy: f64,
    half_len: f64,
    half_wid: f64,
    angle: f64,
}

fn glyph_frames(spec: &DatasetSpec, class: usize, rng: &mut ChaCha20Rng) -> Vec<GlyphFrame> {
    let t = spec.frames;
    let half_len0 = spec.glyph_size / 2.0;
    let half_wid0 = (spec.glyph_size / 6.0).max(0.8);
    let angle0 = rng.gen_range(0.0..std::f64::consts::PI);
    let radius = glyph_radius(spec.glyph_size);
    let travel = TRANSLATE_SPEED * (t - 1) as f64;
    let (dx, dy) = match class {
        0 => (-1.0, 0.0),
        1 => (1.0, 0.0),
        2 => (0.0, -1.0),
        3 => (0.0, 1.0),
        _ => (0.0, 0.0),
    };
    // sample a start center that keeps the glyph in frame for the whole clip
    let lo_x = radius + 1.0 + if dx < 0.0 { travel } else { 0.0 };
    let hi_x = spec.width as f64 - 2.0 - radius - if dx > 0.0 { travel } else { 0.0 };
    let lo_y = radius + 1.0 + if dy < 0.0 { travel } else { 0.0 };
    let hi_y = spec.height as f64 - 2.0 - radius - if dy > 0.0 { travel } else { 0.0 };
    let cx0 = rng.gen_range(lo_x..hi_x);
    let cy0 = rng.gen_range(lo_y..hi_y);
    (0..t)
        .map(|f| {
            let ff = f as f64;
            let scale = match class {
                4 => GROW_MIN + (GROW_MAX - GROW_MIN) * ff / (t - 1) as f64,
                5 => GROW_MAX - (GROW_MAX - GROW_MIN) * ff / (t - 1) as f64,
                _ => 1.0,
            };
            let angle = match class {
                6 => angle0 - ROTATE_SPEED * ff,
                7 => angle0 + ROTATE_SPEED * ff,
                _ => angle0,
            };
            GlyphFrame {
                cx: cx0 + dx * TRANSLATE_SPEED * ff,
                cy: cy0 + dy * TRANSLATE_SPEED * ff,
                half_len: half_len0 * scale,
                half_wid: half_wid0 * scale,
                angle,
            }
        })
        .collect()
}

fn generate_clip(spec: &DatasetSpec, model: &ModelConfig, id: usize, class: usize) -> Clip {
    let mut rng = clip_rng(spec.seed, id);
    let (t, h, w) = (spec.frames, spec.height, spec.width);
    let color: [f32; 3] = [
        rng.gen_range(0.65..1.0),
        rng.gen_range(0.65..1.0),
        rng.gen_range(0.65..1.0),
    ];
    let frames = glyph_frames(spec, class, &mut rng);
    let distractors: Vec<(usize, usize)> = (0..spec.distractor_count)
        .map(|_| {
            (
                rng.gen_range(0..h.saturating_sub(DISTRACTOR_SIZE)),
                rng.gen_range(0..w.saturating_sub(DISTRACTOR_SIZE)),
            )
        })
        .collect();

    let grid = model.grid();
    let mut pixels = vec![0.0f32; t * h * w * 3];
    let mut gt = std::collections::BTreeSet::new();
    for (f, gf) in frames.iter().enumerate() {
        let (sin, cos) = gf.angle.sin_cos();
        for y in 0..h {
            for x in 0..w {
                let noise = spec.noise_level * (rng.gen::<f64>() - 0.5);
                let mut px = [(BACKGROUND + noise).clamp(0.0, 1.0) as f32; 3];
                for &(dy0, dx0) in &distractors {
                    if y >= dy0 && y < dy0 + DISTRACTOR_SIZE && x >= dx0 && x < dx0 + DISTRACTOR_SIZE
                    {
                        px = [DISTRACTOR_VALUE; 3];
                    }
                }
                let rx = x as f64 - gf.cx;
                let ry = y as f64 - gf.cy;
                let u = rx * cos + ry * sin;
                let v = -rx * sin + ry * cos;
                if u.abs() <= gf.half_len && v.abs() <= gf.half_wid {
                    px = color;
                    gt.insert(
                        grid.index(f / model.tube_t, y / model.tube_h, x / model.tube_w),
                    );
                }
                let base = ((f * h + y) * w + x) * 3;
                pixels[base..base + 3].copy_from_slice(&px);
            }
        }
    }
    Clip {
        id,
        class,
        pixels,
        gt_tokens: gt.into_iter().collect(),
    }
}

/// Generate the full dataset with a stratified 70/15/15 split. Deterministic
/// given the spec seed; per-clip RNG streams never interact.
pub fn gen_dataset(spec: &DatasetSpec, model: &ModelConfig) -> Result<Dataset> {
    spec.validate()?;
    if spec.frames != model.frames || spec.height != model.height || spec.width != model.width {
        return Err(Error::config(
            "dataset clip dims must match the model config",
        ));
    }
    let m = spec.clips_per_class;
    let n_train = (m * 70) / 100;
    let n_val = (m * 15) / 100;
    let mut clips = Vec::with_capacity(NUM_CLASSES * m);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for class in 0..NUM_CLASSES {
        for i in 0..m {
            let id = class * m + i;
            let clip = generate_clip(spec, model, id, class);
            debug_assert!(!clip.gt_tokens.is_empty());
            let pos = clips.len();
            if i < n_train {
                train.push(pos);
            } else if i < n_train + n_val {
                val.push(pos);
            } else {
                test.push(pos);
            }
            clips.push(clip);
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        clips,
        train,
        val,
        test,
    })
}

#[derive(Serialize, Deserialize)]
struct ClipSidecar {
    id: usize,
    class: usize,
    shape: [usize; 4],
    gt_tokens: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    spec: DatasetSpec,
    classes: Vec<String>,
    splits: std::collections::BTreeMap<String, Vec<usize>>,
}

fn clip_stem(dir: &Path, split: Split, id: usize) -> PathBuf {
    dir.join(split.dir_name()).join(format!("clip_{id:05}"))
}

/// Write the dataset as raw little-endian f32 arrays with JSON sidecars,
/// one pair per clip, under train/, val/, test/.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let mut splits = std::collections::BTreeMap::new();
    for split in Split::all() {
        fs::create_dir_all(dir.join(split.dir_name()))?;
        let mut ids = Vec::new();
        for clip in ds.split(split) {
            let stem = clip_stem(dir, split, clip.id);
            let mut raw = Vec::with_capacity(clip.pixels.len() * 4);
            for &v in &clip.pixels {
                raw.extend_from_slice(&v.to_le_bytes());
            }
            fs::write(stem.with_extension("f32"), raw)?;
            let sidecar = ClipSidecar {
                id: clip.id,
                class: clip.class,
                shape: [ds.spec.frames, ds.spec.height, ds.spec.width, 3],
                gt_tokens: clip.gt_tokens.clone(),
            };
            fs::write(
                stem.with_extension("json"),
                serde_json::to_vec_pretty(&sidecar)?,
            )?;
            ids.push(clip.id);
        }
        splits.insert(split.dir_name().to_string(), ids);
    }
    let manifest = DatasetManifest {
        spec: ds.spec.clone(),
        classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        splits,
    };
    fs::write(
        dir.join("dataset.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("dataset.json");
    if !mpath.is_file() {
        return Err(Error::MissingArtifact(mpath));
    }
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(&mpath)?)?;
    let mut clips = Vec::new();
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for split in Split::all() {
        let ids = manifest
            .splits
            .get(split.dir_name())
            .ok_or_else(|| Error::contract(format!("dataset.json missing split {split:?}")))?;
        for &id in ids {
            let stem = clip_stem(dir, split, id);
            let sidecar: ClipSidecar =
                serde_json::from_slice(&fs::read(stem.with_extension("json"))?)?;
            let raw = fs::read(stem.with_extension("f32"))?;
            let pixels: Vec<f32> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let expected: usize = sidecar.shape.iter().product();
            if pixels.len() != expected {
                return Err(Error::contract(format!(
                    "clip {id}: pixel count {} does not match shape {:?}",
                    pixels.len(),
                    sidecar.shape
                )));
            }
            let pos = clips.len();
            match split {
                Split::Train => train.push(pos),
                Split::Val => val.push(pos),
                Split::Test => test.push(pos),
            }
            clips.push(Clip {
                id,
                class: sidecar.class,
                pixels,
                gt_tokens: sidecar.gt_tokens,
            });
        }
    }
    Ok(Dataset {
        spec: manifest.spec,
        clips,
        train,
        val,
        test,
    })
}

/// Spatial average pooling by an integer factor; the confidence proxy runs
/// on these reduced clips.
pub fn downsample_spatial(pixels: &[f32], t: usize, h: usize, w: usize, factor: usize) -> Vec<f32> {
    assert!(h % factor == 0 && w % factor == 0);
    let (nh, nw) = (h / factor, w / factor);
    let mut out = vec![0.0f32; t * nh * nw * 3];
    let inv = 1.0 / (factor * factor) as f32;
    for f in 0..t {
        for y in 0..nh {
            for x in 0..nw {
                for c in 0..3 {
                    let mut acc = 0.0f32;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += pixels[((f * h + y * factor + dy) * w + x * factor + dx) * 3 + c];
                        }
                    }
                    out[((f * nh + y) * nw + x) * 3 + c] = acc * inv;
                }
            }
        }
    }
    out
}
