//! Synthetic training data: example generators, corpus assembly and JSONL I/O.

mod distort;
mod jsonl;

pub use distort::{
    apply_distortion, draw_shape, outside_roi_identical, roi_msd, synth_base_image, DistortionKind,
    DistortionSpec, PlacedShape, Severity, ShapeKind, SEVERITY_WORDS,
};
pub use jsonl::{read_stage1, read_stage2, write_stage1, write_stage2, ImageStorage, Polarity};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::roi::{roi_to_patch_indices, RoiSpec};
use crate::tokenizer::render_score;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskClass {
    GeneralVision,
    DistortionAwareness,
    QualityAwareness,
}

impl TaskClass {
    pub const ALL: [TaskClass; 3] = [
        TaskClass::DistortionAwareness,
        TaskClass::QualityAwareness,
        TaskClass::GeneralVision,
    ];
}

/// A Stage I example. `answer` holds a single `<lvr>` placeholder.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub image: Image,
    pub prompt: String,
    pub answer: String,
    pub roi: RoiSpec,
    pub task: TaskClass,
}

/// A Stage II / evaluation record. `mos` is on the common `[1, 5]` scale.
#[derive(Clone, Debug, PartialEq)]
pub struct QualityRecord {
    pub image: Image,
    pub prompt: String,
    pub mos: f64,
    pub mos_native: f64,
    pub native_range: [f64; 2],
    pub polarity: Polarity,
    pub source: String,
}

/// Synthetic quality law before jitter: `5 − 0.8·severity`, clean images at 5.
pub fn quality_law(kind: DistortionKind, severity: Severity) -> f64 {
    match kind {
        DistortionKind::Null => 5.0,
        _ => 5.0 - 0.8 * f64::from(severity.level()),
    }
}

pub const SCORE_JITTER_STD: f64 = 0.1;

pub const QUALITY_PROMPTS: [&str; 5] = [
    "rate the quality of this image",
    "how good is the quality of this image ?",
    "please give the quality score of this picture",
    "what is the overall quality of this photo ?",
    "assess the quality of this image from 1 to 5",
];

pub const DISTORTION_PROMPTS: [&str; 4] = [
    "what distortion affects this image ?",
    "identify the distortion type and severity",
    "describe the degradation in this picture",
    "which distortion is present in this photo ?",
];

const SHAPE_PROMPTS: [&str; 3] = [
    "what shape is in this image ?",
    "name the object in the picture",
    "identify the visible shape",
];

/// Knobs shared by the example generators.
#[derive(Clone, Debug, PartialEq)]
pub struct ForgeConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// ROIs are resampled until they cover at most this many patches.
    pub max_roi_patches: usize,
    pub roi_min: usize,
    pub roi_max: usize,
    /// Snap distortion ROIs to whole patches (2 to `max_roi_patches` of them)
    /// instead of drawing pixel sizes from `roi_min..=roi_max`.
    pub align_roi: bool,
    /// Severities drawn for distortion and quality examples.
    pub severities: Vec<u8>,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            max_roi_patches: 8,
            roi_min: 10,
            roi_max: 16,
            align_roi: true,
            severities: vec![1, 2, 3, 4, 5],
        }
    }
}

impl ForgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.severities.is_empty() || self.severities.iter().any(|s| !(1..=5).contains(s)) {
            return Err(Error::InvalidInput(format!("bad severity set {:?}", self.severities)));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) || self.max_roi_patches == 0 {
            return Err(Error::InvalidInput("image size must be a positive multiple of the patch size".into()));
        }
        if self.roi_min == 0 || self.roi_min > self.roi_max || self.roi_max > self.image_size {
            return Err(Error::InvalidInput("bad roi size range".into()));
        }
        Ok(())
    }
}

/// Mixes a base seed with a stream label and an index (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn patch_count(cfg: &ForgeConfig, roi: &RoiSpec) -> usize {
    roi_to_patch_indices(roi, cfg.image_size, cfg.patch_size).map_or(usize::MAX, |s| s.len())
}

fn random_roi<R: Rng>(cfg: &ForgeConfig, rng: &mut R) -> RoiSpec {
    let grid = cfg.image_size / cfg.patch_size;
    let min_patches = 2.min(cfg.max_roi_patches).min(grid * grid);
    if cfg.align_roi {
        loop {
            let pw = rng.random_range(1..=grid.min(3));
            let ph = rng.random_range(1..=grid.min(3));
            if pw * ph < min_patches || pw * ph > cfg.max_roi_patches {
                continue;
            }
            let x0 = rng.random_range(0..=grid - pw) * cfg.patch_size;
            let y0 = rng.random_range(0..=grid - ph) * cfg.patch_size;
            return RoiSpec::new(x0, y0, x0 + pw * cfg.patch_size, y0 + ph * cfg.patch_size);
        }
    }
    loop {
        let w = rng.random_range(cfg.roi_min..=cfg.roi_max);
        let h = rng.random_range(cfg.roi_min..=cfg.roi_max);
        let x0 = rng.random_range(0..=cfg.image_size - w);
        let y0 = rng.random_range(0..=cfg.image_size - h);
        let roi = RoiSpec::new(x0, y0, x0 + w, y0 + h);
        if patch_count(cfg, &roi) <= cfg.max_roi_patches {
            return roi;
        }
    }
}

fn random_distortion<R: Rng>(cfg: &ForgeConfig, rng: &mut R, seed: u64) -> DistortionSpec {
    let kind = DistortionKind::ALL[rng.random_range(0..DistortionKind::ALL.len())];
    let level = cfg.severities[rng.random_range(0..cfg.severities.len())];
    DistortionSpec {
        kind,
        severity: Severity::new(level).expect("validated severity"),
        roi: random_roi(cfg, rng),
        seed: derive_seed(seed, 7, 0),
    }
}

fn distorted_image<R: Rng>(cfg: &ForgeConfig, rng: &mut R, seed: u64) -> (Image, DistortionSpec) {
    let base = synth_base_image(derive_seed(seed, 1, 0), cfg.image_size);
    let spec = random_distortion(cfg, rng, seed);
    let img = apply_distortion(&base, &spec).expect("generated roi is in bounds");
    (img, spec)
}

/// Distortion-identification example; the answer names the kind and severity.
pub fn make_distortion_example(cfg: &ForgeConfig, seed: u64) -> (TrainingExample, DistortionSpec) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (image, spec) = distorted_image(cfg, &mut rng, seed);
    let body = match spec.kind {
        DistortionKind::Null => "no distortion".to_string(),
        k => format!("{} {}", k.word(), spec.severity.word()),
    };
    let prompt = DISTORTION_PROMPTS[rng.random_range(0..DISTORTION_PROMPTS.len())].to_string();
    let ex = TrainingExample {
        image,
        prompt,
        answer: format!("<lvr> <answer> {body} </answer>"),
        roi: spec.roi,
        task: TaskClass::DistortionAwareness,
    };
    (ex, spec)
}

/// Quality example: the same image yields a Stage I target and a Stage II record.
pub fn make_quality_example(cfg: &ForgeConfig, seed: u64) -> (TrainingExample, QualityRecord, DistortionSpec) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (image, spec) = distorted_image(cfg, &mut rng, seed);
    let jitter = Normal::new(0.0, SCORE_JITTER_STD).expect("valid std").sample(&mut rng);
    let s = (quality_law(spec.kind, spec.severity) + jitter).clamp(1.0, 5.0);
    let prompt = QUALITY_PROMPTS[rng.random_range(0..QUALITY_PROMPTS.len())].to_string();
    let ex = TrainingExample {
        image: image.clone(),
        prompt: prompt.clone(),
        answer: format!("<lvr> <answer>{}</answer>", render_score(s)),
        roi: spec.roi,
        task: TaskClass::QualityAwareness,
    };
    let rec = QualityRecord {
        image,
        prompt,
        mos: s,
        mos_native: s,
        native_range: [1.0, 5.0],
        polarity: Polarity::Mos,
        source: "synthetic".into(),
    };
    (ex, rec, spec)
}

/// Shape-recognition example. With two shapes the prompt names the queried one
/// and the ROI is that shape's box.
pub fn make_general_vision_example(cfg: &ForgeConfig, seed: u64) -> TrainingExample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut img = distort::synth_background(&mut rng, cfg.image_size);
        let two = rng.random_bool(0.5);
        let mut kinds = ShapeKind::ALL.to_vec();
        kinds.shuffle(&mut rng);
        let mut placed = Vec::new();
        for &kind in kinds.iter().take(if two { 2 } else { 1 }) {
            let r = rng.random_range(3.0..6.0);
            let size = cfg.image_size as f64;
            let cx = rng.random_range(r + 0.5..size - r - 0.5);
            let cy = rng.random_range(r + 0.5..size - r - 0.5);
            let dark = rng.random_bool(0.5);
            let color = std::array::from_fn(|_| if dark { rng.random_range(0.0..0.2) } else { rng.random_range(0.8..1.0) });
            if let Some(s) = draw_shape(&mut img, kind, cx, cy, r, color) {
                placed.push(s);
            }
        }
        // Overlap would make the later shape's box ambiguous; redraw instead.
        let overlapping = placed.len() == 2 && boxes_overlap(&placed[0].bbox, &placed[1].bbox);
        let Some(target) = placed.last().copied() else { continue };
        if overlapping || patch_count(cfg, &target.bbox) > cfg.max_roi_patches {
            continue;
        }
        distort::add_grating(&mut img, &mut rng);
        let prompt = if placed.len() == 2 {
            format!("where is the {} in this image ?", target.kind.word())
        } else {
            SHAPE_PROMPTS[rng.random_range(0..SHAPE_PROMPTS.len())].to_string()
        };
        return TrainingExample {
            image: img,
            prompt,
            answer: format!("<lvr> <answer> {} </answer>", target.kind.word()),
            roi: target.bbox,
            task: TaskClass::GeneralVision,
        };
    }
}

fn boxes_overlap(a: &RoiSpec, b: &RoiSpec) -> bool {
    a.x0 < b.x1 && b.x0 < a.x1 && a.y0 < b.y1 && b.y0 < a.y1
}

/// Splits `n` into integer counts proportional to `weights` (largest remainder).
pub fn mixture_counts(n: usize, weights: &[f64]) -> Result<Vec<usize>> {
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || total <= 0.0 {
        return Err(Error::InvalidInput(format!("bad mixture weights {weights:?}")));
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for i in order {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    Ok(counts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub n_stage1: usize,
    pub n_stage2: usize,
    pub n_heldout: usize,
    /// Weights for distortion / quality / general-vision Stage I examples.
    pub mix: [f64; 3],
    pub seed: u64,
    pub forge: ForgeConfig,
    /// Severities for held-out records; `None` reuses the training set.
    pub heldout_severities: Option<Vec<u8>>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_stage1: 2000,
            n_stage2: 1000,
            n_heldout: 200,
            mix: [0.4, 0.4, 0.2],
            seed: 0,
            forge: ForgeConfig::default(),
            heldout_severities: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub stage1: Vec<TrainingExample>,
    pub stage2: Vec<QualityRecord>,
    pub heldout: Vec<QualityRecord>,
}

const STREAM_STAGE1: u64 = 11;
const STREAM_STAGE2: u64 = 12;
const STREAM_HELDOUT: u64 = 13;

pub fn build_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.forge.validate()?;
    let counts = mixture_counts(cfg.n_stage1, &cfg.mix)?;
    let mut tasks: Vec<TaskClass> = TaskClass::ALL
        .iter()
        .zip(&counts)
        .flat_map(|(&t, &n)| std::iter::repeat_n(t, n))
        .collect();
    tasks.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_STAGE1, u64::MAX)));
    let stage1 = tasks
        .iter()
        .enumerate()
        .map(|(i, &task)| {
            let seed = derive_seed(cfg.seed, STREAM_STAGE1, i as u64);
            match task {
                TaskClass::DistortionAwareness => make_distortion_example(&cfg.forge, seed).0,
                TaskClass::QualityAwareness => make_quality_example(&cfg.forge, seed).0,
                TaskClass::GeneralVision => make_general_vision_example(&cfg.forge, seed),
            }
        })
        .collect();
    let records = |n: usize, stream: u64, forge: &ForgeConfig, source: &str| -> Vec<QualityRecord> {
        (0..n)
            .map(|i| {
                let mut rec = make_quality_example(forge, derive_seed(cfg.seed, stream, i as u64)).1;
                rec.source = source.to_string();
                rec
            })
            .collect()
    };
    let stage2 = records(cfg.n_stage2, STREAM_STAGE2, &cfg.forge, "stage2");
    let held_forge = match &cfg.heldout_severities {
        Some(sev) => ForgeConfig {
            severities: sev.clone(),
            ..cfg.forge.clone()
        },
        None => cfg.forge.clone(),
    };
    held_forge.validate()?;
    let heldout = records(cfg.n_heldout, STREAM_HELDOUT, &held_forge, "heldout");
    Ok(Corpus {
        stage1,
        stage2,
        heldout,
    })
}
