//! Deterministic synthetic sounding scenes.
//!
//! A class is a (shape, colour) pair. Every scene is anchored on one class,
//! which always sounds, and may hold up to two more objects of other classes;
//! in about half the scenes at least one of those extra objects is silent.
//! The audio vector is `γ · Σ e_c` over sounding classes plus Gaussian noise,
//! with a few trailing nuisance dimensions that carry noise only.
//!
//! Each scene draws from its own ChaCha stream (`master seed`, `scene index`),
//! so scenes can be generated in any order without changing a byte.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Cross,
}

const SHAPES: [Shape; 4] = [Shape::Square, Shape::Circle, Shape::Triangle, Shape::Cross];

const COLORS: [[f64; 3]; 4] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.85, 0.20],
    [0.20, 0.30, 0.95],
    [0.95, 0.90, 0.15],
];

/// Shape of class `k`. Shapes cycle fastest so that consecutive classes differ.
pub fn class_shape(k: usize) -> Shape {
    SHAPES[k % 4]
}

/// RGB colour of class `k`; with eight classes every shape appears in two
/// colours and every colour on two shapes.
pub fn class_color(k: usize) -> [f64; 3] {
    COLORS[(k % 4 + k / 4) % 4]
}

/// Parameters of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub num_scenes: usize,
    pub image_size: usize,
    /// Side of the ground-truth mask (`4H` for the model's token grid).
    pub mask_size: usize,
    pub max_objects: usize,
    pub min_object_size: usize,
    pub max_object_size: usize,
    /// Audio amplitude `γ` per sounding class.
    pub gamma: f64,
    /// Audio noise standard deviation `σ`.
    pub sigma: f64,
    /// Trailing audio dimensions that carry noise only.
    pub nuisance_dims: usize,
    /// Fraction of scenes that contain at least one silent object.
    pub distractor_prob: f64,
    /// Anchor classes are drawn from this set; `None` means all classes.
    pub anchor_classes: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            num_scenes: 800,
            image_size: 32,
            mask_size: 32,
            max_objects: 3,
            min_object_size: 8,
            max_object_size: 11,
            gamma: 1.0,
            sigma: 0.1,
            nuisance_dims: 4,
            distractor_prob: 0.5,
            anchor_classes: None,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn audio_dim(&self) -> usize {
        self.num_classes + self.nuisance_dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 4 {
            return Err(Error::Config(format!("need at least 4 classes, got {}", self.num_classes)));
        }
        if self.max_objects == 0 || self.max_objects > self.num_classes {
            return Err(Error::Config(format!(
                "max_objects {} must lie in 1..={}",
                self.max_objects, self.num_classes
            )));
        }
        if self.min_object_size < 3 || self.min_object_size > self.max_object_size || self.max_object_size > self.image_size {
            return Err(Error::Config(format!(
                "object sizes {}..={} do not fit a {} image",
                self.min_object_size, self.max_object_size, self.image_size
            )));
        }
        if self.mask_size == 0 || self.image_size == 0 {
            return Err(Error::Config("image and mask sizes must be positive".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) || !(0.0..=1.0).contains(&self.distractor_prob) {
            return Err(Error::Config("sigma must be finite and non-negative, distractor_prob in [0, 1]".into()));
        }
        if let Some(a) = &self.anchor_classes {
            if a.is_empty() || a.iter().any(|&c| c >= self.num_classes) {
                return Err(Error::Config(format!("anchor classes {a:?} out of range")));
            }
        }
        Ok(())
    }
}

/// One object placed in a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub class: usize,
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub sounding: bool,
}

/// Scene metadata as listed in a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub id: String,
    pub index: usize,
    pub anchor: usize,
    pub sounding_classes: BTreeSet<usize>,
    pub silent_classes: BTreeSet<usize>,
    pub objects: Vec<Placement>,
}

impl SceneMeta {
    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.sounding_classes.iter().chain(&self.silent_classes).copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub meta: SceneMeta,
    /// `[3, S, S]` channel planes quantized to 8 bits.
    pub pixels: Vec<u8>,
    pub image_size: usize,
    pub audio: Vec<f64>,
    /// Row-major `mask_size²` mask of 0/1 values.
    pub mask: Vec<u8>,
    pub mask_size: usize,
}

impl SceneSample {
    /// Frame as `[1, 3, S, S]` with values in `[0, 1]`.
    pub fn frame(&self) -> Tensor {
        let s = self.image_size;
        Tensor::new(
            alloc::vec![1, 3, s, s],
            self.pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
        )
        .expect("pixel buffer sized at generation")
    }

    /// Audio as `[1, d_in]`.
    pub fn audio_tensor(&self) -> Tensor {
        Tensor::matrix(1, self.audio.len(), self.audio.clone()).expect("nonempty audio")
    }

    pub fn mask_tensor(&self) -> Tensor {
        let m = self.mask_size;
        Tensor::new(alloc::vec![m, m], self.mask.iter().map(|&v| f64::from(v)).collect()).expect("mask sized at generation")
    }

    pub fn mask_bool(&self) -> Vec<bool> {
        self.mask.iter().map(|&v| v != 0).collect()
    }
}

pub fn scene_id(index: usize) -> String {
    format!("{index:05}")
}

/// Whether pixel centre `(px, py)` (in object-local units) lies in the shape.
fn covers(shape: Shape, size: usize, px: f64, py: f64) -> bool {
    let s = size as f64;
    let half = s / 2.0;
    let (dx, dy) = (px - half, py - half);
    match shape {
        Shape::Square => px >= 0.5 && py >= 0.5 && px <= s - 0.5 && py <= s - 0.5,
        Shape::Circle => dx * dx + dy * dy <= half * half,
        Shape::Triangle => py >= 0.0 && py <= s && libm::fabs(dx) <= py * half / s,
        Shape::Cross => {
            let arm = s / 6.0;
            (libm::fabs(dx) <= arm || libm::fabs(dy) <= arm) && px >= 0.0 && py >= 0.0 && px <= s && py <= s
        }
    }
}

/// Footprint of `p` on an `out × out` grid covering an `image × image` frame,
/// sampled at cell centres.
pub fn footprint(p: &Placement, image: usize, out: usize) -> Vec<bool> {
    let scale = image as f64 / out as f64;
    let shape = class_shape(p.class);
    let mut mask = alloc::vec![false; out * out];
    for oy in 0..out {
        for ox in 0..out {
            let px = (ox as f64 + 0.5) * scale - p.x as f64;
            let py = (oy as f64 + 0.5) * scale - p.y as f64;
            let s = p.size as f64;
            if (0.0..s).contains(&px) && (0.0..s).contains(&py) && covers(shape, p.size, px, py) {
                mask[oy * out + ox] = true;
            }
        }
    }
    mask
}

const PLACEMENT_RETRIES: usize = 64;

fn overlaps(a: &Placement, b: &Placement) -> bool {
    // One pixel of clearance between boxes.
    a.x < b.x + b.size + 1 && b.x < a.x + a.size + 1 && a.y < b.y + b.size + 1 && b.y < a.y + a.size + 1
}

fn quantize(v: f64) -> u8 {
    libm::round(v.clamp(0.0, 1.0) * 255.0) as u8
}

/// Generates scene `index`, or `None` if its objects could not be placed
/// without overlap.
pub fn generate_scene(spec: &DatasetSpec, index: usize) -> Result<Option<SceneSample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);

    let anchors: Vec<usize> = spec.anchor_classes.clone().unwrap_or_else(|| (0..spec.num_classes).collect());
    let anchor = anchors[index % anchors.len()];
    let mut others: Vec<usize> = (0..spec.num_classes).filter(|&c| c != anchor).collect();
    others.shuffle(&mut rng);
    let extra = rng.random_range(0..spec.max_objects);
    let mut classes = alloc::vec![anchor];
    classes.extend(others.into_iter().take(extra));

    let with_distractor = extra > 0 && rng.random_bool(spec.distractor_prob);
    let mut sounding = alloc::vec![true; classes.len()];
    if with_distractor {
        // At least one extra object is silent; the rest of the extras sound
        // with probability one half.
        let silent = rng.random_range(1..classes.len());
        for (i, s) in sounding.iter_mut().enumerate().skip(1) {
            *s = i != silent && rng.random_bool(0.5);
        }
    }

    let mut objects: Vec<Placement> = Vec::with_capacity(classes.len());
    for (&class, &snd) in classes.iter().zip(&sounding) {
        let size = rng.random_range(spec.min_object_size..=spec.max_object_size);
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let cand = Placement {
                class,
                x: rng.random_range(0..=spec.image_size - size),
                y: rng.random_range(0..=spec.image_size - size),
                size,
                sounding: snd,
            };
            if objects.iter().all(|o| !overlaps(o, &cand)) {
                objects.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            log::warn!("scene {index}: no room for class {class} after {PLACEMENT_RETRIES} tries, skipping");
            return Ok(None);
        }
    }

    let s = spec.image_size;
    let mut planes = alloc::vec![0.0f64; 3 * s * s];
    for v in planes.iter_mut() {
        *v = rng.random_range(0.0..0.15);
    }
    for o in &objects {
        let color = class_color(o.class);
        let shade = rng.random_range(-0.05..0.05);
        for (i, &on) in footprint(o, s, s).iter().enumerate() {
            if on {
                for c in 0..3 {
                    planes[c * s * s + i] = color[c] + shade;
                }
            }
        }
    }

    let m = spec.mask_size;
    let mut mask = alloc::vec![0u8; m * m];
    for o in objects.iter().filter(|o| o.sounding) {
        for (dst, on) in mask.iter_mut().zip(footprint(o, s, m)) {
            *dst |= on as u8;
        }
    }

    let noise = Normal::new(0.0, spec.sigma).map_err(|e| Error::Config(format!("audio noise: {e}")))?;
    let mut audio: Vec<f64> = (0..spec.audio_dim()).map(|_| noise.sample(&mut rng)).collect();
    for o in objects.iter().filter(|o| o.sounding) {
        audio[o.class] += spec.gamma;
    }
    if spec.sigma == 0.0 {
        // `Normal` with σ = 0 yields exact zeros, keep the sum exact too.
        debug_assert!(audio.iter().enumerate().all(|(i, &a)| a == 0.0 || i < spec.num_classes));
    }

    let meta = SceneMeta {
        id: scene_id(index),
        index,
        anchor,
        sounding_classes: objects.iter().filter(|o| o.sounding).map(|o| o.class).collect(),
        silent_classes: objects.iter().filter(|o| !o.sounding).map(|o| o.class).collect(),
        objects,
    };
    Ok(Some(SceneSample {
        meta,
        pixels: planes.into_iter().map(quantize).collect(),
        image_size: s,
        audio,
        mask,
        mask_size: m,
    }))
}

/// All scenes `0..num_scenes`, minus any that could not be placed.
pub fn generate(spec: &DatasetSpec) -> Result<Vec<SceneSample>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.num_scenes);
    for i in 0..spec.num_scenes {
        if let Some(s) = generate_scene(spec, i)? {
            out.push(s);
        }
    }
    Ok(out)
}
