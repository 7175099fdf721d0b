//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/scenes/<id>/frame.ppm   P6, 8-bit RGB
//! <root>/scenes/<id>/mask.pgm    P5, 0 or 255
//! <root>/scenes/<id>/audio.txt   one double per line
//! ```
//!
//! Doubles are written in Rust's shortest round-trip form, so a dataset read
//! back from disk is bit-identical to the generated one.

use std::fs;
use std::path::{Path, PathBuf};

use gavs_core::data::{DatasetSpec, SceneMeta, SceneSample};
use gavs_core::split::Split;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::pnm;

pub const MANIFEST: &str = "manifest.json";
pub const UNASSIGNED: &str = "unassigned";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(flatten)]
    pub meta: SceneMeta,
    /// `train`, `test`, `shot` or `unassigned`.
    pub split: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: DatasetSpec,
    pub scenes: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn metas(&self) -> Vec<SceneMeta> {
        self.scenes.iter().map(|e| e.meta.clone()).collect()
    }

    /// The entries named in `ids`, in that order, tagged `tag`.
    pub fn subset(&self, ids: &[String], tag: &str) -> Result<Manifest> {
        let scenes = ids
            .iter()
            .map(|id| {
                self.scenes
                    .iter()
                    .find(|e| &e.meta.id == id)
                    .map(|e| ManifestEntry {
                        meta: e.meta.clone(),
                        split: tag.to_string(),
                    })
                    .ok_or_else(|| Error::Config(format!("scene {id} is not in the manifest")))
            })
            .collect::<Result<_>>()?;
        Ok(Manifest {
            dataset: self.dataset.clone(),
            scenes,
        })
    }
}

pub fn scene_dir(root: &Path, id: &str) -> PathBuf {
    root.join("scenes").join(id)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).at(path)?;
    text.push('\n');
    fs::write(path, text).at(path)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).at(path)?;
    serde_json::from_str(&text).at(path)
}

fn write_scene(root: &Path, s: &SceneSample) -> Result<()> {
    let dir = scene_dir(root, &s.meta.id);
    fs::create_dir_all(&dir).at(&dir)?;
    pnm::write_ppm(&dir.join("frame.ppm"), &s.pixels, s.image_size, s.image_size)?;
    let mask: Vec<bool> = s.mask_bool();
    pnm::write_mask(&dir.join("mask.pgm"), &mask, s.mask_size)?;
    let audio: String = s.audio.iter().map(|v| format!("{v}\n")).collect();
    let path = dir.join("audio.txt");
    fs::write(&path, audio).at(path)
}

/// Writes every scene and the manifest under `root`.
pub fn write_dataset(root: &Path, spec: &DatasetSpec, samples: &[SceneSample]) -> Result<Manifest> {
    fs::create_dir_all(root).at(root)?;
    for s in samples {
        write_scene(root, s)?;
    }
    let manifest = Manifest {
        dataset: spec.clone(),
        scenes: samples
            .iter()
            .map(|s| ManifestEntry {
                meta: s.meta.clone(),
                split: UNASSIGNED.into(),
            })
            .collect(),
    };
    write_json(&root.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    read_json(path)
}

pub fn load_scene(root: &Path, meta: &SceneMeta) -> Result<SceneSample> {
    let dir = scene_dir(root, &meta.id);
    let frame = dir.join("frame.ppm");
    let (pixels, w, h) = pnm::read_ppm(&frame)?;
    if w != h {
        return Err(Error::format(frame, format!("frame is {w}x{h}, expected square")));
    }
    let mask_path = dir.join("mask.pgm");
    let (gray, mw, mh) = pnm::read_pgm(&mask_path)?;
    if mw != mh || gray.iter().any(|&v| v != 0 && v != 255) {
        return Err(Error::format(mask_path, "mask must be square with values 0 or 255"));
    }
    let audio_path = dir.join("audio.txt");
    let audio = fs::read_to_string(&audio_path)
        .at(&audio_path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Error::format(&audio_path, e.to_string()))?;
    Ok(SceneSample {
        meta: meta.clone(),
        pixels,
        image_size: w,
        audio,
        mask: gray.iter().map(|&v| u8::from(v != 0)).collect(),
        mask_size: mw,
    })
}

pub fn load_scenes(root: &Path, manifest: &Manifest) -> Result<Vec<SceneSample>> {
    manifest.scenes.iter().map(|e| load_scene(root, &e.meta)).collect()
}

/// Writes `split.json` plus `train.json` and `test.json` manifests into
/// `out`. Shot scenes are tagged `shot` in the training manifest.
pub fn write_split(out: &Path, manifest: &Manifest, split: &Split) -> Result<()> {
    fs::create_dir_all(out).at(out)?;
    let mut train = manifest.subset(&split.train, "train")?;
    for e in &mut train.scenes {
        if split.spec.shot_sample_ids.contains(&e.meta.id) {
            e.split = "shot".into();
        }
    }
    write_json(&out.join("split.json"), split)?;
    write_json(&out.join("train.json"), &train)?;
    write_json(&out.join("test.json"), &manifest.subset(&split.test, "test")?)
}
