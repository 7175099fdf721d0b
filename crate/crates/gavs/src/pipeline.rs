//! Train and evaluate runs backed by files.
//!
//! A run directory holds `model.gavs` (checkpoint), `config.json` (the fully
//! resolved configuration) and `loss_log.csv`. The visual backbone and the
//! decoder are first pretrained on a separate visual-only corpus drawn from
//! the same generator with a derived seed, standing in for the foundation
//! model's prior training.

use std::fs;
use std::path::Path;

use gavs_core::data::{generate, DatasetSpec, SceneSample};
use gavs_core::metrics::{MetricReport, RunMeta};
use gavs_core::train::{audio_derangement, fit, pretrain, predict, StepLoss};
use gavs_core::{GavsConfig, GavsModel, ParamStore};
use serde::Serialize;

use crate::checkpoint;
use crate::config::config_hash;
use crate::dataset::{read_json, write_json};
use crate::error::{Error, IoContext, Result};
use crate::pnm;

pub const MODEL_FILE: &str = "model.gavs";
pub const CONFIG_FILE: &str = "config.json";
pub const LOSS_LOG: &str = "loss_log.csv";
pub const REPORT_FILE: &str = "report.json";

/// Mixed into the run seed to pick the pretraining corpus.
const PRETRAIN_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// The pretraining corpus: the dataset's generator settings over every
/// class, with its own size and seed.
pub fn pretrain_corpus_spec(dataset: &DatasetSpec, cfg: &GavsConfig) -> DatasetSpec {
    DatasetSpec {
        num_scenes: cfg.train.pretrain_scenes,
        anchor_classes: None,
        seed: cfg.seed ^ PRETRAIN_SEED_SALT,
        ..dataset.clone()
    }
}

/// A model with pretrained backbone and decoder, or a fresh one when
/// `train.pretrain_steps` is 0. Returns the pretraining losses.
pub fn pretrained_model(cfg: &GavsConfig, dataset: &DatasetSpec) -> Result<(GavsModel, Vec<f64>)> {
    let mut model = GavsModel::new(cfg)?;
    if cfg.train.pretrain_steps == 0 {
        return Ok((model, Vec::new()));
    }
    let corpus = generate(&pretrain_corpus_spec(dataset, cfg))?;
    let log = pretrain(&mut model, &corpus, |step, loss| {
        if step % 100 == 0 {
            log::info!("pretrain step {step}: loss {loss:.5}");
        }
    })?;
    Ok((model, log))
}

pub struct TrainOutcome {
    pub model: GavsModel,
    pub pretrain_log: Vec<f64>,
    pub log: Vec<StepLoss>,
}

/// Builds a model for `cfg`, starting from `pretrained` weights when given
/// and pretraining otherwise, then fits it to `train`.
pub fn train(cfg: &GavsConfig, dataset: &DatasetSpec, train: &[SceneSample], pretrained: Option<&ParamStore>) -> Result<TrainOutcome> {
    let (mut model, pretrain_log) = match pretrained {
        Some(store) => {
            let mut m = GavsModel::new(cfg)?;
            m.load_pretrained(store);
            (m, Vec::new())
        }
        None => pretrained_model(cfg, dataset)?,
    };
    let log = fit(&mut model, train, |step, loss| {
        if step % 100 == 0 {
            log::info!("step {step}: loss {:.5} (seg {:.5}, sem {:.5})", loss.total, loss.seg, loss.sem);
        }
    })?;
    Ok(TrainOutcome { model, pretrain_log, log })
}

#[derive(Serialize)]
struct LossRow<'a> {
    phase: &'a str,
    step: usize,
    total: f64,
    seg: Option<f64>,
    sem: Option<f64>,
}

pub fn write_loss_log(path: &Path, outcome: &TrainOutcome) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let pre = outcome.pretrain_log.iter().enumerate().map(|(step, &total)| LossRow {
        phase: "pretrain",
        step,
        total,
        seg: None,
        sem: None,
    });
    let tune = outcome.log.iter().enumerate().map(|(step, l)| LossRow {
        phase: "train",
        step,
        total: l.total,
        seg: Some(l.seg),
        sem: Some(l.sem),
    });
    for row in pre.chain(tune) {
        w.serialize(row).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().at(path)
}

pub fn write_run(dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    checkpoint::save(&dir.join(MODEL_FILE), &outcome.model.store)?;
    write_json(&dir.join(CONFIG_FILE), &outcome.model.cfg)?;
    write_loss_log(&dir.join(LOSS_LOG), outcome)
}

pub fn load_run(dir: &Path) -> Result<GavsModel> {
    let cfg: GavsConfig = read_json(&dir.join(CONFIG_FILE))?;
    let mut model = GavsModel::new(&cfg)?;
    checkpoint::restore(&mut model.store, &checkpoint::load(&dir.join(MODEL_FILE))?)?;
    model.apply_trainable();
    Ok(model)
}

pub fn run_meta(cfg: &GavsConfig, shots: Option<usize>) -> RunMeta {
    RunMeta {
        config_hash: config_hash(cfg),
        seed: cfg.seed,
        strategy: cfg.decoder.tuning_strategy.as_str().into(),
        mode: cfg.decoder.fusion_mode.as_str().into(),
        shots,
    }
}

pub struct Evaluation {
    pub report: MetricReport,
    pub probs: Vec<Vec<f64>>,
}

/// Scores a model. With `shuffle_seed`, every sample is paired with another
/// sample's audio.
pub fn evaluate(model: &GavsModel, samples: &[SceneSample], shuffle_seed: Option<u64>, meta: RunMeta) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Config("no scenes to evaluate".into()));
    }
    let perm = shuffle_seed.map(|s| audio_derangement(samples.len(), s));
    let probs = predict(model, samples, perm.as_deref())?;
    let report = score(samples, &probs, model.cfg.eval.beta2, meta)?;
    Ok(Evaluation { report, probs })
}

pub fn score(samples: &[SceneSample], probs: &[Vec<f64>], beta2: f64, meta: RunMeta) -> Result<MetricReport> {
    let ids: Vec<String> = samples.iter().map(|s| s.meta.id.clone()).collect();
    let gts: Vec<Vec<bool>> = samples.iter().map(SceneSample::mask_bool).collect();
    let width = samples.first().map_or(1, |s| s.mask_size);
    Ok(MetricReport::compute(&ids, probs, &gts, width, beta2, meta)?)
}

/// Reads `<dir>/<id>.pgm` for every sample as a probability map in `[0, 1]`.
pub fn read_predictions(dir: &Path, samples: &[SceneSample]) -> Result<Vec<Vec<f64>>> {
    samples
        .iter()
        .map(|s| {
            let path = dir.join(format!("{}.pgm", s.meta.id));
            let (gray, w, h) = pnm::read_pgm(&path)?;
            if (w, h) != (s.mask_size, s.mask_size) {
                return Err(Error::format(path, format!("{w}x{h} prediction for a {0}x{0} mask", s.mask_size)));
            }
            Ok(gray.iter().map(|&v| f64::from(v) / 255.0).collect())
        })
        .collect()
}

/// Writes `report.json` and binarized predictions `preds/<id>.pgm`.
pub fn write_evaluation(dir: &Path, samples: &[SceneSample], eval: &Evaluation) -> Result<()> {
    let preds = dir.join("preds");
    fs::create_dir_all(&preds).at(&preds)?;
    for (s, p) in samples.iter().zip(&eval.probs) {
        let mask: Vec<bool> = p.iter().map(|&v| v > gavs_core::decoder::MASK_THRESHOLD).collect();
        pnm::write_mask(&preds.join(format!("{}.pgm", s.meta.id)), &mask, s.mask_size)?;
    }
    write_json(&dir.join(REPORT_FILE), &eval.report)
}
