//! Pretraining, the tuning loop and evaluation.
//!
//! Pretraining stands in for the visual foundation model: the backbone and
//! the decoder learn promptable segmentation from class-label prompts on a
//! visual-only corpus, with a class-presence head on the pooled features.
//! After that the backbone stays frozen; its features are computed once per
//! scene and reused for every tuning step.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{footprint, SceneSample};
use crate::decoder::TuningStrategy;
use crate::encoders::{global_average_pool, VisualFeature};
use crate::error::{Error, Result};
use crate::graph::{GradMode, Graph, Var};
use crate::loss::{seg_loss, semantic_loss, total_loss, LossConfig};
use crate::metrics::{MetricReport, RunMeta};
use crate::model::GavsModel;
use crate::optim::Adam;
use crate::sap::{PromptTokens, PROMPT_SLOTS};
use crate::tensor::Tensor;

/// Stream offsets that keep the batch, pretraining and shuffle RNGs apart
/// from the initialization RNG seeded with the same run seed.
const BATCH_STREAM: u64 = 1;
const PRETRAIN_STREAM: u64 = 2;
const SHUFFLE_STREAM: u64 = 3;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub seg: f64,
    pub sem: f64,
}

fn frame_chw(sample: &SceneSample) -> Tensor {
    let s = sample.image_size;
    sample.frame().reshape(&[3, s, s]).expect("frame is [1, 3, S, S]")
}

/// `F_V` for every sample, computed with the current weights.
pub fn cache_visual(model: &GavsModel, samples: &[SceneSample]) -> Result<Vec<Tensor>> {
    samples.iter().map(|s| model.precompute_visual(&frame_chw(s))).collect()
}

/// Mean of scalar nodes.
fn mean_of(g: &mut Graph<'_>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

/// `(L, L_seg, L_sem)` for a batch. `L_seg` is averaged over clips; the
/// semantic term applies when the model produces a visual embedding.
pub fn batch_loss(
    g: &mut Graph<'_>,
    model: &GavsModel,
    batch: &[&SceneSample],
    cached: Option<&[&Tensor]>,
) -> Result<(Var, Var, Var)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut segs = Vec::with_capacity(batch.len());
    let mut vis = Vec::new();
    let mut aud = Vec::new();
    for (i, sample) in batch.iter().enumerate() {
        let cache = cached.map(|c| core::slice::from_ref(c[i]));
        let out = model.forward_clip(g, &sample.frame(), &sample.audio_tensor(), cache)?;
        let gt = sample.mask_tensor();
        for m in &out.masks {
            segs.push(seg_loss(g, m.logits, &gt)?);
        }
        if let Some(v) = out.visual_embed {
            vis.push(v);
            aud.push(out.audio_embed);
        }
    }
    let seg = mean_of(g, &segs)?;
    let cfg = LossConfig::from(&model.cfg.train);
    let sem = if vis.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        semantic_loss(g, &vis, &aud, &cfg)?
    };
    let total = total_loss(g, seg, sem, cfg.lambda)?;
    Ok((total, seg, sem))
}

/// One forward, backward and Adam update over `batch`. A non-finite loss
/// aborts before any parameter changes and names the offending tensors.
pub fn train_step(
    model: &mut GavsModel,
    adam: &mut Adam,
    batch: &[&SceneSample],
    cached: Option<&[&Tensor]>,
) -> Result<StepLoss> {
    let (loss, grads) = {
        let mut g = Graph::new(&model.store, GradMode::Trainable).with_check_finite(model.cfg.train.check_finite);
        let (total, seg, sem) = batch_loss(&mut g, model, batch, cached)?;
        let loss = StepLoss {
            total: g.value(total).item()?,
            seg: g.value(seg).item()?,
            sem: g.value(sem).item()?,
        };
        if !loss.total.is_finite() {
            return Err(Error::NonFinite(g.non_finite_nodes()));
        }
        (loss, g.backward(total)?)
    };
    adam.step(&mut model.store, &grads)?;
    Ok(loss)
}

/// Endless sequence of shuffled passes over `0..n`, cut into batches.
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        Self {
            rng: stream_rng(seed, BATCH_STREAM),
            order: (0..n).collect(),
            pos: n,
            batch: batch.min(n),
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let i = self.order[self.pos];
            self.pos += 1;
            if !out.contains(&i) {
                out.push(i);
            }
        }
        out
    }
}

/// Tunes `model` on `data` for `cfg.train.steps` steps. `on_step` sees the
/// step index and its losses.
pub fn fit(model: &mut GavsModel, data: &[SceneSample], mut on_step: impl FnMut(usize, &StepLoss)) -> Result<Vec<StepLoss>> {
    if data.is_empty() {
        return Err(Error::Contract("no training scenes".into()));
    }
    let t = model.cfg.train.clone();
    let cache = if model.visual_is_frozen() {
        Some(cache_visual(model, data)?)
    } else {
        None
    };
    let mut adam = Adam::new(t.lr, t.beta1, t.beta2, t.adam_eps);
    let mut sampler = BatchSampler::new(data.len(), t.batch_size, model.cfg.seed);
    let mut log = Vec::with_capacity(t.steps);
    for step in 0..t.steps {
        let idx = sampler.next_batch();
        let batch: Vec<&SceneSample> = idx.iter().map(|&i| &data[i]).collect();
        let cached: Option<Vec<&Tensor>> = cache.as_ref().map(|c| idx.iter().map(|&i| &c[i]).collect());
        let loss = train_step(model, &mut adam, &batch, cached.as_deref())?;
        on_step(step, &loss);
        log.push(loss);
    }
    Ok(log)
}

fn pretrain_tunes(name: &str) -> bool {
    name.starts_with("visual.backbone.")
        || name.starts_with("pretrain.")
        || (name.starts_with("decoder.") && TuningStrategy::FineTune.tunes(name))
}

/// Prompt tokens for a class set: `base + reshape(multi_hot · table)`.
pub fn class_prompt(g: &mut Graph<'_>, model: &GavsModel, classes: &BTreeSet<usize>) -> Result<PromptTokens> {
    let c = model.cfg.train.num_classes;
    let mut hot = vec![0.0; c];
    for &k in classes {
        if k >= c {
            return Err(Error::Config(format!("class {k} outside 0..{c}")));
        }
        hot[k] = 1.0;
    }
    let hot = g.constant(Tensor::matrix(1, c, hot)?);
    let table = g.param(model.class_prompts);
    let flat = g.matmul(hot, table)?;
    let tokens = g.reshape(flat, &[PROMPT_SLOTS, model.cfg.encoder.d_v])?;
    let base = g.param(model.decoder.base_tokens);
    Ok(PromptTokens(g.add(base, tokens)?))
}

/// Union of the footprints of the objects whose class is in `classes`.
pub fn class_mask(sample: &SceneSample, classes: &BTreeSet<usize>) -> Tensor {
    let m = sample.mask_size;
    let mut mask = vec![0.0; m * m];
    for o in sample.meta.objects.iter().filter(|o| classes.contains(&o.class)) {
        for (dst, on) in mask.iter_mut().zip(footprint(o, sample.image_size, m)) {
            if on {
                *dst = 1.0;
            }
        }
    }
    Tensor::new(vec![m, m], mask).expect("mask sized from sample")
}

fn pretrain_targets(rng: &mut ChaCha8Rng, sample: &SceneSample) -> BTreeSet<usize> {
    let present: Vec<usize> = sample.meta.objects.iter().map(|o| o.class).collect();
    if present.len() == 1 || rng.random_bool(0.5) {
        return present.into_iter().collect();
    }
    loop {
        let pick: BTreeSet<usize> = present.iter().copied().filter(|_| rng.random_bool(0.5)).collect();
        if !pick.is_empty() {
            return pick;
        }
    }
}

/// Segmentation from class prompts plus class presence, averaged over the batch.
fn pretrain_loss(g: &mut Graph<'_>, model: &GavsModel, batch: &[(&SceneSample, BTreeSet<usize>)]) -> Result<Var> {
    let c = model.cfg.train.num_classes;
    let mut terms = Vec::with_capacity(2 * batch.len());
    for (sample, targets) in batch {
        let fv: VisualFeature = model.visual.encode_frame(g, &frame_chw(sample))?;
        let prompt = class_prompt(g, model, targets)?;
        let out = model.decoder.forward(g, prompt, &fv, TuningStrategy::FineTune)?;
        terms.push(seg_loss(g, out.mask.logits, &class_mask(sample, targets))?);
        let pooled = global_average_pool(g, &fv)?;
        let logits = model.presence_head.forward(g, pooled)?;
        let mut present = vec![0.0; c];
        for o in &sample.meta.objects {
            present[o.class] = 1.0;
        }
        terms.push(g.bce_with_logits(logits, &Tensor::vector(present))?);
    }
    mean_of(g, &terms)
}

/// Trains backbone, decoder and the pretraining heads on `corpus`, then
/// restores the configured trainable set. Returns the per-step losses.
pub fn pretrain(model: &mut GavsModel, corpus: &[SceneSample], mut on_step: impl FnMut(usize, f64)) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::Contract("empty pretraining corpus".into()));
    }
    let t = model.cfg.train.clone();
    for (_, p) in model.store.iter_mut() {
        p.trainable = pretrain_tunes(&p.name);
    }
    let mut adam = Adam::new(t.pretrain_lr, t.beta1, t.beta2, t.adam_eps);
    let mut sampler = BatchSampler::new(corpus.len(), t.batch_size, model.cfg.seed ^ PRETRAIN_STREAM);
    let mut rng = stream_rng(model.cfg.seed, PRETRAIN_STREAM);
    let mut log = Vec::with_capacity(t.pretrain_steps);
    let result = (|| {
        for step in 0..t.pretrain_steps {
            let batch: Vec<_> = sampler
                .next_batch()
                .into_iter()
                .map(|i| (&corpus[i], pretrain_targets(&mut rng, &corpus[i])))
                .collect();
            let (loss, grads) = {
                let mut g = Graph::new(&model.store, GradMode::Trainable).with_check_finite(t.check_finite);
                let l = pretrain_loss(&mut g, model, &batch)?;
                let v = g.value(l).item()?;
                if !v.is_finite() {
                    return Err(Error::NonFinite(g.non_finite_nodes()));
                }
                (v, g.backward(l)?)
            };
            adam.step(&mut model.store, &grads)?;
            on_step(step, loss);
            log.push(loss);
        }
        Ok(())
    })();
    model.seed_prompt_bias();
    model.apply_trainable();
    result.map(|()| log)
}

/// Mean IoU of class-prompted masks on `samples`, a check that pretraining
/// produced a promptable segmenter.
pub fn pretrain_miou(model: &GavsModel, samples: &[SceneSample]) -> Result<f64> {
    let mut preds = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    for s in samples {
        let mut g = Graph::new(&model.store, GradMode::None);
        let fv = model.visual.encode_frame(&mut g, &frame_chw(s))?;
        let targets = s.meta.sounding_classes.clone();
        let prompt = class_prompt(&mut g, model, &targets)?;
        let out = model.decoder.forward(&mut g, prompt, &fv, TuningStrategy::FineTune)?;
        preds.push(out.mask.binary(&g));
        gts.push(s.mask_bool());
    }
    crate::metrics::miou(&preds, &gts)
}

/// A derangement of `0..n` (for `n ≥ 2`): every sample receives another
/// sample's audio.
pub fn audio_derangement(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, SHUFFLE_STREAM));
    let mut perm = vec![0; n];
    for k in 0..n {
        perm[order[k]] = order[(k + 1) % n];
    }
    perm
}

/// Sigmoid probability maps for `samples`. With `audio_from`, sample `i`
/// is paired with the audio of sample `audio_from[i]`.
pub fn predict(model: &GavsModel, samples: &[SceneSample], audio_from: Option<&[usize]>) -> Result<Vec<Vec<f64>>> {
    if let Some(p) = audio_from {
        if p.len() != samples.len() || p.iter().any(|&j| j >= samples.len()) {
            return Err(Error::Contract("audio permutation does not match the samples".into()));
        }
    }
    let mut out = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let audio = &samples[audio_from.map_or(i, |p| p[i])];
        let mut g = Graph::new(&model.store, GradMode::None);
        let clip = model.forward_clip(&mut g, &s.frame(), &audio.audio_tensor(), None)?;
        out.push(clip.masks[0].probabilities(&g).into_data());
    }
    Ok(out)
}

/// Scores `model` on `samples`.
pub fn evaluate(model: &GavsModel, samples: &[SceneSample], audio_from: Option<&[usize]>, meta: RunMeta) -> Result<MetricReport> {
    let probs = predict(model, samples, audio_from)?;
    let gts: Vec<Vec<bool>> = samples.iter().map(SceneSample::mask_bool).collect();
    let ids: Vec<String> = samples.iter().map(|s| s.meta.id.clone()).collect();
    let width = samples.first().map_or(1, |s| s.mask_size);
    MetricReport::compute(&ids, &probs, &gts, width, model.cfg.eval.beta2, meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::GavsConfig;
    use crate::data::{generate, DatasetSpec};
    use crate::decoder::FusionMode;

    fn tiny_config() -> GavsConfig {
        let mut cfg = GavsConfig::default();
        cfg.encoder.image_height = 16;
        cfg.encoder.image_width = 16;
        cfg.encoder.d_v = 16;
        cfg.encoder.n_layers = 1;
        cfg.encoder.mlp_hidden = 16;
        cfg.encoder.adapter_dim = 4;
        cfg.encoder.d_m = 8;
        cfg.encoder.audio_hidden = 8;
        cfg.decoder.n_decoder_layers = 1;
        cfg.decoder.mlp_hidden = 16;
        cfg.decoder.cola_rank = 4;
        cfg.decoder.adapter_rank = 4;
        cfg.train.batch_size = 4;
        cfg
    }

    fn scenes(n: usize, seed: u64) -> Vec<SceneSample> {
        generate(&DatasetSpec {
            num_scenes: n,
            image_size: 16,
            mask_size: 16,
            min_object_size: 5,
            max_object_size: 7,
            seed,
            ..DatasetSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_lr_leaves_parameters_bitwise_unchanged() {
        let mut cfg = tiny_config();
        cfg.train.lr = 0.0;
        let mut model = GavsModel::new(&cfg).unwrap();
        let before = model.store.clone();
        let data = scenes(8, 1);
        let batch: Vec<&SceneSample> = data.iter().take(4).collect();
        let mut adam = Adam::new(0.0, 0.9, 0.999, 1e-8);
        train_step(&mut model, &mut adam, &batch, None).unwrap();
        for ((_, a), (_, b)) in model.store.iter().zip(before.iter()) {
            assert!(a.tensor.bit_eq(&b.tensor), "{}", a.name);
        }
    }

    #[test]
    fn nothing_trainable_means_constant_loss() {
        let mut cfg = tiny_config();
        cfg.decoder.tuning_strategy = TuningStrategy::Freeze;
        cfg.sap.enabled = false;
        cfg.train.freeze_prompt_path = true;
        let mut model = GavsModel::new(&cfg).unwrap();
        assert_eq!(model.store.num_trainable_elements(), 0);
        let data = scenes(8, 2);
        let batch: Vec<&SceneSample> = data.iter().collect();
        let mut adam = Adam::new(1e-2, 0.9, 0.999, 1e-8);
        let log: Vec<StepLoss> = (0..3)
            .map(|_| train_step(&mut model, &mut adam, &batch, None).unwrap())
            .collect();
        assert!(log.windows(2).all(|w| w[0].total.to_bits() == w[1].total.to_bits()));
    }

    #[test]
    fn semantic_term_only_with_sap_in_prompt_mode() {
        let data = scenes(4, 3);
        let batch: Vec<&SceneSample> = data.iter().collect();
        for (sap, mode, expect) in [
            (true, FusionMode::AudioPrompt, true),
            (false, FusionMode::AudioPrompt, false),
            (true, FusionMode::AvFusion, false),
        ] {
            let mut cfg = tiny_config();
            cfg.sap.enabled = sap;
            cfg.decoder.fusion_mode = mode;
            let model = GavsModel::new(&cfg).unwrap();
            let mut g = Graph::new(&model.store, GradMode::None);
            let (_, _, sem) = batch_loss(&mut g, &model, &batch, None).unwrap();
            let value = g.value(sem).item().unwrap();
            assert_eq!(value != 0.0, expect, "sap {sap} mode {mode:?}");
        }
    }

    #[test]
    fn cached_visual_matches_recomputed() {
        let model = GavsModel::new(&tiny_config()).unwrap();
        let data = scenes(4, 4);
        let cache = cache_visual(&model, &data).unwrap();
        let batch: Vec<&SceneSample> = data.iter().collect();
        let cached: Vec<&Tensor> = cache.iter().collect();
        let mut g1 = Graph::new(&model.store, GradMode::None);
        let (a, _, _) = batch_loss(&mut g1, &model, &batch, Some(&cached)).unwrap();
        let mut g2 = Graph::new(&model.store, GradMode::None);
        let (b, _, _) = batch_loss(&mut g2, &model, &batch, None).unwrap();
        assert!(g1.value(a).bit_eq(g2.value(b)));
    }

    #[test]
    fn training_replays_exactly() {
        let mut cfg = tiny_config();
        cfg.train.steps = 4;
        let data = scenes(12, 5);
        let run = || {
            let mut model = GavsModel::new(&cfg).unwrap();
            fit(&mut model, &data, |_, _| {}).unwrap()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.total.to_bits() == y.total.to_bits()));
    }

    #[test]
    fn sampler_yields_distinct_indices_and_covers_each_pass() {
        let mut s = BatchSampler::new(10, 4, 7);
        let mut seen = BTreeSet::new();
        for _ in 0..5 {
            let b = s.next_batch();
            assert_eq!(b.iter().collect::<BTreeSet<_>>().len(), 4);
            seen.extend(b);
        }
        assert_eq!(seen.len(), 10);
        assert_eq!(BatchSampler::new(3, 8, 0).next_batch().len(), 3);
    }

    #[test]
    fn derangement_moves_every_index() {
        for n in 2..20 {
            let p = audio_derangement(n, n as u64);
            assert!(p.iter().enumerate().all(|(i, &j)| i != j));
            assert_eq!(p.iter().collect::<BTreeSet<_>>().len(), n);
        }
    }

    #[test]
    fn pretraining_restores_the_tuned_set() {
        let mut cfg = tiny_config();
        cfg.train.pretrain_steps = 2;
        let mut model = GavsModel::new(&cfg).unwrap();
        let before = model.trainable_set();
        let backbone = model.store.find("visual.backbone.patch_embed.weight").unwrap();
        let w0 = model.store.tensor(backbone).clone();
        pretrain(&mut model, &scenes(8, 6), |_, _| {}).unwrap();
        assert_eq!(model.trainable_set(), before);
        assert!(!model.store.tensor(backbone).bit_eq(&w0));
    }

    #[test]
    fn toy_training_halves_the_loss() {
        // Two classes, one object per scene, no nuisance.
        let data = generate(&DatasetSpec {
            num_scenes: 16,
            num_classes: 4,
            anchor_classes: Some(vec![0, 1]),
            max_objects: 1,
            image_size: 16,
            mask_size: 16,
            min_object_size: 5,
            max_object_size: 7,
            seed: 8,
            ..DatasetSpec::default()
        })
        .unwrap();
        let mut cfg = tiny_config();
        cfg.train.num_classes = 4;
        cfg.encoder.audio_in = 8;
        cfg.decoder.tuning_strategy = TuningStrategy::FineTune;
        cfg.train.steps = 200;
        cfg.train.lr = 3e-3;
        let mut model = GavsModel::new(&cfg).unwrap();
        let log = fit(&mut model, &data, |_, _| {}).unwrap();
        let last = log[log.len() - 10..].iter().map(|l| l.total).sum::<f64>() / 10.0;
        assert!(last <= 0.5 * log[0].total, "first {} last {last}", log[0].total);
    }
}
