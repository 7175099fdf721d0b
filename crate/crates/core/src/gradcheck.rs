//! Central finite-difference gradient oracle.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::GavsConfig;
use crate::data::{generate, DatasetSpec, SceneSample};
use crate::decoder::{FusionMode, TuningStrategy};
use crate::error::Result;
use crate::graph::{GradMode, Graph, Var};
use crate::model::GavsModel;
use crate::nn::Activation;
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Step used by [`finite_diff_gradcheck`] unless a caller overrides it.
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat coordinate of the worst mismatch.
    pub worst: Option<(String, usize)>,
    /// Autodiff and finite-difference values at `worst`.
    pub worst_values: (f64, f64),
    pub coordinates: usize,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// `|a - b| / max(1e-8, |a| + |b|)`
pub fn relative_error(ad: f64, fd: f64) -> f64 {
    libm::fabs(ad - fd) / (libm::fabs(ad) + libm::fabs(fd)).max(1e-8)
}

/// Compares autodiff gradients of the scalar `f` against central differences
/// `(f(θ+h) - f(θ-h)) / 2h`, one coordinate at a time, over every trainable
/// parameter in `store`. `store` is restored bit-for-bit on return.
pub fn finite_diff_gradcheck<F>(store: &mut ParamStore, step: f64, f: F) -> Result<GradcheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    let analytic: Vec<Option<Vec<f64>>> = {
        let mut g = Graph::new(store, GradMode::Trainable);
        let loss = f(&mut g)?;
        let grads = g.backward(loss)?;
        store
            .iter()
            .map(|(id, _)| grads.param(id).map(<[f64]>::to_vec))
            .collect()
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store, GradMode::None);
        let loss = f(&mut g)?;
        g.value(loss).item()
    };

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        coordinates: 0,
    };
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        for i in 0..store.tensor(id).numel() {
            let orig = store.tensor(id).data()[i];
            store.get_mut(id).tensor.data_mut()[i] = orig + step;
            let plus = eval(store);
            store.get_mut(id).tensor.data_mut()[i] = orig - step;
            let minus = eval(store);
            store.get_mut(id).tensor.data_mut()[i] = orig;
            let fd = (plus? - minus?) / (2.0 * step);
            let ad = analytic[id.index()].as_ref().map_or(0.0, |g| g[i]);
            let err = relative_error(ad, fd);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), i));
                report.worst_values = (ad, fd);
            }
        }
    }
    Ok(report)
}

/// Result of one named check in a suite.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradcheckReport,
}

type OpFn = for<'a, 'b> fn(&mut Graph<'a>, &'b [Var]) -> Result<Var>;

fn check_op(seed: u64, name: &'static str, shapes: &[&[usize]], f: OpFn) -> Result<SuiteEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut ids = Vec::with_capacity(shapes.len());
    for (i, s) in shapes.iter().enumerate() {
        ids.push(store.add(format!("{name}.{i}"), Tensor::from_fn(s, |_| rng.random_range(-1.0..1.0)))?);
    }
    let out_shape = {
        let mut g = Graph::new(&store, GradMode::None);
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
        let out = f(&mut g, &vars)?;
        g.shape(out).to_vec()
    };
    // A fixed random projection reduces any output to a scalar without the
    // cancellations a plain sum can cause (softmax rows sum to one).
    let proj = Tensor::from_fn(&out_shape, |_| rng.random_range(-1.0..1.0));
    let report = finite_diff_gradcheck(&mut store, DEFAULT_STEP, |g| {
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
        let out = f(g, &vars)?;
        let w = g.constant(proj.clone());
        let prod = g.mul(out, w)?;
        g.sum(prod)
    })?;
    Ok(SuiteEntry { name, report })
}

/// Finite-difference checks of every differentiable graph operation on
/// random inputs in `[-1, 1]`.
pub fn op_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let cases: [(&'static str, &[&[usize]], OpFn); 31] = [
        ("add", &[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1])),
        ("sub", &[&[3, 4], &[3, 4]], |g, v| g.sub(v[0], v[1])),
        ("mul", &[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1])),
        ("scale", &[&[3, 4]], |g, v| g.scale(v[0], -1.7)),
        ("add_scalar", &[&[3, 4]], |g, v| g.add_scalar(v[0], 0.3)),
        ("add_row", &[&[3, 4], &[4]], |g, v| g.add_row(v[0], v[1])),
        ("matmul", &[&[3, 4], &[4, 5]], |g, v| g.matmul(v[0], v[1])),
        ("matmul_broadcast", &[&[2, 3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1])),
        ("matmul_batched", &[&[2, 3, 4], &[2, 4, 2]], |g, v| g.matmul(v[0], v[1])),
        ("matmul_nt", &[&[3, 4], &[5, 4]], |g, v| g.matmul_nt(v[0], v[1])),
        ("transpose", &[&[3, 4]], |g, v| g.transpose(v[0])),
        ("reshape", &[&[3, 4]], |g, v| g.reshape(v[0], &[2, 6])),
        ("softmax_last", &[&[3, 4]], |g, v| g.softmax(v[0], 1)),
        ("softmax_middle", &[&[3, 4, 2]], |g, v| g.softmax(v[0], 1)),
        ("layer_norm", &[&[3, 5], &[5], &[5]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        ("gelu", &[&[3, 4]], |g, v| g.gelu(v[0])),
        ("relu", &[&[3, 4]], |g, v| g.relu(v[0])),
        ("sigmoid", &[&[3, 4]], |g, v| g.sigmoid(v[0])),
        ("conv_transpose2d", &[&[2, 3, 3], &[2, 3, 2, 2], &[3]], |g, v| {
            g.conv_transpose2d(v[0], v[1], Some(v[2]))
        }),
        ("slice_cols", &[&[3, 6]], |g, v| g.slice_cols(v[0], 2, 3)),
        ("concat_last", &[&[3, 2], &[3, 4]], |g, v| g.concat_last(&[v[0], v[1]])),
        ("concat_vectors", &[&[2], &[3]], |g, v| g.concat_last(&[v[0], v[1]])),
        ("row", &[&[3, 4]], |g, v| g.row(v[0], 1)),
        ("stack_rows", &[&[4], &[4]], |g, v| g.stack_rows(&[v[0], v[1]])),
        ("mean_rows", &[&[3, 4]], |g, v| g.mean_rows(v[0])),
        ("sum", &[&[3, 4]], |g, v| g.sum(v[0])),
        ("mean", &[&[3, 4]], |g, v| g.mean(v[0])),
        ("bce_with_logits", &[&[3, 4]], |g, v| {
            let t = Tensor::from_fn(&[3, 4], |i| (i % 3 == 0) as u8 as f64);
            g.bce_with_logits(v[0], &t)
        }),
        ("normalize_rows", &[&[3, 4]], |g, v| g.normalize_rows(v[0], 1e-12)),
        ("diag", &[&[4, 4]], |g, v| g.diag(v[0])),
        ("row_max_off_diag", &[&[4, 4]], |g, v| g.row_max_off_diag(v[0])),
    ];
    cases
        .iter()
        .enumerate()
        .map(|(i, (name, shapes, f))| check_op(seed.wrapping_add(i as u64), name, shapes, *f))
        .collect()
}

/// Toy configuration on an 8×8 token grid with every adapter, SAP and the
/// feedback pass switched on. Smooth activations keep finite differences
/// away from ReLU kinks.
pub fn toy_config(seed: u64) -> GavsConfig {
    let mut cfg = GavsConfig {
        seed,
        ..GavsConfig::default()
    };
    let e = &mut cfg.encoder;
    e.image_height = 16;
    e.image_width = 16;
    e.patch_size = 2;
    e.d_v = 8;
    e.n_layers = 1;
    e.n_heads = 2;
    e.mlp_hidden = 8;
    e.adapter_dim = 2;
    e.adapters_enabled = true;
    e.adapter_activation = Activation::Gelu;
    e.audio_in = 8;
    e.audio_hidden = 4;
    e.d_m = 4;
    let d = &mut cfg.decoder;
    d.n_heads = 2;
    d.mlp_hidden = 8;
    d.cola_rank = 2;
    d.adapter_rank = 2;
    d.adapter_activation = Activation::Gelu;
    d.tuning_strategy = TuningStrategy::ColaAvVa;
    d.feedback_enabled = true;
    cfg.train.num_classes = 4;
    cfg.train.batch_size = 2;
    // Cosine similarities lie in [-1, 1], so a margin above 2 keeps the
    // triplet hinge active, and its gradient under test, for any embeddings.
    cfg.train.margin = 2.1;
    cfg.train.lambda = 0.02;
    cfg
}

/// Adam steps taken before [`model_suite`] checks gradients.
pub const WARMUP_STEPS: usize = 600;
/// Learning rate of the warm-up.
pub const WARMUP_LR: f64 = 2e-3;

/// Checks the full training loss `L_seg + λ·L_sem` over a two-scene batch
/// with every parameter free, once per fusion mode.
///
/// The check runs after a short warm-up fit of that batch. Training moves
/// the zero-initialized adapter up-projections off zero, so every adapter
/// path is exercised, and it lowers the loss, which lowers the rounding
/// noise of the differences (about one ulp of `|L|` over `2h`). Fitting much
/// longer sharpens the attention maps until third-order truncation error
/// takes over, so the warm-up is kept short.
pub fn model_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let spec = DatasetSpec {
        num_classes: 4,
        num_scenes: 4,
        image_size: 16,
        mask_size: 32,
        min_object_size: 5,
        max_object_size: 7,
        seed,
        ..DatasetSpec::default()
    };
    let scenes = generate(&spec)?;
    let batch: Vec<&SceneSample> = scenes.iter().take(2).collect();
    let mut out = Vec::new();
    for (name, mode) in [
        ("model_audio_prompt", FusionMode::AudioPrompt),
        ("model_av_fusion", FusionMode::AvFusion),
    ] {
        let mut cfg = toy_config(seed);
        cfg.decoder.fusion_mode = mode;
        let mut model = GavsModel::new(&cfg)?;
        for (_, p) in model.store.iter_mut() {
            p.trainable = true;
        }
        let mut adam = Adam::new(WARMUP_LR, 0.9, 0.999, 1e-8);
        for _ in 0..WARMUP_STEPS {
            crate::train::train_step(&mut model, &mut adam, &batch, None)?;
        }
        let mut store = core::mem::take(&mut model.store);
        let report = finite_diff_gradcheck(&mut store, DEFAULT_STEP, |g| {
            crate::train::batch_loss(g, &model, &batch, None).map(|(total, _, _)| total)
        })?;
        model.store = store;
        out.push(SuiteEntry { name, report });
    }
    Ok(out)
}
