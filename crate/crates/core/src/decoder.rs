//! The audio source decoder.
//!
//! Each two-way layer runs, in order:
//!
//! 1. token self-attention, `F_P ← LN(F_P + SA(F_P))`;
//! 2. tokens attend to the visual field, `F_context = F_P + CMA(F_P, F_Vᵀ)`;
//! 3. the token MLP with the correlation adapter,
//!    `F_P′ = ColA(MLP(F_context)) + MLP(F_context)`;
//! 4. `K = F_context + F_P′`, which becomes the next layer's tokens;
//! 5. the visual field attends to the tokens, `F_V′ = F_Vᵀ + CMA(F_Vᵀ, K)`.
//!
//! Layer norms follow each residual sum (post-norm); the pre-norm sums are
//! kept in a [`LayerTrace`]. The final visual output is the mask embedding,
//! upscaled ×4 by two stride-2 transposed convolutions and read out by the
//! MLP-transformed query token in slot 1.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::VisualFeature;
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{embedding, Activation, BottleneckAdapter, LayerNorm, Mlp, MultiHeadAttention};
use crate::params::{uniform, ParamId, ParamStore};
use crate::sap::{PromptTokens, PROMPT_SLOTS};
use crate::tensor::Tensor;

/// Which decoder parameters are tuned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuningStrategy {
    Freeze,
    FineTune,
    AvAdapter,
    VaAdapter,
    Cola,
    ColaAvVa,
}

impl TuningStrategy {
    pub const ALL: [TuningStrategy; 6] = [
        TuningStrategy::Freeze,
        TuningStrategy::FineTune,
        TuningStrategy::AvAdapter,
        TuningStrategy::VaAdapter,
        TuningStrategy::Cola,
        TuningStrategy::ColaAvVa,
    ];

    pub fn uses_cola(self) -> bool {
        matches!(self, TuningStrategy::Cola | TuningStrategy::ColaAvVa)
    }

    pub fn uses_av_adapter(self) -> bool {
        matches!(self, TuningStrategy::AvAdapter | TuningStrategy::ColaAvVa)
    }

    pub fn uses_va_adapter(self) -> bool {
        matches!(self, TuningStrategy::VaAdapter | TuningStrategy::ColaAvVa)
    }

    /// Whether decoder parameter `name` is tuned under this strategy.
    pub fn tunes(self, name: &str) -> bool {
        if !name.starts_with(DECODER_PREFIX) {
            return false;
        }
        let cola = name.contains(".cola.");
        let av = name.contains(".av_adapter.");
        let va = name.contains(".va_adapter.");
        match self {
            TuningStrategy::Freeze => false,
            TuningStrategy::FineTune => !(cola || av || va),
            TuningStrategy::AvAdapter => av,
            TuningStrategy::VaAdapter => va,
            TuningStrategy::Cola => cola,
            TuningStrategy::ColaAvVa => cola || av || va,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TuningStrategy::Freeze => "freeze",
            TuningStrategy::FineTune => "fine_tune",
            TuningStrategy::AvAdapter => "av_adapter",
            TuningStrategy::VaAdapter => "va_adapter",
            TuningStrategy::Cola => "cola",
            TuningStrategy::ColaAvVa => "cola_av_va",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

/// How audio enters the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Audio builds the prompt tokens.
    AudioPrompt,
    /// Audio is projected and added to every visual token; the prompt is the
    /// decoder's learned default token set.
    AvFusion,
}

impl FusionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::AudioPrompt => "audio_prompt",
            FusionMode::AvFusion => "av_fusion",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [FusionMode::AudioPrompt, FusionMode::AvFusion]
            .into_iter()
            .find(|m| m.as_str() == s)
    }
}

/// `decoder.*` in the run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub n_decoder_layers: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub cola_rank: usize,
    /// Rank of the AV/VA attention adapters.
    pub adapter_rank: usize,
    pub tuning_strategy: TuningStrategy,
    pub fusion_mode: FusionMode,
    pub feedback_enabled: bool,
    pub mlp_activation: Activation,
    pub adapter_activation: Activation,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            n_decoder_layers: 2,
            n_heads: 4,
            mlp_hidden: 128,
            cola_rank: 8,
            adapter_rank: 8,
            tuning_strategy: TuningStrategy::Cola,
            fusion_mode: FusionMode::AudioPrompt,
            feedback_enabled: false,
            mlp_activation: Activation::Gelu,
            adapter_activation: Activation::Relu,
        }
    }
}

pub const DECODER_PREFIX: &str = "decoder.";

/// Intermediates of one decoder layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerTrace {
    /// Tokens after self-attention.
    pub tokens: Var,
    /// `F_P + CMA(F_P, F_Vᵀ)` before its layer norm.
    pub context_sum: Var,
    /// Normalized `F_context`, the operand of the MLP and of `K`.
    pub context: Var,
    /// `F_P′`.
    pub prompt_update: Var,
    /// `K = F_context + F_P′` before its layer norm.
    pub key: Var,
    /// `F_Vᵀ + CMA(F_Vᵀ, K)` before its layer norm.
    pub visual_sum: Var,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub av_attn: MultiHeadAttention,
    pub av_adapter: BottleneckAdapter,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub cola: BottleneckAdapter,
    pub norm3: LayerNorm,
    pub va_attn: MultiHeadAttention,
    pub va_adapter: BottleneckAdapter,
    pub norm4: LayerNorm,
}

impl DecoderLayer {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, cfg: &DecoderConfig) -> Result<Self> {
        let n = |s: &str| format!("{name}.{s}");
        Ok(Self {
            self_attn: MultiHeadAttention::new(store, rng, &n("self_attn"), d, cfg.n_heads)?,
            norm1: LayerNorm::new(store, &n("norm1"), d)?,
            av_attn: MultiHeadAttention::new(store, rng, &n("av_attn"), d, cfg.n_heads)?,
            av_adapter: BottleneckAdapter::new(store, rng, &n("av_adapter"), d, cfg.adapter_rank, cfg.adapter_activation)?,
            norm2: LayerNorm::new(store, &n("norm2"), d)?,
            mlp: Mlp::new(store, rng, &n("mlp"), (d, cfg.mlp_hidden, d), cfg.mlp_activation)?,
            cola: BottleneckAdapter::new(store, rng, &n("cola"), d, cfg.cola_rank, cfg.adapter_activation)?,
            norm3: LayerNorm::new(store, &n("norm3"), d)?,
            va_attn: MultiHeadAttention::new(store, rng, &n("va_attn"), d, cfg.n_heads)?,
            va_adapter: BottleneckAdapter::new(store, rng, &n("va_adapter"), d, cfg.adapter_rank, cfg.adapter_activation)?,
            norm4: LayerNorm::new(store, &n("norm4"), d)?,
        })
    }

    /// Tokens attend to the visual field (the AV cross-modal attention).
    pub fn cross_modal_av(&self, g: &mut Graph<'_>, tokens: Var, visual: Var, keys: Var, adapter: bool) -> Result<Var> {
        let out = self.av_attn.forward(g, tokens, keys, visual)?;
        if adapter {
            self.av_adapter.forward(g, out)
        } else {
            Ok(out)
        }
    }

    /// `ColA(h) = W_up · act(W_down · h)`, without the residual.
    pub fn cola_forward(&self, g: &mut Graph<'_>, h: Var) -> Result<Var> {
        self.cola.delta(g, h)
    }

    /// Returns `(tokens, visual, trace)`. `visual` and `pos` are `[H·W, d_V]`.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        tokens: Var,
        visual: Var,
        pos: Var,
        strategy: TuningStrategy,
    ) -> Result<(Var, Var, LayerTrace)> {
        let sa = self.self_attn.forward(g, tokens, tokens, tokens)?;
        let t = g.add(tokens, sa)?;
        let t = self.norm1.forward(g, t)?;

        let visual_keys = g.add(visual, pos)?;
        let av = self.cross_modal_av(g, t, visual, visual_keys, strategy.uses_av_adapter())?;
        let context_sum = g.add(t, av)?;
        let context = self.norm2.forward(g, context_sum)?;

        let h = self.mlp.forward(g, context)?;
        let prompt_update = if strategy.uses_cola() {
            let delta = self.cola_forward(g, h)?;
            g.add(delta, h)?
        } else {
            h
        };

        let key = g.add(context, prompt_update)?;
        let tokens_out = self.norm3.forward(g, key)?;

        let mut va = self.va_attn.forward(g, visual_keys, tokens_out, tokens_out)?;
        if strategy.uses_va_adapter() {
            va = self.va_adapter.forward(g, va)?;
        }
        let visual_sum = g.add(visual, va)?;
        let visual_out = self.norm4.forward(g, visual_sum)?;

        Ok((
            tokens_out,
            visual_out,
            LayerTrace {
                tokens: t,
                context_sum,
                context,
                prompt_update,
                key,
                visual_sum,
            },
        ))
    }
}

#[derive(Clone, Debug)]
pub struct TransposedConv {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl TransposedConv {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let bound = libm::sqrt(3.0 / cin as f64);
        Ok(Self {
            kernel: store.add(format!("{name}.kernel"), uniform(rng, &[cin, cout, 2, 2], bound))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (k, b) = (g.param(self.kernel), g.param(self.bias));
        g.conv_transpose2d(x, k, Some(b))
    }
}

/// Logits `M_pred` of shape `[4H, 4W]`.
#[derive(Clone, Copy, Debug)]
pub struct MaskPrediction {
    pub logits: Var,
}

/// Binarization threshold applied to sigmoid probabilities.
pub const MASK_THRESHOLD: f64 = 0.5;

impl MaskPrediction {
    pub fn probabilities(&self, g: &Graph<'_>) -> Tensor {
        let t = g.value(self.logits);
        Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&z| crate::graph::sigmoid(z)).collect(),
        )
        .expect("shape preserved")
    }

    pub fn binary(&self, g: &Graph<'_>) -> Vec<bool> {
        self.probabilities(g).data().iter().map(|&p| p > MASK_THRESHOLD).collect()
    }
}

pub struct DecoderOutput {
    pub tokens: PromptTokens,
    /// `F_M`, the final visual output.
    pub mask_embedding: VisualFeature,
    pub mask: MaskPrediction,
    pub traces: Vec<LayerTrace>,
}

#[derive(Clone, Debug)]
pub struct AudioSourceDecoder {
    cfg: DecoderConfig,
    d_v: usize,
    pub layers: Vec<DecoderLayer>,
    pub pos: ParamId,
    pub base_tokens: ParamId,
    pub upscale: [TransposedConv; 2],
    pub mask_mlp: Mlp,
}

impl AudioSourceDecoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        cfg: &DecoderConfig,
        d_v: usize,
        grid: (usize, usize),
    ) -> Result<Self> {
        if d_v % 8 != 0 {
            return Err(Error::Config(format!("d_v {d_v} must be divisible by 8 for upscaling")));
        }
        let layers = (0..cfg.n_decoder_layers)
            .map(|i| DecoderLayer::new(store, rng, &format!("decoder.layers.{i}"), d_v, cfg))
            .collect::<Result<Vec<_>>>()?;
        let pos = embedding(store, rng, "decoder.pos", &[grid.0 * grid.1, d_v], 0.1)?;
        let base_tokens = embedding(store, rng, "decoder.base_tokens", &[PROMPT_SLOTS, d_v], 1.0)?;
        let upscale = [
            TransposedConv::new(store, rng, "decoder.upscale.0", d_v, d_v / 4)?,
            TransposedConv::new(store, rng, "decoder.upscale.1", d_v / 4, d_v / 8)?,
        ];
        let mask_mlp = Mlp::new(store, rng, "decoder.mask_mlp", (d_v, d_v, d_v / 8), cfg.mlp_activation)?;
        Ok(Self {
            cfg: cfg.clone(),
            d_v,
            layers,
            pos,
            base_tokens,
            upscale,
            mask_mlp,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    /// The learned default token set used when audio does not build the prompt.
    pub fn default_tokens(&self, g: &mut Graph<'_>) -> PromptTokens {
        PromptTokens(g.param(self.base_tokens))
    }

    /// Runs every layer and the mask head.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        prompt: PromptTokens,
        fv: &VisualFeature,
        strategy: TuningStrategy,
    ) -> Result<DecoderOutput> {
        if g.shape(prompt.0) != [PROMPT_SLOTS, self.d_v] {
            return Err(shape_err("decoder tokens", g.shape(prompt.0), &[PROMPT_SLOTS, self.d_v]));
        }
        let pos = g.param(self.pos);
        if g.shape(fv.tokens) != g.shape(pos) {
            return Err(shape_err("decoder visual", g.shape(fv.tokens), g.shape(pos)));
        }
        let mut tokens = prompt.0;
        let mut visual = fv.tokens;
        let mut traces = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (t, v, trace) = layer.forward(g, tokens, visual, pos, strategy)?;
            tokens = t;
            visual = v;
            traces.push(trace);
        }
        let mask_embedding = VisualFeature {
            tokens: visual,
            height: fv.height,
            width: fv.width,
        };
        let fm = mask_embedding.channel_major(g)?;
        let up = self.upscale_mask_embedding(g, fm)?;
        let tokens = PromptTokens(tokens);
        let mask = self.predict_mask(g, up, tokens)?;
        Ok(DecoderOutput {
            tokens,
            mask_embedding,
            mask,
            traces,
        })
    }

    /// `[d_V, H, W]` → `[d_V/8, 4H, 4W]`.
    pub fn upscale_mask_embedding(&self, g: &mut Graph<'_>, fm: Var) -> Result<Var> {
        let x = self.upscale[0].forward(g, fm)?;
        let x = self.cfg.mlp_activation.apply(g, x)?;
        self.upscale[1].forward(g, x)
    }

    /// `M_pred[y, x] = ⟨F_up[·, y, x], MLP(F_P[1])⟩`.
    pub fn predict_mask(&self, g: &mut Graph<'_>, up: Var, tokens: PromptTokens) -> Result<MaskPrediction> {
        let query = tokens.mask_query(g)?;
        let query = self.mask_mlp.forward(g, query)?;
        dot_mask(g, up, query)
    }
}

/// Per-pixel inner product of `up: [c, h, w]` with `query: [c]`.
pub fn dot_mask(g: &mut Graph<'_>, up: Var, query: Var) -> Result<MaskPrediction> {
    let s = g.shape(up).to_vec();
    if s.len() != 3 || g.shape(query) != [s[0]] {
        return Err(shape_err("predict_mask", &s, g.shape(query)));
    }
    let q = g.reshape(query, &[1, s[0]])?;
    let flat = g.reshape(up, &[s[0], s[1] * s[2]])?;
    let logits = g.matmul(q, flat)?;
    Ok(MaskPrediction {
        logits: g.reshape(logits, &[s[1], s[2]])?,
    })
}

/// `F_V + F_M`, used as the visual input of a second decoder pass.
pub fn mask_embedding_feedback(g: &mut Graph<'_>, fm: &VisualFeature, fv: &VisualFeature) -> Result<VisualFeature> {
    Ok(VisualFeature {
        tokens: g.add(fv.tokens, fm.tokens)?,
        height: fv.height,
        width: fv.width,
    })
}
