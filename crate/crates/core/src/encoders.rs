//! Visual and audio encoders.
//!
//! The visual encoder is a small ViT: patch embedding, learned positional
//! embedding, pre-norm transformer blocks and a final layer norm. Each block
//! carries a bottleneck adapter on its MLP sublayer output. The audio encoder
//! is a two-layer MLP applied to each frame's audio vector independently.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{embedding, Activation, BottleneckAdapter, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Hyperparameters for both encoders (`encoder.*` in the run config).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub d_v: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub adapter_dim: usize,
    pub adapters_enabled: bool,
    pub mlp_activation: Activation,
    pub adapter_activation: Activation,
    /// Length of the raw per-frame audio vector.
    pub audio_in: usize,
    pub audio_hidden: usize,
    /// Audio feature width `d_m`.
    pub d_m: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            patch_size: 4,
            d_v: 64,
            n_layers: 2,
            n_heads: 4,
            mlp_hidden: 128,
            adapter_dim: 8,
            adapters_enabled: false,
            mlp_activation: Activation::Gelu,
            adapter_activation: Activation::Relu,
            audio_in: 12,
            audio_hidden: 32,
            d_m: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.image_height % p != 0 || self.image_width % p != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch size {p}",
                self.image_height, self.image_width
            )));
        }
        if self.adapter_dim == 0 || self.adapter_dim >= self.d_v {
            return Err(Error::Config(format!(
                "adapter_dim {} must be in 1..d_v ({})",
                self.adapter_dim, self.d_v
            )));
        }
        if self.n_heads == 0 || self.d_v % self.n_heads != 0 {
            return Err(Error::Config(format!("d_v {} not divisible by n_heads {}", self.d_v, self.n_heads)));
        }
        if self.audio_in == 0 || self.d_m == 0 {
            return Err(Error::Config("audio dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Feature grid `(H, W)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch_size, self.image_width / self.patch_size)
    }
}

/// Visual feature `F_V` stored token-major: `[H·W, d_V]`.
#[derive(Clone, Copy, Debug)]
pub struct VisualFeature {
    pub tokens: Var,
    pub height: usize,
    pub width: usize,
}

impl VisualFeature {
    /// Channel-major view `[d_V, H, W]`.
    pub fn channel_major(&self, g: &mut Graph<'_>) -> Result<Var> {
        let d = g.shape(self.tokens)[1];
        let t = g.transpose(self.tokens)?;
        g.reshape(t, &[d, self.height, self.width])
    }

    pub fn dim(&self, g: &Graph<'_>) -> usize {
        g.shape(self.tokens)[1]
    }
}

/// `F_VG[c]` = spatial mean of channel `c`.
pub fn global_average_pool(g: &mut Graph<'_>, fv: &VisualFeature) -> Result<Var> {
    g.mean_rows(fv.tokens)
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    mlp: Mlp,
    adapter: BottleneckAdapter,
}

#[derive(Clone, Debug)]
pub struct VisualEncoder {
    cfg: EncoderConfig,
    patch_embed: Linear,
    pos: ParamId,
    blocks: Vec<EncoderBlock>,
    norm: LayerNorm,
}

pub const VISUAL_BACKBONE_PREFIX: &str = "visual.backbone.";
pub const VISUAL_ADAPTER_PREFIX: &str = "visual.adapters.";

impl VisualEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let (h, w) = cfg.grid();
        let p = cfg.patch_size;
        let patch_embed = Linear::new(store, rng, "visual.backbone.patch_embed", 3 * p * p, cfg.d_v, true)?;
        let pos = embedding(store, rng, "visual.backbone.pos", &[h * w, cfg.d_v], 0.1)?;
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let n = format!("visual.backbone.blocks.{i}");
            blocks.push(EncoderBlock {
                norm1: LayerNorm::new(store, &format!("{n}.norm1"), cfg.d_v)?,
                attn: MultiHeadAttention::new(store, rng, &format!("{n}.attn"), cfg.d_v, cfg.n_heads)?,
                norm2: LayerNorm::new(store, &format!("{n}.norm2"), cfg.d_v)?,
                mlp: Mlp::new(
                    store,
                    rng,
                    &format!("{n}.mlp"),
                    (cfg.d_v, cfg.mlp_hidden, cfg.d_v),
                    cfg.mlp_activation,
                )?,
                adapter: BottleneckAdapter::new(
                    store,
                    rng,
                    &format!("visual.adapters.{i}"),
                    cfg.d_v,
                    cfg.adapter_dim,
                    cfg.adapter_activation,
                )?,
            });
        }
        let norm = LayerNorm::new(store, "visual.backbone.norm", cfg.d_v)?;
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            pos,
            blocks,
            norm,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Rearranges a `[3, H_img, W_img]` frame into `[H·W, 3·p·p]` patch rows.
    pub fn patchify(&self, frame: &Tensor) -> Result<Tensor> {
        let (ih, iw, p) = (self.cfg.image_height, self.cfg.image_width, self.cfg.patch_size);
        if frame.shape() != [3, ih, iw] {
            return Err(crate::error::shape_err("patchify", frame.shape(), &[3, ih, iw]));
        }
        let (gh, gw) = self.cfg.grid();
        let src = frame.data();
        let mut out = Vec::with_capacity(gh * gw * 3 * p * p);
        for py in 0..gh {
            for px in 0..gw {
                for c in 0..3 {
                    for dy in 0..p {
                        let row = (c * ih + py * p + dy) * iw + px * p;
                        out.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
        Tensor::matrix(gh * gw, 3 * p * p, out)
    }

    /// Encodes one frame. Adapters run only when `cfg.adapters_enabled`.
    pub fn encode_frame(&self, g: &mut Graph<'_>, frame: &Tensor) -> Result<VisualFeature> {
        if frame.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract("frame values must lie in [0, 1]".into()));
        }
        let patches = g.constant(self.patchify(frame)?);
        let x = self.patch_embed.forward(g, patches)?;
        let pos = g.param(self.pos);
        let mut x = g.add(x, pos)?;
        for block in &self.blocks {
            let h = block.norm1.forward(g, x)?;
            let h = block.attn.forward(g, h, h, h)?;
            x = g.add(x, h)?;
            let h = block.norm2.forward(g, x)?;
            let mut h = block.mlp.forward(g, h)?;
            if self.cfg.adapters_enabled {
                h = block.adapter.forward(g, h)?;
            }
            x = g.add(x, h)?;
        }
        let tokens = self.norm.forward(g, x)?;
        let (height, width) = self.cfg.grid();
        Ok(VisualFeature { tokens, height, width })
    }

    /// Encodes `[T, 3, H_img, W_img]` frame by frame.
    pub fn encode_frames(&self, g: &mut Graph<'_>, frames: &Tensor) -> Result<Vec<VisualFeature>> {
        let s = frames.shape();
        if s.len() != 4 {
            return Err(crate::error::shape_err("encode_frames", s, &[]));
        }
        let per = s[1] * s[2] * s[3];
        (0..s[0])
            .map(|t| {
                let frame = Tensor::new(s[1..].to_vec(), frames.data()[t * per..(t + 1) * per].to_vec())?;
                self.encode_frame(g, &frame)
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct AudioEncoder {
    mlp: Mlp,
    audio_in: usize,
}

pub const AUDIO_PREFIX: &str = "audio.";

impl AudioEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &EncoderConfig) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(
                store,
                rng,
                "audio.mlp",
                (cfg.audio_in, cfg.audio_hidden, cfg.d_m),
                cfg.mlp_activation,
            )?,
            audio_in: cfg.audio_in,
        })
    }

    /// `[T, d_in]` → `F_As: [T, d_m]`; row `i` is the frame-`i` feature `F_A`.
    pub fn encode_audio(&self, g: &mut Graph<'_>, clip: Var) -> Result<Var> {
        let s = g.shape(clip);
        if s.len() != 2 || s[1] != self.audio_in {
            return Err(crate::error::shape_err("encode_audio", s, &[self.audio_in]));
        }
        self.mlp.forward(g, clip)
    }
}
