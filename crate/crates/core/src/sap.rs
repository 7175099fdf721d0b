//! Semantic-aware audio prompting.
//!
//! The prompt is the concatenation `[F_C ; F_N ; F_A]` of visual cues (an MLP
//! over the globally pooled visual feature), a learnable noise vector and the
//! frame's audio feature. An affine map projects it to six decoder token
//! slots: slot 0 is the IoU token, slots 1..=4 are query tokens (slot 1
//! drives the mask head) and slot 5 is the prompt token.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{global_average_pool, VisualFeature};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Activation, Linear, Mlp};
use crate::params::{uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const PROMPT_SLOTS: usize = 6;
pub const IOU_SLOT: usize = 0;
pub const MASK_QUERY_SLOT: usize = 1;
pub const PROMPT_SLOT: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseInit {
    Uniform,
    Zero,
}

/// `sap.*` in the run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SapConfig {
    pub enabled: bool,
    /// Width of the adaptive noise; `None` means `d_m`.
    pub d_n: Option<usize>,
    pub noise_init: NoiseInit,
    pub noise_scale: f64,
}

impl Default for SapConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            d_n: None,
            noise_init: NoiseInit::Uniform,
            noise_scale: 0.02,
        }
    }
}

/// Visual cue `F_C` of width `d_m`.
#[derive(Clone, Copy, Debug)]
pub struct VisualCue(pub Var);

/// `F_A′ = [F_C ; F_N ; F_A]`, or `F_A` alone when SAP is disabled.
#[derive(Clone, Copy, Debug)]
pub struct SemanticAudioPrompt(pub Var);

/// `F_P`: a `[6, d_V]` token matrix.
#[derive(Clone, Copy, Debug)]
pub struct PromptTokens(pub Var);

impl PromptTokens {
    pub fn mask_query(&self, g: &mut Graph<'_>) -> Result<Var> {
        g.row(self.0, MASK_QUERY_SLOT)
    }
}

pub const SAP_PREFIX: &str = "sap.";
pub const PROMPT_PROJ_PREFIX: &str = "prompt.";

#[derive(Clone, Debug)]
pub struct SemanticAudioPrompting {
    pub cue_mlp: Mlp,
    pub noise: ParamId,
    pub proj: Linear,
    pub enabled: bool,
    pub d_m: usize,
    pub d_n: usize,
    pub d_v: usize,
}

impl SemanticAudioPrompting {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &SapConfig, d_v: usize, d_m: usize) -> Result<Self> {
        let d_n = cfg.d_n.unwrap_or(d_m);
        if d_n == 0 {
            return Err(Error::Config("sap.d_n must be positive".into()));
        }
        let cue_mlp = Mlp::new(store, rng, "sap.cue_mlp", (d_v, d_m, d_m), Activation::Gelu)?;
        let noise = match cfg.noise_init {
            NoiseInit::Uniform => uniform(rng, &[d_n], cfg.noise_scale),
            NoiseInit::Zero => Tensor::zeros(&[d_n]),
        };
        let noise = store.add("sap.noise", noise)?;
        let in_dim = if cfg.enabled { 2 * d_m + d_n } else { d_m };
        let proj = Linear::new(store, rng, "prompt.proj", in_dim, PROMPT_SLOTS * d_v, true)?;
        Ok(Self {
            cue_mlp,
            noise,
            proj,
            enabled: cfg.enabled,
            d_m,
            d_n,
            d_v,
        })
    }

    /// Width of the projection input: `2·d_m + d_N`, or `d_m` without SAP.
    pub fn prompt_dim(&self) -> usize {
        self.proj.in_dim
    }

    /// `F_C = MLP(GAP(F_V))`.
    pub fn build_visual_cues(&self, g: &mut Graph<'_>, fv: &VisualFeature) -> Result<VisualCue> {
        let pooled = global_average_pool(g, fv)?;
        self.cue_from_pooled(g, pooled)
    }

    /// The cue MLP applied to an already pooled `[d_V]` vector.
    pub fn cue_from_pooled(&self, g: &mut Graph<'_>, pooled: Var) -> Result<VisualCue> {
        Ok(VisualCue(self.cue_mlp.forward(g, pooled)?))
    }

    pub fn noise(&self, g: &mut Graph<'_>) -> Var {
        g.param(self.noise)
    }

    pub fn assemble_sap(&self, g: &mut Graph<'_>, cue: VisualCue, noise: Var, audio: Var) -> Result<SemanticAudioPrompt> {
        assemble_sap(g, cue, noise, audio, self.d_m, self.d_n)
    }

    /// Affine projection to `[6, d_V]` prompt tokens.
    pub fn project_prompt(&self, g: &mut Graph<'_>, prompt: SemanticAudioPrompt) -> Result<PromptTokens> {
        if g.shape(prompt.0) != [self.prompt_dim()] {
            return Err(crate::error::shape_err("project_prompt", g.shape(prompt.0), &[self.prompt_dim()]));
        }
        let flat = self.proj.forward(g, prompt.0)?;
        Ok(PromptTokens(g.reshape(flat, &[PROMPT_SLOTS, self.d_v])?))
    }

    /// Builds per-frame prompt tokens from that frame's `F_V` and `F_A`.
    pub fn prompt_tokens(&self, g: &mut Graph<'_>, fv: &VisualFeature, audio: Var) -> Result<PromptTokens> {
        let prompt = if self.enabled {
            let cue = self.build_visual_cues(g, fv)?;
            let noise = self.noise(g);
            self.assemble_sap(g, cue, noise, audio)?
        } else {
            if g.shape(audio) != [self.d_m] {
                return Err(crate::error::shape_err("prompt_tokens: F_A", g.shape(audio), &[self.d_m]));
            }
            SemanticAudioPrompt(audio)
        };
        self.project_prompt(g, prompt)
    }
}

/// Concatenates `[F_C ; F_N ; F_A]` after checking each segment's width.
pub fn assemble_sap(
    g: &mut Graph<'_>,
    cue: VisualCue,
    noise: Var,
    audio: Var,
    d_m: usize,
    d_n: usize,
) -> Result<SemanticAudioPrompt> {
    if g.shape(cue.0) != [d_m] {
        return Err(crate::error::shape_err("assemble_sap: F_C", g.shape(cue.0), &[d_m]));
    }
    if g.shape(noise) != [d_n] {
        return Err(crate::error::shape_err("assemble_sap: F_N", g.shape(noise), &[d_n]));
    }
    if g.shape(audio) != [d_m] {
        return Err(crate::error::shape_err("assemble_sap: F_A", g.shape(audio), &[d_m]));
    }
    Ok(SemanticAudioPrompt(g.concat_last(&[cue.0, noise, audio])?))
}

/// Fresh RNG for components built outside a model.
pub fn component_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
