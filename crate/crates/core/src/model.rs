//! The assembled model: encoders, prompting, fusion and decoder.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::GavsConfig;
use crate::decoder::{mask_embedding_feedback, AudioSourceDecoder, DecoderOutput, FusionMode, MaskPrediction};
use crate::encoders::{global_average_pool, AudioEncoder, VisualEncoder, VisualFeature};
use crate::error::{shape_err, Result};
use crate::graph::{GradMode, Graph, Var};
use crate::nn::Linear;
use crate::params::{uniform, ParamId, ParamStore};
use crate::sap::{PromptTokens, SemanticAudioPrompting, PROMPT_SLOTS};
use crate::tensor::Tensor;

pub struct GavsModel {
    pub cfg: GavsConfig,
    pub store: ParamStore,
    pub visual: VisualEncoder,
    pub audio: AudioEncoder,
    pub sap: SemanticAudioPrompting,
    /// Audio-to-visual projection used in [`FusionMode::AvFusion`].
    pub fusion: Linear,
    pub decoder: AudioSourceDecoder,
    /// Class-label prompt table used only while pretraining: `[C, 6·d_V]`.
    pub class_prompts: ParamId,
    /// Class-presence head used only while pretraining.
    pub presence_head: Linear,
}

/// Everything the losses and tests need from one clip.
pub struct ClipOutput {
    pub masks: Vec<MaskPrediction>,
    pub visual: Vec<VisualFeature>,
    pub prompts: Vec<PromptTokens>,
    pub decoder: Vec<DecoderOutput>,
    /// Frame-averaged visual embedding `v_i` in the shared `d_m` space,
    /// present when the semantic loss applies.
    pub visual_embed: Option<Var>,
    /// Frame-averaged audio feature `a_i`.
    pub audio_embed: Var,
}

impl GavsModel {
    pub fn new(cfg: &GavsConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let e = &cfg.encoder;
        let visual = VisualEncoder::new(&mut store, &mut rng, e)?;
        let decoder = AudioSourceDecoder::new(&mut store, &mut rng, &cfg.decoder, e.d_v, e.grid())?;
        let class_prompts = store.add(
            "pretrain.class_prompts",
            uniform(&mut rng, &[cfg.train.num_classes, PROMPT_SLOTS * e.d_v], 0.5),
        )?;
        let presence_head = Linear::new(&mut store, &mut rng, "pretrain.presence", e.d_v, cfg.train.num_classes, true)?;
        // Components tuned on the audio-visual task come last so that their
        // shapes (which vary with the ablation switches) never shift the
        // random draws of the pretrained parts.
        let audio = AudioEncoder::new(&mut store, &mut rng, e)?;
        let sap = SemanticAudioPrompting::new(&mut store, &mut rng, &cfg.sap, e.d_v, e.d_m)?;
        let fusion = Linear::new(&mut store, &mut rng, "fusion.audio_proj", e.d_m, e.d_v, true)?;
        let mut model = Self {
            cfg: cfg.clone(),
            store,
            visual,
            audio,
            sap,
            fusion,
            decoder,
            class_prompts,
            presence_head,
        };
        model.seed_prompt_bias();
        model.apply_trainable();
        Ok(model)
    }

    /// Starts the prompt projection's bias at the decoder's default tokens so
    /// an uninformative prompt behaves like the pretrained default prompt.
    pub fn seed_prompt_bias(&mut self) {
        let base = self.store.tensor(self.decoder.base_tokens).data().to_vec();
        if let Some(b) = self.sap.proj.bias {
            self.store.get_mut(b).tensor.data_mut().copy_from_slice(&base);
        }
    }

    /// Copies backbone and decoder weights from a pretrained store, then
    /// re-seeds the prompt bias.
    pub fn load_pretrained(&mut self, pretrained: &ParamStore) -> usize {
        let n = self.store.copy_matching(pretrained, |name| {
            name.starts_with("visual.backbone.") || name.starts_with("decoder.") || name.starts_with("pretrain.")
        });
        self.seed_prompt_bias();
        n
    }

    /// Whether parameter `name` is tuned under the current configuration.
    pub fn is_tuned(&self, name: &str) -> bool {
        let cfg = &self.cfg;
        let prompt_mode = cfg.decoder.fusion_mode == FusionMode::AudioPrompt;
        let frozen_path = cfg.train.freeze_prompt_path;
        if name.starts_with("visual.adapters.") {
            cfg.encoder.adapters_enabled
        } else if name.starts_with("audio.") {
            !frozen_path
        } else if name.starts_with("sap.") {
            cfg.sap.enabled && prompt_mode
        } else if name.starts_with("prompt.") {
            prompt_mode && !frozen_path
        } else if name.starts_with("fusion.") {
            !prompt_mode && !frozen_path
        } else if name == "decoder.base_tokens" && prompt_mode {
            // Audio replaces the default prompt, so these never reach the loss.
            false
        } else {
            cfg.decoder.tuning_strategy.tunes(name)
        }
    }

    /// Sets every parameter's `trainable` flag from the configuration.
    pub fn apply_trainable(&mut self) {
        let flags: Vec<bool> = self.store.iter().map(|(_, p)| self.is_tuned(&p.name)).collect();
        for ((_, p), f) in self.store.iter_mut().zip(flags) {
            p.trainable = f;
        }
    }

    pub fn trainable_set(&self) -> BTreeSet<String> {
        self.store.trainable_names().into_iter().map(String::from).collect()
    }

    /// True when no visual-encoder parameter is trainable, so `F_V` may be
    /// computed once and reused.
    pub fn visual_is_frozen(&self) -> bool {
        !self
            .store
            .iter()
            .any(|(_, p)| p.trainable && p.name.starts_with("visual."))
    }

    /// `F_V` of one frame, as a plain `[H·W, d_V]` tensor.
    pub fn precompute_visual(&self, frame: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.store, GradMode::None);
        let fv = self.visual.encode_frame(&mut g, frame)?;
        Ok(g.value(fv.tokens).clone())
    }

    fn visual_feature(&self, g: &mut Graph<'_>, frame: &Tensor, cached: Option<&Tensor>) -> Result<VisualFeature> {
        match cached {
            Some(t) => {
                let (height, width) = self.cfg.encoder.grid();
                if t.shape() != [height * width, self.cfg.encoder.d_v] {
                    return Err(shape_err("cached visual feature", t.shape(), &[height * width, self.cfg.encoder.d_v]));
                }
                Ok(VisualFeature {
                    tokens: g.constant(t.clone()),
                    height,
                    width,
                })
            }
            None => self.visual.encode_frame(g, frame),
        }
    }

    /// Prompt tokens and decoder visual input for one frame.
    pub fn prompt_and_visual(
        &self,
        g: &mut Graph<'_>,
        fv: &VisualFeature,
        audio: Var,
    ) -> Result<(PromptTokens, VisualFeature)> {
        match self.cfg.decoder.fusion_mode {
            FusionMode::AudioPrompt => Ok((self.sap.prompt_tokens(g, fv, audio)?, *fv)),
            FusionMode::AvFusion => {
                let prompt = self.decoder.default_tokens(g);
                let a = self.fusion.forward(g, audio)?;
                let tokens = g.add_row(fv.tokens, a)?;
                Ok((prompt, VisualFeature { tokens, ..*fv }))
            }
        }
    }

    /// Runs the decoder, with an optional second pass over `F_V + F_M`.
    pub fn decode(&self, g: &mut Graph<'_>, prompt: PromptTokens, fv: &VisualFeature) -> Result<DecoderOutput> {
        let strategy = self.cfg.decoder.tuning_strategy;
        let first = self.decoder.forward(g, prompt, fv, strategy)?;
        if !self.cfg.decoder.feedback_enabled {
            return Ok(first);
        }
        let augmented = mask_embedding_feedback(g, &first.mask_embedding, fv)?;
        self.decoder.forward(g, prompt, &augmented, strategy)
    }

    /// Forward pass over a clip: `frames: [T, 3, H_img, W_img]`,
    /// `audio: [T, d_in]`. `cached` optionally supplies precomputed `F_V`
    /// per frame.
    pub fn forward_clip(
        &self,
        g: &mut Graph<'_>,
        frames: &Tensor,
        audio: &Tensor,
        cached: Option<&[Tensor]>,
    ) -> Result<ClipOutput> {
        let fs = frames.shape();
        if fs.len() != 4 || audio.shape().len() != 2 || audio.shape()[0] != fs[0] {
            return Err(crate::Error::Contract(alloc::format!(
                "frame count {:?} and audio rows {:?} disagree",
                fs,
                audio.shape()
            )));
        }
        if let Some(c) = cached {
            if c.len() != fs[0] {
                return Err(shape_err("cached visual frames", &[c.len()], &[fs[0]]));
            }
        }
        let t_len = fs[0];
        let per = fs[1] * fs[2] * fs[3];
        let audio_in = g.constant(audio.clone());
        let fas = self.audio.encode_audio(g, audio_in)?;

        let mut out = ClipOutput {
            masks: Vec::with_capacity(t_len),
            visual: Vec::with_capacity(t_len),
            prompts: Vec::with_capacity(t_len),
            decoder: Vec::with_capacity(t_len),
            visual_embed: None,
            audio_embed: fas,
        };
        let mut pooled = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let frame = Tensor::new(fs[1..].to_vec(), frames.data()[t * per..(t + 1) * per].to_vec())?;
            let fv = self.visual_feature(g, &frame, cached.map(|c| &c[t]))?;
            let fa = g.row(fas, t)?;
            let (prompt, visual_in) = self.prompt_and_visual(g, &fv, fa)?;
            let dec = self.decode(g, prompt, &visual_in)?;
            out.masks.push(dec.mask);
            out.visual.push(fv);
            out.prompts.push(prompt);
            out.decoder.push(dec);
            pooled.push(global_average_pool(g, &fv)?);
        }
        let (v, a) = crate::loss::average_features(g, &pooled, fas)?;
        out.audio_embed = a;
        if self.cfg.sap.enabled && self.cfg.decoder.fusion_mode == FusionMode::AudioPrompt {
            out.visual_embed = Some(self.sap.cue_from_pooled(g, v)?.0);
        }
        Ok(out)
    }
}
