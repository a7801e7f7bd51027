//! The assembled restoration model: autoencoder, visual-text prompting,
//! LQ conditioning branch, and backbone over one shared parameter store.

use crate::autoencoder::{self, Autoencoder};
use crate::backbone::{self, MiniDit, PromptVars};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::lq_cond::{self, AlignmentStats, ConditionExtractor};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::prompt::{self, DualPrompting, EncodedContext, PromptMode, VisualPretrainHeads};
use crate::rng;

/// Every parameter group, in creation order.
pub const ALL_GROUPS: &[&str] = &[
    autoencoder::ENCODER,
    autoencoder::ENCODER_BASE,
    autoencoder::DECODER,
    autoencoder::DISC,
    autoencoder::STATS,
    prompt::VISUAL_GROUP,
    prompt::VISUAL_HEAD_GROUP,
    prompt::TEXT_GROUP,
    prompt::PROMPT_GROUP,
    lq_cond::GROUP,
    backbone::GROUP,
];

/// Groups updated by backbone training.
pub const DPIR_GROUPS: &[&str] = &[backbone::GROUP, lq_cond::GROUP, prompt::PROMPT_GROUP];

/// Tensor-name prefixes produced by autoencoder training.
pub const AE_PREFIXES: &[&str] = &["ae.", "enc1.", "enc2.", "visual_head.", "text."];

#[derive(Clone, Debug)]
pub struct DpirModel {
    pub config: RunConfig,
    pub store: ParamStore,
    pub ae: Autoencoder,
    pub prompting: DualPrompting,
    pub visual_heads: VisualPretrainHeads,
    pub extractor: ConditionExtractor,
    pub backbone: MiniDit,
}

/// Prompt values that stay fixed across sampler steps.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTensors {
    pub tokens: Option<Tensor>,
    pub pooled: Tensor,
}

impl PromptTensors {
    pub fn token_count(&self) -> usize {
        self.tokens.as_ref().map_or(0, |t| t.shape()[0])
    }

    pub fn on_tape(&self, tape: &mut Tape) -> PromptVars {
        PromptVars {
            tokens: self.tokens.clone().map(|t| tape.constant(t)),
            pooled: tape.constant(self.pooled.clone()),
        }
    }
}

impl DpirModel {
    /// Fresh model. Each component draws from its own seed stream, so
    /// resizing one component leaves the others' initial values unchanged.
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let s = config.seed;
        let mut store = ParamStore::new();
        let ae = Autoencoder::new(
            &mut store,
            &config.autoencoder,
            &mut rng::stream(s, &[rng::tag("init.ae")]),
        )?;
        let m = &config.model;
        let prompting = DualPrompting::new(
            &mut store,
            &config.prompt,
            m.prompt_dim,
            m.pooled_dim,
            &mut rng::stream(s, &[rng::tag("init.prompt")]),
        )?;
        let visual_heads = VisualPretrainHeads::new(
            &mut store,
            &config.prompt,
            &mut rng::stream(s, &[rng::tag("init.visual_head")]),
        );
        let extractor = ConditionExtractor::new(
            &mut store,
            m.latent_channels,
            config.conditioning.hidden,
            m.patch_size,
            m.model_dim,
            &mut rng::stream(s, &[rng::tag("init.lqc")]),
        );
        let backbone = MiniDit::new(&mut store, m, &mut rng::stream(s, &[rng::tag("init.dit")]))?;
        Ok(Self {
            config: config.clone(),
            store,
            ae,
            prompting,
            visual_heads,
            extractor,
            backbone,
        })
    }

    /// Freeze every group except `trainable`.
    pub fn set_trainable(&mut self, trainable: &[&str]) {
        for g in ALL_GROUPS {
            if trainable.contains(g) {
                self.store.unfreeze(g);
            } else {
                self.store.freeze(g);
            }
        }
    }

    pub fn latent_scale(&self) -> f32 {
        self.ae.scale(&self.store)
    }

    /// Scaled latent of `x` through E_dr (`base = false`) or the base encoder.
    pub fn encode_scaled(&self, x: &Tensor, base: bool) -> Result<Tensor> {
        let s = self.latent_scale();
        Ok(self.ae.encode_tensor(&self.store, x, base)?.map(|v| v * s))
    }

    /// Decode a scaled latent.
    pub fn decode_scaled(&self, z: &Tensor) -> Result<Tensor> {
        let s = self.latent_scale();
        self.ae.decode_tensor(&self.store, &z.map(|v| v / s))
    }

    /// Projected prompt values for `mode`; `enc` may be `None` only in
    /// text-only mode.
    pub fn prompt_tensors(
        &self,
        enc: Option<&EncodedContext>,
        caption: &str,
        mode: PromptMode,
    ) -> Result<PromptTensors> {
        let mut tape = Tape::no_grad();
        let p = self
            .prompting
            .build(&mut tape, &self.store, enc, caption, mode)?;
        Ok(PromptTensors {
            tokens: p.tokens.map(|t| tape.value(t).clone()),
            pooled: tape.value(p.pooled).clone(),
        })
    }

    /// Velocity at `(z_t, t)` with the LQ features `cond` (extractor output)
    /// aligned to block 0 and injected. Measured statistics are pushed to
    /// `stats` when given.
    #[allow(clippy::too_many_arguments)]
    pub fn velocity(
        &self,
        tape: &mut Tape,
        z_t: Var,
        t: f32,
        prompt: PromptVars,
        cond: Option<Var>,
        stats: Option<&mut Vec<AlignmentStats>>,
    ) -> Result<Var> {
        let c = &self.config.conditioning;
        let (mode, eps) = (c.stats, c.eps);
        self.backbone
            .forward(tape, &self.store, z_t, t, prompt, |tape, b0| match cond {
                None => Ok(None),
                Some(cond) => {
                    let (a, s) = lq_cond::align_on_tape(tape, b0, cond, mode, eps)?;
                    if let Some(log) = stats {
                        log.push(s);
                    }
                    Ok(Some(a))
                }
            })
    }

    /// Extractor features of a scaled LQ latent.
    pub fn lq_features(&self, tape: &mut Tape, z_lq: Var) -> Result<Var> {
        self.extractor.forward(tape, &self.store, z_lq)
    }

    /// Loads a checkpoint's tensors whose names start with `prefixes`.
    pub fn load_tensors(
        &mut self,
        ck: &crate::checkpoint::Checkpoint,
        prefixes: &[&str],
    ) -> Result<usize> {
        let n = ck.restore_into(&mut self.store, prefixes)?;
        if n == 0 {
            return Err(Error::Checkpoint(
                "checkpoint holds none of the requested tensors".into(),
            ));
        }
        Ok(n)
    }

    /// Rebuild a model from a checkpoint's embedded config and tensors.
    pub fn from_checkpoint(ck: &crate::checkpoint::Checkpoint) -> Result<Self> {
        let config = RunConfig::from_toml_str(&ck.config_toml)?;
        let mut m = Self::new(&config)?;
        m.load_tensors(ck, &[])?;
        Ok(m)
    }
}
