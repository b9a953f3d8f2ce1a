//! Encoder, fusion and decoder assembly.
//!
//! Audio and video visible patches are embedded by per-modality encoders,
//! fused by a joint transformer, and reconstructed by per-modality decoders.
//! Masked positions enter the decoder either as a learned mask token or as
//! diffused raw patches projected into the decoder width.

mod layers;
mod params;
pub mod posemb;

pub use layers::{windows, Attention, Block, BlockDims, CrossBlock, LayerNorm, Linear, Mlp, Window};
pub use params::{Ctx, Param, ParamId, ParamStore, INIT_STD};

use serde::{Deserialize, Serialize};

use crate::patch::{gather_rows, DataShapes, MaskingPlan, Modality, PatchError, PatchSpec};
use crate::rng;
use crate::tensor::{Tensor, TensorError, Var};
use posemb::PositionalKind;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Patch(#[from] PatchError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Which pre-training recipe a run follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Audio+video with diffused mask tokens.
    Diffmavil,
    /// Audio+video with learned mask tokens.
    MavilBaseline,
    /// Audio only with learned mask tokens.
    Audiomae,
    /// Audio only with diffused mask tokens.
    AudiomaeDiffusion,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::Diffmavil,
        Mode::MavilBaseline,
        Mode::Audiomae,
        Mode::AudiomaeDiffusion,
    ];

    pub fn has_video(self) -> bool {
        matches!(self, Mode::Diffmavil | Mode::MavilBaseline)
    }

    pub fn diffusion(self) -> bool {
        matches!(self, Mode::Diffmavil | Mode::AudiomaeDiffusion)
    }

    pub fn default_ordering(self) -> PatchOrdering {
        if self.diffusion() {
            PatchOrdering::MaskThenProject
        } else {
            PatchOrdering::ProjectThenMask
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VideoAttention {
    #[serde(rename = "self")]
    SelfAttention,
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AudioAttention {
    #[serde(rename = "self")]
    SelfAttention,
    LocalWindow,
}

/// Which stream supplies the queries of a cross-attention decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossDirection {
    MaskedQueries,
    VisibleQueries,
}

/// Whether patches are embedded before or after masking. Outputs are
/// identical; only the cost differs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchOrdering {
    MaskThenProject,
    ProjectThenMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub audio_encoder: EncoderConfig,
    pub video_encoder: EncoderConfig,
    pub fusion_blocks: usize,
    pub decoder_dim: usize,
    pub decoder_blocks: usize,
    pub decoder_heads: usize,
    pub video_attention: VideoAttention,
    pub audio_attention: AudioAttention,
    pub window: usize,
    pub shifted_windows: bool,
    pub cross_attention_direction: CrossDirection,
    /// `None` follows the mode: diffusion modes mask first.
    pub patch_ordering: Option<PatchOrdering>,
    pub mlp_ratio: usize,
    pub layernorm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let vit_b = EncoderConfig {
            dim: 768,
            blocks: 12,
            heads: 12,
        };
        Self {
            audio_encoder: vit_b,
            video_encoder: vit_b,
            fusion_blocks: 2,
            decoder_dim: 512,
            decoder_blocks: 8,
            decoder_heads: 16,
            video_attention: VideoAttention::SelfAttention,
            audio_attention: AudioAttention::LocalWindow,
            window: 16,
            shifted_windows: false,
            cross_attention_direction: CrossDirection::MaskedQueries,
            patch_ordering: None,
            mlp_ratio: 4,
            layernorm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration used by tests and the smoke run.
    pub fn toy() -> Self {
        let enc = EncoderConfig {
            dim: 16,
            blocks: 2,
            heads: 2,
        };
        Self {
            audio_encoder: enc,
            video_encoder: enc,
            fusion_blocks: 1,
            decoder_dim: 8,
            decoder_blocks: 2,
            decoder_heads: 2,
            window: 4,
            ..Self::default()
        }
    }

    pub fn ordering(&self, mode: Mode) -> PatchOrdering {
        self.patch_ordering.unwrap_or(mode.default_ordering())
    }

    pub fn validate(&self, mode: Mode) -> Result<()> {
        let check_heads = |what: &str, dim: usize, heads: usize| {
            if dim == 0 || heads == 0 || !dim.is_multiple_of(heads) {
                return Err(ModelError::Config(format!(
                    "{what}: dim {dim} not divisible by {heads} heads"
                )));
            }
            Ok(())
        };
        check_heads("audio_encoder", self.audio_encoder.dim, self.audio_encoder.heads)?;
        check_heads("video_encoder", self.video_encoder.dim, self.video_encoder.heads)?;
        check_heads("decoder", self.decoder_dim, self.decoder_heads)?;
        if self.fusion_blocks == 0 {
            return Err(ModelError::Config("fusion_blocks must be at least 1".into()));
        }
        if self.audio_encoder.blocks == 0 || self.decoder_blocks == 0 {
            return Err(ModelError::Config("encoder and decoder need at least one block".into()));
        }
        if self.window == 0 {
            return Err(ModelError::Config("window must be at least 1".into()));
        }
        if self.mlp_ratio == 0 || !(self.layernorm_eps > 0.0) {
            return Err(ModelError::Config(
                "mlp_ratio and layernorm_eps must be positive".into(),
            ));
        }
        if mode.has_video() {
            if self.video_encoder.blocks == 0 {
                return Err(ModelError::Config("video encoder needs at least one block".into()));
            }
            if self.audio_encoder.dim != self.video_encoder.dim {
                return Err(ModelError::Config(format!(
                    "fusion needs equal encoder widths, got {} and {}",
                    self.audio_encoder.dim, self.video_encoder.dim
                )));
            }
        }
        Ok(())
    }
}

fn pos_kind(modality: Modality) -> PositionalKind {
    match modality {
        Modality::Audio => PositionalKind::Sinusoidal1dGrid,
        Modality::Video => PositionalKind::SeparableSpatiotemporal,
    }
}

/// Per-modality ViT encoder over visible patches.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub modality: Modality,
    pub embed: Linear,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub ordering: PatchOrdering,
    pos: Tensor,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        spec: PatchSpec,
        grid: &[usize],
        enc: EncoderConfig,
        model: &ModelConfig,
        ordering: PatchOrdering,
        rng: &mut rng::Rng,
    ) -> Self {
        let dims = BlockDims {
            dim: enc.dim,
            heads: enc.heads,
            mlp_ratio: model.mlp_ratio,
            eps: model.layernorm_eps,
        };
        Self {
            modality: spec.modality(),
            embed: Linear::new(store, &format!("{name}.embed"), spec.patch_dim(), enc.dim, rng),
            blocks: (0..enc.blocks)
                .map(|i| Block::new(store, &format!("{name}.blocks.{i}"), &dims, rng))
                .collect(),
            norm: LayerNorm::new(store, &format!("{name}.norm"), enc.dim, model.layernorm_eps),
            ordering,
            pos: posemb::table(pos_kind(spec.modality()), grid, enc.dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.embed.fan_out
    }

    /// Embeds the visible patches of `patches` (`[M × patch_dim]`), returning
    /// `[V × dim]` uni-modal representations in `plan.visible` order.
    pub fn forward(&self, ctx: &mut Ctx, patches: &Tensor, plan: &MaskingPlan) -> Result<Var> {
        if patches.rows() != plan.total || patches.rows() != self.pos.rows() {
            return Err(PatchError::PlanMismatch(format!(
                "encoder expects {} patches, plan covers {}, input has {}",
                self.pos.rows(),
                plan.total,
                patches.rows()
            ))
            .into());
        }
        let embedded = match self.ordering {
            PatchOrdering::MaskThenProject => {
                let vis = ctx.tape.constant(gather_rows(patches, &plan.visible)?);
                self.embed.forward(ctx, vis)?
            }
            PatchOrdering::ProjectThenMask => {
                let all = ctx.tape.constant(patches.clone());
                let all = self.embed.forward(ctx, all)?;
                ctx.tape.gather_rows(all, &plan.visible)?
            }
        };
        self.encode_embedded(ctx, embedded, &plan.visible)
    }

    /// Runs the transformer stack on already-embedded tokens at the given
    /// grid positions.
    pub fn encode_embedded(&self, ctx: &mut Ctx, embedded: Var, positions: &[usize]) -> Result<Var> {
        let pos = ctx.tape.constant(gather_rows(&self.pos, positions)?);
        let mut x = ctx.tape.add(embedded, pos)?;
        for block in &self.blocks {
            x = block.forward(ctx, x)?;
        }
        Ok(self.norm.forward(ctx, x)?)
    }
}

/// Joint transformer over the concatenated audio and video sequences.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl Fusion {
    pub fn forward(&self, ctx: &mut Ctx, audio: Var, video: Var) -> Result<(Var, Var)> {
        let na = ctx.tape.shape(audio)[0];
        let total = na + ctx.tape.shape(video)[0];
        let mut x = ctx.tape.concat_rows(&[audio, video])?;
        for block in &self.blocks {
            x = block.forward(ctx, x)?;
        }
        let x = self.norm.forward(ctx, x)?;
        Ok((ctx.tape.slice_rows(x, 0, na)?, ctx.tape.slice_rows(x, na, total)?))
    }
}

#[derive(Debug, Clone)]
pub enum DecoderStack {
    SelfAttention(Vec<Block>),
    LocalWindow {
        blocks: Vec<Block>,
        window: usize,
        shifted: bool,
    },
    Cross {
        blocks: Vec<CrossBlock>,
        direction: CrossDirection,
    },
}

/// Source of the decoder inputs at masked positions.
#[derive(Debug, Clone, Copy)]
pub enum MaskedTokens<'a> {
    /// Learned `[MASK]` embedding, repeated.
    Learned,
    /// Diffused raw patches `[num_masked × patch_dim]`, in `plan.masked` order.
    Diffused(&'a Tensor),
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub modality: Modality,
    pub embed: Linear,
    pub masked_proj: Option<Linear>,
    pub mask_token: Option<ParamId>,
    pub stack: DecoderStack,
    pub norm: LayerNorm,
    pub head: Linear,
    pos: Tensor,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        spec: PatchSpec,
        grid: &[usize],
        enc_dim: usize,
        model: &ModelConfig,
        attention: DecoderAttention,
        diffusion: bool,
        rng: &mut rng::Rng,
    ) -> Self {
        let dec = model.decoder_dim;
        let dims = BlockDims {
            dim: dec,
            heads: model.decoder_heads,
            mlp_ratio: model.mlp_ratio,
            eps: model.layernorm_eps,
        };
        let embed = Linear::new(store, &format!("{name}.embed"), enc_dim, dec, rng);
        let (masked_proj, mask_token) = if diffusion {
            (
                Some(Linear::new(
                    store,
                    &format!("{name}.masked_proj"),
                    spec.patch_dim(),
                    dec,
                    rng,
                )),
                None,
            )
        } else {
            (
                None,
                Some(store.add_trunc_normal(format!("{name}.mask_token"), &[1, dec], rng)),
            )
        };
        let self_blocks = |store: &mut ParamStore, rng: &mut rng::Rng| {
            (0..model.decoder_blocks)
                .map(|i| Block::new(store, &format!("{name}.blocks.{i}"), &dims, rng))
                .collect::<Vec<_>>()
        };
        let stack = match attention {
            DecoderAttention::SelfAttention => DecoderStack::SelfAttention(self_blocks(store, rng)),
            DecoderAttention::LocalWindow => DecoderStack::LocalWindow {
                blocks: self_blocks(store, rng),
                window: model.window,
                shifted: model.shifted_windows,
            },
            DecoderAttention::Cross => DecoderStack::Cross {
                blocks: (0..model.decoder_blocks)
                    .map(|i| CrossBlock::new(store, &format!("{name}.blocks.{i}"), &dims, rng))
                    .collect(),
                direction: model.cross_attention_direction,
            },
        };
        Self {
            modality: spec.modality(),
            embed,
            masked_proj,
            mask_token,
            stack,
            norm: LayerNorm::new(store, &format!("{name}.norm"), dec, model.layernorm_eps),
            head: Linear::new(store, &format!("{name}.head"), dec, spec.patch_dim(), rng),
            pos: posemb::table(pos_kind(spec.modality()), grid, dec),
        }
    }

    /// Decoder-width inputs at masked positions, before positional encoding.
    pub fn masked_inputs(&self, ctx: &mut Ctx, tokens: MaskedTokens<'_>, plan: &MaskingPlan) -> Result<Var> {
        match (tokens, &self.masked_proj, self.mask_token) {
            (MaskedTokens::Diffused(x), Some(proj), _) => {
                if x.rows() != plan.num_masked() {
                    return Err(PatchError::PlanMismatch(format!(
                        "{} diffused patches for {} masked positions",
                        x.rows(),
                        plan.num_masked()
                    ))
                    .into());
                }
                let x = ctx.tape.constant(x.clone());
                Ok(proj.forward(ctx, x)?)
            }
            (MaskedTokens::Learned, _, Some(token)) => {
                Ok(ctx.tape.gather_rows(ctx.p(token), &vec![0; plan.num_masked()])?)
            }
            _ => Err(ModelError::Config(
                "masked token source does not match the decoder's mode".into(),
            )),
        }
    }

    /// Reconstructs all `M` patches in original order from `[V × enc_dim]`
    /// multi-modal embeddings and the masked-position tokens.
    pub fn forward(&self, ctx: &mut Ctx, embeds: Var, tokens: MaskedTokens<'_>, plan: &MaskingPlan) -> Result<Var> {
        if plan.total != self.pos.rows() || ctx.tape.shape(embeds)[0] != plan.num_visible() {
            return Err(PatchError::PlanMismatch(format!(
                "decoder expects {} patches with {} visible embeddings, plan has {}/{}",
                self.pos.rows(),
                ctx.tape.shape(embeds)[0],
                plan.num_visible(),
                plan.total
            ))
            .into());
        }
        let vis = self.embed.forward(ctx, embeds)?;
        let masked = self.masked_inputs(ctx, tokens, plan)?;
        let pos_v = ctx.tape.constant(gather_rows(&self.pos, &plan.visible)?);
        let pos_m = ctx.tape.constant(gather_rows(&self.pos, &plan.masked)?);
        let vis = ctx.tape.add(vis, pos_v)?;
        let masked = ctx.tape.add(masked, pos_m)?;

        let full = match &self.stack {
            DecoderStack::SelfAttention(blocks) => {
                let joined = ctx.tape.concat_rows(&[vis, masked])?;
                let mut x = ctx.tape.gather_rows(joined, &plan.restore)?;
                for b in blocks {
                    x = b.forward(ctx, x)?;
                }
                x
            }
            DecoderStack::LocalWindow {
                blocks,
                window,
                shifted,
            } => {
                let joined = ctx.tape.concat_rows(&[vis, masked])?;
                let mut x = ctx.tape.gather_rows(joined, &plan.restore)?;
                for (i, b) in blocks.iter().enumerate() {
                    let offset = if *shifted && i % 2 == 1 { window / 2 } else { 0 };
                    x = b.forward_windowed(ctx, x, &windows(plan.total, *window, offset))?;
                }
                x
            }
            DecoderStack::Cross { blocks, direction } => {
                let (mut q, kv) = match direction {
                    CrossDirection::MaskedQueries => (masked, vis),
                    CrossDirection::VisibleQueries => (vis, masked),
                };
                for b in blocks {
                    q = b.forward(ctx, q, kv)?;
                }
                let (v, m) = match direction {
                    CrossDirection::MaskedQueries => (kv, q),
                    CrossDirection::VisibleQueries => (q, kv),
                };
                let joined = ctx.tape.concat_rows(&[v, m])?;
                ctx.tape.gather_rows(joined, &plan.restore)?
            }
        };
        let x = self.norm.forward(ctx, full)?;
        Ok(self.head.forward(ctx, x)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderAttention {
    SelfAttention,
    LocalWindow,
    Cross,
}

/// The full encoder–fusion–decoder model with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub mode: Mode,
    pub config: ModelConfig,
    pub shapes: DataShapes,
    pub store: ParamStore,
    pub audio_encoder: Encoder,
    pub video_encoder: Option<Encoder>,
    pub fusion: Option<Fusion>,
    pub audio_decoder: Decoder,
    pub video_decoder: Option<Decoder>,
}

impl Model {
    pub fn new(mode: Mode, config: ModelConfig, shapes: DataShapes, seed: u64) -> Result<Self> {
        config.validate(mode)?;
        let mut rng = rng::rng(seed);
        let mut store = ParamStore::new();
        let ordering = config.ordering(mode);

        let audio_spec = shapes.audio_spec();
        let audio_grid = audio_spec.grid_dims(&shapes.audio)?;
        let audio_encoder = Encoder::new(
            &mut store,
            "audio_encoder",
            audio_spec,
            &audio_grid,
            config.audio_encoder,
            &config,
            ordering,
            &mut rng,
        );
        let (video_encoder, video_grid) = if mode.has_video() {
            let spec = shapes.video_spec();
            let grid = spec.grid_dims(&shapes.video)?;
            let enc = Encoder::new(
                &mut store,
                "video_encoder",
                spec,
                &grid,
                config.video_encoder,
                &config,
                ordering,
                &mut rng,
            );
            (Some(enc), Some(grid))
        } else {
            (None, None)
        };
        let fusion = mode.has_video().then(|| {
            let dims = BlockDims {
                dim: config.audio_encoder.dim,
                heads: config.audio_encoder.heads,
                mlp_ratio: config.mlp_ratio,
                eps: config.layernorm_eps,
            };
            Fusion {
                blocks: (0..config.fusion_blocks)
                    .map(|i| Block::new(&mut store, &format!("fusion.blocks.{i}"), &dims, &mut rng))
                    .collect(),
                norm: LayerNorm::new(&mut store, "fusion.norm", dims.dim, config.layernorm_eps),
            }
        });
        let audio_attention = match config.audio_attention {
            AudioAttention::SelfAttention => DecoderAttention::SelfAttention,
            AudioAttention::LocalWindow => DecoderAttention::LocalWindow,
        };
        let audio_decoder = Decoder::new(
            &mut store,
            "audio_decoder",
            audio_spec,
            &audio_grid,
            config.audio_encoder.dim,
            &config,
            audio_attention,
            mode.diffusion(),
            &mut rng,
        );
        let video_decoder = video_grid.map(|grid| {
            let attention = match config.video_attention {
                VideoAttention::SelfAttention => DecoderAttention::SelfAttention,
                VideoAttention::Cross => DecoderAttention::Cross,
            };
            Decoder::new(
                &mut store,
                "video_decoder",
                shapes.video_spec(),
                &grid,
                config.video_encoder.dim,
                &config,
                attention,
                mode.diffusion(),
                &mut rng,
            )
        });
        Ok(Self {
            mode,
            config,
            shapes,
            store,
            audio_encoder,
            video_encoder,
            fusion,
            audio_decoder,
            video_decoder,
        })
    }

    pub fn encoder(&self, modality: Modality) -> Option<&Encoder> {
        match modality {
            Modality::Audio => Some(&self.audio_encoder),
            Modality::Video => self.video_encoder.as_ref(),
        }
    }

    pub fn decoder(&self, modality: Modality) -> Option<&Decoder> {
        match modality {
            Modality::Audio => Some(&self.audio_decoder),
            Modality::Video => self.video_decoder.as_ref(),
        }
    }

    pub fn encode(&self, ctx: &mut Ctx, modality: Modality, patches: &Tensor, plan: &MaskingPlan) -> Result<Var> {
        self.encoder(modality)
            .ok_or_else(|| ModelError::Config(format!("{modality:?} branch disabled in {:?} mode", self.mode)))?
            .forward(ctx, patches, plan)
    }

    pub fn fuse(&self, ctx: &mut Ctx, audio: Var, video: Var) -> Result<(Var, Var)> {
        self.fusion
            .as_ref()
            .ok_or_else(|| ModelError::Config(format!("no fusion encoder in {:?} mode", self.mode)))?
            .forward(ctx, audio, video)
    }

    pub fn decode(
        &self,
        ctx: &mut Ctx,
        modality: Modality,
        embeds: Var,
        tokens: MaskedTokens<'_>,
        plan: &MaskingPlan,
    ) -> Result<Var> {
        self.decoder(modality)
            .ok_or_else(|| ModelError::Config(format!("{modality:?} branch disabled in {:?} mode", self.mode)))?
            .forward(ctx, embeds, tokens, plan)
    }
}
