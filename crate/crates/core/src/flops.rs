//! Analytic FLOPS accounting for pre-training workloads.
//!
//! One multiply-accumulate counts as 2 FLOPS. Layernorm, softmax and GELU are
//! charged per element with the constants below. Counts are exact integers;
//! reports convert to `f64` at the end.

use serde::{Deserialize, Serialize};

use crate::model::{AudioAttention, Mode, ModelConfig, PatchOrdering, VideoAttention};
use crate::patch::{visible_count, DataShapes, Modality, PatchError};
use crate::schedule::{Curriculum, CurriculumSchedule, ScheduleError};

const LAYERNORM_PER_ELEMENT: u128 = 5;
const SOFTMAX_PER_ELEMENT: u128 = 5;
const GELU_PER_ELEMENT: u128 = 8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FlopsError {
    #[error("invalid workload: {0}")]
    Workload(String),
    #[error("module taxonomy differs: {0}")]
    Taxonomy(String),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

pub type Result<T> = std::result::Result<T, FlopsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    #[serde(rename = "self")]
    SelfAttention,
    Cross,
    LocalWindow {
        window: usize,
    },
}

/// Cost of one transformer block, split so that the sequence-quadratic
/// attention terms can be inspected separately.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCost {
    /// Score and weighted-sum products plus the softmax.
    pub attention: u128,
    /// Projections, MLP and layernorms.
    pub linear: u128,
}

impl BlockCost {
    pub fn total(&self) -> u128 {
        self.attention + self.linear
    }
}

/// FLOPS of one pre-norm block with `lq` query rows over `lkv` context rows.
/// Self and window attention require `lq == lkv`.
pub fn block_cost(lq: usize, lkv: usize, d: usize, heads: usize, kind: AttentionKind, mlp_ratio: usize) -> BlockCost {
    assert!(
        d > 0 && heads > 0 && d.is_multiple_of(heads),
        "dim {d} must split over {heads} heads"
    );
    let (lq, lkv, d, r) = (lq as u128, lkv as u128, d as u128, mlp_ratio as u128);
    let span = match kind {
        AttentionKind::SelfAttention | AttentionKind::Cross => lkv,
        AttentionKind::LocalWindow { window } => (window as u128).min(lkv),
    };
    let projections = match kind {
        AttentionKind::Cross => 2 * lq * d * d * 2 + 2 * lkv * d * d * 2,
        _ => 2 * lq * d * 3 * d + 2 * lq * d * d,
    };
    // QKᵀ and weights·V, each 2·lq·span·d.
    let attention = 4 * lq * span * d + SOFTMAX_PER_ELEMENT * lq * span;
    let mlp = 2 * 2 * lq * d * r * d + GELU_PER_ELEMENT * lq * r * d;
    let mut norms = 2 * LAYERNORM_PER_ELEMENT * lq * d;
    if kind == AttentionKind::Cross {
        norms += LAYERNORM_PER_ELEMENT * lkv * d;
    }
    BlockCost {
        attention,
        linear: projections + mlp + norms,
    }
}

/// Convenience total of [`block_cost`] with a 4× MLP.
pub fn flops_transformer_block(lq: usize, lkv: usize, d: usize, heads: usize, kind: AttentionKind) -> u128 {
    block_cost(lq, lkv, d, heads, kind, 4).total()
}

fn linear(rows: usize, fan_in: usize, fan_out: usize) -> u128 {
    2 * rows as u128 * fan_in as u128 * fan_out as u128
}

/// Everything needed to price a pre-training run without running it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub mode: Mode,
    pub model: ModelConfig,
    pub shapes: DataShapes,
    pub curriculum: Curriculum,
    pub epochs: usize,
    pub dataset_size: usize,
    /// Masked views per modality; each is a separate encoder pass.
    pub views_per_modality: usize,
    /// Forward plus backward relative to forward.
    pub training_multiplier: u64,
}

impl WorkloadSpec {
    pub fn encoder_passes(&self) -> usize {
        self.views_per_modality * if self.mode.has_video() { 2 } else { 1 }
    }

    fn validate(&self) -> Result<()> {
        self.model
            .validate(self.mode)
            .map_err(|e| FlopsError::Workload(e.to_string()))?;
        if self.views_per_modality == 0 || self.training_multiplier == 0 || self.dataset_size == 0 {
            return Err(FlopsError::Workload(
                "views, training multiplier and dataset size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-module counts. Patch-embedding and decoder input/output projections
/// are included in the module that owns them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ModuleFlops {
    pub audio_encoder: f64,
    pub audio_decoder: f64,
    pub video_encoder: f64,
    pub video_decoder: f64,
    pub fusion_encoder: f64,
}

impl ModuleFlops {
    pub const NAMES: [&'static str; 5] = [
        "audio_encoder",
        "audio_decoder",
        "video_encoder",
        "video_decoder",
        "fusion_encoder",
    ];

    pub fn values(&self) -> [f64; 5] {
        [
            self.audio_encoder,
            self.audio_decoder,
            self.video_encoder,
            self.video_decoder,
            self.fusion_encoder,
        ]
    }

    fn from_values(v: [f64; 5]) -> Self {
        Self {
            audio_encoder: v[0],
            audio_decoder: v[1],
            video_encoder: v[2],
            video_decoder: v[3],
            fusion_encoder: v[4],
        }
    }

    pub fn total(&self) -> f64 {
        self.values().iter().sum()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Counts {
    modules: [u128; 5],
    attention: [u128; 5],
    projections: u128,
}

impl Counts {
    fn add_block(&mut self, module: usize, times: u128, c: BlockCost) {
        self.modules[module] += times * c.total();
        self.attention[module] += times * c.attention;
    }

    fn add_projection(&mut self, module: usize, flops: u128) {
        self.modules[module] += flops;
        self.projections += flops;
    }

    fn accumulate(&mut self, other: &Counts, times: u128) {
        for i in 0..5 {
            self.modules[i] += times * other.modules[i];
            self.attention[i] += times * other.attention[i];
        }
        self.projections += times * other.projections;
    }
}

fn to_f64(v: [u128; 5]) -> ModuleFlops {
    ModuleFlops::from_values(v.map(|x| x as f64))
}

const AE: usize = 0;
const AD: usize = 1;
const VE: usize = 2;
const VD: usize = 3;
const FU: usize = 4;

/// Forward FLOPS for one training instance at masking ratio `ratio`.
fn instance_counts(spec: &WorkloadSpec, ratio: f64) -> Result<Counts> {
    let cfg = &spec.model;
    let ordering = cfg.ordering(spec.mode);
    let views = spec.views_per_modality as u128;
    let mut c = Counts::default();

    let modality = |c: &mut Counts, m: Modality, enc_idx: usize, dec_idx: usize| -> Result<usize> {
        let total = spec.shapes.num_patches(m)?;
        let visible = visible_count(total, ratio);
        let masked = total - visible;
        let pdim = spec.shapes.spec(m).patch_dim();
        let enc = match m {
            Modality::Audio => cfg.audio_encoder,
            Modality::Video => cfg.video_encoder,
        };
        let block = block_cost(
            visible,
            visible,
            enc.dim,
            enc.heads,
            AttentionKind::SelfAttention,
            cfg.mlp_ratio,
        );
        c.add_block(enc_idx, views * enc.blocks as u128, block);
        c.modules[enc_idx] += views * LAYERNORM_PER_ELEMENT * (visible * enc.dim) as u128;
        c.add_projection(
            enc_idx,
            match ordering {
                // One embedding of all patches serves every view.
                PatchOrdering::ProjectThenMask => linear(total, pdim, enc.dim),
                PatchOrdering::MaskThenProject => views * linear(visible, pdim, enc.dim),
            },
        );

        let dd = cfg.decoder_dim;
        c.add_projection(dec_idx, linear(visible, enc.dim, dd) + linear(total, dd, pdim));
        if spec.mode.diffusion() {
            c.add_projection(dec_idx, linear(masked, pdim, dd));
        }
        let kind = match (m, cfg.audio_attention, cfg.video_attention) {
            (Modality::Audio, AudioAttention::LocalWindow, _) => AttentionKind::LocalWindow { window: cfg.window },
            (Modality::Video, _, VideoAttention::Cross) => AttentionKind::Cross,
            _ => AttentionKind::SelfAttention,
        };
        let block = match kind {
            AttentionKind::Cross => block_cost(masked, visible, dd, cfg.decoder_heads, kind, cfg.mlp_ratio),
            _ => block_cost(total, total, dd, cfg.decoder_heads, kind, cfg.mlp_ratio),
        };
        c.add_block(dec_idx, cfg.decoder_blocks as u128, block);
        c.modules[dec_idx] += LAYERNORM_PER_ELEMENT * (total * dd) as u128;
        Ok(visible)
    };

    let va = modality(&mut c, Modality::Audio, AE, AD)?;
    if spec.mode.has_video() {
        let vv = modality(&mut c, Modality::Video, VE, VD)?;
        let d = cfg.audio_encoder.dim;
        let l = va + vv;
        let block = block_cost(
            l,
            l,
            d,
            cfg.audio_encoder.heads,
            AttentionKind::SelfAttention,
            cfg.mlp_ratio,
        );
        c.add_block(FU, cfg.fusion_blocks as u128, block);
        c.modules[FU] += LAYERNORM_PER_ELEMENT * (l * d) as u128;
    }
    Ok(c)
}

/// Training FLOPS for one instance at `ratio`, including the backward pass.
pub fn instance_training_flops(spec: &WorkloadSpec, ratio: f64) -> Result<f64> {
    spec.validate()?;
    let c = instance_counts(spec, ratio)?;
    Ok(c.modules.iter().sum::<u128>() as f64 * spec.training_multiplier as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochFlops {
    pub epoch: usize,
    pub masking_ratio: f64,
    pub visible_audio: usize,
    pub visible_video: usize,
    pub flops: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub mode: Mode,
    pub modules: ModuleFlops,
    /// Sequence-quadratic attention share of each module.
    pub attention: ModuleFlops,
    /// Patch-embedding and decoder projection share, already inside `modules`.
    pub projections: f64,
    pub total: f64,
    pub encoder_passes: usize,
    pub per_epoch: Vec<EpochFlops>,
}

pub fn flops_pretraining(spec: &WorkloadSpec) -> Result<FlopsReport> {
    spec.validate()?;
    let schedule = CurriculumSchedule::new(spec.curriculum, spec.epochs)?;
    let scale = spec.dataset_size as u128 * spec.training_multiplier as u128;
    let mut acc = Counts::default();
    let mut per_epoch = Vec::with_capacity(spec.epochs);
    for (epoch, &ratio) in schedule.ratios().iter().enumerate() {
        let c = instance_counts(spec, ratio)?;
        acc.accumulate(&c, scale);
        per_epoch.push(EpochFlops {
            epoch,
            masking_ratio: ratio,
            visible_audio: visible_count(spec.shapes.num_patches(Modality::Audio)?, ratio),
            visible_video: if spec.mode.has_video() {
                visible_count(spec.shapes.num_patches(Modality::Video)?, ratio)
            } else {
                0
            },
            flops: (c.modules.iter().sum::<u128>() * scale) as f64,
        });
    }
    let modules = to_f64(acc.modules);
    Ok(FlopsReport {
        mode: spec.mode,
        modules,
        attention: to_f64(acc.attention),
        projections: acc.projections as f64,
        total: modules.total(),
        encoder_passes: spec.encoder_passes(),
        per_epoch,
    })
}

/// Candidate over baseline, per module and in total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsComparison {
    pub modules: ModuleFlops,
    pub total: f64,
    /// Ratios with the attention score terms removed from both sides.
    pub linear_terms: ModuleFlops,
}

pub fn flops_compare(report: &FlopsReport, baseline: &FlopsReport) -> Result<FlopsComparison> {
    let (a, b) = (report.modules.values(), baseline.modules.values());
    let (aa, ba) = (report.attention.values(), baseline.attention.values());
    let mut ratios = [0.0; 5];
    let mut linear = [0.0; 5];
    for i in 0..5 {
        match (a[i] > 0.0, b[i] > 0.0) {
            (true, true) => {
                ratios[i] = a[i] / b[i];
                linear[i] = (a[i] - aa[i]) / (b[i] - ba[i]);
            }
            (false, false) => {
                ratios[i] = f64::NAN;
                linear[i] = f64::NAN;
            }
            _ => {
                return Err(FlopsError::Taxonomy(format!(
                    "{} present in only one report",
                    ModuleFlops::NAMES[i]
                )))
            }
        }
    }
    Ok(FlopsComparison {
        modules: ModuleFlops::from_values(ratios),
        total: report.total / baseline.total,
        linear_terms: ModuleFlops::from_values(linear),
    })
}

impl FlopsComparison {
    /// Plain-text table in module order, one row per module plus the total.
    pub fn table(&self) -> String {
        let mut out = format!("{:<16} {:>8} {:>8}\n", "module", "ratio", "linear");
        for ((name, r), l) in ModuleFlops::NAMES
            .iter()
            .zip(self.modules.values())
            .zip(self.linear_terms.values())
        {
            if r.is_nan() {
                out += &format!("{name:<16} {:>8} {:>8}\n", "-", "-");
            } else {
                out += &format!("{name:<16} {r:>7.3}x {l:>7.3}x\n");
            }
        }
        out += &format!("{:<16} {:>7.3}x\n", "total", self.total);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_block_by_hand() {
        // qkv 6 + out 2 + scores 2 + weighted sum 2 + softmax 5 + mlp 16 + gelu 32 + 2 norms 10
        assert_eq!(flops_transformer_block(1, 1, 1, 1, AttentionKind::SelfAttention), 75);
    }

    #[test]
    fn window_covering_sequence_is_self() {
        for l in [1, 7, 64] {
            assert_eq!(
                flops_transformer_block(l, l, 32, 4, AttentionKind::LocalWindow { window: l }),
                flops_transformer_block(l, l, 32, 4, AttentionKind::SelfAttention)
            );
        }
    }

    #[test]
    fn cross_with_equal_lengths_differs_only_by_kv_norm() {
        let (l, d) = (10, 16);
        let s = flops_transformer_block(l, l, d, 2, AttentionKind::SelfAttention);
        let c = flops_transformer_block(l, l, d, 2, AttentionKind::Cross);
        assert_eq!(c - s, LAYERNORM_PER_ELEMENT * (l * d) as u128);
    }
}
