//! Stage-1 objective: patchwise reconstruction error plus inter- and
//! intra-modal InfoNCE over two masked views of each instance.

use serde::{Deserialize, Serialize};

use crate::diffusion::{sample_timestep_with, standard_normal, DiffusionError, DiffusionSchedule};
use crate::model::{Ctx, MaskedTokens, Model, ModelError};
use crate::patch::{gather_rows, MaskingPlan, Modality, PatchError};
use crate::rng;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("contrastive loss needs at least 2 instances, got {0}")]
    DegenerateBatch(usize),
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error("batch does not match the model: {0}")]
    Batch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
    pub lambda_inter: f64,
    pub lambda_intra: f64,
    /// Restrict the reconstruction error to masked patches.
    pub masked_only: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            lambda_inter: 0.01,
            lambda_intra: 0.01,
            masked_only: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(LossError::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.lambda_inter >= 0.0 && self.lambda_intra >= 0.0) {
            return Err(LossError::Config("contrastive weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-element mean squared error between two equally shaped matrices.
pub fn mse(tape: &mut Tape, recon: Var, target: Var) -> Result<Var> {
    if tape.shape(recon) != tape.shape(target) {
        return Err(TensorError::ShapeMismatch {
            op: "mse",
            lhs: tape.shape(recon).to_vec(),
            rhs: tape.shape(target).to_vec(),
        }
        .into());
    }
    let diff = tape.sub(recon, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq)?)
}

/// Audio plus video reconstruction error.
pub fn mse_loss(tape: &mut Tape, recon_a: Var, target_a: Var, recon_v: Var, target_v: Var) -> Result<Var> {
    let a = mse(tape, recon_a, target_a)?;
    let v = mse(tape, recon_v, target_v)?;
    Ok(tape.add(a, v)?)
}

/// Symmetric InfoNCE over cosine similarities; row `i` of `x` and `y` form
/// the positive pair.
pub fn info_nce(tape: &mut Tape, x: Var, y: Var, temperature: f64) -> Result<Var> {
    let b = tape.shape(x)[0];
    if tape.shape(x).len() != 2 || tape.shape(x) != tape.shape(y) {
        return Err(TensorError::ShapeMismatch {
            op: "info_nce",
            lhs: tape.shape(x).to_vec(),
            rhs: tape.shape(y).to_vec(),
        }
        .into());
    }
    if b < 2 {
        return Err(LossError::DegenerateBatch(b));
    }
    if !(temperature > 0.0) {
        return Err(LossError::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let xn = tape.l2_normalize_rows(x)?;
    let yn = tape.l2_normalize_rows(y)?;
    let yt = tape.transpose(yn)?;
    let sim = tape.matmul(xn, yt)?;
    let logits = tape.scale(sim, 1.0 / temperature)?;
    let targets: Vec<usize> = (0..b).collect();
    let xy = tape.cross_entropy(logits, &targets)?;
    let lt = tape.transpose(logits)?;
    let yx = tape.cross_entropy(lt, &targets)?;
    let both = tape.add(xy, yx)?;
    Ok(tape.scale(both, 0.5)?)
}

/// One paired training instance, already patchified.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[M × audio_patch_dim]`
    pub audio: Tensor,
    /// `[N × video_patch_dim]`; absent in audio-only modes.
    pub video: Option<Tensor>,
}

/// The random choices one instance consumes in a step.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityDraw {
    pub views: [MaskingPlan; 2],
    /// Diffused masked patches of view 1, in `views[0].masked` order.
    pub diffused: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceDraw {
    pub t: Option<usize>,
    pub audio: ModalityDraw,
    pub video: Option<ModalityDraw>,
}

impl InstanceDraw {
    /// Two masking plans per modality, one timestep shared by both modalities,
    /// and fresh Gaussian noise, all derived from `seed`.
    pub fn sample(sample: &Sample, ratio: f64, schedule: Option<&DiffusionSchedule>, seed: u64) -> Result<Self> {
        let t = schedule.map(|s| sample_timestep_with(s.steps(), &mut rng::rng(rng::derive(seed, &[0]))));
        let modality = |patches: &Tensor, label: u64| -> Result<ModalityDraw> {
            let views = [
                MaskingPlan::random(patches.rows(), ratio, rng::derive(seed, &[label, 1]))?,
                MaskingPlan::random(patches.rows(), ratio, rng::derive(seed, &[label, 2]))?,
            ];
            let diffused = match (schedule, t) {
                (Some(s), Some(t)) => {
                    let x0 = gather_rows(patches, &views[0].masked)?;
                    let noise = standard_normal(x0.shape(), &mut rng::rng(rng::derive(seed, &[label, 3])));
                    Some(s.diffuse_with_noise(&x0, t, &noise)?)
                }
                _ => None,
            };
            Ok(ModalityDraw { views, diffused })
        };
        Ok(Self {
            t,
            audio: modality(&sample.audio, 10)?,
            video: sample.video.as_ref().map(|v| modality(v, 20)).transpose()?,
        })
    }

    fn tokens(d: &ModalityDraw) -> MaskedTokens<'_> {
        match &d.diffused {
            Some(x) => MaskedTokens::Diffused(x),
            None => MaskedTokens::Learned,
        }
    }

    fn modality(&self, m: Modality) -> Option<&ModalityDraw> {
        match m {
            Modality::Audio => Some(&self.audio),
            Modality::Video => self.video.as_ref(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse_audio: f64,
    pub mse_video: f64,
    pub nce_inter: f64,
    pub nce_intra_audio: f64,
    pub nce_intra_video: f64,
    pub total: f64,
    pub weights: LossWeights,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub inter: f64,
    pub intra: f64,
}

impl LossBreakdown {
    pub fn mse(&self) -> f64 {
        self.mse_audio + self.mse_video
    }
}

/// Loss terms recorded on the tape.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub total: Var,
    pub mse_audio: Var,
    pub mse_video: Option<Var>,
    pub nce_inter: Option<Var>,
    pub nce_intra_audio: Var,
    pub nce_intra_video: Option<Var>,
    pub weights: LossWeights,
}

impl Objective {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        LossBreakdown {
            mse_audio: get(Some(self.mse_audio)),
            mse_video: get(self.mse_video),
            nce_inter: get(self.nce_inter),
            nce_intra_audio: get(Some(self.nce_intra_audio)),
            nce_intra_video: get(self.nce_intra_video),
            total: get(Some(self.total)),
            weights: self.weights,
        }
    }
}

/// Uni-modal view embeddings and reconstructions for one instance.
#[derive(Debug, Clone, Copy)]
pub struct InstanceForward {
    pub audio_emb: [Var; 2],
    pub video_emb: Option<[Var; 2]>,
    pub recon_audio: Var,
    pub recon_video: Option<Var>,
}

/// Four encoder passes (two views per modality), fusion and decoding of view 1.
pub fn forward_instance(ctx: &mut Ctx, model: &Model, sample: &Sample, draw: &InstanceDraw) -> Result<InstanceForward> {
    let has_video = model.mode.has_video();
    if has_video != (sample.video.is_some() && draw.video.is_some()) {
        return Err(LossError::Batch(format!(
            "{:?} mode {} video input",
            model.mode,
            if has_video { "requires" } else { "rejects" }
        )));
    }
    if model.mode.diffusion() != draw.audio.diffused.is_some() {
        return Err(LossError::Batch(
            "diffused patches must be drawn exactly in diffusion modes".into(),
        ));
    }
    let um = |ctx: &mut Ctx, m: Modality, patches: &Tensor| -> Result<[Var; 2]> {
        let d = draw.modality(m).expect("checked above");
        Ok([
            model.encode(ctx, m, patches, &d.views[0])?,
            model.encode(ctx, m, patches, &d.views[1])?,
        ])
    };
    let a_um = um(ctx, Modality::Audio, &sample.audio)?;
    let v_um = match &sample.video {
        Some(v) if has_video => Some(um(ctx, Modality::Video, v)?),
        _ => None,
    };
    let (a_mm, v_mm) = match v_um {
        Some(v) => {
            let (a, v) = model.fuse(ctx, a_um[0], v[0])?;
            (a, Some(v))
        }
        None => (a_um[0], None),
    };
    let recon_audio = model.decode(
        ctx,
        Modality::Audio,
        a_mm,
        InstanceDraw::tokens(&draw.audio),
        &draw.audio.views[0],
    )?;
    let recon_video = match (v_mm, &draw.video) {
        (Some(v), Some(d)) => Some(model.decode(ctx, Modality::Video, v, InstanceDraw::tokens(d), &d.views[0])?),
        _ => None,
    };
    let pool = |ctx: &mut Ctx, pair: [Var; 2]| -> Result<[Var; 2]> {
        Ok([ctx.tape.mean_rows(pair[0])?, ctx.tape.mean_rows(pair[1])?])
    };
    let audio_emb = pool(ctx, a_um)?;
    let video_emb = v_um.map(|v| pool(ctx, v)).transpose()?;
    Ok(InstanceForward {
        audio_emb,
        video_emb,
        recon_audio,
        recon_video,
    })
}

/// Reconstruction error of one modality for one instance.
pub fn instance_mse(ctx: &mut Ctx, recon: Var, target: &Tensor, plan: &MaskingPlan, masked_only: bool) -> Result<Var> {
    if masked_only {
        let r = ctx.tape.gather_rows(recon, &plan.masked)?;
        let t = ctx.tape.constant(gather_rows(target, &plan.masked)?);
        mse(&mut ctx.tape, r, t)
    } else {
        let t = ctx.tape.constant(target.clone());
        mse(&mut ctx.tape, recon, t)
    }
}

/// Full stage-1 loss over a batch. Reconstruction terms average over
/// instances; contrastive terms use the batch as negatives.
pub fn stage1_objective(
    ctx: &mut Ctx,
    model: &Model,
    samples: &[Sample],
    draws: &[InstanceDraw],
    cfg: &LossConfig,
) -> Result<Objective> {
    cfg.validate()?;
    if samples.len() != draws.len() {
        return Err(LossError::Batch(format!(
            "{} samples but {} draws",
            samples.len(),
            draws.len()
        )));
    }
    if samples.len() < 2 {
        return Err(LossError::DegenerateBatch(samples.len()));
    }
    let b = samples.len() as f64;
    let mut mse_a = Vec::new();
    let mut mse_v = Vec::new();
    let mut emb: [Vec<Var>; 4] = Default::default();
    for (s, d) in samples.iter().zip(draws) {
        let f = forward_instance(ctx, model, s, d)?;
        mse_a.push(instance_mse(
            ctx,
            f.recon_audio,
            &s.audio,
            &d.audio.views[0],
            cfg.masked_only,
        )?);
        emb[0].push(f.audio_emb[0]);
        emb[1].push(f.audio_emb[1]);
        if let (Some(r), Some(v), Some(vd), Some(ve)) = (f.recon_video, &s.video, &d.video, f.video_emb) {
            mse_v.push(instance_mse(ctx, r, v, &vd.views[0], cfg.masked_only)?);
            emb[2].push(ve[0]);
            emb[3].push(ve[1]);
        }
    }
    let tape = &mut ctx.tape;
    let mut batch_mean = |terms: &[Var]| -> Result<Option<Var>> {
        if terms.is_empty() {
            return Ok(None);
        }
        let mut s = terms[0];
        for &t in &terms[1..] {
            s = tape.add(s, t)?;
        }
        Ok(Some(tape.scale(s, 1.0 / b)?))
    };
    let mse_audio = batch_mean(&mse_a)?.expect("non-empty batch");
    let mse_video = batch_mean(&mse_v)?;

    let a1 = tape.concat_rows(&emb[0])?;
    let a2 = tape.concat_rows(&emb[1])?;
    let nce_intra_audio = info_nce(tape, a1, a2, cfg.temperature)?;
    let (nce_inter, nce_intra_video) = if emb[2].is_empty() {
        (None, None)
    } else {
        let v1 = tape.concat_rows(&emb[2])?;
        let v2 = tape.concat_rows(&emb[3])?;
        (
            Some(info_nce(tape, a1, v1, cfg.temperature)?),
            Some(info_nce(tape, v1, v2, cfg.temperature)?),
        )
    };

    let mut total = mse_audio;
    if let Some(v) = mse_video {
        total = tape.add(total, v)?;
    }
    let add_weighted = |tape: &mut Tape, total: Var, term: Option<Var>, w: f64| -> Result<Var> {
        match term {
            Some(t) if w != 0.0 => {
                let s = tape.scale(t, w)?;
                Ok(tape.add(total, s)?)
            }
            _ => Ok(total),
        }
    };
    total = add_weighted(tape, total, nce_inter, cfg.lambda_inter)?;
    total = add_weighted(tape, total, Some(nce_intra_audio), cfg.lambda_intra)?;
    total = add_weighted(tape, total, nce_intra_video, cfg.lambda_intra)?;

    Ok(Objective {
        total,
        mse_audio,
        mse_video,
        nce_inter,
        nce_intra_audio,
        nce_intra_video,
        weights: LossWeights {
            inter: cfg.lambda_inter,
            intra: cfg.lambda_intra,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn mse_constant_offset() {
        let mut tape = Tape::new();
        let r = tape.leaf(m(1, 4, &[1.5, 2.5, 3.5, 4.5]), true);
        let t = tape.constant(m(1, 4, &[1.0, 2.0, 3.0, 4.0]));
        let l = mse(&mut tape, r, t).unwrap();
        assert!((tape.value(l).item() - 0.25).abs() < 1e-15);
        let same = mse(&mut tape, t, t).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);
    }

    #[test]
    fn info_nce_closed_forms() {
        let mut tape = Tape::new();
        let x = tape.constant(m(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let l = info_nce(&mut tape, x, x, 0.1).unwrap();
        let expected = (1.0 + (-10.0f64).exp()).ln();
        assert!((tape.value(l).item() - expected).abs() < 1e-12);
        assert!((expected - 4.54e-5).abs() < 1e-7);

        let same = tape.constant(m(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]));
        let l = info_nce(&mut tape, same, same, 0.1).unwrap();
        assert!((tape.value(l).item() - 3f64.ln()).abs() < 1e-12);

        let one = tape.constant(m(1, 2, &[1.0, 0.0]));
        assert_eq!(
            info_nce(&mut tape, one, one, 0.1).unwrap_err(),
            LossError::DegenerateBatch(1)
        );
        let zero = tape.constant(m(2, 2, &[0.0, 0.0, 1.0, 0.0]));
        assert!(info_nce(&mut tape, zero, x, 0.1).is_err());
    }
}
