//! Built-in gradient and invariant checks, shared by the `selftest`
//! subcommand and the test suites.

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::SyntheticDataset;
use crate::diffusion::{DiffusionConfig, DiffusionSchedule};
use crate::flops::{flops_compare, flops_pretraining};
use crate::gradcheck::{check_entries, REL_FLOOR};
use crate::losses::{info_nce, stage1_objective, InstanceDraw, LossError};
use crate::model::{AudioAttention, Ctx, Mode, Model, VideoAttention};
use crate::patch::{patchify, visible_count, MaskingPlan, PatchSpec};
use crate::rng;
use crate::schedule::{Curriculum, CurriculumSchedule};
use crate::tensor::{Tape, Tensor};

/// Mode plus decoder attention choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GradCase {
    pub mode: Mode,
    pub video_attention: VideoAttention,
    pub audio_attention: AudioAttention,
}

impl GradCase {
    /// Every mode under both decoder attention kinds. Audio-video modes pair
    /// the video kind with the opposite audio kind so all three block kinds
    /// are covered; audio-only modes vary the audio kind.
    pub fn all() -> Vec<GradCase> {
        let mut out = Vec::new();
        for mode in Mode::ALL {
            let kinds = [
                (VideoAttention::SelfAttention, AudioAttention::LocalWindow),
                (VideoAttention::Cross, AudioAttention::SelfAttention),
            ];
            for (video_attention, audio_attention) in kinds {
                out.push(GradCase {
                    mode,
                    video_attention,
                    audio_attention,
                });
            }
        }
        out
    }

    pub fn label(&self) -> String {
        if self.mode.has_video() {
            format!("{:?}/video-{:?}", self.mode, self.video_attention)
        } else {
            format!("{:?}/audio-{:?}", self.mode, self.audio_attention)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub case: String,
    pub tensors: usize,
    pub entries_checked: usize,
    pub scalars: usize,
    pub worst_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Compares backward gradients of the toy stage-1 loss with central
/// differences. `per_tensor` limits how many entries of each parameter
/// tensor are probed (evenly spaced); `None` probes every scalar.
pub fn check_model_gradients(
    case: GradCase,
    seed: u64,
    per_tensor: Option<usize>,
    h: f64,
) -> Result<GradReport, LossError> {
    let mut cfg = RunConfig::toy(case.mode);
    cfg.model.video_attention = case.video_attention;
    cfg.model.audio_attention = case.audio_attention;
    let model = Model::new(case.mode, cfg.model, cfg.data, seed)?;
    let dataset = SyntheticDataset::new(cfg.data, cfg.synthetic, rng::derive(seed, &[1]), case.mode.has_video())?;
    let samples = (0..2).map(|i| dataset.sample(i)).collect::<Result<Vec<_>, _>>()?;
    let ratio = cfg.curriculum.endpoints().0;
    let diffusion = if case.mode.diffusion() {
        Some(DiffusionSchedule::new(&cfg.diffusion)?)
    } else {
        None
    };
    let draws = samples
        .iter()
        .enumerate()
        .map(|(i, s)| InstanceDraw::sample(s, ratio, diffusion.as_ref(), rng::derive(seed, &[2, i as u64])))
        .collect::<Result<Vec<_>, _>>()?;

    let mut ctx = Ctx::new(&model.store, true);
    let objective = stage1_objective(&mut ctx, &model, &samples, &draws, &cfg.loss)?;
    ctx.tape.backward(objective.total)?;
    let analytic = ctx.param_grads();

    let mut values: Vec<Tensor> = model.store.params().iter().map(|p| p.value.clone()).collect();
    let entries: Vec<(usize, usize)> = values
        .iter()
        .enumerate()
        .flat_map(|(i, t)| {
            let n = t.numel();
            let k = per_tensor.map_or(n, |k| k.min(n));
            (0..k).map(move |j| (i, j * n / k))
        })
        .collect();
    let loss = |vals: &[Tensor]| {
        let mut ctx = Ctx::from_values(vals, false);
        let obj = stage1_objective(&mut ctx, &model, &samples, &draws, &cfg.loss).expect("forward succeeded once");
        ctx.tape.value(obj.total).item()
    };
    let checks = check_entries(loss, &mut values, &analytic, h, &entries);
    let worst = checks
        .iter()
        .max_by(|a, b| a.rel_error(REL_FLOOR).total_cmp(&b.rel_error(REL_FLOOR)))
        .copied()
        .expect("model has parameters");
    Ok(GradReport {
        case: case.label(),
        tensors: values.len(),
        entries_checked: checks.len(),
        scalars: model.store.num_scalars(),
        worst_rel_error: worst.rel_error(REL_FLOOR),
        worst_param: model.store.params()[worst.input].name.clone(),
        worst_index: worst.index,
        worst_analytic: worst.analytic,
        worst_numeric: worst.numeric,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &str, passed: bool, detail: impl Into<String>) -> CheckOutcome {
    CheckOutcome {
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

/// Quick suite: sampled gradient checks for every case plus core invariants.
pub fn run() -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    for case in GradCase::all() {
        out.push(match check_model_gradients(case, 7, Some(3), 1e-5) {
            Ok(r) => outcome(
                &format!("gradients {}", r.case),
                r.worst_rel_error < 1e-3,
                format!(
                    "{} entries over {} tensors, worst {:.2e} at {}[{}]",
                    r.entries_checked, r.tensors, r.worst_rel_error, r.worst_param, r.worst_index
                ),
            ),
            Err(e) => outcome(&format!("gradients {}", case.label()), false, e.to_string()),
        });
    }

    let mut ok = true;
    for seed in 0..200u64 {
        let total = 1 + (seed as usize * 7) % 300;
        let ratio = 0.05 + 0.9 * (seed as f64 / 200.0);
        if visible_count(total, ratio) == 0 || visible_count(total, ratio) == total {
            continue;
        }
        let plan = MaskingPlan::random(total, ratio, seed).expect("valid ratio");
        let mut seen = vec![false; total];
        for &i in plan.visible.iter().chain(&plan.masked) {
            ok &= !std::mem::replace(&mut seen[i], true);
        }
        ok &= seen.iter().all(|&s| s) && plan.num_visible() == visible_count(total, ratio);
    }
    out.push(outcome("masking plans partition", ok, "200 plans"));

    let x = crate::diffusion::standard_normal(&[4, 8, 8, 3], &mut rng::rng(3));
    let spec = PatchSpec::Video {
        temporal: 2,
        height: 4,
        width: 4,
        channels: 3,
    };
    let round_trip = patchify(&x, spec).and_then(|g| crate::patch::unpatchify(&g.patches, &g));
    out.push(outcome(
        "patchify round trip",
        round_trip.as_ref().is_ok_and(|y| y == &x),
        "video 4x8x8x3",
    ));

    let s = CurriculumSchedule::new(Curriculum::Linear { start: 0.9, end: 0.8 }, 60).expect("valid");
    out.push(outcome(
        "curriculum endpoints",
        s.ratios()[0] == 0.9 && s.ratios()[59] == 0.8,
        "linear 0.9 to 0.8 over 60 epochs",
    ));

    let d = DiffusionSchedule::new(&DiffusionConfig::default()).expect("default schedule");
    let monotone = d.alpha_bars().windows(2).all(|w| w[1] < w[0]);
    let boosted = d.betas().iter().zip(d.betas_eff()).all(|(b, e)| e > b);
    out.push(outcome(
        "diffusion schedule",
        monotone && boosted,
        "alpha_bar decreasing, beta^phi > beta",
    ));

    let mut tape = Tape::new();
    let same = tape.constant(Tensor::filled(&[4, 3], 1.0));
    let uniform = info_nce(&mut tape, same, same, 0.1).map(|v| tape.value(v).item());
    out.push(outcome(
        "info_nce uniform logits",
        uniform.as_ref().is_ok_and(|l| (l - 4f64.ln()).abs() < 1e-12),
        "equals ln B",
    ));

    let full = RunConfig {
        epochs: 60,
        dataset_size: 1000,
        model: Default::default(),
        data: Default::default(),
        ..RunConfig::toy(Mode::Diffmavil)
    };
    let self_ratio = flops_pretraining(&full.workload())
        .and_then(|r| flops_compare(&r, &r))
        .map(|c| c.total);
    out.push(outcome(
        "flops self comparison",
        self_ratio.as_ref().is_ok_and(|r| *r == 1.0),
        "report against itself",
    ));

    out
}
