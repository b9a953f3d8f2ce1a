//! Pre-training loop over synthetic pairs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::data::SyntheticDataset;
use crate::diffusion::DiffusionSchedule;
use crate::flops::{instance_training_flops, FlopsError};
use crate::losses::{forward_instance, instance_mse, stage1_objective, InstanceDraw, LossBreakdown, LossError, Sample};
use crate::model::{Ctx, Model, ModelError};
use crate::optim::AdamW;
use crate::patch::PatchError;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Flops(#[from] FlopsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("non-finite loss at step {step}: {loss:?}")]
    Divergence { step: usize, loss: LossBreakdown },
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub epoch: usize,
    pub masking_ratio: f64,
    /// Effective batch; split into `micro_batches` forward/backward passes.
    pub batch_size: usize,
    pub micro_batches: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub cumulative_flops: f64,
    pub wall_seconds: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub diverged: bool,
}

/// Held-out reconstruction error and embedding alignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mse_audio: f64,
    pub mse_video: f64,
    /// Mean cosine between audio and video embeddings of the same instance.
    pub positive_cosine: Option<f64>,
    /// Mean cosine over mismatched audio/video pairs.
    pub negative_cosine: Option<f64>,
}

impl Evaluation {
    pub fn mse(&self) -> f64 {
        self.mse_audio + self.mse_video
    }
}

fn unit_rows(rows: &[Tensor]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let n = r.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            r.data().iter().map(|v| v / n).collect()
        })
        .collect()
}

/// Evaluates `model` on `samples` with draws fixed by `seed`.
pub fn evaluate(
    model: &Model,
    samples: &[Sample],
    ratio: f64,
    diffusion: Option<&DiffusionSchedule>,
    masked_only: bool,
    seed: u64,
) -> Result<Evaluation> {
    let (mut mse_a, mut mse_v) = (0.0, 0.0);
    let (mut emb_a, mut emb_v) = (Vec::new(), Vec::new());
    for (i, s) in samples.iter().enumerate() {
        let draw = InstanceDraw::sample(s, ratio, diffusion, rng::derive(seed, &[i as u64]))?;
        let mut ctx = Ctx::new(&model.store, false);
        let f = forward_instance(&mut ctx, model, s, &draw)?;
        let a = instance_mse(&mut ctx, f.recon_audio, &s.audio, &draw.audio.views[0], masked_only)?;
        mse_a += ctx.tape.value(a).item();
        emb_a.push(ctx.tape.value(f.audio_emb[0]).clone());
        if let (Some(r), Some(v), Some(d), Some(e)) = (f.recon_video, &s.video, &draw.video, f.video_emb) {
            let m = instance_mse(&mut ctx, r, v, &d.views[0], masked_only)?;
            mse_v += ctx.tape.value(m).item();
            emb_v.push(ctx.tape.value(e[0]).clone());
        }
    }
    let n = samples.len() as f64;
    let (mut positive, mut negative) = (None, None);
    if emb_v.len() == samples.len() && samples.len() >= 2 {
        let (a, v) = (unit_rows(&emb_a), unit_rows(&emb_v));
        let (mut pos, mut neg) = (0.0, 0.0);
        for (i, ai) in a.iter().enumerate() {
            for (j, vj) in v.iter().enumerate() {
                let c: f64 = ai.iter().zip(vj).map(|(x, y)| x * y).sum();
                if i == j {
                    pos += c;
                } else {
                    neg += c;
                }
            }
        }
        positive = Some(pos / n);
        negative = Some(neg / (n * (n - 1.0)));
    }
    Ok(Evaluation {
        mse_audio: mse_a / n,
        mse_video: mse_v / n,
        positive_cosine: positive,
        negative_cosine: negative,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainOutcome {
    pub steps: usize,
    pub initial: Evaluation,
    pub last: Evaluation,
    pub cumulative_flops: f64,
    pub video_constructions: usize,
    pub records: Vec<MetricsRecord>,
}

/// Splits `n` items into the fewest near-equal parts of at most `cap`.
fn split(n: usize, cap: usize) -> Vec<usize> {
    let parts = n.div_ceil(cap.max(1)).max(1);
    (0..parts).map(|i| n / parts + usize::from(i < n % parts)).collect()
}

const EVAL_LABEL: u64 = 0xE7A1;

/// Runs the configured schedule. When `out` is given, writes the filled-in
/// config, a JSONL metrics stream flushed per step, and a final checkpoint.
pub fn pretrain(config: &RunConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let schedule = config.training_schedule()?;
    let workload = config.workload();
    let mut model = Model::new(config.mode, config.model, config.data, rng::derive(config.seed, &[1]))?;
    let diffusion = if config.mode.diffusion() {
        Some(DiffusionSchedule::new(&config.diffusion).map_err(LossError::from)?)
    } else {
        None
    };
    let dataset = SyntheticDataset::new(
        config.data,
        config.synthetic,
        rng::derive(config.seed, &[2]),
        config.mode.has_video(),
    )?;
    let mut optimizer = AdamW::new(config.optimizer, &model.store);

    let mut metrics = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("config.json"), config.to_json())?;
            Some(BufWriter::new(File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };

    let eval_samples = (0..config.eval_size)
        .map(|i| dataset.sample((config.dataset_size + i) as u64))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let eval_ratio = schedule.rows().last().map_or(0.75, |r| r.masking_ratio);
    let eval_seed = rng::derive(config.seed, &[EVAL_LABEL]);
    let eval = |model: &Model| {
        evaluate(
            model,
            &eval_samples,
            eval_ratio,
            diffusion.as_ref(),
            config.loss.masked_only,
            eval_seed,
        )
    };
    let initial = eval(&model)?;

    let start = Instant::now();
    let limit = config.max_steps.unwrap_or(usize::MAX);
    let mut step = 0;
    let mut cumulative_flops = 0.0;
    let mut records = Vec::new();
    'epochs: for row in schedule.rows() {
        let per_instance = instance_training_flops(&workload, row.masking_ratio)?;
        let mut order: Vec<u64> = (0..config.dataset_size as u64).collect();
        order.shuffle(&mut rng::rng(rng::derive(config.seed, &[3, row.epoch as u64])));
        for batch in order.chunks(row.batch_size) {
            if step >= limit {
                break 'epochs;
            }
            let parts = split(batch.len(), config.batch.micro_batch.unwrap_or(batch.len()));
            let mut grads: Vec<Tensor> = model
                .store
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect();
            let mut loss = LossBreakdown {
                mse_audio: 0.0,
                mse_video: 0.0,
                nce_inter: 0.0,
                nce_intra_audio: 0.0,
                nce_intra_video: 0.0,
                total: 0.0,
                weights: Default::default(),
            };
            let mut offset = 0;
            for &len in &parts {
                let ids = &batch[offset..offset + len];
                offset += len;
                let samples = ids
                    .iter()
                    .map(|&i| dataset.sample(i))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                let draws = samples
                    .iter()
                    .zip(ids)
                    .map(|(s, &i)| {
                        InstanceDraw::sample(
                            s,
                            row.masking_ratio,
                            diffusion.as_ref(),
                            rng::derive(config.seed, &[4, step as u64, i]),
                        )
                    })
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                let mut ctx = Ctx::new(&model.store, true);
                let objective = stage1_objective(&mut ctx, &model, &samples, &draws, &config.loss)?;
                let part = objective.breakdown(&ctx.tape);
                let w = len as f64 / batch.len() as f64;
                loss.mse_audio += w * part.mse_audio;
                loss.mse_video += w * part.mse_video;
                loss.nce_inter += w * part.nce_inter;
                loss.nce_intra_audio += w * part.nce_intra_audio;
                loss.nce_intra_video += w * part.nce_intra_video;
                loss.total += w * part.total;
                loss.weights = part.weights;
                if !part.total.is_finite() {
                    break;
                }
                ctx.tape.backward(objective.total).map_err(LossError::from)?;
                for (acc, g) in grads.iter_mut().zip(ctx.param_grads()) {
                    acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += w * b);
                }
            }
            let lr = schedule.lr_at(step, row.epoch);
            let mut record = MetricsRecord {
                step,
                epoch: row.epoch,
                masking_ratio: row.masking_ratio,
                batch_size: batch.len(),
                micro_batches: parts.len(),
                lr,
                loss,
                cumulative_flops,
                wall_seconds: start.elapsed().as_secs_f64(),
                diverged: false,
            };
            if !loss.total.is_finite() {
                record.diverged = true;
                if let Some(m) = metrics.as_mut() {
                    writeln!(m, "{}", serde_json::to_string(&record).expect("record serializes"))?;
                    m.flush()?;
                }
                return Err(TrainError::Divergence { step, loss });
            }
            optimizer.step(&mut model.store, &grads, lr);
            cumulative_flops += batch.len() as f64 * per_instance;
            record.cumulative_flops = cumulative_flops;
            if let Some(m) = metrics.as_mut() {
                writeln!(m, "{}", serde_json::to_string(&record).expect("record serializes"))?;
                m.flush()?;
            }
            records.push(record);
            step += 1;
        }
    }

    let last = eval(&model)?;
    if let Some(dir) = out {
        checkpoint::save(&dir.join("checkpoint.bin"), &model.store, config.mode, step as u64)?;
        std::fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&serde_json::json!({
                "steps": step,
                "initial": initial,
                "final": last,
                "cumulative_flops": cumulative_flops,
            }))
            .expect("summary serializes"),
        )?;
    }
    Ok(TrainOutcome {
        steps: step,
        initial,
        last,
        cumulative_flops,
        video_constructions: dataset.video_constructions(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_balanced() {
        assert_eq!(split(10, 4), vec![4, 3, 3]);
        assert_eq!(split(8, 8), vec![8]);
        assert_eq!(split(5, 4), vec![3, 2]);
        assert_eq!(split(9, 100), vec![9]);
    }
}
