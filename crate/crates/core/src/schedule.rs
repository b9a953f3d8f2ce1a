//! Masking-ratio curriculum, adaptive batch sizing, and the learning-rate
//! schedule. Everything is tabulated per epoch at construction.

use serde::{Deserialize, Serialize};

use crate::patch::round_half_even;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScheduleError {
    #[error("epoch {epoch} outside 0..{epochs}")]
    Epoch { epoch: usize, epochs: usize },
    #[error("invalid schedule: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Curriculum {
    Fixed {
        ratio: f64,
    },
    /// Affine in the epoch index from `start` (epoch 0) to `end` (last epoch).
    Linear {
        start: f64,
        end: f64,
    },
}

impl Default for Curriculum {
    fn default() -> Self {
        Curriculum::Fixed { ratio: 0.8 }
    }
}

impl Curriculum {
    pub fn endpoints(&self) -> (f64, f64) {
        match *self {
            Curriculum::Fixed { ratio } => (ratio, ratio),
            Curriculum::Linear { start, end } => (start, end),
        }
    }

    /// `min(ρ1, ρ2)`, the ratio at which the base batch size applies.
    pub fn min_ratio(&self) -> f64 {
        let (a, b) = self.endpoints();
        a.min(b)
    }

    fn validate(&self) -> Result<(), ScheduleError> {
        let (a, b) = self.endpoints();
        for r in [a, b] {
            if !(r > 0.0 && r < 1.0) {
                return Err(ScheduleError::Config(format!("masking ratio {r} must lie in (0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumSchedule {
    curriculum: Curriculum,
    ratios: Vec<f64>,
}

impl CurriculumSchedule {
    pub fn new(curriculum: Curriculum, epochs: usize) -> Result<Self, ScheduleError> {
        curriculum.validate()?;
        if epochs == 0 {
            return Err(ScheduleError::Config("epochs must be at least 1".into()));
        }
        let ratios = (0..epochs)
            .map(|e| match curriculum {
                Curriculum::Fixed { ratio } => ratio,
                Curriculum::Linear { start, end } => linear_ratio(start, end, epochs, e),
            })
            .collect();
        Ok(Self { curriculum, ratios })
    }

    pub fn curriculum(&self) -> Curriculum {
        self.curriculum
    }

    pub fn epochs(&self) -> usize {
        self.ratios.len()
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    pub fn masking_ratio_at(&self, epoch: usize) -> Result<f64, ScheduleError> {
        self.ratios.get(epoch).copied().ok_or(ScheduleError::Epoch {
            epoch,
            epochs: self.epochs(),
        })
    }
}

/// `ρ_e` for a linear curriculum; written as a convex combination so both
/// endpoints are reproduced exactly.
pub fn linear_ratio(start: f64, end: f64, epochs: usize, epoch: usize) -> f64 {
    if epochs <= 1 {
        return start;
    }
    let s = epoch as f64 / (epochs - 1) as f64;
    start * (1.0 - s) + end * s
}

/// `B_e = round((1 − min(ρ1, ρ2)) / (1 − ρ_e) · B0)`, at least 1.
pub fn adaptive_batch(base: usize, min_ratio: f64, ratio: f64) -> usize {
    let b = round_half_even((1.0 - min_ratio) / (1.0 - ratio) * base as f64);
    (b as usize).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchConfig {
    pub base_batch: usize,
    pub adaptive: bool,
    /// Upper bound on instances per forward/backward; larger effective
    /// batches are split and their gradients accumulated.
    pub micro_batch: Option<usize>,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            base_batch: 2048,
            adaptive: false,
            micro_batch: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    base: usize,
    sizes: Vec<usize>,
}

impl BatchPlan {
    pub fn new(config: &BatchConfig, curriculum: &CurriculumSchedule) -> Result<Self, ScheduleError> {
        if config.base_batch == 0 {
            return Err(ScheduleError::Config("base_batch must be at least 1".into()));
        }
        let min = curriculum.curriculum().min_ratio();
        let sizes = curriculum
            .ratios()
            .iter()
            .map(|&r| {
                if config.adaptive {
                    adaptive_batch(config.base_batch, min, r)
                } else {
                    config.base_batch
                }
            })
            .collect();
        Ok(Self {
            base: config.base_batch,
            sizes,
        })
    }

    pub fn base(&self) -> usize {
        self.base
    }

    pub fn batch_size_at(&self, epoch: usize) -> Result<usize, ScheduleError> {
        self.sizes.get(epoch).copied().ok_or(ScheduleError::Epoch {
            epoch,
            epochs: self.sizes.len(),
        })
    }

    /// `ceil(dataset / B_e)`.
    pub fn steps_at(&self, epoch: usize, dataset: usize) -> Result<usize, ScheduleError> {
        Ok(dataset.div_ceil(self.batch_size_at(epoch)?))
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to `min_lr` at the
/// final step `total_steps - 1`.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64, warmup_steps: usize, min_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let last = total_steps.saturating_sub(1);
    if last <= warmup_steps {
        return base_lr;
    }
    let progress = ((step - warmup_steps) as f64 / (last - warmup_steps) as f64).min(1.0);
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrConfig {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub scale_with_batch: bool,
}

impl Default for LrConfig {
    fn default() -> Self {
        Self {
            base_lr: 4e-4,
            min_lr: 1e-6,
            warmup_epochs: 8,
            scale_with_batch: false,
        }
    }
}

/// One row of the full per-epoch training table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub masking_ratio: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub first_step: usize,
    pub lr_first: f64,
    pub lr_last: f64,
}

/// Curriculum, batch plan and learning rate resolved against a dataset size.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSchedule {
    pub curriculum: CurriculumSchedule,
    pub batches: BatchPlan,
    pub lr: LrConfig,
    pub dataset: usize,
    rows: Vec<EpochRow>,
    warmup_steps: usize,
    total_steps: usize,
}

impl TrainingSchedule {
    pub fn new(
        curriculum: Curriculum,
        epochs: usize,
        batch: &BatchConfig,
        lr: LrConfig,
        dataset: usize,
    ) -> Result<Self, ScheduleError> {
        if dataset == 0 {
            return Err(ScheduleError::Config("dataset size must be at least 1".into()));
        }
        let curriculum = CurriculumSchedule::new(curriculum, epochs)?;
        let batches = BatchPlan::new(batch, &curriculum)?;
        let mut rows = Vec::with_capacity(epochs);
        let mut first_step = 0;
        for epoch in 0..epochs {
            let steps = batches.steps_at(epoch, dataset)?;
            rows.push(EpochRow {
                epoch,
                masking_ratio: curriculum.masking_ratio_at(epoch)?,
                batch_size: batches.batch_size_at(epoch)?,
                steps,
                first_step,
                lr_first: 0.0,
                lr_last: 0.0,
            });
            first_step += steps;
        }
        let total_steps = first_step;
        let warmup_steps = rows.iter().take(lr.warmup_epochs).map(|r| r.steps).sum();
        let mut schedule = Self {
            curriculum,
            batches,
            lr,
            dataset,
            rows,
            warmup_steps,
            total_steps,
        };
        for i in 0..schedule.rows.len() {
            let r = schedule.rows[i];
            schedule.rows[i].lr_first = schedule.lr_at(r.first_step, r.epoch);
            schedule.rows[i].lr_last = schedule.lr_at(r.first_step + r.steps - 1, r.epoch);
        }
        Ok(schedule)
    }

    pub fn rows(&self) -> &[EpochRow] {
        &self.rows
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_steps
    }

    /// Learning rate at a global step (epoch needed for batch scaling).
    pub fn lr_at(&self, step: usize, epoch: usize) -> f64 {
        let lr = lr_at(
            step,
            self.total_steps,
            self.lr.base_lr,
            self.warmup_steps,
            self.lr.min_lr,
        );
        if self.lr.scale_with_batch {
            let b = self.rows[epoch].batch_size as f64;
            lr * b / self.batches.base() as f64
        } else {
            lr
        }
    }
}
