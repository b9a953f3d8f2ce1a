//! Patchify/unpatchify for spectrograms and video clips, and random masking
//! plans over the resulting patch sequence.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PatchError {
    #[error("axis {axis} of length {len} is not divisible by patch size {patch}")]
    Geometry { axis: usize, len: usize, patch: usize },
    #[error("expected input of rank {expected}, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("masking ratio {ratio} must lie strictly between 0 and 1")]
    InvalidRatio { ratio: f64 },
    #[error("masking {total} patches at ratio {ratio} leaves {visible} visible")]
    DegeneratePlan { total: usize, ratio: f64, visible: usize },
    #[error("plan/grid mismatch: {0}")]
    PlanMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Audio,
    Video,
}

/// Patch geometry for one modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "modality", rename_all = "snake_case")]
pub enum PatchSpec {
    /// Spectrogram `[time × freq]` cut into `time × freq` tiles.
    Audio { time: usize, freq: usize },
    /// Clip `[frames × height × width × channels]` cut into tubelets.
    Video {
        temporal: usize,
        height: usize,
        width: usize,
        channels: usize,
    },
}

impl PatchSpec {
    pub fn modality(&self) -> Modality {
        match self {
            PatchSpec::Audio { .. } => Modality::Audio,
            PatchSpec::Video { .. } => Modality::Video,
        }
    }

    pub fn patch_dim(&self) -> usize {
        match *self {
            PatchSpec::Audio { time, freq } => time * freq,
            PatchSpec::Video {
                temporal,
                height,
                width,
                channels,
            } => temporal * height * width * channels,
        }
    }

    /// Patch extent along each axis of the raw input.
    fn extents(&self) -> Vec<usize> {
        match *self {
            PatchSpec::Audio { time, freq } => vec![time, freq],
            PatchSpec::Video {
                temporal,
                height,
                width,
                channels,
            } => vec![temporal, height, width, channels],
        }
    }

    /// Grid dimensions for an input of the given shape.
    pub fn grid_dims(&self, input_shape: &[usize]) -> Result<Vec<usize>, PatchError> {
        let ext = self.extents();
        if input_shape.len() != ext.len() {
            return Err(PatchError::Rank {
                expected: ext.len(),
                shape: input_shape.to_vec(),
            });
        }
        for (axis, (&len, &patch)) in input_shape.iter().zip(&ext).enumerate() {
            if patch == 0 || len % patch != 0 {
                return Err(PatchError::Geometry { axis, len, patch });
            }
        }
        let mut grid: Vec<usize> = input_shape.iter().zip(&ext).map(|(l, p)| l / p).collect();
        if let PatchSpec::Video { .. } = self {
            // Channels are folded into each patch, not tiled.
            grid.pop();
        }
        Ok(grid)
    }

    pub fn num_patches(&self, input_shape: &[usize]) -> Result<usize, PatchError> {
        Ok(self.grid_dims(input_shape)?.iter().product())
    }
}

/// A patchified input: `patches` holds one flattened patch per row in
/// grid (row-major) order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub modality: Modality,
    pub spec: PatchSpec,
    pub input_shape: Vec<usize>,
    pub grid_dims: Vec<usize>,
    pub patch_dim: usize,
    pub patches: Tensor,
}

impl PatchGrid {
    pub fn num_patches(&self) -> usize {
        self.patches.rows()
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Visits every (patch, offset-in-patch, flat input index) triple.
fn for_each_element(spec: &PatchSpec, input_shape: &[usize], grid: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let ext = spec.extents();
    let in_strides = strides(input_shape);
    let rank = input_shape.len();
    // Grid over the tiled axes; for video the channel axis has grid size 1.
    let mut full_grid = grid.to_vec();
    full_grid.resize(rank, 1);
    let num_patches: usize = grid.iter().product();
    let patch_dim: usize = ext.iter().product();
    let ext_strides = strides(&ext);
    let grid_strides = strides(&full_grid);
    for p in 0..num_patches {
        for o in 0..patch_dim {
            let mut flat = 0;
            for axis in 0..rank {
                let g = (p / grid_strides[axis]) % full_grid[axis];
                let e = (o / ext_strides[axis]) % ext[axis];
                flat += (g * ext[axis] + e) * in_strides[axis];
            }
            f(p, o, flat);
        }
    }
}

/// Cuts `x` into non-overlapping patches.
pub fn patchify(x: &Tensor, spec: PatchSpec) -> Result<PatchGrid, PatchError> {
    let grid_dims = spec.grid_dims(x.shape())?;
    let num: usize = grid_dims.iter().product();
    let patch_dim = spec.patch_dim();
    let mut data = vec![0.0; num * patch_dim];
    let src = x.data();
    for_each_element(&spec, x.shape(), &grid_dims, |p, o, flat| {
        data[p * patch_dim + o] = src[flat];
    });
    Ok(PatchGrid {
        modality: spec.modality(),
        spec,
        input_shape: x.shape().to_vec(),
        grid_dims,
        patch_dim,
        patches: Tensor::new(vec![num, patch_dim], data)?,
    })
}

/// Inverse of [`patchify`] for a `[num_patches × patch_dim]` matrix laid out
/// on `grid`'s geometry.
pub fn unpatchify(patches: &Tensor, grid: &PatchGrid) -> Result<Tensor, PatchError> {
    let expect = [grid.num_patches(), grid.patch_dim];
    if patches.shape() != expect {
        return Err(PatchError::PlanMismatch(format!(
            "patch matrix {:?} does not match grid {:?}",
            patches.shape(),
            expect
        )));
    }
    let mut data = vec![0.0; patches.numel()];
    let src = patches.data();
    let pd = grid.patch_dim;
    for_each_element(&grid.spec, &grid.input_shape, &grid.grid_dims, |p, o, flat| {
        data[flat] = src[p * pd + o];
    });
    Ok(Tensor::new(grid.input_shape.clone(), data)?)
}

/// Rounds to the nearest integer, ties to even.
pub fn round_half_even(x: f64) -> f64 {
    x.round_ties_even()
}

/// Number of patches left visible at masking ratio `ratio`.
pub fn visible_count(total: usize, ratio: f64) -> usize {
    round_half_even((1.0 - ratio) * total as f64) as usize
}

/// Partition of `0..total` into visible and masked patch indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskingPlan {
    pub total: usize,
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    /// `restore[i]` is the row of `[visible ∥ masked]` holding patch `i`.
    pub restore: Vec<usize>,
}

impl MaskingPlan {
    /// Samples a uniform random visible subset of size `⌊(1-ρ)·total⌉`.
    pub fn random(total: usize, ratio: f64, seed: u64) -> Result<Self, PatchError> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(PatchError::InvalidRatio { ratio });
        }
        let visible = visible_count(total, ratio);
        if visible == 0 || visible >= total {
            return Err(PatchError::DegeneratePlan { total, ratio, visible });
        }
        let mut order: Vec<usize> = (0..total).collect();
        order.shuffle(&mut rng::rng(seed));
        let mut vis = order[..visible].to_vec();
        let mut masked = order[visible..].to_vec();
        vis.sort_unstable();
        masked.sort_unstable();
        Self::from_visible_sorted(total, vis, masked)
    }

    /// Builds a plan from an explicit visible set.
    pub fn from_visible(total: usize, visible: &[usize]) -> Result<Self, PatchError> {
        let mut flags = vec![false; total];
        for &v in visible {
            if v >= total || flags[v] {
                return Err(PatchError::PlanMismatch(format!(
                    "visible index {v} invalid for {total} patches"
                )));
            }
            flags[v] = true;
        }
        let vis: Vec<usize> = (0..total).filter(|&i| flags[i]).collect();
        let masked: Vec<usize> = (0..total).filter(|&i| !flags[i]).collect();
        if vis.is_empty() || masked.is_empty() {
            return Err(PatchError::DegeneratePlan {
                total,
                ratio: masked.len() as f64 / total as f64,
                visible: vis.len(),
            });
        }
        Self::from_visible_sorted(total, vis, masked)
    }

    fn from_visible_sorted(total: usize, visible: Vec<usize>, masked: Vec<usize>) -> Result<Self, PatchError> {
        let mut restore = vec![0; total];
        for (row, &p) in visible.iter().chain(&masked).enumerate() {
            restore[p] = row;
        }
        Ok(Self {
            total,
            visible,
            masked,
            restore,
        })
    }

    pub fn num_visible(&self) -> usize {
        self.visible.len()
    }

    pub fn num_masked(&self) -> usize {
        self.masked.len()
    }

    fn check_grid(&self, grid: &PatchGrid) -> Result<(), PatchError> {
        if grid.num_patches() != self.total {
            return Err(PatchError::PlanMismatch(format!(
                "plan covers {} patches, grid has {}",
                self.total,
                grid.num_patches()
            )));
        }
        Ok(())
    }

    pub fn gather_visible(&self, grid: &PatchGrid) -> Result<Tensor, PatchError> {
        self.check_grid(grid)?;
        gather_rows(&grid.patches, &self.visible)
    }

    pub fn gather_masked(&self, grid: &PatchGrid) -> Result<Tensor, PatchError> {
        self.check_grid(grid)?;
        gather_rows(&grid.patches, &self.masked)
    }

    /// Reassembles `[visible ∥ masked]` rows into original patch order.
    pub fn restore_order(&self, visible: &Tensor, masked: &Tensor) -> Result<Tensor, PatchError> {
        if visible.rows() != self.num_visible() || masked.rows() != self.num_masked() || visible.cols() != masked.cols()
        {
            return Err(PatchError::PlanMismatch(format!(
                "restore expects {}+{} rows of equal width, got {:?} and {:?}",
                self.num_visible(),
                self.num_masked(),
                visible.shape(),
                masked.shape()
            )));
        }
        let mut data = visible.data().to_vec();
        data.extend_from_slice(masked.data());
        let joined = Tensor::new(vec![self.total, visible.cols()], data)?;
        gather_rows(&joined, &self.restore)
    }
}

/// Input and patch geometry of both modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataShapes {
    /// `[time, freq]`
    pub audio: [usize; 2],
    /// `[time, freq]`
    pub audio_patch: [usize; 2],
    /// `[frames, height, width, channels]`
    pub video: [usize; 4],
    /// `[temporal, height, width]`
    pub video_patch: [usize; 3],
}

impl Default for DataShapes {
    fn default() -> Self {
        Self {
            audio: [1024, 128],
            audio_patch: [16, 16],
            video: [16, 224, 224, 3],
            video_patch: [2, 16, 16],
        }
    }
}

impl DataShapes {
    /// 16 audio patches and 8 video patches.
    pub fn toy() -> Self {
        Self {
            audio: [16, 16],
            audio_patch: [4, 4],
            video: [4, 8, 8, 1],
            video_patch: [2, 4, 4],
        }
    }

    pub fn audio_spec(&self) -> PatchSpec {
        PatchSpec::Audio {
            time: self.audio_patch[0],
            freq: self.audio_patch[1],
        }
    }

    pub fn video_spec(&self) -> PatchSpec {
        PatchSpec::Video {
            temporal: self.video_patch[0],
            height: self.video_patch[1],
            width: self.video_patch[2],
            channels: self.video[3],
        }
    }

    pub fn spec(&self, modality: Modality) -> PatchSpec {
        match modality {
            Modality::Audio => self.audio_spec(),
            Modality::Video => self.video_spec(),
        }
    }

    pub fn input_shape(&self, modality: Modality) -> Vec<usize> {
        match modality {
            Modality::Audio => self.audio.to_vec(),
            Modality::Video => self.video.to_vec(),
        }
    }

    pub fn num_patches(&self, modality: Modality) -> Result<usize, PatchError> {
        self.spec(modality).num_patches(&self.input_shape(modality))
    }

    pub fn validate(&self) -> Result<(), PatchError> {
        self.num_patches(Modality::Audio)?;
        self.num_patches(Modality::Video)?;
        Ok(())
    }
}

/// Copies the listed rows of a matrix (repeats allowed).
pub fn gather_rows(t: &Tensor, index: &[usize]) -> Result<Tensor, PatchError> {
    let cols = t.cols();
    let mut data = Vec::with_capacity(index.len() * cols);
    for &i in index {
        if i >= t.rows() {
            return Err(PatchError::PlanMismatch(format!(
                "row {i} out of range for {} rows",
                t.rows()
            )));
        }
        data.extend_from_slice(t.row(i));
    }
    Ok(Tensor::new(vec![index.len(), cols], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn full_scale_audio_grid() {
        let grid = patchify(&Tensor::zeros(&[1024, 128]), PatchSpec::Audio { time: 16, freq: 16 }).unwrap();
        assert_eq!(grid.grid_dims, vec![64, 8]);
        assert_eq!(grid.num_patches(), 512);
        assert_eq!(grid.patch_dim, 256);
    }

    #[test]
    fn single_patch_is_flattened_input() {
        let x = ramp(&[16, 16]);
        let grid = patchify(&x, PatchSpec::Audio { time: 16, freq: 16 }).unwrap();
        assert_eq!(grid.num_patches(), 1);
        assert_eq!(grid.patches.data(), x.data());
    }

    #[test]
    fn video_tubelet_grid() {
        let spec = PatchSpec::Video {
            temporal: 2,
            height: 16,
            width: 16,
            channels: 1,
        };
        let grid = patchify(&Tensor::zeros(&[16, 32, 32, 1]), spec).unwrap();
        assert_eq!(grid.grid_dims, vec![8, 2, 2]);
        assert_eq!(grid.num_patches(), 32);
        assert_eq!(grid.patch_dim, 512);
    }

    #[test]
    fn audio_patch_contents_follow_tile_layout() {
        // 4×4 input, 2×2 tiles: patch 1 is the top-right tile.
        let grid = patchify(&ramp(&[4, 4]), PatchSpec::Audio { time: 2, freq: 2 }).unwrap();
        assert_eq!(grid.patches.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(grid.patches.row(2), &[8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn non_divisible_axis_is_reported() {
        let err = patchify(&Tensor::zeros(&[30, 16]), PatchSpec::Audio { time: 16, freq: 16 }).unwrap_err();
        assert_eq!(
            err,
            PatchError::Geometry {
                axis: 0,
                len: 30,
                patch: 16
            }
        );
        assert!(err.to_string().contains("patch size 16"));
    }

    #[test]
    fn plan_cardinalities() {
        assert_eq!(MaskingPlan::random(512, 0.8, 0).unwrap().num_visible(), 102);
        assert_eq!(MaskingPlan::random(512, 0.8, 0).unwrap().num_masked(), 410);
        assert_eq!(MaskingPlan::random(10, 0.5, 0).unwrap().num_visible(), 5);
        assert_eq!(MaskingPlan::random(512, 0.9, 0).unwrap().num_visible(), 51);
    }

    #[test]
    fn degenerate_plans_are_rejected() {
        assert!(matches!(
            MaskingPlan::random(4, 0.9, 0),
            Err(PatchError::DegeneratePlan { visible: 0, .. })
        ));
        assert!(matches!(
            MaskingPlan::random(4, 0.05, 0),
            Err(PatchError::DegeneratePlan { visible: 4, .. })
        ));
        assert!(matches!(
            MaskingPlan::random(4, 1.0, 0),
            Err(PatchError::InvalidRatio { .. })
        ));
        assert!(matches!(
            MaskingPlan::random(0, 0.5, 0),
            Err(PatchError::DegeneratePlan { .. })
        ));
    }

    #[test]
    fn hand_restore() {
        let plan = MaskingPlan::from_visible(4, &[0, 2]).unwrap();
        let vis = Tensor::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
        let masked = Tensor::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(plan.restore_order(&vis, &masked).unwrap().data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn second_view_differs_with_same_size() {
        let a = MaskingPlan::random(512, 0.8, 1).unwrap();
        let b = MaskingPlan::random(512, 0.8, 2).unwrap();
        assert_eq!(a.num_visible(), b.num_visible());
        assert_ne!(a.visible, b.visible);
    }

    #[test]
    fn mismatched_grid_is_rejected() {
        let grid = patchify(&ramp(&[4, 4]), PatchSpec::Audio { time: 2, freq: 2 }).unwrap();
        let plan = MaskingPlan::random(8, 0.5, 0).unwrap();
        assert!(matches!(plan.gather_visible(&grid), Err(PatchError::PlanMismatch(_))));
    }
}
