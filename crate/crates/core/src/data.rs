//! Correlated synthetic audio/video pairs driven by a shared latent.
//!
//! The spectrogram is a sum of Gabor atoms whose centers and modulation come
//! from the latent; the clip shows a Gaussian blob orbiting the frame center
//! with a phase and speed from the same latent. `z[0]` sets both the atom
//! frequencies and the blob speed, so it is the component a probe should find.

use std::cell::Cell;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::losses::Sample;
use crate::patch::{patchify, DataShapes, PatchError};
use crate::rng;
use crate::tensor::Tensor;

pub const LATENT_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub atoms: usize,
    pub noise_std: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            atoms: 2,
            noise_std: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentSpec {
    pub seed: u64,
    /// Each component lies in `[-1, 1]`.
    pub z: [f64; LATENT_DIM],
}

impl LatentSpec {
    pub fn from_seed(seed: u64) -> Self {
        let mut r = rng::rng(rng::derive(seed, &[0]));
        Self {
            seed,
            z: std::array::from_fn(|_| r.gen_range(-1.0..=1.0)),
        }
    }
}

/// One Gabor atom on a `[time × freq]` grid, in grid units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Atom {
    pub time: f64,
    pub freq: f64,
    pub time_width: f64,
    pub freq_width: f64,
    /// Radians per time bin.
    pub modulation: f64,
}

impl Atom {
    fn value(&self, t: f64, f: f64) -> f64 {
        let (dt, df) = (t - self.time, f - self.freq);
        let envelope = (-0.5
            * (dt * dt / (self.time_width * self.time_width) + df * df / (self.freq_width * self.freq_width)))
            .exp();
        envelope * (self.modulation * dt).cos()
    }
}

fn unit(x: f64) -> f64 {
    (x + 1.0) / 2.0
}

pub fn atoms(spec: &LatentSpec, time: usize, freq: usize, count: usize) -> Vec<Atom> {
    let z = spec.z;
    let (t, f) = (time as f64, freq as f64);
    (0..count)
        .map(|k| {
            let shift = k as f64 / count as f64;
            Atom {
                time: t * (0.15 + 0.7 * (unit(z[1]) + shift).fract()),
                freq: f * (0.15 + 0.7 * (unit(z[0]) * 0.5 + shift).fract()),
                time_width: (t / 5.0).max(0.5),
                freq_width: (f / 6.0).max(0.5),
                modulation: PI * (0.05 + 0.2 * unit(z[2])),
            }
        })
        .collect()
}

/// Subtracts the mean and divides by the population standard deviation.
pub fn standardize(x: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter_mut().for_each(|v| *v -= mean);
    let var = x.iter().map(|v| v * v).sum::<f64>() / n;
    if var > 0.0 {
        let inv = 1.0 / var.sqrt();
        x.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Spectrogram `[time × freq]`, standardized.
pub fn generate_audio(spec: &LatentSpec, shape: [usize; 2], cfg: &SyntheticConfig) -> Tensor {
    let [time, freq] = shape;
    let atoms = atoms(spec, time, freq, cfg.atoms);
    let mut noise = rng::rng(rng::derive(spec.seed, &[1]));
    let mut data = Vec::with_capacity(time * freq);
    for t in 0..time {
        for f in 0..freq {
            let clean: f64 = atoms.iter().map(|a| a.value(t as f64, f as f64)).sum();
            let eps: f64 = noise.sample(StandardNormal);
            data.push(clean + cfg.noise_std * eps);
        }
    }
    standardize(&mut data);
    Tensor::new(vec![time, freq], data).expect("positive shape")
}

/// Blob center `(row, col)` in frame `frame`.
pub fn blob_center(spec: &LatentSpec, frame: usize, height: usize, width: usize) -> (f64, f64) {
    let z = spec.z;
    let phase = PI * z[1];
    let speed = 0.2 + 0.6 * unit(z[0]);
    let angle = phase + speed * frame as f64;
    let radius = 0.1 + 0.2 * unit(z[3]);
    (
        height as f64 * (0.5 + radius * angle.sin()) - 0.5,
        width as f64 * (0.5 + radius * angle.cos()) - 0.5,
    )
}

/// Clip `[frames × height × width × channels]`, standardized. Every channel
/// carries the same blob.
pub fn generate_video(spec: &LatentSpec, shape: [usize; 4]) -> Tensor {
    let [frames, height, width, channels] = shape;
    let sigma = (height.min(width) as f64 / 4.0).max(0.5);
    let mut data = Vec::with_capacity(frames * height * width * channels);
    for fr in 0..frames {
        let (cy, cx) = blob_center(spec, fr, height, width);
        for y in 0..height {
            for x in 0..width {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                data.extend(std::iter::repeat_n(v, channels));
            }
        }
    }
    standardize(&mut data);
    Tensor::new(vec![frames, height, width, channels], data).expect("positive shape")
}

pub fn generate_pair(
    spec: &LatentSpec,
    shapes: &DataShapes,
    cfg: &SyntheticConfig,
) -> Result<(Tensor, Tensor), PatchError> {
    shapes.validate()?;
    Ok((
        generate_audio(spec, shapes.audio, cfg),
        generate_video(spec, shapes.video),
    ))
}

/// Indexed stream of patchified instances. Video is only synthesized when
/// requested, and every synthesis is counted.
#[derive(Debug)]
pub struct SyntheticDataset {
    pub shapes: DataShapes,
    pub config: SyntheticConfig,
    pub seed: u64,
    pub with_video: bool,
    video_built: Cell<usize>,
}

impl SyntheticDataset {
    pub fn new(shapes: DataShapes, config: SyntheticConfig, seed: u64, with_video: bool) -> Result<Self, PatchError> {
        shapes.validate()?;
        Ok(Self {
            shapes,
            config,
            seed,
            with_video,
            video_built: Cell::new(0),
        })
    }

    pub fn latent(&self, index: u64) -> LatentSpec {
        LatentSpec::from_seed(rng::derive(self.seed, &[index]))
    }

    pub fn sample(&self, index: u64) -> Result<Sample, PatchError> {
        let latent = self.latent(index);
        let audio = generate_audio(&latent, self.shapes.audio, &self.config);
        let audio = patchify(&audio, self.shapes.audio_spec())?.patches;
        let video = if self.with_video {
            self.video_built.set(self.video_built.get() + 1);
            let v = generate_video(&latent, self.shapes.video);
            Some(patchify(&v, self.shapes.video_spec())?.patches)
        } else {
            None
        };
        Ok(Sample { audio, video })
    }

    /// Number of video clips synthesized so far.
    pub fn video_constructions(&self) -> usize {
        self.video_built.get()
    }
}

#[derive(Debug, Serialize)]
struct DumpHeader<'a> {
    index: u64,
    seed: u64,
    z: [f64; LATENT_DIM],
    audio_shape: &'a [usize],
    video_shape: &'a [usize],
    dtype: &'static str,
    layout: &'static str,
}

/// Writes pair `i` as `pair_{i}.bin` (audio then video, little-endian f64)
/// with a `pair_{i}.json` sidecar.
pub fn dump_pairs(
    dir: &Path,
    shapes: &DataShapes,
    cfg: &SyntheticConfig,
    seed: u64,
    count: u64,
) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for i in 0..count {
        let latent = LatentSpec::from_seed(rng::derive(seed, &[i]));
        let audio = generate_audio(&latent, shapes.audio, cfg);
        let video = generate_video(&latent, shapes.video);
        let mut bin = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("pair_{i}.bin")))?);
        for v in audio.data().iter().chain(video.data()) {
            bin.write_all(&v.to_le_bytes())?;
        }
        bin.flush()?;
        let header = DumpHeader {
            index: i,
            seed: latent.seed,
            z: latent.z,
            audio_shape: audio.shape(),
            video_shape: video.shape(),
            dtype: "f64le",
            layout: "audio then video, row-major",
        };
        std::fs::write(
            dir.join(format!("pair_{i}.json")),
            serde_json::to_string_pretty(&header)?,
        )?;
    }
    Ok(())
}
