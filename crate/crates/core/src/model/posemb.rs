//! Fixed sinusoidal positional tables.

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionalKind {
    /// One sinusoid over the flattened grid index.
    Sinusoidal1dGrid,
    /// Sum of a temporal table and a 2-D spatial table.
    SeparableSpatiotemporal,
}

const BASE: f64 = 10_000.0;

fn sinusoid(pos: f64, dim: usize, swap: bool) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let freq = BASE.powf(-((j / 2 * 2) as f64) / dim as f64);
            let even = j % 2 == 0;
            if even != swap {
                (pos * freq).sin()
            } else {
                (pos * freq).cos()
            }
        })
        .collect()
}

/// `[num_positions × dim]` table for a patch grid.
///
/// `grid` is `[time, freq]` for audio or `[t, h, w]` for video.
pub fn table(kind: PositionalKind, grid: &[usize], dim: usize) -> Tensor {
    let n: usize = grid.iter().product();
    let mut data = Vec::with_capacity(n * dim);
    match kind {
        PositionalKind::Sinusoidal1dGrid => {
            for p in 0..n {
                data.extend(sinusoid(p as f64, dim, false));
            }
        }
        PositionalKind::SeparableSpatiotemporal => {
            let (h, w) = (grid[1], grid[2]);
            let half = dim / 2;
            for p in 0..n {
                let (t, s) = (p / (h * w), p % (h * w));
                let temporal = sinusoid(t as f64, dim, true);
                let mut spatial = sinusoid((s / w) as f64, half, false);
                spatial.extend(sinusoid((s % w) as f64, dim - half, false));
                data.extend(temporal.iter().zip(&spatial).map(|(a, b)| a + b));
            }
        }
    }
    Tensor::new(vec![n, dim], data).expect("positive grid and dim")
}
