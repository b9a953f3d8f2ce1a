//! Central finite-difference oracle for checking tape gradients.
//!
//! The oracle only evaluates the forward function, so it is independent of
//! the backward rules it is used to check.

use crate::tensor::Tensor;

/// Result of comparing one analytic gradient entry with its numeric estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntryCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl EntryCheck {
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn rel_error(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

/// Default absolute floor below which gradient entries are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// Central difference `(f(x + h e_i) - f(x - h e_i)) / 2h` for one entry.
pub fn central_difference<F>(f: &mut F, inputs: &mut [Tensor], input: usize, index: usize, h: f64) -> f64
where
    F: FnMut(&[Tensor]) -> f64,
{
    let orig = inputs[input].data()[index];
    inputs[input].data_mut()[index] = orig + h;
    let plus = f(inputs);
    inputs[input].data_mut()[index] = orig - h;
    let minus = f(inputs);
    inputs[input].data_mut()[index] = orig;
    (plus - minus) / (2.0 * h)
}

/// Compares `analytic[k]` against central differences of `f` for every entry
/// of every input.
pub fn check_all<F>(f: F, inputs: &mut [Tensor], analytic: &[Tensor], h: f64) -> Vec<EntryCheck>
where
    F: FnMut(&[Tensor]) -> f64,
{
    let entries: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    check_entries(f, inputs, analytic, h, &entries)
}

/// Like [`check_all`] but only for the listed `(input, index)` pairs.
pub fn check_entries<F>(
    mut f: F,
    inputs: &mut [Tensor],
    analytic: &[Tensor],
    h: f64,
    entries: &[(usize, usize)],
) -> Vec<EntryCheck>
where
    F: FnMut(&[Tensor]) -> f64,
{
    entries
        .iter()
        .map(|&(input, index)| EntryCheck {
            input,
            index,
            analytic: analytic[input].data()[index],
            numeric: central_difference(&mut f, inputs, input, index, h),
        })
        .collect()
}

pub fn worst(checks: &[EntryCheck], floor: f64) -> Option<EntryCheck> {
    checks
        .iter()
        .copied()
        .max_by(|a, b| a.rel_error(floor).total_cmp(&b.rel_error(floor)))
}
