//! Central finite differences, used as the independent oracle for analytic
//! gradients in tests.

use super::matrix::Matrix;

/// Outcome of comparing one analytic gradient entry against finite differences.
#[derive(Debug, Clone, Copy)]
pub struct Discrepancy {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Discrepancy {
    /// Relative error, falling back to absolute error when both magnitudes are below 1.
    pub fn error(&self) -> f64 {
        let diff = (self.analytic - self.numeric).abs();
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale < 1.0 {
            diff
        } else {
            diff / scale
        }
    }
}

/// Central difference of `f` at `x` for the given flat indices.
pub fn numeric_gradient(
    f: &mut dyn FnMut(&Matrix) -> f64,
    x: &Matrix,
    indices: &[usize],
    step: f64,
) -> Vec<f64> {
    let mut probe = x.clone();
    indices
        .iter()
        .map(|&i| {
            let orig = probe.as_slice()[i];
            probe.as_mut_slice()[i] = orig + step;
            let up = f(&probe);
            probe.as_mut_slice()[i] = orig - step;
            let down = f(&probe);
            probe.as_mut_slice()[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Compares `analytic` against central differences on `indices` and returns
/// the worst entry.
pub fn worst_discrepancy(
    f: &mut dyn FnMut(&Matrix) -> f64,
    x: &Matrix,
    analytic: &Matrix,
    indices: &[usize],
    step: f64,
) -> Discrepancy {
    let numeric = numeric_gradient(f, x, indices, step);
    indices
        .iter()
        .zip(numeric)
        .map(|(&i, n)| Discrepancy {
            index: i,
            analytic: analytic.as_slice()[i],
            numeric: n,
        })
        .max_by(|a, b| a.error().total_cmp(&b.error()))
        .unwrap_or(Discrepancy {
            index: 0,
            analytic: 0.0,
            numeric: 0.0,
        })
}

/// Every index of a matrix with `len` entries when small, otherwise an evenly
/// strided sample of at most `max` of them.
pub fn sample_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let stride = len as f64 / max as f64;
    (0..max).map(|k| ((k as f64 + 0.5) * stride) as usize).collect()
}
