//! Central finite-difference check of analytic gradients.

use super::Tensor;
use crate::error::Result;
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct CheckOptions {
    /// Stencil step; probes sit at ±step and ±2·step.
    pub step: f64,
    /// Coordinates sampled per tensor (all eligible ones if fewer exist).
    pub samples_per_tensor: usize,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples_per_tensor: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateCheck {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub checks: Vec<CoordinateCheck>,
    /// Coordinates skipped because their probes crossed a kink.
    pub rejected: usize,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().fold(0.0, |m, c| m.max(c.rel_error))
    }

    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    /// Indices of tensors that had at least one coordinate checked.
    pub fn covered_tensors(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.checks.iter().map(|c| c.tensor).collect();
        t.dedup();
        t
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Compares `analytic[i]` against central differences of `loss` around
/// `params`. Coordinates with `|x| <= 10 * step` are never sampled, which
/// keeps the probes away from the kink of ReLU-like functions at zero.
pub fn finite_diff_check<T, F>(
    mut loss: F,
    params: &[Tensor<T>],
    analytic: &[Tensor<T>],
    opts: &CheckOptions,
    rng: &mut Rng,
) -> Result<GradCheck>
where
    T: Scalar,
    F: FnMut(&[Tensor<T>]) -> Result<T>,
{
    finite_diff_check_piecewise(|w| Ok((loss(w)?, 0)), params, analytic, opts, rng)
}

/// Like [`finite_diff_check`] for a piecewise-smooth loss that also returns
/// the signature of the piece it was evaluated on. A coordinate whose two
/// probes land on a different piece than the centre straddles a kink, where
/// a central difference estimates nothing; it is counted in `rejected` and
/// replaced by another coordinate of the same tensor.
pub fn finite_diff_check_piecewise<T, F>(
    mut loss: F,
    params: &[Tensor<T>],
    analytic: &[Tensor<T>],
    opts: &CheckOptions,
    rng: &mut Rng,
) -> Result<GradCheck>
where
    T: Scalar,
    F: FnMut(&[Tensor<T>]) -> Result<(T, u64)>,
{
    assert_eq!(params.len(), analytic.len(), "one gradient per parameter");
    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut report = GradCheck::default();
    let (_, centre) = loss(&work)?;
    let h = opts.step;
    for (ti, p) in params.iter().enumerate() {
        let mut eligible: Vec<usize> = (0..p.len())
            .filter(|&i| p.data()[i].to_f64_lossy().abs() > 10.0 * h)
            .collect();
        rng.shuffle(&mut eligible);
        let mut taken = Vec::new();
        for idx in eligible {
            if taken.len() == opts.samples_per_tensor {
                break;
            }
            let x0 = p.data()[idx];
            let mut f = [0.0; 4];
            let mut same_piece = true;
            for (slot, offset) in [2.0, 1.0, -1.0, -2.0].into_iter().enumerate() {
                work[ti].data_mut()[idx] = T::from_f64_lossy(x0.to_f64_lossy() + offset * h);
                let (value, sig) = loss(&work)?;
                f[slot] = value.to_f64_lossy();
                same_piece &= sig == centre;
            }
            work[ti].data_mut()[idx] = x0;
            if !same_piece {
                report.rejected += 1;
                continue;
            }
            let numeric = (8.0 * (f[1] - f[2]) - (f[0] - f[3])) / (12.0 * h);
            let a = analytic[ti].data()[idx].to_f64_lossy();
            taken.push(CoordinateCheck {
                tensor: ti,
                index: idx,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric),
            });
        }
        taken.sort_by_key(|c| c.index);
        report.checks.extend(taken);
    }
    Ok(report)
}
