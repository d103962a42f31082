//! Central-difference validation of analytic gradients.

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport<T> {
    /// max over checked coordinates of |analytic − central| / max(1, |central|)
    pub max_rel_err: T,
    /// coordinate attaining the maximum
    pub worst_coord: usize,
}

/// Checks `analytic` against central differences of `f` at `x`, over every
/// coordinate. Stochastic nodes inside `f` must be frozen by the caller.
pub fn grad_check<T: Scalar>(
    f: impl FnMut(&[T]) -> T,
    x: &[T],
    analytic: &[T],
    h: T,
) -> Result<GradCheckReport<T>> {
    let all: Vec<usize> = (0..x.len()).collect();
    grad_check_subset(f, x, analytic, &all, h)
}

/// Same as [`grad_check`] but probes only the listed coordinates.
pub fn grad_check_subset<T: Scalar>(
    mut f: impl FnMut(&[T]) -> T,
    x: &[T],
    analytic: &[T],
    coords: &[usize],
    h: T,
) -> Result<GradCheckReport<T>> {
    assert_eq!(x.len(), analytic.len());
    let mut probe = x.to_vec();
    let mut worst = T::zero();
    let mut worst_coord = 0;
    let two = T::one() + T::one();
    for &i in coords {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(CoreError::NonFiniteProbe { coord: i });
        }
        let central = (fp - fm) / (two * h);
        let rel = (analytic[i] - central).abs() / T::one().max(central.abs());
        if rel > worst {
            worst = rel;
            worst_coord = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: worst,
        worst_coord,
    })
}
