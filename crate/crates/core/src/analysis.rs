//! Probability-map and mask analyses: 10×10 mean-filter smoothing,
//! normalization to a 2-D distribution, marginal standard deviations via
//! moments, per-repetition sampling rates, accumulated masks, and the
//! acceleration/budget relation.

use crate::error::{CoreError, Result};
use crate::sampling::{AcsRegion, BudgetSpec};
use crate::scalar::Scalar;
use crate::tensor::RealTensor;

/// Centers of mass and marginal standard deviations of a 2-D distribution,
/// in grid points of the analyzed map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MomentSummary {
    pub e_u: f64,
    pub e_v: f64,
    pub sigma_u: f64,
    pub sigma_v: f64,
}

/// 10×10 uniform mean filter, zero-padded at the borders. The even kernel is
/// anchored with offsets −5..=+4 on both axes (documented so oracles match).
pub fn smooth_map<T: Scalar>(map: &RealTensor<T>) -> RealTensor<T> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut out = RealTensor::zeros(&[h, w]);
    let inv = T::of(0.01);
    for i in 0..h {
        for j in 0..w {
            let mut acc = T::zero();
            for di in -5i64..=4 {
                let r = i as i64 + di;
                if r < 0 || r >= h as i64 {
                    continue;
                }
                for dj in -5i64..=4 {
                    let c = j as i64 + dj;
                    if c < 0 || c >= w as i64 {
                        continue;
                    }
                    acc += map.at(r as usize, c as usize);
                }
            }
            out.set(i, j, acc * inv);
        }
    }
    out
}

/// Normalizes a nonnegative map by its total sum: Σπ = 1.
pub fn normalize_distribution<T: Scalar>(map: &RealTensor<T>) -> Result<RealTensor<T>> {
    let total = map.sum();
    if total == T::zero() {
        return Err(CoreError::DegenerateProbabilityField);
    }
    let inv = T::one() / total;
    Ok(map.map(|v| v * inv))
}

/// First and second moments of a normalized 2-D distribution: u is the row
/// axis, v the column axis.
pub fn marginal_std<T: Scalar>(pi: &RealTensor<T>) -> MomentSummary {
    let (h, w) = (pi.shape()[0], pi.shape()[1]);
    let mut e_u = 0.0;
    let mut e_v = 0.0;
    let mut e_u2 = 0.0;
    let mut e_v2 = 0.0;
    for u in 0..h {
        for v in 0..w {
            let p = pi.at(u, v).to_f64_lossy();
            let (uf, vf) = (u as f64, v as f64);
            e_u += uf * p;
            e_v += vf * p;
            e_u2 += uf * uf * p;
            e_v2 += vf * vf * p;
        }
    }
    MomentSummary {
        e_u,
        e_v,
        sigma_u: (e_u2 - e_u * e_u).max(0.0).sqrt(),
        sigma_v: (e_v2 - e_v * e_v).max(0.0).sqrt(),
    }
}

/// Free-location sampling rate per repetition, relative to one fully sampled
/// acquisition: forced ACS acquisitions are excluded from the count.
/// `forced_acs[n]` marks repetitions whose ACS rectangle was forced on.
pub fn per_nex_rates<T: Scalar>(
    masks: &[RealTensor<T>],
    acs: AcsRegion,
    forced_acs: &[bool],
) -> Vec<f64> {
    masks
        .iter()
        .enumerate()
        .map(|(n, m)| {
            let d = m.len() as f64;
            let ones = m.sum().to_f64_lossy();
            let forced = if forced_acs.get(n).copied().unwrap_or(false) {
                acs.count() as f64
            } else {
                0.0
            };
            ((ones - forced).max(0.0)) / d
        })
        .collect()
}

/// Total number of times each k-space location is acquired across the scan.
pub fn accumulate<T: Scalar>(masks: &[RealTensor<T>]) -> RealTensor<T> {
    let mut out = RealTensor::zeros(masks[0].shape());
    for m in masks {
        for (o, &v) in out.data_mut().iter_mut().zip(m.data()) {
            *o += v;
        }
    }
    out
}

/// Overall acceleration R = NEX·D / (B + N_ACS).
pub fn acceleration(spec: &BudgetSpec) -> f64 {
    spec.acceleration()
}
