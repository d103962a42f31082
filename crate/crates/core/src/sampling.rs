//! Multi-NEX sampling: learned logits → probabilities → budget-rescaled
//! weights → Gumbel-Softmax draws → straight-through binary masks with the
//! ACS rectangle forced in repetition 1, plus the fixed variable-density
//! Poisson-disc baselines and the six benchmark mask plans.
//!
//! The logit field is flattened repetition-major: repetition 1 contributes
//! its non-ACS grid positions in row-major order first, then each later
//! repetition contributes its full row-major grid. Per-repetition reporting
//! is therefore a contiguous slice of the field.

use std::sync::Arc;

use rand::seq::SliceRandom;

use crate::error::{CoreError, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tape::{BufId, Tape};
use crate::tensor::RealTensor;

/// Clamp constant for the two-class logs and the rescale denominator.
pub const EPS: f64 = 1e-6;

/// Fully sampled rectangle centered in k-space, acquired in repetition 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AcsRegion {
    pub height: usize,
    pub width: usize,
}

impl AcsRegion {
    pub fn count(&self) -> usize {
        self.height * self.width
    }

    /// Top-left corner on an H×W grid (centered, floor on odd differences).
    pub fn origin(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - self.height) / 2, (w - self.width) / 2)
    }

    pub fn contains(&self, h: usize, w: usize, row: usize, col: usize) -> bool {
        let (r0, c0) = self.origin(h, w);
        row >= r0 && row < r0 + self.height && col >= c0 && col < c0 + self.width
    }

    /// Row-major flat indices of the ACS rectangle.
    pub fn flat_indices(&self, h: usize, w: usize) -> Vec<usize> {
        let (r0, c0) = self.origin(h, w);
        let mut out = Vec::with_capacity(self.count());
        for r in r0..r0 + self.height {
            for c in c0..c0 + self.width {
                out.push(r * w + c);
            }
        }
        out
    }
}

/// Row-major flat indices outside the ACS rectangle.
pub fn non_acs_indices(h: usize, w: usize, acs: AcsRegion) -> Vec<usize> {
    let mut out = Vec::with_capacity(h * w - acs.count());
    for r in 0..h {
        for c in 0..w {
            if !acs.contains(h, w, r, c) {
                out.push(r * w + c);
            }
        }
    }
    out
}

/// Budget bookkeeping for a sampling plan.
#[derive(Clone, Copy, Debug)]
pub struct BudgetSpec {
    pub h: usize,
    pub w: usize,
    pub nex: usize,
    pub acs: AcsRegion,
    /// Optimizable sample count B over the learnable field.
    pub budget: f64,
}

impl BudgetSpec {
    pub fn d(&self) -> usize {
        self.h * self.w
    }

    /// Candidate locations over the NEX×D grid, excluding the rep-1 ACS.
    pub fn n_optim(&self) -> usize {
        self.nex * self.d() - self.acs.count()
    }

    /// Overall acceleration R = NEX·D / (B + N_ACS).
    pub fn acceleration(&self) -> f64 {
        (self.nex * self.d()) as f64 / (self.budget + self.acs.count() as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.acs.height > self.h || self.acs.width > self.w {
            return Err(CoreError::Budget(format!(
                "ACS {}x{} exceeds grid {}x{}",
                self.acs.height, self.acs.width, self.h, self.w
            )));
        }
        if self.n_optim() == 0 {
            return Err(CoreError::Budget(
                "N_optim = NEX*D - N_ACS must be positive".into(),
            ));
        }
        if self.budget <= 0.0 {
            return Err(CoreError::Budget(format!(
                "budget B = {} must be positive",
                self.budget
            )));
        }
        if self.budget > self.n_optim() as f64 {
            return Err(CoreError::Budget(format!(
                "budget B = {} exceeds N_optim = {}",
                self.budget,
                self.n_optim()
            )));
        }
        Ok(())
    }
}

// ── learned-field forward ops ───────────────────────────────────────

/// p = σ(ψ) elementwise.
pub fn logits_to_probs<T: Scalar>(tape: &mut Tape<T>, psi: BufId) -> BufId {
    tape.sigmoid(psi)
}

/// q = p·B/(Σp + ε). Errors on an all-zero probability field.
pub fn rescale_to_budget<T: Scalar>(
    tape: &mut Tape<T>,
    p: BufId,
    budget: T,
    eps: T,
) -> Result<BufId> {
    let s = tape.sum(p);
    if tape.scalar_value(s) == T::zero() {
        return Err(CoreError::DegenerateProbabilityField);
    }
    let denom = tape.affine(s, T::one(), eps);
    let b = tape.scalar(budget);
    let ratio = tape.div(b, denom);
    Ok(tape.mul_scalar(p, ratio))
}

/// Gumbel noise pair (η, η′) for a field of the given length; pure function
/// of (seed, counter) so draws replay exactly.
pub fn gumbel_noise<T: Scalar>(len: usize, seed: u64, counter: u64) -> (Vec<T>, Vec<T>) {
    let mut r = rng::stream(seed, counter.wrapping_mul(2).wrapping_add(0x515)) ;
    let eta = (0..len).map(|_| rng::gumbel(&mut r)).collect();
    let eta_p = (0..len).map(|_| rng::gumbel(&mut r)).collect();
    (eta, eta_p)
}

/// Temperature and noise for one stochastic mask draw.
#[derive(Clone, Debug)]
pub struct SampleDraw<T> {
    pub tau: T,
    pub eps: T,
    pub eta: Vec<T>,
    pub eta_prime: Vec<T>,
}

impl<T: Scalar> SampleDraw<T> {
    pub fn new(tau: T, len: usize, seed: u64, counter: u64) -> Self {
        let (eta, eta_prime) = gumbel_noise(len, seed, counter);
        SampleDraw {
            tau,
            eps: T::of(EPS),
            eta,
            eta_prime,
        }
    }

    /// Draw with η = η′ = 0 (noise-free relaxation), used by tests.
    pub fn frozen_zero(tau: T, len: usize) -> Self {
        SampleDraw {
            tau,
            eps: T::of(EPS),
            eta: vec![T::zero(); len],
            eta_prime: vec![T::zero(); len],
        }
    }
}

/// Gumbel-Softmax relaxation z of the two-class draw at weights q, plus the
/// hard straight-through sample m = 1[z > 0.5]. Gradients flow through z.
pub fn gumbel_binary_sample<T: Scalar>(
    tape: &mut Tape<T>,
    q: BufId,
    draw: &SampleDraw<T>,
) -> (BufId, BufId) {
    let n = tape.value(q).len();
    assert_eq!(draw.eta.len(), n);
    let log_q = tape.log_clamped(q, draw.eps);
    let one_minus_q = tape.affine(q, -T::one(), T::one());
    let log_1mq = tape.log_clamped(one_minus_q, draw.eps);
    let diff = tape.sub(log_q, log_1mq);
    let noise: Vec<T> = draw
        .eta
        .iter()
        .zip(&draw.eta_prime)
        .map(|(&a, &b)| a - b)
        .collect();
    let noise_buf = tape.alloc(noise, &[n]);
    let shifted = tape.add(diff, noise_buf);
    let scaled = tape.affine(shifted, draw.tau.recip(), T::zero());
    let z = tape.sigmoid(scaled);
    let m = tape.hard_step(z, T::of(0.5));
    (z, m)
}

// ── mask plans ──────────────────────────────────────────────────────

/// The six benchmarked sampling methods.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Vd1,
    MultiNexVd,
    Loupe1,
    LoupeExt2,
    LoupeExt3,
    NexOp,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Vd1,
        Method::MultiNexVd,
        Method::Loupe1,
        Method::LoupeExt2,
        Method::LoupeExt3,
        Method::NexOp,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Vd1 => "vd1",
            Method::MultiNexVd => "multinex-vd",
            Method::Loupe1 => "loupe1",
            Method::LoupeExt2 => "loupe-ext2",
            Method::LoupeExt3 => "loupe-ext3",
            Method::NexOp => "nexop",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.iter().copied().find(|m| m.name() == s)
    }

    /// Whether the sampling pattern itself is learned.
    pub fn learned(&self) -> bool {
        !matches!(self, Method::Vd1 | Method::MultiNexVd)
    }
}

/// How one repetition's grid mask is produced from the learned field.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RepLayout {
    /// Field slice scattered onto non-ACS grid positions; ACS forced to 1.
    ScatterWithAcs { offset: usize },
    /// Field slice reshaped onto the full grid (no forced ACS).
    Full { offset: usize },
    /// Fixed pre-drawn mask.
    Fixed,
    /// Repetition not acquired.
    Absent,
}

/// Per-repetition budget allocation and trainability for one method at a
/// given overall acceleration.
#[derive(Clone, Debug)]
pub struct MaskPlan<T> {
    pub method: Method,
    pub h: usize,
    pub w: usize,
    pub nex: usize,
    pub acs: AcsRegion,
    pub r: f64,
    /// round(NEX·D/R): total acquisition target including ACS repetitions.
    pub total_budget: usize,
    /// Σq target over the learned field (0 for fixed methods).
    pub field_budget: f64,
    /// Learned logit count (0 for fixed methods).
    pub field_len: usize,
    /// Per-repetition layouts.
    pub layouts: Vec<RepLayout>,
    /// Pre-drawn masks for fixed methods (rep-1 mask includes the ACS).
    pub fixed_masks: Vec<RealTensor<T>>,
    /// Per-repetition planned sample counts (deterministic for fixed plans,
    /// expected for learned ones), including forced ACS where applicable.
    pub per_rep_targets: Vec<f64>,
}

impl<T: Scalar> MaskPlan<T> {
    pub fn d(&self) -> usize {
        self.h * self.w
    }

    /// Plan-level total acquired locations (for the equal-budget audit).
    pub fn planned_total(&self) -> f64 {
        self.per_rep_targets.iter().sum()
    }

    pub fn learned(&self) -> bool {
        self.method.learned()
    }

    /// Repetitions whose ACS rectangle is forced on (excluded from free-rate
    /// counts). Fixed plans force it in repetition 1 only.
    pub fn forced_acs_reps(&self) -> Vec<bool> {
        self.layouts
            .iter()
            .enumerate()
            .map(|(rep, layout)| match layout {
                RepLayout::ScatterWithAcs { .. } => true,
                RepLayout::Fixed => rep == 0,
                _ => false,
            })
            .collect()
    }

    /// Initial logits: uniform probability matching the field budget.
    pub fn init_logits(&self) -> RealTensor<T> {
        if self.field_len == 0 {
            return RealTensor::zeros(&[0]);
        }
        let p = (self.field_budget / self.field_len as f64).clamp(1e-4, 1.0 - 1e-4);
        let logit = T::of((p / (1.0 - p)).ln());
        RealTensor::filled(&[self.field_len], logit)
    }

    pub fn budget_spec(&self) -> BudgetSpec {
        BudgetSpec {
            h: self.h,
            w: self.w,
            nex: self.nex,
            acs: self.acs,
            budget: if self.learned() {
                self.field_budget
            } else {
                self.total_budget as f64 - self.acs.count() as f64
            },
        }
    }
}

/// Builds the per-repetition budget allocation for one method (Benchmarking
/// items 1–5 plus the learned multi-NEX plan). Fixed VD masks are drawn here,
/// deterministically from `seed`.
pub fn baseline_mask_plan<T: Scalar>(
    method: Method,
    r: f64,
    h: usize,
    w: usize,
    nex: usize,
    acs: AcsRegion,
    seed: u64,
) -> Result<MaskPlan<T>> {
    if r < 1.0 {
        return Err(CoreError::Budget(format!(
            "acceleration R = {r} must be at least 1"
        )));
    }
    let d = h * w;
    let n_acs = acs.count();
    let total = ((nex * d) as f64 / r).round() as usize;
    if total < n_acs {
        return Err(CoreError::Budget(format!(
            "total budget {total} is smaller than N_ACS = {n_acs}"
        )));
    }
    let free_cap = d - n_acs;

    let check_rep_budget = |b: usize, label: &str| -> Result<usize> {
        if b == 0 {
            return Err(CoreError::Budget(format!(
                "{label}: per-repetition budget is zero at R = {r}"
            )));
        }
        if b > free_cap {
            return Err(CoreError::Budget(format!(
                "{label}: per-repetition budget {b} exceeds the {free_cap} free locations of one repetition"
            )));
        }
        Ok(b)
    };

    let mut fixed_masks = Vec::new();
    let (field_len, field_budget, layouts, per_rep_targets): (usize, f64, Vec<RepLayout>, Vec<f64>) =
        match method {
            Method::NexOp => {
                let b = total - n_acs;
                let field_len = nex * d - n_acs;
                if b == 0 || b > field_len {
                    return Err(CoreError::Budget(format!(
                        "nexop: budget B = {b} outside (0, N_optim = {field_len}]"
                    )));
                }
                let mut layouts = vec![RepLayout::ScatterWithAcs { offset: 0 }];
                for rep in 1..nex {
                    layouts.push(RepLayout::Full {
                        offset: (d - n_acs) + (rep - 1) * d,
                    });
                }
                // Expected per-rep counts under the uniform init; reported
                // counts are recomputed from actual q at runtime.
                let uniform = b as f64 / field_len as f64;
                let mut targets = vec![n_acs as f64 + uniform * (d - n_acs) as f64];
                for _ in 1..nex {
                    targets.push(uniform * d as f64);
                }
                (field_len, b as f64, layouts, targets)
            }
            Method::Loupe1 => {
                let b = check_rep_budget(total - n_acs, "loupe1")?;
                let mut layouts = vec![RepLayout::ScatterWithAcs { offset: 0 }];
                layouts.extend(std::iter::repeat_n(RepLayout::Absent, nex - 1));
                let mut targets = vec![total as f64];
                targets.extend(std::iter::repeat_n(0.0, nex - 1));
                (d - n_acs, b as f64, layouts, targets)
            }
            Method::LoupeExt2 | Method::LoupeExt3 => {
                let reps = if method == Method::LoupeExt2 { 2 } else { 3 };
                let reps = reps.min(nex);
                // Repeated mask re-acquires the ACS every repetition:
                // R = NEX·D / (b + reps·N_ACS) per shared-mask acquisition.
                let per_acq = total / reps;
                if per_acq < n_acs {
                    return Err(CoreError::Budget(format!(
                        "{}: per-acquisition budget {per_acq} is smaller than N_ACS = {n_acs}",
                        method.name()
                    )));
                }
                let b = check_rep_budget(per_acq - n_acs, method.name())?;
                let mut layouts = Vec::new();
                let mut targets = Vec::new();
                for rep in 0..nex {
                    if rep < reps {
                        layouts.push(RepLayout::ScatterWithAcs { offset: 0 });
                        targets.push((b + n_acs) as f64);
                    } else {
                        layouts.push(RepLayout::Absent);
                        targets.push(0.0);
                    }
                }
                (d - n_acs, b as f64, layouts, targets)
            }
            Method::Vd1 => {
                let b = check_rep_budget(total - n_acs, "vd1")?;
                let mask = vd_mask_with_acs::<T>(h, w, acs, b, rng_salt(seed, 0))?;
                fixed_masks.push(mask);
                for _ in 1..nex {
                    fixed_masks.push(RealTensor::zeros(&[h, w]));
                }
                let mut layouts = vec![RepLayout::Fixed];
                layouts.extend(std::iter::repeat_n(RepLayout::Absent, nex - 1));
                let mut targets = vec![total as f64];
                targets.extend(std::iter::repeat_n(0.0, nex - 1));
                (0, 0.0, layouts, targets)
            }
            Method::MultiNexVd => {
                let free = total - n_acs;
                let base = free / nex;
                let remainder = free - base * nex;
                let mut layouts = Vec::new();
                let mut targets = Vec::new();
                for rep in 0..nex {
                    let b = check_rep_budget(
                        base + if rep == 0 { remainder } else { 0 },
                        "multinex-vd",
                    )?;
                    let mask = if rep == 0 {
                        vd_mask_with_acs::<T>(h, w, acs, b, rng_salt(seed, rep as u64))?
                    } else {
                        vd_poisson_mask::<T>(h, w, b, rng_salt(seed, rep as u64))?
                    };
                    targets.push(if rep == 0 { (b + n_acs) as f64 } else { b as f64 });
                    fixed_masks.push(mask);
                    layouts.push(RepLayout::Fixed);
                }
                (0, 0.0, layouts, targets)
            }
        };

    let plan = MaskPlan {
        method,
        h,
        w,
        nex,
        acs,
        r,
        total_budget: total,
        field_budget,
        field_len,
        layouts,
        fixed_masks,
        per_rep_targets,
    };
    plan.budget_spec().validate()?;
    Ok(plan)
}

fn rng_salt(seed: u64, rep: u64) -> u64 {
    seed.wrapping_add(rep.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Variable-density mask on the non-ACS locations, with the ACS forced on.
fn vd_mask_with_acs<T: Scalar>(
    h: usize,
    w: usize,
    acs: AcsRegion,
    free_target: usize,
    seed: u64,
) -> Result<RealTensor<T>> {
    let mut mask = vd_poisson_mask_excluding::<T>(h, w, free_target, seed, Some(acs))?;
    for idx in acs.flat_indices(h, w) {
        mask.data_mut()[idx] = T::one();
    }
    Ok(mask)
}

/// Variable-density Poisson-disc binary mask with exact cardinality.
///
/// Minimum spacing grows with distance from the k-space center:
/// r(d) = r₀·(1 + γ·d/d_max), with γ found by bisection to hit the target,
/// then an exact trim/pad ordered by center distance. Deterministic per seed.
pub fn vd_poisson_mask<T: Scalar>(
    h: usize,
    w: usize,
    target_count: usize,
    seed: u64,
) -> Result<RealTensor<T>> {
    vd_poisson_mask_excluding(h, w, target_count, seed, None)
}

fn vd_poisson_mask_excluding<T: Scalar>(
    h: usize,
    w: usize,
    target_count: usize,
    seed: u64,
    exclude: Option<AcsRegion>,
) -> Result<RealTensor<T>> {
    let candidates: Vec<usize> = match exclude {
        Some(acs) => non_acs_indices(h, w, acs),
        None => (0..h * w).collect(),
    };
    let available = candidates.len();
    if target_count == 0 || target_count > available {
        return Err(CoreError::InfeasibleTarget {
            target: target_count,
            available,
        });
    }
    if target_count == available {
        let mut mask = RealTensor::zeros(&[h, w]);
        for &idx in &candidates {
            mask.data_mut()[idx] = T::one();
        }
        return Ok(mask);
    }

    let mut order = candidates.clone();
    let mut rng = rng::stream(seed, 0x9d15);
    order.shuffle(&mut rng);

    let center = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let d_max = (center.0 * center.0 + center.1 * center.1).sqrt().max(1.0);
    let dist = |idx: usize| -> f64 {
        let (r, c) = (idx / w, idx % w);
        let dr = r as f64 - center.0;
        let dc = c as f64 - center.1;
        (dr * dr + dc * dc).sqrt()
    };

    const R0: f64 = 0.9;
    let throw = |gamma: f64| -> Vec<usize> {
        let mut occupied = vec![false; h * w];
        let mut accepted = Vec::new();
        for &idx in &order {
            let (r, c) = (idx / w, idx % w);
            let rad = R0 * (1.0 + gamma * dist(idx) / d_max);
            let rad2 = rad * rad;
            let span = rad.ceil() as isize;
            let mut free = true;
            'scan: for dr in -span..=span {
                let rr = r as isize + dr;
                if rr < 0 || rr >= h as isize {
                    continue;
                }
                for dc in -span..=span {
                    let cc = c as isize + dc;
                    if cc < 0 || cc >= w as isize {
                        continue;
                    }
                    if occupied[rr as usize * w + cc as usize] {
                        let dd = (dr * dr + dc * dc) as f64;
                        if dd < rad2 {
                            free = false;
                            break 'scan;
                        }
                    }
                }
            }
            if free {
                occupied[idx] = true;
                accepted.push(idx);
            }
        }
        accepted
    };

    // Bisection on the density slope γ: larger γ → sparser periphery.
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    while throw(hi).len() > target_count && hi < 4096.0 {
        hi *= 2.0;
    }
    let mut best = throw(lo);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let acc = throw(mid);
        if (acc.len() as isize - target_count as isize).unsigned_abs()
            < (best.len() as isize - target_count as isize).unsigned_abs()
        {
            best = acc.clone();
        }
        if acc.len() > target_count {
            lo = mid;
        } else {
            hi = mid;
        }
        if best.len() == target_count {
            break;
        }
    }

    // Exact adjustment: trim the periphery or fill the densest-first gaps.
    let mut selected: Vec<usize> = best;
    if selected.len() > target_count {
        selected.sort_by(|&a, &b| {
            dist(a)
                .partial_cmp(&dist(b))
                .unwrap()
                .then(a.cmp(&b))
        });
        selected.truncate(target_count);
    } else if selected.len() < target_count {
        let chosen: std::collections::HashSet<usize> = selected.iter().copied().collect();
        let mut rest: Vec<usize> = candidates
            .iter()
            .copied()
            .filter(|i| !chosen.contains(i))
            .collect();
        rest.sort_by(|&a, &b| dist(a).partial_cmp(&dist(b)).unwrap().then(a.cmp(&b)));
        let need = target_count - selected.len();
        selected.extend(rest.into_iter().take(need));
    }

    let mut mask = RealTensor::zeros(&[h, w]);
    for idx in selected {
        mask.data_mut()[idx] = T::one();
    }
    Ok(mask)
}

// ── drawn masks ─────────────────────────────────────────────────────

/// NEX binary masks with their soft surrogates.
#[derive(Clone, Debug)]
pub struct MaskSet<T> {
    pub masks: Vec<RealTensor<T>>,
    pub soft: Vec<RealTensor<T>>,
    pub acs_applied: bool,
}

/// Tape-side handles for one drawn mask set.
pub struct DrawnMasks {
    /// Per-repetition H×W masks used by the forward pass (hard by default,
    /// the soft surrogate itself in soft mode).
    pub rep_masks: Vec<BufId>,
    /// Per-repetition soft surrogates (same buffers in soft mode).
    pub rep_soft: Vec<BufId>,
    /// Rescaled field weights q (learned plans only).
    pub q: Option<BufId>,
    /// Field-level soft draw z (learned plans only).
    pub z: Option<BufId>,
}

/// Draws one mask set on the tape. `psi` must be given for learned plans.
/// With `soft_forward`, the hard threshold is skipped and the relaxed z is
/// used directly downstream (gradient checking mode).
pub fn draw_masks_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    plan: &MaskPlan<T>,
    psi: Option<BufId>,
    draw: &SampleDraw<T>,
    soft_forward: bool,
) -> Result<DrawnMasks> {
    let (h, w, d) = (plan.h, plan.w, plan.d());
    if !plan.learned() {
        let mut rep_masks = Vec::new();
        for mask in &plan.fixed_masks {
            rep_masks.push(tape.constant(mask));
        }
        return Ok(DrawnMasks {
            rep_soft: rep_masks.clone(),
            rep_masks,
            q: None,
            z: None,
        });
    }

    let psi = psi.ok_or_else(|| CoreError::Config("learned plan requires logits".into()))?;
    assert_eq!(tape.value(psi).len(), plan.field_len, "logit field length");
    let p = logits_to_probs(tape, psi);
    let q = rescale_to_budget(tape, p, T::of(plan.field_budget), T::of(EPS))?;
    let (z, m) = gumbel_binary_sample(tape, q, draw);
    let field = if soft_forward { z } else { m };

    let scatter_map = Arc::new(non_acs_indices(h, w, plan.acs));
    let mut acs_base = vec![T::zero(); d];
    for idx in plan.acs.flat_indices(h, w) {
        acs_base[idx] = T::one();
    }

    let mut rep_masks = Vec::with_capacity(plan.nex);
    let mut rep_soft = Vec::with_capacity(plan.nex);
    for layout in &plan.layouts {
        match *layout {
            RepLayout::ScatterWithAcs { offset } => {
                let len = d - plan.acs.count();
                let slice_hard = tape.slice(field, offset, len, &[len]);
                let mask =
                    tape.scatter(slice_hard, Arc::clone(&scatter_map), &acs_base, &[h, w]);
                rep_masks.push(mask);
                let slice_soft = tape.slice(z, offset, len, &[len]);
                let soft =
                    tape.scatter(slice_soft, Arc::clone(&scatter_map), &acs_base, &[h, w]);
                rep_soft.push(soft);
            }
            RepLayout::Full { offset } => {
                rep_masks.push(tape.slice(field, offset, d, &[h, w]));
                rep_soft.push(tape.slice(z, offset, d, &[h, w]));
            }
            RepLayout::Fixed => unreachable!("fixed layout in learned plan"),
            RepLayout::Absent => {
                rep_masks.push(tape.zeros(&[h, w]));
                rep_soft.push(tape.zeros(&[h, w]));
            }
        }
    }
    Ok(DrawnMasks {
        rep_masks,
        rep_soft,
        q: Some(q),
        z: Some(z),
    })
}

/// Pure draw: runs a scratch tape and extracts the realized [`MaskSet`] plus
/// the rescaled weights q.
pub fn draw_mask_set<T: Scalar>(
    plan: &MaskPlan<T>,
    psi: Option<&RealTensor<T>>,
    draw: &SampleDraw<T>,
) -> Result<(MaskSet<T>, Option<RealTensor<T>>)> {
    let mut tape = Tape::new();
    let psi_id = psi.map(|t| tape.constant(t));
    let drawn = draw_masks_on_tape(&mut tape, plan, psi_id, draw, false)?;
    let masks = drawn
        .rep_masks
        .iter()
        .map(|&id| tape.value_tensor(id))
        .collect();
    let soft = drawn
        .rep_soft
        .iter()
        .map(|&id| tape.value_tensor(id))
        .collect();
    let q = drawn.q.map(|id| tape.value_tensor(id));
    Ok((
        MaskSet {
            masks,
            soft,
            acs_applied: true,
        },
        q,
    ))
}

/// Reshapes a soft/hard field into NEX masks per the plan layout and forces
/// the ACS in repetition 1 (Algorithm-style assembly on plain tensors).
pub fn assemble_masks<T: Scalar>(field: &RealTensor<T>, plan: &MaskPlan<T>) -> Result<MaskSet<T>> {
    if field.len() != plan.field_len {
        return Err(CoreError::ShapeMismatch {
            context: "assemble_masks",
            expected: vec![plan.field_len],
            got: vec![field.len()],
        });
    }
    let (h, w, d) = (plan.h, plan.w, plan.d());
    let half = T::of(0.5);
    let non_acs = non_acs_indices(h, w, plan.acs);
    let mut masks = Vec::new();
    let mut soft = Vec::new();
    for layout in &plan.layouts {
        let mut hard = RealTensor::zeros(&[h, w]);
        let mut zz = RealTensor::zeros(&[h, w]);
        match *layout {
            RepLayout::ScatterWithAcs { offset } => {
                for (i, &dst) in non_acs.iter().enumerate() {
                    let v = field.data()[offset + i];
                    zz.data_mut()[dst] = v;
                    hard.data_mut()[dst] = if v > half { T::one() } else { T::zero() };
                }
                for idx in plan.acs.flat_indices(h, w) {
                    hard.data_mut()[idx] = T::one();
                    zz.data_mut()[idx] = T::one();
                }
            }
            RepLayout::Full { offset } => {
                for k in 0..d {
                    let v = field.data()[offset + k];
                    zz.data_mut()[k] = v;
                    hard.data_mut()[k] = if v > half { T::one() } else { T::zero() };
                }
            }
            RepLayout::Fixed | RepLayout::Absent => {}
        }
        masks.push(hard);
        soft.push(zz);
    }
    Ok(MaskSet {
        masks,
        soft,
        acs_applied: true,
    })
}
