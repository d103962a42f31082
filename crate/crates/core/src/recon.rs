//! Reconstruction module g_θ: cascaded multi-repetition steps — magnitude /
//! phase split, shared residual denoiser over the NEX magnitude channels,
//! phase restoration, per-repetition conjugate-gradient data consistency —
//! followed by the magnitude-mean fuser. The DC step is omitted in the final
//! step to avoid reinforcing measurement noise.

use crate::error::{CoreError, Result};
use crate::forward::{adjoint, normal_operator, MultiNexKSpace, SensitivitySet};
use crate::rng;
use crate::scalar::Scalar;
use crate::tape::{BufId, ComplexVar, Tape};
use crate::tensor::{ComplexImage, RealTensor};

/// Magnitude regularizer δ inside differentiable paths: |z| = √(re²+im²+δ).
pub const MAG_DELTA: f64 = 1e-12;

/// Architecture hyperparameters of the unrolled network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconConfig {
    pub nex: usize,
    pub h: usize,
    pub w: usize,
    /// Number of MR steps T; DC applied in steps 1..T-1 only.
    pub steps: usize,
    /// Hidden feature channels of the 5-layer denoiser.
    pub hidden: usize,
    pub cg_iters: usize,
    /// CG early-stop on ‖r‖ ≤ cg_tol·‖rhs‖; 0 disables (fixed iterations).
    pub cg_tol: f64,
    /// One denoiser shared across MR steps (default) or one per step.
    pub shared_weights: bool,
    /// Per-channel instance normalization inside the denoiser (off by
    /// default: batch statistics are unstable at desk-scale batch sizes).
    pub normalize: bool,
}

impl ReconConfig {
    pub fn new(nex: usize, h: usize, w: usize) -> Self {
        ReconConfig {
            nex,
            h,
            w,
            steps: 5,
            hidden: 16,
            cg_iters: 10,
            cg_tol: 1e-6,
            shared_weights: true,
            normalize: false,
        }
    }

    fn num_denoisers(&self) -> usize {
        if self.shared_weights {
            1
        } else {
            self.steps
        }
    }

    /// (cin, cout) per layer. The first layer always allocates 2·NEX input
    /// channels; steps after the first feed zeros in the mask channels,
    /// which is equivalent to injecting masks only in the first MR step.
    fn layer_dims(&self) -> [(usize, usize); 5] {
        let n = self.nex;
        let c = self.hidden;
        [(2 * n, c), (c, c), (c, c), (c, c), (c, n)]
    }
}

/// Weights of one 5-layer denoiser stack.
#[derive(Clone, Debug)]
pub struct DenoiserWeights<T> {
    pub w: Vec<RealTensor<T>>,
    pub b: Vec<RealTensor<T>>,
}

/// Learnable parameters θ: denoiser kernels plus the DC regularization
/// weight, stored as log λ so that λ = exp(log λ) stays positive under
/// gradient updates. λ is initialized to 0.05.
#[derive(Clone, Debug)]
pub struct ReconParams<T> {
    pub config: ReconConfig,
    pub denoisers: Vec<DenoiserWeights<T>>,
    pub log_lambda: T,
}

impl<T: Scalar> ReconParams<T> {
    /// Glorot-uniform init for layers 1–4, zero-initialized final layer (the
    /// network starts as the identity), λ = 0.05.
    pub fn init(config: ReconConfig, seed: u64) -> Self {
        let mut rng = rng::stream(seed, 0x0e0);
        let mut denoisers = Vec::new();
        for _ in 0..config.num_denoisers() {
            let mut w = Vec::new();
            let mut b = Vec::new();
            for (li, (cin, cout)) in config.layer_dims().iter().enumerate() {
                let n = cout * cin * 9;
                let data = if li == 4 {
                    vec![T::zero(); n]
                } else {
                    let limit = (6.0 / ((cin * 9 + cout * 9) as f64)).sqrt();
                    (0..n)
                        .map(|_| {
                            T::of((rng::uniform_open::<f64>(&mut rng) * 2.0 - 1.0) * limit)
                        })
                        .collect()
                };
                w.push(RealTensor::from_vec(&[*cout, *cin, 3, 3], data).expect("shape"));
                b.push(RealTensor::zeros(&[*cout]));
            }
            denoisers.push(DenoiserWeights { w, b });
        }
        ReconParams {
            config,
            denoisers,
            log_lambda: T::of(0.05f64.ln()),
        }
    }

    /// All-zero denoiser (exact identity network), λ = 0.05.
    pub fn zero_init(config: ReconConfig) -> Self {
        let mut p = Self::init(config, 0);
        for d in &mut p.denoisers {
            for w in &mut d.w {
                for v in w.data_mut() {
                    *v = T::zero();
                }
            }
        }
        p
    }

    pub fn lambda(&self) -> T {
        self.log_lambda.exp()
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.log_lambda = T::of(lambda.ln());
        self
    }

    /// Flattened parameter vector (optimizer order: per denoiser stack, the
    /// five (weight, bias) pairs, then log λ last).
    pub fn param_vec(&self) -> Vec<T> {
        let mut v = Vec::new();
        for d in &self.denoisers {
            for (w, b) in d.w.iter().zip(&d.b) {
                v.extend_from_slice(w.data());
                v.extend_from_slice(b.data());
            }
        }
        v.push(self.log_lambda);
        v
    }

    pub fn set_param_vec(&mut self, v: &[T]) {
        let mut off = 0;
        for d in &mut self.denoisers {
            for (w, b) in d.w.iter_mut().zip(&mut d.b) {
                let n = w.len();
                w.data_mut().copy_from_slice(&v[off..off + n]);
                off += n;
                let n = b.len();
                b.data_mut().copy_from_slice(&v[off..off + n]);
                off += n;
            }
        }
        self.log_lambda = v[off];
        assert_eq!(off + 1, v.len());
    }

    pub fn num_params(&self) -> usize {
        self.param_vec().len()
    }
}

/// Tape-side handles of the registered parameters, one forward pass.
pub struct ReconVars {
    pub denoisers: Vec<(Vec<BufId>, Vec<BufId>)>,
    pub log_lambda: BufId,
    pub lambda: BufId,
}

impl ReconVars {
    /// Gradient in the exact order of [`ReconParams::param_vec`].
    pub fn collect_grads<T: Scalar>(&self, tape: &Tape<T>) -> Vec<T> {
        let mut g = Vec::new();
        for (ws, bs) in &self.denoisers {
            for (&w, &b) in ws.iter().zip(bs) {
                g.extend(tape.grad_or_zeros(w));
                g.extend(tape.grad_or_zeros(b));
            }
        }
        g.extend(tape.grad_or_zeros(self.log_lambda));
        g
    }
}

/// Registers θ on the tape for one forward pass.
pub fn register_params<T: Scalar>(tape: &mut Tape<T>, params: &ReconParams<T>) -> ReconVars {
    let mut denoisers = Vec::new();
    for d in &params.denoisers {
        let ws = d.w.iter().map(|w| tape.constant(w)).collect();
        let bs = d.b.iter().map(|b| tape.constant(b)).collect();
        denoisers.push((ws, bs));
    }
    let log_lambda = tape.scalar(params.log_lambda);
    let lambda = tape.exp(log_lambda);
    ReconVars {
        denoisers,
        log_lambda,
        lambda,
    }
}

fn instance_normalize<T: Scalar>(
    tape: &mut Tape<T>,
    x: BufId,
    channels: usize,
    h: usize,
    w: usize,
) -> BufId {
    let hw = h * w;
    let mut parts = Vec::with_capacity(channels);
    for c in 0..channels {
        let ch = tape.slice(x, c * hw, hw, &[h, w]);
        let mu = tape.mean(ch);
        let neg_mu = tape.affine(mu, -T::one(), T::zero());
        let centered = tape.add_scalar(ch, neg_mu);
        let sq = tape.mul(centered, centered);
        let var = tape.mean(sq);
        let std = tape.sqrt_eps(var, T::of(1e-8));
        let one = tape.scalar(T::one());
        let inv = tape.div(one, std);
        parts.push(tape.mul_scalar(centered, inv));
    }
    tape.concat(&parts, &[channels, h, w])
}

/// Residual denoiser over the NEX magnitude channels: out = mag + NN(mag).
/// `mask_stack` is concatenated as extra input channels (first MR step);
/// `None` feeds zeros there so one weight set serves every step.
pub fn denoise_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    mag_stack: BufId,
    mask_stack: Option<BufId>,
    weights: &(Vec<BufId>, Vec<BufId>),
    cfg: &ReconConfig,
) -> BufId {
    let (n, h, w) = (cfg.nex, cfg.h, cfg.w);
    let masks = match mask_stack {
        Some(m) => m,
        None => tape.zeros(&[n, h, w]),
    };
    let mut x = tape.concat(&[mag_stack, masks], &[2 * n, h, w]);
    let dims = cfg.layer_dims();
    for (li, (cin, cout)) in dims.iter().enumerate() {
        x = tape.conv2d(x, weights.0[li], weights.1[li], *cin, *cout, h, w);
        if li < 4 {
            if cfg.normalize {
                x = instance_normalize(tape, x, *cout, h, w);
            }
            x = tape.relu(x);
        }
    }
    tape.add(mag_stack, x)
}

/// Outcome of one CG solve.
#[derive(Clone, Copy, Debug)]
pub struct CgInfo {
    pub iterations: usize,
    pub converged: bool,
    pub rel_residual: f64,
}

/// Per-repetition data-consistency solve on the tape (single-coil identity
/// sensitivity): CG on (AᴴMA + λI)x = Aᴴy + λz from x₀ = z, every iteration
/// recorded so gradients are exact for the finite-iteration iterate.
pub fn dc_cg_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    z: ComplexVar,
    zf: ComplexVar,
    mask: BufId,
    lambda: BufId,
    cfg: &ReconConfig,
) -> (ComplexVar, CgInfo) {
    let (h, w) = (cfg.h, cfg.w);
    let apply = |tape: &mut Tape<T>, v: ComplexVar| -> ComplexVar {
        let k = tape.fft2c(v, h, w);
        let masked = tape.mask_complex(mask, k);
        let back = tape.ifft2c(masked, h, w);
        let reg = tape.scale_complex(v, lambda);
        tape.add_complex(back, reg)
    };

    let lz = tape.scale_complex(z, lambda);
    let rhs = tape.add_complex(zf, lz);
    let rhs_norm2 = tape.dot_complex(rhs, rhs);
    let rhs_norm = tape.scalar_value(rhs_norm2).to_f64_lossy().sqrt();

    let mut x = z;
    let qx = apply(tape, x);
    let mut r = tape.sub_complex(rhs, qx);
    let mut p = r;
    let mut rs = tape.dot_complex(r, r);

    let tol2 = cfg.cg_tol * cfg.cg_tol * rhs_norm * rhs_norm;
    let mut iterations = 0;
    for _ in 0..cfg.cg_iters {
        if cfg.cg_tol > 0.0 && tape.scalar_value(rs).to_f64_lossy() <= tol2 {
            break;
        }
        let ap = apply(tape, p);
        let p_ap = tape.dot_complex(p, ap);
        let alpha = tape.safe_div(rs, p_ap);
        let step = tape.scale_complex(p, alpha);
        x = tape.add_complex(x, step);
        let r_step = tape.scale_complex(ap, alpha);
        r = tape.sub_complex(r, r_step);
        let rs_new = tape.dot_complex(r, r);
        let beta = tape.safe_div(rs_new, rs);
        let pb = tape.scale_complex(p, beta);
        p = tape.add_complex(r, pb);
        rs = rs_new;
        iterations += 1;
    }
    let final_res = tape.scalar_value(rs).to_f64_lossy().sqrt();
    let rel = if rhs_norm > 0.0 {
        final_res / rhs_norm
    } else {
        0.0
    };
    (
        x,
        CgInfo {
            iterations,
            converged: cfg.cg_tol == 0.0 || rel <= cfg.cg_tol,
            rel_residual: rel,
        },
    )
}

/// Pure CG over an arbitrary self-adjoint PSD operator (test oracle path and
/// multi-coil DC). Returns the iterate after convergence or `iters` steps.
pub fn cg_solve<T: Scalar>(
    apply: impl Fn(&ComplexImage<T>) -> ComplexImage<T>,
    rhs: &ComplexImage<T>,
    x0: &ComplexImage<T>,
    iters: usize,
    tol: f64,
) -> (ComplexImage<T>, CgInfo) {
    let rhs_norm = rhs.norm2().to_f64_lossy();
    let mut x = x0.clone();
    let mut r = rhs.sub(&apply(&x));
    let mut p = r.clone();
    let mut rs = r.inner_re(&r);
    let tol2 = tol * tol * rhs_norm * rhs_norm;
    let mut iterations = 0;
    for _ in 0..iters {
        if tol > 0.0 && rs.to_f64_lossy() <= tol2 {
            break;
        }
        let ap = apply(&p);
        let p_ap = p.inner_re(&ap);
        if p_ap <= T::zero() {
            break;
        }
        let alpha = rs / p_ap;
        x = x.add(&p.scale(alpha));
        r = r.sub(&ap.scale(alpha));
        let rs_new = r.inner_re(&r);
        let beta = rs_new / rs.max(T::min_positive_value());
        p = r.add(&p.scale(beta));
        rs = rs_new;
        iterations += 1;
    }
    let rel = if rhs_norm > 0.0 {
        rs.to_f64_lossy().sqrt() / rhs_norm
    } else {
        0.0
    };
    (
        x,
        CgInfo {
            iterations,
            converged: tol == 0.0 || rel <= tol,
            rel_residual: rel,
        },
    )
}

/// Data-consistency solve with arbitrary sensitivities (pure, non-tape):
/// (AᴴMA + λI) x = Aᴴ y + λ z, CG from x₀ = z.
pub fn dc_cg<T: Scalar>(
    z: &ComplexImage<T>,
    y: &ComplexImage<T>,
    mask: &RealTensor<T>,
    sens: &SensitivitySet<T>,
    lambda: T,
    iters: usize,
    tol: f64,
) -> (ComplexImage<T>, CgInfo) {
    let y_stack = MultiNexKSpace {
        y: vec![vec![y.clone()]],
        masks: crate::sampling::MaskSet {
            masks: vec![mask.clone()],
            soft: vec![mask.clone()],
            acs_applied: false,
        },
    };
    let ah_y = adjoint(&y_stack, sens).remove(0);
    let rhs = ah_y.add(&z.scale(lambda));
    cg_solve(
        |v| normal_operator(v, mask, sens, lambda),
        &rhs,
        z,
        iters,
        tol,
    )
}

/// One MR step on the tape: magnitude split, shared denoiser, phase
/// restoration, optional per-repetition DC.
#[allow(clippy::too_many_arguments)]
pub fn mr_step_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    images: &[ComplexVar],
    zf: &[ComplexVar],
    masks: &[BufId],
    weights: &(Vec<BufId>, Vec<BufId>),
    lambda: BufId,
    apply_dc: bool,
    first_step: bool,
    cfg: &ReconConfig,
) -> (Vec<ComplexVar>, Vec<CgInfo>) {
    let (n, h, w) = (cfg.nex, cfg.h, cfg.w);
    let delta = T::of(MAG_DELTA);
    let mags: Vec<BufId> = images.iter().map(|&v| tape.magnitude(v, delta)).collect();
    let mag_stack = tape.concat(&mags, &[n, h, w]);
    let mask_stack = if first_step {
        Some(tape.concat(masks, &[n, h, w]))
    } else {
        None
    };
    let denoised = denoise_on_tape(tape, mag_stack, mask_stack, weights, cfg);

    let mut out = Vec::with_capacity(n);
    let mut infos = Vec::new();
    for rep in 0..n {
        let mag_out = tape.slice(denoised, rep * h * w, h * w, &[h, w]);
        // Restore the original phase: out = mag_out · image / |image|.
        let ratio = tape.div(mag_out, mags[rep]);
        let restored = ComplexVar {
            re: tape.mul(ratio, images[rep].re),
            im: tape.mul(ratio, images[rep].im),
        };
        if apply_dc {
            let (solved, info) =
                dc_cg_on_tape(tape, restored, zf[rep], masks[rep], lambda, cfg);
            out.push(solved);
            infos.push(info);
        } else {
            out.push(restored);
        }
    }
    (out, infos)
}

/// Full reconstruction on the tape: zero-filled adjoint → T MR steps (DC in
/// steps 1..T−1) → magnitude-mean fuser. `y` holds the already-masked
/// k-space per repetition; `masks` the matching mask buffers.
pub fn reconstruct_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    y: &[ComplexVar],
    masks: &[BufId],
    vars: &ReconVars,
    cfg: &ReconConfig,
) -> (BufId, Vec<CgInfo>) {
    let (n, h, w) = (cfg.nex, cfg.h, cfg.w);
    assert_eq!(y.len(), n);
    let zf: Vec<ComplexVar> = y.iter().map(|&k| tape.ifft2c(k, h, w)).collect();
    let mut images = zf.clone();
    let mut cg_infos = Vec::new();
    for t in 0..cfg.steps {
        let weights = if cfg.shared_weights {
            &vars.denoisers[0]
        } else {
            &vars.denoisers[t]
        };
        let apply_dc = t + 1 < cfg.steps;
        let (next, infos) = mr_step_on_tape(
            tape,
            &images,
            &zf,
            masks,
            weights,
            vars.lambda,
            apply_dc,
            t == 0,
            cfg,
        );
        images = next;
        cg_infos.extend(infos);
    }
    // Fuser: mean of the NEX magnitude images.
    let delta = T::of(MAG_DELTA);
    let mut acc: Option<BufId> = None;
    for &img in &images {
        let m = tape.magnitude(img, delta);
        acc = Some(match acc {
            None => m,
            Some(a) => tape.add(a, m),
        });
    }
    let xhat = tape.affine(acc.expect("nex >= 1"), T::of(1.0 / n as f64), T::zero());
    (xhat, cg_infos)
}

/// Pure reconstruction from measured k-space (runs a scratch tape).
pub fn reconstruct<T: Scalar>(
    y: &MultiNexKSpace<T>,
    params: &ReconParams<T>,
) -> Result<RealTensor<T>> {
    let cfg = &params.config;
    if y.nex() != cfg.nex {
        return Err(CoreError::ShapeMismatch {
            context: "reconstruct",
            expected: vec![cfg.nex],
            got: vec![y.nex()],
        });
    }
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, params);
    let mut yv = Vec::new();
    let mut mv = Vec::new();
    for (per_coil, mask) in y.y.iter().zip(&y.masks.masks) {
        assert_eq!(per_coil.len(), 1, "tape reconstruction is single-coil");
        yv.push(tape.constant_complex(&per_coil[0]));
        mv.push(tape.constant(mask));
    }
    let (xhat, _infos) = reconstruct_on_tape(&mut tape, &yv, &mv, &vars, cfg);
    Ok(tape.value_tensor(xhat))
}

/// Zero-filled baseline: mean of the per-repetition adjoint magnitudes over
/// the repetitions that acquired any data.
pub fn zero_fill_average<T: Scalar>(
    y: &MultiNexKSpace<T>,
    sens: &SensitivitySet<T>,
) -> RealTensor<T> {
    let imgs = adjoint(y, sens);
    let (h, w) = (imgs[0].height(), imgs[0].width());
    let mut acc = RealTensor::zeros(&[h, w]);
    let mut count = 0usize;
    for (img, mask) in imgs.iter().zip(&y.masks.masks) {
        if mask.sum() == T::zero() {
            continue;
        }
        let m = img.magnitude();
        for (a, &v) in acc.data_mut().iter_mut().zip(m.data()) {
            *a += v;
        }
        count += 1;
    }
    let norm = T::of(1.0 / count.max(1) as f64);
    acc.map(|v| v * norm)
}
