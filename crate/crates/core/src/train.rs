//! Joint end-to-end optimization of (θ, ψ): pixel-mean squared loss, Adam
//! with independent parameter groups and per-group gradient-norm clipping,
//! temperature annealing, step learning-rate halving, validation-best
//! checkpoint selection, and bit-stable checkpoint serialization.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nxt;
use crate::phantom::Example;
use crate::recon::{
    register_params, reconstruct_on_tape, ReconConfig, ReconParams, ReconVars,
};
use crate::sampling::{
    baseline_mask_plan, draw_masks_on_tape, AcsRegion, DrawnMasks, MaskPlan, MaskSet, Method,
    SampleDraw,
};
use crate::tape::BufId;
use crate::{Graph, Real, Tensor};

/// Optimization schedule: Adam over two parameter groups with τ annealing
/// (1.0 → floor 0.1 by 0.95/epoch, 0.5 at test time), learning-rate halving
/// every 14 epochs, and per-group clipping.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_theta: f64,
    pub lr_psi: f64,
    pub lr_half_every: usize,
    pub tau0: f64,
    pub tau_decay: f64,
    pub tau_floor: f64,
    pub tau_test: f64,
    pub clip_theta: f64,
    pub clip_psi: f64,
    pub seed: u64,
    /// Re-verify the budget and clipping invariants every step.
    pub debug_checks: bool,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 30,
            batch_size: 4,
            lr_theta: 1e-4,
            lr_psi: 5e-3,
            lr_half_every: 14,
            tau0: 1.0,
            tau_decay: 0.95,
            tau_floor: 0.1,
            tau_test: 0.5,
            clip_theta: 1.0,
            clip_psi: 1.0,
            seed: 0,
            debug_checks: false,
        }
    }
}

/// τ(epoch) = max(floor, τ₀·decay^epoch).
pub fn temperature(sched: &TrainSchedule, epoch: usize) -> f64 {
    (sched.tau0 * sched.tau_decay.powi(epoch as i32)).max(sched.tau_floor)
}

/// Step schedule: lr₀ halved every `half_every` epochs.
pub fn lr_at(epoch: usize, lr0: f64, half_every: usize) -> f64 {
    lr0 * 0.5f64.powi((epoch / half_every.max(1)) as i32)
}

/// Pixel-mean squared error.
pub fn mse(a: &Tensor, b: &Tensor) -> Real {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = x - y;
        acc += d * d;
    }
    acc / a.len() as f64
}

fn mse_on_tape(tape: &mut Graph, a: BufId, b: BufId) -> BufId {
    let diff = tape.sub(a, b);
    let sq = tape.mul(diff, diff);
    tape.mean(sq)
}

/// Adam state for one parameter group.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One adaptive-moment update with bias correction.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Scales `grads` so its ℓ₂ norm is at most `max_norm`; returns the
/// pre-clip norm.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

/// Per-epoch training record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub tau: f64,
    pub lr_theta: f64,
    pub lr_psi: f64,
    /// Σq over the learned field (0 for fixed plans).
    pub sum_q: f64,
    /// Expected free-location sampling rate per repetition (ACS excluded),
    /// relative to one fully sampled acquisition.
    pub rates: Vec<f64>,
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ReconParams<Real>,
    pub psi: Option<Tensor>,
    pub history: Vec<EpochRecord>,
    /// Validation loss of the untrained (epoch-0) model state.
    pub initial_val_loss: f64,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub diverged: bool,
}

/// Forward pass of one batch on a fresh tape: shared mask draw, per-example
/// reconstruction, batch-mean loss. Returns the loss buffer and the drawn
/// mask handles.
#[allow(clippy::too_many_arguments)]
pub fn batch_forward(
    tape: &mut Graph,
    plan: &MaskPlan<Real>,
    psi: Option<BufId>,
    vars: &ReconVars,
    cfg: &ReconConfig,
    batch: &[&Example],
    draw: &SampleDraw<Real>,
    soft_forward: bool,
) -> Result<(BufId, DrawnMasks, Vec<BufId>)> {
    let drawn = draw_masks_on_tape(tape, plan, psi, draw, soft_forward)?;
    let mut acc: Option<BufId> = None;
    let mut xhats = Vec::with_capacity(batch.len());
    for ex in batch {
        let mut y_masked = Vec::with_capacity(plan.nex);
        for (rep, y_full) in ex.y_full.iter().enumerate() {
            let yk = tape.constant_complex(y_full);
            y_masked.push(tape.mask_complex(drawn.rep_masks[rep], yk));
        }
        let (xhat, _cg) = reconstruct_on_tape(tape, &y_masked, &drawn.rep_masks, vars, cfg);
        xhats.push(xhat);
        let target = tape.constant(&ex.target);
        let l = mse_on_tape(tape, xhat, target);
        acc = Some(match acc {
            None => l,
            Some(a) => tape.add(a, l),
        });
    }
    let total = acc.ok_or_else(|| CoreError::Config("empty batch".into()))?;
    let loss = tape.affine(total, 1.0 / batch.len() as f64, 0.0);
    Ok((loss, drawn, xhats))
}

/// Expected per-repetition free-location rates from the rescaled weights q
/// (clipped into [0,1] per location), relative to one full acquisition.
pub fn expected_rates(plan: &MaskPlan<Real>, q: Option<&Tensor>) -> Vec<f64> {
    let d = plan.d() as f64;
    match q {
        Some(q) => plan
            .layouts
            .iter()
            .map(|layout| match *layout {
                crate::sampling::RepLayout::ScatterWithAcs { offset } => {
                    let len = plan.d() - plan.acs.count();
                    q.data()[offset..offset + len]
                        .iter()
                        .map(|v| v.clamp(0.0, 1.0))
                        .sum::<f64>()
                        / d
                }
                crate::sampling::RepLayout::Full { offset } => q.data()
                    [offset..offset + plan.d()]
                    .iter()
                    .map(|v| v.clamp(0.0, 1.0))
                    .sum::<f64>()
                    / d,
                _ => 0.0,
            })
            .collect(),
        None => plan
            .fixed_masks
            .iter()
            .enumerate()
            .map(|(rep, m)| {
                let forced = if rep == 0 { plan.acs.count() } else { 0 };
                (m.sum() - forced as f64).max(0.0) / d
            })
            .collect(),
    }
}

/// Evaluates the model on one example with a single mask realization drawn
/// from the fixed evaluation seed (counter = image index), at τ_test.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_example(
    plan: &MaskPlan<Real>,
    psi: Option<&Tensor>,
    params: &ReconParams<Real>,
    ex: &Example,
    tau_test: f64,
    eval_seed: u64,
    image_index: u64,
) -> Result<(Tensor, MaskSet<Real>)> {
    let mut tape = Graph::new();
    let vars = register_params(&mut tape, params);
    let psi_id = psi.map(|t| tape.constant(t));
    let draw = SampleDraw::new(tau_test, plan.field_len, eval_seed, image_index);
    let (_loss, drawn, xhats) = batch_forward(
        &mut tape,
        plan,
        psi_id,
        &vars,
        &params.config,
        &[ex],
        &draw,
        false,
    )?;
    let xhat = xhats[0];
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
    Ok((
        tape.value_tensor(xhat),
        MaskSet {
            masks,
            soft,
            acs_applied: true,
        },
    ))
}

fn val_loss(
    plan: &MaskPlan<Real>,
    psi: Option<&Tensor>,
    params: &ReconParams<Real>,
    val: &[Example],
    sched: &TrainSchedule,
) -> Result<f64> {
    let eval_seed = sched.seed ^ 0xE7A1;
    let mut acc = 0.0;
    for (i, ex) in val.iter().enumerate() {
        let (xhat, _) = evaluate_example(
            plan,
            psi,
            params,
            ex,
            sched.tau_test,
            eval_seed,
            i as u64,
        )?;
        acc += mse(&xhat, &ex.target);
    }
    Ok(acc / val.len().max(1) as f64)
}

/// Joint end-to-end training of (θ, ψ). Fixed-mask plans have no ψ group.
/// Masks are redrawn once per batch; divergence (non-finite loss) aborts and
/// returns the last good checkpoint.
pub fn joint_train(
    plan: &MaskPlan<Real>,
    recon_cfg: ReconConfig,
    train: &[Example],
    val: &[Example],
    sched: &TrainSchedule,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(CoreError::Config("empty training set".into()));
    }
    let mut params = ReconParams::<Real>::init(recon_cfg, sched.seed ^ 0x7E7A);
    let mut psi: Option<Tensor> = plan.learned().then(|| plan.init_logits());

    let mut adam_theta = Adam::new(params.num_params());
    let mut adam_psi = Adam::new(plan.field_len);

    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ReconParams<Real>, Option<Tensor>)> = None;
    let mut diverged = false;
    let initial_val_loss = val_loss(plan, psi.as_ref(), &params, val, sched)?;

    let n_batches = train.len().div_ceil(sched.batch_size);
    'epochs: for epoch in 0..sched.epochs {
        let tau = temperature(sched, epoch);
        let lr_t = lr_at(epoch, sched.lr_theta, sched.lr_half_every);
        let lr_p = lr_at(epoch, sched.lr_psi, sched.lr_half_every);

        // Fixed batch composition per seed and epoch.
        let mut order: Vec<usize> = (0..train.len()).collect();
        {
            use rand::seq::SliceRandom;
            let mut r = crate::rng::stream(sched.seed, 0xB47C ^ ((epoch as u64) << 8));
            order.shuffle(&mut r);
        }

        let mut epoch_loss = 0.0;
        let mut last_sum_q = 0.0;
        let mut last_q: Option<Tensor> = None;
        for batch_idx in 0..n_batches {
            let lo = batch_idx * sched.batch_size;
            let hi = (lo + sched.batch_size).min(train.len());
            let batch: Vec<&Example> = order[lo..hi].iter().map(|&i| &train[i]).collect();

            let counter = (epoch * n_batches + batch_idx) as u64;
            let draw = SampleDraw::new(tau, plan.field_len, sched.seed ^ 0xD4A3, counter);

            let mut tape = Graph::new();
            let vars = register_params(&mut tape, &params);
            let psi_id = psi.as_ref().map(|t| tape.constant(t));
            let (loss, drawn, _xhats) =
                batch_forward(&mut tape, plan, psi_id, &vars, &recon_cfg, &batch, &draw, false)?;
            let loss_val = tape.scalar_value(loss);
            if !loss_val.is_finite() {
                diverged = true;
                break 'epochs;
            }
            epoch_loss += loss_val * batch.len() as f64;

            if let Some(q) = drawn.q {
                let qt = tape.value_tensor(q);
                last_sum_q = qt.sum();
                if sched.debug_checks {
                    let b = plan.field_budget;
                    assert!(
                        (last_sum_q - b).abs() <= 1e-6 * b,
                        "budget invariant violated: Σq = {last_sum_q}, B = {b}"
                    );
                }
                last_q = Some(qt);
            }

            tape.backward(loss);

            let mut g_theta = vars.collect_grads(&tape);
            if g_theta.iter().any(|g| !g.is_finite()) {
                diverged = true;
                break 'epochs;
            }
            let pre = clip_grad_norm(&mut g_theta, sched.clip_theta);
            if sched.debug_checks {
                let post = g_theta.iter().map(|g| g * g).sum::<f64>().sqrt();
                assert!(post <= sched.clip_theta.max(pre) + 1e-9);
                assert!(post <= sched.clip_theta + 1e-9 || sched.clip_theta == 0.0);
            }
            let mut theta = params.param_vec();
            adam_theta.step(&mut theta, &g_theta, lr_t);
            params.set_param_vec(&theta);

            if let (Some(psi_t), Some(psi_buf)) = (psi.as_mut(), psi_id) {
                let mut g_psi = tape.grad_or_zeros(psi_buf);
                if g_psi.iter().any(|g| !g.is_finite()) {
                    diverged = true;
                    break 'epochs;
                }
                clip_grad_norm(&mut g_psi, sched.clip_psi);
                adam_psi.step(psi_t.data_mut(), &g_psi, lr_p);
            }
        }

        let train_loss = epoch_loss / train.len() as f64;
        let vl = val_loss(plan, psi.as_ref(), &params, val, sched)?;
        if !vl.is_finite() {
            diverged = true;
            break 'epochs;
        }
        let rates = expected_rates(plan, last_q.as_ref());
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: vl,
            tau,
            lr_theta: lr_t,
            lr_psi: lr_p,
            sum_q: last_sum_q,
            rates,
        });
        if best.as_ref().map(|(_, b, _, _)| vl < *b).unwrap_or(true) {
            best = Some((epoch, vl, params.clone(), psi.clone()));
        }
    }

    let (best_epoch, best_val_loss, best_params, best_psi) = match best {
        Some(b) => b,
        // Diverged before the first validation point: return the last state.
        None => (0, f64::INFINITY, params, psi),
    };
    Ok(TrainOutcome {
        params: best_params,
        psi: best_psi,
        history,
        initial_val_loss,
        best_epoch,
        best_val_loss,
        diverged,
    })
}

// ── checkpoints ─────────────────────────────────────────────────────

/// Hyperparameter manifest stored next to the weight tensors.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub method: String,
    pub h: usize,
    pub w: usize,
    pub nex: usize,
    pub acs_height: usize,
    pub acs_width: usize,
    pub r: f64,
    pub plan_seed: u64,
    pub steps: usize,
    pub hidden: usize,
    pub cg_iters: usize,
    pub cg_tol: f64,
    pub shared_weights: bool,
    pub normalize: bool,
    pub num_denoisers: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Writes manifest + one NXT tensor per weight; reload is bit-stable.
pub fn save_checkpoint(
    dir: &Path,
    plan: &MaskPlan<Real>,
    plan_seed: u64,
    outcome: &TrainOutcome,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let cfg = outcome.params.config;
    let meta = CheckpointMeta {
        method: plan.method.name().to_string(),
        h: plan.h,
        w: plan.w,
        nex: plan.nex,
        acs_height: plan.acs.height,
        acs_width: plan.acs.width,
        r: plan.r,
        plan_seed,
        steps: cfg.steps,
        hidden: cfg.hidden,
        cg_iters: cfg.cg_iters,
        cg_tol: cfg.cg_tol,
        shared_weights: cfg.shared_weights,
        normalize: cfg.normalize,
        num_denoisers: outcome.params.denoisers.len(),
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
    };
    fs::write(dir.join("checkpoint.json"), serde_json::to_string_pretty(&meta)?)?;
    for (di, d) in outcome.params.denoisers.iter().enumerate() {
        for (li, (w, b)) in d.w.iter().zip(&d.b).enumerate() {
            nxt::write_real(&dir.join(format!("denoiser{di}_w{li}.nxt")), w)?;
            nxt::write_real(&dir.join(format!("denoiser{di}_b{li}.nxt")), b)?;
        }
    }
    nxt::write_real(
        &dir.join("log_lambda.nxt"),
        &Tensor::from_vec(&[1], vec![outcome.params.log_lambda])?,
    )?;
    if let Some(psi) = &outcome.psi {
        nxt::write_real(&dir.join("psi.nxt"), psi)?;
    }
    write_history_csv(&dir.join("history.csv"), &outcome.history)?;
    Ok(())
}

/// Loads a checkpoint; the plan (including fixed VD masks) regenerates
/// deterministically from the stored seed.
pub type LoadedCheckpoint = (MaskPlan<Real>, ReconParams<Real>, Option<Tensor>, CheckpointMeta);

pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    let raw = fs::read_to_string(dir.join("checkpoint.json"))?;
    let meta: CheckpointMeta = serde_json::from_str(&raw)?;
    let method = Method::parse(&meta.method)
        .ok_or_else(|| CoreError::Config(format!("unknown method {}", meta.method)))?;
    let plan = baseline_mask_plan::<Real>(
        method,
        meta.r,
        meta.h,
        meta.w,
        meta.nex,
        AcsRegion {
            height: meta.acs_height,
            width: meta.acs_width,
        },
        meta.plan_seed,
    )?;
    let cfg = ReconConfig {
        nex: meta.nex,
        h: meta.h,
        w: meta.w,
        steps: meta.steps,
        hidden: meta.hidden,
        cg_iters: meta.cg_iters,
        cg_tol: meta.cg_tol,
        shared_weights: meta.shared_weights,
        normalize: meta.normalize,
    };
    let mut params = ReconParams::<Real>::zero_init(cfg);
    for (di, d) in params.denoisers.iter_mut().enumerate() {
        for li in 0..5 {
            d.w[li] = nxt::read_real(&dir.join(format!("denoiser{di}_w{li}.nxt")))?;
            d.b[li] = nxt::read_real(&dir.join(format!("denoiser{di}_b{li}.nxt")))?;
        }
    }
    params.log_lambda = nxt::read_real::<Real>(&dir.join("log_lambda.nxt"))?.data()[0];
    let psi_path = dir.join("psi.nxt");
    let psi = if psi_path.exists() {
        Some(nxt::read_real::<Real>(&psi_path)?)
    } else {
        None
    };
    Ok((plan, params, psi, meta))
}

/// History CSV: fixed header `epoch,train_loss,val_loss,tau,lr_theta,lr_psi,
/// sum_q,rate_nex1..rate_nexN`.
pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::new();
    let nex = history.first().map(|r| r.rates.len()).unwrap_or(0);
    out.push_str("epoch,train_loss,val_loss,tau,lr_theta,lr_psi,sum_q");
    for n in 1..=nex {
        out.push_str(&format!(",rate_nex{n}"));
    }
    out.push('\n');
    for r in history {
        out.push_str(&format!(
            "{},{:.12e},{:.12e},{:.6},{:.6e},{:.6e},{:.9}",
            r.epoch, r.train_loss, r.val_loss, r.tau, r.lr_theta, r.lr_psi, r.sum_q
        ));
        for v in &r.rates {
            out.push_str(&format!(",{v:.9}"));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, make_multinex, PhantomSpec};
    use crate::rng;
    use rand::Rng;

    fn toy_examples(h: usize, w: usize, nex: usize, n: usize, seed: u64) -> Vec<Example> {
        (0..n)
            .map(|i| {
                let x = generate_phantom(&PhantomSpec::new(h, w, seed + i as u64));
                make_multinex(&x, 0.1, nex, seed + 1000 + i as u64)
            })
            .collect()
    }

    fn toy_cfg(h: usize, w: usize, nex: usize) -> ReconConfig {
        ReconConfig {
            steps: 2,
            hidden: 4,
            cg_iters: 4,
            cg_tol: 0.0,
            ..ReconConfig::new(nex, h, w)
        }
    }

    fn toy_plan(h: usize, w: usize, nex: usize) -> MaskPlan<Real> {
        baseline_mask_plan(
            Method::NexOp,
            4.0,
            h,
            w,
            nex,
            AcsRegion {
                height: 4,
                width: 4,
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn loss_examples() {
        let a = Tensor::from_vec(&[2, 2], vec![0.1, 0.4, 0.9, 0.3]).unwrap();
        assert_eq!(mse(&a, &a), 0.0);

        let c = 0.25;
        let b = a.map(|v| v + c);
        assert!((mse(&b, &a) - c * c).abs() < 1e-15);

        // Brute-force Σ(diff²)/HW oracle on a random pair.
        let mut r = rng::stream(4, 0);
        let x = Tensor::from_vec(&[4, 4], (0..16).map(|_| r.random::<f64>()).collect()).unwrap();
        let y = Tensor::from_vec(&[4, 4], (0..16).map(|_| r.random::<f64>()).collect()).unwrap();
        let mut brute = 0.0;
        for k in 0..16 {
            brute += (x.data()[k] - y.data()[k]).powi(2);
        }
        brute /= 16.0;
        assert!((mse(&x, &y) - brute).abs() < 1e-12);
    }

    #[test]
    fn temperature_schedule() {
        let sched = TrainSchedule::default();
        assert_eq!(temperature(&sched, 0), 1.0);
        assert!((temperature(&sched, 1) - 0.95).abs() < 1e-15);
        // 0.95^45 ≈ 0.0994 < floor.
        assert_eq!(temperature(&sched, 45), 0.1);
        // Monotone nonincreasing to the floor.
        for e in 1..60 {
            assert!(temperature(&sched, e) <= temperature(&sched, e - 1));
        }
    }

    #[test]
    fn learning_rate_halving() {
        let lr0 = 3e-4;
        assert_eq!(lr_at(0, lr0, 14), lr0);
        assert_eq!(lr_at(13, lr0, 14), lr0);
        assert_eq!(lr_at(14, lr0, 14), lr0 / 2.0);
        assert_eq!(lr_at(29, lr0, 14), lr0 / 4.0);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![3.0, 4.0];
        let pre = clip_grad_norm(&mut g, 1.0);
        assert!((pre - 5.0).abs() < 1e-12);
        let post = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((post - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_adam_step_decreases_batch_loss() {
        let (h, w, nex) = (16, 16, 3);
        let cfg = toy_cfg(h, w, nex);
        let plan = toy_plan(h, w, nex);
        let examples = toy_examples(h, w, nex, 2, 900);
        let batch: Vec<&Example> = examples.iter().collect();
        let mut params = ReconParams::<Real>::init(cfg, 7);
        let mut psi = plan.init_logits();
        let draw = SampleDraw::new(1.0, plan.field_len, 33, 0);

        let eval = |params: &ReconParams<Real>, psi: &Tensor| -> (f64, Vec<f64>, Vec<f64>) {
            let mut tape = Graph::new();
            let vars = register_params(&mut tape, params);
            let psi_id = tape.constant(psi);
            let (loss, _drawn, _x) = batch_forward(
                &mut tape, &plan, Some(psi_id), &vars, &cfg, &batch, &draw, false,
            )
            .unwrap();
            let lv = tape.scalar_value(loss);
            tape.backward(loss);
            (lv, vars.collect_grads(&tape), tape.grad_or_zeros(psi_id))
        };

        let (loss0, g_theta, g_psi) = eval(&params, &psi);
        let lr = 1e-4;
        let mut adam_t = Adam::new(g_theta.len());
        let mut theta = params.param_vec();
        adam_t.step(&mut theta, &g_theta, lr);
        params.set_param_vec(&theta);
        let mut adam_p = Adam::new(g_psi.len());
        adam_p.step(psi.data_mut(), &g_psi, lr);

        let (loss1, _, _) = eval(&params, &psi);
        assert!(loss1 < loss0, "loss {loss0} → {loss1} did not decrease");
    }

    #[test]
    fn training_is_deterministic_and_respects_budget() {
        let (h, w, nex) = (16, 16, 3);
        let cfg = toy_cfg(h, w, nex);
        let plan = toy_plan(h, w, nex);
        let train_set = toy_examples(h, w, nex, 4, 50);
        let val_set = toy_examples(h, w, nex, 2, 70);
        let sched = TrainSchedule {
            epochs: 2,
            batch_size: 2,
            debug_checks: true,
            seed: 3,
            ..TrainSchedule::default()
        };
        let a = joint_train(&plan, cfg, &train_set, &val_set, &sched).unwrap();
        let b = joint_train(&plan, cfg, &train_set, &val_set, &sched).unwrap();
        assert!(!a.diverged);
        assert_eq!(a.history.len(), 2);
        for (ra, rb) in a.history.iter().zip(&b.history) {
            assert!((ra.train_loss - rb.train_loss).abs() <= 1e-10);
            assert!((ra.val_loss - rb.val_loss).abs() <= 1e-10);
            // Σq tracks the budget to float precision.
            assert!((ra.sum_q - plan.field_budget).abs() <= 1e-6 * plan.field_budget);
        }
        assert_eq!(
            a.psi.as_ref().unwrap().data(),
            b.psi.as_ref().unwrap().data()
        );
    }

    #[test]
    fn fixed_mask_plans_have_no_logit_group() {
        let (h, w, nex) = (16, 16, 3);
        let cfg = toy_cfg(h, w, nex);
        let plan: MaskPlan<Real> = baseline_mask_plan(
            Method::MultiNexVd,
            4.0,
            h,
            w,
            nex,
            AcsRegion {
                height: 4,
                width: 4,
            },
            5,
        )
        .unwrap();
        let train_set = toy_examples(h, w, nex, 2, 10);
        let val_set = toy_examples(h, w, nex, 1, 20);
        let sched = TrainSchedule {
            epochs: 1,
            batch_size: 2,
            seed: 1,
            ..TrainSchedule::default()
        };
        let out = joint_train(&plan, cfg, &train_set, &val_set, &sched).unwrap();
        assert!(out.psi.is_none());
        // The fixed masks never change: redrawing yields the plan's masks.
        let draw = SampleDraw::new(0.5, 0, 9, 0);
        let (set, _) = crate::sampling::draw_mask_set(&plan, None, &draw).unwrap();
        for (m, fixed) in set.masks.iter().zip(&plan.fixed_masks) {
            assert_eq!(m, fixed);
        }
    }

    #[test]
    fn sampling_gradient_survives_full_stack() {
        let (h, w, nex) = (16, 16, 3);
        let cfg = toy_cfg(h, w, nex);
        let plan = toy_plan(h, w, nex);
        let examples = toy_examples(h, w, nex, 1, 77);
        let batch: Vec<&Example> = examples.iter().collect();
        let params = ReconParams::<Real>::init(cfg, 3);
        let psi0 = plan.init_logits();
        let mut tape = Graph::new();
        let vars = register_params(&mut tape, &params);
        let psi_id = tape.constant(&psi0);
        let draw = SampleDraw::new(1.0, plan.field_len, 5, 0);
        let (loss, _, _) = batch_forward(
            &mut tape, &plan, Some(psi_id), &vars, &cfg, &batch, &draw, false,
        )
        .unwrap();
        tape.backward(loss);
        let g = tape.grad_or_zeros(psi_id);
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 0.0, "∂loss/∂ψ vanished");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_stable() {
        let (h, w, nex) = (16, 16, 3);
        let cfg = toy_cfg(h, w, nex);
        let plan = toy_plan(h, w, nex);
        let train_set = toy_examples(h, w, nex, 2, 30);
        let val_set = toy_examples(h, w, nex, 1, 40);
        let sched = TrainSchedule {
            epochs: 1,
            batch_size: 2,
            seed: 8,
            ..TrainSchedule::default()
        };
        let out = joint_train(&plan, cfg, &train_set, &val_set, &sched).unwrap();
        let dir = std::env::temp_dir().join("nexop_ckpt_test");
        let _ = std::fs::remove_dir_all(&dir);
        save_checkpoint(&dir, &plan, 5, &out).unwrap();
        let (plan2, params2, psi2, meta) = load_checkpoint(&dir).unwrap();
        assert_eq!(meta.method, "nexop");
        assert_eq!(plan2.field_budget, plan.field_budget);
        assert_eq!(params2.param_vec(), out.params.param_vec());
        assert_eq!(psi2.unwrap().data(), out.psi.unwrap().data());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn evaluation_is_repeatable_bit_identical() {
        let (h, w, nex) = (16, 16, 3);
        let cfg = toy_cfg(h, w, nex);
        let plan = toy_plan(h, w, nex);
        let ex = &toy_examples(h, w, nex, 1, 60)[0];
        let params = ReconParams::<Real>::init(cfg, 2);
        let psi = plan.init_logits();
        let (a, ma) = evaluate_example(&plan, Some(&psi), &params, ex, 0.5, 99, 0).unwrap();
        let (b, mb) = evaluate_example(&plan, Some(&psi), &params, ex, 0.5, 99, 0).unwrap();
        assert_eq!(a.data(), b.data());
        for (x, y) in ma.masks.iter().zip(&mb.masks) {
            assert_eq!(x, y);
        }
    }
}
