//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use nexop_core::analysis::{
    accumulate, marginal_std, normalize_distribution, per_nex_rates, smooth_map,
};
use nexop_core::metrics::{fsim, psnr, roi_mask, ssim};
use nexop_core::phantom::{build_manifest_with, write_dataset, Example};
use nexop_core::recon::ReconParams;
use nexop_core::sampling::{MaskPlan, Method, SampleDraw};
use nexop_core::train::{
    evaluate_example, joint_train, load_checkpoint, save_checkpoint, TrainOutcome,
};
use nexop_core::{nxt, pgm, Real, Tensor};

use crate::config::RunConfig;
use crate::data::load_splits;

// ── gen-data ────────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
pub fn gen_data(
    out: &Path,
    height: usize,
    width: usize,
    nex: usize,
    sigma: f64,
    train: usize,
    val: usize,
    test: usize,
    seed: u64,
    ellipse_min: usize,
    ellipse_max: usize,
    texture: bool,
) -> Result<()> {
    let manifest = build_manifest_with(
        height,
        width,
        nex,
        sigma,
        train,
        val,
        test,
        seed,
        ellipse_min,
        ellipse_max,
        texture,
    );
    manifest.validate()?;
    write_dataset(out, &manifest)?;
    println!(
        "wrote {}x{} NEX={} dataset ({} train / {} val / {} test) to {}",
        height,
        width,
        nex,
        train,
        val,
        test,
        out.display()
    );
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────

pub fn train(config_path: &Path, epochs_override: Option<usize>) -> Result<PathBuf> {
    let cfg = RunConfig::load(config_path)?;
    let splits = load_splits(&cfg)?;
    let plan = cfg.method_plan(cfg.method())?;
    let mut sched = cfg.train_schedule();
    if let Some(e) = epochs_override {
        sched.epochs = e;
    }
    let out_dir = cfg.output_dir.join(cfg.method().name());
    fs::create_dir_all(&out_dir)?;

    println!(
        "training {} at R={} on {} examples ({} epochs)",
        cfg.method().name(),
        cfg.plan.r,
        splits.train.len(),
        sched.epochs
    );
    let outcome = joint_train(&plan, cfg.recon_config(), &splits.train, &splits.val, &sched)?;
    if outcome.diverged {
        save_checkpoint(&out_dir, &plan, cfg.seed, &outcome)?;
        bail!(
            "numeric failure: training diverged; last good checkpoint saved to {}",
            out_dir.display()
        );
    }
    save_checkpoint(&out_dir, &plan, cfg.seed, &outcome)?;
    if let Some(last) = outcome.history.last() {
        println!(
            "done: best val loss {:.6e} at epoch {} (final train {:.6e})",
            outcome.best_val_loss, outcome.best_epoch, last.train_loss
        );
    }
    Ok(out_dir)
}

// ── eval ────────────────────────────────────────────────────────────

pub struct MetricRow {
    pub image: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub fsim: f64,
}

/// Evaluates a trained model on a split: one mask realization per image from
/// the fixed evaluation seed; metrics inside the auto-derived ROI. With
/// `mask_draws > 1` the reconstruction is averaged over draws.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_split(
    plan: &MaskPlan<Real>,
    params: &ReconParams<Real>,
    psi: Option<&Tensor>,
    examples: &[Example],
    tau_test: f64,
    eval_seed: u64,
    threshold_frac: f64,
    mask_draws: usize,
) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let mut xhat: Option<Tensor> = None;
        for d in 0..mask_draws.max(1) {
            let counter = (i * mask_draws.max(1) + d) as u64;
            let (x, _masks) =
                evaluate_example(plan, psi, params, ex, tau_test, eval_seed, counter)?;
            xhat = Some(match xhat {
                None => x,
                Some(mut acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(x.data()) {
                        *a += v;
                    }
                    acc
                }
            });
        }
        let mut xhat = xhat.expect("at least one draw");
        let inv = 1.0 / mask_draws.max(1) as f64;
        for v in xhat.data_mut() {
            *v *= inv;
        }
        let roi = roi_mask(&ex.target, threshold_frac)?;
        rows.push(MetricRow {
            image: i,
            psnr: psnr(&ex.target, &xhat, &roi),
            ssim: ssim(&ex.target, &xhat, &roi),
            fsim: fsim(&ex.target, &xhat, &roi),
        });
    }
    Ok(rows)
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

pub fn write_per_image_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut out = String::from("image,psnr,ssim,fsim\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.9},{:.9},{:.9}\n",
            r.image, r.psnr, r.ssim, r.fsim
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Aggregate CSV row per method: mean ± sample std of the three metrics.
pub fn write_summary_csv(path: &Path, rows: &[(String, Vec<MetricRow>)]) -> Result<()> {
    let mut out =
        String::from("method,n,psnr_mean,psnr_std,ssim_mean,ssim_std,fsim_mean,fsim_std\n");
    for (method, metrics) in rows {
        let p: Vec<f64> = metrics.iter().map(|m| m.psnr).collect();
        let s: Vec<f64> = metrics.iter().map(|m| m.ssim).collect();
        let f: Vec<f64> = metrics.iter().map(|m| m.fsim).collect();
        let (pm, ps) = mean_std(&p);
        let (sm, ss) = mean_std(&s);
        let (fm, fs_) = mean_std(&f);
        out.push_str(&format!(
            "{method},{},{pm:.9},{ps:.9},{sm:.9},{ss:.9},{fm:.9},{fs_:.9}\n",
            metrics.len()
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn eval_cmd(
    checkpoint: &Path,
    data: &Path,
    split: &str,
    out: &Path,
    threshold_frac: f64,
    eval_seed: u64,
    tau_test: f64,
    mask_draws: usize,
) -> Result<()> {
    let (plan, params, psi, meta) = load_checkpoint(checkpoint)?;
    let manifest = nexop_core::phantom::read_manifest(data)?;
    let examples = nexop_core::phantom::read_split(data, &manifest, split)?;
    let rows = evaluate_split(
        &plan,
        &params,
        psi.as_ref(),
        &examples,
        tau_test,
        eval_seed,
        threshold_frac,
        mask_draws,
    )?;
    fs::create_dir_all(out)?;
    write_per_image_csv(&out.join("per_image.csv"), &rows)?;
    write_summary_csv(&out.join("summary.csv"), &[(meta.method.clone(), rows)])?;
    println!("evaluation written to {}", out.display());
    Ok(())
}

// ── draw-masks ──────────────────────────────────────────────────────

pub fn draw_masks_cmd(
    checkpoint: &Path,
    out: &Path,
    draws: usize,
    tau: f64,
    seed: u64,
) -> Result<()> {
    let (plan, _params, psi, _meta) = load_checkpoint(checkpoint)?;
    fs::create_dir_all(out)?;
    for d in 0..draws {
        let draw = SampleDraw::new(tau, plan.field_len, seed, d as u64);
        let (set, q) = nexop_core::sampling::draw_mask_set(&plan, psi.as_ref(), &draw)?;
        for (rep, mask) in set.masks.iter().enumerate() {
            pgm::write_mask(&out.join(format!("draw{d:03}_mask_rep{}.pgm", rep + 1)), mask)?;
        }
        if d == 0 {
            if let Some(q) = q {
                nxt::write_real(&out.join("q.nxt"), &q)?;
                for (rep, map) in field_to_rep_maps(&plan, &q).into_iter().enumerate() {
                    nxt::write_real(&out.join(format!("q_rep{}.nxt", rep + 1)), &map)?;
                }
            }
        }
    }
    println!("wrote {draws} mask draw(s) to {}", out.display());
    Ok(())
}

/// Expands a learned field (ψ/q layout) into per-repetition H×W maps; the
/// forced ACS carries weight 1 and absent repetitions map to zero.
pub fn field_to_rep_maps(plan: &MaskPlan<Real>, field: &Tensor) -> Vec<Tensor> {
    use nexop_core::sampling::{non_acs_indices, RepLayout};
    let (h, w, d) = (plan.h, plan.w, plan.d());
    let non_acs = non_acs_indices(h, w, plan.acs);
    plan.layouts
        .iter()
        .map(|layout| {
            let mut map = Tensor::zeros(&[h, w]);
            match *layout {
                RepLayout::ScatterWithAcs { offset } => {
                    for (i, &dst) in non_acs.iter().enumerate() {
                        map.data_mut()[dst] = field.data()[offset + i];
                    }
                    for idx in plan.acs.flat_indices(h, w) {
                        map.data_mut()[idx] = 1.0;
                    }
                }
                RepLayout::Full { offset } => {
                    map.data_mut().copy_from_slice(&field.data()[offset..offset + d]);
                }
                RepLayout::Fixed | RepLayout::Absent => {}
            }
            map
        })
        .collect()
}

// ── analyze ─────────────────────────────────────────────────────────

pub struct AnalyzeLabels {
    pub method: String,
    pub r: f64,
    pub contrast: String,
}

/// Analysis of one mask/probability source: per-repetition rates (mean over
/// draws), smoothed-map marginal standard deviations, accumulation map.
pub fn analyze_checkpoint(
    checkpoint: &Path,
    out: &Path,
    draws: usize,
    tau: f64,
    seed: u64,
    contrast: &str,
) -> Result<()> {
    let (plan, _params, psi, meta) = load_checkpoint(checkpoint)?;
    fs::create_dir_all(out)?;

    // Mean realized rates over the requested draws.
    let forced = plan.forced_acs_reps();
    let mut rate_acc = vec![0.0f64; plan.nex];
    let mut last_masks: Option<Vec<Tensor>> = None;
    for d in 0..draws.max(1) {
        let draw = SampleDraw::new(tau, plan.field_len, seed, d as u64);
        let (set, _q) = nexop_core::sampling::draw_mask_set(&plan, psi.as_ref(), &draw)?;
        let rates = per_nex_rates(&set.masks, plan.acs, &forced);
        for (acc, r) in rate_acc.iter_mut().zip(&rates) {
            *acc += r;
        }
        last_masks = Some(set.masks);
    }
    for r in rate_acc.iter_mut() {
        *r /= draws.max(1) as f64;
    }

    // Density maps: the rescaled q per repetition for learned plans, the
    // fixed masks otherwise.
    let maps: Vec<Tensor> = match &psi {
        Some(psi) => {
            let draw = SampleDraw::new(tau, plan.field_len, seed, 0);
            let (_set, q) = nexop_core::sampling::draw_mask_set(&plan, Some(psi), &draw)?;
            field_to_rep_maps(&plan, &q.expect("learned plan yields q"))
        }
        None => plan.fixed_masks.clone(),
    };

    let mut csv = String::from("method,r,contrast,repetition,rate,sigma_u,sigma_v\n");
    for (rep, map) in maps.iter().enumerate() {
        let clipped = map.map(|v| v.clamp(0.0, 1.0));
        let smoothed = smooth_map(&clipped);
        pgm::write_map(&out.join(format!("smoothed_q_rep{}.pgm", rep + 1)), &smoothed)?;
        let (sigma_u, sigma_v) = match normalize_distribution(&smoothed) {
            Ok(pi) => {
                let m = marginal_std(&pi);
                (m.sigma_u, m.sigma_v)
            }
            Err(_) => (0.0, 0.0),
        };
        csv.push_str(&format!(
            "{},{},{},{},{:.9},{:.6},{:.6}\n",
            meta.method,
            plan.r,
            contrast,
            rep + 1,
            rate_acc[rep],
            sigma_u,
            sigma_v
        ));
    }
    fs::write(out.join("analysis.csv"), &csv)?;

    if let Some(masks) = last_masks {
        let acc = accumulate(&masks);
        pgm::write_map(&out.join("accumulation.pgm"), &acc)?;
        nxt::write_real(&out.join("accumulation.nxt"), &acc)?;
        for (rep, m) in masks.iter().enumerate() {
            pgm::write_mask(&out.join(format!("mask_rep{}.pgm", rep + 1)), m)?;
        }
    }

    // Trend report (informational; training-dependent, never asserted).
    let free_rates: Vec<f64> = rate_acc.clone();
    let monotone = free_rates.windows(2).all(|w| w[0] >= w[1] - 1e-12);
    println!(
        "per-NEX rates over {draws} draw(s): {:?} — monotone decreasing: {}",
        free_rates
            .iter()
            .map(|r| (r * 1000.0).round() / 1000.0)
            .collect::<Vec<_>>(),
        if monotone { "yes" } else { "no" }
    );
    println!("analysis written to {}", out.display());
    Ok(())
}

/// Analysis of externally supplied per-repetition maps (NXT q maps or PGM
/// masks), labeled by the caller.
pub fn analyze_files(
    inputs: &[PathBuf],
    out: &Path,
    labels: &AnalyzeLabels,
    acs_h: usize,
    acs_w: usize,
) -> Result<()> {
    if inputs.is_empty() {
        bail!("config error: analyze needs --checkpoint or at least one input file");
    }
    fs::create_dir_all(out)?;
    let mut maps: Vec<Tensor> = Vec::new();
    for path in inputs {
        let map = match path.extension().and_then(|e| e.to_str()) {
            Some("nxt") => nxt::read_real::<Real>(path)?,
            Some("pgm") => pgm::read_mask::<Real>(path)?,
            _ => bail!(
                "config error: unsupported input {} (expected .nxt or .pgm)",
                path.display()
            ),
        };
        maps.push(map);
    }
    let (h, w) = (maps[0].shape()[0], maps[0].shape()[1]);
    let acs = nexop_core::sampling::AcsRegion {
        height: acs_h,
        width: acs_w,
    };
    let mut forced = vec![false; maps.len()];
    if let Some(f) = forced.first_mut() {
        *f = true;
    }
    let binary: Vec<Tensor> = maps
        .iter()
        .map(|m| m.map(|v| if v > 0.5 { 1.0 } else { 0.0 }))
        .collect();
    let rates = per_nex_rates(&binary, acs, &forced);

    let mut csv = String::from("method,r,contrast,repetition,rate,sigma_u,sigma_v\n");
    for (rep, map) in maps.iter().enumerate() {
        let clipped = map.map(|v| v.clamp(0.0, 1.0));
        let smoothed = smooth_map(&clipped);
        pgm::write_map(&out.join(format!("smoothed_q_rep{}.pgm", rep + 1)), &smoothed)?;
        let (sigma_u, sigma_v) = match normalize_distribution(&smoothed) {
            Ok(pi) => {
                let m = marginal_std(&pi);
                (m.sigma_u, m.sigma_v)
            }
            Err(_) => (0.0, 0.0),
        };
        csv.push_str(&format!(
            "{},{},{},{},{:.9},{:.6},{:.6}\n",
            labels.method,
            labels.r,
            labels.contrast,
            rep + 1,
            rates[rep],
            sigma_u,
            sigma_v
        ));
    }
    fs::write(out.join("analysis.csv"), &csv)?;
    let acc = accumulate(&binary);
    pgm::write_map(&out.join("accumulation.pgm"), &acc)?;
    let _ = (h, w);
    println!("analysis written to {}", out.display());
    Ok(())
}

// ── compare ─────────────────────────────────────────────────────────

/// Runs every requested method at the same budget on the same test split
/// with the same evaluation seed; training happens inline (or checkpoints
/// are loaded with --checkpoints).
pub fn compare(
    config_path: &Path,
    out: &Path,
    methods: &[Method],
    checkpoints: Option<&Path>,
    epochs_override: Option<usize>,
) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let splits = load_splits(&cfg)?;
    fs::create_dir_all(out)?;

    let mut summary_rows: Vec<(String, Vec<MetricRow>)> = Vec::new();
    let mut audit = String::from("method,planned_total,target_total,deviation\n");
    let target_total =
        (cfg.data.nex * cfg.data.height * cfg.data.width) as f64 / cfg.plan.r;

    for &method in methods {
        let plan = cfg.method_plan(method)?;
        let (params, psi, outcome): (ReconParams<Real>, Option<Tensor>, Option<TrainOutcome>) =
            match checkpoints {
                Some(root) => {
                    let dir = root.join(method.name());
                    if !dir.join("checkpoint.json").exists() {
                        bail!(
                            "config error: missing checkpoint for {} at {}",
                            method.name(),
                            dir.display()
                        );
                    }
                    let (_plan, params, psi, _meta) = load_checkpoint(&dir)?;
                    (params, psi, None)
                }
                None => {
                    let mut sched = cfg.train_schedule();
                    if let Some(e) = epochs_override {
                        sched.epochs = e;
                    }
                    println!("compare: training {}", method.name());
                    let outcome = joint_train(
                        &plan,
                        cfg.recon_config(),
                        &splits.train,
                        &splits.val,
                        &sched,
                    )?;
                    if outcome.diverged {
                        bail!("numeric failure: {} diverged during compare", method.name());
                    }
                    let dir = out.join(method.name());
                    save_checkpoint(&dir, &plan, cfg.seed, &outcome)?;
                    (outcome.params.clone(), outcome.psi.clone(), Some(outcome))
                }
            };
        let _ = outcome;

        // Budget audit on the plan's deterministic numbers.
        let planned = plan.planned_total();
        audit.push_str(&format!(
            "{},{planned:.3},{target_total:.3},{:.3}\n",
            method.name(),
            (planned - target_total).abs()
        ));

        let rows = evaluate_split(
            &plan,
            &params,
            psi.as_ref(),
            &splits.test,
            cfg.schedule.tau_test,
            cfg.eval.seed,
            cfg.eval.threshold_frac,
            cfg.eval.mask_draws,
        )?;
        write_per_image_csv(&out.join(format!("per_image_{}.csv", method.name())), &rows)?;
        summary_rows.push((method.name().to_string(), rows));
    }

    write_summary_csv(&out.join("summary.csv"), &summary_rows)?;
    // Bar-chart data: one file per metric.
    for (metric, pick) in [
        ("psnr", 0usize),
        ("ssim", 1),
        ("fsim", 2),
    ] {
        let mut bar = String::from("method,mean,std\n");
        for (name, rows) in &summary_rows {
            let vals: Vec<f64> = rows
                .iter()
                .map(|r| match pick {
                    0 => r.psnr,
                    1 => r.ssim,
                    _ => r.fsim,
                })
                .collect();
            let (m, s) = mean_std(&vals);
            bar.push_str(&format!("{name},{m:.9},{s:.9}\n"));
        }
        fs::write(out.join(format!("bar_{metric}.csv")), bar)?;
    }
    fs::write(out.join("audit.csv"), audit)?;
    println!("comparison written to {}", out.display());
    Ok(())
}

// ── smoke ───────────────────────────────────────────────────────────

/// End-to-end pipeline on a 16×16 instance with every invariant check on:
/// gen-data → train 2 epochs → eval → analyze.
pub fn smoke(out: &Path) -> Result<()> {
    let started = std::time::Instant::now();
    fs::create_dir_all(out)?;
    let data_dir = out.join("data");
    gen_data(&data_dir, 16, 16, 3, 0.1, 6, 2, 2, 7, 4, 9, true)?;

    let config = format!(
        r#"seed = 7
output_dir = "{}"

[data]
path = "{}"
height = 16
width = 16
nex = 3
sigma = 0.1
train = 6
val = 2
test = 2

[plan]
method = "nexop"
r = 4.0
acs_height = 4
acs_width = 4

[recon]
steps = 2
hidden = 4
cg_iters = 4
cg_tol = 1e-6
shared_weights = true
normalize = false

[schedule]
epochs = 2
batch_size = 2
lr_theta = 1e-4
lr_psi = 5e-3
lr_half_every = 14
tau0 = 1.0
tau_decay = 0.95
tau_floor = 0.1
tau_test = 0.5
clip_theta = 1.0
clip_psi = 1.0
debug_checks = true

[eval]
seed = 99
threshold_frac = 0.1
mask_draws = 1
"#,
        out.display(),
        data_dir.display()
    );
    let config_path = out.join("smoke.toml");
    fs::write(&config_path, config)?;

    let ckpt = train(&config_path, None)?;
    eval_cmd(&ckpt, &data_dir, "test", &out.join("eval"), 0.1, 99, 0.5, 1)?;
    analyze_checkpoint(&ckpt, &out.join("analysis"), 4, 0.5, 11, "synthetic")?;

    let elapsed = started.elapsed();
    println!("smoke pipeline completed in {:.1}s", elapsed.as_secs_f64());
    if elapsed.as_secs() > 300 {
        bail!("numeric failure: smoke exceeded the 5 minute budget");
    }
    Ok(())
}
