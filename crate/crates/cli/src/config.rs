//! Run configuration: TOML file with [data], [plan], [recon], [schedule] and
//! [eval] sections. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nexop_core::recon::ReconConfig;
use nexop_core::sampling::{baseline_mask_plan, AcsRegion, MaskPlan, Method};
use nexop_core::train::TrainSchedule;
use nexop_core::Real;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub plan: PlanSection,
    #[serde(default)]
    pub recon: ReconSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Directory produced by `gen-data`. When absent the dataset is
    /// regenerated in memory from the fields below.
    #[serde(default)]
    pub path: Option<PathBuf>,
    pub height: usize,
    pub width: usize,
    pub nex: usize,
    pub sigma: f64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    pub method: String,
    pub r: f64,
    pub acs_height: usize,
    pub acs_width: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconSection {
    pub steps: usize,
    pub hidden: usize,
    pub cg_iters: usize,
    pub cg_tol: f64,
    pub shared_weights: bool,
    pub normalize: bool,
}

impl Default for ReconSection {
    fn default() -> Self {
        ReconSection {
            steps: 3,
            hidden: 16,
            cg_iters: 8,
            cg_tol: 1e-6,
            shared_weights: true,
            normalize: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
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
    pub debug_checks: bool,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let d = TrainSchedule::default();
        ScheduleSection {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr_theta: d.lr_theta,
            lr_psi: d.lr_psi,
            lr_half_every: d.lr_half_every,
            tau0: d.tau0,
            tau_decay: d.tau_decay,
            tau_floor: d.tau_floor,
            tau_test: d.tau_test,
            clip_theta: d.clip_theta,
            clip_psi: d.clip_psi,
            debug_checks: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub seed: u64,
    pub threshold_frac: f64,
    pub mask_draws: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            seed: 1234,
            threshold_frac: 0.1,
            mask_draws: 1,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let raw = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&raw).context("parsing config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Full validation before any compute.
    pub fn validate(&self) -> Result<()> {
        if Method::parse(&self.plan.method).is_none() {
            bail!(
                "config error: unknown method \"{}\" (expected one of {})",
                self.plan.method,
                Method::ALL
                    .iter()
                    .map(|m| m.name())
                    .collect::<Vec<_>>()
                    .join(", ")
            );
        }
        if self.plan.r < 1.0 {
            bail!("config error: acceleration r = {} must be >= 1", self.plan.r);
        }
        if (self.plan.r - 1.0).abs() < f64::EPSILON {
            eprintln!("warning: r = 1 gives no acceleration; proceeding");
        }
        if self.data.train == 0 || self.data.val == 0 {
            bail!("config error: train and val splits must be nonempty");
        }
        if self.schedule.batch_size == 0 || self.schedule.epochs == 0 {
            bail!("config error: epochs and batch_size must be positive");
        }
        // Budget feasibility is validated by the plan constructor so the
        // error names the violated constraint.
        self.method_plan(self.method())?;
        Ok(())
    }

    pub fn method(&self) -> Method {
        Method::parse(&self.plan.method).expect("validated")
    }

    /// Plan for an arbitrary method at this config's budget (compare runs
    /// all six on one config).
    pub fn method_plan(&self, method: Method) -> Result<MaskPlan<Real>> {
        Ok(baseline_mask_plan::<Real>(
            method,
            self.plan.r,
            self.data.height,
            self.data.width,
            self.data.nex,
            AcsRegion {
                height: self.plan.acs_height,
                width: self.plan.acs_width,
            },
            self.seed,
        )?)
    }

    pub fn recon_config(&self) -> ReconConfig {
        ReconConfig {
            nex: self.data.nex,
            h: self.data.height,
            w: self.data.width,
            steps: self.recon.steps,
            hidden: self.recon.hidden,
            cg_iters: self.recon.cg_iters,
            cg_tol: self.recon.cg_tol,
            shared_weights: self.recon.shared_weights,
            normalize: self.recon.normalize,
        }
    }

    pub fn train_schedule(&self) -> TrainSchedule {
        TrainSchedule {
            epochs: self.schedule.epochs,
            batch_size: self.schedule.batch_size,
            lr_theta: self.schedule.lr_theta,
            lr_psi: self.schedule.lr_psi,
            lr_half_every: self.schedule.lr_half_every,
            tau0: self.schedule.tau0,
            tau_decay: self.schedule.tau_decay,
            tau_floor: self.schedule.tau_floor,
            tau_test: self.schedule.tau_test,
            clip_theta: self.schedule.clip_theta,
            clip_psi: self.schedule.clip_psi,
            seed: self.seed,
            debug_checks: self.schedule.debug_checks,
        }
    }
}
