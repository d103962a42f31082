//! Integration tests driving the `nexop` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nexop"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("nexop_cli_{name}"));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, method: &str, r: f64, epochs: usize, extra_data: &str) -> PathBuf {
    let cfg = format!(
        r#"seed = 5
output_dir = "{out}"

[data]
{extra_data}height = 16
width = 16
nex = 3
sigma = 0.1
train = 4
val = 2
test = 2

[plan]
method = "{method}"
r = {r}
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
epochs = {epochs}
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
seed = 42
threshold_frac = 0.1
mask_draws = 1
"#,
        out = dir.display()
    );
    let path = dir.join("run.toml");
    fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn smoke_pipeline_exits_zero_within_budget() {
    let dir = tmp("smoke");
    let started = std::time::Instant::now();
    let out = bin().args(["smoke", "--out"]).arg(&dir).output().unwrap();
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(started.elapsed().as_secs() < 300, "smoke exceeded 5 minutes");
    assert!(dir.join("eval/summary.csv").exists());
    assert!(dir.join("analysis/analysis.csv").exists());
}

#[test]
fn infeasible_budget_is_a_config_error_naming_the_constraint() {
    let dir = tmp("badbudget");
    // loupe1 at R < NEX cannot place NEX·D/R samples in one repetition.
    let cfg = write_config(&dir, "loupe1", 1.5, 1, "");
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "expected config exit code");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("exceeds") || stderr.contains("budget"),
        "constraint not named: {stderr}"
    );
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tmp("unknownkey");
    let cfg = write_config(&dir, "nexop", 4.0, 1, "bogus_key = 3\n");
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bogus_key") || stderr.contains("unknown"), "{stderr}");
}

#[test]
fn r_equal_one_warns_and_proceeds() {
    let dir = tmp("noaccel");
    let cfg = write_config(&dir, "nexop", 1.0, 1, "");
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        out.status.success(),
        "should proceed at R = 1: {stderr}"
    );
    assert!(stderr.contains("no acceleration"), "missing warning: {stderr}");
}

#[test]
fn gen_data_is_bit_reproducible() {
    let a = tmp("gen_a");
    let b = tmp("gen_b");
    for dir in [&a, &b] {
        let out = bin()
            .args([
                "gen-data",
                "--height",
                "8",
                "--width",
                "8",
                "--nex",
                "2",
                "--sigma",
                "0.1",
                "--train",
                "2",
                "--val",
                "1",
                "--test",
                "1",
                "--seed",
                "3",
                "--out",
            ])
            .arg(dir)
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        let fa = fs::read(a.join(&name)).unwrap();
        let fb = fs::read(b.join(&name)).unwrap();
        assert_eq!(fa, fb, "artifact {name:?} not reproducible");
    }
}

#[test]
fn draw_masks_emits_p5_and_q_tensor() {
    let dir = tmp("drawmasks");
    let cfg = write_config(&dir, "nexop", 4.0, 1, "");
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let masks_dir = dir.join("masks");
    let out = bin()
        .args(["draw-masks", "--draws", "2", "--checkpoint"])
        .arg(dir.join("nexop"))
        .arg("--out")
        .arg(&masks_dir)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for rep in 1..=3 {
        let pgm = fs::read(masks_dir.join(format!("draw000_mask_rep{rep}.pgm"))).unwrap();
        assert!(pgm.starts_with(b"P5\n"), "not a binary PGM");
    }
    let q = nexop_core::nxt::read_real::<f64>(&masks_dir.join("q.nxt")).unwrap();
    assert_eq!(q.len(), 3 * 256 - 16);

    // Re-drawing with the same seed is bit-identical.
    let masks_dir2 = dir.join("masks2");
    bin()
        .args(["draw-masks", "--draws", "2", "--checkpoint"])
        .arg(dir.join("nexop"))
        .arg("--out")
        .arg(&masks_dir2)
        .output()
        .unwrap();
    let a = fs::read(masks_dir.join("draw001_mask_rep1.pgm")).unwrap();
    let b = fs::read(masks_dir2.join("draw001_mask_rep1.pgm")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn compare_identical_plans_produce_identical_rows() {
    let dir = tmp("cmp_ident");
    let cfg = write_config(&dir, "vd1", 4.0, 1, "");
    let out_dir = dir.join("cmp");
    let out = bin()
        .args(["compare", "--methods", "vd1,vd1", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary = fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0], rows[1], "identical plans must give identical rows");
}

#[test]
fn compare_all_methods_emits_full_aggregate_grid_and_audit() {
    let dir = tmp("cmp_all");
    let cfg = write_config(&dir, "nexop", 4.0, 1, "");
    let out_dir = dir.join("cmp");
    let out = bin()
        .args(["compare", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary = fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    let header = lines.next().unwrap();
    assert_eq!(
        header,
        "method,n,psnr_mean,psnr_std,ssim_mean,ssim_std,fsim_mean,fsim_std"
    );
    let rows: Vec<&str> = lines.collect();
    // Six methods × three aggregate metrics (mean cells).
    assert_eq!(rows.len(), 6);
    for row in &rows {
        assert_eq!(row.split(',').count(), 8);
    }

    // Equal-budget audit: every method within NEX of NEX·D/R.
    let audit = fs::read_to_string(out_dir.join("audit.csv")).unwrap();
    for line in audit.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let deviation: f64 = cols[3].parse().unwrap();
        assert!(deviation <= 3.0 + 0.5, "audit violation: {line}");
    }
    for metric in ["psnr", "ssim", "fsim"] {
        assert!(out_dir.join(format!("bar_{metric}.csv")).exists());
    }
}

#[test]
fn analyze_accepts_external_pgm_masks() {
    let dir = tmp("analyze_ext");
    // Hand-built masks via the pgm writer.
    let mut m1 = nexop_core::Tensor::zeros(&[16, 16]);
    let acs = nexop_core::sampling::AcsRegion {
        height: 4,
        width: 4,
    };
    for idx in acs.flat_indices(16, 16) {
        m1.data_mut()[idx] = 1.0;
    }
    for c in 0..8 {
        m1.set(0, c, 1.0);
    }
    let m2 = nexop_core::Tensor::filled(&[16, 16], 1.0);
    nexop_core::pgm::write_mask(&dir.join("m1.pgm"), &m1).unwrap();
    nexop_core::pgm::write_mask(&dir.join("m2.pgm"), &m2).unwrap();

    let out_dir = dir.join("out");
    let out = bin()
        .args(["analyze", "--method-label", "handmade", "--r-label", "2.0"])
        .arg("--input")
        .arg(dir.join("m1.pgm"))
        .arg("--input")
        .arg(dir.join("m2.pgm"))
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(out_dir.join("analysis.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    // Free rates: rep1 has 8 free samples (ACS excluded), rep2 is full.
    let r1: f64 = rows[0].split(',').nth(4).unwrap().parse().unwrap();
    let r2: f64 = rows[1].split(',').nth(4).unwrap().parse().unwrap();
    assert!((r1 - 8.0 / 256.0).abs() < 1e-12);
    assert!((r2 - 1.0).abs() < 1e-12);
    assert!(out_dir.join("accumulation.pgm").exists());
}

#[test]
fn missing_checkpoint_for_compare_is_config_error() {
    let dir = tmp("cmp_missing");
    let cfg = write_config(&dir, "nexop", 4.0, 1, "");
    let out = bin()
        .args(["compare", "--methods", "vd1", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("cmp"))
        .arg("--checkpoints")
        .arg(dir.join("nonexistent"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing checkpoint"));
}
