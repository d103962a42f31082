//! Synthetic dataset generation: complex-valued brain-like phantoms (random
//! ellipses with a fine texture overlay and a smooth polynomial phase),
//! multi-NEX noisy replication in k-space, subject-style splits, and
//! round-trip serialization.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::fft::{fft2c, ifft2c};
use crate::forward::NoiseModel;
use crate::nxt;
use crate::rng;
use crate::{Image, Real, Tensor};

/// Phantom geometry and randomness controls.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub h: usize,
    pub w: usize,
    pub ellipse_min: usize,
    pub ellipse_max: usize,
    /// High-frequency texture overlay; without it all variable-density
    /// schemes are near-equivalent and sampling optimization has nothing to
    /// exploit.
    pub texture: bool,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn new(h: usize, w: usize, seed: u64) -> Self {
        PhantomSpec {
            h,
            w,
            ellipse_min: 4,
            ellipse_max: 9,
            texture: true,
            seed,
        }
    }
}

/// Sum of randomized ellipses (magnitude) times a smooth phase field.
/// Deterministic per seed; magnitude lands in [0, 1].
pub fn generate_phantom(spec: &PhantomSpec) -> Image {
    let (h, w) = (spec.h, spec.w);
    let mut r = rng::stream(spec.seed, 0x9a17);
    let count = if spec.ellipse_max > spec.ellipse_min {
        spec.ellipse_min + (r.random::<u64>() as usize) % (spec.ellipse_max - spec.ellipse_min + 1)
    } else {
        spec.ellipse_min
    };

    let mut mag = Tensor::zeros(&[h, w]);
    let min_dim = h.min(w) as f64;
    for _ in 0..count {
        let cx = (0.25 + 0.5 * r.random::<f64>()) * h as f64;
        let cy = (0.25 + 0.5 * r.random::<f64>()) * w as f64;
        let a = (0.08 + 0.30 * r.random::<f64>()) * min_dim;
        let b = (0.08 + 0.30 * r.random::<f64>()) * min_dim;
        let theta = std::f64::consts::PI * r.random::<f64>();
        let intensity = -0.35 + 1.15 * r.random::<f64>();
        let (ct, st) = (theta.cos(), theta.sin());
        for row in 0..h {
            for col in 0..w {
                let dx = row as f64 - cx;
                let dy = col as f64 - cy;
                let u = (dx * ct + dy * st) / a;
                let v = (-dx * st + dy * ct) / b;
                if u * u + v * v <= 1.0 {
                    let cur = mag.at(row, col);
                    mag.set(row, col, cur + intensity);
                }
            }
        }
    }
    for v in mag.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }

    if spec.texture {
        // Band-limited sinusoid mixture over the anatomy support only; the
        // mid-to-high spatial frequencies give the sampling optimization
        // spectral structure to exploit.
        let n_waves = 12;
        let waves: Vec<(f64, f64, f64, f64)> = (0..n_waves)
            .map(|_| {
                let fu = 3.0 + r.random::<f64>() * (h as f64 / 2.2 - 3.0);
                let fv = 3.0 + r.random::<f64>() * (w as f64 / 2.2 - 3.0);
                let phase = r.random::<f64>() * std::f64::consts::TAU;
                let amp = 0.04 + 0.08 * r.random::<f64>();
                (fu, fv, phase, amp)
            })
            .collect();
        for row in 0..h {
            for col in 0..w {
                let base = mag.at(row, col);
                if base <= 0.05 {
                    continue;
                }
                let mut tex = 0.0;
                for &(fu, fv, phase, amp) in &waves {
                    tex += amp
                        * (std::f64::consts::TAU
                            * (fu * row as f64 / h as f64 + fv * col as f64 / w as f64)
                            + phase)
                            .cos();
                }
                mag.set(row, col, (base + tex).max(0.0));
            }
        }
    }

    let peak = mag.max_value();
    if peak > 1.0 {
        let inv = 1.0 / peak;
        for v in mag.data_mut() {
            *v *= inv;
        }
    }

    // Smooth low-order polynomial phase over the anatomy support.
    let coeff: Vec<f64> = (0..6).map(|_| -1.5 + 3.0 * r.random::<f64>()).collect();
    let mut img = Image::zeros(h, w);
    for row in 0..h {
        for col in 0..w {
            let m = mag.at(row, col);
            if m == 0.0 {
                continue;
            }
            let u = (row as f64 - h as f64 / 2.0) / h as f64;
            let v = (col as f64 - w as f64 / 2.0) / w as f64;
            let phase = coeff[0]
                + coeff[1] * u
                + coeff[2] * v
                + coeff[3] * u * u
                + coeff[4] * u * v
                + coeff[5] * v * v;
            img.set(row, col, m * phase.cos(), m * phase.sin());
        }
    }
    img
}

/// One training example: fully sampled noisy k-space per repetition and the
/// magnitude-mean target.
#[derive(Clone, Debug)]
pub struct Example {
    pub y_full: Vec<Image>,
    pub target: Tensor,
}

impl Example {
    pub fn h(&self) -> usize {
        self.y_full[0].height()
    }

    pub fn w(&self) -> usize {
        self.y_full[0].width()
    }
}

/// Fully sampled multi-NEX measurement of one phantom: yₙ = F(x) + εₙ with
/// independent noise per repetition; x_target = (1/NEX)·Σ|F⁻¹(yₙ)|.
pub fn make_multinex(x: &Image, sigma: f64, nex: usize, noise_seed: u64) -> Example {
    let (h, w) = (x.height(), x.width());
    let k = fft2c(x);
    let noise = NoiseModel {
        sigma,
        seed: noise_seed,
    };
    let mut y_full = Vec::with_capacity(nex);
    let mut target = Tensor::zeros(&[h, w]);
    for rep in 0..nex {
        let y = k.add(&noise.sample::<Real>(h, w, rep, 0));
        let xn = ifft2c(&y).magnitude();
        for (t, &v) in target.data_mut().iter_mut().zip(xn.data()) {
            *t += v;
        }
        y_full.push(y);
    }
    let inv = 1.0 / nex as f64;
    for t in target.data_mut() {
        *t *= inv;
    }
    Example { y_full, target }
}

/// One dataset entry: everything needed to regenerate the example.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub id: usize,
    pub phantom_seed: u64,
    pub noise_seed: u64,
}

/// Split lists plus the generation parameters; the dataset regenerates
/// bit-identically from this manifest alone.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub h: usize,
    pub w: usize,
    pub nex: usize,
    pub sigma: f64,
    pub ellipse_min: usize,
    pub ellipse_max: usize,
    pub texture: bool,
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Seeds are disjoint across splits by construction; verified here.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(e.phantom_seed) {
                return Err(CoreError::Config(format!(
                    "duplicate phantom seed {} across splits",
                    e.phantom_seed
                )));
            }
        }
        Ok(())
    }

    fn spec_for(&self, entry: &ManifestEntry) -> PhantomSpec {
        PhantomSpec {
            h: self.h,
            w: self.w,
            ellipse_min: self.ellipse_min,
            ellipse_max: self.ellipse_max,
            texture: self.texture,
            seed: entry.phantom_seed,
        }
    }

    /// Regenerates one example from its manifest entry.
    pub fn regenerate(&self, entry: &ManifestEntry) -> Example {
        let x = generate_phantom(&self.spec_for(entry));
        make_multinex(&x, self.sigma, self.nex, entry.noise_seed)
    }

    pub fn regenerate_split(&self, entries: &[ManifestEntry]) -> Vec<Example> {
        entries.iter().map(|e| self.regenerate(e)).collect()
    }
}

/// Builds a manifest with subject-disjoint splits (subject-wise train/val/
/// test discipline at desk scale, e.g. 64/12/16).
#[allow(clippy::too_many_arguments)]
pub fn build_manifest(
    h: usize,
    w: usize,
    nex: usize,
    sigma: f64,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
) -> DatasetManifest {
    build_manifest_with(h, w, nex, sigma, n_train, n_val, n_test, seed, 4, 9, true)
}

/// [`build_manifest`] with explicit phantom-shape controls.
#[allow(clippy::too_many_arguments)]
pub fn build_manifest_with(
    h: usize,
    w: usize,
    nex: usize,
    sigma: f64,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
    ellipse_min: usize,
    ellipse_max: usize,
    texture: bool,
) -> DatasetManifest {
    let entry = |split_base: u64, i: usize| ManifestEntry {
        id: i,
        phantom_seed: seed
            .wrapping_mul(0x1000)
            .wrapping_add(split_base + i as u64),
        noise_seed: seed
            .wrapping_mul(0x2000)
            .wrapping_add(split_base + i as u64),
    };
    DatasetManifest {
        h,
        w,
        nex,
        sigma,
        ellipse_min,
        ellipse_max,
        texture,
        train: (0..n_train).map(|i| entry(0, i)).collect(),
        val: (0..n_val).map(|i| entry(100_000, i)).collect(),
        test: (0..n_test).map(|i| entry(200_000, i)).collect(),
    }
}

fn example_paths(dir: &Path, split: &str, entry: &ManifestEntry, nex: usize) -> Vec<std::path::PathBuf> {
    let mut paths: Vec<std::path::PathBuf> = (0..nex)
        .map(|rep| dir.join(format!("{split}_{:04}_rep{rep}.nxt", entry.id)))
        .collect();
    paths.push(dir.join(format!("{split}_{:04}_target.nxt", entry.id)));
    paths
}

/// Writes manifest + NXT files for every example of every split.
pub fn write_dataset(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(manifest)?;
    fs::write(dir.join("manifest.json"), json)?;
    for (split, entries) in [
        ("train", &manifest.train),
        ("val", &manifest.val),
        ("test", &manifest.test),
    ] {
        for entry in entries.iter() {
            let ex = manifest.regenerate(entry);
            let paths = example_paths(dir, split, entry, manifest.nex);
            for (rep, y) in ex.y_full.iter().enumerate() {
                nxt::write_complex(&paths[rep], y)?;
            }
            nxt::write_real(paths.last().unwrap(), &ex.target)?;
        }
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let raw = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: DatasetManifest = serde_json::from_str(&raw)?;
    manifest.validate()?;
    Ok(manifest)
}

/// Loads one split back from disk.
pub fn read_split(dir: &Path, manifest: &DatasetManifest, split: &str) -> Result<Vec<Example>> {
    let entries = match split {
        "train" => &manifest.train,
        "val" => &manifest.val,
        "test" => &manifest.test,
        other => return Err(CoreError::Config(format!("unknown split {other}"))),
    };
    let mut out = Vec::with_capacity(entries.len());
    for entry in entries {
        let paths = example_paths(dir, split, entry, manifest.nex);
        let mut y_full = Vec::with_capacity(manifest.nex);
        for path in &paths[..manifest.nex] {
            y_full.push(nxt::read_complex::<Real>(path)?);
        }
        let target = nxt::read_real::<Real>(paths.last().unwrap())?;
        out.push(Example { y_full, target });
    }
    Ok(out)
}
