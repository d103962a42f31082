//! PSNR, SSIM and FSIM restricted to an automatically derived anatomy ROI.
//!
//! The ROI comes from intensity thresholding followed by binary closing
//! (3×3 structuring element, 2 iterations) and hole filling. Both images are
//! multiplied by the ROI before SSIM/FSIM so that background pixels cannot
//! influence any metric (FSIM's phase congruency is otherwise globally
//! coupled through the FFT).

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::RealTensor;

/// Binary anatomy mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoiMask {
    pub h: usize,
    pub w: usize,
    pub mask: Vec<bool>,
}

impl RoiMask {
    pub fn all(h: usize, w: usize) -> Self {
        RoiMask {
            h,
            w,
            mask: vec![true; h * w],
        }
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        self.mask[r * self.w + c]
    }
}

fn dilate(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            'scan: for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let rr = r as i64 + dr;
                    let cc = c as i64 + dc;
                    if rr >= 0
                        && rr < h as i64
                        && cc >= 0
                        && cc < w as i64
                        && mask[rr as usize * w + cc as usize]
                    {
                        out[r * w + c] = true;
                        break 'scan;
                    }
                }
            }
        }
    }
    out
}

fn erode(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    // Outside the grid counts as foreground so borders are not eaten.
    let mut out = vec![true; h * w];
    for r in 0..h {
        for c in 0..w {
            'scan: for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let rr = r as i64 + dr;
                    let cc = c as i64 + dc;
                    if rr >= 0
                        && rr < h as i64
                        && cc >= 0
                        && cc < w as i64
                        && !mask[rr as usize * w + cc as usize]
                    {
                        out[r * w + c] = false;
                        break 'scan;
                    }
                }
            }
        }
    }
    out
}

fn fill_holes(mask: &mut [bool], h: usize, w: usize) {
    // Flood the background from the borders (4-connectivity); complement
    // pixels never reached are holes.
    let mut reached = vec![false; h * w];
    let mut stack = Vec::new();
    for r in 0..h {
        for c in [0, w - 1] {
            if !mask[r * w + c] && !reached[r * w + c] {
                reached[r * w + c] = true;
                stack.push((r, c));
            }
        }
    }
    for c in 0..w {
        for r in [0, h - 1] {
            if !mask[r * w + c] && !reached[r * w + c] {
                reached[r * w + c] = true;
                stack.push((r, c));
            }
        }
    }
    while let Some((r, c)) = stack.pop() {
        let neighbors = [
            (r.wrapping_sub(1), c),
            (r + 1, c),
            (r, c.wrapping_sub(1)),
            (r, c + 1),
        ];
        for (rr, cc) in neighbors {
            if rr < h && cc < w && !mask[rr * w + cc] && !reached[rr * w + cc] {
                reached[rr * w + cc] = true;
                stack.push((rr, cc));
            }
        }
    }
    for k in 0..h * w {
        if !mask[k] && !reached[k] {
            mask[k] = true;
        }
    }
}

/// Threshold at `threshold_frac`·max, close (3×3, 2 iterations), fill holes.
pub fn roi_mask<T: Scalar>(img: &RealTensor<T>, threshold_frac: f64) -> Result<RoiMask> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let peak = img.max_value();
    let thr = peak * T::of(threshold_frac);
    let mut mask: Vec<bool> = img.data().iter().map(|&v| v > thr).collect();
    if mask.iter().all(|&b| !b) {
        // A strictly positive constant image thresholds to nothing under
        // v > frac·max; treat it as all-anatomy. All-zero stays empty.
        if peak > T::zero() && img.data().iter().all(|&v| v == peak) {
            mask = vec![true; h * w];
        } else {
            return Err(CoreError::EmptyRoi);
        }
    }
    for _ in 0..2 {
        mask = dilate(&mask, h, w);
    }
    for _ in 0..2 {
        mask = erode(&mask, h, w);
    }
    fill_holes(&mut mask, h, w);
    if mask.iter().all(|&b| !b) {
        return Err(CoreError::EmptyRoi);
    }
    Ok(RoiMask { h, w, mask })
}

/// 10·log₁₀(peak²/MSE) over the ROI; identical inputs cap at 100 dB.
/// The peak comes from the reference (PSNR is not symmetric, by convention).
pub fn psnr<T: Scalar>(reference: &RealTensor<T>, test: &RealTensor<T>, roi: &RoiMask) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut mse = 0.0;
    let mut n = 0.0;
    for k in 0..reference.len() {
        if roi.mask[k] {
            let r = reference.data()[k].to_f64_lossy();
            let t = test.data()[k].to_f64_lossy();
            peak = peak.max(r);
            let d = r - t;
            mse += d * d;
            n += 1.0;
        }
    }
    mse /= n;
    if mse == 0.0 {
        return 100.0;
    }
    (10.0 * (peak * peak / mse).log10()).min(100.0)
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let r = (i / size) as f64 - half;
            let c = (i % size) as f64 - half;
            (-(r * r + c * c) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// SSIM with the dynamic range taken from the reference over the ROI.
pub fn ssim<T: Scalar>(reference: &RealTensor<T>, test: &RealTensor<T>, roi: &RoiMask) -> f64 {
    let mut peak = 0.0f64;
    for k in 0..reference.len() {
        if roi.mask[k] {
            peak = peak.max(reference.data()[k].to_f64_lossy());
        }
    }
    ssim_with_range(reference, test, roi, peak)
}

/// SSIM at an explicit dynamic range L: 11×11 Gaussian window (σ = 1.5),
/// K₁ = 0.01, K₂ = 0.03; mean over windows centered inside the ROI. Windows
/// clipped at image borders are renormalized. Symmetric in the two image
/// arguments for fixed L.
pub fn ssim_with_range<T: Scalar>(
    reference: &RealTensor<T>,
    test: &RealTensor<T>,
    roi: &RoiMask,
    l: f64,
) -> f64 {
    let (h, w) = (roi.h, roi.w);
    let size = 11usize;
    let half = 5i64;
    let kernel = gaussian_kernel(size, 1.5);
    let c1 = (0.01 * l) * (0.01 * l);
    let c2 = (0.03 * l) * (0.03 * l);

    // Background zeroed so it cannot leak into windows.
    let ref_m: Vec<f64> = (0..h * w)
        .map(|k| {
            if roi.mask[k] {
                reference.data()[k].to_f64_lossy()
            } else {
                0.0
            }
        })
        .collect();
    let tst_m: Vec<f64> = (0..h * w)
        .map(|k| {
            if roi.mask[k] {
                test.data()[k].to_f64_lossy()
            } else {
                0.0
            }
        })
        .collect();

    let mut acc = 0.0;
    let mut count = 0.0;
    for r in 0..h {
        for c in 0..w {
            if !roi.mask[r * w + c] {
                continue;
            }
            let mut wsum = 0.0;
            let mut mx = 0.0;
            let mut my = 0.0;
            let mut mxx = 0.0;
            let mut myy = 0.0;
            let mut mxy = 0.0;
            for dr in -half..=half {
                let rr = r as i64 + dr;
                if rr < 0 || rr >= h as i64 {
                    continue;
                }
                for dc in -half..=half {
                    let cc = c as i64 + dc;
                    if cc < 0 || cc >= w as i64 {
                        continue;
                    }
                    let kv = kernel[(dr + half) as usize * size + (dc + half) as usize];
                    let x = ref_m[rr as usize * w + cc as usize];
                    let y = tst_m[rr as usize * w + cc as usize];
                    wsum += kv;
                    mx += kv * x;
                    my += kv * y;
                    mxx += kv * x * x;
                    myy += kv * y * y;
                    mxy += kv * x * y;
                }
            }
            mx /= wsum;
            my /= wsum;
            let sx = (mxx / wsum - mx * mx).max(0.0);
            let sy = (myy / wsum - my * my).max(0.0);
            let sxy = mxy / wsum - mx * my;
            let val = ((2.0 * mx * my + c1) * (2.0 * sxy + c2))
                / ((mx * mx + my * my + c1) * (sx + sy + c2));
            acc += val;
            count += 1.0;
        }
    }
    acc / count
}

// ── FSIM ────────────────────────────────────────────────────────────

const FSIM_T1: f64 = 0.85;
const FSIM_T2: f64 = 160.0;
const PC_NSCALE: usize = 4;
const PC_NORIENT: usize = 4;
const PC_MIN_WAVELENGTH: f64 = 6.0;
const PC_MULT: f64 = 2.0;
const PC_SIGMA_ONF: f64 = 0.55;
const PC_DTHETA_ON_SIGMA: f64 = 1.2;
const PC_K: f64 = 2.0;
const PC_CUTOFF: f64 = 0.5;
const PC_G: f64 = 10.0;
const PC_EPS: f64 = 1e-4;

/// Phase congruency over a log-Gabor bank (4 scales × 4 orientations, the
/// original constants): per orientation, the noise-compensated,
/// spread-weighted local energy normalized by the summed filter amplitudes.
fn phase_congruency(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut re = img.to_vec();
    let mut im = vec![0.0f64; h * w];
    crate::fft::fft2c_inplace(&mut re, &mut im, h, w, false);

    // Centered frequency coordinates.
    let mut radius = vec![0.0f64; h * w];
    let mut theta = vec![0.0f64; h * w];
    for r in 0..h {
        for c in 0..w {
            let fr = (r as f64 - (h / 2) as f64) / h as f64;
            let fc = (c as f64 - (w / 2) as f64) / w as f64;
            let k = r * w + c;
            radius[k] = (fr * fr + fc * fc).sqrt();
            theta[k] = (-fr).atan2(fc);
        }
    }
    radius[(h / 2) * w + w / 2] = 1.0; // keep log(f) finite at DC

    let sigma_theta = (std::f64::consts::PI / PC_NORIENT as f64) / PC_DTHETA_ON_SIGMA;
    let log_sigma = PC_SIGMA_ONF.ln();

    let mut pc_num = vec![0.0f64; h * w];
    let mut pc_den = vec![PC_EPS; h * w];

    for o in 0..PC_NORIENT {
        let angle = o as f64 * std::f64::consts::PI / PC_NORIENT as f64;
        let (sa, ca) = angle.sin_cos();
        let spread: Vec<f64> = (0..h * w)
            .map(|k| {
                let (st, ct) = theta[k].sin_cos();
                let ds = st * ca - ct * sa;
                let dc = ct * ca + st * sa;
                let dtheta = ds.atan2(dc).abs();
                (-dtheta * dtheta / (2.0 * sigma_theta * sigma_theta)).exp()
            })
            .collect();

        let mut sum_e = vec![0.0f64; h * w];
        let mut sum_o = vec![0.0f64; h * w];
        let mut sum_an = vec![0.0f64; h * w];
        let mut max_an = vec![0.0f64; h * w];
        let mut e_resp: Vec<Vec<f64>> = Vec::with_capacity(PC_NSCALE);
        let mut o_resp: Vec<Vec<f64>> = Vec::with_capacity(PC_NSCALE);
        let mut a_scale1 = vec![0.0f64; h * w];

        for s in 0..PC_NSCALE {
            let wavelength = PC_MIN_WAVELENGTH * PC_MULT.powi(s as i32);
            let f0 = 1.0 / wavelength;
            let mut fr_ = vec![0.0f64; h * w];
            let mut fi_ = vec![0.0f64; h * w];
            for k in 0..h * w {
                let lr = (radius[k] / f0).ln();
                let mut g = (-lr * lr / (2.0 * log_sigma * log_sigma)).exp();
                if k == (h / 2) * w + w / 2 {
                    g = 0.0;
                }
                let filt = g * spread[k];
                fr_[k] = re[k] * filt;
                fi_[k] = im[k] * filt;
            }
            crate::fft::fft2c_inplace(&mut fr_, &mut fi_, h, w, true);
            for k in 0..h * w {
                let a = (fr_[k] * fr_[k] + fi_[k] * fi_[k]).sqrt();
                sum_e[k] += fr_[k];
                sum_o[k] += fi_[k];
                sum_an[k] += a;
                if a > max_an[k] {
                    max_an[k] = a;
                }
                if s == 0 {
                    a_scale1[k] = a;
                }
            }
            e_resp.push(fr_);
            o_resp.push(fi_);
        }

        // Local energy relative to the mean phase.
        let mut energy = vec![0.0f64; h * w];
        for k in 0..h * w {
            let xe = (sum_e[k] * sum_e[k] + sum_o[k] * sum_o[k]).sqrt() + PC_EPS;
            let me = sum_e[k] / xe;
            let mo = sum_o[k] / xe;
            let mut acc = 0.0;
            for s in 0..PC_NSCALE {
                let e = e_resp[s][k];
                let od = o_resp[s][k];
                acc += e * me + od * mo - (e * mo - od * me).abs();
            }
            energy[k] = acc;
        }

        // Rayleigh noise threshold from the smallest-scale amplitudes.
        let mut sorted = a_scale1.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = sorted[sorted.len() / 2];
        let tau = median / (4.0f64.ln()).sqrt();
        let total_tau =
            tau * (1.0 - (1.0 / PC_MULT).powi(PC_NSCALE as i32)) / (1.0 - 1.0 / PC_MULT);
        let noise_mean = total_tau * (std::f64::consts::PI / 2.0).sqrt();
        let noise_sigma = total_tau * ((4.0 - std::f64::consts::PI) / 2.0).sqrt();
        let t = noise_mean + PC_K * noise_sigma;

        // Frequency-spread weighting.
        for k in 0..h * w {
            let width = (sum_an[k] / (max_an[k] + PC_EPS) - 1.0) / (PC_NSCALE as f64 - 1.0);
            let weight = 1.0 / (1.0 + (PC_G * (PC_CUTOFF - width)).exp());
            pc_num[k] += weight * (energy[k] - t).max(0.0);
            pc_den[k] += sum_an[k];
        }
    }

    (0..h * w).map(|k| pc_num[k] / pc_den[k]).collect()
}

/// Scharr gradient magnitude (3×3, zero padding).
fn scharr_gradient(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let gx = [3.0, 0.0, -3.0, 10.0, 0.0, -10.0, 3.0, 0.0, -3.0];
    let gy = [3.0, 10.0, 3.0, 0.0, 0.0, 0.0, -3.0, -10.0, -3.0];
    let mut out = vec![0.0f64; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut ax = 0.0;
            let mut ay = 0.0;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let rr = r as i64 + dr;
                    let cc = c as i64 + dc;
                    if rr < 0 || rr >= h as i64 || cc < 0 || cc >= w as i64 {
                        continue;
                    }
                    let v = img[rr as usize * w + cc as usize];
                    let ki = (dr + 1) as usize * 3 + (dc + 1) as usize;
                    ax += gx[ki] * v;
                    ay += gy[ki] * v;
                }
            }
            out[r * w + c] = ((ax / 16.0).powi(2) + (ay / 16.0).powi(2)).sqrt();
        }
    }
    out
}

/// FSIM over the ROI: phase-congruency and Scharr-gradient similarity,
/// PC-max weighted. Both images are rescaled to a 0–255 range from the
/// reference ROI peak so the gradient constant T₂ keeps its original
/// meaning. Constant images (zero phase congruency everywhere) define
/// FSIM = 1 by convention.
pub fn fsim<T: Scalar>(reference: &RealTensor<T>, test: &RealTensor<T>, roi: &RoiMask) -> f64 {
    let (h, w) = (roi.h, roi.w);
    let mut peak = 0.0f64;
    for k in 0..h * w {
        if roi.mask[k] {
            peak = peak.max(reference.data()[k].to_f64_lossy().abs());
        }
    }
    let scale = if peak > 0.0 { 255.0 / peak } else { 1.0 };
    let prep = |img: &RealTensor<T>| -> Vec<f64> {
        (0..h * w)
            .map(|k| {
                if roi.mask[k] {
                    img.data()[k].to_f64_lossy() * scale
                } else {
                    0.0
                }
            })
            .collect()
    };
    let a = prep(reference);
    let b = prep(test);

    let pc1 = phase_congruency(&a, h, w);
    let pc2 = phase_congruency(&b, h, w);
    let g1 = scharr_gradient(&a, h, w);
    let g2 = scharr_gradient(&b, h, w);

    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..h * w {
        if !roi.mask[k] {
            continue;
        }
        let s_pc =
            (2.0 * pc1[k] * pc2[k] + FSIM_T1) / (pc1[k] * pc1[k] + pc2[k] * pc2[k] + FSIM_T1);
        let s_g = (2.0 * g1[k] * g2[k] + FSIM_T2) / (g1[k] * g1[k] + g2[k] * g2[k] + FSIM_T2);
        let pcm = pc1[k].max(pc2[k]);
        num += s_pc * s_g * pcm;
        den += pcm;
    }
    if den == 0.0 {
        return 1.0;
    }
    num / den
}
