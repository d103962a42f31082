//! Centered unitary 2-D Fourier transforms.
//!
//! `fft2c` places the DC coefficient at the grid center (shift∘FFT∘shift) and
//! scales by 1/√(HW) so that the transform is unitary; `ifft2c` is its exact
//! inverse and adjoint. Power-of-two axes use an iterative radix-2 kernel;
//! other lengths fall back to a direct DFT with an exact twiddle table, which
//! is plenty at the grid sizes this crate targets.

use crate::scalar::Scalar;
use crate::tensor::ComplexImage;

/// Precomputed twiddles (and bit-reversal) for one transform length.
struct FftPlan<T> {
    n: usize,
    roots_re: Vec<T>,
    roots_im: Vec<T>,
    bitrev: Option<Vec<usize>>,
}

impl<T: Scalar> FftPlan<T> {
    fn new(n: usize) -> Self {
        assert!(n >= 1);
        let two_pi = T::PI() + T::PI();
        let nf = T::of(n as f64);
        let mut roots_re = Vec::with_capacity(n);
        let mut roots_im = Vec::with_capacity(n);
        for k in 0..n {
            let angle = -two_pi * T::of(k as f64) / nf;
            roots_re.push(angle.cos());
            roots_im.push(angle.sin());
        }
        let bitrev = if n.is_power_of_two() && n > 1 {
            let bits = n.trailing_zeros();
            Some((0..n).map(|i| i.reverse_bits() >> (usize::BITS - bits)).collect())
        } else {
            None
        };
        FftPlan {
            n,
            roots_re,
            roots_im,
            bitrev,
        }
    }

    /// In-place 1-D transform, unnormalized. `inverse` flips the twiddle sign.
    fn run(&self, re: &mut [T], im: &mut [T], inverse: bool) {
        debug_assert_eq!(re.len(), self.n);
        if self.n == 1 {
            return;
        }
        match &self.bitrev {
            Some(rev) => self.run_radix2(re, im, inverse, rev),
            None => self.run_naive(re, im, inverse),
        }
    }

    fn run_radix2(&self, re: &mut [T], im: &mut [T], inverse: bool, rev: &[usize]) {
        let n = self.n;
        for (i, &j) in rev.iter().enumerate() {
            if i < j {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let stride = n / len;
            for base in (0..n).step_by(len) {
                for j in 0..half {
                    let wr = self.roots_re[j * stride];
                    let wi = if inverse {
                        -self.roots_im[j * stride]
                    } else {
                        self.roots_im[j * stride]
                    };
                    let a = base + j;
                    let b = a + half;
                    let vr = re[b] * wr - im[b] * wi;
                    let vi = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - vr;
                    im[b] = im[a] - vi;
                    re[a] += vr;
                    im[a] += vi;
                }
            }
            len *= 2;
        }
    }

    fn run_naive(&self, re: &mut [T], im: &mut [T], inverse: bool) {
        let n = self.n;
        let mut out_re = vec![T::zero(); n];
        let mut out_im = vec![T::zero(); n];
        for k in 0..n {
            let mut sr = T::zero();
            let mut si = T::zero();
            for j in 0..n {
                let idx = (j * k) % n;
                let wr = self.roots_re[idx];
                let wi = if inverse {
                    -self.roots_im[idx]
                } else {
                    self.roots_im[idx]
                };
                sr += re[j] * wr - im[j] * wi;
                si += re[j] * wi + im[j] * wr;
            }
            out_re[k] = sr;
            out_im[k] = si;
        }
        re.copy_from_slice(&out_re);
        im.copy_from_slice(&out_im);
    }
}

/// Roll a flat H×W grid by `(dr, dc)` (to the right/down).
fn roll2<T: Scalar>(src: &[T], h: usize, w: usize, dr: usize, dc: usize) -> Vec<T> {
    let mut out = vec![T::zero(); h * w];
    for r in 0..h {
        let rr = (r + dr) % h;
        for c in 0..w {
            let cc = (c + dc) % w;
            out[rr * w + cc] = src[r * w + c];
        }
    }
    out
}

/// Centered unitary 2-D transform over flat channel slices.
pub fn fft2c_inplace<T: Scalar>(re: &mut [T], im: &mut [T], h: usize, w: usize, inverse: bool) {
    assert_eq!(re.len(), h * w);
    assert_eq!(im.len(), h * w);
    // ifftshift: roll left by floor(n/2), i.e. right by n - floor(n/2).
    let (ur, uc) = (h - h / 2, w - w / 2);
    let mut tr = roll2(re, h, w, ur % h, uc % w);
    let mut ti = roll2(im, h, w, ur % h, uc % w);

    let row_plan = FftPlan::<T>::new(w);
    for r in 0..h {
        row_plan.run(&mut tr[r * w..(r + 1) * w], &mut ti[r * w..(r + 1) * w], inverse);
    }
    let col_plan = FftPlan::<T>::new(h);
    let mut col_re = vec![T::zero(); h];
    let mut col_im = vec![T::zero(); h];
    for c in 0..w {
        for r in 0..h {
            col_re[r] = tr[r * w + c];
            col_im[r] = ti[r * w + c];
        }
        col_plan.run(&mut col_re, &mut col_im, inverse);
        for r in 0..h {
            tr[r * w + c] = col_re[r];
            ti[r * w + c] = col_im[r];
        }
    }

    // fftshift: roll right by floor(n/2).
    let tr = roll2(&tr, h, w, h / 2, w / 2);
    let ti = roll2(&ti, h, w, h / 2, w / 2);
    let scale = (T::of((h * w) as f64)).sqrt().recip();
    for k in 0..h * w {
        re[k] = tr[k] * scale;
        im[k] = ti[k] * scale;
    }
}

/// Centered unitary forward 2-D Fourier transform (DC at grid center).
pub fn fft2c<T: Scalar>(x: &ComplexImage<T>) -> ComplexImage<T> {
    let mut out = x.clone();
    let (h, w) = (x.height(), x.width());
    fft2c_inplace(out.re.data_mut(), out.im.data_mut(), h, w, false);
    out
}

/// Exact inverse (and adjoint) of [`fft2c`].
pub fn ifft2c<T: Scalar>(y: &ComplexImage<T>) -> ComplexImage<T> {
    let mut out = y.clone();
    let (h, w) = (y.height(), y.width());
    fft2c_inplace(out.re.data_mut(), out.im.data_mut(), h, w, true);
    out
}
