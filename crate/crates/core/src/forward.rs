//! Multi-NEX measurement operator y_n = m_n ⊙ F(S x_n) + m_n ⊙ ε and its
//! adjoint, with optional coil sensitivities (default: single-coil identity).

use crate::error::{CoreError, Result};
use crate::fft::{fft2c, ifft2c};
use crate::rng;
use crate::sampling::MaskSet;
use crate::scalar::Scalar;
use crate::tensor::{ComplexImage, RealTensor};

/// Per-coil complex sensitivity maps.
#[derive(Clone, Debug)]
pub struct SensitivitySet<T> {
    pub coils: Vec<ComplexImage<T>>,
}

impl<T: Scalar> SensitivitySet<T> {
    /// Single coil with identity sensitivity.
    pub fn identity(h: usize, w: usize) -> Self {
        let ones = RealTensor::filled(&[h, w], T::one());
        SensitivitySet {
            coils: vec![ComplexImage::from_real(ones).expect("shape")],
        }
    }

    pub fn num_coils(&self) -> usize {
        self.coils.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.coils.is_empty() {
            return Err(CoreError::Config("sensitivity set has no coils".into()));
        }
        for c in &self.coils {
            if !c.all_finite() {
                return Err(CoreError::NonFinite("sensitivity map"));
            }
        }
        Ok(())
    }
}

/// I.i.d. complex Gaussian noise, σ per real/imaginary component.
#[derive(Clone, Copy, Debug)]
pub struct NoiseModel {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn none() -> Self {
        NoiseModel { sigma: 0.0, seed: 0 }
    }

    /// Noise field for one (repetition, coil) pair; independent across pairs
    /// and reproducible per seed.
    pub fn sample<T: Scalar>(&self, h: usize, w: usize, rep: usize, coil: usize) -> ComplexImage<T> {
        let mut out = ComplexImage::zeros(h, w);
        if self.sigma == 0.0 {
            return out;
        }
        let salt = 0xE5_u64
            .wrapping_add((rep as u64) << 20)
            .wrapping_add(coil as u64);
        let mut r = rng::stream(self.seed, salt);
        let sigma = T::of(self.sigma);
        rng::fill_gaussian(&mut r, out.re.data_mut());
        rng::fill_gaussian(&mut r, out.im.data_mut());
        for v in out.re.data_mut() {
            *v *= sigma;
        }
        for v in out.im.data_mut() {
            *v *= sigma;
        }
        out
    }
}

/// Complex k-space measurements over NEX × coils, zeros at unsampled
/// locations, together with the masks that produced them.
#[derive(Clone, Debug)]
pub struct MultiNexKSpace<T> {
    /// y[rep][coil]
    pub y: Vec<Vec<ComplexImage<T>>>,
    pub masks: MaskSet<T>,
}

impl<T: Scalar> MultiNexKSpace<T> {
    pub fn nex(&self) -> usize {
        self.y.len()
    }
}

/// One coil channel of the forward operator: F(S_c ⊙ x).
pub fn forward_coil<T: Scalar>(x: &ComplexImage<T>, coil: &ComplexImage<T>) -> ComplexImage<T> {
    fft2c(&coil.mul(x))
}

/// Measures NEX per-repetition images through the masks: noise enters only at
/// sampled locations (unsampled entries are definitionally zero).
pub fn measure<T: Scalar>(
    xs: &[ComplexImage<T>],
    masks: &MaskSet<T>,
    sens: &SensitivitySet<T>,
    noise: &NoiseModel,
) -> Result<MultiNexKSpace<T>> {
    if xs.len() != masks.masks.len() {
        return Err(CoreError::ShapeMismatch {
            context: "measure",
            expected: vec![masks.masks.len()],
            got: vec![xs.len()],
        });
    }
    sens.validate()?;
    let mut y = Vec::with_capacity(xs.len());
    for (rep, (x, mask)) in xs.iter().zip(&masks.masks).enumerate() {
        if mask.len() != x.len() {
            return Err(CoreError::ShapeMismatch {
                context: "measure mask",
                expected: vec![x.height(), x.width()],
                got: mask.shape().to_vec(),
            });
        }
        let mut per_coil = Vec::with_capacity(sens.num_coils());
        for (c, coil) in sens.coils.iter().enumerate() {
            let k = forward_coil(x, coil);
            let eps = noise.sample::<T>(x.height(), x.width(), rep, c);
            per_coil.push(k.add(&eps).mask(mask));
        }
        y.push(per_coil);
    }
    Ok(MultiNexKSpace {
        y,
        masks: masks.clone(),
    })
}

/// Adjoint Aᴴ applied per repetition: Σ_c conj(S_c) ⊙ F⁻¹(y_{n,c}); the
/// zero-filled image stack fed to the reconstruction network.
pub fn adjoint<T: Scalar>(
    y: &MultiNexKSpace<T>,
    sens: &SensitivitySet<T>,
) -> Vec<ComplexImage<T>> {
    y.y.iter()
        .map(|per_coil| {
            let mut acc: Option<ComplexImage<T>> = None;
            for (k, coil) in per_coil.iter().zip(&sens.coils) {
                let img = ifft2c(k).mul_conj(coil);
                acc = Some(match acc {
                    None => img,
                    Some(a) => a.add(&img),
                });
            }
            acc.expect("at least one coil")
        })
        .collect()
}

/// Normal operator of one repetition: AᴴMA v + λ v.
pub fn normal_operator<T: Scalar>(
    v: &ComplexImage<T>,
    mask: &RealTensor<T>,
    sens: &SensitivitySet<T>,
    lambda: T,
) -> ComplexImage<T> {
    let mut acc: Option<ComplexImage<T>> = None;
    for coil in &sens.coils {
        let k = forward_coil(v, coil).mask(mask);
        let img = ifft2c(&k).mul_conj(coil);
        acc = Some(match acc {
            None => img,
            Some(a) => a.add(&img),
        });
    }
    acc.expect("coil").add(&v.scale(lambda))
}
