//! Define-by-run reverse-mode differentiation tape.
//!
//! Operations execute eagerly, record themselves together with the buffers
//! they touched, and are replayed in reverse for the backward sweep. The tape
//! is rebuilt for every forward pass (mask realizations change every draw), so
//! there is no graph reuse machinery. Complex images travel as paired real
//! buffers; the FFT pair is a primitive whose backward applies the opposite
//! transform (the centered unitary FFT is its own real adjoint up to
//! inversion).

use std::sync::Arc;

use crate::fft::fft2c_inplace;
use crate::scalar::Scalar;
use crate::tensor::{ComplexImage, RealTensor};

/// Index of a buffer on the tape.
pub type BufId = usize;

/// A complex image on the tape: paired real buffers.
#[derive(Clone, Copy, Debug)]
pub struct ComplexVar {
    pub re: BufId,
    pub im: BufId,
}

struct Buf<T> {
    data: Vec<T>,
    shape: Vec<usize>,
}

enum Op<T> {
    Add { a: BufId, b: BufId, out: BufId },
    Sub { a: BufId, b: BufId, out: BufId },
    Mul { a: BufId, b: BufId, out: BufId },
    Div { a: BufId, b: BufId, out: BufId },
    /// Scalar division that returns 0 (and passes no gradient) when the
    /// denominator underflows; keeps converged CG iterations finite.
    SafeDiv { a: BufId, b: BufId, out: BufId },
    Affine { a: BufId, out: BufId, mul: T },
    MulScalar { a: BufId, s: BufId, out: BufId },
    Sum { a: BufId, out: BufId },
    Mean { a: BufId, out: BufId },
    Dot { a: BufId, b: BufId, out: BufId },
    Sigmoid { a: BufId, out: BufId },
    Exp { a: BufId, out: BufId },
    /// sqrt(a + eps); eps keeps the root away from zero.
    SqrtEps { a: BufId, out: BufId },
    /// Broadcast-add a 1-element scalar buffer.
    AddScalar { a: BufId, s: BufId, out: BufId },
    Relu { a: BufId, out: BufId },
    /// ln(max(a, eps)); zero gradient on the clamped branch.
    LogClamped { a: BufId, out: BufId, eps: T },
    Magnitude { re: BufId, im: BufId, out: BufId },
    /// Hard binary threshold with a straight-through backward pass.
    HardStep { a: BufId, out: BufId },
    Slice { a: BufId, out: BufId, offset: usize },
    Concat { parts: Vec<BufId>, out: BufId },
    Scatter { a: BufId, out: BufId, map: Arc<Vec<usize>> },
    Fft2 { re_in: BufId, im_in: BufId, re_out: BufId, im_out: BufId, h: usize, w: usize, inverse: bool },
    Conv2d { input: BufId, weight: BufId, bias: BufId, out: BufId, cin: usize, cout: usize, h: usize, w: usize },
}

/// Reverse-mode tape over scalar type `T`.
pub struct Tape<T: Scalar> {
    bufs: Vec<Buf<T>>,
    ops: Vec<Op<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            bufs: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
        }
    }

    // ── buffers ─────────────────────────────────────────────────────

    pub fn alloc(&mut self, data: Vec<T>, shape: &[usize]) -> BufId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = self.bufs.len();
        self.bufs.push(Buf {
            data,
            shape: shape.to_vec(),
        });
        self.grads.push(None);
        id
    }

    pub fn constant(&mut self, t: &RealTensor<T>) -> BufId {
        self.alloc(t.data().to_vec(), t.shape())
    }

    pub fn constant_complex(&mut self, img: &ComplexImage<T>) -> ComplexVar {
        ComplexVar {
            re: self.constant(&img.re),
            im: self.constant(&img.im),
        }
    }

    pub fn scalar(&mut self, v: T) -> BufId {
        self.alloc(vec![v], &[1])
    }

    pub fn zeros(&mut self, shape: &[usize]) -> BufId {
        self.alloc(vec![T::zero(); shape.iter().product()], shape)
    }

    pub fn value(&self, id: BufId) -> &[T] {
        &self.bufs[id].data
    }

    pub fn shape(&self, id: BufId) -> &[usize] {
        &self.bufs[id].shape
    }

    pub fn scalar_value(&self, id: BufId) -> T {
        debug_assert_eq!(self.bufs[id].data.len(), 1);
        self.bufs[id].data[0]
    }

    pub fn value_tensor(&self, id: BufId) -> RealTensor<T> {
        RealTensor::from_vec(&self.bufs[id].shape, self.bufs[id].data.clone()).expect("shape")
    }

    pub fn value_complex(&self, v: ComplexVar) -> ComplexImage<T> {
        ComplexImage::new(self.value_tensor(v.re), self.value_tensor(v.im)).expect("shape")
    }

    pub fn num_bufs(&self) -> usize {
        self.bufs.len()
    }

    // ── elementwise ops ─────────────────────────────────────────────

    fn assert_same_len(&self, a: BufId, b: BufId) {
        assert_eq!(
            self.bufs[a].data.len(),
            self.bufs[b].data.len(),
            "tape op on buffers of different lengths"
        );
    }

    pub fn add(&mut self, a: BufId, b: BufId) -> BufId {
        self.assert_same_len(a, b);
        let data = self.bufs[a]
            .data
            .iter()
            .zip(&self.bufs[b].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.bufs[a].shape.clone();
        let out = self.alloc(data, &shape);
        self.ops.push(Op::Add { a, b, out });
        out
    }

    pub fn sub(&mut self, a: BufId, b: BufId) -> BufId {
        self.assert_same_len(a, b);
        let data = self.bufs[a]
            .data
            .iter()
            .zip(&self.bufs[b].data)
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.bufs[a].shape.clone();
        let out = self.alloc(data, &shape);
        self.ops.push(Op::Sub { a, b, out });
        out
    }

    pub fn mul(&mut self, a: BufId, b: BufId) -> BufId {
        self.assert_same_len(a, b);
        let data = self.bufs[a]
            .data
            .iter()
            .zip(&self.bufs[b].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.bufs[a].shape.clone();
        let out = self.alloc(data, &shape);
        self.ops.push(Op::Mul { a, b, out });
        out
    }

    pub fn div(&mut self, a: BufId, b: BufId) -> BufId {
        self.assert_same_len(a, b);
        let data = self.bufs[a]
            .data
            .iter()
            .zip(&self.bufs[b].data)
            .map(|(&x, &y)| x / y)
            .collect();
        let shape = self.bufs[a].shape.clone();
        let out = self.alloc(data, &shape);
        self.ops.push(Op::Div { a, b, out });
        out
    }

    pub fn safe_div(&mut self, a: BufId, b: BufId) -> BufId {
        self.assert_same_len(a, b);
        let floor = T::min_positive_value();
        let data = self.bufs[a]
            .data
            .iter()
            .zip(&self.bufs[b].data)
            .map(|(&x, &y)| if y.abs() <= floor { T::zero() } else { x / y })
            .collect();
        let shape = self.bufs[a].shape.clone();
        let out = self.alloc(data, &shape);
        self.ops.push(Op::SafeDiv { a, b, out });
        out
    }

    pub fn affine(&mut self, a: BufId, mul: T, add: T) -> BufId {
        let data = self.bufs[a].data.iter().map(|&x| mul * x + add).collect();
        let shape = self.bufs[a].shape.clone();
        let out = self.alloc(data, &shape);
        self.ops.push(Op::Affine { a, out, mul });
        out
    }

    pub fn neg(&mut self, a: BufId) -> BufId {
        self.affine(a, -T::one(), T::zero())
    }

    /// Broadcast-multiply a tensor by a 1-element scalar buffer.
    pub fn mul_scalar(&mut self, a: BufId, s: BufId) -> BufId {
        assert_eq!(self.bufs[s].data.len(), 1);
        let sv = self.bufs[s].data[0];
        let data = self.bufs[a].data.iter().map(|&x| x * sv).collect();
        let shape = self.bufs[a].shape.clone();
        let out = self.alloc(data, &shape);
        self.ops.push(Op::MulScalar { a, s, out });
        out
    }

    pub fn sum(&mut self, a: BufId) -> BufId {
        let v: T = self.bufs[a].data.iter().copied().sum();
        let out = self.alloc(vec![v], &[1]);
        self.ops.push(Op::Sum { a, out });
        out
    }

    pub fn mean(&mut self, a: BufId) -> BufId {
        let n = T::of(self.bufs[a].data.len() as f64);
        let v: T = self.bufs[a].data.iter().copied().sum::<T>() / n;
        let out = self.alloc(vec![v], &[1]);
        self.ops.push(Op::Mean { a, out });
        out
    }

    pub fn dot(&mut self, a: BufId, b: BufId) -> BufId {
        self.assert_same_len(a, b);
        let v: T = self.bufs[a]
            .data
            .iter()
            .zip(&self.bufs[b].data)
            .map(|(&x, &y)| x * y)
            .sum();
        let out = self.alloc(vec![v], &[1]);
        self.ops.push(Op::Dot { a, b, out });
        out
    }

    pub fn sigmoid(&mut self, a: BufId) -> BufId {
        let data = self.bufs[a]
            .data
            .iter()
            .map(|&x| T::one() / (T::one() + (-x).exp()))
            .collect();
        let shape = self.bufs[a].shape.clone();
        let out = self.alloc(data, &shape);
        self.ops.push(Op::Sigmoid { a, out });
        out
    }

    pub fn exp(&mut self, a: BufId) -> BufId {
        let data = self.bufs[a].data.iter().map(|&x| x.exp()).collect();
        let shape = self.bufs[a].shape.clone();
        let out = self.alloc(data, &shape);
        self.ops.push(Op::Exp { a, out });
        out
    }

    pub fn sqrt_eps(&mut self, a: BufId, eps: T) -> BufId {
        let data = self.bufs[a].data.iter().map(|&x| (x + eps).sqrt()).collect();
        let shape = self.bufs[a].shape.clone();
        let out = self.alloc(data, &shape);
        self.ops.push(Op::SqrtEps { a, out });
        out
    }

    /// Broadcast-add a 1-element scalar buffer to a tensor.
    pub fn add_scalar(&mut self, a: BufId, s: BufId) -> BufId {
        assert_eq!(self.bufs[s].data.len(), 1);
        let sv = self.bufs[s].data[0];
        let data = self.bufs[a].data.iter().map(|&x| x + sv).collect();
        let shape = self.bufs[a].shape.clone();
        let out = self.alloc(data, &shape);
        self.ops.push(Op::AddScalar { a, s, out });
        out
    }

    pub fn relu(&mut self, a: BufId) -> BufId {
        let data = self.bufs[a].data.iter().map(|&x| x.max(T::zero())).collect();
        let shape = self.bufs[a].shape.clone();
        let out = self.alloc(data, &shape);
        self.ops.push(Op::Relu { a, out });
        out
    }

    pub fn log_clamped(&mut self, a: BufId, eps: T) -> BufId {
        let data = self.bufs[a].data.iter().map(|&x| x.max(eps).ln()).collect();
        let shape = self.bufs[a].shape.clone();
        let out = self.alloc(data, &shape);
        self.ops.push(Op::LogClamped { a, out, eps });
        out
    }

    /// δ-regularized magnitude √(re² + im² + δ) of a complex pair.
    pub fn magnitude(&mut self, v: ComplexVar, delta: T) -> BufId {
        self.assert_same_len(v.re, v.im);
        let data = self.bufs[v.re]
            .data
            .iter()
            .zip(&self.bufs[v.im].data)
            .map(|(&r, &i)| (r * r + i * i + delta).sqrt())
            .collect();
        let shape = self.bufs[v.re].shape.clone();
        let out = self.alloc(data, &shape);
        self.ops.push(Op::Magnitude {
            re: v.re,
            im: v.im,
            out,
        });
        out
    }

    /// Forward: 1[a > threshold]. Backward: identity (straight-through).
    pub fn hard_step(&mut self, a: BufId, threshold: T) -> BufId {
        let data = self.bufs[a]
            .data
            .iter()
            .map(|&x| if x > threshold { T::one() } else { T::zero() })
            .collect();
        let shape = self.bufs[a].shape.clone();
        let out = self.alloc(data, &shape);
        self.ops.push(Op::HardStep { a, out });
        out
    }

    pub fn slice(&mut self, a: BufId, offset: usize, len: usize, shape: &[usize]) -> BufId {
        debug_assert_eq!(shape.iter().product::<usize>(), len);
        let data = self.bufs[a].data[offset..offset + len].to_vec();
        let out = self.alloc(data, shape);
        self.ops.push(Op::Slice { a, out, offset });
        out
    }

    pub fn concat(&mut self, parts: &[BufId], shape: &[usize]) -> BufId {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(&self.bufs[p].data);
        }
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let out = self.alloc(data, shape);
        self.ops.push(Op::Concat {
            parts: parts.to_vec(),
            out,
        });
        out
    }

    /// out = base, then out[map[i]] = a[i]. Gradient flows back through `map`.
    pub fn scatter(
        &mut self,
        a: BufId,
        map: Arc<Vec<usize>>,
        base: &[T],
        shape: &[usize],
    ) -> BufId {
        assert_eq!(map.len(), self.bufs[a].data.len());
        let mut data = base.to_vec();
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        for (i, &dst) in map.iter().enumerate() {
            data[dst] = self.bufs[a].data[i];
        }
        let out = self.alloc(data, shape);
        self.ops.push(Op::Scatter { a, out, map });
        out
    }

    // ── complex helpers ─────────────────────────────────────────────

    pub fn fft2c(&mut self, v: ComplexVar, h: usize, w: usize) -> ComplexVar {
        self.fft2_impl(v, h, w, false)
    }

    pub fn ifft2c(&mut self, v: ComplexVar, h: usize, w: usize) -> ComplexVar {
        self.fft2_impl(v, h, w, true)
    }

    fn fft2_impl(&mut self, v: ComplexVar, h: usize, w: usize, inverse: bool) -> ComplexVar {
        let mut re = self.bufs[v.re].data.clone();
        let mut im = self.bufs[v.im].data.clone();
        fft2c_inplace(&mut re, &mut im, h, w, inverse);
        let re_out = self.alloc(re, &[h, w]);
        let im_out = self.alloc(im, &[h, w]);
        self.ops.push(Op::Fft2 {
            re_in: v.re,
            im_in: v.im,
            re_out,
            im_out,
            h,
            w,
            inverse,
        });
        ComplexVar {
            re: re_out,
            im: im_out,
        }
    }

    pub fn mask_complex(&mut self, mask: BufId, v: ComplexVar) -> ComplexVar {
        ComplexVar {
            re: self.mul(mask, v.re),
            im: self.mul(mask, v.im),
        }
    }

    pub fn add_complex(&mut self, a: ComplexVar, b: ComplexVar) -> ComplexVar {
        ComplexVar {
            re: self.add(a.re, b.re),
            im: self.add(a.im, b.im),
        }
    }

    pub fn sub_complex(&mut self, a: ComplexVar, b: ComplexVar) -> ComplexVar {
        ComplexVar {
            re: self.sub(a.re, b.re),
            im: self.sub(a.im, b.im),
        }
    }

    pub fn scale_complex(&mut self, a: ComplexVar, s: BufId) -> ComplexVar {
        ComplexVar {
            re: self.mul_scalar(a.re, s),
            im: self.mul_scalar(a.im, s),
        }
    }

    /// Real inner product of two complex pairs: Σ(re·re + im·im).
    pub fn dot_complex(&mut self, a: ComplexVar, b: ComplexVar) -> BufId {
        let rr = self.dot(a.re, b.re);
        let ii = self.dot(a.im, b.im);
        self.add(rr, ii)
    }

    // ── convolution ─────────────────────────────────────────────────

    /// 3×3 same-padding convolution: input [cin,h,w] → out [cout,h,w].
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        input: BufId,
        weight: BufId,
        bias: BufId,
        cin: usize,
        cout: usize,
        h: usize,
        w: usize,
    ) -> BufId {
        assert_eq!(self.bufs[input].data.len(), cin * h * w);
        assert_eq!(self.bufs[weight].data.len(), cout * cin * 9);
        assert_eq!(self.bufs[bias].data.len(), cout);
        let data = conv2d_forward(
            &self.bufs[input].data,
            &self.bufs[weight].data,
            &self.bufs[bias].data,
            cin,
            cout,
            h,
            w,
        );
        let out = self.alloc(data, &[cout, h, w]);
        self.ops.push(Op::Conv2d {
            input,
            weight,
            bias,
            out,
            cin,
            cout,
            h,
            w,
        });
        out
    }

    // ── backward sweep ──────────────────────────────────────────────

    pub fn grad(&self, id: BufId) -> Option<&[T]> {
        self.grads[id].as_deref()
    }

    pub fn grad_or_zeros(&self, id: BufId) -> Vec<T> {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => vec![T::zero(); self.bufs[id].data.len()],
        }
    }

    fn acc(&mut self, id: BufId, contrib: &[T]) {
        match &mut self.grads[id] {
            Some(g) => {
                for (gi, &c) in g.iter_mut().zip(contrib) {
                    *gi += c;
                }
            }
            None => {
                self.grads[id] = Some(contrib.to_vec());
            }
        }
    }

    /// Runs the reverse sweep from a scalar loss (seeded with adjoint 1).
    pub fn backward(&mut self, loss: BufId) {
        assert_eq!(
            self.bufs[loss].data.len(),
            1,
            "backward seed must be a scalar"
        );
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss] = Some(vec![T::one()]);
        for idx in (0..self.ops.len()).rev() {
            self.backward_op(idx);
        }
    }

    fn backward_op(&mut self, idx: usize) {
        macro_rules! dout {
            ($out:expr) => {
                match &self.grads[$out] {
                    Some(g) => g.clone(),
                    None => return,
                }
            };
        }
        // Ops are replayed strictly in reverse creation order, so `out`
        // adjoints are final when their op is visited.
        match &self.ops[idx] {
            &Op::Add { a, b, out } => {
                let d = dout!(out);
                self.acc(a, &d);
                self.acc(b, &d);
            }
            &Op::Sub { a, b, out } => {
                let d = dout!(out);
                self.acc(a, &d);
                let neg: Vec<T> = d.iter().map(|&x| -x).collect();
                self.acc(b, &neg);
            }
            &Op::Mul { a, b, out } => {
                let d = dout!(out);
                let da: Vec<T> = d
                    .iter()
                    .zip(&self.bufs[b].data)
                    .map(|(&g, &v)| g * v)
                    .collect();
                let db: Vec<T> = d
                    .iter()
                    .zip(&self.bufs[a].data)
                    .map(|(&g, &v)| g * v)
                    .collect();
                self.acc(a, &da);
                self.acc(b, &db);
            }
            &Op::Div { a, b, out } => {
                let d = dout!(out);
                let da: Vec<T> = d
                    .iter()
                    .zip(&self.bufs[b].data)
                    .map(|(&g, &bv)| g / bv)
                    .collect();
                let db: Vec<T> = d
                    .iter()
                    .zip(self.bufs[a].data.iter().zip(&self.bufs[b].data))
                    .map(|(&g, (&av, &bv))| -g * av / (bv * bv))
                    .collect();
                self.acc(a, &da);
                self.acc(b, &db);
            }
            &Op::SafeDiv { a, b, out } => {
                let d = dout!(out);
                let floor = T::min_positive_value();
                let da: Vec<T> = d
                    .iter()
                    .zip(&self.bufs[b].data)
                    .map(|(&g, &bv)| if bv.abs() <= floor { T::zero() } else { g / bv })
                    .collect();
                let db: Vec<T> = d
                    .iter()
                    .zip(self.bufs[a].data.iter().zip(&self.bufs[b].data))
                    .map(|(&g, (&av, &bv))| {
                        if bv.abs() <= floor {
                            T::zero()
                        } else {
                            -g * av / (bv * bv)
                        }
                    })
                    .collect();
                self.acc(a, &da);
                self.acc(b, &db);
            }
            &Op::Affine { a, out, mul } => {
                let d = dout!(out);
                let da: Vec<T> = d.iter().map(|&g| g * mul).collect();
                self.acc(a, &da);
            }
            &Op::MulScalar { a, s, out } => {
                let d = dout!(out);
                let sv = self.bufs[s].data[0];
                let da: Vec<T> = d.iter().map(|&g| g * sv).collect();
                let ds: T = d
                    .iter()
                    .zip(&self.bufs[a].data)
                    .map(|(&g, &v)| g * v)
                    .sum();
                self.acc(a, &da);
                self.acc(s, &[ds]);
            }
            &Op::Sum { a, out } => {
                let d = dout!(out)[0];
                let da = vec![d; self.bufs[a].data.len()];
                self.acc(a, &da);
            }
            &Op::Mean { a, out } => {
                let d = dout!(out)[0];
                let n = T::of(self.bufs[a].data.len() as f64);
                let da = vec![d / n; self.bufs[a].data.len()];
                self.acc(a, &da);
            }
            &Op::Dot { a, b, out } => {
                let d = dout!(out)[0];
                let da: Vec<T> = self.bufs[b].data.iter().map(|&v| d * v).collect();
                let db: Vec<T> = self.bufs[a].data.iter().map(|&v| d * v).collect();
                self.acc(a, &da);
                self.acc(b, &db);
            }
            &Op::Sigmoid { a, out } => {
                let d = dout!(out);
                let da: Vec<T> = d
                    .iter()
                    .zip(&self.bufs[out].data)
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect();
                self.acc(a, &da);
            }
            &Op::Exp { a, out } => {
                let d = dout!(out);
                let da: Vec<T> = d
                    .iter()
                    .zip(&self.bufs[out].data)
                    .map(|(&g, &e)| g * e)
                    .collect();
                self.acc(a, &da);
            }
            &Op::SqrtEps { a, out } => {
                let d = dout!(out);
                let half = T::of(0.5);
                let da: Vec<T> = d
                    .iter()
                    .zip(&self.bufs[out].data)
                    .map(|(&g, &r)| g * half / r)
                    .collect();
                self.acc(a, &da);
            }
            &Op::AddScalar { a, s, out } => {
                let d = dout!(out);
                self.acc(a, &d);
                let ds: T = d.iter().copied().sum();
                self.acc(s, &[ds]);
            }
            &Op::Relu { a, out } => {
                let d = dout!(out);
                let da: Vec<T> = d
                    .iter()
                    .zip(&self.bufs[a].data)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.acc(a, &da);
            }
            &Op::LogClamped { a, out, eps } => {
                let d = dout!(out);
                let da: Vec<T> = d
                    .iter()
                    .zip(&self.bufs[a].data)
                    .map(|(&g, &v)| if v > eps { g / v } else { T::zero() })
                    .collect();
                self.acc(a, &da);
            }
            &Op::Magnitude { re, im, out } => {
                let d = dout!(out);
                let dre: Vec<T> = d
                    .iter()
                    .zip(self.bufs[re].data.iter().zip(&self.bufs[out].data))
                    .map(|(&g, (&r, &m))| g * r / m)
                    .collect();
                let dim: Vec<T> = d
                    .iter()
                    .zip(self.bufs[im].data.iter().zip(&self.bufs[out].data))
                    .map(|(&g, (&i, &m))| g * i / m)
                    .collect();
                self.acc(re, &dre);
                self.acc(im, &dim);
            }
            &Op::HardStep { a, out } => {
                let d = dout!(out);
                self.acc(a, &d);
            }
            &Op::Slice { a, out, offset } => {
                let d = dout!(out);
                let mut da = vec![T::zero(); self.bufs[a].data.len()];
                da[offset..offset + d.len()].copy_from_slice(&d);
                self.acc(a, &da);
            }
            Op::Concat { parts, out } => {
                let parts = parts.clone();
                let out = *out;
                let d = dout!(out);
                let mut off = 0;
                for p in parts {
                    let n = self.bufs[p].data.len();
                    self.acc(p, &d[off..off + n]);
                    off += n;
                }
            }
            Op::Scatter { a, out, map } => {
                let (a, out, map) = (*a, *out, Arc::clone(map));
                let d = dout!(out);
                let da: Vec<T> = map.iter().map(|&dst| d[dst]).collect();
                self.acc(a, &da);
            }
            &Op::Fft2 {
                re_in,
                im_in,
                re_out,
                im_out,
                h,
                w,
                inverse,
            } => {
                let dre = self.grads[re_out].clone();
                let dim = self.grads[im_out].clone();
                if dre.is_none() && dim.is_none() {
                    return;
                }
                let mut dre = dre.unwrap_or_else(|| vec![T::zero(); h * w]);
                let mut dim = dim.unwrap_or_else(|| vec![T::zero(); h * w]);
                // The real adjoint of the unitary transform is its inverse.
                fft2c_inplace(&mut dre, &mut dim, h, w, !inverse);
                self.acc(re_in, &dre);
                self.acc(im_in, &dim);
            }
            &Op::Conv2d {
                input,
                weight,
                bias,
                out,
                cin,
                cout,
                h,
                w,
            } => {
                let d = dout!(out);
                let (din, dw, db) = conv2d_backward(
                    &d,
                    &self.bufs[input].data,
                    &self.bufs[weight].data,
                    cin,
                    cout,
                    h,
                    w,
                );
                self.acc(input, &din);
                self.acc(weight, &dw);
                self.acc(bias, &db);
            }
        }
    }
}

fn pad_channels<T: Scalar>(input: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (hp, wp) = (h + 2, w + 2);
    let mut pad = vec![T::zero(); c * hp * wp];
    for ci in 0..c {
        for y in 0..h {
            let src = ci * h * w + y * w;
            let dst = ci * hp * wp + (y + 1) * wp + 1;
            pad[dst..dst + w].copy_from_slice(&input[src..src + w]);
        }
    }
    pad
}

fn conv2d_forward<T: Scalar>(
    input: &[T],
    weight: &[T],
    bias: &[T],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let (hp, wp) = (h + 2, w + 2);
    let pad = pad_channels(input, cin, h, w);
    let mut out = vec![T::zero(); cout * h * w];
    for co in 0..cout {
        let ob = co * h * w;
        out[ob..ob + h * w].fill(bias[co]);
        for ci in 0..cin {
            for dy in 0..3 {
                for dx in 0..3 {
                    let wv = weight[((co * cin + ci) * 3 + dy) * 3 + dx];
                    if wv == T::zero() {
                        continue;
                    }
                    for y in 0..h {
                        let prow = ci * hp * wp + (y + dy) * wp + dx;
                        let orow = ob + y * w;
                        for x in 0..w {
                            out[orow + x] += wv * pad[prow + x];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward<T: Scalar>(
    dout: &[T],
    input: &[T],
    weight: &[T],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (hp, wp) = (h + 2, w + 2);
    let pad_in = pad_channels(input, cin, h, w);
    let mut dpad = vec![T::zero(); cin * hp * wp];
    let mut dw = vec![T::zero(); cout * cin * 9];
    let mut db = vec![T::zero(); cout];
    for (co, db_slot) in db.iter_mut().enumerate() {
        let ob = co * h * w;
        let mut b_acc = T::zero();
        for v in &dout[ob..ob + h * w] {
            b_acc += *v;
        }
        *db_slot = b_acc;
        for ci in 0..cin {
            for dy in 0..3 {
                for dx in 0..3 {
                    let widx = ((co * cin + ci) * 3 + dy) * 3 + dx;
                    let wv = weight[widx];
                    let mut w_acc = T::zero();
                    for y in 0..h {
                        let prow = ci * hp * wp + (y + dy) * wp + dx;
                        let orow = ob + y * w;
                        for x in 0..w {
                            let g = dout[orow + x];
                            w_acc += g * pad_in[prow + x];
                            dpad[prow + x] += wv * g;
                        }
                    }
                    dw[widx] += w_acc;
                }
            }
        }
    }
    // Crop the padded input gradient back to the interior.
    let mut din = vec![T::zero(); cin * h * w];
    for ci in 0..cin {
        for y in 0..h {
            let src = ci * hp * wp + (y + 1) * wp + 1;
            let dst = ci * h * w + y * w;
            din[dst..dst + w].copy_from_slice(&dpad[src..src + w]);
        }
    }
    (din, dw, db)
}
