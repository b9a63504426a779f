//! Layer primitives with explicit backward passes. Activations are row-major
//! `rows x features` slices; parameters live in one flat buffer addressed by
//! offsets so optimizers and checkpoints see a single vector.

use super::tensor::{matmul, Mat, Real};

/// Offsets of a dense layer `y = x W + b`, `W: din x dout`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    fn weight<'a, T>(&self, params: &'a [T]) -> &'a [T] {
        &params[self.w..self.w + self.din * self.dout]
    }

    pub fn forward<T: Real>(&self, params: &[T], x: &[T], rows: usize) -> Vec<T> {
        let mut y = vec![T::zero(); rows * self.dout];
        matmul(
            Mat::new(x, rows, self.din),
            Mat::new(self.weight(params), self.din, self.dout),
            &mut y,
            false,
        );
        let bias = &params[self.b..self.b + self.dout];
        for row in y.chunks_exact_mut(self.dout) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += *b;
            }
        }
        y
    }

    /// Accumulates parameter gradients; returns `dx` when `need_dx`.
    pub fn backward<T: Real>(
        &self,
        params: &[T],
        grads: &mut [T],
        x: &[T],
        dy: &[T],
        rows: usize,
        need_dx: bool,
    ) -> Option<Vec<T>> {
        matmul(
            Mat::new(x, rows, self.din).t(),
            Mat::new(dy, rows, self.dout),
            &mut grads[self.w..self.w + self.din * self.dout],
            true,
        );
        let db = &mut grads[self.b..self.b + self.dout];
        for row in dy.chunks_exact(self.dout) {
            for (g, d) in db.iter_mut().zip(row) {
                *g += *d;
            }
        }
        need_dx.then(|| {
            let mut dx = vec![T::zero(); rows * self.din];
            matmul(
                Mat::new(dy, rows, self.dout),
                Mat::new(self.weight(params), self.din, self.dout).t(),
                &mut dx,
                false,
            );
            dx
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub g: usize,
    pub b: usize,
    pub dim: usize,
}

pub struct NormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn forward<T: Real>(&self, params: &[T], x: &[T]) -> (Vec<T>, NormCache<T>) {
        let d = self.dim;
        let rows = x.len() / d;
        let gain = &params[self.g..self.g + d];
        let bias = &params[self.b..self.b + d];
        let mut y = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        let inv_d = T::one() / T::of(d as f64);
        for r in 0..rows {
            let xr = &x[r * d..(r + 1) * d];
            let mean = xr.iter().copied().sum::<T>() * inv_d;
            let var = xr.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let xh = (xr[i] - mean) * rs;
                xhat[r * d + i] = xh;
                y[r * d + i] = xh * gain[i] + bias[i];
            }
        }
        (y, NormCache { xhat, rstd })
    }

    pub fn backward<T: Real>(
        &self,
        params: &[T],
        grads: &mut [T],
        cache: &NormCache<T>,
        dy: &[T],
    ) -> Vec<T> {
        let d = self.dim;
        let rows = dy.len() / d;
        let inv_d = T::one() / T::of(d as f64);
        let mut dx = vec![T::zero(); dy.len()];
        for r in 0..rows {
            let dyr = &dy[r * d..(r + 1) * d];
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let mut sum_dxh = T::zero();
            let mut sum_dxh_xh = T::zero();
            for i in 0..d {
                grads[self.g + i] += dyr[i] * xh[i];
                grads[self.b + i] += dyr[i];
                let dxh = dyr[i] * params[self.g + i];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh[i];
            }
            let rs = cache.rstd[r];
            for i in 0..d {
                let dxh = dyr[i] * params[self.g + i];
                dx[r * d + i] = rs * (dxh - inv_d * sum_dxh - xh[i] * inv_d * sum_dxh_xh);
            }
        }
        dx
    }
}

// tanh approximation of GELU
struct Gelu<T> {
    c: T,
    a: T,
    a3: T,
    half: T,
}

impl<T: Real> Gelu<T> {
    fn new() -> Self {
        Gelu {
            c: T::of((2.0 / std::f64::consts::PI).sqrt()),
            a: T::of(0.044715),
            a3: T::of(3.0 * 0.044715),
            half: T::of(0.5),
        }
    }

    #[inline]
    fn tanh(u: T) -> T {
        // libm tanh is several times slower than exp on f32
        let two = T::one() + T::one();
        T::one() - two / ((two * u).exp() + T::one())
    }

    #[inline]
    fn value(&self, x: T) -> T {
        let th = Self::tanh(self.c * (x + self.a * x * x * x));
        self.half * x * (T::one() + th)
    }

    #[inline]
    fn derivative(&self, x: T) -> T {
        let th = Self::tanh(self.c * (x + self.a * x * x * x));
        let dinner = self.c * (T::one() + self.a3 * x * x);
        self.half * (T::one() + th) + self.half * x * (T::one() - th * th) * dinner
    }
}

pub fn gelu_forward<T: Real>(x: &[T]) -> Vec<T> {
    let g = Gelu::new();
    x.iter().map(|v| g.value(*v)).collect()
}

pub fn gelu_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    let g = Gelu::new();
    x.iter().zip(dy).map(|(v, d)| g.derivative(*v) * *d).collect()
}

/// Strided view of per-row vectors used as attention operands: row `i` of
/// batch item `b` starts at `(b * n + i) * stride + offset`.
#[derive(Clone, Copy)]
pub struct Operand {
    pub stride: usize,
    pub offset: usize,
    pub n: usize,
}

impl Operand {
    fn at(&self, b: usize, i: usize, head_off: usize) -> usize {
        (b * self.n + i) * self.stride + self.offset + head_off
    }
}

pub struct AttnShape {
    pub batch: usize,
    pub heads: usize,
    pub head_dim: usize,
}

/// `c = a @ b (+ c)` on strided sub-matrices of larger buffers.
#[allow(clippy::too_many_arguments)]
fn strided_gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_off: usize,
    (rsa, csa): (usize, usize),
    b: &[T],
    b_off: usize,
    (rsb, csb): (usize, usize),
    c: &mut [T],
    c_off: usize,
    (rsc, csc): (usize, usize),
    accumulate: bool,
) {
    let last = |off: usize, rs: usize, cs: usize, r: usize, cl: usize| off + (r - 1) * rs + (cl - 1) * cs;
    assert!(last(a_off, rsa, csa, m, k) < a.len());
    assert!(last(b_off, rsb, csb, k, n) < b.len());
    assert!(last(c_off, rsc, csc, m, n) < c.len());
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the last element of every operand was bounds-checked above and
    // all strides are non-negative.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr().add(a_off),
            rsa as isize,
            csa as isize,
            b.as_ptr().add(b_off),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr().add(c_off),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Multi-head scaled dot-product attention without masking. Returns the
/// concatenated head outputs (`batch * q.n x heads * head_dim`) and the
/// softmax probabilities for the backward pass.
pub fn attention_forward<T: Real>(
    shape: &AttnShape,
    qbuf: &[T],
    q: Operand,
    kvbuf: &[T],
    k: Operand,
    v: Operand,
) -> (Vec<T>, Vec<T>) {
    let width = shape.heads * shape.head_dim;
    let (nq, nk, dh) = (q.n, k.n, shape.head_dim);
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut out = vec![T::zero(); shape.batch * nq * width];
    let mut probs = vec![T::zero(); shape.batch * shape.heads * nq * nk];
    for b in 0..shape.batch {
        for h in 0..shape.heads {
            let ho = h * dh;
            let p_off = (b * shape.heads + h) * nq * nk;
            strided_gemm(
                nq, dh, nk,
                qbuf, q.at(b, 0, ho), (q.stride, 1),
                kvbuf, k.at(b, 0, ho), (1, k.stride),
                &mut probs, p_off, (nk, 1),
                false,
            );
            for row in probs[p_off..p_off + nq * nk].chunks_exact_mut(nk) {
                let mut max = T::neg_infinity();
                for s in row.iter_mut() {
                    *s *= scale;
                    max = max.max(*s);
                }
                let mut total = T::zero();
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let inv = T::one() / total;
                for s in row.iter_mut() {
                    *s *= inv;
                }
            }
            strided_gemm(
                nq, nk, dh,
                &probs, p_off, (nk, 1),
                kvbuf, v.at(b, 0, ho), (v.stride, 1),
                &mut out, b * nq * width + ho, (width, 1),
                false,
            );
        }
    }
    (out, probs)
}

/// Backward of [`attention_forward`]. Accumulates `dq` into `dqbuf` and
/// `dk`, `dv` into `dkvbuf`, using the same operand layouts.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Real>(
    shape: &AttnShape,
    dout: &[T],
    probs: &[T],
    qbuf: &[T],
    q: Operand,
    kvbuf: &[T],
    k: Operand,
    v: Operand,
    dqbuf: &mut [T],
    dkvbuf: &mut [T],
) {
    let width = shape.heads * shape.head_dim;
    let (nq, nk, dh) = (q.n, k.n, shape.head_dim);
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut ds = vec![T::zero(); nq * nk];
    for b in 0..shape.batch {
        for h in 0..shape.heads {
            let ho = h * dh;
            let p_off = (b * shape.heads + h) * nq * nk;
            let o_off = b * nq * width + ho;
            // dP = dO V^T
            strided_gemm(
                nq, dh, nk,
                dout, o_off, (width, 1),
                kvbuf, v.at(b, 0, ho), (1, v.stride),
                &mut ds, 0, (nk, 1),
                false,
            );
            // dV += P^T dO
            strided_gemm(
                nk, nq, dh,
                probs, p_off, (1, nk),
                dout, o_off, (width, 1),
                dkvbuf, v.at(b, 0, ho), (v.stride, 1),
                true,
            );
            let p = &probs[p_off..p_off + nq * nk];
            for (drow, prow) in ds.chunks_exact_mut(nk).zip(p.chunks_exact(nk)) {
                let dot: T = drow.iter().zip(prow).map(|(d, pp)| *d * *pp).sum();
                for (d, pp) in drow.iter_mut().zip(prow) {
                    *d = *pp * (*d - dot) * scale;
                }
            }
            // dQ += dS K ; dK += dS^T Q
            strided_gemm(
                nq, nk, dh,
                &ds, 0, (nk, 1),
                kvbuf, k.at(b, 0, ho), (k.stride, 1),
                dqbuf, q.at(b, 0, ho), (q.stride, 1),
                true,
            );
            strided_gemm(
                nk, nq, dh,
                &ds, 0, (1, nk),
                qbuf, q.at(b, 0, ho), (q.stride, 1),
                dkvbuf, k.at(b, 0, ho), (k.stride, 1),
                true,
            );
        }
    }
}
