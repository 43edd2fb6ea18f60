//! Primitive tensor operations with reverse-mode backward passes.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::kernels::{mm_acc, mm_nt_acc, mm_tn_acc};
use super::tape::BackwardFn;
use super::{joint_tape, GradientTape, NodeRef, Tensor};

fn track<T: Scalar>(
    tape: Option<&GradientTape<T>>,
    make_backward: impl FnOnce() -> BackwardFn<T>,
) -> Option<NodeRef<T>> {
    tape.map(|tp| NodeRef {
        tape: tp.clone(),
        id: tp.record(Some(make_backward())),
    })
}

fn shape_err<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != other.shape() {
            return Err(shape_err("add", self, other));
        }
        let out: Vec<T> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a + b)
            .collect();
        let len = out.len();
        let tape = joint_tape(&[self, other]);
        let node = track(tape, || {
            let pa = tape.and_then(|t| self.node_on(t));
            let pb = tape.and_then(|t| other.node_on(t));
            Box::new(move |g, grads| {
                if let Some(ia) = pa {
                    let buf = grads.accum(ia, len);
                    for (d, &gv) in buf.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if let Some(ib) = pb {
                    let buf = grads.accum(ib, len);
                    for (d, &gv) in buf.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            })
        });
        Ok(Tensor::from_parts(self.shape().to_vec(), out, node))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != other.shape() {
            return Err(shape_err("sub", self, other));
        }
        let out: Vec<T> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a - b)
            .collect();
        let len = out.len();
        let tape = joint_tape(&[self, other]);
        let node = track(tape, || {
            let pa = tape.and_then(|t| self.node_on(t));
            let pb = tape.and_then(|t| other.node_on(t));
            Box::new(move |g, grads| {
                if let Some(ia) = pa {
                    let buf = grads.accum(ia, len);
                    for (d, &gv) in buf.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if let Some(ib) = pb {
                    let buf = grads.accum(ib, len);
                    for (d, &gv) in buf.iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            })
        });
        Ok(Tensor::from_parts(self.shape().to_vec(), out, node))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != other.shape() {
            return Err(shape_err("mul", self, other));
        }
        let out: Vec<T> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let len = out.len();
        let tape = joint_tape(&[self, other]);
        let node = track(tape, || {
            let pa = tape.and_then(|t| self.node_on(t));
            let pb = tape.and_then(|t| other.node_on(t));
            let a = self.data_arc();
            let b = other.data_arc();
            Box::new(move |g, grads| {
                if let Some(ia) = pa {
                    let buf = grads.accum(ia, len);
                    for i in 0..len {
                        buf[i] += g[i] * b[i];
                    }
                }
                if let Some(ib) = pb {
                    let buf = grads.accum(ib, len);
                    for i in 0..len {
                        buf[i] += g[i] * a[i];
                    }
                }
            })
        });
        Ok(Tensor::from_parts(self.shape().to_vec(), out, node))
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&a| a + c).collect();
        let len = out.len();
        let tape = self.tape();
        let node = track(tape, || {
            let pa = self.node_id();
            Box::new(move |g: &[T], grads: &mut super::Gradients<T>| {
                if let Some(ia) = pa {
                    let buf = grads.accum(ia, len);
                    for (d, &gv) in buf.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            })
        });
        Tensor::from_parts(self.shape().to_vec(), out, node)
    }

    pub fn mul_scalar(&self, c: T) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&a| a * c).collect();
        let len = out.len();
        let tape = self.tape();
        let node = track(tape, || {
            let pa = self.node_id();
            Box::new(move |g: &[T], grads: &mut super::Gradients<T>| {
                if let Some(ia) = pa {
                    let buf = grads.accum(ia, len);
                    for (d, &gv) in buf.iter_mut().zip(g) {
                        *d += gv * c;
                    }
                }
            })
        });
        Tensor::from_parts(self.shape().to_vec(), out, node)
    }

    /// `c - x` elementwise.
    pub fn rsub_scalar(&self, c: T) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&a| c - a).collect();
        let len = out.len();
        let tape = self.tape();
        let node = track(tape, || {
            let pa = self.node_id();
            Box::new(move |g: &[T], grads: &mut super::Gradients<T>| {
                if let Some(ia) = pa {
                    let buf = grads.accum(ia, len);
                    for (d, &gv) in buf.iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            })
        });
        Tensor::from_parts(self.shape().to_vec(), out, node)
    }

    /// Matrix product `self[m×k] · other[k×n]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if self.shape().len() != 2 || other.shape().len() != 2 || k != k2 {
            return Err(shape_err("matmul", self, other));
        }
        let mut out = vec![T::zero(); m * n];
        mm_acc(self.data(), other.data(), &mut out, m, k, n);
        let tape = joint_tape(&[self, other]);
        let node = track(tape, || {
            let pa = tape.and_then(|t| self.node_on(t));
            let pb = tape.and_then(|t| other.node_on(t));
            let a = self.data_arc();
            let b = other.data_arc();
            Box::new(move |g, grads| {
                if let Some(ia) = pa {
                    // dA += g · Bᵀ
                    mm_nt_acc(g, &b, grads.accum(ia, m * k), m, n, k);
                }
                if let Some(ib) = pb {
                    // dB += Aᵀ · g
                    mm_tn_acc(&a, g, grads.accum(ib, k * n), m, k, n);
                }
            })
        });
        Ok(Tensor::from_parts(vec![m, n], out, node))
    }

    /// `self[m×k] · otherᵀ` where `other` is `n×k`.
    pub fn matmul_nt(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = (self.rows(), self.cols());
        let (n, k2) = (other.rows(), other.cols());
        if self.shape().len() != 2 || other.shape().len() != 2 || k != k2 {
            return Err(shape_err("matmul_nt", self, other));
        }
        let mut out = vec![T::zero(); m * n];
        mm_nt_acc(self.data(), other.data(), &mut out, m, k, n);
        let tape = joint_tape(&[self, other]);
        let node = track(tape, || {
            let pa = tape.and_then(|t| self.node_on(t));
            let pb = tape.and_then(|t| other.node_on(t));
            let a = self.data_arc();
            let b = other.data_arc();
            Box::new(move |g, grads| {
                if let Some(ia) = pa {
                    // dA += g · B
                    mm_acc(g, &b, grads.accum(ia, m * k), m, n, k);
                }
                if let Some(ib) = pb {
                    // dB += gᵀ · A
                    mm_tn_acc(g, &a, grads.accum(ib, n * k), m, n, k);
                }
            })
        });
        Ok(Tensor::from_parts(vec![m, n], out, node))
    }

    /// Numerically stabilized softmax along the last axis. Slices sum to 1.
    pub fn softmax(&self) -> Tensor<T> {
        let cols = self.cols();
        let rows = self.numel() / cols;
        let x = self.data();
        let mut out = vec![T::zero(); self.numel()];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let orow = &mut out[r * cols..(r + 1) * cols];
            softmax_row(row, orow);
        }
        let len = out.len();
        let tape = self.tape();
        let node = track(tape, || {
            let pa = self.node_id();
            let p = Arc::new(out.clone());
            Box::new(move |g: &[T], grads: &mut super::Gradients<T>| {
                if let Some(ia) = pa {
                    let buf = grads.accum(ia, len);
                    for r in 0..rows {
                        let off = r * cols;
                        let mut dot = T::zero();
                        for j in 0..cols {
                            dot += g[off + j] * p[off + j];
                        }
                        for j in 0..cols {
                            buf[off + j] += p[off + j] * (g[off + j] - dot);
                        }
                    }
                }
            })
        });
        Tensor::from_parts(self.shape().to_vec(), out, node)
    }

    /// Softmax over a square score matrix where row `i` may attend only to
    /// columns `j <= i`; masked entries are exactly zero.
    pub fn causal_masked_softmax(&self) -> Result<Tensor<T>> {
        let n = self.cols();
        if self.shape().len() != 2 || self.rows() != n {
            return Err(Error::contract(format!(
                "causal_masked_softmax expects a square matrix, got {:?}",
                self.shape()
            )));
        }
        let x = self.data();
        let mut out = vec![T::zero(); n * n];
        for i in 0..n {
            let row = &x[i * n..i * n + i + 1];
            let orow = &mut out[i * n..i * n + i + 1];
            softmax_row(row, orow);
        }
        let len = out.len();
        let tape = self.tape();
        let node = track(tape, || {
            let pa = self.node_id();
            let p = Arc::new(out.clone());
            Box::new(move |g: &[T], grads: &mut super::Gradients<T>| {
                if let Some(ia) = pa {
                    let buf = grads.accum(ia, len);
                    for i in 0..n {
                        let off = i * n;
                        let mut dot = T::zero();
                        for j in 0..=i {
                            dot += g[off + j] * p[off + j];
                        }
                        for j in 0..=i {
                            buf[off + j] += p[off + j] * (g[off + j] - dot);
                        }
                    }
                }
            })
        });
        Ok(Tensor::from_parts(vec![n, n], out, node))
    }

    /// Root-mean-square normalization with learnable elementwise scale.
    pub fn rms_norm(&self, scale: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        let h = self.cols();
        if scale.numel() != h {
            return Err(shape_err("rms_norm", self, scale));
        }
        let rows = self.numel() / h;
        let x = self.data();
        let s = scale.data();
        let mut out = vec![T::zero(); self.numel()];
        let mut inv_rms = vec![T::zero(); rows];
        let hn = T::cast(h as f64);
        for r in 0..rows {
            let row = &x[r * h..(r + 1) * h];
            let mut ms = T::zero();
            for &v in row {
                ms += v * v;
            }
            let inv = (ms / hn + eps).sqrt().recip();
            inv_rms[r] = inv;
            let orow = &mut out[r * h..(r + 1) * h];
            for j in 0..h {
                orow[j] = row[j] * inv * s[j];
            }
        }
        let tape = joint_tape(&[self, scale]);
        let node = track(tape, || {
            let px = tape.and_then(|t| self.node_on(t));
            let ps = tape.and_then(|t| scale.node_on(t));
            let xd = self.data_arc();
            let sd = scale.data_arc();
            let inv = Arc::new(inv_rms);
            Box::new(move |g, grads| {
                if let Some(is) = ps {
                    let buf = grads.accum(is, h);
                    for r in 0..rows {
                        let off = r * h;
                        for j in 0..h {
                            buf[j] += g[off + j] * xd[off + j] * inv[r];
                        }
                    }
                }
                if let Some(ix) = px {
                    let buf = grads.accum(ix, rows * h);
                    for r in 0..rows {
                        let off = r * h;
                        // u = g ⊙ scale; dx = u/rms − x · (u·x) / (H · rms³)
                        let mut ux = T::zero();
                        for j in 0..h {
                            ux += g[off + j] * sd[j] * xd[off + j];
                        }
                        let i1 = inv[r];
                        let coef = ux * i1 * i1 * i1 / hn;
                        for j in 0..h {
                            buf[off + j] += g[off + j] * sd[j] * i1 - xd[off + j] * coef;
                        }
                    }
                }
            })
        });
        Ok(Tensor::from_parts(self.shape().to_vec(), out, node))
    }

    /// `x · sigmoid(x)` elementwise.
    pub fn silu(&self) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&v| v * sigmoid_val(v)).collect();
        let len = out.len();
        let tape = self.tape();
        let node = track(tape, || {
            let pa = self.node_id();
            let x = self.data_arc();
            Box::new(move |g: &[T], grads: &mut super::Gradients<T>| {
                if let Some(ia) = pa {
                    let buf = grads.accum(ia, len);
                    for i in 0..len {
                        let s = sigmoid_val(x[i]);
                        buf[i] += g[i] * (s + x[i] * s * (T::one() - s));
                    }
                }
            })
        });
        Tensor::from_parts(self.shape().to_vec(), out, node)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&v| sigmoid_val(v)).collect();
        let len = out.len();
        let tape = self.tape();
        let node = track(tape, || {
            let pa = self.node_id();
            let y = Arc::new(out.clone());
            Box::new(move |g: &[T], grads: &mut super::Gradients<T>| {
                if let Some(ia) = pa {
                    let buf = grads.accum(ia, len);
                    for i in 0..len {
                        buf[i] += g[i] * y[i] * (T::one() - y[i]);
                    }
                }
            })
        });
        Tensor::from_parts(self.shape().to_vec(), out, node)
    }

    /// `ln(max(x, eps))`; gradient is zero where the clamp engaged.
    pub fn ln_clamped(&self, eps: T) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&v| v.max(eps).ln()).collect();
        let len = out.len();
        let tape = self.tape();
        let node = track(tape, || {
            let pa = self.node_id();
            let x = self.data_arc();
            Box::new(move |g: &[T], grads: &mut super::Gradients<T>| {
                if let Some(ia) = pa {
                    let buf = grads.accum(ia, len);
                    for i in 0..len {
                        if x[i] > eps {
                            buf[i] += g[i] / x[i];
                        }
                    }
                }
            })
        });
        Tensor::from_parts(self.shape().to_vec(), out, node)
    }

    /// Scale row `r` of a matrix by `s[r]`.
    pub fn row_scale(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        let cols = self.cols();
        let rows = self.numel() / cols;
        if s.numel() != rows {
            return Err(shape_err("row_scale", self, s));
        }
        let x = self.data();
        let sv = s.data();
        let mut out = vec![T::zero(); self.numel()];
        for r in 0..rows {
            for j in 0..cols {
                out[r * cols + j] = x[r * cols + j] * sv[r];
            }
        }
        let len = out.len();
        let tape = joint_tape(&[self, s]);
        let node = track(tape, || {
            let px = tape.and_then(|t| self.node_on(t));
            let ps = tape.and_then(|t| s.node_on(t));
            let xd = self.data_arc();
            let sd = s.data_arc();
            Box::new(move |g, grads| {
                if let Some(ix) = px {
                    let buf = grads.accum(ix, len);
                    for r in 0..rows {
                        for j in 0..cols {
                            buf[r * cols + j] += g[r * cols + j] * sd[r];
                        }
                    }
                }
                if let Some(is) = ps {
                    let buf = grads.accum(is, rows);
                    for r in 0..rows {
                        let mut acc = T::zero();
                        for j in 0..cols {
                            acc += g[r * cols + j] * xd[r * cols + j];
                        }
                        buf[r] += acc;
                    }
                }
            })
        });
        Ok(Tensor::from_parts(self.shape().to_vec(), out, node))
    }

    /// Scale column `j` of a matrix by `s[j]`.
    pub fn scale_cols(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        let cols = self.cols();
        let rows = self.numel() / cols;
        if s.numel() != cols {
            return Err(shape_err("scale_cols", self, s));
        }
        let x = self.data();
        let sv = s.data();
        let mut out = vec![T::zero(); self.numel()];
        for r in 0..rows {
            for j in 0..cols {
                out[r * cols + j] = x[r * cols + j] * sv[j];
            }
        }
        let len = out.len();
        let tape = joint_tape(&[self, s]);
        let node = track(tape, || {
            let px = tape.and_then(|t| self.node_on(t));
            let ps = tape.and_then(|t| s.node_on(t));
            let xd = self.data_arc();
            let sd = s.data_arc();
            Box::new(move |g, grads| {
                if let Some(ix) = px {
                    let buf = grads.accum(ix, len);
                    for r in 0..rows {
                        for j in 0..cols {
                            buf[r * cols + j] += g[r * cols + j] * sd[j];
                        }
                    }
                }
                if let Some(is) = ps {
                    let buf = grads.accum(is, cols);
                    for r in 0..rows {
                        for j in 0..cols {
                            buf[j] += g[r * cols + j] * xd[r * cols + j];
                        }
                    }
                }
            })
        });
        Ok(Tensor::from_parts(self.shape().to_vec(), out, node))
    }

    /// Add a length-C vector to every row of an R×C matrix.
    pub fn add_row(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        let cols = self.cols();
        let rows = self.numel() / cols;
        if b.numel() != cols {
            return Err(shape_err("add_row", self, b));
        }
        let x = self.data();
        let bv = b.data();
        let mut out = vec![T::zero(); self.numel()];
        for r in 0..rows {
            for j in 0..cols {
                out[r * cols + j] = x[r * cols + j] + bv[j];
            }
        }
        let len = out.len();
        let tape = joint_tape(&[self, b]);
        let node = track(tape, || {
            let px = tape.and_then(|t| self.node_on(t));
            let pb = tape.and_then(|t| b.node_on(t));
            Box::new(move |g, grads| {
                if let Some(ix) = px {
                    let buf = grads.accum(ix, len);
                    for (d, &gv) in buf.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if let Some(ib) = pb {
                    let buf = grads.accum(ib, cols);
                    for r in 0..rows {
                        for j in 0..cols {
                            buf[j] += g[r * cols + j];
                        }
                    }
                }
            })
        });
        Ok(Tensor::from_parts(self.shape().to_vec(), out, node))
    }

    /// Subtract each row's mean from the row.
    pub fn center_rows(&self) -> Tensor<T> {
        let cols = self.cols();
        let rows = self.numel() / cols;
        let x = self.data();
        let cn = T::cast(cols as f64);
        let mut out = vec![T::zero(); self.numel()];
        for r in 0..rows {
            let mut mean = T::zero();
            for j in 0..cols {
                mean += x[r * cols + j];
            }
            mean = mean / cn;
            for j in 0..cols {
                out[r * cols + j] = x[r * cols + j] - mean;
            }
        }
        let len = out.len();
        let tape = self.tape();
        let node = track(tape, || {
            let pa = self.node_id();
            Box::new(move |g: &[T], grads: &mut super::Gradients<T>| {
                if let Some(ia) = pa {
                    let buf = grads.accum(ia, len);
                    for r in 0..rows {
                        let mut gmean = T::zero();
                        for j in 0..cols {
                            gmean += g[r * cols + j];
                        }
                        gmean = gmean / cn;
                        for j in 0..cols {
                            buf[r * cols + j] += g[r * cols + j] - gmean;
                        }
                    }
                }
            })
        });
        Tensor::from_parts(self.shape().to_vec(), out, node)
    }

    /// `y[r,c] = Σ_{c' >= c} x[r,c']` — per-row suffix sums.
    pub fn suffix_sum_cols(&self) -> Tensor<T> {
        let cols = self.cols();
        let rows = self.numel() / cols;
        let x = self.data();
        let mut out = vec![T::zero(); self.numel()];
        for r in 0..rows {
            let mut acc = T::zero();
            for j in (0..cols).rev() {
                acc += x[r * cols + j];
                out[r * cols + j] = acc;
            }
        }
        let len = out.len();
        let tape = self.tape();
        let node = track(tape, || {
            let pa = self.node_id();
            Box::new(move |g: &[T], grads: &mut super::Gradients<T>| {
                if let Some(ia) = pa {
                    let buf = grads.accum(ia, len);
                    for r in 0..rows {
                        let mut acc = T::zero();
                        for j in 0..cols {
                            acc += g[r * cols + j];
                            buf[r * cols + j] += acc;
                        }
                    }
                }
            })
        });
        Tensor::from_parts(self.shape().to_vec(), out, node)
    }

    /// Columns `lo..hi` of a 2-D tensor.
    pub fn slice_cols(&self, lo: usize, hi: usize) -> Result<Tensor<T>> {
        let cols = self.cols();
        let rows = self.numel() / cols;
        if lo >= hi || hi > cols {
            return Err(Error::contract(format!(
                "slice_cols {}..{} out of range for {} columns",
                lo, hi, cols
            )));
        }
        let width = hi - lo;
        let x = self.data();
        let mut out = vec![T::zero(); rows * width];
        for r in 0..rows {
            out[r * width..(r + 1) * width]
                .copy_from_slice(&x[r * cols + lo..r * cols + hi]);
        }
        let tape = self.tape();
        let node = track(tape, || {
            let pa = self.node_id();
            let total = rows * cols;
            Box::new(move |g: &[T], grads: &mut super::Gradients<T>| {
                if let Some(ia) = pa {
                    let buf = grads.accum(ia, total);
                    for r in 0..rows {
                        for j in 0..width {
                            buf[r * cols + lo + j] += g[r * width + j];
                        }
                    }
                }
            })
        });
        Ok(Tensor::from_parts(vec![rows, width], out, node))
    }

    /// Select rows by index; duplicate indices allowed.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let cols = self.cols();
        let rows = self.numel() / cols;
        for &i in idx {
            if i >= rows {
                return Err(Error::contract(format!(
                    "gather_rows index {} out of range for {} rows",
                    i, rows
                )));
            }
        }
        let x = self.data();
        let mut out = vec![T::zero(); idx.len() * cols];
        for (r, &i) in idx.iter().enumerate() {
            out[r * cols..(r + 1) * cols].copy_from_slice(&x[i * cols..(i + 1) * cols]);
        }
        let tape = self.tape();
        let node = track(tape, || {
            let pa = self.node_id();
            let idx = idx.to_vec();
            let total = rows * cols;
            Box::new(move |g: &[T], grads: &mut super::Gradients<T>| {
                if let Some(ia) = pa {
                    let buf = grads.accum(ia, total);
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..cols {
                            buf[i * cols + j] += g[r * cols + j];
                        }
                    }
                }
            })
        });
        Ok(Tensor::from_parts(vec![idx.len(), cols], out, node))
    }

    /// View with a new shape; element count must match.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::contract(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        let out = self.data().to_vec();
        let tape = self.tape();
        let node = track(tape, || {
            let pa = self.node_id();
            Box::new(move |g: &[T], grads: &mut super::Gradients<T>| {
                if let Some(ia) = pa {
                    let buf = grads.accum(ia, numel);
                    for (d, &gv) in buf.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            })
        });
        Ok(Tensor::from_parts(shape, out, node))
    }

    /// Sum of all elements, as a length-1 tensor.
    pub fn sum_all(&self) -> Tensor<T> {
        let mut acc = T::zero();
        for &v in self.data() {
            acc += v;
        }
        let len = self.numel();
        let tape = self.tape();
        let node = track(tape, || {
            let pa = self.node_id();
            Box::new(move |g: &[T], grads: &mut super::Gradients<T>| {
                if let Some(ia) = pa {
                    let buf = grads.accum(ia, len);
                    for d in buf.iter_mut() {
                        *d += g[0];
                    }
                }
            })
        });
        Tensor::from_parts(vec![1], vec![acc], node)
    }

    /// Per-row negative log-likelihood of `targets` under softmax(logits).
    pub fn cross_entropy_rows(&self, targets: &[u32]) -> Result<Tensor<T>> {
        let v = self.cols();
        let rows = self.numel() / v;
        if targets.len() != rows {
            return Err(Error::contract(format!(
                "cross_entropy_rows: {} rows vs {} targets",
                rows,
                targets.len()
            )));
        }
        for &t in targets {
            if t as usize >= v {
                return Err(Error::OutOfVocab { id: t, vocab: v });
            }
        }
        let x = self.data();
        let mut probs = vec![T::zero(); rows * v];
        let mut out = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &x[r * v..(r + 1) * v];
            let prow = &mut probs[r * v..(r + 1) * v];
            softmax_row(row, prow);
            let p_t = prow[targets[r] as usize].max(T::cast(1e-300));
            out[r] = -p_t.ln();
        }
        let tape = self.tape();
        let node = track(tape, || {
            let pa = self.node_id();
            let probs = Arc::new(probs);
            let targets = targets.to_vec();
            Box::new(move |g: &[T], grads: &mut super::Gradients<T>| {
                if let Some(ia) = pa {
                    let buf = grads.accum(ia, rows * v);
                    for r in 0..rows {
                        let t = targets[r] as usize;
                        for j in 0..v {
                            let ind = if j == t { T::one() } else { T::zero() };
                            buf[r * v + j] += g[r] * (probs[r * v + j] - ind);
                        }
                    }
                }
            })
        });
        Ok(Tensor::from_parts(vec![rows], out, node))
    }
}

#[inline]
fn sigmoid_val<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let mut m = row[0];
    for &v in row.iter() {
        if v > m {
            m = v;
        }
    }
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - m).exp();
        *o = e;
        sum += e;
    }
    let inv = sum.recip();
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

/// Row gather from an embedding table; backward scatters into the table.
pub fn embedding_lookup<T: Scalar>(table: &Tensor<T>, ids: &[u32]) -> Result<Tensor<T>> {
    let vocab = table.rows();
    let h = table.cols();
    for &id in ids {
        if id as usize >= vocab {
            return Err(Error::OutOfVocab { id, vocab });
        }
    }
    let x = table.data();
    let mut out = vec![T::zero(); ids.len() * h];
    for (r, &id) in ids.iter().enumerate() {
        let i = id as usize;
        out[r * h..(r + 1) * h].copy_from_slice(&x[i * h..(i + 1) * h]);
    }
    let tape = table.tape();
    let node = track(tape, || {
        let pa = table.node_id();
        let ids = ids.to_vec();
        let total = vocab * h;
        Box::new(move |g: &[T], grads: &mut super::Gradients<T>| {
            if let Some(ia) = pa {
                let buf = grads.accum(ia, total);
                for (r, &id) in ids.iter().enumerate() {
                    let i = id as usize;
                    for j in 0..h {
                        buf[i * h + j] += g[r * h + j];
                    }
                }
            }
        })
    });
    Ok(Tensor::from_parts(vec![ids.len(), h], out, node))
}

/// Concatenate 2-D tensors with equal row counts along the column axis.
pub fn concat_cols<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::contract("concat_cols of zero tensors"));
    }
    let rows = parts[0].rows();
    let mut widths = Vec::with_capacity(parts.len());
    let mut total = 0;
    for p in parts {
        if p.rows() != rows {
            return Err(shape_err("concat_cols", parts[0], p));
        }
        widths.push(p.cols());
        total += p.cols();
    }
    let mut out = vec![T::zero(); rows * total];
    let mut off = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        let d = p.data();
        for r in 0..rows {
            out[r * total + off..r * total + off + w]
                .copy_from_slice(&d[r * w..(r + 1) * w]);
        }
        off += w;
    }
    let tape = joint_tape(parts);
    let node = track(tape, || {
        let parents: Vec<Option<usize>> = parts
            .iter()
            .map(|p| tape.and_then(|t| p.node_on(t)))
            .collect();
        let widths = widths.clone();
        Box::new(move |g: &[T], grads: &mut super::Gradients<T>| {
            let mut off = 0;
            for (parent, &w) in parents.iter().zip(&widths) {
                if let Some(ip) = parent {
                    let buf = grads.accum(*ip, rows * w);
                    for r in 0..rows {
                        for j in 0..w {
                            buf[r * w + j] += g[r * total + off + j];
                        }
                    }
                }
                off += w;
            }
        })
    });
    Ok(Tensor::from_parts(vec![rows, total], out, node))
}

/// Straight-through gate: forward takes the (untracked) hard values, backward
/// routes the gradient to the differentiable surrogate.
pub fn st_gate<T: Scalar>(hard: &Tensor<T>, soft: &Tensor<T>) -> Result<Tensor<T>> {
    if hard.shape() != soft.shape() {
        return Err(shape_err("st_gate", hard, soft));
    }
    assert!(
        !hard.is_tracked(),
        "st_gate expects an untracked hard forward value"
    );
    let out = hard.data().to_vec();
    let len = out.len();
    let tape = soft.tape();
    let node = track(tape, || {
        let ps = soft.node_id();
        Box::new(move |g: &[T], grads: &mut super::Gradients<T>| {
            if let Some(is) = ps {
                let buf = grads.accum(is, len);
                for (d, &gv) in buf.iter_mut().zip(g) {
                    *d += gv;
                }
            }
        })
    });
    Ok(Tensor::from_parts(hard.shape().to_vec(), out, node))
}

/// Per-row hard gate with a straight-through backward.
///
/// Forward selects row `i` from `new` where `active[i]` and from `prev`
/// otherwise — a bitwise copy, so frozen rows stay frozen exactly. Backward
/// treats the output as the convex mixture `ã·new + (1-ã)·prev`, where `ã`
/// is the differentiable surrogate gate (`soft`) when given and the hard 0/1
/// gate otherwise.
pub fn gated_rows<T: Scalar>(
    new: &Tensor<T>,
    prev: &Tensor<T>,
    active: &[bool],
    soft: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    if new.shape() != prev.shape() {
        return Err(shape_err("gated_rows", new, prev));
    }
    let cols = new.cols();
    let rows = new.numel() / cols;
    if active.len() != rows {
        return Err(Error::contract(format!(
            "gated_rows: {} gates for {} rows",
            active.len(),
            rows
        )));
    }
    if let Some(s) = soft {
        if s.numel() != rows {
            return Err(shape_err("gated_rows", new, s));
        }
    }
    let nd = new.data();
    let pd = prev.data();
    let mut out = vec![T::zero(); new.numel()];
    for r in 0..rows {
        let src = if active[r] { nd } else { pd };
        out[r * cols..(r + 1) * cols].copy_from_slice(&src[r * cols..(r + 1) * cols]);
    }
    let mut operands: Vec<&Tensor<T>> = vec![new, prev];
    if let Some(s) = soft {
        operands.push(s);
    }
    let tape = joint_tape(&operands);
    let node = track(tape, || {
        let pn = tape.and_then(|t| new.node_on(t));
        let pp = tape.and_then(|t| prev.node_on(t));
        let ps = soft.and_then(|s| tape.and_then(|t| s.node_on(t)));
        let gates: Vec<T> = match soft {
            Some(s) => s.data().to_vec(),
            None => active
                .iter()
                .map(|&a| if a { T::one() } else { T::zero() })
                .collect(),
        };
        let nd = new.data_arc();
        let pd = prev.data_arc();
        Box::new(move |g, grads| {
            if let Some(id) = pn {
                let buf = grads.accum(id, rows * cols);
                for r in 0..rows {
                    for j in 0..cols {
                        buf[r * cols + j] += g[r * cols + j] * gates[r];
                    }
                }
            }
            if let Some(id) = pp {
                let buf = grads.accum(id, rows * cols);
                for r in 0..rows {
                    let keep = T::one() - gates[r];
                    for j in 0..cols {
                        buf[r * cols + j] += g[r * cols + j] * keep;
                    }
                }
            }
            if let Some(id) = ps {
                let buf = grads.accum(id, rows);
                for r in 0..rows {
                    let mut acc = T::zero();
                    for j in 0..cols {
                        acc += g[r * cols + j] * (nd[r * cols + j] - pd[r * cols + j]);
                    }
                    buf[r] += acc;
                }
            }
        })
    });
    Ok(Tensor::from_parts(new.shape().to_vec(), out, node))
}

/// Precomputed rotary position-encoding angles for positions `0..max_len`.
pub struct RopeTable<T: Scalar> {
    half: usize,
    max_len: usize,
    cos: Arc<Vec<T>>,
    sin: Arc<Vec<T>>,
}

impl<T: Scalar> Clone for RopeTable<T> {
    fn clone(&self) -> Self {
        RopeTable {
            half: self.half,
            max_len: self.max_len,
            cos: Arc::clone(&self.cos),
            sin: Arc::clone(&self.sin),
        }
    }
}

impl<T: Scalar> RopeTable<T> {
    pub fn new(max_len: usize, head_dim: usize, base: f64) -> Self {
        assert!(head_dim % 2 == 0, "rotary needs an even head dimension");
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_len * half);
        let mut sin = Vec::with_capacity(max_len * half);
        for t in 0..max_len {
            for u in 0..half {
                let theta = (t as f64) * base.powf(-2.0 * u as f64 / head_dim as f64);
                cos.push(T::cast(theta.cos()));
                sin.push(T::cast(theta.sin()));
            }
        }
        RopeTable {
            half,
            max_len,
            cos: Arc::new(cos),
            sin: Arc::new(sin),
        }
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }
}

/// Rotary position encoding applied per head to a T×H matrix whose rows hold
/// absolute positions `pos0..pos0+T`.
pub fn rotary<T: Scalar>(
    x: &Tensor<T>,
    rope: &RopeTable<T>,
    n_heads: usize,
    pos0: usize,
) -> Result<Tensor<T>> {
    let h = x.cols();
    let rows = x.numel() / h;
    if h % n_heads != 0 {
        return Err(Error::contract(format!(
            "hidden size {} not divisible by {} heads",
            h, n_heads
        )));
    }
    let hd = h / n_heads;
    if hd / 2 != rope.half {
        return Err(Error::contract(format!(
            "rope table built for head_dim {}, got {}",
            rope.half * 2,
            hd
        )));
    }
    if pos0 + rows > rope.max_len {
        return Err(Error::SequenceTooLong {
            len: pos0 + rows,
            max: rope.max_len,
        });
    }
    let half = rope.half;
    let xd = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for r in 0..rows {
        let trig = (pos0 + r) * half;
        for head in 0..n_heads {
            let base = r * h + head * hd;
            for u in 0..half {
                let c = rope.cos[trig + u];
                let s = rope.sin[trig + u];
                let x1 = xd[base + 2 * u];
                let x2 = xd[base + 2 * u + 1];
                out[base + 2 * u] = x1 * c - x2 * s;
                out[base + 2 * u + 1] = x1 * s + x2 * c;
            }
        }
    }
    let len = out.len();
    let tape = x.tape();
    let node = track(tape, || {
        let pa = x.node_id();
        let cos = Arc::clone(&rope.cos);
        let sin = Arc::clone(&rope.sin);
        Box::new(move |g: &[T], grads: &mut super::Gradients<T>| {
            if let Some(ia) = pa {
                let buf = grads.accum(ia, len);
                for r in 0..rows {
                    let trig = (pos0 + r) * half;
                    for head in 0..n_heads {
                        let base = r * h + head * hd;
                        for u in 0..half {
                            let c = cos[trig + u];
                            let s = sin[trig + u];
                            let g1 = g[base + 2 * u];
                            let g2 = g[base + 2 * u + 1];
                            buf[base + 2 * u] += g1 * c + g2 * s;
                            buf[base + 2 * u + 1] += -g1 * s + g2 * c;
                        }
                    }
                }
            }
        })
    });
    Ok(Tensor::from_parts(x.shape().to_vec(), out, node))
}

/// Multi-head scaled dot-product attention with a strict causal mask and
/// rotary position encoding applied to `q` and `k`. Inputs are the already
/// projected T×H matrices; heads live in contiguous column groups.
pub fn causal_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    n_heads: usize,
    rope: &RopeTable<T>,
    pos0: usize,
) -> Result<Tensor<T>> {
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(shape_err("causal_attention", q, k));
    }
    let h = q.cols();
    if h % n_heads != 0 {
        return Err(Error::contract(format!(
            "hidden size {} not divisible by {} heads",
            h, n_heads
        )));
    }
    let hd = h / n_heads;
    let qr = rotary(q, rope, n_heads, pos0)?;
    let kr = rotary(k, rope, n_heads, pos0)?;
    let scale = T::cast(1.0 / (hd as f64).sqrt());
    let mut heads = Vec::with_capacity(n_heads);
    for head in 0..n_heads {
        let lo = head * hd;
        let hi = lo + hd;
        let qh = qr.slice_cols(lo, hi)?;
        let kh = kr.slice_cols(lo, hi)?;
        let vh = v.slice_cols(lo, hi)?;
        let scores = qh.matmul_nt(&kh)?.mul_scalar(scale);
        let probs = scores.causal_masked_softmax()?;
        heads.push(probs.matmul(&vh)?);
    }
    let refs: Vec<&Tensor<T>> = heads.iter().collect();
    concat_cols(&refs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{assert_gradients_close, test_tensor};

    fn t2(rows: usize, cols: usize, vals: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(vec![rows, cols], vals).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let eye = t2(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let c = eye.matmul(&a).unwrap();
        assert_eq!(c.to_f64_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let a = t2(1, 2, &[1.0, 2.0]);
        let b = t2(2, 1, &[3.0, 4.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.to_f64_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = t2(2, 3, &[0.0; 6]);
        let b = t2(2, 2, &[0.0; 4]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let a = test_tensor(vec![3, 3], 100 + seed);
            let b = test_tensor(vec![3, 3], 200 + seed);
            assert_gradients_close(
                &[a, b],
                |xs| xs[0].matmul(&xs[1]).unwrap().sum_all(),
                1e-4,
            );
        }
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let x = t2(1, 2, &[0.0, 0.0]);
        let p = x.softmax();
        assert!((p.data()[0] - 0.5).abs() < 1e-12);
        let big = t2(1, 2, &[1000.0, 0.0]);
        let p = big.softmax();
        assert!(p.data()[0] > 1.0 - 1e-9 && p.data()[0].is_finite());
        assert!(p.data()[1] < 1e-9);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = test_tensor(vec![7, 5], 42);
        let p = x.softmax();
        for r in 0..7 {
            let s: f64 = p.data()[r * 5..(r + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_gradient() {
        for seed in 0..5 {
            let x = test_tensor(vec![1, 5], 300 + seed);
            let w = test_tensor(vec![1, 5], 400 + seed);
            assert_gradients_close(
                &[x.clone()],
                |xs| xs[0].softmax().mul(&w).unwrap().sum_all(),
                1e-4,
            );
        }
    }

    #[test]
    fn rms_norm_constant_vector() {
        for c in [0.5, 3.0, 42.0] {
            let x = Tensor::<f64>::full(vec![1, 8], c);
            let scale = Tensor::<f64>::full(vec![8], 1.0);
            let y = x.rms_norm(&scale, 1e-6).unwrap();
            for &v in y.data() {
                assert!((v - 1.0).abs() < 1e-5, "c={c} v={v}");
            }
        }
    }

    #[test]
    fn rms_norm_zero_vector_is_finite() {
        let x = Tensor::<f64>::zeros(vec![1, 4]);
        let scale = Tensor::<f64>::full(vec![4], 1.0);
        let y = x.rms_norm(&scale, 1e-6).unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rms_norm_gradient() {
        for seed in 0..5 {
            let x = test_tensor(vec![3, 6], 500 + seed);
            let s = test_tensor(vec![6], 600 + seed);
            let w = test_tensor(vec![3, 6], 700 + seed);
            assert_gradients_close(
                &[x, s],
                |xs| xs[0].rms_norm(&xs[1], 1e-6).unwrap().mul(&w).unwrap().sum_all(),
                1e-4,
            );
        }
    }

    #[test]
    fn silu_values() {
        let x = t2(1, 3, &[0.0, 30.0, -30.0]);
        let y = x.silu();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 30.0).abs() < 1e-9);
        assert!(y.data()[2].abs() < 1e-9);
    }

    #[test]
    fn silu_sigmoid_gradients() {
        for seed in 0..5 {
            let x = test_tensor(vec![2, 4], 800 + seed);
            let w = test_tensor(vec![2, 4], 900 + seed);
            assert_gradients_close(
                &[x.clone()],
                |xs| xs[0].silu().mul(&w).unwrap().sum_all(),
                1e-4,
            );
            assert_gradients_close(
                &[x],
                |xs| xs[0].sigmoid().mul(&w).unwrap().sum_all(),
                1e-4,
            );
        }
    }

    #[test]
    fn embedding_repeats_rows_and_counts_gradient() {
        let table = t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = embedding_lookup(&table, &[0, 0]).unwrap();
        assert_eq!(out.to_f64_vec(), vec![1.0, 2.0, 1.0, 2.0]);

        let tape = GradientTape::new();
        let w = tape.watch(&table);
        let loss = embedding_lookup(&w, &[0, 2, 0]).unwrap().sum_all();
        let grads = tape.backward(&loss).unwrap();
        let g = grads.get(&w).unwrap();
        // row 0 hit twice, row 1 never, row 2 once
        assert_eq!(g, &[2.0, 2.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn embedding_rejects_out_of_vocab() {
        let table = t2(3, 2, &[0.0; 6]);
        assert!(matches!(
            embedding_lookup(&table, &[3]),
            Err(Error::OutOfVocab { id: 3, vocab: 3 })
        ));
    }

    #[test]
    fn embedding_gradient() {
        for seed in 0..3 {
            let table = test_tensor(vec![4, 3], 1000 + seed);
            let w = test_tensor(vec![3, 3], 1100 + seed);
            assert_gradients_close(
                &[table],
                |xs| {
                    embedding_lookup(&xs[0], &[1, 3, 1])
                        .unwrap()
                        .mul(&w)
                        .unwrap()
                        .sum_all()
                },
                1e-4,
            );
        }
    }

    #[test]
    fn causal_mask_is_strict_and_normalized() {
        let x = test_tensor(vec![4, 4], 7);
        let p = x.causal_masked_softmax().unwrap();
        for i in 0..4 {
            let mut s = 0.0;
            for j in 0..4 {
                let v = p.at(&[i, j]);
                if j > i {
                    assert_eq!(v, 0.0);
                } else {
                    s += v;
                }
            }
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_token_attention_passes_value_through() {
        let rope = RopeTable::<f64>::new(4, 4, 10_000.0);
        let q = test_tensor(vec![1, 8], 1);
        let k = test_tensor(vec![1, 8], 2);
        let v = test_tensor(vec![1, 8], 3);
        let out = causal_attention(&q, &k, &v, 2, &rope, 0).unwrap();
        for (a, b) in out.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_gradient() {
        let rope = RopeTable::<f64>::new(8, 4, 10_000.0);
        for seed in 0..3 {
            let q = test_tensor(vec![3, 8], 1200 + seed);
            let k = test_tensor(vec![3, 8], 1300 + seed);
            let v = test_tensor(vec![3, 8], 1400 + seed);
            let w = test_tensor(vec![3, 8], 1500 + seed);
            assert_gradients_close(
                &[q, k, v],
                |xs| {
                    causal_attention(&xs[0], &xs[1], &xs[2], 2, &rope, 0)
                        .unwrap()
                        .mul(&w)
                        .unwrap()
                        .sum_all()
                },
                1e-3,
            );
        }
    }

    #[test]
    fn rotary_is_norm_preserving_and_differentiable() {
        let rope = RopeTable::<f64>::new(8, 4, 10_000.0);
        let x = test_tensor(vec![3, 8], 22);
        let y = rotary(&x, &rope, 2, 0).unwrap();
        // rotation preserves the squared norm of each pair
        let n_in: f64 = x.data().iter().map(|v| v * v).sum();
        let n_out: f64 = y.data().iter().map(|v| v * v).sum();
        assert!((n_in - n_out).abs() < 1e-9);

        let w = test_tensor(vec![3, 8], 23);
        assert_gradients_close(
            &[x],
            |xs| rotary(&xs[0], &rope, 2, 0).unwrap().mul(&w).unwrap().sum_all(),
            1e-4,
        );
    }

    #[test]
    fn backward_of_sum_is_ones_and_zero_scale_kills_gradient() {
        let p = test_tensor(vec![2, 3], 9);
        let tape = GradientTape::new();
        let w = tape.watch(&p);
        let loss = w.sum_all();
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.get(&w).unwrap().iter().all(|&g| g == 1.0));

        let tape = GradientTape::new();
        let w = tape.watch(&p);
        let loss = w.mul_scalar(0.0).sum_all();
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.get(&w).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_and_double_use() {
        let p = test_tensor(vec![2, 2], 10);
        let tape = GradientTape::new();
        let w = tape.watch(&p);
        let y = w.mul_scalar(2.0);
        assert!(tape.backward(&y).is_err());
        let loss = y.sum_all();
        assert!(tape.backward(&loss).is_ok());
        assert!(tape.backward(&loss).is_err(), "tape must be single-use");
    }

    #[test]
    fn two_layer_network_gradient() {
        for seed in 0..5 {
            let x = test_tensor(vec![2, 4], 1600 + seed);
            let w1 = test_tensor(vec![4, 6], 1700 + seed);
            let w2 = test_tensor(vec![6, 3], 1800 + seed);
            assert_gradients_close(
                &[x, w1, w2],
                |xs| {
                    xs[0]
                        .matmul(&xs[1])
                        .unwrap()
                        .silu()
                        .matmul(&xs[2])
                        .unwrap()
                        .softmax()
                        .sum_all()
                },
                1e-4,
            );
        }
    }

    #[test]
    fn structural_ops_gradients() {
        for seed in 0..3 {
            let x = test_tensor(vec![3, 4], 1900 + seed);
            let s = test_tensor(vec![3], 2000 + seed);
            let c = test_tensor(vec![4], 2100 + seed);
            let w = test_tensor(vec![3, 4], 2200 + seed);

            assert_gradients_close(
                &[x.clone(), s],
                |xs| xs[0].row_scale(&xs[1]).unwrap().mul(&w).unwrap().sum_all(),
                1e-4,
            );
            assert_gradients_close(
                &[x.clone(), c.clone()],
                |xs| xs[0].scale_cols(&xs[1]).unwrap().mul(&w).unwrap().sum_all(),
                1e-4,
            );
            assert_gradients_close(
                &[x.clone(), c.clone()],
                |xs| xs[0].add_row(&xs[1]).unwrap().mul(&w).unwrap().sum_all(),
                1e-4,
            );
            assert_gradients_close(
                &[x.clone()],
                |xs| xs[0].center_rows().mul(&w).unwrap().sum_all(),
                1e-4,
            );
            assert_gradients_close(
                &[x.clone()],
                |xs| xs[0].suffix_sum_cols().mul(&w).unwrap().sum_all(),
                1e-4,
            );
            let w2 = test_tensor(vec![3, 2], 2300 + seed);
            assert_gradients_close(
                &[x.clone()],
                |xs| xs[0].slice_cols(1, 3).unwrap().mul(&w2).unwrap().sum_all(),
                1e-4,
            );
            let w3 = test_tensor(vec![2, 4], 2400 + seed);
            assert_gradients_close(
                &[x.clone()],
                |xs| xs[0].gather_rows(&[2, 0]).unwrap().mul(&w3).unwrap().sum_all(),
                1e-4,
            );
            let y = test_tensor(vec![3, 2], 2500 + seed);
            let wcat = test_tensor(vec![3, 6], 2600 + seed);
            assert_gradients_close(
                &[x.clone(), y],
                |xs| {
                    concat_cols(&[&xs[0], &xs[1]])
                        .unwrap()
                        .mul(&wcat)
                        .unwrap()
                        .sum_all()
                },
                1e-4,
            );
        }
    }

    #[test]
    fn cross_entropy_matches_log_vocab_for_uniform_logits() {
        let logits = Tensor::<f64>::zeros(vec![2, 7]);
        let nll = logits.cross_entropy_rows(&[3, 0]).unwrap();
        for &v in nll.data() {
            assert!((v - (7.0f64).ln()).abs() < 1e-12);
        }
        let mut hot = vec![0.0; 7];
        hot[4] = 50.0;
        let sharp = t2(1, 7, &hot);
        let nll = sharp.cross_entropy_rows(&[4]).unwrap();
        assert!(nll.data()[0] < 1e-9);
    }

    #[test]
    fn cross_entropy_gradient() {
        for seed in 0..5 {
            let logits = test_tensor(vec![3, 5], 2700 + seed);
            assert_gradients_close(
                &[logits],
                |xs| xs[0].cross_entropy_rows(&[1, 4, 0]).unwrap().sum_all(),
                1e-4,
            );
        }
    }

    #[test]
    fn ln_clamped_gradient_and_clamp() {
        let x = t2(1, 3, &[0.5, 1e-15, 2.0]);
        let y = x.ln_clamped(1e-12);
        assert!((y.data()[1] - (1e-12f64).ln()).abs() < 1e-9);
        let pos = t2(2, 2, &[0.3, 1.1, 0.7, 2.5]);
        let w = test_tensor(vec![2, 2], 31);
        assert_gradients_close(
            &[pos],
            |xs| xs[0].ln_clamped(1e-12).mul(&w).unwrap().sum_all(),
            1e-4,
        );
    }

    #[test]
    fn st_gate_forwards_hard_and_backprops_soft() {
        let hard = t2(2, 1, &[1.0, 0.0]);
        let soft_plain = t2(2, 1, &[0.7, 0.4]);
        let tape = GradientTape::new();
        let soft = tape.watch(&soft_plain);
        let gated = st_gate(&hard, &soft).unwrap();
        assert_eq!(gated.to_f64_vec(), vec![1.0, 0.0]);
        let w = t2(2, 1, &[3.0, 5.0]);
        let loss = gated.mul(&w).unwrap().sum_all();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&soft).unwrap(), &[3.0, 5.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let x = test_tensor(vec![4, 4], 77);
        let w = test_tensor(vec![4, 4], 78);
        let a = x.matmul(&w).unwrap().silu().softmax();
        let b = x.matmul(&w).unwrap().silu().softmax();
        let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }
}
