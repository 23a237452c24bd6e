//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its variables. Calling
//! [`Graph::backward`] consumes the tape and returns the gradient of a scalar
//! root with respect to every variable that requires one. Each operation
//! carries its own analytic backward rule.

mod backward;
mod index;
#[cfg(test)]
mod tests;
pub(crate) mod kernels;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, FlopCounter, Real, Result, Tensor};
use kernels::ConvGeom;

pub use index::WindowLayout;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Sentinel in gather index maps: the output element is zero.
pub const GATHER_ZERO: u32 = u32::MAX;

/// Validity mask over the keys of a row-softmax. `valid[group * keys + j]`
/// tells whether key `j` may be attended by the rows of `group`; consecutive
/// runs of `rows_per_group` rows share one group.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyMask {
    pub valid: Vec<bool>,
    pub rows_per_group: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; the graph exposes them for running-average updates.
    Train,
    /// Fixed statistics.
    Eval,
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, T),
    ScaleRows(Var, Vec<T>),
    MatMul(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
        mode: NormMode,
    },
    Softmax(Var),
    Reshape(Var),
    Gather {
        x: Var,
        index: Vec<u32>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    SegmentMean {
        x: Var,
        segments: Vec<Vec<usize>>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Deconv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Bilinear {
        x: Var,
        in_hw: (usize, usize),
    },
    Sum(Var),
    WeightedMse {
        pred: Var,
        target: Tensor<T>,
        weights: Vec<T>,
    },
    AeLoss {
        tags: Var,
        groups: Vec<Vec<usize>>,
    },
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub needs_grad: bool,
}

/// Recorded computation. Single use: [`Graph::backward`] consumes it.
pub struct Graph<T: Real> {
    pub(crate) nodes: Vec<Node<T>>,
    counter: Option<FlopCounter>,
    scope: String,
}

/// Gradients of a scalar root, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when the variable does not influence the root or does not
    /// require a gradient.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Catches kernels that turn finite inputs into non-finite outputs.
fn check_finite<T: Real>(op: &str, inputs: &[&Tensor<T>], t: &Tensor<T>) {
    debug_assert!(
        t.is_finite() || inputs.iter().any(|i| !i.is_finite()),
        "non-finite output from {op}"
    );
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            counter: None,
            scope: String::new(),
        }
    }

    /// Enables multiply-accumulate counting for subsequent operations.
    pub fn count_flops(&mut self) {
        self.counter = Some(FlopCounter::new());
    }

    pub fn flops(&self) -> Option<&FlopCounter> {
        self.counter.as_ref()
    }

    pub fn take_flops(&mut self) -> Option<FlopCounter> {
        self.counter.take()
    }

    /// Layer name under which subsequent multiply-accumulates are recorded.
    pub fn set_scope(&mut self, scope: &str) {
        self.scope.clear();
        self.scope.push_str(scope);
    }

    fn record_macs(&mut self, macs: usize) {
        if let Some(c) = self.counter.as_mut() {
            c.add(&self.scope, macs as u64);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// `x + b` where `b`'s shape equals the trailing dimensions of `x`.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let bs = self.shape(b);
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(Error::shape("add_broadcast", xs, bs));
        }
        let bd = self.value(b).data();
        let n = bd.len();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, &v) in chunk.iter_mut().zip(bd) {
                *o += v;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(out, Op::AddBroadcast(x, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|a| a * c);
        let ng = self.ng(x);
        self.push(v, Op::Scale(x, c), ng)
    }

    /// Multiplies every slice along axis 0 by its own constant factor.
    pub fn scale_rows(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        let xs = self.shape(x);
        if xs.is_empty() || xs[0] != factors.len() {
            return Err(Error::shape("scale_rows", xs, &[factors.len()]));
        }
        let mut out = self.value(x).clone();
        let inner = out.numel() / factors.len();
        for (chunk, &f) in out.data_mut().chunks_mut(inner.max(1)).zip(&factors) {
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::ScaleRows(x, factors), ng))
    }

    /// `a [..., k] x b [k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        if bsh.len() != 2 || ash.is_empty() || *ash.last().unwrap() != bsh[0] {
            return Err(Error::shape("matmul", ash, bsh));
        }
        let (k, n) = (bsh[0], bsh[1]);
        let rows = self.value(a).numel() / k.max(1);
        let mut shape = ash[..ash.len() - 1].to_vec();
        shape.push(n);
        let mut out = vec![T::zero(); rows * n];
        T::gemm(
            rows,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        self.record_macs(rows * k * n);
        let v = Tensor::new(&shape, out)?;
        check_finite("matmul", &[self.value(a), self.value(b)], &v);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    /// `x [..., in] x w [in, out] + bias [out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add_broadcast(y, b),
            None => Ok(y),
        }
    }

    /// Batched product `a [B, m, k] x b [B, k, n]`, or `b [B, n, k]`
    /// transposed when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] {
            return Err(Error::shape("bmm", &ash, &bsh));
        }
        let (bt, m, k) = (ash[0], ash[1], ash[2]);
        let (kb, n) = if trans_b { (bsh[2], bsh[1]) } else { (bsh[1], bsh[2]) };
        if kb != k {
            return Err(Error::shape("bmm", &ash, &bsh));
        }
        let mut out = vec![T::zero(); bt * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for i in 0..bt {
                T::gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    false,
                    &bd[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        self.record_macs(bt * m * k * n);
        let v = Tensor::new(&[bt, m, n], out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Bmm { a, b, trans_b }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        // NaN passes through so poisoned inputs stay visible downstream
        let v = self.value(x).map(|a| if a <= T::zero() { T::zero() } else { a });
        let ng = self.ng(x);
        self.push(v, Op::Relu(x), ng)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(kernels::gelu);
        let ng = self.ng(x);
        self.push(v, Op::Gelu(x), ng)
    }

    /// Normalises the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().unwrap_or(&0);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layer_norm", &xs, self.shape(gamma)));
        }
        let rows = self.value(x).numel() / c;
        let mut xhat = vec![T::zero(); rows * c];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * c];
        {
            let xd = self.value(x).data();
            let gd = self.value(gamma).data();
            let bd = self.value(beta).data();
            let cf = T::from_usize(c).unwrap();
            for r in 0..rows {
                let row = &xd[r * c..(r + 1) * c];
                let mean = row.iter().copied().sum::<T>() / cf;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
                let rs = T::one() / (var + T::of_f64(eps)).sqrt();
                rstd[r] = rs;
                for j in 0..c {
                    let h = (row[j] - mean) * rs;
                    xhat[r * c + j] = h;
                    out[r * c + j] = h * gd[j] + bd[j];
                }
            }
        }
        let v = Tensor::new(&xs, out)?;
        check_finite("layer_norm", &[self.value(x), self.value(gamma), self.value(beta)], &v);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Per-channel normalisation of `x [N, C, H, W]`.
    ///
    /// In [`NormMode::Train`] the batch statistics are used and returned as
    /// `(mean, unbiased variance)`; in [`NormMode::Eval`] `stats` supplies
    /// `(mean, variance)` and is returned unchanged.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
        stats: Option<(&[T], &[T])>,
        eps: f64,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(Error::shape("batch_norm", &xs, self.shape(gamma)));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let count = n * hw;
        let xd = self.value(x).data();
        let (mean, var_biased, var_out) = match mode {
            NormMode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        s += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
                    }
                    let m = s / T::from_usize(count).unwrap();
                    let mut q = T::zero();
                    for b in 0..n {
                        for &v in &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                            q += (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = q;
                }
                let biased: Vec<T> = var.iter().map(|&q| q / T::from_usize(count).unwrap()).collect();
                let unbiased: Vec<T> = var
                    .iter()
                    .map(|&q| q / T::from_usize(count.saturating_sub(1).max(1)).unwrap())
                    .collect();
                (mean, biased, unbiased)
            }
            NormMode::Eval => {
                let (m, v) = stats.ok_or_else(|| Error::invalid("batch_norm", "eval mode needs running statistics"))?;
                if m.len() != c || v.len() != c {
                    return Err(Error::shape("batch_norm", &[c], &[m.len()]));
                }
                (m.to_vec(), v.to_vec(), v.to_vec())
            }
        };
        let rstd: Vec<T> = var_biased
            .iter()
            .map(|&v| T::one() / (v + T::of_f64(eps)).sqrt())
            .collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let h = (xd[i] - mean[ch]) * rstd[ch];
                    xhat[i] = h;
                    out[i] = h * gd[ch] + bd[ch];
                }
            }
        }
        let v = Tensor::new(&xs, out)?;
        check_finite("batch_norm", &[self.value(x)], &v);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let var = self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                mode,
            },
            ng,
        );
        Ok((var, mean, var_out))
    }

    /// Softmax over the last axis. Masked keys get probability exactly zero.
    pub fn softmax(&mut self, x: Var, mask: Option<&KeyMask>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let k = *xs.last().unwrap_or(&0);
        let rows = self.value(x).numel() / k.max(1);
        if let Some(m) = mask {
            if m.rows_per_group == 0 || !rows.is_multiple_of(m.rows_per_group) || m.valid.len() != rows / m.rows_per_group * k {
                return Err(Error::shape("softmax", &xs, &[m.valid.len()]));
            }
        }
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let valid = mask.map(|m| &m.valid[(r / m.rows_per_group) * k..(r / m.rows_per_group + 1) * k]);
            let ok = |j: usize| valid.is_none_or(|v| v[j]);
            let row = &xd[r * k..(r + 1) * k];
            let mut mx = T::neg_infinity();
            let mut nan = false;
            for (j, &v) in row.iter().enumerate() {
                nan |= ok(j) && v.is_nan();
                if ok(j) && v > mx {
                    mx = v;
                }
            }
            if nan {
                out[r * k..(r + 1) * k].iter_mut().for_each(|v| *v = T::nan());
                continue;
            }
            if mx == T::neg_infinity() {
                continue;
            }
            let mut s = T::zero();
            let o = &mut out[r * k..(r + 1) * k];
            for j in 0..k {
                if ok(j) {
                    o[j] = (row[j] - mx).exp();
                    s += o[j];
                }
            }
            o.iter_mut().for_each(|v| *v /= s);
        }
        let v = Tensor::new(&xs, out)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Softmax(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Reshape(x), ng))
    }

    /// `out[i] = x[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    pub fn gather(&mut self, x: Var, index: Vec<u32>, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::shape("gather", shape, &[index.len()]));
        }
        let xd = self.value(x).data();
        let n = xd.len();
        let mut out = Vec::with_capacity(index.len());
        for &i in &index {
            if i == GATHER_ZERO {
                out.push(T::zero());
            } else if (i as usize) < n {
                out.push(xd[i as usize]);
            } else {
                return Err(Error::invalid("gather", "index out of range"));
            }
        }
        let v = Tensor::new(shape, out)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Gather { x, index }, ng))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", "axis out of range"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let v = Tensor::new(&shape, out)?;
        let ng = inputs.iter().any(|&i| self.ng(i));
        Ok(self.push(
            v,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Means of row groups: `x [R, L]`, one output row per segment.
    pub fn segment_mean(&mut self, x: Var, segments: Vec<Vec<usize>>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::invalid("segment_mean", "expects a 2-D input"));
        }
        let (r, l) = (xs[0], xs[1]);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); segments.len() * l];
        for (s, seg) in segments.iter().enumerate() {
            if seg.is_empty() || seg.iter().any(|&i| i >= r) {
                return Err(Error::invalid("segment_mean", "empty segment or row out of range"));
            }
            let inv = T::one() / T::from_usize(seg.len()).unwrap();
            let o = &mut out[s * l..(s + 1) * l];
            for &i in seg {
                for (a, &b) in o.iter_mut().zip(&xd[i * l..(i + 1) * l]) {
                    *a += b;
                }
            }
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let v = Tensor::new(&[segments.len(), l], out)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::SegmentMean { x, segments }, ng))
    }

    fn conv_geom(op: &'static str, xs: &[usize], k: (usize, usize), stride: usize, pad: usize) -> Result<ConvGeom> {
        if stride == 0 {
            return Err(Error::invalid(op, "stride must be positive"));
        }
        let (h, w) = (xs[2] + 2 * pad, xs[3] + 2 * pad);
        if h < k.0 || w < k.1 {
            return Err(Error::invalid(op, "kernel larger than padded input: empty output"));
        }
        Ok(ConvGeom {
            channels: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            kh: k.0,
            kw: k.1,
            stride,
            pad,
            out_h: (h - k.0) / stride + 1,
            out_w: (w - k.1) / stride + 1,
        })
    }

    /// Cross-correlation of `x [N, C, H, W]` with `w [O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape("conv2d", &ws, self.shape(b)));
            }
        }
        let geom = Self::conv_geom("conv2d", &xs, (ws[2], ws[3]), stride, pad)?;
        let (n, o) = (xs[0], ws[0]);
        let (kk, ncol) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![T::zero(); n * o * ncol];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let mut cols = vec![T::zero(); if geom.is_pointwise() { 0 } else { kk * ncol }];
            let plane = xs[1] * xs[2] * xs[3];
            for i in 0..n {
                let xi = &xd[i * plane..(i + 1) * plane];
                let src = if geom.is_pointwise() {
                    xi
                } else {
                    kernels::im2col(xi, &geom, &mut cols);
                    &cols
                };
                T::gemm(o, kk, ncol, wd, false, src, false, &mut out[i * o * ncol..(i + 1) * o * ncol], false);
            }
            if let Some(b) = b {
                let bd = self.value(b).data();
                for (idx, chunk) in out.chunks_mut(ncol).enumerate() {
                    let bv = bd[idx % o];
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        self.record_macs(n * o * ncol * kk);
        let v = Tensor::new(&[n, o, geom.out_h, geom.out_w], out)?;
        check_finite("conv2d", &[self.value(x), self.value(w)], &v);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(v, Op::Conv2d { x, w, b, geom }, ng))
    }

    /// Transposed convolution of `x [N, Cin, H, W]` with `w [Cin, Cout, kh,
    /// kw]`; output spatial size `(H - 1) * stride - 2 * pad + kh`.
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] {
            return Err(Error::shape("deconv2d", &xs, &ws));
        }
        if stride == 0 {
            return Err(Error::invalid("deconv2d", "stride must be positive"));
        }
        let (n, cin, h, wd_) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[1], ws[2], ws[3]);
        let oh = ((h - 1) * stride + kh).checked_sub(2 * pad).filter(|&v| v > 0);
        let ow = ((wd_ - 1) * stride + kw).checked_sub(2 * pad).filter(|&v| v > 0);
        let (oh, ow) = match (oh, ow) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::invalid("deconv2d", "empty output")),
        };
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("deconv2d", &ws, self.shape(b)));
            }
        }
        // geometry of the adjoint convolution: output image -> input grid
        let geom = ConvGeom {
            channels: cout,
            in_h: oh,
            in_w: ow,
            kh,
            kw,
            stride,
            pad,
            out_h: h,
            out_w: wd_,
        };
        let (kk, hw) = (geom.col_rows(), h * wd_);
        let mut out = vec![T::zero(); n * cout * oh * ow];
        {
            let xd = self.value(x).data();
            let wdat = self.value(w).data();
            let mut cols = vec![T::zero(); kk * hw];
            for i in 0..n {
                T::gemm(kk, cin, hw, wdat, true, &xd[i * cin * hw..(i + 1) * cin * hw], false, &mut cols, false);
                kernels::col2im(&cols, &geom, &mut out[i * cout * oh * ow..(i + 1) * cout * oh * ow]);
            }
            if let Some(b) = b {
                let bd = self.value(b).data();
                for (idx, chunk) in out.chunks_mut(oh * ow).enumerate() {
                    let bv = bd[idx % cout];
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        self.record_macs(n * cin * hw * kk);
        let v = Tensor::new(&[n, cout, oh, ow], out)?;
        check_finite("deconv2d", &[self.value(x), self.value(w)], &v);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(v, Op::Deconv2d { x, w, b, geom }, ng))
    }

    /// Half-pixel bilinear resize of `x [N, C, H, W]` to `out_hw`.
    pub fn resize_bilinear(&mut self, x: Var, out_hw: (usize, usize)) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || out_hw.0 == 0 || out_hw.1 == 0 || xs[2] == 0 || xs[3] == 0 {
            return Err(Error::invalid("resize_bilinear", "expects a non-empty [N, C, H, W] input"));
        }
        let in_hw = (xs[2], xs[3]);
        let out = kernels::bilinear_forward(self.value(x).data(), xs[0] * xs[1], in_hw, out_hw);
        let v = Tensor::new(&[xs[0], xs[1], out_hw.0, out_hw.1], out)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Bilinear { x, in_hw }, ng))
    }

    /// Bilinear upsampling by an integer factor.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::invalid("upsample_bilinear", "factor must be >= 1"));
        }
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::invalid("upsample_bilinear", "expects [N, C, H, W]"));
        }
        self.resize_bilinear(x, (xs[2] * factor, xs[3] * factor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(v, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_usize(n.max(1)).unwrap())
    }

    /// Row-weighted mean squared error. `pred` is viewed as `weights.len()`
    /// rows; each row contributes its mean squared error times its weight,
    /// and the total is divided by the weight sum (zero when all weights are
    /// zero). `target` is a constant.
    pub fn weighted_mse(&mut self, pred: Var, target: &Tensor<T>, weights: Vec<T>) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::shape("weighted_mse", self.shape(pred), target.shape()));
        }
        let n = target.numel();
        if weights.is_empty() || !n.is_multiple_of(weights.len()) {
            return Err(Error::shape("weighted_mse", target.shape(), &[weights.len()]));
        }
        let row = n / weights.len();
        let wsum: T = weights.iter().copied().sum();
        let pd = self.value(pred).data();
        let mut total = T::zero();
        if wsum > T::zero() {
            for (r, &w) in weights.iter().enumerate() {
                if w == T::zero() {
                    continue;
                }
                let se: T = pd[r * row..(r + 1) * row]
                    .iter()
                    .zip(&target.data()[r * row..(r + 1) * row])
                    .map(|(&p, &t)| (p - t) * (p - t))
                    .sum();
                total += w * se / T::from_usize(row).unwrap();
            }
            total /= wsum;
        }
        let ng = self.ng(pred);
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedMse {
                pred,
                target: target.clone(),
                weights,
            },
            ng,
        ))
    }

    /// Plain mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        self.weighted_mse(pred, target, vec![T::one()])
    }

    /// Associative-embedding grouping loss on gathered tags `[P, D]`.
    ///
    /// `groups[n]` lists the rows belonging to person `n`; empty groups are
    /// skipped. The loss is the mean per-person tag variance (pull) plus the
    /// mean over person pairs of `exp(-|m_i - m_j|^2 / 2)` (push).
    pub fn ae_loss(&mut self, tags: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let ts = self.shape(tags).to_vec();
        if ts.len() != 2 {
            return Err(Error::invalid("ae_loss", "tags must be [P, D]"));
        }
        let d = ts[1];
        if groups.iter().flatten().any(|&i| i >= ts[0]) {
            return Err(Error::invalid("ae_loss", "group row out of range"));
        }
        let groups: Vec<Vec<usize>> = groups.into_iter().filter(|g| !g.is_empty()).collect();
        let (pull, push) = backward::ae_terms(self.value(tags).data(), d, &groups);
        let ng = self.ng(tags);
        Ok(self.push(Tensor::scalar(pull + push), Op::AeLoss { tags, groups }, ng))
    }

    /// Reverse pass from the scalar `root`.
    pub fn backward(self, root: Var) -> Result<Gradients<T>> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::invalid("backward", "root must be a scalar"));
        }
        backward::run(self, root)
    }
}
