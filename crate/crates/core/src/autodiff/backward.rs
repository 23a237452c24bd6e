use alloc::vec;
use alloc::vec::Vec;

use super::{kernels, Graph, Gradients, NormMode, Op, Var, GATHER_ZERO};
use crate::{Real, Result, Tensor};

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn like<T: Real>(t: &Tensor<T>, data: Vec<T>) -> Tensor<T> {
    Tensor::new(t.shape(), data).expect("gradient shape")
}

/// Returns `(pull, push)` of the associative-embedding loss.
pub(super) fn ae_terms<T: Real>(tags: &[T], d: usize, groups: &[Vec<usize>]) -> (T, T) {
    let means = group_means(tags, d, groups);
    let np = groups.len();
    if np == 0 {
        return (T::zero(), T::zero());
    }
    let mut pull = T::zero();
    for (g, m) in groups.iter().zip(&means) {
        let mut s = T::zero();
        for &i in g {
            for k in 0..d {
                let e = tags[i * d + k] - m[k];
                s += e * e;
            }
        }
        pull += s / T::from_usize(g.len()).unwrap();
    }
    pull /= T::from_usize(np).unwrap();
    let mut push = T::zero();
    let pairs = np * (np - 1) / 2;
    if pairs > 0 {
        for i in 0..np {
            for j in i + 1..np {
                push += (-sq_dist(&means[i], &means[j]) / T::of_f64(2.0)).exp();
            }
        }
        push /= T::from_usize(pairs).unwrap();
    }
    (pull, push)
}

fn group_means<T: Real>(tags: &[T], d: usize, groups: &[Vec<usize>]) -> Vec<Vec<T>> {
    groups
        .iter()
        .map(|g| {
            let mut m = vec![T::zero(); d];
            for &i in g {
                for k in 0..d {
                    m[k] += tags[i * d + k];
                }
            }
            let n = T::from_usize(g.len()).unwrap();
            m.iter_mut().for_each(|v| *v /= n);
            m
        })
        .collect()
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

pub(super) fn run<T: Real>(graph: Graph<T>, root: Var) -> Result<Gradients<T>> {
    let nodes = graph.nodes;
    let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
    if !nodes[root.0].needs_grad {
        return Ok(Gradients { grads });
    }
    grads[root.0] = Some(Tensor::ones(nodes[root.0].value.shape()));
    let ng = |v: Var| nodes[v.0].needs_grad;
    let val = |v: Var| &nodes[v.0].value;

    for idx in (0..=root.0).rev() {
        let node = &nodes[idx];
        if !node.needs_grad {
            continue;
        }
        let g = match &node.op {
            Op::Leaf => continue,
            _ => match grads[idx].take() {
                Some(g) => g,
                None => continue,
            },
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                if ng(*a) {
                    accumulate(&mut grads, *a, g.clone());
                }
                if ng(*b) {
                    accumulate(&mut grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if ng(*a) {
                    accumulate(&mut grads, *a, g.clone());
                }
                if ng(*b) {
                    accumulate(&mut grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if ng(*a) {
                    let d = g.zip_map(val(*b), |x, y| x * y)?;
                    accumulate(&mut grads, *a, d);
                }
                if ng(*b) {
                    let d = g.zip_map(val(*a), |x, y| x * y)?;
                    accumulate(&mut grads, *b, d);
                }
            }
            Op::AddBroadcast(x, b) => {
                if ng(*x) {
                    accumulate(&mut grads, *x, g.clone());
                }
                if ng(*b) {
                    let n = val(*b).numel();
                    let mut db = vec![T::zero(); n];
                    for chunk in gd.chunks(n) {
                        for (a, &v) in db.iter_mut().zip(chunk) {
                            *a += v;
                        }
                    }
                    accumulate(&mut grads, *b, like(val(*b), db));
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                accumulate(&mut grads, *x, g.map(|v| v * c));
            }
            Op::ScaleRows(x, factors) => {
                let inner = g.numel() / factors.len();
                let mut d = g.clone();
                for (chunk, &f) in d.data_mut().chunks_mut(inner.max(1)).zip(factors) {
                    chunk.iter_mut().for_each(|v| *v *= f);
                }
                accumulate(&mut grads, *x, d);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let rows = av.numel() / k.max(1);
                if ng(*a) {
                    let mut da = vec![T::zero(); rows * k];
                    T::gemm(rows, n, k, gd, false, bv.data(), true, &mut da, false);
                    accumulate(&mut grads, *a, like(av, da));
                }
                if ng(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, rows, n, av.data(), true, gd, false, &mut db, false);
                    accumulate(&mut grads, *b, like(bv, db));
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (av, bv) = (val(*a), val(*b));
                let (bt, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = g.shape()[2];
                if ng(*a) {
                    let mut da = vec![T::zero(); bt * m * k];
                    for i in 0..bt {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let bi = &bv.data()[i * k * n..(i + 1) * k * n];
                        // b' is k x n; da = g b'^T
                        T::gemm(m, n, k, gi, false, bi, !*trans_b, &mut da[i * m * k..(i + 1) * m * k], false);
                    }
                    accumulate(&mut grads, *a, like(av, da));
                }
                if ng(*b) {
                    let mut db = vec![T::zero(); bt * k * n];
                    for i in 0..bt {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let ai = &av.data()[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            T::gemm(n, m, k, gi, true, ai, false, dbi, false);
                        } else {
                            T::gemm(k, m, n, ai, true, gi, false, dbi, false);
                        }
                    }
                    accumulate(&mut grads, *b, like(bv, db));
                }
            }
            Op::Relu(x) => {
                let d = g.zip_map(val(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() })?;
                accumulate(&mut grads, *x, d);
            }
            Op::Gelu(x) => {
                let d = g.zip_map(val(*x), |gv, xv| gv * kernels::gelu_grad(xv))?;
                accumulate(&mut grads, *x, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = val(*gamma).numel();
                let rows = xhat.len() / c;
                let gam = val(*gamma).data();
                if ng(*gamma) || ng(*beta) {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for r in 0..rows {
                        for j in 0..c {
                            dg[j] += gd[r * c + j] * xhat[r * c + j];
                            db[j] += gd[r * c + j];
                        }
                    }
                    if ng(*gamma) {
                        accumulate(&mut grads, *gamma, like(val(*gamma), dg));
                    }
                    if ng(*beta) {
                        accumulate(&mut grads, *beta, like(val(*beta), db));
                    }
                }
                if ng(*x) {
                    let cf = T::from_usize(c).unwrap();
                    let mut dx = vec![T::zero(); rows * c];
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..c {
                            let gh = gd[r * c + j] * gam[j];
                            s1 += gh;
                            s2 += gh * xhat[r * c + j];
                        }
                        for j in 0..c {
                            let gh = gd[r * c + j] * gam[j];
                            dx[r * c + j] = rstd[r] / cf * (cf * gh - s1 - xhat[r * c + j] * s2);
                        }
                    }
                    accumulate(&mut grads, *x, like(val(*x), dx));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                mode,
            } => {
                let xs = val(*x).shape();
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let gam = val(*gamma).data();
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            dg[ch] += gd[i] * xhat[i];
                            db[ch] += gd[i];
                        }
                    }
                }
                if ng(*x) {
                    let mut dx = vec![T::zero(); gd.len()];
                    let m = T::from_usize(n * hw).unwrap();
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            for i in base..base + hw {
                                let gh = gd[i] * gam[ch];
                                dx[i] = match mode {
                                    NormMode::Eval => gh * rstd[ch],
                                    NormMode::Train => {
                                        rstd[ch] / m * (m * gh - gam[ch] * db[ch] - xhat[i] * gam[ch] * dg[ch])
                                    }
                                };
                            }
                        }
                    }
                    accumulate(&mut grads, *x, like(val(*x), dx));
                }
                if ng(*gamma) {
                    accumulate(&mut grads, *gamma, like(val(*gamma), dg));
                }
                if ng(*beta) {
                    accumulate(&mut grads, *beta, like(val(*beta), db));
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let k = *node.value.shape().last().unwrap();
                let mut dx = vec![T::zero(); y.len()];
                for r in 0..y.len() / k.max(1) {
                    let ys = &y[r * k..(r + 1) * k];
                    let gs = &gd[r * k..(r + 1) * k];
                    let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                    for j in 0..k {
                        dx[r * k + j] = ys[j] * (gs[j] - dot);
                    }
                }
                accumulate(&mut grads, *x, like(val(*x), dx));
            }
            Op::Reshape(x) => {
                let d = g.clone().reshape(val(*x).shape())?;
                accumulate(&mut grads, *x, d);
            }
            Op::Gather { x, index } => {
                let mut dx = vec![T::zero(); val(*x).numel()];
                for (&i, &v) in index.iter().zip(gd) {
                    if i != GATHER_ZERO {
                        dx[i as usize] += v;
                    }
                }
                accumulate(&mut grads, *x, like(val(*x), dx));
            }
            Op::Concat { inputs, axis } => {
                let shape = g.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = val(v).shape()[*axis] * inner;
                    if ng(v) {
                        let mut d = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            d.extend_from_slice(&gd[o * total + offset..o * total + offset + len]);
                        }
                        accumulate(&mut grads, v, like(val(v), d));
                    }
                    offset += len;
                }
            }
            Op::SegmentMean { x, segments } => {
                let l = val(*x).shape()[1];
                let mut dx = vec![T::zero(); val(*x).numel()];
                for (s, seg) in segments.iter().enumerate() {
                    let inv = T::one() / T::from_usize(seg.len()).unwrap();
                    for &i in seg {
                        for j in 0..l {
                            dx[i * l + j] += gd[s * l + j] * inv;
                        }
                    }
                }
                accumulate(&mut grads, *x, like(val(*x), dx));
            }
            Op::Conv2d { x, w, b, geom } => {
                let (xv, wv) = (val(*x), val(*w));
                let n = xv.shape()[0];
                let o = wv.shape()[0];
                let (kk, ncol) = (geom.col_rows(), geom.col_cols());
                let plane = geom.channels * geom.in_h * geom.in_w;
                let mut cols = vec![T::zero(); kk * ncol];
                let mut dw = vec![T::zero(); o * kk];
                let mut dx = if ng(*x) { vec![T::zero(); xv.numel()] } else { Vec::new() };
                for i in 0..n {
                    let gi = &gd[i * o * ncol..(i + 1) * o * ncol];
                    if ng(*w) {
                        let xi = &xv.data()[i * plane..(i + 1) * plane];
                        let src: &[T] = if geom.is_pointwise() {
                            xi
                        } else {
                            kernels::im2col(xi, geom, &mut cols);
                            &cols
                        };
                        T::gemm(o, ncol, kk, gi, false, src, true, &mut dw, true);
                    }
                    if ng(*x) {
                        let dxi = &mut dx[i * plane..(i + 1) * plane];
                        if geom.is_pointwise() {
                            T::gemm(kk, o, ncol, wv.data(), true, gi, false, dxi, false);
                        } else {
                            T::gemm(kk, o, ncol, wv.data(), true, gi, false, &mut cols, false);
                            kernels::col2im(&cols, geom, dxi);
                        }
                    }
                }
                if ng(*w) {
                    accumulate(&mut grads, *w, like(wv, dw));
                }
                if ng(*x) {
                    accumulate(&mut grads, *x, like(xv, dx));
                }
                if let Some(b) = b.filter(|b| ng(*b)) {
                    let mut db = vec![T::zero(); o];
                    for (idx, chunk) in gd.chunks(ncol).enumerate() {
                        db[idx % o] += chunk.iter().copied().sum::<T>();
                    }
                    accumulate(&mut grads, b, like(val(b), db));
                }
            }
            Op::Deconv2d { x, w, b, geom } => {
                let (xv, wv) = (val(*x), val(*w));
                let (n, cin) = (xv.shape()[0], xv.shape()[1]);
                let cout = geom.channels;
                let (kk, hw) = (geom.col_rows(), geom.col_cols());
                let oplane = cout * geom.in_h * geom.in_w;
                let mut cols = vec![T::zero(); kk * hw];
                let mut dw = vec![T::zero(); cin * kk];
                let mut dx = if ng(*x) { vec![T::zero(); xv.numel()] } else { Vec::new() };
                for i in 0..n {
                    kernels::im2col(&gd[i * oplane..(i + 1) * oplane], geom, &mut cols);
                    if ng(*x) {
                        T::gemm(cin, kk, hw, wv.data(), false, &cols, false, &mut dx[i * cin * hw..(i + 1) * cin * hw], false);
                    }
                    if ng(*w) {
                        T::gemm(cin, hw, kk, &xv.data()[i * cin * hw..(i + 1) * cin * hw], false, &cols, true, &mut dw, true);
                    }
                }
                if ng(*w) {
                    accumulate(&mut grads, *w, like(wv, dw));
                }
                if ng(*x) {
                    accumulate(&mut grads, *x, like(xv, dx));
                }
                if let Some(b) = b.filter(|b| ng(*b)) {
                    let plane = geom.in_h * geom.in_w;
                    let mut db = vec![T::zero(); cout];
                    for (idx, chunk) in gd.chunks(plane).enumerate() {
                        db[idx % cout] += chunk.iter().copied().sum::<T>();
                    }
                    accumulate(&mut grads, b, like(val(b), db));
                }
            }
            Op::Bilinear { x, in_hw } => {
                let s = g.shape();
                let dx = kernels::bilinear_backward(gd, s[0] * s[1], *in_hw, (s[2], s[3]));
                accumulate(&mut grads, *x, like(val(*x), dx));
            }
            Op::Sum(x) => {
                let gv = gd[0];
                accumulate(&mut grads, *x, Tensor::full(val(*x).shape(), gv));
            }
            Op::WeightedMse { pred, target, weights } => {
                let pv = val(*pred);
                let row = pv.numel() / weights.len();
                let wsum: T = weights.iter().copied().sum();
                let mut d = vec![T::zero(); pv.numel()];
                if wsum > T::zero() {
                    let two = T::of_f64(2.0);
                    let rowf = T::from_usize(row).unwrap();
                    for (r, &w) in weights.iter().enumerate() {
                        let c = gd[0] * w * two / (rowf * wsum);
                        for i in r * row..(r + 1) * row {
                            d[i] = c * (pv.data()[i] - target.data()[i]);
                        }
                    }
                }
                accumulate(&mut grads, *pred, like(pv, d));
            }
            Op::AeLoss { tags, groups } => {
                let tv = val(*tags);
                let dim = tv.shape()[1];
                let td = tv.data();
                let np = groups.len();
                let mut d = vec![T::zero(); tv.numel()];
                if np > 0 {
                    let means = group_means(td, dim, groups);
                    let npf = T::from_usize(np).unwrap();
                    for (gi, m) in groups.iter().zip(&means) {
                        let c = T::of_f64(2.0) / (T::from_usize(gi.len()).unwrap() * npf);
                        for &i in gi {
                            for k in 0..dim {
                                d[i * dim + k] += gd[0] * c * (td[i * dim + k] - m[k]);
                            }
                        }
                    }
                    let pairs = np * (np - 1) / 2;
                    if pairs > 0 {
                        let pf = T::from_usize(pairs).unwrap();
                        for i in 0..np {
                            let mut dm = vec![T::zero(); dim];
                            for j in 0..np {
                                if i == j {
                                    continue;
                                }
                                let e = (-sq_dist(&means[i], &means[j]) / T::of_f64(2.0)).exp();
                                for k in 0..dim {
                                    dm[k] -= e * (means[i][k] - means[j][k]);
                                }
                            }
                            let share = gd[0] / (pf * T::from_usize(groups[i].len()).unwrap());
                            for &r in &groups[i] {
                                for k in 0..dim {
                                    d[r * dim + k] += share * dm[k];
                                }
                            }
                        }
                    }
                }
                accumulate(&mut grads, *tags, like(tv, d));
            }
        }
    }
    Ok(Gradients { grads })
}
