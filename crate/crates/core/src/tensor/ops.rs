//! Differentiable operations on [`Tensor`].

use super::{numel_of, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// How two operand shapes line up for elementwise ops. Broadcasting is
/// limited to one operand's shape being a trailing suffix of the other's.
#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    /// rhs repeats along the leading dims of lhs
    Rhs,
    /// lhs repeats along the leading dims of rhs
    Lhs,
}

fn broadcast(lhs: &[usize], rhs: &[usize]) -> Option<Broadcast> {
    if lhs == rhs {
        Some(Broadcast::Same)
    } else if rhs.len() < lhs.len() && lhs.ends_with(rhs) {
        Some(Broadcast::Rhs)
    } else if lhs.len() < rhs.len() && rhs.ends_with(lhs) {
        Some(Broadcast::Lhs)
    } else {
        None
    }
}

/// `[outer, len, inner]` view of a shape around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel_of(&shape[..axis]),
        shape[axis],
        numel_of(&shape[axis + 1..]),
    )
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Shape {
            op,
            lhs: shape.to_vec(),
            rhs: vec![axis],
        });
    }
    Ok(())
}

fn sum_into_small<T: Scalar>(g: &[T], small_len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); small_len];
    for chunk in g.chunks_exact(small_len) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += *v);
    }
    out
}

/// `f` over suffix-broadcast operands; the shorter one repeats.
fn map_broadcast<T: Scalar>(a: &[T], b: &[T], f: &impl Fn(T, T) -> T) -> Vec<T> {
    let n = a.len().max(b.len());
    let mut out = Vec::with_capacity(n);
    if a.len() == b.len() {
        out.extend(a.iter().zip(b).map(|(&x, &y)| f(x, y)));
    } else if a.len() == n {
        for ca in a.chunks_exact(b.len()) {
            out.extend(ca.iter().zip(b).map(|(&x, &y)| f(x, y)));
        }
    } else {
        for cb in b.chunks_exact(a.len()) {
            out.extend(a.iter().zip(cb).map(|(&x, &y)| f(x, y)));
        }
    }
    out
}

/// Gradient for one operand of a broadcast binary op: `d(a, b, g)` per
/// output element, summed over the repeats when the operand has `len < n`.
fn grad_broadcast<T: Scalar>(a: &[T], b: &[T], g: &[T], len: usize, d: &impl Fn(T, T, T) -> T) -> Vec<T> {
    let n = g.len();
    let mut out = vec![T::zero(); len];
    if n == 0 {
        return out;
    }
    let period = a.len().min(b.len());
    // walk the output in blocks of the shorter operand's length
    for (k, gc) in g.chunks_exact(period).enumerate() {
        let off = k * period;
        let (ac, bc) = if a.len() == n {
            (&a[off..off + period], b)
        } else if b.len() == n {
            (a, &b[off..off + period])
        } else {
            (a, b)
        };
        let dst = if len == n { &mut out[off..off + period] } else { &mut out[..] };
        if len == n {
            for (((o, &x), &y), &gv) in dst.iter_mut().zip(ac).zip(bc).zip(gc) {
                *o = d(x, y, gv);
            }
        } else {
            for (((o, &x), &y), &gv) in dst.iter_mut().zip(ac).zip(bc).zip(gc) {
                *o += d(x, y, gv);
            }
        }
    }
    out
}

impl<T: Scalar> Tensor<T> {
    fn binary<F, DA, DB>(&self, other: &Tensor<T>, op: &'static str, f: F, da: DA, db: DB) -> Result<Tensor<T>>
    where
        F: Fn(T, T) -> T,
        DA: Fn(T, T, T) -> T + Send + Sync + 'static,
        DB: Fn(T, T, T) -> T + Send + Sync + 'static,
    {
        let mode = broadcast(self.shape(), other.shape())
            .ok_or_else(|| Error::shape(op, self.shape(), other.shape()))?;
        let shape = match mode {
            Broadcast::Same | Broadcast::Rhs => self.shape().to_vec(),
            Broadcast::Lhs => other.shape().to_vec(),
        };
        let data = map_broadcast(self.data(), other.data(), &f);
        Ok(Tensor::from_op(
            shape,
            data,
            op,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, p| {
                let (a, b) = (p[0].data(), p[1].data());
                let ga = p[0].requires_grad().then(|| grad_broadcast(a, b, g, a.len(), &da));
                let gb = p[1].requires_grad().then(|| grad_broadcast(a, b, g, b.len(), &db));
                vec![ga, gb]
            }),
        ))
    }

    /// Elementwise sum with trailing-suffix broadcasting.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "add", |x, y| x + y, |_, _, g| g, |_, _, g| g)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "sub", |x, y| x - y, |_, _, g| g, |_, _, g| -g)
    }

    /// Elementwise (Hadamard) product with trailing-suffix broadcasting.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "mul", |x, y| x * y, |_, y, g| g * y, |x, _, g| g * x)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(
            other,
            "div",
            |x, y| x / y,
            |_, y, g| g / y,
            |x, y, g| -g * x / (y * y),
        )
    }

    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T, T) -> T + Send + Sync + 'static,
    ) -> Tensor<T> {
        let data = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            op,
            vec![self.clone()],
            Box::new(move |g, y, p| {
                let x = p[0].data();
                vec![Some(
                    (0..g.len()).map(|i| df(x[i], y[i], g[i])).collect(),
                )]
            }),
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary("neg", |x| -x, |_, _, g| -g)
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        self.unary("add_scalar", move |x| x + c, |_, _, g| g)
    }

    pub fn mul_scalar(&self, c: T) -> Tensor<T> {
        self.unary("mul_scalar", move |x| x * c, move |_, _, g| g * c)
    }

    pub fn square(&self) -> Tensor<T> {
        self.unary("square", |x| x * x, |x, _, g| T::lit(2.0) * x * g)
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary("exp", |x| x.exp(), |_, y, g| g * y)
    }

    pub fn ln(&self) -> Tensor<T> {
        self.unary("ln", |x| x.ln(), |x, _, g| g / x)
    }

    /// Logistic function, evaluated without overflow for large `|x|`.
    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary("sigmoid", sigmoid, |_, y, g| g * y * (T::one() - y))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor<T> {
        self.unary("gelu", gelu, |x, _, g| g * gelu_grad(x))
    }

    /// Sum of all elements, shape `[]`.
    pub fn sum_all(&self) -> Tensor<T> {
        let s = self.data().iter().copied().sum();
        Tensor::from_op(
            Vec::new(),
            vec![s],
            "sum_all",
            vec![self.clone()],
            Box::new(|g, _, p| vec![Some(vec![g[0]; p[0].numel()])]),
        )
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = T::from_usize(self.numel()).unwrap();
        self.sum_all().mul_scalar(T::one() / n)
    }

    /// Sum along `axis`; the axis is kept with size 1 when `keepdim`.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        check_axis("sum_axis", self.shape(), axis)?;
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..][..inner];
                let dst = &mut out[o * inner..][..inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
            }
        }
        let mut shape = self.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Ok(Tensor::from_op(
            shape,
            out,
            "sum_axis",
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        gx[(o * len + l) * inner..][..inner]
                            .copy_from_slice(&g[o * inner..][..inner]);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        check_axis("mean_axis", self.shape(), axis)?;
        let len = T::from_usize(self.shape()[axis]).unwrap();
        Ok(self.sum_axis(axis, keepdim)?.mul_scalar(T::one() / len))
    }

    /// Same data, new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel_of(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            "reshape",
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        ))
    }

    /// General axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank
            || axes
                .iter()
                .any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::shape("permute", self.shape(), axes));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let index = permute_index(&in_shape, axes);
        let x = self.data();
        let data = index.iter().map(|&src| x[src]).collect();
        Ok(Tensor::from_op(
            out_shape,
            data,
            "permute",
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); g.len()];
                for (dst, &src) in index.iter().enumerate() {
                    gx[src] = g[dst];
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Swap two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<T>> {
        check_axis("transpose", self.shape(), a.max(b))?;
        let mut axes: Vec<usize> = (0..self.rank()).collect();
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat of zero tensors".into()))?;
        check_axis("concat", first.shape(), axis)?;
        for p in &parts[1..] {
            let ok = p.rank() == first.rank()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
        }
        let (outer, _, inner) = split_at_axis(first.shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * len * inner..][..len * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(
            shape,
            data,
            "concat",
            parts.iter().map(|&p| p.clone()).collect(),
            Box::new(move |g, _, p| {
                let mut grads: Vec<Vec<T>> =
                    lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (gp, &len) in grads.iter_mut().zip(&lens) {
                        gp.extend_from_slice(&g[offset..offset + len * inner]);
                        offset += len * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(p)
                    .map(|(gp, t)| t.requires_grad().then_some(gp))
                    .collect()
            }),
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor<T>> {
        check_axis("slice", self.shape(), axis)?;
        if start >= end || end > self.shape()[axis] {
            return Err(Error::Index(format!(
                "slice {start}..{end} of axis {axis} in {:?}",
                self.shape()
            )));
        }
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let width = end - start;
        let x = self.data();
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            data.extend_from_slice(&x[(o * len + start) * inner..][..width * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = width;
        Ok(Tensor::from_op(
            shape,
            data,
            "slice",
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    gx[(o * len + start) * inner..][..width * inner]
                        .copy_from_slice(&g[o * width * inner..][..width * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis("softmax", self.shape(), axis)?;
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| x[at(l)]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for l in 0..len {
                    let e = (x[at(l)] - m).exp();
                    y[at(l)] = e;
                    s += e;
                }
                for l in 0..len {
                    y[at(l)] /= s;
                }
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            y,
            "softmax",
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: T = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            gx[at(l)] = y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `x - logsumexp(x)` along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis("log_softmax", self.shape(), axis)?;
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| x[at(l)]).fold(T::neg_infinity(), T::max);
                let lse = m + (0..len).map(|l| (x[at(l)] - m).exp()).sum::<T>().ln();
                for l in 0..len {
                    y[at(l)] = x[at(l)] - lse;
                }
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            y,
            "log_softmax",
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let gs: T = (0..len).map(|l| g[at(l)]).sum();
                        for l in 0..len {
                            gx[at(l)] = g[at(l)] - y[at(l)].exp() * gs;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Normalize over the last axis, then scale by `gain` and shift by `bias`.
    pub fn layer_norm(&self, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        let d = *self
            .shape()
            .last()
            .ok_or_else(|| Error::shape("layer_norm", self.shape(), gain.shape()))?;
        if gain.shape() != [d] {
            return Err(Error::shape("layer_norm", self.shape(), gain.shape()));
        }
        if bias.shape() != [d] {
            return Err(Error::shape("layer_norm", self.shape(), bias.shape()));
        }
        let x = self.data();
        let rows = x.len() / d;
        let dt = T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut y = vec![T::zero(); x.len()];
        let (gv, bv) = (gain.data(), bias.data());
        for r in 0..rows {
            let row = &x[r * d..][..d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                y[r * d + j] = h * gv[j] + bv[j];
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            y,
            "layer_norm",
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |g, _, p| {
                let gv = p[1].data();
                let gx = p[0].requires_grad().then(|| {
                    let mut gx = vec![T::zero(); g.len()];
                    for r in 0..rows {
                        let gr = &g[r * d..][..d];
                        let hr = &xhat[r * d..][..d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= dt;
                        m2 /= dt;
                        for j in 0..d {
                            gx[r * d + j] = inv_std[r] * (gr[j] * gv[j] - m1 - hr[j] * m2);
                        }
                    }
                    gx
                });
                let ggain = p[1].requires_grad().then(|| {
                    let mut acc = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            acc[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    acc
                });
                let gbias = p[2].requires_grad().then(|| sum_into_small(g, d));
                vec![gx, ggain, gbias]
            }),
        ))
    }

    /// Inverted dropout: when `active`, zero each element with probability
    /// `rate` and scale survivors by `1/(1-rate)`; identity otherwise.
    pub fn dropout(&self, rate: f64, rng: &mut Rng, active: bool) -> Result<Tensor<T>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !active || rate == 0.0 {
            return Ok(self.clone());
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.numel())
            .map(|_| if rng.uniform() < rate { T::zero() } else { keep })
            .collect();
        let data = self.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            "dropout",
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.iter().zip(&mask).map(|(&g, &m)| g * m).collect())]),
        ))
    }

    /// Batched matrix product `[..., m, k] × [..., k, n] -> [..., m, n]`.
    ///
    /// Leading batch dims broadcast when one side's batch shape is a trailing
    /// suffix of the other's (a plain `[k, n]` matrix broadcasts to any batch).
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let err = || Error::shape("matmul", self.shape(), other.shape());
        if self.rank() < 2 || other.rank() < 2 {
            return Err(err());
        }
        let (sa, sb) = (self.shape(), other.shape());
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch_shape = if ba.len() >= bb.len() { ba } else { bb };
        if !batch_shape.ends_with(ba) || !batch_shape.ends_with(bb) {
            return Err(err());
        }
        let (na, nb, nbatch) = (numel_of(ba), numel_of(bb), numel_of(batch_shape));
        let mut shape = batch_shape.to_vec();
        shape.extend([m, n]);

        let (a, b) = (self.data(), other.data());
        let mut c = vec![T::zero(); nbatch * m * n];
        if nb == 1 {
            // fold the batch of `a` into rows
            // (nb == 1 implies na == nbatch)
            T::gemm(na * m, k, n, a, false, b, false, T::zero(), &mut c);
        } else {
            for i in 0..nbatch {
                T::gemm(
                    m,
                    k,
                    n,
                    &a[(i % na) * m * k..][..m * k],
                    false,
                    &b[(i % nb) * k * n..][..k * n],
                    false,
                    T::zero(),
                    &mut c[i * m * n..][..m * n],
                );
            }
        }

        Ok(Tensor::from_op(
            shape,
            c,
            "matmul",
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, p| {
                let (a, b) = (p[0].data(), p[1].data());
                let ga = p[0].requires_grad().then(|| {
                    let mut ga = vec![T::zero(); na * m * k];
                    if nb == 1 {
                        // dA = G·Bᵀ
                        T::gemm(na * m, n, k, g, false, b, true, T::zero(), &mut ga);
                    } else {
                        for i in 0..nbatch {
                            T::gemm(
                                m,
                                n,
                                k,
                                &g[i * m * n..][..m * n],
                                false,
                                &b[(i % nb) * k * n..][..k * n],
                                true,
                                T::one(),
                                &mut ga[(i % na) * m * k..][..m * k],
                            );
                        }
                    }
                    ga
                });
                let gb = p[1].requires_grad().then(|| {
                    let mut gb = vec![T::zero(); nb * k * n];
                    if nb == 1 {
                        // dB = Aᵀ·G with the batch folded into the contraction
                        T::gemm(k, na * m, n, a, true, g, false, T::zero(), &mut gb);
                    } else {
                        for i in 0..nbatch {
                            T::gemm(
                                k,
                                m,
                                n,
                                &a[(i % na) * m * k..][..m * k],
                                true,
                                &g[i * m * n..][..m * n],
                                false,
                                T::one(),
                                &mut gb[(i % nb) * k * n..][..k * n],
                            );
                        }
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }
}

/// For each output flat index, the input flat index it reads.
fn permute_index(in_shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let rank = in_shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = numel_of(in_shape);
    let mut index = Vec::with_capacity(n);
    if rank == 0 || n == 0 {
        index.extend(0..n);
        return index;
    }
    // innermost output axis as a strided run, odometer over the rest
    let (inner, step) = (out_shape[rank - 1], strides[rank - 1]);
    let mut counter = vec![0usize; rank - 1];
    let mut src = 0usize;
    for _ in 0..n / inner {
        index.extend((0..inner).map(|j| src + j * step));
        for ax in (0..rank - 1).rev() {
            counter[ax] += 1;
            src += strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            src -= strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    index
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.044_715;
// sqrt(2/pi)
const GELU_K: f64 = 0.797_884_560_802_865_4;

// 0.5·(1 + tanh(u)) == sigmoid(2u), and exp is much cheaper than tanh
fn gelu<T: Scalar>(x: T) -> T {
    let u2 = T::lit(2.0 * GELU_K) * (x + T::lit(GELU_C) * x * x * x);
    x * sigmoid(u2)
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let u2 = T::lit(2.0 * GELU_K) * (x + T::lit(GELU_C) * x * x * x);
    let s = sigmoid(u2);
    let du2 = T::lit(2.0 * GELU_K) * (T::one() + T::lit(3.0 * GELU_C) * x * x);
    s + x * s * (T::one() - s) * du2
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;

    type T64 = Tensor<f64>;

    fn t(shape: &[usize], v: &[f64]) -> T64 {
        T64::from_vec(shape, v.to_vec()).unwrap()
    }

    fn rand_param(shape: &[usize], rng: &mut Rng) -> T64 {
        T64::randn(shape, 1.0, rng).into_param()
    }

    #[test]
    fn matmul_examples() {
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let v = t(&[2, 1], &[3.0, 4.0]);
        assert_eq!(id.matmul(&v).unwrap().data(), &[3.0, 4.0]);
        let r = t(&[1, 2], &[1.0, 2.0]).matmul(&v).unwrap();
        assert_eq!(r.shape(), &[1, 1]);
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let e = t(&[2, 3], &[0.0; 6]).matmul(&t(&[2, 3], &[0.0; 6])).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(e, Error::Shape { .. }));
    }

    #[test]
    fn matmul_sum_grad_is_ones_times_bt() {
        let mut rng = Rng::new(42);
        let a = rand_param(&[3, 4], &mut rng);
        let b = rand_param(&[4, 2], &mut rng);
        a.matmul(&b).unwrap().sum_all().backward().unwrap();
        let ga = a.grad().unwrap();
        let bd = b.data();
        for i in 0..3 {
            for p in 0..4 {
                let want = bd[p * 2] + bd[p * 2 + 1];
                assert!((ga[i * 4 + p] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batched_matmul_broadcasts_rank2_either_side() {
        let mut rng = Rng::new(1);
        let a = T64::randn(&[2, 3, 4], 1.0, &mut rng);
        let b = T64::randn(&[4, 5], 1.0, &mut rng);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 5]);
        let second = a.slice(0, 1, 2).unwrap().reshape(&[3, 4]).unwrap().matmul(&b).unwrap();
        assert_eq!(&c.data()[15..], second.data());

        let a2 = T64::randn(&[3, 4], 1.0, &mut rng);
        let b2 = T64::randn(&[2, 4, 5], 1.0, &mut rng);
        let c2 = a2.matmul(&b2).unwrap();
        assert_eq!(c2.shape(), &[2, 3, 5]);
    }

    #[test]
    fn softmax_examples() {
        let s = t(&[2], &[0.0, 0.0]).softmax(0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = t(&[2], &[1000.0, 0.0]).softmax(0).unwrap();
        assert!(s.all_finite());
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] < 1e-300);
        assert!(t(&[2], &[0.0, 0.0]).softmax(1).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let g = T64::ones(&[3]);
        let b = T64::zeros(&[3]);
        let y = t(&[3], &[5.0, 5.0, 5.0]).layer_norm(&g, &b, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
        let g = T64::ones(&[2]);
        let b = T64::zeros(&[2]);
        let y = t(&[2], &[1.0, 3.0]).layer_norm(&g, &b, 0.0).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-12 && (y.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_rows_standardized() {
        let mut rng = Rng::new(3);
        let x = T64::randn(&[4, 8], 3.0, &mut rng).add_scalar(7.0);
        let y = x.layer_norm(&T64::ones(&[8]), &T64::zeros(&[8]), 1e-12).unwrap();
        for row in y.data().chunks(8) {
            let m: f64 = row.iter().sum::<f64>() / 8.0;
            let v: f64 = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 8.0;
            assert!(m.abs() < 1e-9 && (v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn dropout_examples() {
        let mut rng = Rng::new(0);
        let x = T64::ones(&[100]);
        assert_eq!(x.dropout(0.0, &mut rng, true).unwrap().data(), x.data());
        assert_eq!(x.dropout(0.9, &mut rng, false).unwrap().data(), x.data());
        assert!(x.dropout(1.0, &mut rng, true).is_err());
        assert!(x.dropout(-0.1, &mut rng, true).is_err());

        let big = T64::ones(&[100_000]);
        let y = big.dropout(0.3, &mut Rng::new(2024), true).unwrap();
        let mean = y.data().iter().sum::<f64>() / 1e5;
        assert!((0.99..=1.01).contains(&mean), "{mean}");
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
        assert!((zeros - 0.3).abs() < 0.01);
    }

    #[test]
    fn concat_slice_permute_roundtrip() {
        let mut rng = Rng::new(9);
        let a = T64::randn(&[2, 3, 4], 1.0, &mut rng);
        let b = T64::randn(&[2, 1, 4], 1.0, &mut rng);
        let c = T64::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 4, 4]);
        assert_eq!(c.slice(1, 0, 3).unwrap().data(), a.data());
        assert_eq!(c.slice(1, 3, 4).unwrap().data(), b.data());
        let p = a.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.permute(&[1, 2, 0]).unwrap().data(), a.data());
        assert!(a.permute(&[0, 0, 1]).is_err());
        assert!(a.slice(1, 2, 2).is_err());
    }

    #[test]
    fn broadcasting_is_suffix_only() {
        let a = T64::ones(&[2, 3]);
        assert!(a.add(&T64::ones(&[3])).is_ok());
        assert!(T64::ones(&[3]).add(&a).is_ok());
        assert!(a.add(&T64::ones(&[2])).is_err());
    }

    #[test]
    fn gradcheck_elementwise_and_reductions() {
        for seed in 0..5 {
            let mut rng = Rng::new(seed);
            let a = rand_param(&[2, 3], &mut rng);
            let b = rand_param(&[3], &mut rng);
            let c = T64::randn(&[2, 3], 1.0, &mut rng).mul_scalar(0.2).add_scalar(2.0).into_param();
            let report = check_gradients(&[a.clone(), b.clone(), c.clone()], |p| {
                let x = p[0].add(&p[1])?.mul(&p[0])?.sub(&p[1])?.div(&p[2])?;
                let y = x.square().add_scalar(0.3).mul_scalar(1.7).neg().exp().ln();
                let z = y.sigmoid().add(&y.gelu())?;
                Ok(z.sum_axis(0, false)?.mean_axis(0, true)?.sum_all())
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
        }
    }
}
