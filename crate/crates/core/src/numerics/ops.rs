//! Differentiable operations on [`Tensor`].

use rand::Rng;

use crate::error::{Error, Result};

use super::array::{
    broadcast_shape, broadcast_strides, for_each_offset, for_each_offset2, order_free_sum,
    reduce_to,
};
use super::tensor::is_strict;
use super::{Array, Element, Tensor};

const GELU_COEF: f64 = 0.044715;
// sqrt(2 / pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

fn broadcast_binary<T: Element>(
    op: &'static str,
    a: &Array<T>,
    b: &Array<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Array<T>> {
    if a.shape() == b.shape() {
        return Ok(a.zip_map(b, f));
    }
    let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })?;
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let (ad, bd) = (a.data(), b.data());
    // common case: b is a suffix of a (bias rows, positional tables)
    if shape == a.shape() && a.shape().ends_with(b.shape()) {
        let w = b.numel().max(1);
        for (i, &x) in ad.iter().enumerate() {
            data.push(f(x, bd[i % w]));
        }
    } else {
        let sa = broadcast_strides(a.shape(), &shape);
        let sb = broadcast_strides(b.shape(), &shape);
        for_each_offset2(&shape, &sa, &sb, |ia, ib| data.push(f(ad[ia], bd[ib])));
    }
    Array::new(shape, data)
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::param(format!(
            "{op}: axis {axis} out of range for {shape:?}"
        )));
    }
    Ok(())
}

/// `(outer, len, inner)` view of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Batched matrix product into `out` (overwritten), honoring strict mode.
#[allow(clippy::too_many_arguments)]
fn gemm_into<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    out: &mut [T],
    accumulate: bool,
    strict: bool,
) {
    debug_assert!(out.len() >= m * n);
    if strict {
        let mut terms = vec![T::zero(); k];
        for i in 0..m {
            for j in 0..n {
                for (p, t) in terms.iter_mut().enumerate() {
                    *t = a[i * rsa + p * csa] * b[p * rsb + j * csb];
                }
                let s = order_free_sum(&mut terms);
                if accumulate {
                    out[i * n + j] += s;
                } else {
                    out[i * n + j] = s;
                }
            }
        }
        return;
    }
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: slices cover the strided extents checked by the callers.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl<T: Element> Tensor<T> {
    // ---------------------------------------------------------------
    // elementwise

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let value = broadcast_binary("add", &self.value(), &other.value(), |a, b| a + b)?;
        Tensor::from_op(
            "add",
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, p, _| {
                Ok(vec![
                    Some(reduce_to(g, p[0].shape())),
                    Some(reduce_to(g, p[1].shape())),
                ])
            }),
        )
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let value = broadcast_binary("sub", &self.value(), &other.value(), |a, b| a - b)?;
        Tensor::from_op(
            "sub",
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, p, _| {
                Ok(vec![
                    Some(reduce_to(g, p[0].shape())),
                    Some(reduce_to(&g.map(|x| -x), p[1].shape())),
                ])
            }),
        )
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let value = broadcast_binary("mul", &self.value(), &other.value(), |a, b| a * b)?;
        Tensor::from_op(
            "mul",
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, p, _| {
                let ga = broadcast_binary("mul", g, p[1], |x, y| x * y)?;
                let gb = broadcast_binary("mul", g, p[0], |x, y| x * y)?;
                Ok(vec![
                    Some(reduce_to(&ga, p[0].shape())),
                    Some(reduce_to(&gb, p[1].shape())),
                ])
            }),
        )
    }

    pub fn scale(&self, c: f64) -> Result<Tensor<T>> {
        let c = T::lit(c);
        let value = self.value().map(|x| x * c);
        Tensor::from_op(
            "scale",
            value,
            vec![self.clone()],
            Box::new(move |g, _, _| Ok(vec![Some(g.map(|x| x * c))])),
        )
    }

    pub fn neg(&self) -> Result<Tensor<T>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor<T>> {
        let c = T::lit(c);
        let value = self.value().map(|x| x + c);
        Tensor::from_op(
            "add_scalar",
            value,
            vec![self.clone()],
            Box::new(|g, _, _| Ok(vec![Some(g.clone())])),
        )
    }

    pub fn square(&self) -> Result<Tensor<T>> {
        let value = self.value().map(|x| x * x);
        Tensor::from_op(
            "square",
            value,
            vec![self.clone()],
            Box::new(|g, p, _| {
                let two = T::lit(2.0);
                Ok(vec![Some(g.zip_map(p[0], |g, x| g * two * x))])
            }),
        )
    }

    /// GELU, tanh approximation. Evaluated as `x * sigmoid(2u)`, which equals
    /// `0.5 x (1 + tanh u)` and avoids the slower libm tanh.
    pub fn gelu(&self) -> Result<Tensor<T>> {
        let (c, s, two) = (T::lit(GELU_COEF), T::lit(GELU_SCALE), T::lit(2.0));
        let sig = move |x: T| T::one() / (T::one() + (-two * s * (x + c * x * x * x)).exp());
        let value = self.value().map(|x| x * sig(x));
        Tensor::from_op(
            "gelu",
            value,
            vec![self.clone()],
            Box::new(move |g, p, _| {
                let three = T::lit(3.0);
                Ok(vec![Some(g.zip_map(p[0], |g, x| {
                    let q = sig(x);
                    let du = s * (T::one() + three * c * x * x);
                    g * (q + two * x * q * (T::one() - q) * du)
                }))])
            }),
        )
    }

    // ---------------------------------------------------------------
    // linear algebra

    /// Matrix product over the last two axes with broadcast batch axes.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let strict = is_strict();

        if sb.len() == 2 {
            // fold every leading axis of `a` into the row dimension
            let rows = a.numel() / k.max(1);
            let mut out = vec![T::zero(); rows * n];
            gemm_into(
                rows,
                k,
                n,
                a.data(),
                (k, 1),
                b.data(),
                (n, 1),
                &mut out,
                false,
                strict,
            );
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = n;
            let value = Array::new(shape, out)?;
            drop(a);
            drop(b);
            return Tensor::from_op(
                "matmul",
                value,
                vec![self.clone(), other.clone()],
                Box::new(move |g, p, _| {
                    let (a, b) = (p[0], p[1]);
                    // dA = G Bᵀ, dB = Aᵀ G
                    let mut ga = vec![T::zero(); a.numel()];
                    gemm_into(
                        rows,
                        n,
                        k,
                        g.data(),
                        (n, 1),
                        b.data(),
                        (1, n),
                        &mut ga,
                        false,
                        false,
                    );
                    let mut gb = vec![T::zero(); b.numel()];
                    gemm_into(
                        k,
                        rows,
                        n,
                        a.data(),
                        (1, k),
                        g.data(),
                        (n, 1),
                        &mut gb,
                        false,
                        false,
                    );
                    Ok(vec![
                        Some(Array::new(a.shape().to_vec(), ga)?),
                        Some(Array::new(b.shape().to_vec(), gb)?),
                    ])
                }),
            );
        }

        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape(ba, bb).ok_or_else(|| shape_err("matmul", &sa, &sb))?;
        let pairs = batch_pairs(ba, bb, &batch);
        let mut out = vec![T::zero(); pairs.len() * m * n];
        for (i, &(ia, ib)) in pairs.iter().enumerate() {
            gemm_into(
                m,
                k,
                n,
                &a.data()[ia * m * k..],
                (k, 1),
                &b.data()[ib * k * n..],
                (n, 1),
                &mut out[i * m * n..],
                false,
                strict,
            );
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let value = Array::new(shape, out)?;
        drop(a);
        drop(b);
        Tensor::from_op(
            "matmul",
            value,
            vec![self.clone(), other.clone()],
            Box::new(move |g, p, _| {
                let (a, b) = (p[0], p[1]);
                let mut ga = vec![T::zero(); a.numel()];
                let mut gb = vec![T::zero(); b.numel()];
                for (i, &(ia, ib)) in pairs.iter().enumerate() {
                    let gi = &g.data()[i * m * n..];
                    gemm_into(
                        m,
                        n,
                        k,
                        gi,
                        (n, 1),
                        &b.data()[ib * k * n..],
                        (1, n),
                        &mut ga[ia * m * k..],
                        true,
                        false,
                    );
                    gemm_into(
                        k,
                        m,
                        n,
                        &a.data()[ia * m * k..],
                        (1, k),
                        gi,
                        (n, 1),
                        &mut gb[ib * k * n..],
                        true,
                        false,
                    );
                }
                Ok(vec![
                    Some(Array::new(a.shape().to_vec(), ga)?),
                    Some(Array::new(b.shape().to_vec(), gb)?),
                ])
            }),
        )
    }

    // ---------------------------------------------------------------
    // reductions

    pub fn sum(&self) -> Result<Tensor<T>> {
        let v = self.value();
        let total = if is_strict() {
            order_free_sum(&mut v.data().to_vec())
        } else {
            v.sum()
        };
        drop(v);
        Tensor::from_op(
            "sum",
            Array::scalar(total),
            vec![self.clone()],
            Box::new(|g, p, _| Ok(vec![Some(Array::full(p[0].shape().to_vec(), g.item()))])),
        )
    }

    pub fn mean(&self) -> Result<Tensor<T>> {
        let n = self.numel().max(1);
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Sum along `axis`; the axis is kept with size 1 when `keepdim`.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        let v = self.value();
        check_axis("sum_axis", v.shape(), axis)?;
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let strict = is_strict();
        let d = v.data();
        let mut out = vec![T::zero(); outer * inner];
        let mut terms = Vec::with_capacity(len);
        for o in 0..outer {
            for i in 0..inner {
                let s = if strict {
                    terms.clear();
                    terms.extend((0..len).map(|l| d[(o * len + l) * inner + i]));
                    order_free_sum(&mut terms)
                } else {
                    let mut acc = T::zero();
                    for l in 0..len {
                        acc += d[(o * len + l) * inner + i];
                    }
                    acc
                };
                out[o * inner + i] = s;
            }
        }
        let mut shape = v.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        drop(v);
        Tensor::from_op(
            "sum_axis",
            Array::new(shape, out)?,
            vec![self.clone()],
            Box::new(move |g, p, _| {
                let gd = g.data();
                let mut gx = vec![T::zero(); p[0].numel()];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            gx[(o * len + l) * inner + i] = gd[o * inner + i];
                        }
                    }
                }
                Ok(vec![Some(Array::new(p[0].shape().to_vec(), gx)?)])
            }),
        )
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        let shape = self.shape();
        check_axis("mean_axis", &shape, axis)?;
        self.sum_axis(axis, keepdim)?
            .scale(1.0 / shape[axis].max(1) as f64)
    }

    /// Max along `axis`; the gradient goes to the first maximal element.
    pub fn max_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        let v = self.value();
        check_axis("max_axis", v.shape(), axis)?;
        let (outer, len, inner) = split_axis(v.shape(), axis);
        if len == 0 {
            return Err(Error::param("max over an empty axis"));
        }
        let d = v.data();
        let mut out = vec![T::zero(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = d[o * len * inner + i];
                let mut at = 0;
                for l in 1..len {
                    let x = d[(o * len + l) * inner + i];
                    if x > best {
                        best = x;
                        at = l;
                    }
                }
                out[o * inner + i] = best;
                arg[o * inner + i] = at;
            }
        }
        let mut shape = v.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        drop(v);
        Tensor::from_op(
            "max_axis",
            Array::new(shape, out)?,
            vec![self.clone()],
            Box::new(move |g, p, _| {
                let gd = g.data();
                let mut gx = vec![T::zero(); p[0].numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let l = arg[o * inner + i];
                        gx[(o * len + l) * inner + i] = gd[o * inner + i];
                    }
                }
                Ok(vec![Some(Array::new(p[0].shape().to_vec(), gx)?)])
            }),
        )
    }

    // ---------------------------------------------------------------
    // shape manipulation

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor<T>> {
        let value = self.to_array().reshape(shape)?;
        Tensor::from_op(
            "reshape",
            value,
            vec![self.clone()],
            Box::new(|g, p, _| Ok(vec![Some(g.clone().reshape(p[0].shape().to_vec())?)])),
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let value = self.value().permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Tensor::from_op(
            "permute",
            value,
            vec![self.clone()],
            Box::new(move |g, _, _| Ok(vec![Some(g.permute(&inverse)?)])),
        )
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor<T>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::param("transpose needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let v = self.value();
        let target = broadcast_shape(v.shape(), shape)
            .filter(|s| s == shape)
            .ok_or_else(|| shape_err("broadcast_to", v.shape(), shape))?;
        let src = broadcast_strides(v.shape(), &target);
        let d = v.data();
        let mut data = Vec::with_capacity(target.iter().product());
        for_each_offset(&target, &src, |i| data.push(d[i]));
        drop(v);
        Tensor::from_op(
            "broadcast_to",
            Array::new(target, data)?,
            vec![self.clone()],
            Box::new(|g, p, _| Ok(vec![Some(reduce_to(g, p[0].shape()))])),
        )
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::param("concat of zero tensors"))?
            .shape();
        check_axis("concat", &first, axis)?;
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &first, &s));
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        for o in 0..outer {
            for (v, &len) in values.iter().zip(&lens) {
                data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        drop(values);
        let mut shape = first.clone();
        shape[axis] = total;
        let lens_b = lens.clone();
        Tensor::from_op(
            "concat",
            Array::new(shape, data)?,
            parts.iter().map(|&p| p.clone()).collect(),
            Box::new(move |g, p, _| {
                let gd = g.data();
                let mut out: Vec<Vec<T>> = lens_b
                    .iter()
                    .map(|&l| Vec::with_capacity(outer * l * inner))
                    .collect();
                for o in 0..outer {
                    let mut off = o * total * inner;
                    for (buf, &len) in out.iter_mut().zip(&lens_b) {
                        buf.extend_from_slice(&gd[off..off + len * inner]);
                        off += len * inner;
                    }
                }
                out.into_iter()
                    .zip(p)
                    .map(|(buf, pv)| Ok(Some(Array::new(pv.shape().to_vec(), buf)?)))
                    .collect()
            }),
        )
    }

    /// Rows of the tensor viewed as `[rows, ...]`; indices may repeat.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let value = self.value().gather_rows(indices)?;
        let idx = indices.to_vec();
        Tensor::from_op(
            "gather_rows",
            value,
            vec![self.clone()],
            Box::new(move |g, p, _| {
                let rows = p[0].shape().first().copied().unwrap_or(1);
                let width = p[0].numel() / rows.max(1);
                let mut gx = vec![T::zero(); p[0].numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for (dst, &src) in gx[i * width..(i + 1) * width]
                        .iter_mut()
                        .zip(&g.data()[r * width..(r + 1) * width])
                    {
                        *dst += src;
                    }
                }
                Ok(vec![Some(Array::new(p[0].shape().to_vec(), gx)?)])
            }),
        )
    }

    // ---------------------------------------------------------------
    // normalization and attention primitives

    /// Normalizes over the last axis with population variance; `affine`
    /// is an optional `(gamma, beta)` pair of shape `[E]`.
    pub fn layer_norm(
        &self,
        eps: f64,
        affine: Option<(&Tensor<T>, &Tensor<T>)>,
    ) -> Result<Tensor<T>> {
        if eps <= 0.0 {
            return Err(Error::param("layer_norm eps must be positive"));
        }
        let v = self.value();
        let e = v.last_dim();
        if e == 0 {
            return Err(Error::param("layer_norm over an empty axis"));
        }
        let rows = v.numel() / e;
        let (gamma, beta) = match affine {
            Some((g, b)) => {
                if g.shape() != [e] || b.shape() != [e] {
                    return Err(shape_err("layer_norm", v.shape(), &g.shape()));
                }
                (Some(g.to_vec()), Some(b.to_vec()))
            }
            None => (None, None),
        };
        let eps_t = T::lit(eps);
        let inv_e = T::lit(1.0 / e as f64);
        let mut xhat = vec![T::zero(); v.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); v.numel()];
        for r in 0..rows {
            let x = &v.data()[r * e..(r + 1) * e];
            let mean = x.iter().copied().sum::<T>() * inv_e;
            let var = x.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() * inv_e;
            let rs = T::one() / (var + eps_t).sqrt();
            rstd[r] = rs;
            for j in 0..e {
                let h = (x[j] - mean) * rs;
                xhat[r * e + j] = h;
                out[r * e + j] = match (&gamma, &beta) {
                    (Some(g), Some(b)) => h * g[j] + b[j],
                    _ => h,
                };
            }
        }
        let shape = v.shape().to_vec();
        drop(v);
        let mut parents = vec![self.clone()];
        if let Some((g, b)) = affine {
            parents.push(g.clone());
            parents.push(b.clone());
        }
        Tensor::from_op(
            "layer_norm",
            Array::new(shape, out)?,
            parents,
            Box::new(move |g, p, _| {
                let gd = g.data();
                let mut gx = vec![T::zero(); gd.len()];
                let mut ggamma = vec![T::zero(); e];
                let mut gbeta = vec![T::zero(); e];
                let mut gh = vec![T::zero(); e];
                for r in 0..rows {
                    let go = &gd[r * e..(r + 1) * e];
                    let xh = &xhat[r * e..(r + 1) * e];
                    for j in 0..e {
                        gh[j] = match &gamma {
                            Some(gm) => go[j] * gm[j],
                            None => go[j],
                        };
                        ggamma[j] += go[j] * xh[j];
                        gbeta[j] += go[j];
                    }
                    let mean_gh = gh.iter().copied().sum::<T>() * inv_e;
                    let mean_ghx = gh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * inv_e;
                    for j in 0..e {
                        gx[r * e + j] = rstd[r] * (gh[j] - mean_gh - xh[j] * mean_ghx);
                    }
                }
                let mut grads = vec![Some(Array::new(p[0].shape().to_vec(), gx)?)];
                if p.len() == 3 {
                    grads.push(Some(Array::new(vec![e], ggamma)?));
                    grads.push(Some(Array::new(vec![e], gbeta)?));
                }
                Ok(grads)
            }),
        )
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&self) -> Result<Tensor<T>> {
        let v = self.value();
        let s = v.last_dim();
        let rows = v.numel() / s.max(1);
        let strict = is_strict();
        let mut out = vec![T::zero(); v.numel()];
        for r in 0..rows {
            let x = &v.data()[r * s..(r + 1) * s];
            let max = x.iter().copied().fold(T::neg_infinity(), T::max);
            let row = &mut out[r * s..(r + 1) * s];
            for (o, &xi) in row.iter_mut().zip(x) {
                *o = (xi - max).exp();
            }
            let total = if strict {
                order_free_sum(&mut row.to_vec())
            } else {
                row.iter().copied().sum()
            };
            for o in row.iter_mut() {
                *o = *o / total;
            }
        }
        let shape = v.shape().to_vec();
        drop(v);
        Tensor::from_op(
            "softmax",
            Array::new(shape, out)?,
            vec![self.clone()],
            Box::new(move |g, _, y| {
                let mut gx = vec![T::zero(); g.numel()];
                for r in 0..rows {
                    let gy = &g.data()[r * s..(r + 1) * s];
                    let yy = &y.data()[r * s..(r + 1) * s];
                    let dot: T = gy.iter().zip(yy).map(|(&a, &b)| a * b).sum();
                    for j in 0..s {
                        gx[r * s + j] = yy[j] * (gy[j] - dot);
                    }
                }
                Ok(vec![Some(Array::new(y.shape().to_vec(), gx)?)])
            }),
        )
    }

    // ---------------------------------------------------------------
    // stochastic regularizers

    /// Inverted dropout; identity outside training or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(
        &self,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        check_rate(rate)?;
        if !training || rate == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 - rate;
        let scale = T::lit(1.0 / keep);
        let mask = Array::from_fn(self.shape(), |_| {
            if rng.random::<f64>() < keep {
                scale
            } else {
                T::zero()
            }
        });
        self.mul(&Tensor::constant(mask))
    }

    /// Stochastic depth on a residual branch shaped `[batch, ...]`: each
    /// sample's branch is zeroed with probability `rate`, survivors are
    /// rescaled by `1 / (1 - rate)`.
    pub fn drop_path<R: Rng + ?Sized>(
        &self,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        check_rate(rate)?;
        if !training || rate == 0.0 {
            return Ok(self.clone());
        }
        let shape = self.shape();
        let batch = shape.first().copied().unwrap_or(1);
        let keep = 1.0 - rate;
        let scale = T::lit(1.0 / keep);
        let mut mask_shape = vec![1; shape.len().max(1)];
        mask_shape[0] = batch;
        let mask = Array::from_fn(mask_shape, |_| {
            if rng.random::<f64>() < keep {
                scale
            } else {
                T::zero()
            }
        });
        self.mul(&Tensor::constant(mask))
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::param(format!("drop rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Matrix offsets (in units of whole matrices) for each broadcast batch index.
fn batch_pairs(ba: &[usize], bb: &[usize], batch: &[usize]) -> Vec<(usize, usize)> {
    let sa = broadcast_strides(ba, batch);
    let sb = broadcast_strides(bb, batch);
    let mut pairs = Vec::with_capacity(batch.iter().product());
    for_each_offset2(batch, &sa, &sb, |ia, ib| pairs.push((ia, ib)));
    pairs
}

/// Smooth L1 (Huber with transition `beta`) averaged over all elements.
/// Gradients flow to `pred` only.
pub fn smooth_l1<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, beta: f64) -> Result<Tensor<T>> {
    if beta <= 0.0 {
        return Err(Error::param("smooth_l1 beta must be positive"));
    }
    let (p, t) = (pred.value(), target.value());
    if p.shape() != t.shape() {
        return Err(shape_err("smooth_l1", p.shape(), t.shape()));
    }
    let n = p.numel().max(1);
    let b = T::lit(beta);
    let half = T::lit(0.5);
    let mut total = T::zero();
    for (&x, &y) in p.data().iter().zip(t.data()) {
        let d = x - y;
        total += if d.abs() < b {
            half * d * d / b
        } else {
            d.abs() - half * b
        };
    }
    let value = Array::scalar(total / T::lit(n as f64));
    drop(p);
    drop(t);
    Tensor::from_op(
        "smooth_l1",
        value,
        vec![pred.clone(), target.clone()],
        Box::new(move |g, p, _| {
            let scale = g.item() / T::lit(n as f64);
            let gx = p[0].zip_map(p[1], |x, y| {
                let d = x - y;
                let dd = if d.abs() < b { d / b } else { d.signum() };
                dd * scale
            });
            Ok(vec![Some(gx), None])
        }),
    )
}

/// Cross-entropy of `logits` (`[N, C]`) against a smoothed one-hot target:
/// `1 - eps` on the label, `eps / (C - 1)` on every other class. Mean over N.
pub fn label_smoothing_cross_entropy<T: Element>(
    logits: &Tensor<T>,
    labels: &[usize],
    eps: f64,
) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::param(format!(
            "label smoothing {eps} outside [0, 1)"
        )));
    }
    let v = logits.value();
    if v.rank() != 2 || v.shape()[0] != labels.len() {
        return Err(shape_err("cross_entropy", v.shape(), &[labels.len()]));
    }
    let (n, c) = (v.shape()[0], v.shape()[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::param(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let q_other = if c > 1 { eps / (c - 1) as f64 } else { 0.0 };
    let q_true = if c > 1 { 1.0 - eps } else { 1.0 };
    let mut probs = vec![T::zero(); n * c];
    let mut total = 0.0f64;
    for (r, &label) in labels.iter().enumerate() {
        let x = &v.data()[r * c..(r + 1) * c];
        let max = x.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max.as_f64() + x.iter().map(|&a| (a - max).exp()).sum::<T>().as_f64().ln();
        for j in 0..c {
            let logp = x[j].as_f64() - lse;
            probs[r * c + j] = T::lit(logp.exp());
            let q = if j == label { q_true } else { q_other };
            total -= q * logp;
        }
    }
    drop(v);
    let labels = labels.to_vec();
    Tensor::from_op(
        "cross_entropy",
        Array::scalar(T::lit(total / n.max(1) as f64)),
        vec![logits.clone()],
        Box::new(move |g, p, _| {
            let scale = g.item().as_f64() / n.max(1) as f64;
            let mut gx = vec![T::zero(); n * c];
            for (r, &label) in labels.iter().enumerate() {
                for j in 0..c {
                    let q = if j == label { q_true } else { q_other };
                    gx[r * c + j] = T::lit((probs[r * c + j].as_f64() - q) * scale);
                }
            }
            Ok(vec![Some(Array::new(p[0].shape().to_vec(), gx)?)])
        }),
    )
}
