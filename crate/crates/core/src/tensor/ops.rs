use super::{numel, BackwardCtx, Result, Scalar, Tensor, TensorError};

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument { op, msg: msg.into() }
}

/// `c (+)= op(a) * op(b)` for row-major buffers. With `a_t` the buffer `a`
/// holds the `k x m` matrix whose transpose is used; likewise `b_t` means `b`
/// holds `n x k`.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: slice lengths checked above; `c` is a distinct mutable borrow.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Layout shared by `matmul` and `matmul_nt`: either rows of `a` against a
/// single 2-D right operand, or a batch of independent products.
struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    /// Right operand is shared across all rows (2-D case).
    shared_rhs: bool,
}

fn matmul_dims(op: &'static str, a: &[usize], b: &[usize], rhs_transposed: bool) -> Result<MatmulDims> {
    if a.len() < 2 {
        return Err(mismatch(op, a, b));
    }
    let k = *a.last().unwrap();
    if b.len() == 2 {
        let (bk, n) = if rhs_transposed { (b[1], b[0]) } else { (b[0], b[1]) };
        if bk != k {
            return Err(mismatch(op, a, b));
        }
        let m = numel(&a[..a.len() - 1]);
        let mut out_shape = a[..a.len() - 1].to_vec();
        out_shape.push(n);
        return Ok(MatmulDims { batch: 1, m, k, n, out_shape, shared_rhs: true });
    }
    if a.len() == 3 && b.len() == 3 && a[0] == b[0] {
        let (bk, n) = if rhs_transposed { (b[2], b[1]) } else { (b[1], b[2]) };
        if bk != k {
            return Err(mismatch(op, a, b));
        }
        return Ok(MatmulDims {
            batch: a[0],
            m: a[1],
            k,
            n,
            out_shape: vec![a[0], a[1], n],
            shared_rhs: false,
        });
    }
    Err(mismatch(op, a, b))
}

fn broadcast_rows(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<usize> {
    if rhs.len() > lhs.len() || lhs[lhs.len() - rhs.len()..] != *rhs {
        return Err(mismatch(op, lhs, rhs));
    }
    Ok(numel(&lhs[..lhs.len() - rhs.len()]))
}

/// Sum `g` (rows x inner) down to one `inner` row, accumulating in f64.
fn reduce_rows<T: Scalar>(g: &[T], inner: usize) -> Vec<T> {
    if inner == 0 {
        return Vec::new();
    }
    let mut acc = vec![0.0f64; inner];
    for row in g.chunks_exact(inner) {
        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v.as_f64());
    }
    acc.into_iter().map(T::from_f64).collect()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `src` (with `shape`) into the layout given by `dims`.
fn permute_data<T: Scalar>(src: &[T], shape: &[usize], dims: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = dims.iter().map(|&d| shape[d]).collect();
    let step: Vec<usize> = dims.iter().map(|&d| in_strides[d]).collect();
    let total = src.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    // The innermost axis is walked as a strided run.
    let last = rank - 1;
    let inner = out_shape[last];
    let inner_step = step[last];
    loop {
        let mut o = offset;
        for _ in 0..inner {
            out.push(src[o]);
            o += inner_step;
        }
        // Advance the outer counters.
        let mut axis = last;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            offset += step[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            offset -= step[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Per-row cross-entropy (nats) of `logits` (rows x classes) against
/// `targets`, without recording a graph. Accumulates in f64.
pub fn cross_entropy_rows<T: Scalar>(logits: &[T], classes: usize, targets: &[usize]) -> Result<Vec<f64>> {
    if classes == 0 || logits.len() != targets.len() * classes {
        return Err(invalid(
            "cross_entropy_rows",
            format!("{} logits for {} targets x {classes} classes", logits.len(), targets.len()),
        ));
    }
    logits
        .chunks_exact(classes)
        .zip(targets)
        .map(|(row, &t)| {
            if t >= classes {
                return Err(TensorError::TargetOutOfRange { target: t, classes });
            }
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let sum: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
            Ok(max + sum.ln() - row[t].as_f64())
        })
        .collect()
}

impl<T: Scalar> Tensor<T> {
    /// Matrix product. `self` is `(.., k)` against a `(k, n)` matrix, or a
    /// `(b, m, k)` by `(b, k, n)` batched product.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.matmul_impl(rhs, false)
    }

    /// `self` times the transpose of `rhs`: `(.., k)` against `(n, k)`, or
    /// `(b, m, k)` against `(b, n, k)`.
    pub fn matmul_nt(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.matmul_impl(rhs, true)
    }

    fn matmul_impl(&self, rhs: &Tensor<T>, nt: bool) -> Result<Tensor<T>> {
        let op = if nt { "matmul_nt" } else { "matmul" };
        let dims = matmul_dims(op, self.shape(), rhs.shape(), nt)?;
        let MatmulDims { batch, m, k, n, shared_rhs, .. } = dims;
        let mut out = vec![T::zero(); batch * m * n];
        {
            let a = self.data();
            let b = rhs.data();
            for bi in 0..batch {
                let a_s = &a[bi * m * k..(bi + 1) * m * k];
                let b_s = if shared_rhs { &b[..] } else { &b[bi * k * n..(bi + 1) * k * n] };
                gemm(m, k, n, a_s, false, b_s, nt, &mut out[bi * m * n..(bi + 1) * m * n], false);
            }
        }
        Ok(Tensor::from_op(
            op,
            dims.out_shape,
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let (pa, pb) = (&ctx.parents[0], &ctx.parents[1]);
                let g = ctx.grad;
                let ga = pa.requires_grad().then(|| {
                    let b = pb.data();
                    let mut ga = vec![T::zero(); batch * m * k];
                    for bi in 0..batch {
                        let g_s = &g[bi * m * n..(bi + 1) * m * n];
                        let b_s = if shared_rhs { &b[..] } else { &b[bi * k * n..(bi + 1) * k * n] };
                        // nn: dA = G B^T ; nt: dA = G B
                        gemm(m, n, k, g_s, false, b_s, !nt, &mut ga[bi * m * k..(bi + 1) * m * k], false);
                    }
                    ga
                });
                let gb = pb.requires_grad().then(|| {
                    let a = pa.data();
                    let mut gb = vec![T::zero(); if shared_rhs { k * n } else { batch * k * n }];
                    for bi in 0..batch {
                        let g_s = &g[bi * m * n..(bi + 1) * m * n];
                        let a_s = &a[bi * m * k..(bi + 1) * m * k];
                        let gb_s = if shared_rhs {
                            &mut gb[..]
                        } else {
                            &mut gb[bi * k * n..(bi + 1) * k * n]
                        };
                        if nt {
                            // dB = G^T A, (n x m)(m x k)
                            gemm(n, m, k, g_s, true, a_s, false, gb_s, shared_rhs && bi > 0);
                        } else {
                            // dB = A^T G, (k x m)(m x n)
                            gemm(k, m, n, a_s, true, g_s, false, gb_s, shared_rhs && bi > 0);
                        }
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Elementwise sum; `rhs` may match a trailing suffix of `self`'s shape.
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let rows = broadcast_rows("add", self.shape(), rhs.shape())?;
        let inner = rhs.numel();
        let a = self.data();
        let b = rhs.data();
        let out: Vec<T> = if inner == 0 {
            Vec::new()
        } else {
            a.chunks_exact(inner)
                .flat_map(|row| row.iter().zip(b.iter()).map(|(x, y)| *x + *y))
                .collect()
        };
        debug_assert_eq!(out.len(), rows * inner);
        drop((a, b));
        Ok(Tensor::from_op(
            "add",
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let ga = ctx.parents[0].requires_grad().then(|| ctx.grad.to_vec());
                let gb = ctx.parents[1].requires_grad().then(|| reduce_rows(ctx.grad, inner));
                vec![ga, gb]
            }),
        ))
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.add(&rhs.scale(-1.0))
    }

    /// Elementwise product; `rhs` may match a trailing suffix of `self`'s shape.
    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        broadcast_rows("mul", self.shape(), rhs.shape())?;
        let inner = rhs.numel();
        let out: Vec<T> = {
            let a = self.data();
            let b = rhs.data();
            if inner == 0 {
                Vec::new()
            } else {
                a.chunks_exact(inner)
                    .flat_map(|row| row.iter().zip(b.iter()).map(|(x, y)| *x * *y))
                    .collect()
            }
        };
        Ok(Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let (pa, pb) = (&ctx.parents[0], &ctx.parents[1]);
                let ga = pa.requires_grad().then(|| {
                    let b = pb.data();
                    ctx.grad
                        .chunks_exact(inner)
                        .flat_map(|row| row.iter().zip(b.iter()).map(|(g, y)| *g * *y).collect::<Vec<_>>())
                        .collect()
                });
                let gb = pb.requires_grad().then(|| {
                    let a = pa.data();
                    let mut acc = vec![0.0f64; inner];
                    for (grow, arow) in ctx.grad.chunks_exact(inner).zip(a.chunks_exact(inner)) {
                        for ((s, g), x) in acc.iter_mut().zip(grow).zip(arow) {
                            *s += (*g * *x).as_f64();
                        }
                    }
                    acc.into_iter().map(T::from_f64).collect()
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor<T> {
        let c = T::from_f64(factor);
        let out = self.data().iter().map(|v| *v * c).collect();
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_, T>| vec![Some(ctx.grad.iter().map(|g| *g * c).collect())]),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(mismatch("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|ctx: &BackwardCtx<'_, T>| vec![Some(ctx.grad.to_vec())]),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `dims[i]`.
    pub fn permute(&self, dims: &[usize]) -> Result<Tensor<T>> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if dims.len() != rank || dims.iter().any(|&d| d >= rank || std::mem::replace(&mut seen[d], true)) {
            return Err(invalid("permute", format!("{dims:?} is not a permutation of rank {rank}")));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = dims.iter().map(|&d| in_shape[d]).collect();
        let out = permute_data(&self.data(), &in_shape, dims);
        let mut inverse = vec![0; rank];
        for (i, &d) in dims.iter().enumerate() {
            inverse[d] = i;
        }
        let grad_shape = out_shape.clone();
        Ok(Tensor::from_op(
            "permute",
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_, T>| vec![Some(permute_data(ctx.grad, &grad_shape, &inverse))]),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor<T>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(invalid("transpose", "needs at least two axes"));
        }
        let mut dims: Vec<usize> = (0..rank).collect();
        dims.swap(rank - 2, rank - 1);
        self.permute(&dims)
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(invalid("narrow", format!("axis {axis} range {start}+{len} on {shape:?}")));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let dim = shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let d = self.data();
            for o in 0..outer {
                let base = (o * dim + start) * inner;
                out.extend_from_slice(&d[base..base + len * inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        Ok(Tensor::from_op(
            "narrow",
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let mut g = vec![T::zero(); outer * dim * inner];
                for o in 0..outer {
                    let base = (o * dim + start) * inner;
                    g[base..base + len * inner].copy_from_slice(&ctx.grad[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Joins tensors along `axis`; all other axes must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let shape = first.shape().to_vec();
        if axis >= shape.len() {
            return Err(invalid("concat", format!("axis {axis} on {shape:?}")));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.len() != shape.len() || s.iter().zip(&shape).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(mismatch("concat", &shape, s));
            }
            sizes.push(s[axis]);
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        let guards: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for o in 0..outer {
            for (g, &sz) in guards.iter().zip(&sizes) {
                out.extend_from_slice(&g[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        drop(guards);
        let mut out_shape = shape;
        out_shape[axis] = total;
        Ok(Tensor::from_op(
            "concat",
            out_shape,
            out,
            parts.to_vec(),
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let mut grads: Vec<Vec<T>> = sizes.iter().map(|&sz| Vec::with_capacity(outer * sz * inner)).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (g, &sz) in grads.iter_mut().zip(&sizes) {
                        g.extend_from_slice(&ctx.grad[pos..pos + sz * inner]);
                        pos += sz * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }

    /// Rows of `table` (`vocab x dim`) selected by `ids`, shape `(ids.len(), dim)`.
    pub fn embedding(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
        let &[vocab, dim] = table.shape() else {
            return Err(invalid("embedding", format!("table must be 2-D, got {:?}", table.shape())));
        };
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::TargetOutOfRange { target: bad, classes: vocab });
        }
        let mut out = Vec::with_capacity(ids.len() * dim);
        {
            let d = table.data();
            for &i in ids {
                out.extend_from_slice(&d[i * dim..(i + 1) * dim]);
            }
        }
        let ids = ids.to_vec();
        Ok(Tensor::from_op(
            "embedding",
            vec![ids.len(), dim],
            out,
            vec![table.clone()],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let mut g = vec![T::zero(); vocab * dim];
                for (row, &i) in ids.iter().enumerate() {
                    let src = &ctx.grad[row * dim..(row + 1) * dim];
                    g[i * dim..(i + 1) * dim].iter_mut().zip(src).for_each(|(a, b)| *a += *b);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Normalizes over the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let dim = *self.shape().last().ok_or_else(|| invalid("layer_norm", "scalar input"))?;
        if gamma.shape() != [dim] || beta.shape() != [dim] {
            return Err(mismatch("layer_norm", self.shape(), gamma.shape()));
        }
        let rows = self.numel().checked_div(dim).unwrap_or(0);
        let mut xhat = vec![T::zero(); self.numel()];
        let mut rstd = vec![0.0f64; rows];
        let mut out = vec![T::zero(); self.numel()];
        {
            let x = self.data();
            let gm = gamma.data();
            let bt = beta.data();
            for r in 0..rows {
                let row = &x[r * dim..(r + 1) * dim];
                let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / dim as f64;
                let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / dim as f64;
                let rs = 1.0 / (var + eps).sqrt();
                rstd[r] = rs;
                for c in 0..dim {
                    let h = T::from_f64((row[c].as_f64() - mean) * rs);
                    xhat[r * dim + c] = h;
                    out[r * dim + c] = h * gm[c] + bt[c];
                }
            }
        }
        Ok(Tensor::from_op(
            "layer_norm",
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let g = ctx.grad;
                let (px, pg, pb) = (&ctx.parents[0], &ctx.parents[1], &ctx.parents[2]);
                let gx = px.requires_grad().then(|| {
                    let gm = pg.data();
                    let mut gx = vec![T::zero(); g.len()];
                    for r in 0..rows {
                        let (mut s1, mut s2) = (0.0f64, 0.0f64);
                        for c in 0..dim {
                            let gh = (g[r * dim + c] * gm[c]).as_f64();
                            s1 += gh;
                            s2 += gh * xhat[r * dim + c].as_f64();
                        }
                        let (m1, m2) = (s1 / dim as f64, s2 / dim as f64);
                        for c in 0..dim {
                            let gh = (g[r * dim + c] * gm[c]).as_f64();
                            let v = rstd[r] * (gh - m1 - xhat[r * dim + c].as_f64() * m2);
                            gx[r * dim + c] = T::from_f64(v);
                        }
                    }
                    gx
                });
                let gg = pg.requires_grad().then(|| {
                    let mut acc = vec![0.0f64; dim];
                    for (grow, hrow) in g.chunks_exact(dim).zip(xhat.chunks_exact(dim)) {
                        for ((a, gv), h) in acc.iter_mut().zip(grow).zip(hrow) {
                            *a += (*gv * *h).as_f64();
                        }
                    }
                    acc.into_iter().map(T::from_f64).collect()
                });
                let gb = pb.requires_grad().then(|| reduce_rows(g, dim));
                vec![gx, gg, gb]
            }),
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor<T> {
        let out = self
            .data()
            .iter()
            .map(|&x| {
                let x = x.as_f64();
                T::from_f64(0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            })
            .collect();
        Tensor::from_op(
            "gelu",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(|ctx: &BackwardCtx<'_, T>| {
                let x = ctx.parents[0].data();
                let g = x
                    .iter()
                    .zip(ctx.grad)
                    .map(|(&x, &g)| {
                        let x = x.as_f64();
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        g * T::from_f64(d)
                    })
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&self) -> Result<Tensor<T>> {
        let dim = *self.shape().last().ok_or_else(|| invalid("softmax_rows", "scalar input"))?;
        let mut out = vec![T::zero(); self.numel()];
        if dim > 0 {
            let x = self.data();
            for (row, o) in x.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
                let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
                let mut sum = 0.0f64;
                for (oi, v) in o.iter_mut().zip(row) {
                    let e = (v.as_f64() - max).exp();
                    sum += e;
                    *oi = T::from_f64(e);
                }
                let inv = 1.0 / sum;
                o.iter_mut().for_each(|v| *v = T::from_f64(v.as_f64() * inv));
            }
        }
        Ok(Tensor::from_op(
            "softmax_rows",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let mut g = vec![T::zero(); ctx.grad.len()];
                for ((grow, yrow), o) in ctx.grad.chunks_exact(dim).zip(ctx.out.chunks_exact(dim)).zip(g.chunks_exact_mut(dim)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| (*g * *y).as_f64()).sum();
                    for ((oi, gv), y) in o.iter_mut().zip(grow).zip(yrow) {
                        *oi = T::from_f64(y.as_f64() * (gv.as_f64() - dot));
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Sets entries above the diagonal of the trailing two axes to -inf, so a
    /// following softmax lets row `t` see only columns `<= t`.
    pub fn causal_mask(&self) -> Result<Tensor<T>> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(invalid("causal_mask", "needs at least two axes"));
        }
        let (rows, cols) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let mut out = self.to_vec();
        let block = rows * cols;
        if block > 0 {
            for b in out.chunks_exact_mut(block) {
                for r in 0..rows {
                    for c in (r + 1)..cols {
                        b[r * cols + c] = T::neg_infinity();
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            "causal_mask",
            shape.to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let mut g = ctx.grad.to_vec();
                if block > 0 {
                    for b in g.chunks_exact_mut(block) {
                        for r in 0..rows {
                            for c in (r + 1)..cols {
                                b[r * cols + c] = T::zero();
                            }
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    pub fn sum(&self) -> Tensor<T> {
        let total: f64 = self.data().iter().map(|v| v.as_f64()).sum();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            vec![],
            vec![T::from_f64(total)],
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_, T>| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Mean negative log-likelihood (nats) of `targets` under row-wise
    /// softmax of `self` (`rows x classes`).
    pub fn cross_entropy_mean(&self, targets: &[usize]) -> Result<Tensor<T>> {
        let &[rows, classes] = self.shape() else {
            return Err(invalid("cross_entropy_mean", format!("logits must be 2-D, got {:?}", self.shape())));
        };
        if rows != targets.len() {
            return Err(mismatch("cross_entropy_mean", self.shape(), &[targets.len()]));
        }
        if rows == 0 {
            return Err(invalid("cross_entropy_mean", "no rows"));
        }
        let losses = cross_entropy_rows(&self.data(), classes, targets)?;
        let mean = losses.iter().sum::<f64>() / rows as f64;
        let targets = targets.to_vec();
        Ok(Tensor::from_op(
            "cross_entropy_mean",
            vec![],
            vec![T::from_f64(mean)],
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                let scale = ctx.grad[0].as_f64() / rows as f64;
                let z = ctx.parents[0].data();
                let mut g = vec![T::zero(); z.len()];
                for ((row, o), &t) in z.chunks_exact(classes).zip(g.chunks_exact_mut(classes)).zip(&targets) {
                    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
                    let sum: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
                    for (oi, v) in o.iter_mut().zip(row) {
                        *oi = T::from_f64((v.as_f64() - max).exp() / sum * scale);
                    }
                    o[t] = T::from_f64(o[t].as_f64() - scale);
                }
                vec![Some(g)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let x = Tensor::<f32>::new(&[1, 2], vec![0.0, 0.0]).unwrap();
        assert_eq!(x.softmax_rows().unwrap().to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn uniform_logits_give_ln_v() {
        for v in [2usize, 256, 50257] {
            let logits = Tensor::<f64>::new(&[3, v], vec![0.25; 3 * v]).unwrap();
            let loss = logits.cross_entropy_mean(&[0, 1, v - 1]).unwrap().item();
            assert_relative_eq!(loss, (v as f64).ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let logits = Tensor::<f32>::new(&[1, 3], vec![0.0; 3]).unwrap();
        assert!(matches!(
            logits.cross_entropy_mean(&[3]),
            Err(TensorError::TargetOutOfRange { target: 3, classes: 3 })
        ));
    }

    #[test]
    fn matmul_values() {
        let a = Tensor::<f64>::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::<f64>::new(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![58.0, 64.0, 139.0, 154.0]);
        let bt = b.transpose().unwrap();
        assert_eq!(a.matmul_nt(&bt).unwrap().to_vec(), vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 2]);
        assert!(matches!(a.matmul(&b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::<f32>::new(&[2, 3, 4], (0..24).map(|v| v as f32).collect()).unwrap();
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        // element (c, a, b) of p equals x[a][b][c]
        assert_eq!(p.data()[(3 * 2 + 1) * 3 + 2], x.data()[(3 + 2) * 4 + 3]);
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn causal_mask_then_softmax() {
        let x = Tensor::<f64>::new(&[2, 2], vec![1.0, 5.0, 1.0, 1.0]).unwrap();
        let p = x.causal_mask().unwrap().softmax_rows().unwrap().to_vec();
        assert_eq!(p[0], 1.0);
        assert_eq!(p[1], 0.0);
        assert_relative_eq!(p[2], 0.5);
    }

    #[test]
    fn narrow_and_concat_invert() {
        let x = Tensor::<f32>::new(&[2, 5], (0..10).map(|v| v as f32).collect()).unwrap();
        let a = x.narrow(1, 0, 2).unwrap();
        let b = x.narrow(1, 2, 3).unwrap();
        assert_eq!(Tensor::concat(&[a, b], 1).unwrap().to_vec(), x.to_vec());
    }
}
