use super::{any_tracked, counter, gemm, numel_of, record, Element, MatMut, MatRef, Tensor};
use crate::error::{Error, Result};

#[inline]
fn sigmoid_scalar<T: Element>(x: T) -> T {
    // Branch on sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Element> Tensor<T> {
    fn same_shape(&self, other: &Tensor<T>, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                "operand shape",
                format!("{:?}", self.shape),
                format!("{:?}", other.shape),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_shape(other, "add")?;
        let data = self.data.iter().zip(other.data.iter()).map(|(a, b)| *a + *b).collect();
        record("add", &[self, other], self.shape.clone(), data, |g| {
            vec![Some(g.to_vec()), Some(g.to_vec())]
        })
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_shape(other, "sub")?;
        let data = self.data.iter().zip(other.data.iter()).map(|(a, b)| *a - *b).collect();
        record("sub", &[self, other], self.shape.clone(), data, |g| {
            vec![Some(g.to_vec()), Some(g.iter().map(|v| -*v).collect())]
        })
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.same_shape(other, "mul")?;
        let data = self.data.iter().zip(other.data.iter()).map(|(a, b)| *a * *b).collect();
        let (a, b) = (self.data_arc(), other.data_arc());
        record("mul", &[self, other], self.shape.clone(), data, move |g| {
            vec![
                Some(g.iter().zip(b.iter()).map(|(g, b)| *g * *b).collect()),
                Some(g.iter().zip(a.iter()).map(|(g, a)| *g * *a).collect()),
            ]
        })
    }

    pub fn mul_scalar(&self, s: T) -> Result<Tensor<T>> {
        let data = self.data.iter().map(|v| *v * s).collect();
        record("mul_scalar", &[self], self.shape.clone(), data, move |g| {
            vec![Some(g.iter().map(|v| *v * s).collect())]
        })
    }

    pub fn add_scalar(&self, s: T) -> Result<Tensor<T>> {
        let data = self.data.iter().map(|v| *v + s).collect();
        record("add_scalar", &[self], self.shape.clone(), data, |g| vec![Some(g.to_vec())])
    }

    /// `max(x, floor)` elementwise; gradient passes where `x > floor`.
    pub fn clamp_min(&self, floor: T) -> Result<Tensor<T>> {
        let data = self.data.iter().map(|v| v.max(floor)).collect();
        let x = self.data_arc();
        record("clamp_min", &[self], self.shape.clone(), data, move |g| {
            vec![Some(
                g.iter()
                    .zip(x.iter())
                    .map(|(g, x)| if *x > floor { *g } else { T::zero() })
                    .collect(),
            )]
        })
    }

    pub fn sigmoid(&self) -> Result<Tensor<T>> {
        let y: Vec<T> = self.data.iter().map(|&v| sigmoid_scalar(v)).collect();
        let saved = if self.requires_grad() { y.clone() } else { Vec::new() };
        record("sigmoid", &[self], self.shape.clone(), y, move |g| {
            vec![Some(
                g.iter()
                    .zip(&saved)
                    .map(|(g, s)| *g * *s * (T::one() - *s))
                    .collect(),
            )]
        })
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Result<Tensor<T>> {
        let y = self.data.iter().map(|&v| v * sigmoid_scalar(v)).collect();
        let x = self.data_arc();
        record("silu", &[self], self.shape.clone(), y, move |g| {
            vec![Some(
                g.iter()
                    .zip(x.iter())
                    .map(|(g, &x)| {
                        let s = sigmoid_scalar(x);
                        *g * s * (T::one() + x * (T::one() - s))
                    })
                    .collect(),
            )]
        })
    }

    /// Sum of all elements, pairwise in a fixed order.
    pub fn sum(&self) -> Result<Tensor<T>> {
        let total = pairwise_sum(&self.data);
        let n = self.numel();
        record("sum", &[self], vec![], vec![total], move |g| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Result<Tensor<T>> {
        if self.numel() == 0 {
            return Err(Error::Usage("mean of an empty tensor".into()));
        }
        let n = self.numel();
        self.sum()?.mul_scalar(T::one() / T::lit(n as f64))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel_of(shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                "element count",
                self.numel(),
                numel_of(shape),
            ));
        }
        record("reshape", &[self], shape.to_vec(), self.to_vec(), |g| vec![Some(g.to_vec())])
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Config(format!(
                "permute: {perm:?} is not a permutation of {rank} axes"
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let data = permute_data(&self.data, &self.shape, perm);
        let in_shape = self.shape.clone();
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let out_shape_c = out_shape.clone();
        record("permute", &[self], out_shape, data, move |g| {
            let back = permute_data(g, &out_shape_c, &inverse);
            debug_assert_eq!(back.len(), numel_of(&in_shape));
            vec![Some(back)]
        })
    }

    /// Swap two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<T>> {
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        if a >= perm.len() || b >= perm.len() {
            return Err(Error::Config(format!("transpose: axis out of range for rank {}", self.rank())));
        }
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::Config(format!("narrow: axis {axis} out of range")));
        }
        let extent = self.shape[axis];
        if start + len > extent {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis}"),
                format!("<= {extent}"),
                start + len,
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        let total = self.numel();
        record("narrow", &[self], shape, data, move |g| {
            let mut gx = vec![T::zero(); total];
            for o in 0..outer {
                let dst = (o * extent + start) * inner;
                let src = o * len * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            vec![Some(gx)]
        })
    }

    /// Split into equal chunks along `axis`.
    pub fn chunk(&self, chunks: usize, axis: usize) -> Result<Vec<Tensor<T>>> {
        let extent = *self
            .shape
            .get(axis)
            .ok_or_else(|| Error::Config(format!("chunk: axis {axis} out of range")))?;
        if chunks == 0 || extent % chunks != 0 {
            return Err(Error::Config(format!(
                "chunk: extent {extent} on axis {axis} not divisible into {chunks}"
            )));
        }
        let size = extent / chunks;
        (0..chunks).map(|i| self.narrow(axis, i * size, size)).collect()
    }

    /// Batched matrix product over the last two axes; leading axes must match.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        bmm(self, other, false)
    }

    /// Batched `self @ other^T` over the last two axes.
    pub fn matmul_t(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        bmm(self, other, true)
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        softmax(self, axis)
    }
}

pub(crate) fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    if rank == 0 {
        out.push(data[0]);
        return out;
    }
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    loop {
        let s = strides[last];
        for k in 0..out_shape[last] {
            out.push(data[src + k * s]);
        }
        // advance all but the innermost axis
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Concatenate along `axis`; every other axis must agree.
fn pairwise_sum<T: Element>(xs: &[T]) -> T {
    if xs.len() <= 32 {
        xs.iter().fold(T::zero(), |a, b| a + *b)
    } else {
        let (a, b) = xs.split_at(xs.len() / 2);
        pairwise_sum(a) + pairwise_sum(b)
    }
}

pub fn concat<T: Element>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Usage("concat of an empty list".into()))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::Config(format!("concat: axis {axis} out of range for rank {rank}")));
    }
    for t in &xs[1..] {
        if t.rank() != rank {
            return Err(Error::shape("concat", "rank", rank, t.rank()));
        }
        for d in 0..rank {
            if d != axis && t.shape[d] != first.shape[d] {
                return Err(Error::shape(
                    "concat",
                    format!("axis {d}"),
                    first.shape[d],
                    t.shape[d],
                ));
            }
        }
    }
    let outer: usize = first.shape[..axis].iter().product();
    let inner: usize = first.shape[axis + 1..].iter().product();
    let extents: Vec<usize> = xs.iter().map(|t| t.shape[axis]).collect();
    let total: usize = extents.iter().sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (t, &e) in xs.iter().zip(&extents) {
            let base = o * e * inner;
            data.extend_from_slice(&t.data[base..base + e * inner]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total;
    record("concat", xs, shape, data, move |g| {
        let mut grads: Vec<Vec<T>> = extents.iter().map(|e| Vec::with_capacity(outer * e * inner)).collect();
        let mut src = 0;
        for _ in 0..outer {
            for (gx, &e) in grads.iter_mut().zip(&extents) {
                gx.extend_from_slice(&g[src..src + e * inner]);
                src += e * inner;
            }
        }
        grads.into_iter().map(Some).collect()
    })
}

fn bmm<T: Element>(a: &Tensor<T>, b: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
    let op = if trans_b { "matmul_t" } else { "matmul" };
    if a.rank() < 2 || b.rank() < 2 {
        return Err(Error::shape(op, "rank", ">= 2", a.rank().min(b.rank())));
    }
    let (ra, rb) = (a.rank(), b.rank());
    if a.shape[..ra - 2] != b.shape[..rb - 2] {
        return Err(Error::shape(
            op,
            "batch axes",
            format!("{:?}", &a.shape[..ra - 2]),
            format!("{:?}", &b.shape[..rb - 2]),
        ));
    }
    let (m, k) = (a.shape[ra - 2], a.shape[ra - 1]);
    let (kb, n) = if trans_b {
        (b.shape[rb - 1], b.shape[rb - 2])
    } else {
        (b.shape[rb - 2], b.shape[rb - 1])
    };
    if k != kb {
        return Err(Error::shape(op, "inner dimension", k, kb));
    }
    let batch: usize = a.shape[..ra - 2].iter().product();
    let mut out = vec![T::zero(); batch * m * n];
    for bi in 0..batch {
        let am = MatRef::rm(&a.data[bi * m * k..(bi + 1) * m * k], m, k);
        let bslice = &b.data[bi * k * n..(bi + 1) * k * n];
        let bm = if trans_b { MatRef::rm_t(bslice, n, k) } else { MatRef::rm(bslice, k, n) };
        gemm(T::one(), am, bm, T::zero(), MatMut::rm(&mut out[bi * m * n..(bi + 1) * m * n], m, n));
    }
    counter::add((batch * m * k * n) as u64);
    let mut shape = a.shape[..ra - 2].to_vec();
    shape.extend([m, n]);
    let track = any_tracked(&[a, b]);
    let (ad, bd) = (a.data_arc(), b.data_arc());
    let (need_a, need_b) = (a.requires_grad(), b.requires_grad());
    record(op, &[a, b], shape, out, move |g| {
        if !track {
            return vec![None, None];
        }
        let mut ga = need_a.then(|| vec![T::zero(); batch * m * k]);
        let mut gb = need_b.then(|| vec![T::zero(); batch * k * n]);
        for bi in 0..batch {
            let gm = MatRef::rm(&g[bi * m * n..(bi + 1) * m * n], m, n);
            let bslice = &bd[bi * k * n..(bi + 1) * k * n];
            let aslice = &ad[bi * m * k..(bi + 1) * m * k];
            if let Some(ga) = ga.as_mut() {
                // dA = G * B^T   (B is k x n, or stored n x k when trans_b)
                let bt = if trans_b { MatRef::rm(bslice, n, k) } else { MatRef::rm_t(bslice, k, n) };
                gemm(T::one(), gm, bt, T::zero(), MatMut::rm(&mut ga[bi * m * k..(bi + 1) * m * k], m, k));
            }
            if let Some(gb) = gb.as_mut() {
                let at = MatRef::rm_t(aslice, m, k);
                let dst = &mut gb[bi * k * n..(bi + 1) * k * n];
                if trans_b {
                    // dB (n x k) = G^T * A
                    gemm(T::one(), gm.t(), MatRef::rm(aslice, m, k), T::zero(), MatMut::rm(dst, n, k));
                } else {
                    gemm(T::one(), at, gm, T::zero(), MatMut::rm(dst, k, n));
                }
            }
        }
        vec![ga, gb]
    })
}

/// Numerically stable softmax along `axis` (max-subtracted).
pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::Config(format!("softmax: axis {axis} out of range for rank {}", x.rank())));
    }
    let len = x.shape[axis];
    let outer: usize = x.shape[..axis].iter().product();
    let inner: usize = x.shape[axis + 1..].iter().product();
    let mut y = vec![T::zero(); x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = T::neg_infinity();
            for j in 0..len {
                mx = mx.max(x.data[base + j * inner]);
            }
            let mut denom = T::zero();
            for j in 0..len {
                let e = (x.data[base + j * inner] - mx).exp();
                y[base + j * inner] = e;
                denom += e;
            }
            for j in 0..len {
                y[base + j * inner] = y[base + j * inner] / denom;
            }
        }
    }
    let saved = if x.requires_grad() { y.clone() } else { Vec::new() };
    record("softmax", &[x], x.shape.clone(), y, move |g| {
        let mut gx = vec![T::zero(); saved.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut dot = T::zero();
                for j in 0..len {
                    dot += g[base + j * inner] * saved[base + j * inner];
                }
                for j in 0..len {
                    let p = base + j * inner;
                    gx[p] = saved[p] * (g[p] - dot);
                }
            }
        }
        vec![Some(gx)]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn silu_values_and_gradient_at_zero() {
        let x = t(&[2], &[0.0, 1.0]);
        let y = x.silu().unwrap();
        assert_eq!(y.data()[0], 0.0);
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((y.data()[1] - expected).abs() < 1e-15);
        assert!((y.data()[1] - 0.731059).abs() < 1e-6);

        let tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[0.0]));
        x.silu().unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.5]);
    }

    #[test]
    fn softmax_constant_is_uniform() {
        let x = t(&[5], &[3.0; 5]);
        let y = x.softmax(0).unwrap();
        for v in y.data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_logits_stay_finite() {
        let y = t(&[2], &[1000.0, 1001.0]).softmax(0).unwrap();
        let s = 1.0 / (1.0 + 1.0f64.exp());
        assert!((y.data()[0] - s).abs() < 1e-15);
        assert!((y.data()[1] - (1.0 - s)).abs() < 1e-15);
    }

    #[test]
    fn softmax_over_middle_axis() {
        let x = Tensor::<f64>::from_fn(vec![2, 3, 4], |i| (i as f64 * 0.37).sin()).unwrap();
        let y = x.softmax(1).unwrap();
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|j| y.at(&[o, j, i])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::<f64>::from_fn(vec![3, 3], |i| i as f64).unwrap();
        let eye = Tensor::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }).unwrap();
        assert_eq!(a.matmul(&eye).unwrap(), a);
        assert_eq!(a.matmul_t(&eye).unwrap(), a);
    }

    #[test]
    fn matmul_inner_mismatch_is_shape_error() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![4, 2]);
        assert!(matches!(a.matmul(&b), Err(Error::Shape { .. })));
    }

    #[test]
    fn reshape_count_mismatch() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        assert!(matches!(a.reshape(&[4, 2]), Err(Error::Shape { .. })));
    }

    #[test]
    fn sum_and_square_gradients() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0]));
        x.sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0, 1.0]);

        let tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0]));
        x.mul(&x).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_requires_tape_and_is_single_use() {
        let x = t(&[1], &[1.0]);
        assert!(matches!(x.sum().unwrap().backward(), Err(Error::Usage(_))));
        let tape = Tape::new();
        let x = tape.leaf(&x);
        let y = x.mul_scalar(2.0).unwrap().sum().unwrap();
        y.backward().unwrap();
        assert!(tape.is_consumed());
        assert!(matches!(y.backward(), Err(Error::Usage(_))));
    }

    #[test]
    fn concat_single_is_identity_and_slices_round_trip() {
        let a = Tensor::<f64>::from_fn(vec![1, 2, 2, 2], |i| i as f64).unwrap();
        let b = Tensor::<f64>::from_fn(vec![1, 3, 2, 2], |i| 100.0 + i as f64).unwrap();
        assert_eq!(concat(&[&a], 1).unwrap(), a);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[1, 5, 2, 2]);
        assert_eq!(c.narrow(1, 0, 2).unwrap(), a);
        assert_eq!(c.narrow(1, 2, 3).unwrap(), b);
    }

    #[test]
    fn concat_channel_widths_add() {
        let a = Tensor::<f64>::zeros(vec![1, 128, 2, 2]);
        let c = concat(&[&a, &a], 1).unwrap();
        assert_eq!(c.shape(), &[1, 256, 2, 2]);
    }

    #[test]
    fn concat_mismatch_names_axis() {
        let a = Tensor::<f64>::zeros(vec![1, 2, 4, 4]);
        let b = Tensor::<f64>::zeros(vec![1, 2, 3, 4]);
        match concat(&[&a, &b], 1) {
            Err(Error::Shape { dim, .. }) => assert_eq!(dim, "axis 2"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn permute_round_trip() {
        let a = Tensor::<f64>::from_fn(vec![2, 3, 4, 5], |i| i as f64).unwrap();
        let p = a.permute(&[2, 0, 3, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 5, 3]);
        assert_eq!(p.at(&[1, 1, 2, 0]), a.at(&[1, 0, 1, 2]));
        let back = p.permute(&[1, 3, 0, 2]).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn non_finite_is_an_error() {
        assert!(matches!(
            Tensor::<f64>::from_vec(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1, .. })
        ));
        let big = t(&[1], &[1e308]);
        assert!(matches!(big.mul_scalar(10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn mixed_tapes_rejected() {
        let a = Tape::new().leaf(&t(&[1], &[1.0]));
        let b = Tape::new().leaf(&t(&[1], &[1.0]));
        assert!(matches!(a.add(&b), Err(Error::Usage(_))));
    }
}
