//! Raw single-image attention kernels on `[n, h*d]` token matrices, used by
//! the cost model checks and the latency benchmarks. No autodiff.

use crate::error::{Error, Result};
use crate::tensor::{counter, Element, Tensor};
use crate::tensor::{gemm, MatMut, MatRef};

/// `2 n^2 h d / L`: scores plus weighted sum over `L` independent areas.
pub fn attention_cost(n: usize, h: usize, d: usize, l: usize) -> Result<u64> {
    if l == 0 || n % l != 0 {
        return Err(Error::Partition(format!("{n} tokens cannot be split into {l} equal areas")));
    }
    let m = (n / l) as u64;
    Ok(2 * m * m * (h * d) as u64 * l as u64)
}

/// Work and scratch-memory accounting for one kernel call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct KernelStats {
    pub macs: u64,
    /// Largest number of scratch elements alive at once.
    pub peak_aux: usize,
}

/// Scratch allocations routed through a live/peak counter.
#[derive(Default)]
struct Scratch {
    live: usize,
    peak: usize,
}

impl Scratch {
    fn alloc<T: Element>(&mut self, len: usize) -> Vec<T> {
        self.live += len;
        self.peak = self.peak.max(self.live);
        vec![T::zero(); len]
    }

    fn free<T>(&mut self, buf: Vec<T>) {
        self.live -= buf.len();
    }
}

fn check_qkv<T: Element>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize) -> Result<(usize, usize)> {
    let (n, c) = match q.shape() {
        &[n, c] => (n, c),
        other => return Err(Error::shape("attention kernel", "q shape", "[n, h*d]", format!("{other:?}"))),
    };
    for (name, t) in [("k", k), ("v", v)] {
        if t.shape() != q.shape() {
            return Err(Error::shape(
                "attention kernel",
                name,
                format!("{:?}", q.shape()),
                format!("{:?}", t.shape()),
            ));
        }
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("{c} channels not divisible by {heads} heads")));
    }
    Ok((n, c / heads))
}

fn head_view<T>(data: &[T], t0: usize, rows: usize, head: usize, d: usize, stride: usize) -> MatRef<'_, T> {
    MatRef {
        data: &data[t0 * stride + head * d..],
        rows,
        cols: d,
        rs: stride,
        cs: 1,
    }
}

fn softmax_rows<T: Element>(s: &mut [T], cols: usize) {
    for row in s.chunks_mut(cols) {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut z = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            z += *x;
        }
        for x in row.iter_mut() {
            *x = *x / z;
        }
    }
}

/// Materialises the full score matrix of each area and head.
fn dense<T: Element>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize, areas: usize) -> Result<(Tensor<T>, KernelStats)> {
    let (n, d) = check_qkv(q, k, v, heads)?;
    attention_cost(n, heads, d, areas)?;
    let c = heads * d;
    let m = n / areas;
    let scale = T::lit(1.0 / (d as f64).sqrt());
    let mut out = vec![T::zero(); n * c];
    let mut scratch = Scratch::default();
    let mut macs = 0u64;
    for area in 0..areas {
        let t0 = area * m;
        for h in 0..heads {
            let mut s = scratch.alloc::<T>(m * m);
            let qv = head_view(q.data(), t0, m, h, d, c);
            let kv = head_view(k.data(), t0, m, h, d, c);
            gemm(scale, qv, kv.t(), T::zero(), MatMut::rm(&mut s, m, m));
            softmax_rows(&mut s, m);
            let vv = head_view(v.data(), t0, m, h, d, c);
            let o = MatMut {
                data: &mut out[t0 * c + h * d..],
                rows: m,
                cols: d,
                rs: c,
                cs: 1,
            };
            gemm(T::one(), MatRef::rm(&s, m, m), vv, T::zero(), o);
            macs += 2 * (m * m * d) as u64;
            scratch.free(s);
        }
    }
    counter::add(macs);
    Ok((
        Tensor::from_vec(vec![n, c], out)?,
        KernelStats {
            macs,
            peak_aux: scratch.peak,
        },
    ))
}

/// Full multi-head attention with an explicit `n x n` score matrix per head.
pub fn naive_attention<T: Element>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize) -> Result<(Tensor<T>, KernelStats)> {
    dense(q, k, v, heads, 1)
}

/// Attention restricted to `areas` contiguous token runs.
pub fn area_attention_kernel<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    areas: usize,
) -> Result<(Tensor<T>, KernelStats)> {
    dense(q, k, v, heads, areas)
}

/// Single-head exact attention streaming key/value blocks with a running
/// max and normaliser; scratch is one block of scores plus one accumulator row.
pub fn tiled_attention<T: Element>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, block: usize) -> Result<(Tensor<T>, KernelStats)> {
    tiled_attention_heads(q, k, v, 1, block)
}

pub fn tiled_attention_heads<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    block: usize,
) -> Result<(Tensor<T>, KernelStats)> {
    if block == 0 {
        return Err(Error::Config("tiled attention: block must be >= 1".into()));
    }
    let (n, d) = check_qkv(q, k, v, heads)?;
    let c = heads * d;
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let scale = T::lit(1.0 / (d as f64).sqrt());
    let bs = block.min(n.max(1));
    let mut out = vec![T::zero(); n * c];
    let mut scratch = Scratch::default();
    let mut scores = scratch.alloc::<T>(bs);
    let mut acc = scratch.alloc::<T>(d);
    let mut macs = 0u64;
    for h in 0..heads {
        for i in 0..n {
            let qi = &qd[i * c + h * d..i * c + h * d + d];
            let mut run_max = T::neg_infinity();
            let mut run_sum = T::zero();
            acc.iter_mut().for_each(|a| *a = T::zero());
            for j0 in (0..n).step_by(bs) {
                let len = bs.min(n - j0);
                let mut block_max = T::neg_infinity();
                for (jj, s) in scores[..len].iter_mut().enumerate() {
                    let kj = &kd[(j0 + jj) * c + h * d..(j0 + jj) * c + h * d + d];
                    let mut dot = T::zero();
                    for (a, b) in qi.iter().zip(kj) {
                        dot += *a * *b;
                    }
                    *s = dot * scale;
                    block_max = block_max.max(*s);
                }
                let new_max = run_max.max(block_max);
                let rescale = (run_max - new_max).exp();
                run_sum *= rescale;
                acc.iter_mut().for_each(|a| *a *= rescale);
                for (jj, s) in scores[..len].iter().enumerate() {
                    let p = (*s - new_max).exp();
                    run_sum += p;
                    let vj = &vd[(j0 + jj) * c + h * d..(j0 + jj) * c + h * d + d];
                    for (a, b) in acc.iter_mut().zip(vj) {
                        *a += p * *b;
                    }
                }
                run_max = new_max;
                macs += 2 * (len * d) as u64;
            }
            let o = &mut out[i * c + h * d..i * c + h * d + d];
            for (dst, a) in o.iter_mut().zip(&acc) {
                *dst = *a / run_sum;
            }
        }
    }
    scratch.free(scores);
    scratch.free(acc);
    counter::add(macs);
    Ok((
        Tensor::from_vec(vec![n, c], out)?,
        KernelStats {
            macs,
            peak_aux: scratch.peak,
        },
    ))
}
