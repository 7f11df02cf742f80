//! Batched matrix products.

use crate::error::{invalid, mismatch, Result};
use crate::graph::{Graph, Op, Var};
use crate::scalar::{gemm, Scalar};
use crate::tensor::{broadcast_dims, broadcast_strides, numel, strided_offsets, Tensor};

/// Leading-dimension layout of a batched product.
struct BatchPlan {
    out_batch: Vec<usize>,
    a_off: Vec<usize>,
    b_off: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
}

fn plan(a: &[usize], b: &[usize]) -> Result<BatchPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(invalid("matmul", format!("operands must be at least rank 2: {a:?} x {b:?}")));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(mismatch("matmul", a, b));
    }
    let ba = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let out_batch = broadcast_dims(ba, bb).ok_or_else(|| mismatch("matmul", a, b))?;
    let a_off = strided_offsets(&out_batch, &broadcast_strides(ba, &out_batch));
    let b_off = strided_offsets(&out_batch, &broadcast_strides(bb, &out_batch));
    Ok(BatchPlan {
        out_batch,
        a_off,
        b_off,
        m,
        k,
        n,
    })
}

impl<T: Scalar> Graph<T> {
    /// `[.., m, k] × [.., k, n] → [.., m, n]` with broadcast leading dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let p = plan(ta.dims(), tb.dims())?;
        let mut out_dims = p.out_batch.clone();
        out_dims.extend([p.m, p.n]);
        let mut data = vec![T::zero(); numel(&out_dims)];
        if tb.rank() == 2 {
            // fold every leading axis of `a` into the row count
            let rows = ta.numel() / p.k;
            if ta.dims()[..ta.rank() - 2] == p.out_batch[..] {
                gemm(rows, p.k, p.n, ta.data(), false, tb.data(), false, &mut data, false);
                let value = Tensor::from_parts(out_dims, data);
                return Ok(self.push(value, Op::Matmul(a, b), &[a, b]));
            }
        }
        let (mk, kn, mn) = (p.m * p.k, p.k * p.n, p.m * p.n);
        for (i, (&oa, &ob)) in p.a_off.iter().zip(&p.b_off).enumerate() {
            gemm(
                p.m,
                p.k,
                p.n,
                &ta.data()[oa * mk..(oa + 1) * mk],
                false,
                &tb.data()[ob * kn..(ob + 1) * kn],
                false,
                &mut data[i * mn..(i + 1) * mn],
                false,
            );
        }
        let value = Tensor::from_parts(out_dims, data);
        Ok(self.push(value, Op::Matmul(a, b), &[a, b]))
    }

    /// Per-location affine map over the last axis: `x[.., k] · w[k, n] + b[n]`.
    /// Equivalent to a 1×1 convolution on channel-last data.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tw.rank() != 2 || tx.rank() == 0 || tx.dims()[tx.rank() - 1] != tw.dims()[0] {
            return Err(mismatch("linear", tx.dims(), tw.dims()));
        }
        let (k, n) = (tw.dims()[0], tw.dims()[1]);
        let rows = tx.numel() / k;
        let mut data = vec![T::zero(); rows * n];
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.dims() != [n] {
                return Err(mismatch("linear bias", &[n], tb.dims()));
            }
            for row in data.chunks_mut(n) {
                row.copy_from_slice(tb.data());
            }
        }
        gemm(rows, k, n, tx.data(), false, tw.data(), false, &mut data, b.is_some());
        let mut out_dims = tx.dims().to_vec();
        *out_dims.last_mut().expect("rank >= 1") = n;
        let value = Tensor::from_parts(out_dims, data);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }
}

pub(crate) fn matmul_backward<T: Scalar>(
    a: Var,
    ta: &Tensor<T>,
    b: Var,
    tb: &Tensor<T>,
    g: &Tensor<T>,
) -> Vec<(Var, Tensor<T>)> {
    let p = plan(ta.dims(), tb.dims()).expect("validated in forward");
    let mut ga = vec![T::zero(); ta.numel()];
    let mut gb = vec![T::zero(); tb.numel()];
    if tb.rank() == 2 && ta.dims()[..ta.rank() - 2] == p.out_batch[..] {
        let rows = ta.numel() / p.k;
        gemm(rows, p.n, p.k, g.data(), false, tb.data(), true, &mut ga, false);
        gemm(p.k, rows, p.n, ta.data(), true, g.data(), false, &mut gb, false);
    } else {
        let (mk, kn, mn) = (p.m * p.k, p.k * p.n, p.m * p.n);
        for (i, (&oa, &ob)) in p.a_off.iter().zip(&p.b_off).enumerate() {
            let gi = &g.data()[i * mn..(i + 1) * mn];
            gemm(p.m, p.n, p.k, gi, false, &tb.data()[ob * kn..(ob + 1) * kn], true, &mut ga[oa * mk..(oa + 1) * mk], true);
            gemm(p.k, p.m, p.n, &ta.data()[oa * mk..(oa + 1) * mk], true, gi, false, &mut gb[ob * kn..(ob + 1) * kn], true);
        }
    }
    vec![
        (a, Tensor::from_parts(ta.dims().to_vec(), ga)),
        (b, Tensor::from_parts(tb.dims().to_vec(), gb)),
    ]
}

pub(crate) fn linear_backward<T: Scalar>(
    x: Var,
    tx: &Tensor<T>,
    w: Var,
    tw: &Tensor<T>,
    b: Option<Var>,
    g: &Tensor<T>,
) -> Vec<(Var, Tensor<T>)> {
    let (k, n) = (tw.dims()[0], tw.dims()[1]);
    let rows = tx.numel() / k;
    let mut gx = vec![T::zero(); tx.numel()];
    let mut gw = vec![T::zero(); tw.numel()];
    gemm(rows, n, k, g.data(), false, tw.data(), true, &mut gx, false);
    gemm(k, rows, n, tx.data(), true, g.data(), false, &mut gw, false);
    let mut out = vec![
        (x, Tensor::from_parts(tx.dims().to_vec(), gx)),
        (w, Tensor::from_parts(tw.dims().to_vec(), gw)),
    ];
    if let Some(b) = b {
        let mut gb = vec![T::zero(); n];
        for row in g.data().chunks(n) {
            for (acc, v) in gb.iter_mut().zip(row) {
                *acc += *v;
            }
        }
        out.push((b, Tensor::from_parts(vec![n], gb)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_times_a() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::new([2, 2], vec![1., 0., 0., 1.]).unwrap());
        let a = g.constant(Tensor::new([2, 2], vec![3., -1., 2., 5.]).unwrap());
        let c = g.matmul(i, a).unwrap();
        assert_eq!(g.value(c), g.value(a));
    }

    #[test]
    fn row_times_column() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::new([1, 2], vec![1., 2.]).unwrap());
        let b = g.constant(Tensor::new([2, 1], vec![3., 4.]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.]);
    }

    #[test]
    fn batched_broadcast_matches_loops() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_fn([3, 2, 4], |i| (i[0] + 2 * i[1] + 3 * i[2]) as f64 * 0.1));
        let b = g.constant(Tensor::from_fn([1, 4, 5], |i| (i[1] as f64 - i[2] as f64) * 0.2));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.dims(c), &[3, 2, 5]);
        let (ta, tb, tc) = (g.value(a), g.value(b), g.value(c));
        for bi in 0..3 {
            for r in 0..2 {
                for col in 0..5 {
                    let want: f64 = (0..4).map(|k| ta.get(&[bi, r, k]) * tb.get(&[0, k, col])).sum();
                    assert!((tc.get(&[bi, r, col]) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn inner_dim_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        assert!(g.matmul(a, b).is_err());
    }

    #[test]
    fn linear_adds_bias() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([2, 2, 3]));
        let w = g.constant(Tensor::ones([3, 2]));
        let b = g.constant(Tensor::new([2], vec![0.5, -1.0]).unwrap());
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.dims(y), &[2, 2, 2]);
        assert_eq!(&g.value(y).data()[..2], &[0.5, -1.0]);
    }
}
