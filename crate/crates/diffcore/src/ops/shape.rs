//! Reshaping, axis reordering, slicing, concatenation and reductions.

use crate::error::{invalid, mismatch, Result};
use crate::graph::{Graph, Op, Var};
use crate::scalar::Scalar;
use crate::tensor::{check_perm, Tensor};

impl<T: Scalar> Graph<T> {
    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(dims.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(perm)?;
        Ok(self.push(value, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rank();
        if r < 2 {
            return Err(invalid("transpose", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(x, &perm)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).narrow(axis, start, len)?;
        Ok(self.push(value, Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = self.value(*first).dims().to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for &v in xs {
            let d = self.value(v).dims();
            let compatible = d.len() == base.len()
                && d.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &base, d));
            }
            total += d[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.dims()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut dims = base;
        dims[axis] = total;
        let value = Tensor::from_parts(dims, data);
        Ok(self.push(value, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    /// Sum over one axis; `keepdim` leaves a size-1 axis in place.
    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let t = self.value(x);
        let dims = t.dims();
        if axis >= dims.len() {
            return Err(invalid("sum_axis", format!("axis {axis} for dims {dims:?}")));
        }
        let outer: usize = dims[..axis].iter().product();
        let n = dims[axis];
        let inner: usize = dims[axis + 1..].iter().product();
        let mut data = vec![T::zero(); outer * inner];
        let src = t.data();
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += *v;
                }
            }
        }
        let mut out_dims = dims.to_vec();
        if keepdim {
            out_dims[axis] = 1;
        } else {
            out_dims.remove(axis);
        }
        let value = Tensor::from_parts(out_dims, data);
        Ok(self.push(value, Op::SumAxis { x, axis }, &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let n = *self
            .value(x)
            .dims()
            .get(axis)
            .ok_or_else(|| invalid("mean_axis", format!("axis {axis}")))?;
        let s = self.sum_axis(x, axis, keepdim)?;
        Ok(self.mul_scalar(s, T::one() / T::lit(n as f64)))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.mul_scalar(s, T::one() / T::lit(n as f64))
    }
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    debug_assert!(check_perm(perm, perm.len()).is_ok());
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) fn sum_axis_backward<T: Scalar>(in_dims: &[usize], axis: usize, g: &Tensor<T>) -> Tensor<T> {
    let outer: usize = in_dims[..axis].iter().product();
    let n = in_dims[axis];
    let inner: usize = in_dims[axis + 1..].iter().product();
    let src = g.data();
    let mut data = Vec::with_capacity(outer * n * inner);
    for o in 0..outer {
        for _ in 0..n {
            data.extend_from_slice(&src[o * inner..(o + 1) * inner]);
        }
    }
    Tensor::from_parts(in_dims.to_vec(), data)
}

pub(crate) fn narrow_backward<T: Scalar>(in_dims: &[usize], axis: usize, start: usize, g: &Tensor<T>) -> Tensor<T> {
    let outer: usize = in_dims[..axis].iter().product();
    let full = in_dims[axis];
    let len = g.dims()[axis];
    let inner: usize = in_dims[axis + 1..].iter().product();
    let mut data = vec![T::zero(); outer * full * inner];
    for o in 0..outer {
        let dst = (o * full + start) * inner;
        data[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::from_parts(in_dims.to_vec(), data)
}

pub(crate) fn concat_backward<'a, T: Scalar>(
    xs: &[Var],
    dims_of: impl Fn(Var) -> &'a [usize],
    axis: usize,
    g: &Tensor<T>,
) -> Result<Vec<(Var, Tensor<T>)>> {
    let mut start = 0;
    let mut out = Vec::with_capacity(xs.len());
    for &v in xs {
        let len = dims_of(v)[axis];
        out.push((v, g.narrow(axis, start, len)?));
        start += len;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_narrow_round_trips() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 2, 3]));
        let b = g.constant(Tensor::ones([2, 2, 3]));
        let c = g.concat(&[a, b], 2).unwrap();
        assert_eq!(g.dims(c), &[2, 2, 6]);
        assert_eq!(&g.value(c).data()[..6], &[0., 0., 0., 1., 1., 1.]);
        let back = g.narrow(c, 2, 3, 3).unwrap();
        assert_eq!(g.value(back), g.value(b));
    }

    #[test]
    fn sum_axis_keepdim() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn([2, 3], |i| (i[0] * 3 + i[1]) as f64));
        let s = g.sum_axis(x, 1, true).unwrap();
        assert_eq!(g.dims(s), &[2, 1]);
        assert_eq!(g.value(s).data(), &[3., 12.]);
        let s0 = g.sum_axis(x, 0, false).unwrap();
        assert_eq!(g.value(s0).data(), &[3., 5., 7.]);
        let tot = g.sum_all(s0);
        let grads = g.backward(tot).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.; 6]);
    }

    #[test]
    fn permute_gradient_is_inverse() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn([2, 3, 4], |i| (i[0] * 12 + i[1] * 4 + i[2]) as f64));
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        let w = g.constant(Tensor::from_fn([4, 2, 3], |i| (i[0] * 6 + i[1] * 3 + i[2]) as f64));
        let m = g.mul(p, w).unwrap();
        let s = g.sum_all(m);
        let grads = g.backward(s).unwrap();
        let gx = grads.get(x).unwrap();
        // gradient at x[a,b,c] is w[c,a,b]
        assert_eq!(gx.get(&[1, 2, 3]), (3 * 6 + 3 + 2) as f64);
    }
}
