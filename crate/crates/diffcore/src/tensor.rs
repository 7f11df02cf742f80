//! Dense row-major tensors and the index arithmetic shared by all operations.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, mismatch, DiffError, Result};
use crate::scalar::Scalar;

/// Dense N-dimensional array stored row-major.
///
/// Rank-0 tensors (empty `dims`) hold exactly one element. Storage is shared
/// between clones and reshapes and copied on first mutation.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let dims = dims.into();
        if dims.contains(&0) {
            return Err(invalid("tensor", format!("zero-sized dimension in {dims:?}")));
        }
        if numel(&dims) != data.len() {
            return Err(DiffError::DataLength {
                dims,
                len: data.len(),
            });
        }
        Ok(Tensor { dims, data: Arc::new(data) })
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: T) -> Self {
        let dims = dims.into();
        assert!(!dims.contains(&0), "zero-sized dimension in {dims:?}");
        let n = numel(&dims);
        Tensor {
            dims,
            data: Arc::new(vec![value; n]),
        }
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: impl Into<Vec<usize>>) -> Self {
        Self::full(dims, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            dims: Vec::new(),
            data: Arc::new(vec![value]),
        }
    }

    pub fn from_fn(dims: impl Into<Vec<usize>>, mut f: impl FnMut(&[usize]) -> T) -> Self {
        let dims = dims.into();
        let n = numel(&dims);
        let mut idx = vec![0usize; dims.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            increment(&mut idx, &dims);
        }
        Tensor { dims, data: Arc::new(data) }
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(dims: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let dims = dims.into();
        let n = numel(&dims);
        let data = (0..n)
            .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal) * std))
            .collect();
        Tensor { dims, data: Arc::new(data) }
    }

    /// Uniform entries in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(dims: impl Into<Vec<usize>>, bound: f64, rng: &mut R) -> Self {
        let dims = dims.into();
        let n = numel(&dims);
        let data = (0..n)
            .map(|_| T::lit(rng.gen_range(-bound..bound)))
            .collect();
        Tensor { dims, data: Arc::new(data) }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor with dims {:?}", self.dims);
        self.data[0]
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[offset(&self.dims, index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = offset(&self.dims, index);
        Arc::make_mut(&mut self.data)[o] = value;
    }

    pub fn reshape(&self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if numel(&dims) != self.numel() {
            return Err(mismatch("reshape", &self.dims, &dims));
        }
        Ok(Tensor { dims, data: Arc::clone(&self.data) })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: Arc::new(self.data.iter().map(|x| U::lit(x.as_f64())).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        check_perm(perm, self.rank())?;
        let out_dims: Vec<usize> = perm.iter().map(|&p| self.dims[p]).collect();
        let in_strides = strides(&self.dims);
        let walk: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let data = gather_strided(&self.data, &out_dims, &walk);
        Ok(Tensor {
            dims: out_dims,
            data: Arc::new(data),
        })
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || len == 0 || start + len > self.dims[axis] {
            return Err(invalid(
                "narrow",
                format!("range {start}+{len} on axis {axis} of {:?}", self.dims),
            ));
        }
        let outer: usize = self.dims[..axis].iter().product();
        let inner: usize = self.dims[axis + 1..].iter().product();
        let full = self.dims[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut dims = self.dims.clone();
        dims[axis] = len;
        Ok(Tensor { dims, data: Arc::new(data) })
    }
}

pub fn numel(dims: &[usize]) -> usize {
    dims.iter().product()
}

pub fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

fn offset(dims: &[usize], index: &[usize]) -> usize {
    assert_eq!(dims.len(), index.len(), "index rank");
    let mut o = 0;
    for (d, (&i, &n)) in index.iter().zip(dims).enumerate() {
        assert!(i < n, "index {i} out of range for axis {d} of size {n}");
        o = o * n + i;
    }
    o
}

fn increment(idx: &mut [usize], dims: &[usize]) {
    for d in (0..dims.len()).rev() {
        idx[d] += 1;
        if idx[d] < dims[d] {
            return;
        }
        idx[d] = 0;
    }
}

pub(crate) fn check_perm(perm: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(invalid("permute", format!("{perm:?} for rank {rank}")));
    }
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(invalid("permute", format!("{perm:?} is not a permutation")));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Storage offsets visited when walking `dims` in row-major order with the
/// given per-axis `strides` (stride 0 repeats an element, i.e. broadcasting).
pub(crate) fn strided_offsets(dims: &[usize], strides: &[usize]) -> Vec<usize> {
    let n = numel(dims);
    let mut out = Vec::with_capacity(n);
    if dims.is_empty() {
        out.push(0);
        return out;
    }
    let last = dims.len() - 1;
    let inner = dims[last];
    let inner_stride = strides[last];
    let mut idx = vec![0usize; last];
    let mut base = 0usize;
    loop {
        let mut o = base;
        for _ in 0..inner {
            out.push(o);
            o += inner_stride;
        }
        // advance outer odometer
        let mut d = last;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            base += strides[d];
            if idx[d] < dims[d] {
                break;
            }
            base -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

/// Row-major walk of `dims` over `src` with per-axis `strides`, copying
/// whole runs when the innermost axes are contiguous in `src`.
pub(crate) fn gather_strided<T: Copy>(src: &[T], dims: &[usize], strides: &[usize]) -> Vec<T> {
    // merge axes that are adjacent in memory
    let mut md: Vec<usize> = Vec::with_capacity(dims.len());
    let mut ms: Vec<usize> = Vec::with_capacity(dims.len());
    for (&d, &s) in dims.iter().zip(strides) {
        if d == 1 {
            continue;
        }
        match (md.last_mut(), ms.last_mut()) {
            (Some(pd), Some(ps)) if *ps == s * d => {
                *pd *= d;
                *ps = s;
            }
            _ => {
                md.push(d);
                ms.push(s);
            }
        }
    }
    let n = numel(dims);
    if md.is_empty() {
        return vec![src[0]; n];
    }
    let last = md.len() - 1;
    let (inner, inner_stride) = (md[last], ms[last]);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; last];
    let mut base = 0usize;
    loop {
        if inner_stride == 1 {
            out.extend_from_slice(&src[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| src[base + j * inner_stride]));
        }
        let mut d = last;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            base += ms[d];
            if idx[d] < md[d] {
                break;
            }
            base -= ms[d] * idx[d];
            idx[d] = 0;
        }
    }
}

/// Trailing-aligned broadcast of two shapes.
pub fn broadcast_dims(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides that read a tensor of `dims` as if it had `out_dims` (broadcast).
pub(crate) fn broadcast_strides(dims: &[usize], out_dims: &[usize]) -> Vec<usize> {
    let own = strides(dims);
    let pad = out_dims.len() - dims.len();
    (0..out_dims.len())
        .map(|i| {
            if i < pad || dims[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

impl<T> Tensor<T> {
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&dims), data.len());
        Tensor { dims, data: Arc::new(data) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_transposes() {
        let t = Tensor::<f64>::new([2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let p = t.permute(&[1, 0]).unwrap();
        assert_eq!(p.dims(), &[3, 2]);
        assert_eq!(p.data(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_dims(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_dims(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_dims(&[2, 3], &[2]), None);
        assert_eq!(broadcast_dims(&[], &[5]), Some(vec![5]));
    }

    #[test]
    fn narrow_middle_axis() {
        let t = Tensor::<f64>::from_fn([2, 4, 2], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64);
        let n = t.narrow(1, 1, 2).unwrap();
        assert_eq!(n.dims(), &[2, 2, 2]);
        assert_eq!(n.data(), &[10., 11., 20., 21., 110., 111., 120., 121.]);
    }

    #[test]
    fn rejects_bad_lengths() {
        assert!(Tensor::<f32>::new([2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new([0, 2], vec![]).is_err());
    }
}
