//! Neural-network building blocks: softmax, normalizations, convolution,
//! bilinear upsampling and cross-entropy.

use crate::error::{invalid, mismatch, DiffError, Result};
use crate::graph::{Graph, Op, Var};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Label value excluded from supervision.
pub const IGNORE_LABEL: u8 = 255;
pub const BN_MOMENTUM: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize by batch statistics and update the running estimates.
    Train,
    /// Normalize by the running estimates.
    Eval,
}

/// Running per-channel statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Number of train-mode updates seen so far; zero means uninitialized.
    pub updates: u64,
}

impl<T: Scalar> BatchNormStats<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            updates: 0,
        }
    }

    /// Stats treated as already estimated (usable in eval mode).
    pub fn with_stats(mean: Vec<T>, var: Vec<T>) -> Self {
        BatchNormStats { mean, var, updates: 1 }
    }
}

#[derive(Debug)]
pub(crate) struct NormSaved<T> {
    pub x: Var,
    pub gamma: Var,
    pub beta: Var,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub outer: usize,
    pub channels: usize,
    pub inner: usize,
    /// Whether the statistics depended on the input (train-mode batchnorm,
    /// layernorm) or were constants (eval-mode batchnorm).
    pub batch_stats: bool,
}

/// `(outer, n, inner)` view of `dims` around `axis`.
fn split(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        dims[..axis].iter().product(),
        dims[axis],
        dims[axis + 1..].iter().product(),
    )
}

/// Runs `f(lane, a, b, out)` on every length-`n` lane along the middle axis
/// of an `(outer, n, inner)` view. Strided lanes go through scratch buffers.
fn lanes<T: Scalar>(
    a: &[T],
    b: &[T],
    (outer, n, inner): (usize, usize, usize),
    mut f: impl FnMut(usize, &[T], &[T], &mut [T]),
) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    if inner == 1 {
        for (k, ((ra, rb), ro)) in a.chunks_exact(n).zip(b.chunks_exact(n)).zip(out.chunks_exact_mut(n)).enumerate() {
            f(k, ra, rb, ro);
        }
        return out;
    }
    let (mut sa, mut sb, mut so) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            for j in 0..n {
                sa[j] = a[at(j)];
                sb[j] = b[at(j)];
            }
            f(o * inner + i, &sa, &sb, &mut so);
            for j in 0..n {
                out[at(j)] = so[j];
            }
        }
    }
    out
}

impl<T: Scalar> Graph<T> {
    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(invalid("softmax", format!("axis {axis} for dims {:?}", t.dims())));
        }
        let src = t.data();
        let out = lanes(src, src, split(t.dims(), axis), |_, row, _, out| {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut total = T::zero();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - mx).exp_fast();
                total += *o;
            }
            out.iter_mut().for_each(|o| *o /= total);
        });
        let value = Tensor::from_parts(t.dims().to_vec(), out);
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    /// Scales each slice along `axis` to unit L2 norm: `x / max(‖x‖, eps)`.
    pub fn normalize_l2(&mut self, x: Var, axis: usize, eps: T) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(invalid("normalize_l2", format!("axis {axis} for dims {:?}", t.dims())));
        }
        if eps <= T::zero() {
            return Err(invalid("normalize_l2", "eps must be positive"));
        }
        let (outer, n, inner) = split(t.dims(), axis);
        let src = t.data();
        let mut norms = vec![T::zero(); outer * inner];
        let out = lanes(src, src, (outer, n, inner), |k, row, _, out| {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms[k] = norm;
            let d = norm.max(eps);
            for (o, &v) in out.iter_mut().zip(row) {
                *o = v / d;
            }
        });
        let value = Tensor::from_parts(t.dims().to_vec(), out);
        Ok(self.push(value, Op::NormalizeL2 { x, axis, eps, norms }, &[x]))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let t = self.value(x);
        let n = *t.dims().last().ok_or_else(|| invalid("layernorm", "rank 0 input"))?;
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.dims() != [n] || tb.dims() != [n] {
            return Err(mismatch("layernorm", t.dims(), tg.dims()));
        }
        let rows = t.numel() / n;
        let eps = T::lit(NORM_EPS);
        let mut xhat = vec![T::zero(); t.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); t.numel()];
        let nn = T::lit(n as f64);
        let (gd, bd) = (tg.data(), tb.data());
        let rows_iter = t.data().chunks_exact(n).zip(xhat.chunks_exact_mut(n)).zip(out.chunks_exact_mut(n));
        for (((row, hs), os), is_out) in rows_iter.zip(inv_std.iter_mut()) {
            let mean = row.iter().copied().sum::<T>() / nn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nn;
            let is = T::one() / (var + eps).sqrt();
            *is_out = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                hs[j] = h;
                os[j] = h * gd[j] + bd[j];
            }
        }
        let value = Tensor::from_parts(t.dims().to_vec(), out);
        let saved = NormSaved {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            outer: rows,
            channels: n,
            inner: 1,
            batch_stats: true,
        };
        Ok(self.push(value, Op::LayerNorm(saved), &[x, gamma, beta]))
    }

    /// Batch normalization with channels on `axis`; statistics are taken over
    /// every other axis. Eps is 1e-5 and the running-average momentum 0.1.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        mode: BatchNormMode,
        stats: &mut BatchNormStats<T>,
    ) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(invalid("batchnorm", format!("axis {axis} for dims {:?}", t.dims())));
        }
        let (outer, c, inner) = split(t.dims(), axis);
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.dims() != [c] || tb.dims() != [c] || stats.mean.len() != c || stats.var.len() != c {
            return Err(mismatch("batchnorm", t.dims(), tg.dims()));
        }
        let eps = T::lit(NORM_EPS);
        let m = outer * inner;
        let src = t.data();
        let (mean, var) = match mode {
            BatchNormMode::Eval => {
                if stats.updates == 0 {
                    return Err(DiffError::UninitializedStatistics);
                }
                (stats.mean.clone(), stats.var.clone())
            }
            BatchNormMode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let mm = T::lit(m as f64);
                if inner == 1 {
                    for row in src.chunks_exact(c) {
                        for (a, &v) in mean.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    mean.iter_mut().for_each(|v| *v /= mm);
                    for row in src.chunks_exact(c) {
                        for ((a, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                            *a += (v - mu) * (v - mu);
                        }
                    }
                } else {
                    for (k, seg) in src.chunks_exact(inner).enumerate() {
                        mean[k % c] += seg.iter().copied().sum::<T>();
                    }
                    mean.iter_mut().for_each(|v| *v /= mm);
                    for (k, seg) in src.chunks_exact(inner).enumerate() {
                        let mu = mean[k % c];
                        var[k % c] += seg.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= mm);
                let mom = T::lit(BN_MOMENTUM);
                let unbias = if m > 1 { mm / T::lit((m - 1) as f64) } else { T::one() };
                for ch in 0..c {
                    stats.mean[ch] = (T::one() - mom) * stats.mean[ch] + mom * mean[ch];
                    stats.var[ch] = (T::one() - mom) * stats.var[ch] + mom * var[ch] * unbias;
                }
                stats.updates += 1;
                (mean, var)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        let (gd, bd) = (tg.data(), tb.data());
        if inner == 1 {
            for ((xs, hs), os) in src.chunks_exact(c).zip(xhat.chunks_exact_mut(c)).zip(out.chunks_exact_mut(c)) {
                for ch in 0..c {
                    let h = (xs[ch] - mean[ch]) * inv_std[ch];
                    hs[ch] = h;
                    os[ch] = h * gd[ch] + bd[ch];
                }
            }
        } else {
            for (k, ((xs, hs), os)) in src
                .chunks_exact(inner)
                .zip(xhat.chunks_exact_mut(inner))
                .zip(out.chunks_exact_mut(inner))
                .enumerate()
            {
                let ch = k % c;
                let (mu, is, ga, be) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
                for ((&v, h), o) in xs.iter().zip(hs.iter_mut()).zip(os.iter_mut()) {
                    *h = (v - mu) * is;
                    *o = *h * ga + be;
                }
            }
        }
        let value = Tensor::from_parts(t.dims().to_vec(), out);
        let saved = NormSaved {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            outer,
            channels: c,
            inner,
            batch_stats: mode == BatchNormMode::Train,
        };
        Ok(self.push(value, Op::BatchNorm(saved), &[x, gamma, beta]))
    }

    /// Same-size 2-D cross-correlation. `x: [B, Cin, H, W]`,
    /// `w: [Cout, Cin, k, k]`, `b: [Cout]`, zero padding `(k-1)/2`, odd `k`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 4 || tw.rank() != 4 {
            return Err(mismatch("conv2d", tx.dims(), tw.dims()));
        }
        let [bsz, cin, h, wd] = [tx.dims()[0], tx.dims()[1], tx.dims()[2], tx.dims()[3]];
        let [cout, cin2, k, k2] = [tw.dims()[0], tw.dims()[1], tw.dims()[2], tw.dims()[3]];
        if cin != cin2 || k != k2 {
            return Err(mismatch("conv2d", tx.dims(), tw.dims()));
        }
        if k % 2 == 0 {
            return Err(invalid("conv2d", format!("kernel size {k} must be odd")));
        }
        let bias = match b {
            Some(b) => {
                let tb = self.value(b);
                if tb.dims() != [cout] {
                    return Err(mismatch("conv2d bias", &[cout], tb.dims()));
                }
                Some(tb.data().to_vec())
            }
            None => None,
        };
        let hw = h * wd;
        let ckk = cin * k * k;
        let mut out = vec![T::zero(); bsz * cout * hw];
        let mut cols = vec![T::zero(); if k == 1 { 0 } else { ckk * hw }];
        for bi in 0..bsz {
            let img = &tx.data()[bi * cin * hw..(bi + 1) * cin * hw];
            let dst = &mut out[bi * cout * hw..(bi + 1) * cout * hw];
            if let Some(bias) = &bias {
                for (co, row) in dst.chunks_mut(hw).enumerate() {
                    row.iter_mut().for_each(|v| *v = bias[co]);
                }
            }
            let src: &[T] = if k == 1 {
                img
            } else {
                im2col(img, cin, h, wd, k, &mut cols);
                &cols
            };
            gemm(cout, ckk, hw, tw.data(), false, src, false, dst, bias.is_some());
        }
        let value = Tensor::from_parts(vec![bsz, cout, h, wd], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, k }, &inputs))
    }

    /// Same-size 2-D cross-correlation on channel-last input.
    /// `x: [H, W, B, Cin]`, `w: [Cout, Cin, k, k]`, `b: [Cout]`, giving
    /// `[H, W, B, Cout]`; equal to [`Graph::conv2d`] on the permuted layout.
    pub fn conv2d_hwc(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 4 || tw.rank() != 4 {
            return Err(mismatch("conv2d_hwc", tx.dims(), tw.dims()));
        }
        let geo = HwcGeometry::new(tx.dims(), tw.dims())?;
        let mut out = vec![T::zero(); geo.rows() * geo.cout];
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.dims() != [geo.cout] {
                return Err(mismatch("conv2d_hwc bias", &[geo.cout], tb.dims()));
            }
            for row in out.chunks_exact_mut(geo.cout) {
                row.copy_from_slice(tb.data());
            }
        }
        let wm = geo.weight_matrix(tw.data());
        let cols = geo.im2col(tx.data());
        gemm(geo.rows(), geo.ckk(), geo.cout, &cols, false, &wm, false, &mut out, b.is_some());
        let value = Tensor::from_parts(vec![geo.h, geo.w, geo.b, geo.cout], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2dHwc { x, w, b }, &inputs))
    }

    /// Bilinear upsampling of the two leading axes by an integer `factor`
    /// (half-pixel centers, edge clamped). `x: [H, W, ..] → [fH, fW, ..]`.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() < 2 || factor == 0 {
            return Err(invalid("upsample", format!("dims {:?}, factor {factor}", t.dims())));
        }
        let (h, w) = (t.dims()[0], t.dims()[1]);
        let rest: usize = t.dims()[2..].iter().product();
        let ys = taps(h, factor);
        let xs = taps(w, factor);
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![T::zero(); oh * ow * rest];
        let src = t.data();
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let (fy, fx) = (T::lit(fy), T::lit(fx));
                let weights = [
                    ((y0, x0), (T::one() - fy) * (T::one() - fx)),
                    ((y0, x1), (T::one() - fy) * fx),
                    ((y1, x0), fy * (T::one() - fx)),
                    ((y1, x1), fy * fx),
                ];
                let dst = &mut out[(oy * ow + ox) * rest..(oy * ow + ox + 1) * rest];
                for ((sy, sx), wt) in weights {
                    let s = &src[(sy * w + sx) * rest..(sy * w + sx + 1) * rest];
                    for (d, v) in dst.iter_mut().zip(s) {
                        *d += wt * *v;
                    }
                }
            }
        }
        let mut dims = t.dims().to_vec();
        dims[0] = oh;
        dims[1] = ow;
        let value = Tensor::from_parts(dims, out);
        Ok(self.push(value, Op::Upsample { x, factor }, &[x]))
    }

    /// Mean cross-entropy of `logits[.., N]` against integer labels, skipping
    /// [`IGNORE_LABEL`]. Computed through a max-shifted log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let t = self.value(logits);
        let n = *t.dims().last().ok_or_else(|| invalid("cross_entropy", "rank 0 logits"))?;
        let rows = t.numel() / n;
        if labels.len() != rows {
            return Err(mismatch("cross_entropy", t.dims(), &[labels.len()]));
        }
        let mut probs = vec![T::zero(); t.numel()];
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, &lbl) in labels.iter().enumerate() {
            let row = &t.data()[r * n..(r + 1) * n];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &v) in probs[r * n..(r + 1) * n].iter_mut().zip(row) {
                *p = (v - mx).exp_fast();
                z += *p;
            }
            probs[r * n..(r + 1) * n].iter_mut().for_each(|p| *p /= z);
            if lbl == IGNORE_LABEL {
                continue;
            }
            let l = lbl as usize;
            if l >= n {
                return Err(invalid("cross_entropy", format!("label {l} with {n} classes")));
            }
            total += mx + z.ln() - row[l];
            count += 1;
        }
        if count == 0 {
            return Err(DiffError::Domain {
                op: "cross_entropy",
                detail: "every pixel is ignored".into(),
            });
        }
        let value = Tensor::scalar(total / T::lit(count as f64));
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
            count,
        };
        Ok(self.push(value, op, &[logits]))
    }
}

fn im2col<T: Scalar>(img: &[T], cin: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * hw;
                let dst = &mut cols[row..row + hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    let line = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &img[c * hw + sy as usize * w..c * hw + (sy as usize + 1) * w];
                    for (x, d) in line.iter_mut().enumerate() {
                        let sx = x as isize + kx as isize - pad;
                        *d = if sx < 0 || sx >= w as isize { T::zero() } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], cin: usize, h: usize, w: usize, k: usize, img: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * hw;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - pad;
                        if sx >= 0 && sx < w as isize {
                            img[c * hw + sy as usize * w + sx as usize] += cols[row + y * w + x];
                        }
                    }
                }
            }
        }
    }
}

/// Shapes for [`Graph::conv2d_hwc`]. Column order inside a patch is
/// `(ky, kx, cin)` so each tap copies one contiguous channel vector.
struct HwcGeometry {
    h: usize,
    w: usize,
    b: usize,
    cin: usize,
    cout: usize,
    k: usize,
}

impl HwcGeometry {
    fn new(xd: &[usize], wd: &[usize]) -> Result<Self> {
        let (cout, k) = (wd[0], wd[2]);
        if xd[3] != wd[1] || wd[2] != wd[3] {
            return Err(mismatch("conv2d_hwc", xd, wd));
        }
        if k % 2 == 0 {
            return Err(invalid("conv2d_hwc", format!("kernel size {k} must be odd")));
        }
        Ok(HwcGeometry { h: xd[0], w: xd[1], b: xd[2], cin: xd[3], cout, k })
    }

    fn rows(&self) -> usize {
        self.h * self.w * self.b
    }

    fn ckk(&self) -> usize {
        self.k * self.k * self.cin
    }

    /// `[Cout, Cin, k, k]` to `[(ky, kx, cin), Cout]`.
    fn weight_matrix<T: Scalar>(&self, w: &[T]) -> Vec<T> {
        let (k, cin, cout) = (self.k, self.cin, self.cout);
        let mut m = vec![T::zero(); w.len()];
        for co in 0..cout {
            for c in 0..cin {
                for t in 0..k * k {
                    m[(t * cin + c) * cout + co] = w[(co * cin + c) * k * k + t];
                }
            }
        }
        m
    }

    fn weight_from_matrix<T: Scalar>(&self, m: &[T]) -> Vec<T> {
        let (k, cin, cout) = (self.k, self.cin, self.cout);
        let mut w = vec![T::zero(); m.len()];
        for co in 0..cout {
            for c in 0..cin {
                for t in 0..k * k {
                    w[(co * cin + c) * k * k + t] = m[(t * cin + c) * cout + co];
                }
            }
        }
        w
    }

    /// Calls `f(row_offset, column_offset, source_offset)` for every in-bounds
    /// tap, each covering `cin` contiguous values.
    fn for_taps(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (h, w, b, cin, k) = (self.h as isize, self.w as isize, self.b, self.cin, self.k);
        let pad = (k / 2) as isize;
        let ckk = self.ckk();
        for y in 0..h {
            for x in 0..w {
                for ky in 0..k {
                    let sy = y + ky as isize - pad;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = x + kx as isize - pad;
                        if sx < 0 || sx >= w {
                            continue;
                        }
                        let col = (ky * k + kx) * cin;
                        let pix = (y * w + x) as usize * b;
                        let src = (sy * w + sx) as usize * b;
                        for bi in 0..b {
                            f((pix + bi) * ckk, col, (src + bi) * cin);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let cin = self.cin;
        let mut cols = vec![T::zero(); self.rows() * self.ckk()];
        self.for_taps(|r, c, s| cols[r + c..r + c + cin].copy_from_slice(&x[s..s + cin]));
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        let cin = self.cin;
        let mut x = vec![T::zero(); self.rows() * cin];
        self.for_taps(|r, c, s| {
            for (d, &v) in x[s..s + cin].iter_mut().zip(&cols[r + c..r + c + cin]) {
                *d += v;
            }
        });
        x
    }
}

/// Source taps `(i0, i1, frac)` for each output coordinate.
fn taps(len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn softmax_backward<T: Scalar>(y: &Tensor<T>, axis: usize, g: &Tensor<T>) -> Tensor<T> {
    let out = lanes(y.data(), g.data(), split(y.dims(), axis), |_, ys, gs, out| {
        let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &gv) in out.iter_mut().zip(ys).zip(gs) {
            *o = yv * (gv - dot);
        }
    });
    Tensor::from_parts(y.dims().to_vec(), out)
}

pub(crate) fn normalize_backward<T: Scalar>(y: &Tensor<T>, axis: usize, eps: T, norms: &[T], g: &Tensor<T>) -> Tensor<T> {
    let out = lanes(y.data(), g.data(), split(y.dims(), axis), |k, ys, gs, out| {
        let norm = norms[k];
        if norm < eps {
            for (o, &gv) in out.iter_mut().zip(gs) {
                *o = gv / eps;
            }
            return;
        }
        let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &gv) in out.iter_mut().zip(ys).zip(gs) {
            *o = (gv - yv * dot) / norm;
        }
    });
    Tensor::from_parts(y.dims().to_vec(), out)
}

pub(crate) fn layernorm_backward<T: Scalar>(s: &NormSaved<T>, gamma: &Tensor<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
    let n = s.channels;
    let gd = g.data();
    let mut gx = vec![T::zero(); gd.len()];
    let mut gg = vec![T::zero(); n];
    let mut gb = vec![T::zero(); n];
    let nn = T::lit(n as f64);
    let mut gh = vec![T::zero(); n];
    for r in 0..s.outer {
        let xh = &s.xhat[r * n..(r + 1) * n];
        let gr = &gd[r * n..(r + 1) * n];
        let mut sum_gh = T::zero();
        let mut sum_ghx = T::zero();
        for j in 0..n {
            gg[j] += gr[j] * xh[j];
            gb[j] += gr[j];
            gh[j] = gr[j] * gamma.data()[j];
            sum_gh += gh[j];
            sum_ghx += gh[j] * xh[j];
        }
        let scale = s.inv_std[r] / nn;
        for j in 0..n {
            gx[r * n + j] = scale * (nn * gh[j] - sum_gh - xh[j] * sum_ghx);
        }
    }
    vec![
        (s.x, Tensor::from_parts(g.dims().to_vec(), gx)),
        (s.gamma, Tensor::from_parts(vec![n], gg)),
        (s.beta, Tensor::from_parts(vec![n], gb)),
    ]
}

pub(crate) fn batchnorm_backward<T: Scalar>(s: &NormSaved<T>, gamma: &Tensor<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
    let (outer, c, inner) = (s.outer, s.channels, s.inner);
    let gd = g.data();
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for (gs, hs) in gd.chunks_exact(inner * c).zip(s.xhat.chunks_exact(inner * c)) {
        if inner == 1 {
            for ch in 0..c {
                gg[ch] += gs[ch] * hs[ch];
                gb[ch] += gs[ch];
            }
        } else {
            for ch in 0..c {
                let r = ch * inner..(ch + 1) * inner;
                gg[ch] += gs[r.clone()].iter().zip(&hs[r.clone()]).map(|(&a, &b)| a * b).sum::<T>();
                gb[ch] += gs[r].iter().copied().sum::<T>();
            }
        }
    }
    let m = T::lit((outer * inner) as f64);
    // per-channel affine map gx = a·g + b·xhat + d
    let mut ca = vec![T::zero(); c];
    let mut cb = vec![T::zero(); c];
    let mut cd = vec![T::zero(); c];
    for ch in 0..c {
        let k = gamma.data()[ch] * s.inv_std[ch];
        ca[ch] = k;
        if s.batch_stats {
            // sums of gamma·g and gamma·g·xhat over the channel are gamma·gb, gamma·gg
            cb[ch] = -k * gg[ch] / m;
            cd[ch] = -k * gb[ch] / m;
        }
    }
    let mut gx = vec![T::zero(); gd.len()];
    for ((os, gs), hs) in gx.chunks_exact_mut(inner * c).zip(gd.chunks_exact(inner * c)).zip(s.xhat.chunks_exact(inner * c)) {
        if inner == 1 {
            for ch in 0..c {
                os[ch] = ca[ch] * gs[ch] + cb[ch] * hs[ch] + cd[ch];
            }
        } else {
            for ch in 0..c {
                let r = ch * inner..(ch + 1) * inner;
                let (a, b, d) = (ca[ch], cb[ch], cd[ch]);
                for ((o, &gv), &h) in os[r.clone()].iter_mut().zip(&gs[r.clone()]).zip(&hs[r]) {
                    *o = a * gv + b * h + d;
                }
            }
        }
    }
    vec![
        (s.x, Tensor::from_parts(g.dims().to_vec(), gx)),
        (s.gamma, Tensor::from_parts(vec![c], gg)),
        (s.beta, Tensor::from_parts(vec![c], gb)),
    ]
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: Var,
    tx: &Tensor<T>,
    w: Var,
    tw: &Tensor<T>,
    b: Option<Var>,
    k: usize,
    g: &Tensor<T>,
) -> Vec<(Var, Tensor<T>)> {
    let [bsz, cin, h, wd] = [tx.dims()[0], tx.dims()[1], tx.dims()[2], tx.dims()[3]];
    let cout = tw.dims()[0];
    let hw = h * wd;
    let ckk = cin * k * k;
    let mut gx = vec![T::zero(); tx.numel()];
    let mut gw = vec![T::zero(); tw.numel()];
    let mut gb = vec![T::zero(); cout];
    let mut cols = vec![T::zero(); if k == 1 { 0 } else { ckk * hw }];
    let mut gcols = vec![T::zero(); if k == 1 { 0 } else { ckk * hw }];
    for bi in 0..bsz {
        let img = &tx.data()[bi * cin * hw..(bi + 1) * cin * hw];
        let go = &g.data()[bi * cout * hw..(bi + 1) * cout * hw];
        for (co, row) in go.chunks(hw).enumerate() {
            gb[co] += row.iter().copied().sum::<T>();
        }
        let gimg = &mut gx[bi * cin * hw..(bi + 1) * cin * hw];
        if k == 1 {
            gemm(cout, hw, ckk, go, false, img, true, &mut gw, true);
            gemm(ckk, cout, hw, tw.data(), true, go, false, gimg, false);
        } else {
            im2col(img, cin, h, wd, k, &mut cols);
            gemm(cout, hw, ckk, go, false, &cols, true, &mut gw, true);
            gemm(ckk, cout, hw, tw.data(), true, go, false, &mut gcols, false);
            col2im(&gcols, cin, h, wd, k, gimg);
        }
    }
    let mut out = vec![
        (x, Tensor::from_parts(tx.dims().to_vec(), gx)),
        (w, Tensor::from_parts(tw.dims().to_vec(), gw)),
    ];
    if let Some(b) = b {
        out.push((b, Tensor::from_parts(vec![cout], gb)));
    }
    out
}

pub(crate) fn conv2d_hwc_backward<T: Scalar>(
    x: Var,
    tx: &Tensor<T>,
    w: Var,
    tw: &Tensor<T>,
    b: Option<Var>,
    g: &Tensor<T>,
) -> Vec<(Var, Tensor<T>)> {
    let geo = HwcGeometry::new(tx.dims(), tw.dims()).expect("validated in forward");
    let (rows, ckk, cout) = (geo.rows(), geo.ckk(), geo.cout);
    let cols = geo.im2col(tx.data());
    let mut gwm = vec![T::zero(); ckk * cout];
    gemm(ckk, rows, cout, &cols, true, g.data(), false, &mut gwm, false);
    let wm = geo.weight_matrix(tw.data());
    let mut gcols = cols;
    gemm(rows, cout, ckk, g.data(), false, &wm, true, &mut gcols, false);
    let mut out = vec![
        (x, Tensor::from_parts(tx.dims().to_vec(), geo.col2im(&gcols))),
        (w, Tensor::from_parts(tw.dims().to_vec(), geo.weight_from_matrix(&gwm))),
    ];
    if let Some(b) = b {
        let mut gb = vec![T::zero(); cout];
        for row in g.data().chunks_exact(cout) {
            for (a, &v) in gb.iter_mut().zip(row) {
                *a += v;
            }
        }
        out.push((b, Tensor::from_parts(vec![cout], gb)));
    }
    out
}

pub(crate) fn upsample_backward<T: Scalar>(in_dims: &[usize], factor: usize, g: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (in_dims[0], in_dims[1]);
    let rest: usize = in_dims[2..].iter().product();
    let ys = taps(h, factor);
    let xs = taps(w, factor);
    let ow = w * factor;
    let mut out = vec![T::zero(); h * w * rest];
    let gd = g.data();
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let (fy, fx) = (T::lit(fy), T::lit(fx));
            let src = &gd[(oy * ow + ox) * rest..(oy * ow + ox + 1) * rest];
            let weights = [
                ((y0, x0), (T::one() - fy) * (T::one() - fx)),
                ((y0, x1), (T::one() - fy) * fx),
                ((y1, x0), fy * (T::one() - fx)),
                ((y1, x1), fy * fx),
            ];
            for ((sy, sx), wt) in weights {
                let dst = &mut out[(sy * w + sx) * rest..(sy * w + sx + 1) * rest];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d += wt * *v;
                }
            }
        }
    }
    Tensor::from_parts(in_dims.to_vec(), out)
}

pub(crate) fn cross_entropy_backward<T: Scalar>(
    dims: &[usize],
    labels: &[u8],
    probs: &[T],
    count: usize,
    g: &Tensor<T>,
) -> Tensor<T> {
    let n = *dims.last().expect("rank >= 1");
    let scale = g.item() / T::lit(count as f64);
    let mut out = vec![T::zero(); probs.len()];
    for (r, &lbl) in labels.iter().enumerate() {
        if lbl == IGNORE_LABEL {
            continue;
        }
        for j in 0..n {
            out[r * n + j] = probs[r * n + j] * scale;
        }
        out[r * n + lbl as usize] -= scale;
    }
    Tensor::from_parts(dims.to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([3]));
        let s = g.softmax(x, 0).unwrap();
        for v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = g.constant(t(&[2], &[1000., 0.]));
        let s = g.softmax(big, 0).unwrap();
        let d = g.value(s).data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-300);
    }

    #[test]
    fn normalize_345_and_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 2], &[3., 4., 0., 0.]));
        let y = g.normalize_l2(x, 1, 1e-8).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
        assert_eq!(&d[2..], &[0., 0.]);
    }

    #[test]
    fn conv_identity_1x1() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn([2, 3, 2, 2], |i| (i[0] * 12 + i[1] * 4 + i[2] * 2 + i[3]) as f64));
        let w = g.constant(Tensor::from_fn([3, 3, 1, 1], |i| if i[0] == i[1] { 1.0 } else { 0.0 }));
        let b = g.constant(Tensor::zeros([3]));
        let y = g.conv2d(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv_3x3_counts_neighbours() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones([1, 1, 3, 3]));
        let w = g.constant(Tensor::ones([1, 1, 3, 3]));
        let y = g.conv2d(x, w, None).unwrap();
        let v = g.value(y);
        assert_eq!(v.get(&[0, 0, 1, 1]), 9.0);
        assert_eq!(v.get(&[0, 0, 0, 0]), 4.0);
        assert_eq!(v.get(&[0, 0, 0, 1]), 6.0);
        let even = g.constant(Tensor::ones([1, 1, 2, 2]));
        assert!(g.conv2d(x, even, None).is_err());
    }

    #[test]
    fn conv_hwc_matches_nchw() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::<f64>::new();
        let xt = Tensor::randn([5, 4, 3, 2], 1.0, &mut r);
        let x = g.constant(xt);
        let w = g.constant(Tensor::randn([3, 2, 3, 3], 1.0, &mut r));
        let b = g.constant(Tensor::randn([3], 1.0, &mut r));
        let y = g.conv2d_hwc(x, w, Some(b)).unwrap();
        let xn = g.permute(x, &[2, 3, 0, 1]).unwrap();
        let yn = g.conv2d(xn, w, Some(b)).unwrap();
        let yn = g.permute(yn, &[2, 3, 0, 1]).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(yn)) < 1e-12);
        let even = g.constant(Tensor::ones([3, 2, 2, 2]));
        assert!(g.conv2d_hwc(x, even, None).is_err());
    }

    #[test]
    fn batchnorm_fixed_point_and_constant_channel() {
        let mut g = Graph::<f64>::new();
        // one channel with mean 0 and variance 1
        let x = g.constant(t(&[4, 1], &[1., -1., 1., -1.]));
        let ga = g.constant(Tensor::ones([1]));
        let be = g.constant(Tensor::zeros([1]));
        let mut stats = BatchNormStats::new(1);
        let y = g.batchnorm(x, ga, be, 1, BatchNormMode::Train, &mut stats).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(x)) < 1e-5);
        assert_eq!(stats.updates, 1);
        assert!((stats.var[0] - (0.9 + 0.1 * 4.0 / 3.0)).abs() < 1e-12);

        let c = g.constant(Tensor::full([5, 1], 3.0));
        let beta = g.constant(Tensor::full([1], 0.25));
        let mut stats = BatchNormStats::new(1);
        let y = g.batchnorm(c, ga, beta, 1, BatchNormMode::Train, &mut stats).unwrap();
        assert!(g.value(y).data().iter().all(|v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn batchnorm_eval_requires_stats() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones([2, 3]));
        let ga = g.constant(Tensor::ones([3]));
        let be = g.constant(Tensor::zeros([3]));
        let mut stats = BatchNormStats::new(3);
        assert!(matches!(
            g.batchnorm(x, ga, be, 1, BatchNormMode::Eval, &mut stats),
            Err(DiffError::UninitializedStatistics)
        ));
        let mut ready = BatchNormStats::with_stats(vec![0.0; 3], vec![1.0; 3]);
        let y = g.batchnorm(x, ga, be, 1, BatchNormMode::Eval, &mut ready).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(x)) < 1e-5);
        assert_eq!(ready.updates, 1);
    }

    #[test]
    fn upsample_constant_and_nearest_block() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full([2, 2, 3], 1.5));
        let y = g.upsample_bilinear(x, 4).unwrap();
        assert_eq!(g.dims(y), &[8, 8, 3]);
        assert!(g.value(y).data().iter().all(|v| (v - 1.5).abs() < 1e-12));
        let one = g.constant(t(&[1, 2, 1], &[0., 1.]));
        let y = g.upsample_bilinear(one, 2).unwrap();
        // centers at -0.25 (clamped to 0), 0.25, 0.75, 1.25 (clamped)
        assert_eq!(g.value(y).data(), &[0., 0.25, 0.75, 1., 0., 0.25, 0.75, 1.]);
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([4, 3]));
        let l = g.cross_entropy(x, &[0, 1, 2, IGNORE_LABEL]).unwrap();
        assert!((g.value(l).item() - 3f64.ln()).abs() < 1e-12);
        let sharp = g.constant(t(&[1, 3], &[20., 0., 0.]));
        let l = g.cross_entropy(sharp, &[0]).unwrap();
        assert!(g.value(l).item() < 1e-6);
        assert!(g.cross_entropy(x, &[IGNORE_LABEL; 4]).is_err());
        assert!(g.cross_entropy(x, &[0, 1, 3, 0]).is_err());
    }
}
