//! Broadcasting arithmetic and pointwise nonlinearities.

use crate::error::{mismatch, DiffError, Result};
use crate::graph::{BinaryOp, Graph, Op, UnaryOp, Var};
use crate::scalar::Scalar;
use crate::tensor::{broadcast_dims, broadcast_strides, strided_offsets, Tensor};

/// Divisors smaller than this in magnitude are rejected.
pub const DIV_GUARD: f64 = 1e-12;

const GELU_SQRT_2_OVER_PI: f64 = 0.7978845608;
const GELU_CUBIC: f64 = 0.044715;

/// Right-hand side of [`Graph::elementwise`].
#[derive(Clone, Copy, Debug)]
pub enum Operand<T> {
    Node(Var),
    Scalar(T),
}

impl<T: Scalar> Graph<T> {
    pub fn elementwise(&mut self, op: BinaryOp, a: Var, b: Operand<T>) -> Result<Var> {
        match b {
            Operand::Node(b) => self.binary(op, a, b),
            Operand::Scalar(s) => match op {
                BinaryOp::Add => Ok(self.add_scalar(a, s)),
                BinaryOp::Sub => Ok(self.add_scalar(a, -s)),
                BinaryOp::Mul => Ok(self.mul_scalar(a, s)),
                BinaryOp::Div => {
                    if s.abs() < T::lit(DIV_GUARD) {
                        return Err(DiffError::Domain {
                            op: "div",
                            detail: format!("scalar divisor {s}"),
                        });
                    }
                    Ok(self.mul_scalar(a, T::one() / s))
                }
            },
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_dims = broadcast_dims(ta.dims(), tb.dims())
            .ok_or_else(|| mismatch(op_name(op), ta.dims(), tb.dims()))?;
        if op == BinaryOp::Div {
            if let Some(bad) = tb.data().iter().find(|v| v.abs() < T::lit(DIV_GUARD)) {
                return Err(DiffError::Domain {
                    op: "div",
                    detail: format!("divisor {bad} below {DIV_GUARD:e}"),
                });
            }
        }
        let data = zip_broadcast(op, ta, tb, &out_dims);
        let value = Tensor::from_parts(out_dims, data);
        Ok(self.push(value, Op::Binary(op, a, b), &[a, b]))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v + s);
        self.push(value, Op::AddScalar(x), &[x])
    }

    pub fn mul_scalar(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::MulScalar(x, s), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.mul_scalar(x, -T::one())
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        if op == UnaryOp::Sqrt && self.value(x).data().iter().any(|v| *v < T::zero()) {
            return Err(DiffError::Domain {
                op: "sqrt",
                detail: "negative input".into(),
            });
        }
        let value = Tensor::from_parts(self.value(x).dims().to_vec(), unary_forward(op, self.value(x).data()));
        Ok(self.push(value, Op::Unary(op, x), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Relu, x).expect("relu is total")
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Gelu, x).expect("gelu is total")
    }

    pub fn elu_plus_one(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::EluPlusOne, x).expect("elu+1 is total")
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Square, x).expect("square is total")
    }

    /// Identity in the forward pass; multiplies the incoming gradient by
    /// `factor` on the way back.
    pub fn scale_grad(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::ScaleGrad(x, factor), &[x])
    }

    /// Same value, no gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }
}

fn op_name(op: BinaryOp) -> &'static str {
    match op {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
        BinaryOp::Div => "div",
    }
}

/// How an operand maps onto the broadcast output, flattened row-major.
enum Pattern {
    Full,
    Scalar,
    /// Operand repeats every `n` output elements.
    Tile(usize),
    /// Each operand element covers `n` consecutive output elements.
    Row(usize),
    General(Vec<usize>),
}

fn pattern(dims: &[usize], out: &[usize]) -> Pattern {
    if dims == out {
        return Pattern::Full;
    }
    let numel: usize = dims.iter().product();
    if numel == 1 {
        return Pattern::Scalar;
    }
    let pad = out.len() - dims.len();
    let padded: Vec<usize> = std::iter::repeat_n(1, pad).chain(dims.iter().copied()).collect();
    let lead = padded.iter().take_while(|&&d| d == 1).count();
    if padded[lead..] == out[lead..] {
        return Pattern::Tile(numel);
    }
    let trail = padded.iter().rev().take_while(|&&d| d == 1).count();
    let keep = out.len() - trail;
    if padded[..keep] == out[..keep] {
        return Pattern::Row(out[keep..].iter().product());
    }
    Pattern::General(strided_offsets(out, &broadcast_strides(dims, out)))
}

fn expand<'a, T: Scalar>(data: &'a [T], pat: &Pattern, total: usize) -> std::borrow::Cow<'a, [T]> {
    use std::borrow::Cow;
    match pat {
        Pattern::Full => Cow::Borrowed(data),
        Pattern::Scalar => Cow::Owned(vec![data[0]; total]),
        Pattern::Tile(n) => {
            let mut v = Vec::with_capacity(total);
            for _ in 0..total / n {
                v.extend_from_slice(data);
            }
            Cow::Owned(v)
        }
        Pattern::Row(n) => {
            let mut v = Vec::with_capacity(total);
            for &x in data {
                v.extend(std::iter::repeat_n(x, *n));
            }
            Cow::Owned(v)
        }
        Pattern::General(offsets) => Cow::Owned(offsets.iter().map(|&o| data[o]).collect()),
    }
}

/// Sums a full-size gradient back onto an operand of `len` elements.
fn reduce<T: Scalar>(d: Vec<T>, pat: &Pattern, len: usize) -> Vec<T> {
    match pat {
        Pattern::Full => d,
        Pattern::Scalar => vec![d.iter().copied().sum()],
        Pattern::Tile(n) => {
            let mut acc = vec![T::zero(); *n];
            for chunk in d.chunks_exact(*n) {
                for (a, &x) in acc.iter_mut().zip(chunk) {
                    *a += x;
                }
            }
            acc
        }
        Pattern::Row(n) => d.chunks_exact(*n).map(|c| c.iter().copied().sum()).collect(),
        Pattern::General(offsets) => {
            let mut acc = vec![T::zero(); len];
            for (&o, &x) in offsets.iter().zip(&d) {
                acc[o] += x;
            }
            acc
        }
    }
}

fn zip_with<T: Scalar>(x: &[T], y: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    x.iter().zip(y).map(|(&a, &b)| f(a, b)).collect()
}

fn zip_broadcast<T: Scalar>(op: BinaryOp, a: &Tensor<T>, b: &Tensor<T>, out: &[usize]) -> Vec<T> {
    let total: usize = out.iter().product();
    let x = expand(a.data(), &pattern(a.dims(), out), total);
    let y = expand(b.data(), &pattern(b.dims(), out), total);
    match op {
        BinaryOp::Add => zip_with(&x, &y, |p, q| p + q),
        BinaryOp::Sub => zip_with(&x, &y, |p, q| p - q),
        BinaryOp::Mul => zip_with(&x, &y, |p, q| p * q),
        BinaryOp::Div => zip_with(&x, &y, |p, q| p / q),
    }
}

pub(crate) fn binary_backward<T: Scalar>(
    op: BinaryOp,
    a: Var,
    ta: &Tensor<T>,
    b: Var,
    tb: &Tensor<T>,
    g: &Tensor<T>,
) -> Vec<(Var, Tensor<T>)> {
    let out = g.dims();
    let total = g.numel();
    let (pa, pb) = (pattern(ta.dims(), out), pattern(tb.dims(), out));
    let dg = g.data();
    let (ga, gb) = match op {
        BinaryOp::Add => (dg.to_vec(), dg.to_vec()),
        BinaryOp::Sub => (dg.to_vec(), dg.iter().map(|&v| -v).collect()),
        BinaryOp::Mul => {
            let x = expand(ta.data(), &pa, total);
            let y = expand(tb.data(), &pb, total);
            (zip_with(dg, &y, |p, q| p * q), zip_with(dg, &x, |p, q| p * q))
        }
        BinaryOp::Div => {
            let x = expand(ta.data(), &pa, total);
            let y = expand(tb.data(), &pb, total);
            let ga = zip_with(dg, &y, |p, q| p / q);
            let gb = ga.iter().zip(x.iter().zip(y.iter())).map(|(&q, (&xv, &yv))| -q * xv / yv).collect();
            (ga, gb)
        }
    };
    vec![
        (a, Tensor::from_parts(ta.dims().to_vec(), reduce(ga, &pa, ta.numel()))),
        (b, Tensor::from_parts(tb.dims().to_vec(), reduce(gb, &pb, tb.numel()))),
    ]
}

/// `tanh` through one `exp`, much cheaper than the library call.
fn tanh_via_exp<T: Scalar>(u: T) -> T {
    let e = (u + u).exp_fast();
    T::one() - T::lit(2.0) / (e + T::one())
}

fn unary_forward<T: Scalar>(op: UnaryOp, xs: &[T]) -> Vec<T> {
    let c = T::lit(GELU_SQRT_2_OVER_PI);
    let k = T::lit(GELU_CUBIC);
    let half = T::lit(0.5);
    match op {
        UnaryOp::Relu => xs.iter().map(|&x| x.max(T::zero())).collect(),
        UnaryOp::Gelu => xs
            .iter()
            .map(|&x| half * x * (T::one() + tanh_via_exp(c * (x + k * x * x * x))))
            .collect(),
        UnaryOp::EluPlusOne => xs
            .iter()
            .map(|&x| {
                let e = x.min(T::zero()).exp_fast();
                if x > T::zero() {
                    x + T::one()
                } else {
                    e
                }
            })
            .collect(),
        UnaryOp::Exp => xs.iter().map(|&x| x.exp()).collect(),
        UnaryOp::Square => xs.iter().map(|&x| x * x).collect(),
        UnaryOp::Sqrt => xs.iter().map(|&x| x.sqrt()).collect(),
    }
}

pub(crate) fn unary_backward<T: Scalar>(op: UnaryOp, x: &Tensor<T>, y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let (xs, ys, gs) = (x.data(), y.data(), g.data());
    let one = T::one();
    let data: Vec<T> = match op {
        UnaryOp::Relu => xs
            .iter()
            .zip(gs)
            .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
            .collect(),
        UnaryOp::Gelu => {
            let c = T::lit(GELU_SQRT_2_OVER_PI);
            let k = T::lit(GELU_CUBIC);
            let k3 = T::lit(3.0 * GELU_CUBIC);
            let half = T::lit(0.5);
            xs.iter()
                .zip(gs)
                .map(|(&x, &g)| {
                    let t = tanh_via_exp(c * (x + k * x * x * x));
                    g * (half * (one + t) + half * x * (one - t * t) * c * (one + k3 * x * x))
                })
                .collect()
        }
        UnaryOp::EluPlusOne => xs
            .iter()
            .zip(ys)
            .zip(gs)
            .map(|((&x, &y), &g)| if x > T::zero() { g } else { y * g })
            .collect(),
        UnaryOp::Exp => ys.iter().zip(gs).map(|(&y, &g)| y * g).collect(),
        UnaryOp::Square => xs.iter().zip(gs).map(|(&x, &g)| T::lit(2.0) * x * g).collect(),
        UnaryOp::Sqrt => ys.iter().zip(gs).map(|(&y, &g)| T::lit(0.5) / y * g).collect(),
    };
    Tensor::from_parts(x.dims().to_vec(), data)
}
