//! Finite-difference cases covering every differentiable operation, in
//! double precision with the default step. Shared by this crate's tests and
//! by downstream acceptance runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result};
use crate::gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
use crate::ops::nn::{BatchNormMode, IGNORE_LABEL};
use crate::params::{ParamStore, Session};
use crate::tensor::Tensor;
use crate::Var;

pub struct Case {
    pub name: &'static str,
    pub check: fn() -> Result<GradCheckReport>,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Weighted-sum head so that no output direction is degenerate.
fn head(s: &mut Session<f64>, y: Var) -> Result<Var> {
    let dims = s.graph.dims(y).to_vec();
    let w = Tensor::randn(dims, 1.0, &mut rng(99));
    let w = s.input(w);
    let p = s.graph.mul(y, w)?;
    Ok(s.graph.sum_all(p))
}

fn store(entries: &[(&str, &[usize])], seed: u64) -> ParamStore<f64> {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    for (name, dims) in entries {
        s.insert(*name, Tensor::randn(dims.to_vec(), 1.0, &mut r)).expect("distinct names");
    }
    s
}

pub fn cases() -> Vec<Case> {
    vec![
        Case { name: "sum_of_squares", check: sum_of_squares },
        Case { name: "broadcasting_arithmetic", check: broadcasting_arithmetic },
        Case { name: "matmul_random_3x4_by_4x2", check: matmul_random_3x4_by_4x2 },
        Case { name: "batched_matmul_with_broadcast_and_linear", check: batched_matmul_with_broadcast_and_linear },
        Case { name: "softmax_length_5_and_axis_0", check: softmax_length_5_and_axis_0 },
        Case { name: "activations", check: activations },
        Case { name: "normalize_l2_middle_axis", check: normalize_l2_middle_axis },
        Case { name: "layernorm_last_axis", check: layernorm_last_axis },
        Case { name: "conv2d_3x3_and_1x1", check: conv2d_3x3_and_1x1 },
        Case { name: "conv2d_channel_last", check: conv2d_channel_last },
        Case { name: "batchnorm_train_mode", check: batchnorm_train_mode },
        Case { name: "batchnorm_eval_mode", check: batchnorm_eval_mode },
        Case { name: "shape_ops_upsample_and_cross_entropy", check: shape_ops_upsample_and_cross_entropy },
        Case { name: "scalar_maps_and_reductions", check: scalar_maps_and_reductions },
    ]
}

fn sum_of_squares() -> Result<GradCheckReport> {
    let st = store(&[("x", &[5])], 2);
    check_gradients(
        &st,
        |s| -> Result<Var> {
            let x = s.param("x")?;
            let y = s.graph.square(x);
            Ok(s.graph.sum_all(y))
        },
        &GradCheckConfig::default(),
    )
}

fn broadcasting_arithmetic() -> Result<GradCheckReport> {
    let st = store(&[("a", &[3, 1, 4]), ("b", &[2, 4]), ("c", &[4])], 4);
    check_gradients(
        &st,
        |s| -> Result<Var> {
            let (a, b, c) = (s.param("a")?, s.param("b")?, s.param("c")?);
            let ab = s.graph.add(a, b)?;
            let abc = s.graph.mul(ab, c)?;
            let d = s.graph.sub(abc, b)?;
            // keep divisors away from zero
            let sq = s.graph.square(c);
            let den = s.graph.add_scalar(sq, 0.5);
            let q = s.graph.div(d, den)?;
            head(s, q)
        },
        &GradCheckConfig::default(),
    )
}

fn matmul_random_3x4_by_4x2() -> Result<GradCheckReport> {
    let st = store(&[("a", &[3, 4]), ("b", &[4, 2])], 5);
    check_gradients(
        &st,
        |s| -> Result<Var> {
            let (a, b) = (s.param("a")?, s.param("b")?);
            let c = s.graph.matmul(a, b)?;
            head(s, c)
        },
        &GradCheckConfig::default(),
    )
}

fn batched_matmul_with_broadcast_and_linear() -> Result<GradCheckReport> {
    let st = store(
        &[("a", &[2, 3, 4]), ("b", &[1, 4, 2]), ("w", &[2, 3]), ("bias", &[3])],
        6,
    );
    check_gradients(
        &st,
        |s| -> Result<Var> {
            let (a, b) = (s.param("a")?, s.param("b")?);
            let c = s.graph.matmul(a, b)?;
            let (w, bias) = (s.param("w")?, s.param("bias")?);
            let y = s.graph.linear(c, w, Some(bias))?;
            head(s, y)
        },
        &GradCheckConfig::default(),
    )
}

fn softmax_length_5_and_axis_0() -> Result<GradCheckReport> {
    let st = store(&[("x", &[5]), ("m", &[3, 4])], 7);
    check_gradients(
        &st,
        |s| -> Result<Var> {
            let x = s.param("x")?;
            let y = s.graph.softmax(x, 0)?;
            let m = s.param("m")?;
            let my = s.graph.softmax(m, 0)?;
            let a = head(s, y)?;
            let b = head(s, my)?;
            s.graph.add(a, b)
        },
        &GradCheckConfig::default(),
    )
}

fn activations() -> Result<GradCheckReport> {
    let st = store(&[("x", &[4, 6])], 8);
    check_gradients(
        &st,
        |s| -> Result<Var> {
            let x = s.param("x")?;
            let g = s.graph.gelu(x);
            let e = s.graph.elu_plus_one(x);
            let r = s.graph.relu(x);
            let ge = s.graph.mul(g, e)?;
            let t = s.graph.add(ge, r)?;
            head(s, t)
        },
        &GradCheckConfig::default(),
    )
}

fn normalize_l2_middle_axis() -> Result<GradCheckReport> {
    let st = store(&[("x", &[2, 5, 3])], 9);
    check_gradients(
        &st,
        |s| -> Result<Var> {
            let x = s.param("x")?;
            let y = s.graph.normalize_l2(x, 1, 1e-8)?;
            head(s, y)
        },
        &GradCheckConfig::default(),
    )
}

fn layernorm_last_axis() -> Result<GradCheckReport> {
    let st = store(&[("x", &[3, 6]), ("g", &[6]), ("b", &[6])], 10);
    check_gradients(
        &st,
        |s| -> Result<Var> {
            let (x, g, b) = (s.param("x")?, s.param("g")?, s.param("b")?);
            let y = s.graph.layernorm(x, g, b)?;
            head(s, y)
        },
        &GradCheckConfig::default(),
    )
}

fn conv2d_3x3_and_1x1() -> Result<GradCheckReport> {
    let st = store(
        &[("x", &[2, 3, 4, 5]), ("w3", &[2, 3, 3, 3]), ("b3", &[2]), ("w1", &[3, 2, 1, 1])],
        11,
    );
    check_gradients(
        &st,
        |s| -> Result<Var> {
            let (x, w3, b3, w1) = (s.param("x")?, s.param("w3")?, s.param("b3")?, s.param("w1")?);
            let y = s.graph.conv2d(x, w3, Some(b3))?;
            let z = s.graph.conv2d(y, w1, None)?;
            head(s, z)
        },
        &GradCheckConfig::default(),
    )
}

fn conv2d_channel_last() -> Result<GradCheckReport> {
    let st = store(&[("x", &[4, 5, 2, 3]), ("w", &[2, 3, 3, 3]), ("b", &[2])], 13);
    check_gradients(
        &st,
        |s| -> Result<Var> {
            let (x, w, b) = (s.param("x")?, s.param("w")?, s.param("b")?);
            let y = s.graph.conv2d_hwc(x, w, Some(b))?;
            head(s, y)
        },
        &GradCheckConfig::default(),
    )
}

fn batchnorm_train_mode() -> Result<GradCheckReport> {
    let mut st = store(&[("x", &[3, 4, 5])], 12);
    st.insert_batchnorm("bn", 4).expect("fixed names");
    // non-trivial affine parameters
    *st.get_mut("bn.gamma").expect("fixed names") = Tensor::new([4], vec![0.5, 1.5, -1.0, 2.0]).expect("fixed names");
    *st.get_mut("bn.beta").expect("fixed names") = Tensor::new([4], vec![0.1, -0.2, 0.3, 0.0]).expect("fixed names");
    check_gradients(
        &st,
        |s| -> Result<Var> {
            let x = s.param("x")?;
            let y = s.batchnorm(x, "bn", 1)?;
            head(s, y)
        },
        &GradCheckConfig::default().with_tol(1e-3),
    )
}

fn batchnorm_eval_mode() -> Result<GradCheckReport> {
    let mut st = store(&[("x", &[6, 3])], 13);
    st.insert_batchnorm("bn", 3).expect("fixed names");
    *st.buffer_mut("bn.num_batches_tracked").expect("fixed names") = Tensor::ones([1]);
    *st.buffer_mut("bn.running_var").expect("fixed names") = Tensor::new([3], vec![0.5, 2.0, 1.0]).expect("fixed names");
    let cfg = GradCheckConfig {
        mode: BatchNormMode::Eval,
        ..GradCheckConfig::default()
    };
    check_gradients(
        &st,
        |s| -> Result<Var> {
            let x = s.param("x")?;
            let y = s.batchnorm(x, "bn", 1)?;
            head(s, y)
        },
        &cfg,
    )
}

fn shape_ops_upsample_and_cross_entropy() -> Result<GradCheckReport> {
    let st = store(&[("x", &[2, 3, 4]), ("y", &[2, 3, 2])], 14);
    check_gradients(
        &st,
        |s| -> Result<Var> {
            let (x, y) = (s.param("x")?, s.param("y")?);
            let c = s.graph.concat(&[x, y], 2)?;
            let p = s.graph.permute(c, &[1, 0, 2])?;
            let n = s.graph.narrow(p, 2, 1, 4)?;
            let r = s.graph.reshape(n, &[3, 2, 4])?;
            let sa = s.graph.sum_axis(r, 1, true)?;
            let up = s.graph.upsample_bilinear(r, 2)?;
            let ce = s.graph.cross_entropy(up, &(0..24).map(|i| if i % 5 == 0 { IGNORE_LABEL } else { (i % 4) as u8 }).collect::<Vec<_>>())?;
            let h = head(s, sa)?;
            s.graph.add(h, ce)
        },
        &GradCheckConfig::default(),
    )
}

fn scalar_maps_and_reductions() -> Result<GradCheckReport> {
    let st = store(&[("x", &[3, 4]), ("y", &[4, 3])], 16);
    check_gradients(
        &st,
        |s| -> Result<Var> {
            let (x, y) = (s.param("x")?, s.param("y")?);
            let e = s.graph.unary(crate::UnaryOp::Exp, x)?;
            let sq = s.graph.square(x);
            let pos = s.graph.add_scalar(sq, 0.5);
            let r = s.graph.unary(crate::UnaryOp::Sqrt, pos)?;
            let m = s.graph.mul_scalar(r, 1.5);
            let n = s.graph.neg(e);
            let a = s.graph.add(m, n)?;
            let yt = s.graph.transpose(y)?;
            let b = s.graph.mul(a, yt)?;
            let c = s.graph.add(b, yt)?;
            let ma = s.graph.mean_axis(c, 0, false)?;
            let h = head(s, ma)?;
            let mall = s.graph.mean_all(c);
            s.graph.add(h, mall)
        },
        &GradCheckConfig::default(),
    )
}
