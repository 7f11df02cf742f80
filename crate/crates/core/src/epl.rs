//! Expert-driven perceptual learning: the two streams are concatenated,
//! parsed by `Z` independent experts, and recombined with per-location
//! softmax coefficients, `R = Σ_z P_z · D_z`.
//!
//! Parameter layout under `prefix`:
//!
//! ```text
//! {prefix}.experts.{z}.conv1.weight          1×1, 2C→C (stored as [2C, C])
//! {prefix}.experts.{z}.bn.{gamma,beta}       + running-statistics buffers
//! {prefix}.experts.{z}.conv2.{weight,bias}   3×3, C→C
//! {prefix}.mapper.fc1.{weight,bias}          1×1, 2C→C/4
//! {prefix}.mapper.fc2.{weight,bias}          1×1, C/4→Z
//! {prefix}.fuse.{weight,bias}                baseline fuse modes only
//! ```

use diffcore::{ParamStore, Scalar, Session, Var};
use rand::Rng;

use crate::aggregation::StreamPair;
use crate::config::FuseMode;
use crate::error::{bad_config, Result};
use crate::init;

/// `A = [B_n, E_n]` along the channel axis.
pub fn concat_streams<T: Scalar>(s: &mut Session<T>, pair: &StreamPair) -> Result<Var> {
    let (b, e) = (s.graph.dims(pair.spatial), s.graph.dims(pair.semantic));
    if b != e {
        return Err(diffcore::DiffError::ShapeMismatch {
            op: "concat_streams",
            lhs: b.to_vec(),
            rhs: e.to_vec(),
        }
        .into());
    }
    let axis = b.len() - 1;
    Ok(s.graph.concat(&[pair.spatial, pair.semantic], axis)?)
}

pub fn expert_prefix(prefix: &str, z: usize) -> String {
    format!("{prefix}.experts.{z}")
}

pub fn init_expert<T: Scalar, R: Rng>(store: &mut ParamStore<T>, prefix: &str, c: usize, rng: &mut R) -> Result<()> {
    init::linear_no_bias(store, &format!("{prefix}.conv1"), 2 * c, c, rng)?;
    store.insert_batchnorm(&format!("{prefix}.bn"), c)?;
    init::conv(store, &format!("{prefix}.conv2"), c, c, 3, rng)
}

/// `Υ_z`: 1×1 conv 2C→C, batch norm, 3×3 conv C→C, GeLU. The class axis is
/// folded into the batch for the spatial conv and for the BN statistics.
/// The first conv has no bias since batch norm subtracts it again.
pub fn expert_parse<T: Scalar>(s: &mut Session<T>, a: Var, prefix: &str) -> Result<Var> {
    let w = s.param(&format!("{prefix}.conv1.weight"))?;
    let x = s.graph.linear(a, w, None)?;
    let x = s.batchnorm(x, &format!("{prefix}.bn"), 3)?;
    let w = s.param(&format!("{prefix}.conv2.weight"))?;
    let b = s.param(&format!("{prefix}.conv2.bias"))?;
    let x = s.graph.conv2d_hwc(x, w, Some(b))?;
    Ok(s.graph.gelu(x))
}

pub fn init_mapper<T: Scalar, R: Rng>(store: &mut ParamStore<T>, prefix: &str, c: usize, z: usize, rng: &mut R) -> Result<()> {
    init::linear(store, &format!("{prefix}.fc1"), 2 * c, c / 4, rng)?;
    init::linear(store, &format!("{prefix}.fc2"), c / 4, z, rng)
}

/// `Θ`: 1×1 conv 2C→C/4, ReLU, 1×1 conv C/4→Z, softmax over Z, giving
/// `[H,W,N,Z]`.
pub fn coefficient_map<T: Scalar>(s: &mut Session<T>, a: Var, prefix: &str) -> Result<Var> {
    let w = s.param(&format!("{prefix}.fc1.weight"))?;
    let b = s.param(&format!("{prefix}.fc1.bias"))?;
    let h = s.graph.linear(a, w, Some(b))?;
    let h = s.graph.relu(h);
    let w = s.param(&format!("{prefix}.fc2.weight"))?;
    let b = s.param(&format!("{prefix}.fc2.bias"))?;
    let logits = s.graph.linear(h, w, Some(b))?;
    let axis = s.graph.dims(logits).len() - 1;
    Ok(s.graph.softmax(logits, axis)?)
}

/// `R = Σ_z P[..., z] · D_z`, the coefficient broadcast over channels and
/// the sum taken in expert order.
pub fn integrate<T: Scalar>(s: &mut Session<T>, experts: &[Var], p: Var) -> Result<Var> {
    let pd = s.graph.dims(p).to_vec();
    let axis = pd.len() - 1;
    if experts.is_empty() || pd[axis] != experts.len() {
        return Err(bad_config(
            "z",
            format!("{} expert outputs but coefficient field {pd:?}", experts.len()),
        ));
    }
    let mut acc: Option<Var> = None;
    for (z, &d) in experts.iter().enumerate() {
        let pz = s.graph.narrow(p, axis, z, 1)?;
        let term = s.graph.mul(d, pz)?;
        acc = Some(match acc {
            None => term,
            Some(r) => s.graph.add(r, term)?,
        });
    }
    Ok(acc.expect("non-empty"))
}

/// Parameters for one block's fusion stage.
pub fn init_fuse<T: Scalar, R: Rng>(store: &mut ParamStore<T>, prefix: &str, mode: FuseMode, c: usize, z: usize, rng: &mut R) -> Result<()> {
    if mode.uses_experts() {
        for k in 0..z {
            init_expert(store, &expert_prefix(prefix, k), c, rng)?;
        }
    }
    match mode {
        FuseMode::Epl => init_mapper(store, &format!("{prefix}.mapper"), c, z, rng),
        FuseMode::SingleConv => init::linear(store, &format!("{prefix}.fuse"), 2 * c, c, rng),
        FuseMode::Convolution => init::linear(store, &format!("{prefix}.fuse"), z * c, c, rng),
        FuseMode::Average | FuseMode::Addition => Ok(()),
    }
}

/// Result of fusing one stream pair.
#[derive(Clone, Debug)]
pub struct FuseOutput {
    pub output: Var,
    /// `D_z`, empty for the single-conv baseline.
    pub experts: Vec<Var>,
    /// `P`, present only for [`FuseMode::Epl`].
    pub coefficients: Option<Var>,
}

/// Fuses `B_n` and `E_n` into `V_{n+1}` with the given strategy.
pub fn fuse<T: Scalar>(s: &mut Session<T>, pair: &StreamPair, prefix: &str, mode: FuseMode, z: usize) -> Result<FuseOutput> {
    let a = concat_streams(s, pair)?;
    let experts = if mode.uses_experts() {
        (0..z)
            .map(|k| expert_parse(s, a, &expert_prefix(prefix, k)))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let mut coefficients = None;
    let output = match mode {
        FuseMode::Epl => {
            let p = coefficient_map(s, a, &format!("{prefix}.mapper"))?;
            coefficients = Some(p);
            integrate(s, &experts, p)?
        }
        FuseMode::SingleConv => {
            let w = s.param(&format!("{prefix}.fuse.weight"))?;
            let b = s.param(&format!("{prefix}.fuse.bias"))?;
            s.graph.linear(a, w, Some(b))?
        }
        FuseMode::Average | FuseMode::Addition => {
            let mut acc = experts[0];
            for &d in &experts[1..] {
                acc = s.graph.add(acc, d)?;
            }
            if mode == FuseMode::Average {
                acc = s.graph.mul_scalar(acc, T::lit(1.0 / z as f64));
            }
            acc
        }
        FuseMode::Convolution => {
            let axis = s.graph.dims(a).len() - 1;
            let stacked = s.graph.concat(&experts, axis)?;
            let w = s.param(&format!("{prefix}.fuse.weight"))?;
            let b = s.param(&format!("{prefix}.fuse.bias"))?;
            s.graph.linear(stacked, w, Some(b))?
        }
    };
    Ok(FuseOutput {
        output,
        experts,
        coefficients,
    })
}

/// `concat → Z experts → coefficient map → integrate`.
pub fn epl_forward<T: Scalar>(s: &mut Session<T>, pair: &StreamPair, prefix: &str, z: usize) -> Result<FuseOutput> {
    fuse(s, pair, prefix, FuseMode::Epl, z)
}

/// Closed-form trainable parameter count of one EPL instance with 1×1/3×3
/// expert kernels and a C/4-wide mapper:
/// `Z·(2C·C + 2C + 9C² + C) + (2C·C/4 + C/4 + C/4·Z + Z)`.
pub fn epl_param_count(c: usize, z: usize) -> usize {
    let q = c / 4;
    z * (2 * c * c + 2 * c + 9 * c * c + c) + (2 * c * q + q + q * z + z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use diffcore::{BatchNormMode, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn concat_orders_spatial_then_semantic() {
        let mut st = ParamStore::<f64>::new();
        let mut s = Session::new(&mut st, BatchNormMode::Train);
        let b = s.input(Tensor::zeros([2, 2, 3, 4]));
        let e = s.input(Tensor::ones([2, 2, 3, 4]));
        let a = concat_streams(&mut s, &StreamPair { spatial: b, semantic: e, block: 1 }).unwrap();
        assert_eq!(s.graph.dims(a), &[2, 2, 3, 8]);
        for row in s.graph.value(a).data().chunks(8) {
            assert_eq!(row, &[0., 0., 0., 0., 1., 1., 1., 1.]);
        }
        let back_b = s.graph.narrow(a, 3, 0, 4).unwrap();
        let back_e = s.graph.narrow(a, 3, 4, 4).unwrap();
        assert_eq!(s.graph.value(back_b), s.graph.value(b));
        assert_eq!(s.graph.value(back_e), s.graph.value(e));
        let odd = s.input(Tensor::ones([2, 2, 3, 5]));
        assert!(concat_streams(&mut s, &StreamPair { spatial: b, semantic: odd, block: 1 }).is_err());
    }

    #[test]
    fn zero_expert_in_eval_mode_outputs_zero() {
        let mut st = ParamStore::<f64>::new();
        init_expert(&mut st, "x", 4, &mut rng(0)).unwrap();
        init::zero_under(&mut st, "x.conv");
        *st.buffer_mut("x.bn.num_batches_tracked").unwrap() = Tensor::ones([1]);
        let mut s = Session::new(&mut st, BatchNormMode::Eval);
        let a = s.input(Tensor::randn([2, 2, 3, 8], 1.0, &mut rng(1)));
        let d = expert_parse(&mut s, a, "x").unwrap();
        assert!(s.graph.value(d).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn differently_seeded_experts_disagree() {
        let mut st = ParamStore::<f64>::new();
        init_expert(&mut st, "x0", 4, &mut rng(0)).unwrap();
        init_expert(&mut st, "x1", 4, &mut rng(1)).unwrap();
        let mut s = Session::new(&mut st, BatchNormMode::Train);
        let a = s.input(Tensor::randn([2, 2, 3, 8], 1.0, &mut rng(2)));
        let d0 = expert_parse(&mut s, a, "x0").unwrap();
        let d1 = expert_parse(&mut s, a, "x1").unwrap();
        assert!(s.graph.value(d0).max_abs_diff(s.graph.value(d1)) > 1e-3);
    }

    #[test]
    fn mapper_degenerate_cases() {
        for z in [1, 3] {
            let mut st = ParamStore::<f64>::new();
            init_mapper(&mut st, "m", 8, z, &mut rng(0)).unwrap();
            init::zero_under(&mut st, "m.fc2");
            let mut s = Session::new(&mut st, BatchNormMode::Train);
            let a = s.input(Tensor::randn([2, 2, 2, 16], 1.0, &mut rng(1)));
            let p = coefficient_map(&mut s, a, "m").unwrap();
            assert_eq!(s.graph.dims(p), &[2, 2, 2, z]);
            for v in s.graph.value(p).data() {
                assert!((v - 1.0 / z as f64).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn integrate_identity_and_mean() {
        let mut st = ParamStore::<f64>::new();
        let mut s = Session::new(&mut st, BatchNormMode::Train);
        let d1t = Tensor::randn([2, 2, 2, 3], 1.0, &mut rng(3));
        let d2t = Tensor::randn([2, 2, 2, 3], 1.0, &mut rng(4));
        let d1 = s.input(d1t.clone());
        let d2 = s.input(d2t.clone());
        let one = s.input(Tensor::ones([2, 2, 2, 1]));
        let r = integrate(&mut s, &[d1], one).unwrap();
        assert_eq!(s.graph.value(r), &d1t);
        let half = s.input(Tensor::full([2, 2, 2, 2], 0.5));
        let r = integrate(&mut s, &[d1, d2], half).unwrap();
        for ((r, a), b) in s.graph.value(r).data().iter().zip(d1t.data()).zip(d2t.data()) {
            assert!((r - (a + b) / 2.0).abs() < 1e-15);
        }
        assert!(integrate(&mut s, &[d1], half).is_err());
    }

    fn fused(mode: FuseMode, z: usize, zero_input: bool) -> (Tensor<f64>, Vec<Tensor<f64>>, ParamStore<f64>) {
        let mut st = ParamStore::<f64>::new();
        init_fuse(&mut st, "f", mode, 4, z, &mut rng(7)).unwrap();
        let snapshot = st.clone();
        let mut s = Session::new(&mut st, BatchNormMode::Train);
        let mk = |seed| if zero_input { Tensor::zeros([2, 2, 2, 4]) } else { Tensor::randn([2, 2, 2, 4], 1.0, &mut rng(seed)) };
        let b = s.input(mk(8));
        let e = s.input(mk(9));
        let out = fuse(&mut s, &StreamPair { spatial: b, semantic: e, block: 1 }, "f", mode, z).unwrap();
        let experts = out.experts.iter().map(|&d| s.graph.value(d).clone()).collect();
        (s.graph.value(out.output).clone(), experts, snapshot)
    }

    #[test]
    fn baseline_fuse_modes() {
        let (avg, d, _) = fused(FuseMode::Average, 2, false);
        let (add, _, _) = fused(FuseMode::Addition, 2, false);
        for i in 0..avg.numel() {
            let s = d[0].data()[i] + d[1].data()[i];
            assert!((add.data()[i] - s).abs() < 1e-15);
            assert!((avg.data()[i] - s / 2.0).abs() < 1e-15);
        }
        let (one, d, _) = fused(FuseMode::Average, 1, false);
        assert_eq!(one, d[0]);

        let (single, d, st) = fused(FuseMode::SingleConv, 3, true);
        assert!(d.is_empty());
        let bias = st.get("f.fuse.bias").unwrap();
        for row in single.data().chunks(4) {
            assert_eq!(row, bias.data());
        }
        let (conv, d, st) = fused(FuseMode::Convolution, 3, false);
        assert_eq!(d.len(), 3);
        assert_eq!(st.get("f.fuse.weight").unwrap().dims(), &[12, 4]);
        assert_eq!(conv.dims(), &[2, 2, 2, 4]);
    }

    #[test]
    fn param_count_matches_store() {
        for (c, z) in [(8, 1), (8, 4), (16, 3), (64, 4)] {
            let mut st = ParamStore::<f32>::new();
            init_fuse(&mut st, "epl", FuseMode::Epl, c, z, &mut rng(0)).unwrap();
            assert_eq!(st.param_count(), epl_param_count(c, z), "c={c} z={z}");
        }
    }
}
