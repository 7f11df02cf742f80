//! Finite-difference cases through the aggregation blocks, every fusion
//! mode, every orthogonality-loss variant and the full objective of both
//! architectures, in double precision. Cases with batch norm in training
//! mode in their path carry the looser tolerance `1e-3`.

use diffcore::{check_gradients, DiffError, GradCheckConfig, GradCheckReport, ParamStore, Session, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{class_aggregate, init_block, spatial_aggregate, StreamPair};
use crate::config::{Architecture, AttentionConfig, FodMode, FodStopGradient, FuseMode, ModelConfig, TaskConfig};
use crate::costvolume::synthesize_task;
use crate::epl::{expert_parse, fuse, init_expert, init_fuse};
use crate::error::{PcaError, Result};
use crate::fod::fod_loss;
use crate::model::{init_model, objective};

/// Tolerance for paths through batch norm in training mode.
pub const BATCHNORM_TOL: f64 = 1e-3;

pub struct Case {
    pub name: String,
    pub check: Box<dyn Fn() -> Result<GradCheckReport>>,
}

fn case(name: impl Into<String>, check: impl Fn() -> Result<GradCheckReport> + 'static) -> Case {
    Case {
        name: name.into(),
        check: Box::new(check),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random-weighted sum so every output entry contributes.
fn head(s: &mut Session<f64>, y: Var) -> std::result::Result<Var, DiffError> {
    let w = Tensor::randn(s.graph.dims(y).to_vec(), 1.0, &mut rng(99));
    let w = s.input(w);
    let p = s.graph.mul(y, w)?;
    Ok(s.graph.sum_all(p))
}

fn with_inputs(mut st: ParamStore<f64>, inputs: &[(&str, &[usize])], seed: u64) -> Result<ParamStore<f64>> {
    let mut r = rng(seed);
    for (name, dims) in inputs {
        st.insert(*name, Tensor::randn(dims.to_vec(), 1.0, &mut r))?;
    }
    Ok(st)
}

/// Carries model errors through the checker's closure type.
fn lower(e: PcaError) -> DiffError {
    match e {
        PcaError::Diff(d) => d,
        other => DiffError::InvalidArgument {
            op: "pcaagg",
            detail: other.to_string(),
        },
    }
}

/// The tiny end-to-end configuration: `H=W=4, N=3, C=8, Z=2`.
pub fn tiny_config(architecture: Architecture) -> ModelConfig {
    ModelConfig {
        h: 4,
        w: 4,
        n: 3,
        c: 8,
        c_enc: 8,
        z: 2,
        architecture,
        attention: AttentionConfig {
            heads: 2,
            window: 2,
            residual: true,
        },
        ..ModelConfig::default()
    }
}

fn aggregation() -> Result<GradCheckReport> {
    let mut st = ParamStore::new();
    init_block(&mut st, "b", 8, &mut rng(1))?;
    let st = with_inputs(st, &[("x", &[4, 4, 3, 8])], 2)?;
    let cfg = AttentionConfig {
        heads: 2,
        window: 2,
        residual: true,
    };
    Ok(check_gradients(
        &st,
        |s| {
            let x = s.param("x")?;
            let b = spatial_aggregate(s, x, "b.spatial", &cfg).map_err(lower)?;
            let e = class_aggregate(s, x, "b.class", &cfg).map_err(lower)?;
            let both = s.graph.concat(&[b, e], 3)?;
            head(s, both)
        },
        &GradCheckConfig::default(),
    )?)
}

fn single_expert() -> Result<GradCheckReport> {
    let mut st = ParamStore::new();
    init_expert(&mut st, "ex", 4, &mut rng(3))?;
    let st = with_inputs(st, &[("a", &[4, 4, 3, 8])], 4)?;
    Ok(check_gradients(
        &st,
        |s| {
            let a = s.param("a")?;
            let y = expert_parse(s, a, "ex").map_err(lower)?;
            head(s, y)
        },
        &GradCheckConfig::default().with_tol(BATCHNORM_TOL),
    )?)
}

fn fusion(mode: FuseMode) -> Result<GradCheckReport> {
    let mut st = ParamStore::new();
    init_fuse(&mut st, "f", mode, 8, 2, &mut rng(5))?;
    let st = with_inputs(st, &[("b", &[4, 4, 2, 8]), ("e", &[4, 4, 2, 8])], 6)?;
    let tol = if mode.uses_experts() { BATCHNORM_TOL } else { 1e-4 };
    Ok(check_gradients(
        &st,
        |s| {
            let pair = StreamPair {
                spatial: s.param("b")?,
                semantic: s.param("e")?,
                block: 1,
            };
            let out = fuse(s, &pair, "f", mode, 2).map_err(lower)?;
            head(s, out.output)
        },
        &GradCheckConfig::default().with_tol(tol),
    )?)
}

fn orthogonality(mode: FodMode, stop: FodStopGradient) -> Result<GradCheckReport> {
    let st = with_inputs(
        ParamStore::new(),
        &[("b1", &[3, 3, 2, 4]), ("e1", &[3, 3, 2, 4]), ("b2", &[3, 3, 2, 4]), ("e2", &[3, 3, 2, 4])],
        7,
    )?;
    let leaves: &[&str] = match stop {
        FodStopGradient::None => &["b1", "e1", "b2", "e2"],
        FodStopGradient::Spatial => &["e1", "e2"],
        FodStopGradient::Semantic => &["b1", "b2"],
    };
    Ok(check_gradients(
        &st,
        |s| {
            let pairs = [
                StreamPair {
                    spatial: s.param("b1")?,
                    semantic: s.param("e1")?,
                    block: 1,
                },
                StreamPair {
                    spatial: s.param("b2")?,
                    semantic: s.param("e2")?,
                    block: 2,
                },
            ];
            fod_loss(&mut s.graph, &pairs, mode, stop).map_err(lower)
        },
        &GradCheckConfig::default().with_leaves(leaves),
    )?)
}

/// Total loss of the tiny configuration with respect to every parameter.
pub fn end_to_end(architecture: Architecture) -> Result<GradCheckReport> {
    let cfg = tiny_config(architecture);
    let task = synthesize_task(
        &cfg,
        &TaskConfig {
            sigma: 0.3,
            ..TaskConfig::default()
        },
        0,
    )?;
    let st = init_model::<f64>(&cfg, 0)?;
    // only the parallel experts contain batch norm
    let tol = match architecture {
        Architecture::Parallel => BATCHNORM_TOL,
        Architecture::Serial => 1e-4,
    };
    Ok(check_gradients(
        &st,
        |s| -> std::result::Result<Var, DiffError> { Ok(objective(s, &cfg, &task).map_err(lower)?.total) },
        &GradCheckConfig::default().with_tol(tol),
    )?)
}

pub fn cases() -> Vec<Case> {
    let mut out = vec![
        case("spatial and class aggregation", aggregation),
        case("single expert with batch norm", single_expert),
    ];
    for mode in [FuseMode::Epl, FuseMode::SingleConv, FuseMode::Average, FuseMode::Addition, FuseMode::Convolution] {
        out.push(case(format!("fusion ({mode})"), move || fusion(mode)));
    }
    for mode in [FodMode::Pixel, FodMode::PerClass] {
        for stop in [FodStopGradient::None, FodStopGradient::Spatial, FodStopGradient::Semantic] {
            out.push(case(format!("orthogonality loss ({mode:?}, stop {stop:?})"), move || orthogonality(mode, stop)));
        }
    }
    for arch in [Architecture::Parallel, Architecture::Serial] {
        out.push(case(format!("end-to-end total loss ({arch})"), move || end_to_end(arch)));
    }
    out
}
