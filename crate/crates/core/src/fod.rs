//! Feature orthogonalization decoupling: per-pixel cosine similarity `M_i`
//! between the spatial and semantic streams and the penalty
//! `L_od = mean_i M_i²`, averaged over blocks.

use diffcore::{Graph, Scalar, Var};

use crate::aggregation::StreamPair;
use crate::config::{FodMode, FodStopGradient};
use crate::costvolume::COSINE_EPS;
use crate::error::{bad_config, Result};

fn streams<T: Scalar>(g: &mut Graph<T>, pair: &StreamPair, stop: FodStopGradient) -> Result<(Var, Var, [usize; 4])> {
    let (bd, ed) = (g.dims(pair.spatial).to_vec(), g.dims(pair.semantic).to_vec());
    if bd != ed || bd.len() != 4 {
        return Err(diffcore::DiffError::ShapeMismatch {
            op: "stream_similarity",
            lhs: bd,
            rhs: ed,
        }
        .into());
    }
    let (mut b, mut e) = (pair.spatial, pair.semantic);
    match stop {
        FodStopGradient::None => {}
        FodStopGradient::Spatial => b = g.detach(b),
        FodStopGradient::Semantic => e = g.detach(e),
    }
    Ok((b, e, [bd[0], bd[1], bd[2], bd[3]]))
}

/// Cosine per cell along the last axis of `[.., k]`-shaped views of both
/// streams.
fn cosine_rows<T: Scalar>(g: &mut Graph<T>, b: Var, e: Var, rows: &[usize]) -> Result<Var> {
    let b = g.reshape(b, rows)?;
    let e = g.reshape(e, rows)?;
    let axis = rows.len() - 1;
    let bn = g.normalize_l2(b, axis, T::lit(COSINE_EPS))?;
    let en = g.normalize_l2(e, axis, T::lit(COSINE_EPS))?;
    let p = g.mul(bn, en)?;
    Ok(g.sum_axis(p, axis, false)?)
}

/// `M` as `[H,W]`. In [`FodMode::Pixel`] each pixel's class and channel
/// axes are flattened into one vector; in [`FodMode::PerClass`] the channel
/// cosine of each (pixel, class) cell is averaged over classes.
pub fn stream_similarity<T: Scalar>(g: &mut Graph<T>, pair: &StreamPair, mode: FodMode) -> Result<Var> {
    let (b, e, [h, w, n, c]) = streams(g, pair, FodStopGradient::None)?;
    let m = match mode {
        FodMode::Pixel => cosine_rows(g, b, e, &[h * w, n * c])?,
        FodMode::PerClass => {
            let cells = cosine_rows(g, b, e, &[h * w, n, c])?;
            g.mean_axis(cells, 1, false)?
        }
    };
    Ok(g.reshape(m, &[h, w])?)
}

/// `mean M_i²` for one block. Per-class mode averages the squared cell
/// cosines rather than squaring their class mean.
pub fn fod_block_loss<T: Scalar>(g: &mut Graph<T>, pair: &StreamPair, mode: FodMode, stop: FodStopGradient) -> Result<Var> {
    let (b, e, [h, w, n, c]) = streams(g, pair, stop)?;
    let m = match mode {
        FodMode::Pixel => cosine_rows(g, b, e, &[h * w, n * c])?,
        FodMode::PerClass => cosine_rows(g, b, e, &[h * w, n, c])?,
    };
    let sq = g.square(m);
    Ok(g.mean_all(sq))
}

/// Uniform average of [`fod_block_loss`] over blocks.
pub fn fod_loss<T: Scalar>(g: &mut Graph<T>, pairs: &[StreamPair], mode: FodMode, stop: FodStopGradient) -> Result<Var> {
    if pairs.is_empty() {
        return Err(bad_config("num_blocks", "orthogonality loss needs at least one stream pair"));
    }
    let mut acc: Option<Var> = None;
    for pair in pairs {
        let l = fod_block_loss(g, pair, mode, stop)?;
        acc = Some(match acc {
            None => l,
            Some(a) => g.add(a, l)?,
        });
    }
    Ok(g.mul_scalar(acc.expect("non-empty"), T::lit(1.0 / pairs.len() as f64)))
}

/// Mean `|M_i|` before every update of [`descent_fixture`] and after the
/// last one.
#[derive(Clone, Debug, PartialEq)]
pub struct DescentTrace {
    pub mean_abs_m: Vec<f64>,
    pub loss: Vec<f64>,
}

/// Minimizes `L_od` alone over two streams `B = X·W_b`, `E = X·W_e` of one
/// fixed random input `X` of dims `[8,8,4,8]`, with AdamW (no weight decay)
/// at learning rate `lr`. `W_e` starts as a perturbed copy of `W_b`, so the
/// streams begin strongly coupled.
pub fn descent_fixture(seed: u64, steps: usize, lr: f64) -> Result<DescentTrace> {
    use diffcore::{BatchNormMode, ParamStore, Session, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::model::mean_abs;
    use crate::optim::{optimizer_step, AdamW, TrainState};

    let (h, w, n, c) = (8, 8, 4, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::<f64>::randn([h, w, n, c], 1.0, &mut rng);
    let wb = Tensor::<f64>::randn([c, c], 1.0 / (c as f64).sqrt(), &mut rng);
    let noise = Tensor::<f64>::randn([c, c], 0.3 / (c as f64).sqrt(), &mut rng);
    let we = Tensor::new(vec![c, c], wb.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect())?;
    let mut store = ParamStore::new();
    store.insert("spatial.weight", wb)?;
    store.insert("semantic.weight", we)?;
    let mut state = TrainState::new(store, seed);
    let hyper = AdamW {
        lr,
        weight_decay: 0.0,
        ..AdamW::default()
    };
    let mut trace = DescentTrace {
        mean_abs_m: Vec::with_capacity(steps + 1),
        loss: Vec::with_capacity(steps + 1),
    };
    for k in 0..=steps {
        let mut s = Session::new(&mut state.params, BatchNormMode::Train);
        let xv = s.input(x.clone());
        let wb = s.param("spatial.weight")?;
        let we = s.param("semantic.weight")?;
        let pair = StreamPair {
            spatial: s.graph.linear(xv, wb, None)?,
            semantic: s.graph.linear(xv, we, None)?,
            block: 1,
        };
        let m = stream_similarity(&mut s.graph, &pair, FodMode::Pixel)?;
        let loss = fod_loss(&mut s.graph, &[pair], FodMode::Pixel, FodStopGradient::None)?;
        trace.mean_abs_m.push(mean_abs(s.graph.value(m)));
        trace.loss.push(s.graph.value(loss).item());
        if k == steps {
            break;
        }
        let grads = s.gradients(loss)?;
        drop(s);
        optimizer_step(&mut state, &grads, &hyper)?;
    }
    Ok(trace)
}
