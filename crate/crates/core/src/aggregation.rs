//! Spatial aggregation Φ (windowed softmax attention over the H×W grid, one
//! class at a time) and class aggregation Γ (linear attention over the N
//! class tokens, one pixel at a time), plus serial and parallel wiring.
//!
//! Both are pre-norm transformer blocks on channel-last `[H,W,N,C]` tensors:
//! `x + Attn(LN(x))` followed by `x + MLP(LN(x))` with hidden width `2C` and
//! GeLU. Parameters of a block under `prefix`:
//!
//! ```text
//! {prefix}.ln1.{gamma,beta}   {prefix}.qkv.{weight,bias}   {prefix}.proj.{weight,bias}
//! {prefix}.ln2.{gamma,beta}   {prefix}.fc1.{weight,bias}   {prefix}.fc2.{weight,bias}
//! ```
//!
//! Under softmax attention a key bias only adds the same constant to every
//! score of a query, so Φ's `qkv.bias` holds the query and value parts
//! (`2C`) and Γ's the full `3C`.

use diffcore::{ParamStore, Scalar, Session, Tensor, Var};
use rand::Rng;

use crate::config::AttentionConfig;
use crate::error::{bad_config, Result};
use crate::init;

/// The two streams of one parallel block, or `Φ` output and the following
/// `Γ` output of a serial block.
#[derive(Clone, Copy, Debug)]
pub struct StreamPair {
    /// `B_n`.
    pub spatial: Var,
    /// `E_n`.
    pub semantic: Var,
    /// 1-based block index.
    pub block: usize,
}

pub fn init_transformer<T: Scalar, R: Rng>(store: &mut ParamStore<T>, prefix: &str, c: usize, key_bias: bool, rng: &mut R) -> Result<()> {
    init::layernorm(store, &format!("{prefix}.ln1"), c)?;
    init::linear(store, &format!("{prefix}.qkv"), c, 3 * c, rng)?;
    if !key_bias {
        let b = store.get_mut(&format!("{prefix}.qkv.bias")).expect("just inserted");
        let kept: Vec<T> = b.data()[..c].iter().chain(&b.data()[2 * c..]).copied().collect();
        *b = Tensor::new(vec![2 * c], kept)?;
    }
    init::linear(store, &format!("{prefix}.proj"), c, c, rng)?;
    init::layernorm(store, &format!("{prefix}.ln2"), c)?;
    init::linear(store, &format!("{prefix}.fc1"), c, 2 * c, rng)?;
    init::linear(store, &format!("{prefix}.fc2"), 2 * c, c, rng)?;
    Ok(())
}

/// Parameters of one serial or parallel block: `{prefix}.spatial` and
/// `{prefix}.class`.
pub fn init_block<T: Scalar, R: Rng>(store: &mut ParamStore<T>, prefix: &str, c: usize, rng: &mut R) -> Result<()> {
    init_transformer(store, &format!("{prefix}.spatial"), c, false, rng)?;
    init_transformer(store, &format!("{prefix}.class"), c, true, rng)
}

/// Linear map; the bias is optional in the store.
fn affine<T: Scalar>(s: &mut Session<T>, x: Var, prefix: &str) -> Result<Var> {
    let w = s.param(&format!("{prefix}.weight"))?;
    let bias = format!("{prefix}.bias");
    let b = match s.store().get(&bias) {
        Some(_) => Some(s.param(&bias)?),
        None => None,
    };
    Ok(s.graph.linear(x, w, b)?)
}

fn layernorm<T: Scalar>(s: &mut Session<T>, x: Var, prefix: &str) -> Result<Var> {
    let g = s.param(&format!("{prefix}.gamma"))?;
    let b = s.param(&format!("{prefix}.beta"))?;
    Ok(s.graph.layernorm(x, g, b)?)
}

fn residual<T: Scalar>(s: &mut Session<T>, x: Var, y: Var, cfg: &AttentionConfig) -> Result<Var> {
    if cfg.residual {
        Ok(s.graph.add(x, y)?)
    } else {
        Ok(y)
    }
}

fn check_embedding<T: Scalar>(s: &Session<T>, v: Var, cfg: &AttentionConfig) -> Result<[usize; 4]> {
    let d = s.graph.dims(v);
    if d.len() != 4 {
        return Err(bad_config("c", format!("expected [H,W,N,C] input, got {d:?}")));
    }
    if cfg.heads == 0 || !d[3].is_multiple_of(cfg.heads) {
        return Err(bad_config("attention.heads", format!("{} does not divide C = {}", cfg.heads, d[3])));
    }
    Ok([d[0], d[1], d[2], d[3]])
}

/// Shared tail of both blocks: projection, residual, then the MLP sub-block.
fn finish_block<T: Scalar>(s: &mut Session<T>, x: Var, attn: Var, prefix: &str, cfg: &AttentionConfig) -> Result<Var> {
    let o = affine(s, attn, &format!("{prefix}.proj"))?;
    let x = residual(s, x, o, cfg)?;
    let n = layernorm(s, x, &format!("{prefix}.ln2"))?;
    let h = affine(s, n, &format!("{prefix}.fc1"))?;
    let h = s.graph.gelu(h);
    let m = affine(s, h, &format!("{prefix}.fc2"))?;
    residual(s, x, m, cfg)
}

/// Φ: non-overlapping `window×window` multi-head self-attention on the H×W
/// grid with each class slice as an independent batch entry.
pub fn spatial_aggregate<T: Scalar>(s: &mut Session<T>, v: Var, prefix: &str, cfg: &AttentionConfig) -> Result<Var> {
    let [h, w, n, c] = check_embedding(s, v, cfg)?;
    let win = cfg.window;
    if win == 0 || h % win != 0 || w % win != 0 {
        return Err(bad_config("attention.window", format!("{win} does not divide the {h}x{w} grid")));
    }
    let (heads, hd) = (cfg.heads, c / cfg.heads);
    let (hb, wb) = (h / win, w / win);
    let tokens = win * win;
    let batch = n * hb * wb * heads;

    let x = layernorm(s, v, &format!("{prefix}.ln1"))?;
    let w_qkv = s.param(&format!("{prefix}.qkv.weight"))?;
    let b_qv = s.param(&format!("{prefix}.qkv.bias"))?;
    let g = &mut s.graph;
    let (bq, bv) = (g.narrow(b_qv, 0, 0, c)?, g.narrow(b_qv, 0, c, c)?);
    let bk = g.constant(Tensor::zeros([c]));
    let bias = g.concat(&[bq, bk, bv], 0)?;
    let qkv = g.linear(x, w_qkv, Some(bias))?;
    // [hb, wy, wb, wx, n, 3, heads, hd] -> [3, n, hb, wb, heads, wy, wx, hd]
    let qkv = g.reshape(qkv, &[hb, win, wb, win, n, 3, heads, hd])?;
    let qkv = g.permute(qkv, &[5, 4, 0, 2, 6, 1, 3, 7])?;
    let qkv = g.reshape(qkv, &[3, batch, tokens, hd])?;
    let mut part = |i: usize| -> Result<Var> {
        let t = g.narrow(qkv, 0, i, 1)?;
        Ok(g.reshape(t, &[batch, tokens, hd])?)
    };
    let (q, k, val) = (part(0)?, part(1)?, part(2)?);
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.mul_scalar(scores, T::lit(1.0 / (hd as f64).sqrt()));
    let att = g.softmax(scores, 2)?;
    let out = g.matmul(att, val)?;
    // [n, hb, wb, heads, wy, wx, hd] -> [hb, wy, wb, wx, n, heads, hd]
    let out = g.reshape(out, &[n, hb, wb, heads, win, win, hd])?;
    let out = g.permute(out, &[1, 4, 2, 5, 0, 3, 6])?;
    let out = g.reshape(out, &[h, w, n, c])?;
    finish_block(s, v, out, prefix, cfg)
}

/// Γ: multi-head linear attention `φ(Q)(φ(K)ᵀV) / (φ(Q)·Σφ(K))` with
/// `φ = elu + 1` over the N class tokens, each pixel an independent batch
/// entry.
pub fn class_aggregate<T: Scalar>(s: &mut Session<T>, v: Var, prefix: &str, cfg: &AttentionConfig) -> Result<Var> {
    let [h, w, n, c] = check_embedding(s, v, cfg)?;
    let (heads, hd) = (cfg.heads, c / cfg.heads);
    let batch = h * w * heads;

    let x = layernorm(s, v, &format!("{prefix}.ln1"))?;
    let qkv = affine(s, x, &format!("{prefix}.qkv"))?;
    let g = &mut s.graph;
    // [hw, n, 3, heads, hd] -> [3, hw, heads, n, hd]
    let qkv = g.reshape(qkv, &[h * w, n, 3, heads, hd])?;
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
    let qkv = g.reshape(qkv, &[3, batch, n, hd])?;
    let mut part = |i: usize| -> Result<Var> {
        let t = g.narrow(qkv, 0, i, 1)?;
        Ok(g.reshape(t, &[batch, n, hd])?)
    };
    let (q, k, val) = (part(0)?, part(1)?, part(2)?);
    let fq = g.elu_plus_one(q);
    let fk = g.elu_plus_one(k);
    let fkt = g.transpose(fk)?;
    let kv = g.matmul(fkt, val)?;
    let num = g.matmul(fq, kv)?;
    let ksum = g.sum_axis(fk, 1, true)?;
    let ksum_t = g.transpose(ksum)?;
    let den = g.matmul(fq, ksum_t)?;
    let out = g.div(num, den)?;
    // [hw, heads, n, hd] -> [hw, n, heads, hd]
    let out = g.reshape(out, &[h * w, heads, n, hd])?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    let out = g.reshape(out, &[h, w, n, c])?;
    finish_block(s, v, out, prefix, cfg)
}

/// `Γ(Φ(V))`. The returned pair holds the Φ output and the Γ output, the
/// latter being `V_{n+1}`.
pub fn serial_block<T: Scalar>(s: &mut Session<T>, v: Var, prefix: &str, cfg: &AttentionConfig, block: usize) -> Result<StreamPair> {
    let b = spatial_aggregate(s, v, &format!("{prefix}.spatial"), cfg)?;
    let e = class_aggregate(s, b, &format!("{prefix}.class"), cfg)?;
    Ok(StreamPair {
        spatial: b,
        semantic: e,
        block,
    })
}

/// `B = Φ(V)`, `E = Γ(V)` with disjoint parameter sets.
pub fn parallel_block<T: Scalar>(s: &mut Session<T>, v: Var, prefix: &str, cfg: &AttentionConfig, block: usize) -> Result<StreamPair> {
    let b = spatial_aggregate(s, v, &format!("{prefix}.spatial"), cfg)?;
    let e = class_aggregate(s, v, &format!("{prefix}.class"), cfg)?;
    Ok(StreamPair {
        spatial: b,
        semantic: e,
        block,
    })
}
