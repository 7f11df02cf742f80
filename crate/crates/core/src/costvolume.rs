//! Cosine-similarity cost volume, its C-channel embedding, and synthetic
//! encoder outputs with controllable class structure.

use std::fs;
use std::path::Path;

use diffcore::{Graph, ParamStore, Scalar, Session, Tensor, Var};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ModelConfig, TaskConfig};
use crate::error::{bad_config, Result};
use crate::init;

pub const COSINE_EPS: f64 = 1e-8;

/// `S(i,j) = F^v(i)·F^t(j) / (‖F^v(i)‖‖F^t(j)‖)` for visual `[H,W,C_enc]` and
/// text `[N,C_enc]`, giving `[H,W,N]`.
pub fn build_cost_volume<T: Scalar>(g: &mut Graph<T>, visual: Var, text: Var) -> Result<Var> {
    let (vd, td) = (g.dims(visual).to_vec(), g.dims(text).to_vec());
    if vd.len() != 3 || td.len() != 2 || vd[2] != td[1] {
        return Err(bad_config(
            "c_enc",
            format!("visual dims {vd:?} and text dims {td:?} disagree on channel width"),
        ));
    }
    let eps = T::lit(COSINE_EPS);
    let vn = g.normalize_l2(visual, 2, eps)?;
    let tn = g.normalize_l2(text, 1, eps)?;
    let tt = g.transpose(tn)?;
    Ok(g.linear(vn, tt, None)?)
}

/// Plain-tensor convenience wrapper around [`build_cost_volume`].
pub fn cost_volume<T: Scalar>(visual: &Tensor<T>, text: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.constant(visual.clone());
    let t = g.constant(text.clone());
    let s = build_cost_volume(&mut g, v, t)?;
    Ok(g.value(s).clone())
}

/// 1→C pointwise conv of `S` `[H,W,N]` into `V₁` `[H,W,N,C]`.
pub fn embed_cost_volume<T: Scalar>(s: &mut Session<T>, cost: Var, prefix: &str) -> Result<Var> {
    let mut dims = s.graph.dims(cost).to_vec();
    dims.push(1);
    let x = s.graph.reshape(cost, &dims)?;
    let w = s.param(&format!("{prefix}.weight"))?;
    let b = s.param(&format!("{prefix}.bias"))?;
    Ok(s.graph.linear(x, w, Some(b))?)
}

pub fn init_embedding<T: Scalar, R: Rng>(store: &mut ParamStore<T>, prefix: &str, c: usize, rng: &mut R) -> Result<()> {
    init::linear(store, prefix, 1, c, rng)
}

/// Synthetic stand-in for encoder outputs and ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    /// `F^v`, `[H,W,C_enc]`.
    pub visual: Tensor<f32>,
    /// `F^t`, `[N,C_enc]`.
    pub text: Tensor<f32>,
    pub class_names: Vec<String>,
    /// Row-major `[H_lbl, W_lbl]` labels.
    pub labels: Vec<u8>,
    pub label_dims: (usize, usize),
    pub seen: Vec<bool>,
    pub seed: u64,
    pub sigma: f64,
    pub rho: f64,
    pub text_noise: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskMeta {
    seed: u64,
    sigma: f64,
    rho: f64,
    text_noise: f64,
    seen: Vec<bool>,
    class_names: Vec<String>,
}

impl SyntheticTask {
    pub fn num_classes(&self) -> usize {
        self.seen.len()
    }

    /// Labels with unseen classes replaced by the ignore value.
    pub fn training_labels(&self) -> Vec<u8> {
        self.labels
            .iter()
            .map(|&l| {
                if l != diffcore::IGNORE_LABEL && !self.seen[l as usize] {
                    diffcore::IGNORE_LABEL
                } else {
                    l
                }
            })
            .collect()
    }

    fn label_tensor(&self) -> Tensor<f32> {
        let (h, w) = self.label_dims;
        Tensor::new([h, w], self.labels.iter().map(|&l| l as f32).collect()).expect("label dims")
    }

    fn meta(&self) -> TaskMeta {
        TaskMeta {
            seed: self.seed,
            sigma: self.sigma,
            rho: self.rho,
            text_noise: self.text_noise,
            seen: self.seen.clone(),
            class_names: self.class_names.clone(),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        diffcore::ptns::save(dir.join("visual.ptns"), &self.visual)?;
        diffcore::ptns::save(dir.join("text.ptns"), &self.text)?;
        diffcore::ptns::save(dir.join("labels.ptns"), &self.label_tensor())?;
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&self.meta())?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let visual = diffcore::ptns::load::<f32>(dir.join("visual.ptns"))?;
        let text = diffcore::ptns::load::<f32>(dir.join("text.ptns"))?;
        let labels = diffcore::ptns::load::<f32>(dir.join("labels.ptns"))?;
        let meta: TaskMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        if labels.rank() != 2 {
            return Err(bad_config("labels", format!("expected rank 2, got {:?}", labels.dims())));
        }
        let label_dims = (labels.dims()[0], labels.dims()[1]);
        let mut out = Vec::with_capacity(labels.numel());
        for &v in labels.data() {
            if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                return Err(bad_config("labels", format!("non-integer label value {v}")));
            }
            out.push(v as u8);
        }
        Ok(SyntheticTask {
            visual,
            text,
            class_names: meta.class_names,
            labels: out,
            label_dims,
            seen: meta.seen,
            seed: meta.seed,
            sigma: meta.sigma,
            rho: meta.rho,
            text_noise: meta.text_noise,
        })
    }

    /// SHA-256 over the serialized tensors and metadata.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(diffcore::ptns::encode(&self.visual));
        h.update(diffcore::ptns::encode(&self.text));
        h.update(diffcore::ptns::encode(&self.label_tensor()));
        h.update(serde_json::to_vec(&self.meta()).expect("meta serializes"));
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `n` orthonormal rows of width `c_enc` from the QR factor of a Gaussian
/// matrix, as `[n, c_enc]`.
pub fn orthonormal_prototypes<R: Rng>(n: usize, c_enc: usize, rng: &mut R) -> Result<Tensor<f64>> {
    if n > c_enc {
        return Err(bad_config(
            "n",
            format!("{n} classes cannot have orthogonal prototypes in {c_enc} dimensions"),
        ));
    }
    let g = Tensor::<f64>::randn([c_enc, n], 1.0, rng);
    let m = DMatrix::from_row_slice(c_enc, n, g.data());
    let q = m.qr().q();
    Ok(Tensor::from_fn([n, c_enc], |ix| q[(ix[1], ix[0])]))
}

/// Argmax over `n` Gaussian-smoothed white-noise fields on an `h×w` grid.
/// `rho = 0` gives independent labels per cell.
pub fn region_labels<R: Rng>(h: usize, w: usize, n: usize, rho: f64, rng: &mut R) -> Vec<u8> {
    let fields: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let noise = Tensor::<f64>::randn([h, w], 1.0, rng).into_data();
            smooth(&noise, h, w, rho)
        })
        .collect();
    (0..h * w)
        .map(|i| {
            let mut best = 0;
            for k in 1..n {
                if fields[k][i] > fields[best][i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

/// Separable Gaussian blur with the kernel truncated at 3σ and renormalized
/// at the borders.
fn smooth(field: &[f64], h: usize, w: usize, rho: f64) -> Vec<f64> {
    if rho <= 0.0 {
        return field.to_vec();
    }
    let r = (3.0 * rho).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * rho * rho)).exp()).collect();
    let pass = |src: &[f64], along_rows: bool| {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (ki, d) in (-r..=r).enumerate() {
                    let (yy, xx) = if along_rows {
                        (y as isize, x as isize + d)
                    } else {
                        (y as isize + d, x as isize)
                    };
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    acc += kernel[ki] * src[yy as usize * w + xx as usize];
                    norm += kernel[ki];
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    let tmp = pass(field, true);
    pass(&tmp, false)
}

/// Deterministic synthetic task: orthonormal class prototypes, a smoothed
/// region label map nearest-upsampled by `cfg.upsample`, visual embedding =
/// prototype of the cell's label plus `σ`-noise.
pub fn synthesize_task(cfg: &ModelConfig, task: &TaskConfig, seed: u64) -> Result<SyntheticTask> {
    task.validate()?;
    if cfg.n < 2 {
        return Err(bad_config("n", "at least two classes are required"));
    }
    let (h, w, n, c_enc, u) = (cfg.h, cfg.w, cfg.n, cfg.c_enc, cfg.upsample);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protos = orthonormal_prototypes(n, c_enc, &mut rng)?;
    let low = region_labels(h, w, n, task.rho, &mut rng);

    let noise = Tensor::<f64>::randn([h, w, c_enc], 1.0, &mut rng);
    let visual = Tensor::from_fn([h, w, c_enc], |ix| {
        let k = low[ix[0] * w + ix[1]] as usize;
        (protos.get(&[k, ix[2]]) + task.sigma * noise.get(ix)) as f32
    });
    let text_noise = Tensor::<f64>::randn([n, c_enc], 1.0, &mut rng);
    let text = Tensor::from_fn([n, c_enc], |ix| (protos.get(ix) + task.text_noise * text_noise.get(ix)) as f32);

    let seen = if task.split_enabled() {
        let n_seen = ((task.seen_fraction * n as f64).round() as usize).clamp(1, n - 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut seen = vec![false; n];
        for &k in &order[..n_seen] {
            seen[k] = true;
        }
        seen
    } else {
        vec![true; n]
    };

    let (hl, wl) = (h * u, w * u);
    let labels = (0..hl * wl).map(|i| low[(i / wl / u) * w + (i % wl) / u]).collect();
    Ok(SyntheticTask {
        visual,
        text,
        class_names: (0..n).map(|k| format!("class{k}")).collect(),
        labels,
        label_dims: (hl, wl),
        seen,
        seed,
        sigma: task.sigma,
        rho: task.rho,
        text_noise: task.text_noise,
    })
}

/// Per-pixel argmax over the class axis of a `[H,W,N]` tensor.
pub fn argmax_last<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let n = *t.dims().last().expect("rank >= 1");
    t.data()
        .chunks(n)
        .map(|row| {
            let mut best = 0;
            for k in 1..n {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use diffcore::BatchNormMode;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            h: 8,
            w: 8,
            n: 4,
            c_enc: 8,
            upsample: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn orthogonal_and_self_similar_pairs() {
        let v = Tensor::new([1, 2, 2], vec![1.0, 0.0, 0.3, 0.4]).unwrap();
        let t = Tensor::new([2, 2], vec![0.0, 1.0, 0.3, 0.4]).unwrap();
        let s = cost_volume::<f64>(&v, &t).unwrap();
        assert!(s.get(&[0, 0, 0]).abs() < 1e-12);
        assert!((s.get(&[0, 1, 1]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let v = Tensor::<f64>::zeros([2, 2, 3]);
        let t = Tensor::<f64>::zeros([2, 4]);
        assert!(cost_volume(&v, &t).is_err());
    }

    #[test]
    fn embedding_degenerate_cases() {
        let mut store = ParamStore::<f64>::new();
        store.insert("e.weight", Tensor::zeros([1, 3])).unwrap();
        store.insert("e.bias", Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let mut s = Session::new(&mut store, BatchNormMode::Train);
        let cv = s.input(Tensor::from_fn([2, 2, 2], |ix| ix[0] as f64 - ix[2] as f64));
        let v = embed_cost_volume(&mut s, cv, "e").unwrap();
        assert_eq!(s.graph.dims(v), &[2, 2, 2, 3]);
        for row in s.graph.value(v).data().chunks(3) {
            assert_eq!(row, &[1.0, 2.0, 3.0]);
        }

        let mut store = ParamStore::<f64>::new();
        store.insert("e.weight", Tensor::ones([1, 1])).unwrap();
        store.insert("e.bias", Tensor::zeros([1])).unwrap();
        let mut s = Session::new(&mut store, BatchNormMode::Train);
        let raw = Tensor::from_fn([2, 2, 2], |ix| (ix[0] * 4 + ix[1] * 2 + ix[2]) as f64 * 0.1);
        let cv = s.input(raw.clone());
        let v = embed_cost_volume(&mut s, cv, "e").unwrap();
        assert_eq!(s.graph.value(v).data(), raw.data());
    }

    #[test]
    fn embedding_gradient_reaches_encoder_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        store.insert("visual", Tensor::randn([2, 2, 4], 1.0, &mut rng)).unwrap();
        store.insert("text", Tensor::randn([3, 4], 1.0, &mut rng)).unwrap();
        init_embedding(&mut store, "e", 5, &mut rng).unwrap();
        let mut s = Session::new(&mut store, BatchNormMode::Train);
        let (v, t) = (s.param("visual").unwrap(), s.param("text").unwrap());
        let cv = build_cost_volume(&mut s.graph, v, t).unwrap();
        let e = embed_cost_volume(&mut s, cv, "e").unwrap();
        let sq = s.graph.square(e);
        let loss = s.graph.sum_all(sq);
        let grads = s.gradients(loss).unwrap();
        for leaf in ["visual", "text"] {
            assert!(grads[leaf].data().iter().any(|g| g.abs() > 1e-8), "{leaf}");
        }
    }

    #[test]
    fn prototypes_are_orthonormal() {
        let p = orthonormal_prototypes(5, 9, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let d: f64 = (0..9).map(|c| p.get(&[i, c]) * p.get(&[j, c])).sum();
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        assert!(orthonormal_prototypes(10, 9, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn too_many_classes_is_invalid_config() {
        let cfg = ModelConfig { n: 9, c_enc: 8, ..tiny_cfg() };
        let e = synthesize_task(&cfg, &TaskConfig::default(), 0).unwrap_err();
        assert!(matches!(e, crate::PcaError::InvalidConfig { .. }));
    }

    #[test]
    fn noiseless_task_is_separable() {
        let cfg = tiny_cfg();
        let task = synthesize_task(&cfg, &TaskConfig { sigma: 0.0, ..TaskConfig::default() }, 5).unwrap();
        let s = cost_volume(&task.visual, &task.text).unwrap();
        let pred = argmax_last(&s);
        for y in 0..cfg.h * cfg.upsample {
            for x in 0..cfg.w * cfg.upsample {
                let gt = task.labels[y * cfg.w * cfg.upsample + x];
                assert_eq!(pred[(y / cfg.upsample) * cfg.w + x / cfg.upsample], gt);
            }
        }
    }

    #[test]
    fn same_seed_same_task() {
        let cfg = tiny_cfg();
        let a = synthesize_task(&cfg, &TaskConfig::default(), 11).unwrap();
        let b = synthesize_task(&cfg, &TaskConfig::default(), 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.checksum(), b.checksum());
        let c = synthesize_task(&cfg, &TaskConfig::default(), 12).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn split_keeps_both_sides_nonempty() {
        let cfg = tiny_cfg();
        for frac in [0.01, 0.5, 0.99] {
            let t = synthesize_task(&cfg, &TaskConfig { seen_fraction: frac, ..TaskConfig::default() }, 1).unwrap();
            assert!(t.seen.iter().any(|&s| s) && t.seen.iter().any(|&s| !s), "{frac}");
            let train = t.training_labels();
            for (l, m) in t.labels.iter().zip(&train) {
                assert_eq!(*m == 255, !t.seen[*l as usize]);
            }
        }
    }

    #[test]
    fn correlation_length_grows_regions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let changes = |labels: &[u8]| (0..32 * 31).filter(|&i| labels[(i / 31) * 32 + i % 31] != labels[(i / 31) * 32 + i % 31 + 1]).count();
        let iid = region_labels(32, 32, 6, 0.0, &mut rng);
        let smooth = region_labels(32, 32, 6, 3.0, &mut rng);
        assert!(changes(&smooth) * 3 < changes(&iid));
    }

    #[test]
    fn task_directory_round_trip() {
        let task = synthesize_task(&tiny_cfg(), &TaskConfig { seen_fraction: 0.5, ..TaskConfig::default() }, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        task.save(dir.path()).unwrap();
        for f in ["visual.ptns", "text.ptns", "labels.ptns", "meta.json"] {
            assert!(dir.path().join(f).exists());
        }
        assert_eq!(SyntheticTask::load(dir.path()).unwrap(), task);
    }
}
