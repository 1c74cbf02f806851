//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use omnivore_core::data::{DatasetSpec, SyntheticWorld};
use omnivore_core::optim::{AdamW, AdamWConfig, LrSchedule};
use omnivore_core::patch_embed::PatchSpec;
use omnivore_core::retrieval::FeatureRecord;
use omnivore_core::rng::rng_for;
use omnivore_core::train::DatasetSplit;
use omnivore_core::trunk::{TrunkConfig, WindowAttention};
use omnivore_core::window::WindowLayout;
use omnivore_core::{DatasetId, Modality, ModelConfig, VisualSample};
use omnivore_tensor::{ParamStore, Tape, Tensor};
use rand::Rng;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        patch: PatchSpec { t: 2, h: 4, w: 4, dim: 8 },
        trunk: TrunkConfig {
            stage_depths: vec![2, 1],
            stage_dims: vec![8, 16],
            heads_per_stage: vec![2, 2],
            window: [1, 2, 2],
            drop_path_rate: 0.1,
            mlp_ratio: 2.0,
            feature_stage: None,
        },
        rgbd_embed: Default::default(),
    }
}

pub fn random_sample(modality: Modality, shape: [usize; 4], label: usize, dataset: &str, seed: u64) -> VisualSample {
    let mut rng = rng_for(seed, &[]);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0f32)).collect();
    VisualSample::new(modality, shape, data, label, DatasetId::from(dataset)).unwrap()
}

/// Image next to the two-frame video whose second frame is zeros.
pub fn image_and_padded_video(h: usize, w: usize, seed: u64) -> (VisualSample, VisualSample) {
    let img = random_sample(Modality::Image, [1, h, w, 3], 0, "a", seed);
    let mut data = img.data().to_vec();
    data.extend(std::iter::repeat(0.0).take(h * w * 3));
    let vid = VisualSample::new(Modality::Video, [2, h, w, 3], data, 0, DatasetId::from("a")).unwrap();
    (img, vid)
}

pub fn with_depth(img: &VisualSample, depth: impl Fn(usize) -> f32) -> VisualSample {
    let data = img
        .data()
        .chunks(3)
        .enumerate()
        .flat_map(|(i, px)| [px[0], px[1], px[2], depth(i)])
        .collect();
    let [_, h, w, _] = img.shape();
    VisualSample::new(Modality::Rgbd, [1, h, w, 4], data, img.label, img.dataset_id.clone()).unwrap()
}

/// A small synthetic world: 8 classes at 16×16 with 4-frame videos.
pub fn small_world() -> SyntheticWorld {
    SyntheticWorld {
        size: 16,
        frames: 4,
        ..Default::default()
    }
}

/// Max abs difference between the windowed implementation and the dense
/// oracle for one random instance.
pub fn windowed_vs_dense(grid: [usize; 3], window: [usize; 3], shifted: bool, batch: usize, heads: usize, seed: u64) -> f64 {
    let dim = 4 * heads;
    let mut store = ParamStore::<f64>::new();
    let mut rng = rng_for(seed, &[]);
    let attn = WindowAttention::new(&mut store, "a", dim, heads, window, &mut rng).unwrap();
    // large position tables and qkv weights make the bias and mask matter
    for (_, p) in store.iter_mut() {
        for v in p.tensor.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    let l: usize = grid.iter().product();
    let x: Vec<f64> = (0..batch * l * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let layout = WindowLayout::new(grid, window, shifted);
    let mut tape = Tape::new();
    let xv = tape.constant(&[batch * l, dim], x.clone()).unwrap();
    let y = attn.forward(&mut tape, &store, xv, batch, &layout).unwrap();
    let want = dense_window_attention(&attn, &store, &x, batch, grid, shifted);
    tape.value(y)
        .iter()
        .zip(&want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

pub fn split(world: &SyntheticWorld, id: &str, modality: Modality, train: usize, eval: usize) -> DatasetSplit {
    let mut all = omnivore_core::data::gen_synthetic(world, &id.into(), modality, train + eval).unwrap();
    let eval_part = all.split_off(train);
    DatasetSplit {
        spec: DatasetSpec {
            dataset_id: id.into(),
            modality,
            size: train,
            classes: world.classes,
            replication_weight: 1.0,
        },
        train: all,
        eval: eval_part,
    }
}

fn table(store: &ParamStore<f64>, id: omnivore_tensor::ParamId) -> (&[f64], usize) {
    let t = &store.get(id).tensor;
    (t.data(), t.shape()[1])
}

fn affine(x: &[f64], w: &[f64], b: &[f64], out: usize) -> Vec<f64> {
    (0..out)
        .map(|o| b[o] + x.iter().enumerate().map(|(i, xi)| xi * w[i * out + o]).sum::<f64>())
        .collect()
}

/// Shifted-window attention computed token by token on the unpadded grid.
///
/// Each token is mapped to its coordinates in the cyclically shifted, padded
/// grid. Two tokens attend to each other iff they land in the same window and
/// in the same region of the shifted grid, where regions along an axis are
/// `[0, P−W)`, `[P−W, P−s)` and `[P−s, P)`. Padding never enters.
pub fn dense_window_attention(
    attn: &WindowAttention,
    store: &ParamStore<f64>,
    x: &[f64],
    batch: usize,
    grid: [usize; 3],
    shifted: bool,
) -> Vec<f64> {
    let win = attn.window;
    let d = attn.dim;
    let h = attn.heads;
    let dh = d / h;
    let padded: [usize; 3] = std::array::from_fn(|a| grid[a].div_ceil(win[a]) * win[a]);
    let shift: [usize; 3] = std::array::from_fn(|a| if shifted && padded[a] > win[a] { win[a] / 2 } else { 0 });
    let l = grid.iter().product::<usize>();
    let coords: Vec<[usize; 3]> = (0..grid[0])
        .flat_map(|t| (0..grid[1]).flat_map(move |y| (0..grid[2]).map(move |z| [t, y, z])))
        .collect();
    let place = |c: [usize; 3]| -> ([usize; 3], [usize; 3], [usize; 3]) {
        let s: [usize; 3] = std::array::from_fn(|a| (c[a] + padded[a] - shift[a]) % padded[a]);
        let window_id = std::array::from_fn(|a| s[a] / win[a]);
        let pos = std::array::from_fn(|a| s[a] % win[a]);
        let region = std::array::from_fn(|a| {
            if shift[a] == 0 || s[a] < padded[a] - win[a] {
                0
            } else if s[a] < padded[a] - shift[a] {
                1
            } else {
                2
            }
        });
        (window_id, pos, region)
    };
    let (wqkv, _) = table(store, attn.qkv.weight);
    let bqkv = store.get(attn.qkv.bias.unwrap()).tensor.data();
    let (wp, _) = table(store, attn.proj.weight);
    let bp = store.get(attn.proj.bias.unwrap()).tensor.data();
    let (spatial, _) = table(store, attn.spatial_table);
    let (temporal, _) = table(store, attn.temporal_table);

    let mut out = vec![0.0; batch * l * d];
    for b in 0..batch {
        let rows: Vec<Vec<f64>> = (0..l)
            .map(|i| affine(&x[(b * l + i) * d..(b * l + i + 1) * d], wqkv, bqkv, 3 * d))
            .collect();
        for p in 0..l {
            let (wp_id, pp, rp) = place(coords[p]);
            let keys: Vec<usize> = (0..l)
                .filter(|&q| {
                    let (w, _, r) = place(coords[q]);
                    w == wp_id && r == rp
                })
                .collect();
            let mut concat = vec![0.0; d];
            for head in 0..h {
                let q_vec = &rows[p][head * dh..(head + 1) * dh];
                let logits: Vec<f64> = keys
                    .iter()
                    .map(|&q| {
                        let k_vec = &rows[q][d + head * dh..d + (head + 1) * dh];
                        let (_, pq, _) = place(coords[q]);
                        let dt = pp[0] + win[0] - 1 - pq[0];
                        let dy = pp[1] + win[1] - 1 - pq[1];
                        let dx = pp[2] + win[2] - 1 - pq[2];
                        let bias = spatial[(dy * (2 * win[2] - 1) + dx) * h + head] + temporal[dt * h + head];
                        q_vec.iter().zip(k_vec).map(|(a, c)| a * c).sum::<f64>() / (dh as f64).sqrt() + bias
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (wk, &q) in e.iter().zip(&keys) {
                    let v_vec = &rows[q][2 * d + head * dh..2 * d + (head + 1) * dh];
                    for k in 0..dh {
                        concat[head * dh + k] += wk / z * v_vec[k];
                    }
                }
            }
            out[(b * l + p) * d..(b * l + p + 1) * d].copy_from_slice(&affine(&concat, wp, bp, d));
        }
    }
    out
}

/// `w` decays, `b` is exempt. Loss is `Σ a_i (x_i − c_i)² / 2`.
pub fn two_param_store() -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add("w", Tensor::new(&[4], vec![0.5, -1.0, 2.0, 0.1]).unwrap(), false).unwrap();
    s.add("b", Tensor::new(&[2], vec![-0.3, 0.7]).unwrap(), true).unwrap();
    s
}

pub const A: [f64; 6] = [1.0, 3.0, 0.5, 10.0, 2.0, 0.2];
pub const C: [f64; 6] = [0.0, 1.0, -1.0, 0.5, 0.0, 2.0];

pub fn flat(s: &ParamStore<f64>) -> Vec<f64> {
    s.iter().flat_map(|(_, p)| p.tensor.data().to_vec()).collect()
}

pub fn grad_of(x: &[f64]) -> Vec<f64> {
    x.iter().enumerate().map(|(i, v)| A[i] * (v - C[i])).collect()
}

pub fn set_grads(s: &mut ParamStore<f64>, g: &[f64]) {
    let mut off = 0;
    for (_, p) in s.iter_mut() {
        let n = p.tensor.numel();
        p.tensor.zero_grad();
        p.tensor.accumulate_grad(&g[off..off + n]).unwrap();
        off += n;
    }
}

/// Max deviation between the optimizer and the reference over `steps`.
pub fn trajectory_gap(wd: f64, steps: u64) -> f64 {
    let mut s = two_param_store();
    let cfg = AdamWConfig { weight_decay: wd, ..Default::default() };
    let mut opt = AdamW::new(cfg, &s);
    let sched = LrSchedule::new(steps, 0.05);
    let mut x = flat(&s);
    let exempt = [false, false, false, false, true, true];
    let mut reference = ReferenceAdamW::new(x.len(), wd);
    let mut gap: f64 = 0.0;
    for t in 0..steps {
        let lr = sched.lr_at(t as f64 + 0.5).unwrap();
        let g = grad_of(&flat(&s));
        set_grads(&mut s, &g);
        opt.step(&mut s, lr).unwrap();
        let gx = grad_of(&x);
        reference.step(&mut x, &gx, lr, &exempt);
        gap = flat(&s).iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(gap, f64::max);
    }
    gap
}

/// Textbook AdamW with decoupled decay, applied to a flat parameter vector.
pub struct ReferenceAdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub wd: f64,
    pub t: i32,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl ReferenceAdamW {
    pub fn new(n: usize, wd: f64) -> Self {
        ReferenceAdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            wd,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, x: &mut [f64], g: &[f64], lr: f64, exempt: &[bool]) {
        self.t += 1;
        for i in 0..x.len() {
            if !exempt[i] {
                x[i] *= 1.0 - lr * self.wd;
            }
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mh = self.m[i] / (1.0 - self.beta1.powi(self.t));
            let vh = self.v[i] / (1.0 - self.beta2.powi(self.t));
            x[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// k-NN class scores by exhaustive counting: a record is among the top k
/// iff fewer than k records beat it (higher similarity, or equal similarity
/// at a lower index).
pub fn brute_knn(query: &[f64], index: &[FeatureRecord], classes: usize, k: usize, tau: f64) -> Vec<f64> {
    let sim: Vec<f64> = index
        .iter()
        .map(|r| r.vector.iter().zip(query).map(|(a, b)| a * b).sum())
        .collect();
    let mut scores = vec![0.0; classes];
    for j in 0..index.len() {
        let beaten_by = (0..index.len())
            .filter(|&i| sim[i] > sim[j] || (sim[i] == sim[j] && i < j))
            .count();
        if beaten_by < k {
            scores[index[j].label] += (sim[j] / tau).exp();
        }
    }
    scores
}

pub fn unit_records(n: usize, dim: usize, classes: usize, seed: u64) -> Vec<FeatureRecord> {
    let mut rng = rng_for(seed, &[]);
    (0..n)
        .map(|i| {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            omnivore_core::retrieval::l2_normalize(&mut v).unwrap();
            FeatureRecord {
                vector: v,
                label: rng.gen_range(0..classes),
                modality: Modality::Image,
                dataset_id: "x".into(),
                index: i,
            }
        })
        .collect()
}
