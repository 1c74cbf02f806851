//! The shared trunk: stages of windowed spatio-temporal attention blocks
//! separated by spatial patch merging.

use std::sync::Arc;

use omnivore_tensor::{ParamId, ParamStore, Real, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{drop_path, LayerNorm, Linear, Mode, INIT_STD};
use crate::patch_embed::TokenGrid;
use crate::rng::{trunc_normal, SeedRng};
use crate::window::{rel_pos_index, spatial_table_rows, temporal_table_rows, WindowLayout};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrunkConfig {
    pub stage_depths: Vec<usize>,
    pub stage_dims: Vec<usize>,
    pub heads_per_stage: Vec<usize>,
    /// `(Wt, Wh, Ww)`.
    pub window: [usize; 3],
    pub drop_path_rate: f64,
    pub mlp_ratio: f64,
    /// Stage whose output grid feeds k-NN features. Defaults to the third
    /// stage, or the last stage for shallower trunks.
    #[serde(default)]
    pub feature_stage: Option<usize>,
}

impl TrunkConfig {
    /// Desk-scale default: d=16, two stages.
    pub fn desk() -> Self {
        TrunkConfig {
            stage_depths: vec![2, 2],
            stage_dims: vec![16, 32],
            heads_per_stage: vec![2, 4],
            window: [2, 2, 2],
            drop_path_rate: 0.1,
            mlp_ratio: 4.0,
            feature_stage: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stage_depths.len();
        let bad = |msg: String| Err(Error::Config {
            field: "model.trunk".into(),
            msg,
        });
        if n == 0 || self.stage_dims.len() != n || self.heads_per_stage.len() != n {
            return bad("stage_depths, stage_dims and heads_per_stage must have equal non-zero length".into());
        }
        for i in 0..n {
            if self.heads_per_stage[i] == 0 || self.stage_dims[i] % self.heads_per_stage[i] != 0 {
                return bad(format!(
                    "stage {i}: dim {} not divisible by {} heads",
                    self.stage_dims[i], self.heads_per_stage[i]
                ));
            }
            if i > 0 && self.stage_dims[i] != 2 * self.stage_dims[i - 1] {
                return bad(format!("stage {i}: patch merging doubles the dim, expected {}", 2 * self.stage_dims[i - 1]));
            }
        }
        if self.window.contains(&0) {
            return bad("window extents must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.drop_path_rate) || self.mlp_ratio <= 0.0 {
            return bad("drop_path_rate must lie in [0, 1] and mlp_ratio be positive".into());
        }
        if let Some(s) = self.feature_stage {
            if s >= n {
                return bad(format!("feature_stage {s} exceeds {n} stages"));
            }
        }
        Ok(())
    }

    pub fn final_dim(&self) -> usize {
        *self.stage_dims.last().expect("validated")
    }

    pub fn feature_stage(&self) -> usize {
        self.feature_stage.unwrap_or_else(|| 2.min(self.stage_depths.len() - 1))
    }

    pub fn feature_dim(&self) -> usize {
        self.stage_dims[self.feature_stage()]
    }

    /// Drop-path probability of each block, ramping linearly from 0 to the
    /// configured rate over all blocks.
    pub fn drop_path_rates(&self) -> Vec<f64> {
        let total: usize = self.stage_depths.iter().sum();
        (0..total)
            .map(|i| {
                if total > 1 {
                    self.drop_path_rate * i as f64 / (total - 1) as f64
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Multi-head self-attention within windows, with decomposed relative
/// position bias: one spatial table over `(Δh, Δw)` and one temporal table
/// over `Δt`.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub spatial_table: ParamId,
    pub temporal_table: ParamId,
    pub heads: usize,
    pub dim: usize,
    pub window: [usize; 3],
    spatial_index: Arc<[Option<usize>]>,
    temporal_index: Arc<[Option<usize>]>,
}

impl WindowAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        heads: usize,
        window: [usize; 3],
        rng: &mut SeedRng,
    ) -> Result<Self> {
        let qkv = Linear::new(store, &format!("{prefix}.qkv"), dim, 3 * dim, true, rng)?;
        let proj = Linear::new(store, &format!("{prefix}.proj"), dim, dim, true, rng)?;
        let spatial_table = store.add(
            format!("{prefix}.rel_pos_spatial"),
            trunc_normal(&[spatial_table_rows(window), heads], INIT_STD, rng),
            true,
        )?;
        let temporal_table = store.add(
            format!("{prefix}.rel_pos_temporal"),
            trunc_normal(&[temporal_table_rows(window), heads], INIT_STD, rng),
            true,
        )?;
        let (s, t) = rel_pos_index(window);
        Ok(WindowAttention {
            qkv,
            proj,
            spatial_table,
            temporal_table,
            heads,
            dim,
            window,
            spatial_index: s.into_iter().map(Some).collect(),
            temporal_index: t.into_iter().map(Some).collect(),
        })
    }

    /// `[heads, N, N]` bias: spatial table row plus temporal table row.
    pub fn position_bias<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Result<Var> {
        let n: usize = self.window.iter().product();
        let st = tape.param(store, self.spatial_table);
        let tt = tape.param(store, self.temporal_table);
        let s = tape.gather_rows(st, self.spatial_index.clone())?;
        let t = tape.gather_rows(tt, self.temporal_index.clone())?;
        let b = tape.add(s, t)?;
        let b = tape.reshape(b, &[n, n, self.heads])?;
        Ok(tape.permute(b, &[2, 0, 1])?)
    }

    /// Attention over pre-partitioned windows `[windows_total * N, d]`, where
    /// `windows_total = batch * layout.num_windows()`.
    pub fn forward_windows<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        windows: Var,
        batch: usize,
        layout: &WindowLayout,
    ) -> Result<Var> {
        let n = layout.tokens_per_window();
        let nw = layout.num_windows();
        let bw = batch * nw;
        let (h, dh) = (self.heads, self.dim / self.heads);
        let qkv = self.qkv.forward(tape, store, windows)?;
        let qkv = tape.reshape(qkv, &[bw, n, 3, h, dh])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut parts = [qkv; 3];
        for (i, part) in parts.iter_mut().enumerate() {
            let g = tape.gather_rows(qkv, Arc::from(vec![Some(i)]))?;
            *part = tape.reshape(g, &[bw, h, n, dh])?;
        }
        let [q, k, v] = parts;
        let q = tape.scale(q, T::from_f64_lossy((dh as f64).powf(-0.5)));
        let kt = tape.transpose_last2(k)?;
        let mut logits = tape.matmul(q, kt)?;
        let bias = self.position_bias(tape, store)?;
        logits = tape.add(logits, bias)?;
        if layout.has_mask() {
            let mut mask = Vec::with_capacity(nw * h * n * n);
            for w in 0..nw {
                let wm = &layout.mask[w * n * n..(w + 1) * n * n];
                for _ in 0..h {
                    mask.extend(wm.iter().map(|&m| if m { T::neg_infinity() } else { T::zero() }));
                }
            }
            let mask = tape.constant(&[nw, h, n, n], mask)?;
            let l5 = tape.reshape(logits, &[batch, nw, h, n, n])?;
            let l5 = tape.add(l5, mask)?;
            logits = tape.reshape(l5, &[bw, h, n, n])?;
        }
        let attn = tape.softmax_last(logits)?;
        let out = tape.matmul(attn, v)?;
        let out = tape.permute(out, &[0, 2, 1, 3])?;
        let out = tape.reshape(out, &[bw * n, self.dim])?;
        self.proj.forward(tape, store, out)
    }

    /// Partition `[batch * L, d]` tokens, attend, and scatter back.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        batch: usize,
        layout: &WindowLayout,
    ) -> Result<Var> {
        let windows = tape.gather_rows(x, layout.partition_index(batch))?;
        let out = self.forward_windows(tape, store, windows, batch, layout)?;
        Ok(tape.gather_rows(out, layout.reverse_index(batch))?)
    }
}

/// Pre-norm residual block: attention branch then MLP branch, each wrapped
/// in stochastic depth.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub shifted: bool,
    pub drop_path: f64,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        heads: usize,
        window: [usize; 3],
        mlp_ratio: f64,
        shifted: bool,
        drop_path: f64,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        let hidden = ((dim as f64) * mlp_ratio).round().max(1.0) as usize;
        Ok(Block {
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), dim)?,
            attn: WindowAttention::new(store, &format!("{prefix}.attn"), dim, heads, window, rng)?,
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), dim)?,
            fc1: Linear::new(store, &format!("{prefix}.mlp.fc1"), dim, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{prefix}.mlp.fc2"), hidden, dim, true, rng)?,
            shifted,
            drop_path,
        })
    }

    pub fn layout(&self, extents: [usize; 3]) -> WindowLayout {
        WindowLayout::new(extents, self.attn.window, self.shifted)
    }

    /// `x`: `[batch * T'H'W', d]`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        batch: usize,
        layout: &WindowLayout,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let h = self.norm1.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, h, batch, layout)?;
        let a = drop_path(tape, a, batch, self.drop_path, mode)?;
        let x = tape.add(x, a)?;
        let h = self.norm2.forward(tape, store, x)?;
        let h = self.fc1.forward(tape, store, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, store, h)?;
        let h = drop_path(tape, h, batch, self.drop_path, mode)?;
        Ok(tape.add(x, h)?)
    }
}

/// Concatenates each 2×2 spatial neighbourhood (4d), normalizes, and
/// projects to 2d. Time is never merged.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub reduction: Linear,
    pub dim: usize,
}

impl PatchMerge {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize, rng: &mut SeedRng) -> Result<Self> {
        Ok(PatchMerge {
            norm: LayerNorm::new(store, &format!("{prefix}.norm"), 4 * dim)?,
            reduction: Linear::new(store, &format!("{prefix}.reduction"), 4 * dim, 2 * dim, false, rng)?,
            dim,
        })
    }

    pub fn output_extents(extents: [usize; 3]) -> Result<[usize; 3]> {
        let [t, h, w] = extents;
        if h % 2 != 0 {
            return Err(Error::Indivisible {
                axis: "height",
                extent: h,
                patch: 2,
            });
        }
        if w % 2 != 0 {
            return Err(Error::Indivisible {
                axis: "width",
                extent: w,
                patch: 2,
            });
        }
        Ok([t, h / 2, w / 2])
    }

    /// `x`: `[batch * T'H'W', d]` → `[batch * T'(H'/2)(W'/2), 2d]`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        batch: usize,
        extents: [usize; 3],
    ) -> Result<Var> {
        let [t, h, w] = extents;
        let [_, ho, wo] = Self::output_extents(extents)?;
        let mut index = Vec::with_capacity(batch * t * ho * wo * 4);
        for b in 0..batch {
            for ti in 0..t {
                for i in 0..ho {
                    for j in 0..wo {
                        for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                            index.push(Some(((b * t + ti) * h + 2 * i + dy) * w + 2 * j + dx));
                        }
                    }
                }
            }
        }
        let g = tape.gather_rows(x, index.into())?;
        let g = tape.reshape(g, &[batch * t * ho * wo, 4 * self.dim])?;
        let g = self.norm.forward(tape, store, g)?;
        self.reduction.forward(tape, store, g)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub merge: Option<PatchMerge>,
    pub blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
pub struct Trunk {
    pub config: TrunkConfig,
    pub stages: Vec<Stage>,
    pub norm: LayerNorm,
}

/// Outputs of one trunk forward pass.
#[derive(Clone, Debug)]
pub struct TrunkOutput {
    /// Pooled representation `[batch, final_dim]`.
    pub phi: Var,
    /// Output grid of every stage; the last one is after the final norm.
    pub stages: Vec<TokenGrid>,
}

impl Trunk {
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: TrunkConfig, rng: &mut SeedRng) -> Result<Self> {
        config.validate()?;
        let rates = config.drop_path_rates();
        let mut k = 0;
        let mut stages = Vec::new();
        for s in 0..config.stage_depths.len() {
            let dim = config.stage_dims[s];
            let merge = if s > 0 {
                Some(PatchMerge::new(store, &format!("trunk.stage{s}.merge"), config.stage_dims[s - 1], rng)?)
            } else {
                None
            };
            let mut blocks = Vec::new();
            for b in 0..config.stage_depths[s] {
                blocks.push(Block::new(
                    store,
                    &format!("trunk.stage{s}.block{b}"),
                    dim,
                    config.heads_per_stage[s],
                    config.window,
                    config.mlp_ratio,
                    b % 2 == 1,
                    rates[k],
                    rng,
                )?);
                k += 1;
            }
            stages.push(Stage { merge, blocks });
        }
        let norm = LayerNorm::new(store, "trunk.norm", config.final_dim())?;
        Ok(Trunk { config, stages, norm })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        grid: TokenGrid,
        mode: &mut Mode<'_>,
    ) -> Result<TrunkOutput> {
        let first = self.config.stage_dims[0];
        if grid.dim != first {
            return Err(Error::contract(format!(
                "token dim {} does not match trunk stage dim {first}",
                grid.dim
            )));
        }
        let batch = grid.batch;
        let mut extents = grid.extents;
        let mut x = tape.reshape(grid.tokens, &[batch * grid.tokens_per_sample(), grid.dim])?;
        let mut outputs = Vec::with_capacity(self.stages.len());
        for (s, stage) in self.stages.iter().enumerate() {
            if let Some(m) = &stage.merge {
                x = m.forward(tape, store, x, batch, extents)?;
                extents = PatchMerge::output_extents(extents)?;
            }
            let plain = WindowLayout::new(extents, self.config.window, false);
            let shifted = WindowLayout::new(extents, self.config.window, true);
            for block in &stage.blocks {
                let layout = if block.shifted { &shifted } else { &plain };
                x = block.forward(tape, store, x, batch, layout, mode)?;
            }
            if s + 1 == self.stages.len() {
                x = self.norm.forward(tape, store, x)?;
            }
            let dim = self.config.stage_dims[s];
            let tokens = tape.reshape(x, &[batch, extents[0], extents[1], extents[2], dim])?;
            outputs.push(TokenGrid {
                tokens,
                batch,
                extents,
                dim,
                modality: grid.modality,
            });
        }
        let last = outputs.last().expect("at least one stage");
        let per = last.tokens_per_sample();
        let flat = tape.reshape(x, &[batch, per, last.dim])?;
        let phi = tape.mean_axis(flat, 1)?;
        Ok(TrunkOutput { phi, stages: outputs })
    }
}
