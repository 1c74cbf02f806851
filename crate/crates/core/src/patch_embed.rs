//! Patchification and patch embedding.
//!
//! All three-channel content (image patches, video patches, the RGB part of
//! RGBD) goes through one shared linear+LN embedder. Single-frame inputs are
//! zero-padded along time to the patch depth `t`, with the padding frames
//! appended after the real frame. RGBD depth patches use a separate
//! linear+LN embedder whose output is added to the RGB token.

use omnivore_tensor::{ParamStore, Real, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::LinearNorm;
use crate::rng::SeedRng;
use crate::sample::{Modality, VisualSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchSpec {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    /// Token dimension `d`.
    pub dim: usize,
}

impl PatchSpec {
    pub fn voxels(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.h == 0 || self.w == 0 || self.dim == 0 {
            return Err(Error::contract(format!("patch spec has a zero extent: {self:?}")));
        }
        Ok(())
    }

    /// Token grid extents `(T', H', W')` for an input of the given extents.
    pub fn grid_for(&self, shape: [usize; 4]) -> Result<[usize; 3]> {
        let [t, h, w, _] = shape;
        if h % self.h != 0 {
            return Err(Error::Indivisible {
                axis: "height",
                extent: h,
                patch: self.h,
            });
        }
        if w % self.w != 0 {
            return Err(Error::Indivisible {
                axis: "width",
                extent: w,
                patch: self.w,
            });
        }
        let tg = if t == 1 {
            1
        } else if t % self.t == 0 {
            t / self.t
        } else {
            return Err(Error::Indivisible {
                axis: "time",
                extent: t,
                patch: self.t,
            });
        };
        Ok([tg, h / self.h, w / self.w])
    }
}

/// Which embedder handles RGBD inputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RgbdEmbed {
    /// Shared RGB embedder plus a separate, additive depth embedder.
    #[default]
    Additive,
    /// One four-channel patch projection (ablation).
    Conv4,
}

/// Non-overlapping patches of one sample, each flattened in `(t, h, w, c)`
/// order. Patches are ordered row-major over the token grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Patches {
    pub grid: [usize; 3],
    /// `[t, h, w, c]` of every patch, after temporal zero-padding.
    pub patch: [usize; 4],
    pub data: Vec<f32>,
}

impl Patches {
    pub fn len(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_len(&self) -> usize {
        self.patch.iter().product()
    }

    pub fn get(&self, i: usize) -> &[f32] {
        let n = self.patch_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Keeps channels `lo..hi` of every patch.
    pub fn channels(&self, lo: usize, hi: usize) -> Vec<f32> {
        let c = self.patch[3];
        self.data
            .chunks(c)
            .flat_map(|px| px[lo..hi].iter().copied())
            .collect()
    }

    /// Inverse of [`patchify`], ignoring padding frames.
    pub fn reassemble(&self, frames: usize) -> Vec<f32> {
        let [_, gh, gw] = self.grid;
        let [pt, ph, pw, c] = self.patch;
        let (h, w) = (gh * ph, gw * pw);
        let mut out = vec![0.0; frames * h * w * c];
        for (i, p) in self.data.chunks(self.patch_len()).enumerate() {
            let (ti, yi, xi) = (i / (gh * gw), (i / gw) % gh, i % gw);
            for dt in 0..pt {
                let t = ti * pt + dt;
                if t >= frames {
                    continue;
                }
                for dy in 0..ph {
                    for dx in 0..pw {
                        let src = ((dt * ph + dy) * pw + dx) * c;
                        let dst = ((t * h + yi * ph + dy) * w + xi * pw + dx) * c;
                        out[dst..dst + c].copy_from_slice(&p[src..src + c]);
                    }
                }
            }
        }
        out
    }
}

/// Splits a sample into `t×h×w×C` patches.
pub fn patchify(sample: &VisualSample, spec: &PatchSpec) -> Result<Patches> {
    spec.validate()?;
    let grid = spec.grid_for(sample.shape())?;
    let [frames, h, w, c] = sample.shape();
    let [gt, gh, gw] = grid;
    let plen = spec.voxels() * c;
    let mut data = vec![0.0f32; gt * gh * gw * plen];
    let src = sample.data();
    for ti in 0..gt {
        for yi in 0..gh {
            for xi in 0..gw {
                let base = ((ti * gh + yi) * gw + xi) * plen;
                for dt in 0..spec.t {
                    let t = ti * spec.t + dt;
                    if t >= frames {
                        break;
                    }
                    for dy in 0..spec.h {
                        let y = yi * spec.h + dy;
                        let row = ((t * h + y) * w + xi * spec.w) * c;
                        let dst = base + (dt * spec.h + dy) * spec.w * c;
                        data[dst..dst + spec.w * c].copy_from_slice(&src[row..row + spec.w * c]);
                    }
                }
            }
        }
    }
    Ok(Patches {
        grid,
        patch: [spec.t, spec.h, spec.w, c],
        data,
    })
}

/// Tokens of a batch of samples on the tape: `[batch, T', H', W', d]`.
#[derive(Clone, Copy, Debug)]
pub struct TokenGrid {
    pub tokens: Var,
    pub batch: usize,
    pub extents: [usize; 3],
    pub dim: usize,
    pub modality: Modality,
}

impl TokenGrid {
    pub fn tokens_per_sample(&self) -> usize {
        self.extents.iter().product()
    }
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub spec: PatchSpec,
    pub mode: RgbdEmbed,
    pub rgb: LinearNorm,
    pub depth: Option<LinearNorm>,
    pub rgbd_conv: Option<LinearNorm>,
}

impl PatchEmbed {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        spec: PatchSpec,
        mode: RgbdEmbed,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        spec.validate()?;
        let v = spec.voxels();
        let rgb = LinearNorm::new(store, "patch_embed.rgb", v * 3, spec.dim, rng)?;
        let (depth, rgbd_conv) = match mode {
            RgbdEmbed::Additive => (Some(LinearNorm::new(store, "patch_embed.depth", v, spec.dim, rng)?), None),
            RgbdEmbed::Conv4 => (None, Some(LinearNorm::new(store, "patch_embed.rgbd_conv", v * 4, spec.dim, rng)?)),
        };
        Ok(PatchEmbed {
            spec,
            mode,
            rgb,
            depth,
            rgbd_conv,
        })
    }

    /// Shared RGB embedder over rows of flattened `t×h×w×3` patches.
    pub fn embed_rgb<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, rows: Var) -> Result<Var> {
        self.check_width(tape, rows, 3, "embed_rgb")?;
        self.rgb.forward(tape, store, rows)
    }

    /// Depth embedder over rows of flattened `t×h×w×1` patches.
    pub fn embed_depth<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, rows: Var) -> Result<Var> {
        self.check_width(tape, rows, 1, "embed_depth")?;
        let depth = self
            .depth
            .as_ref()
            .ok_or_else(|| Error::contract("embedder built without a depth pathway"))?;
        depth.forward(tape, store, rows)
    }

    /// Four-channel RGBD embedder over rows of flattened `t×h×w×4` patches.
    pub fn embed_rgbd_conv_rows<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        rows: Var,
    ) -> Result<Var> {
        self.check_width(tape, rows, 4, "embed_rgbd_conv")?;
        let conv = self
            .rgbd_conv
            .as_ref()
            .ok_or_else(|| Error::contract("embedder built without the four-channel pathway"))?;
        conv.forward(tape, store, rows)
    }

    fn check_width<T: Real>(&self, tape: &Tape<T>, rows: Var, channels: usize, op: &str) -> Result<()> {
        let s = tape.shape(rows);
        let want = self.spec.voxels() * channels;
        if s.len() != 2 || s[1] != want {
            return Err(Error::contract(format!(
                "{op} expects rows of {want} values ({channels} channels), got shape {s:?}"
            )));
        }
        Ok(())
    }

    /// Embeds a batch of samples that share modality and shape.
    pub fn embed_batch<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        samples: &[&VisualSample],
    ) -> Result<TokenGrid> {
        let first = samples
            .first()
            .ok_or_else(|| Error::contract("cannot embed an empty batch"))?;
        if samples
            .iter()
            .any(|s| s.modality != first.modality || s.shape() != first.shape())
        {
            return Err(Error::contract("batch mixes modalities or input shapes"));
        }
        let patches = samples
            .iter()
            .map(|s| patchify(s, &self.spec))
            .collect::<Result<Vec<_>>>()?;
        let grid = patches[0].grid;
        let rows = samples.len() * patches[0].len();
        let v = self.spec.voxels();
        let to_t = |xs: Vec<f32>| xs.into_iter().map(|x| T::from_f64_lossy(x as f64)).collect::<Vec<T>>();

        let flat = match (first.modality, self.mode) {
            (Modality::Image | Modality::Video, _) => {
                let data = patches.iter().flat_map(|p| p.data.iter().copied()).collect();
                let x = tape.constant(&[rows, v * 3], to_t(data))?;
                self.embed_rgb(tape, store, x)?
            }
            (Modality::Rgbd, RgbdEmbed::Additive) => {
                let rgb = patches.iter().flat_map(|p| p.channels(0, 3)).collect();
                let depth = patches.iter().flat_map(|p| p.channels(3, 4)).collect();
                let xr = tape.constant(&[rows, v * 3], to_t(rgb))?;
                let xd = tape.constant(&[rows, v], to_t(depth))?;
                let er = self.embed_rgb(tape, store, xr)?;
                let ed = self.embed_depth(tape, store, xd)?;
                tape.add(er, ed)?
            }
            (Modality::Rgbd, RgbdEmbed::Conv4) => {
                let data = patches.iter().flat_map(|p| p.data.iter().copied()).collect();
                let x = tape.constant(&[rows, v * 4], to_t(data))?;
                self.embed_rgbd_conv_rows(tape, store, x)?
            }
        };
        let tokens = tape.reshape(flat, &[samples.len(), grid[0], grid[1], grid[2], self.spec.dim])?;
        Ok(TokenGrid {
            tokens,
            batch: samples.len(),
            extents: grid,
            dim: self.spec.dim,
            modality: first.modality,
        })
    }

    pub fn embed_sample<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        sample: &VisualSample,
    ) -> Result<TokenGrid> {
        self.embed_batch(tape, store, &[sample])
    }

    /// Four-channel embedding of an RGBD sample (ablation path).
    pub fn embed_rgbd_conv<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        sample: &VisualSample,
    ) -> Result<TokenGrid> {
        sample.require(Modality::Rgbd, "embed_rgbd_conv")?;
        if self.mode != RgbdEmbed::Conv4 {
            return Err(Error::contract("embed_rgbd_conv requires the conv4 embedder"));
        }
        self.embed_batch(tape, store, &[sample])
    }
}
