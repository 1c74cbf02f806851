//! Parameterized building blocks shared by the embedder, trunk and heads.

use omnivore_tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var, LAYER_NORM_EPS};
use rand::Rng;

use crate::error::Result;
use crate::rng::{ones, trunc_normal, SeedRng};

/// Weight init std for all linear layers and position tables.
pub const INIT_STD: f64 = 0.02;

/// Forward-pass mode. Training carries the generator that drives every
/// stochastic op (dropout, drop path).
pub enum Mode<'a> {
    Eval,
    Train(&'a mut SeedRng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{prefix}.weight"),
            trunc_normal(&[in_dim, out_dim], INIT_STD, rng),
            false,
        )?;
        let bias = if bias {
            Some(store.add(format!("{prefix}.bias"), Tensor::zeros(&[out_dim]), true)?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        Ok(tape.linear(x, w, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(format!("{prefix}.weight"), ones(&[dim]), true)?,
            beta: store.add(format!("{prefix}.bias"), Tensor::zeros(&[dim]), true)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        Ok(tape.layer_norm(x, g, b, LAYER_NORM_EPS)?)
    }
}

/// A linear projection followed by a LayerNorm.
#[derive(Clone, Debug)]
pub struct LinearNorm {
    pub proj: Linear,
    pub norm: LayerNorm,
}

impl LinearNorm {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        Ok(LinearNorm {
            proj: Linear::new(store, &format!("{prefix}.proj"), in_dim, out_dim, true, rng)?,
            norm: LayerNorm::new(store, &format!("{prefix}.norm"), out_dim)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.proj.forward(tape, store, x)?;
        self.norm.forward(tape, store, y)
    }
}

/// Stochastic depth on a residual branch laid out as `[batch, rows_per_sample, d]`
/// (flattened). Each sample's branch is kept with probability `1 - p` and
/// rescaled by `1 / (1 - p)`.
pub fn drop_path<T: Real>(
    tape: &mut Tape<T>,
    branch: Var,
    batch: usize,
    p: f64,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let rng = match mode {
        Mode::Train(rng) if p > 0.0 => rng,
        _ => return Ok(branch),
    };
    let shape = tape.shape(branch).to_vec();
    let n = tape.value(branch).len();
    let per_sample = n / batch.max(1);
    let keep = if p < 1.0 { 1.0 / (1.0 - p) } else { 0.0 };
    let mut mask = Vec::with_capacity(n);
    for _ in 0..batch {
        let m = if rng.gen::<f64>() < p { 0.0 } else { keep };
        mask.extend(std::iter::repeat(T::from_f64_lossy(m)).take(per_sample));
    }
    let m = tape.constant(&shape, mask)?;
    Ok(tape.mul(branch, m)?)
}
