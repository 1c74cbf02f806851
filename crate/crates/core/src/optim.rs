//! AdamW, the warmup/cosine/cooldown learning-rate schedule, and parameter EMA.

use omnivore_tensor::{ParamStore, Real};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moments, one buffer per parameter, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros = || -> Vec<Vec<T>> { store.iter().map(|(_, p)| vec![T::zero(); p.tensor.numel()]).collect() };
        AdamW {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    fn check(&self, store: &ParamStore<T>) -> Result<()> {
        if self.m.len() != store.len() || self.v.len() != store.len() {
            return Err(Error::contract(format!(
                "optimizer holds {} moment buffers for {} parameters",
                self.m.len(),
                store.len()
            )));
        }
        for ((_, p), (m, v)) in store.iter().zip(self.m.iter().zip(&self.v)) {
            if m.len() != p.tensor.numel() || v.len() != p.tensor.numel() {
                return Err(Error::contract(format!("moment shape mismatch for `{}`", p.name)));
            }
        }
        Ok(())
    }

    /// One update from the gradients held in `store`. Parameters with no
    /// gradient (not reached by this step's forward pass) are left untouched,
    /// moments included. Decay is decoupled and skipped for exempt parameters.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::contract(format!("learning rate {lr} must be finite and >= 0")));
        }
        self.check(store)?;
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, (_, p)) in store.iter_mut().enumerate() {
            let Some(grad) = p.tensor.grad().map(<[T]>::to_vec) else { continue };
            let decay = if p.decay_exempt { 0.0 } else { lr * weight_decay };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let g = grad[j].as_f64();
                let mj = beta1 * m[j].as_f64() + (1.0 - beta1) * g;
                let vj = beta2 * v[j].as_f64() + (1.0 - beta2) * g * g;
                m[j] = T::from_f64_lossy(mj);
                v[j] = T::from_f64_lossy(vj);
                let x = w.as_f64();
                let update = (mj / bc1) / ((vj / bc2).sqrt() + eps);
                *w = T::from_f64_lossy(x - decay * x - lr * update);
            }
        }
        Ok(())
    }
}

/// Linear warmup, cosine decay to a floor, linear cooldown to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub total_steps: u64,
    pub lr_peak: f64,
    pub warmup_frac: f64,
    pub cooldown_frac: f64,
    /// Cosine floor as a fraction of `lr_peak`.
    pub floor_frac: f64,
}

impl LrSchedule {
    pub fn new(total_steps: u64, lr_peak: f64) -> Self {
        LrSchedule {
            total_steps,
            lr_peak,
            warmup_frac: 0.1,
            cooldown_frac: 0.1,
            floor_frac: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fracs_ok = self.warmup_frac >= 0.0
            && self.cooldown_frac >= 0.0
            && self.warmup_frac + self.cooldown_frac <= 1.0
            && (0.0..=1.0).contains(&self.floor_frac);
        if self.total_steps == 0 || !(self.lr_peak >= 0.0 && self.lr_peak.is_finite()) || !fracs_ok {
            return Err(Error::Config {
                field: "optim.schedule".into(),
                msg: format!("invalid schedule {self:?}"),
            });
        }
        Ok(())
    }

    /// Learning rate at a (possibly fractional) step in `[0, total_steps]`.
    pub fn lr_at(&self, step: f64) -> Result<f64> {
        self.validate()?;
        let total = self.total_steps as f64;
        if !(0.0..=total).contains(&step) {
            return Err(Error::contract(format!("step {step} outside [0, {total}]")));
        }
        let warm_end = self.warmup_frac * total;
        let cool_start = (1.0 - self.cooldown_frac) * total;
        let floor = self.floor_frac * self.lr_peak;
        Ok(if step < warm_end {
            self.lr_peak * step / warm_end
        } else if step <= cool_start {
            let span = cool_start - warm_end;
            let a = if span > 0.0 { (step - warm_end) / span } else { 1.0 };
            floor + 0.5 * (self.lr_peak - floor) * (1.0 + (std::f64::consts::PI * a).cos())
        } else {
            floor * (total - step) / (total - cool_start)
        })
    }
}

/// Shadow copy of the parameters, pulled toward them by `alpha` per update.
#[derive(Clone, Debug)]
pub struct Ema<T> {
    pub alpha: f64,
    pub shadow: ParamStore<T>,
}

impl<T: Real> Ema<T> {
    pub fn new(store: &ParamStore<T>, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::contract(format!("ema alpha {alpha} outside [0, 1]")));
        }
        let mut shadow = store.clone();
        shadow.zero_grad();
        Ok(Ema { alpha, shadow })
    }

    /// `shadow ← (1−α)·shadow + α·params`.
    pub fn update(&mut self, store: &ParamStore<T>) -> Result<()> {
        if self.shadow.len() != store.len() {
            return Err(Error::contract("ema shadow and parameters differ in count"));
        }
        let a = self.alpha;
        for ((_, s), (_, p)) in self.shadow.iter_mut().zip(store.iter()) {
            if s.tensor.shape() != p.tensor.shape() {
                return Err(Error::contract(format!("ema shape mismatch for `{}`", p.name)));
            }
            for (sv, &pv) in s.tensor.data_mut().iter_mut().zip(p.tensor.data()) {
                *sv = T::from_f64_lossy((1.0 - a) * sv.as_f64() + a * pv.as_f64());
            }
        }
        Ok(())
    }
}
