//! Procedural three-modality dataset sharing one class vocabulary.
//!
//! A class is a (shape, size bucket) pair. Images show the shape on a noisy
//! background; videos show it translating across frames; RGBD samples pair
//! the image render with a depth map in which the shape stands in front of a
//! tilted background plane.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::augment::{disparity_normalize, DisparityRange, RgbNorm};
use crate::error::{Error, Result};
use crate::rng::{rng_for, str_tag, SeedRng};
use crate::sample::{DatasetId, Modality, VisualSample};

pub const SHAPES: [&str; 4] = ["square", "disk", "ring", "bar"];
const SIZE_BUCKETS: [f64; 3] = [6.0, 11.0, 14.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub classes: usize,
    /// Spatial extent (square).
    pub size: usize,
    /// Video length in frames.
    pub frames: usize,
    /// Std of additive pixel noise.
    pub noise: f64,
    pub seed: u64,
    #[serde(default)]
    pub disparity: DisparityRange,
    /// Applied to every rendered RGB frame.
    #[serde(default)]
    pub rgb_norm: RgbNorm,
}

impl Default for SyntheticWorld {
    fn default() -> Self {
        SyntheticWorld {
            classes: 8,
            size: 32,
            frames: 8,
            noise: 0.05,
            seed: 0,
            disparity: DisparityRange::default(),
            rgb_norm: RgbNorm::default(),
        }
    }
}

impl SyntheticWorld {
    pub fn validate(&self) -> Result<()> {
        let max = SHAPES.len() * SIZE_BUCKETS.len();
        if self.classes == 0 || self.classes > max {
            return Err(Error::Config {
                field: "data.world.classes".into(),
                msg: format!("must be in 1..={max}"),
            });
        }
        if self.size < 16 || self.frames == 0 {
            return Err(Error::Config {
                field: "data.world".into(),
                msg: "size must be >= 16 and frames >= 1".into(),
            });
        }
        Ok(())
    }

    pub fn class_name(&self, class: usize) -> String {
        let bucket = ["small", "large", "huge"][class / SHAPES.len()];
        format!("{bucket}-{}", SHAPES[class % SHAPES.len()])
    }

    fn scale(&self) -> f64 {
        self.size as f64 / 32.0
    }
}

#[derive(Clone, Debug)]
struct Scene {
    shape: usize,
    radius: f64,
    start: (f64, f64),
    end: (f64, f64),
    fg: [f32; 3],
    bg: [f32; 3],
    fg_depth: f64,
}

fn inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        0 => dx.abs() <= r && dy.abs() <= r,
        1 => dx * dx + dy * dy <= r * r,
        2 => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= 0.3 * r * r
        }
        // horizontal
        _ => dx.abs() <= r && dy.abs() <= 0.4 * r,
    }
}

impl Scene {
    fn sample(world: &SyntheticWorld, class: usize, rng: &mut SeedRng) -> Scene {
        let shape = class % SHAPES.len();
        let radius = SIZE_BUCKETS[class / SHAPES.len()] * world.scale() * rng.gen_range(0.9..1.1);
        let s = world.size as f64;
        let lo = radius + 1.0;
        let hi = (s - radius - 1.0).max(lo + 1e-6);
        let start = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
        let reach = 1.2 * world.frames.saturating_sub(1) as f64;
        let mut end_axis = |c: f64| (c + rng.gen_range(-reach..=reach)).clamp(lo, hi);
        let end = (end_axis(start.0), end_axis(start.1));
        let fg = std::array::from_fn(|_| rng.gen_range(0.55..1.0));
        let bg = std::array::from_fn(|_| rng.gen_range(0.0..0.35));
        Scene {
            shape,
            radius,
            start,
            end,
            fg,
            bg,
            fg_depth: rng.gen_range(1.2..2.0),
        }
    }

    fn center(&self, frame: usize, frames: usize) -> (f64, f64) {
        let a = if frames > 1 {
            frame as f64 / (frames - 1) as f64
        } else {
            0.0
        };
        (
            self.start.0 + a * (self.end.0 - self.start.0),
            self.start.1 + a * (self.end.1 - self.start.1),
        )
    }

    fn covers(&self, center: (f64, f64), x: usize, y: usize) -> bool {
        inside(
            self.shape,
            x as f64 + 0.5 - center.0,
            y as f64 + 0.5 - center.1,
            self.radius,
        )
    }

    /// Standardized `H×W×3` render of one frame, appended to `out`.
    fn render_rgb(&self, world: &SyntheticWorld, center: (f64, f64), rng: &mut SeedRng, out: &mut Vec<f32>) {
        let start = out.len();
        for y in 0..world.size {
            for x in 0..world.size {
                let base = if self.covers(center, x, y) { self.fg } else { self.bg };
                for c in base {
                    let n: f64 = rng.sample(StandardNormal);
                    out.push((c + (n * world.noise) as f32).clamp(0.0, 1.0));
                }
            }
        }
        world.rgb_norm.apply(&mut out[start..]);
    }

    /// Scene depth: the shape at `fg_depth`, a background plane receding
    /// from 4 (top) to 6 (bottom) scene units.
    fn depth(&self, world: &SyntheticWorld, rng: &mut SeedRng) -> Vec<f32> {
        let s = world.size as f64;
        let center = self.start;
        let mut out = Vec::with_capacity(world.size * world.size);
        for y in 0..world.size {
            for x in 0..world.size {
                let z = if self.covers(center, x, y) {
                    self.fg_depth
                } else {
                    4.0 + 2.0 * (y as f64 + 0.5) / s
                };
                let n: f64 = rng.sample(StandardNormal);
                out.push((z * (1.0 + 0.01 * n)) as f32);
            }
        }
        out
    }
}

/// Renders `n` samples of `modality` with balanced labels (`i % classes`).
/// Each sample is seeded from `(world.seed, dataset_id, i)`.
pub fn gen_synthetic(
    world: &SyntheticWorld,
    dataset_id: &DatasetId,
    modality: Modality,
    n: usize,
) -> Result<Vec<VisualSample>> {
    world.validate()?;
    if n == 0 {
        return Err(Error::contract("gen_synthetic needs n >= 1"));
    }
    let tag = str_tag(dataset_id.as_str());
    (0..n)
        .map(|i| render_one(world, dataset_id, modality, i % world.classes, &mut rng_for(world.seed, &[tag, i as u64])))
        .collect()
}

fn render_one(
    world: &SyntheticWorld,
    dataset_id: &DatasetId,
    modality: Modality,
    label: usize,
    rng: &mut SeedRng,
) -> Result<VisualSample> {
    let scene = Scene::sample(world, label, rng);
    let s = world.size;
    match modality {
        Modality::Image => {
            let mut rgb = Vec::with_capacity(s * s * 3);
            scene.render_rgb(world, scene.start, rng, &mut rgb);
            VisualSample::new(Modality::Image, [1, s, s, 3], rgb, label, dataset_id.clone())
        }
        Modality::Video => {
            let mut rgb = Vec::with_capacity(world.frames * s * s * 3);
            for f in 0..world.frames {
                scene.render_rgb(world, scene.center(f, world.frames), rng, &mut rgb);
            }
            VisualSample::new(Modality::Video, [world.frames, s, s, 3], rgb, label, dataset_id.clone())
        }
        Modality::Rgbd => {
            let mut rgb = Vec::with_capacity(s * s * 3);
            scene.render_rgb(world, scene.start, rng, &mut rgb);
            let disparity = disparity_normalize(&scene.depth(world, rng), world.disparity)?;
            crate::sample::canonicalize(
                crate::sample::RawInput::Rgbd {
                    height: s,
                    width: s,
                    rgb: &rgb,
                    disparity: &disparity,
                },
                label,
                dataset_id.clone(),
            )
        }
    }
}

/// Scene depth for an RGBD sample, before disparity conversion. Exposed so
/// tests can relate the stored disparity back to the rendered geometry.
pub fn render_depth(world: &SyntheticWorld, dataset_id: &DatasetId, index: usize) -> Vec<f32> {
    let label = index % world.classes;
    let mut rng = rng_for(world.seed, &[str_tag(dataset_id.as_str()), index as u64]);
    let scene = Scene::sample(world, label, &mut rng);
    let mut sink = Vec::new();
    scene.render_rgb(world, scene.start, &mut rng, &mut sink);
    scene.depth(world, &mut rng)
}
