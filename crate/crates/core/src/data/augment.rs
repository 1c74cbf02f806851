use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::{Modality, VisualSample};

/// Clamp range for disparity (reciprocal depth, in scene units).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisparityRange {
    pub d_min: f64,
    pub d_max: f64,
}

impl Default for DisparityRange {
    fn default() -> Self {
        DisparityRange {
            d_min: 0.01,
            d_max: 1.0,
        }
    }
}

/// Per-channel mean and std used to standardize RGB values in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RgbNorm {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for RgbNorm {
    fn default() -> Self {
        RgbNorm {
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

impl RgbNorm {
    /// Standardizes interleaved RGB values in place.
    pub fn apply(&self, rgb: &mut [f32]) {
        for px in rgb.chunks_mut(3) {
            for c in 0..3 {
                px[c] = (px[c] - self.mean[c]) / self.std[c];
            }
        }
    }
}

/// Converts depth to disparity, clamps to `[d_min, d_max]` and maps that
/// range affinely onto `[0, 1]`. Non-positive or non-finite depths are
/// invalid and map to 0.
pub fn disparity_normalize(depth: &[f32], range: DisparityRange) -> Result<Vec<f32>> {
    let DisparityRange { d_min, d_max } = range;
    if !(d_min > 0.0 && d_max > d_min) {
        return Err(Error::contract(format!("invalid disparity range [{d_min}, {d_max}]")));
    }
    let valid = |z: f32| z.is_finite() && z > 0.0;
    if !depth.iter().any(|&z| valid(z)) {
        return Err(Error::Degenerate("depth map has no valid pixels".into()));
    }
    Ok(depth
        .iter()
        .map(|&z| {
            if !valid(z) {
                return 0.0;
            }
            let disp = (1.0 / z as f64).clamp(d_min, d_max);
            ((disp - d_min) / (d_max - d_min)) as f32
        })
        .collect())
}

/// With probability `p`, zeroes the RGB channels of an RGBD sample.
pub fn rgb_channel_drop<R: Rng + ?Sized>(sample: &VisualSample, p: f64, rng: &mut R) -> Result<VisualSample> {
    sample.require(Modality::Rgbd, "rgb_channel_drop")?;
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::contract(format!("drop probability {p} outside [0, 1]")));
    }
    if rng.gen::<f64>() < p {
        sample.depth_only()
    } else {
        Ok(sample.clone())
    }
}
