use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DatasetId(pub String);

impl DatasetId {
    pub fn new(s: impl Into<String>) -> Self {
        DatasetId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for DatasetId {
    fn from(s: &str) -> Self {
        DatasetId(s.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Video,
    Rgbd,
}

impl Modality {
    pub fn channels(self) -> usize {
        match self {
            Modality::Image | Modality::Video => 3,
            Modality::Rgbd => 4,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Image => "image",
            Modality::Video => "video",
            Modality::Rgbd => "rgbd",
        })
    }
}

/// A labelled visual input stored as a `T×H×W×C` row-major tensor.
///
/// Images have `T = 1, C = 3`, videos `T > 1, C = 3`, and RGBD inputs
/// `T = 1, C = 4` with normalized disparity in channel 3.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualSample {
    pub modality: Modality,
    shape: [usize; 4],
    data: Vec<f32>,
    pub label: usize,
    pub dataset_id: DatasetId,
}

impl VisualSample {
    pub fn new(
        modality: Modality,
        shape: [usize; 4],
        data: Vec<f32>,
        label: usize,
        dataset_id: DatasetId,
    ) -> Result<Self> {
        let [t, h, w, c] = shape;
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::contract(format!(
                "sample shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        if h == 0 || w == 0 || t == 0 {
            return Err(Error::contract(format!("empty extent in {shape:?}")));
        }
        let ok = match modality {
            Modality::Image => t == 1 && c == 3,
            // a one-frame video is allowed: it is how frame-level clips are fed
            Modality::Video => c == 3,
            Modality::Rgbd => t == 1 && c == 4,
        };
        if !ok {
            return Err(Error::contract(format!(
                "shape {shape:?} inconsistent with modality {modality}"
            )));
        }
        Ok(VisualSample {
            modality,
            shape,
            data,
            label,
            dataset_id,
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frames(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[3]
    }

    pub fn at(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        let [_, h, w, ch] = self.shape;
        self.data[((t * h + y) * w + x) * ch + c]
    }

    /// Mutable view on the raw values; shape and modality are fixed.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Keeps only the RGB channels of an RGBD sample, as an image.
    pub fn rgb_part(&self) -> Result<VisualSample> {
        self.require(Modality::Rgbd, "rgb_part")?;
        let data = self.data.chunks(4).flat_map(|px| px[..3].iter().copied()).collect();
        let [t, h, w, _] = self.shape;
        VisualSample::new(Modality::Image, [t, h, w, 3], data, self.label, self.dataset_id.clone())
    }

    /// The disparity channel of an RGBD sample as an `H×W` map.
    pub fn depth_channel(&self) -> Result<Vec<f32>> {
        self.require(Modality::Rgbd, "depth_channel")?;
        Ok(self.data.chunks(4).map(|px| px[3]).collect())
    }

    /// RGBD sample with the RGB channels zeroed ("depth only").
    pub fn depth_only(&self) -> Result<VisualSample> {
        self.require(Modality::Rgbd, "depth_only")?;
        let mut out = self.clone();
        for px in out.data.chunks_mut(4) {
            px[..3].fill(0.0);
        }
        Ok(out)
    }

    pub(crate) fn require(&self, m: Modality, op: &str) -> Result<()> {
        if self.modality != m {
            return Err(Error::contract(format!(
                "{op} expects a {m} sample, got {}",
                self.modality
            )));
        }
        Ok(())
    }
}

/// Builds a sample from modality-specific raw parts.
pub enum RawInput<'a> {
    /// `H×W×3` pixels.
    Image { height: usize, width: usize, rgb: &'a [f32] },
    /// `T×H×W×3` frames.
    Video { frames: usize, height: usize, width: usize, rgb: &'a [f32] },
    /// `H×W×3` pixels plus an already normalized `H×W` disparity map.
    Rgbd { height: usize, width: usize, rgb: &'a [f32], disparity: &'a [f32] },
}

/// Lays out any supported modality as a 4D `T×H×W×C` sample.
pub fn canonicalize(raw: RawInput<'_>, label: usize, dataset_id: DatasetId) -> Result<VisualSample> {
    match raw {
        RawInput::Image { height, width, rgb } => {
            VisualSample::new(Modality::Image, [1, height, width, 3], rgb.to_vec(), label, dataset_id)
        }
        RawInput::Video {
            frames,
            height,
            width,
            rgb,
        } => VisualSample::new(Modality::Video, [frames, height, width, 3], rgb.to_vec(), label, dataset_id),
        RawInput::Rgbd {
            height,
            width,
            rgb,
            disparity,
        } => {
            if rgb.len() != height * width * 3 || disparity.len() != height * width {
                return Err(Error::contract("rgbd parts do not match the stated extents"));
            }
            let data = rgb
                .chunks(3)
                .zip(disparity)
                .flat_map(|(px, &d)| [px[0], px[1], px[2], d])
                .collect();
            VisualSample::new(Modality::Rgbd, [1, height, width, 4], data, label, dataset_id)
        }
    }
}
