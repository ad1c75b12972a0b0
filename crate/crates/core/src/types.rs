//! Domain model shared by every stage: source images, pairs, task presets and
//! network configuration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{FusionError, Result};
use crate::tensor::Tensor;

/// Smallest accepted side length. An 11x11 SSIM window and the 13x13 receptive
/// field of the dilated block both fit.
pub const MIN_SIDE: usize = 16;

/// BT.601 luma coefficients.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// A source image with values normalized to [0, 1], stored as planar channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    id: String,
    height: usize,
    width: usize,
    channels: usize,
    bit_depth: u8,
    data: Vec<f64>,
}

impl Image {
    /// Builds an image from planar data (`channels` planes of `height * width`).
    /// Only shape is checked here; value range is checked by [`validate_pair`].
    pub fn new(
        id: impl Into<String>,
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(FusionError::ChannelMismatch {
                expected: 3,
                found: channels,
            });
        }
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(FusionError::ShapeTooSmall { height, width });
        }
        if data.len() != height * width * channels {
            return Err(FusionError::shape(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Image {
            id: id.into(),
            height,
            width,
            channels,
            bit_depth: 8,
            data,
        })
    }

    pub fn gray(id: impl Into<String>, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(id, height, width, 1, data)
    }

    pub fn with_bit_depth(mut self, bit_depth: u8) -> Self {
        self.bit_depth = bit_depth;
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_color(&self) -> bool {
        self.channels == 3
    }

    pub fn bit_depth(&self) -> u8 {
        self.bit_depth
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Luminance plane; the plane itself for grayscale images.
    pub fn luminance(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.clone();
        }
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((r, g), b)| LUMA[0] * r + LUMA[1] * g + LUMA[2] * b)
            .collect()
    }

    /// Full-range BT.601 (Cb, Cr) planes centered at 0.5. Gray images carry
    /// neutral chroma.
    pub fn chroma(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.height * self.width;
        if self.channels == 1 {
            return (vec![0.5; n], vec![0.5; n]);
        }
        let y = self.luminance();
        let (r, b) = (self.plane(0), self.plane(2));
        let cb = (0..n).map(|k| 0.5 + (b[k] - y[k]) / 1.772).collect();
        let cr = (0..n).map(|k| 0.5 + (r[k] - y[k]) / 1.402).collect();
        (cb, cr)
    }

    /// The network input stream: luminance replicated to three channels.
    pub fn stream(&self) -> Tensor {
        Tensor::replicate_plane(&self.luminance(), 3, self.height, self.width)
    }

    pub fn gray_plane(&self) -> Plane {
        Plane {
            height: self.height,
            width: self.width,
            data: self.luminance(),
        }
    }

    pub fn crop(&self, top: usize, left: usize, size_h: usize, size_w: usize) -> Result<Image> {
        let t = Tensor::from_vec(self.channels, self.height, self.width, self.data.clone())?
            .crop(top, left, size_h, size_w);
        Ok(Image {
            id: format!("{}@{top},{left}", self.id),
            height: size_h,
            width: size_w,
            channels: self.channels,
            bit_depth: self.bit_depth,
            data: t.into_vec(),
        })
    }

    fn check_range(&self) -> Result<()> {
        match self
            .data
            .iter()
            .position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0)
        {
            Some(index) => Err(FusionError::ValueOutOfRange {
                value: self.data[index],
                index,
            }),
            None => Ok(()),
        }
    }
}

/// A single grayscale plane. Metrics operate on these.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(FusionError::shape(format!(
                "{} values for a {height}x{width} plane",
                data.len()
            )));
        }
        Ok(Plane {
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    InfraredVisible,
    MriPet,
    MultiFocus,
    MultiExposure,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::InfraredVisible,
        TaskKind::MriPet,
        TaskKind::MultiFocus,
        TaskKind::MultiExposure,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::InfraredVisible => "ir-vis",
            TaskKind::MriPet => "mri-pet",
            TaskKind::MultiFocus => "multi-focus",
            TaskKind::MultiExposure => "multi-exposure",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ir-vis" | "infrared-visible" | "irvis" => Ok(TaskKind::InfraredVisible),
            "mri-pet" | "medical" => Ok(TaskKind::MriPet),
            "multi-focus" | "mf" => Ok(TaskKind::MultiFocus),
            "multi-exposure" | "me" => Ok(TaskKind::MultiExposure),
            other => Err(FusionError::InvalidConfig(format!("unknown task `{other}`"))),
        }
    }
}

/// Two registered sources of identical size, tagged with their fusion task.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    a: Image,
    b: Image,
    task: TaskKind,
}

impl ImagePair {
    pub fn a(&self) -> &Image {
        &self.a
    }

    pub fn b(&self) -> &Image {
        &self.b
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn shape(&self) -> (usize, usize) {
        self.a.shape()
    }

    pub fn streams(&self) -> (Tensor, Tensor) {
        (self.a.stream(), self.b.stream())
    }

    pub fn swapped(&self) -> ImagePair {
        ImagePair {
            a: self.b.clone(),
            b: self.a.clone(),
            task: self.task,
        }
    }
}

/// Checks that `a` and `b` can be fused together and bundles them.
pub fn validate_pair(a: &Image, b: &Image, task: TaskKind) -> Result<ImagePair> {
    if a.shape() != b.shape() {
        return Err(FusionError::DimensionMismatch {
            left: a.shape(),
            right: b.shape(),
        });
    }
    a.check_range()?;
    b.check_range()?;
    Ok(ImagePair {
        a: a.clone(),
        b: b.clone(),
        task,
    })
}

/// Network output: three channels in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct FusedImage {
    pixels: Tensor,
}

impl FusedImage {
    pub fn new(pixels: Tensor) -> Result<Self> {
        if pixels.channels() != 3 {
            return Err(FusionError::ChannelMismatch {
                expected: 3,
                found: pixels.channels(),
            });
        }
        Ok(FusedImage { pixels })
    }

    /// Replicates a grayscale plane to the three output channels.
    pub fn from_plane(plane: &Plane) -> Self {
        FusedImage {
            pixels: Tensor::replicate_plane(&plane.data, 3, plane.height, plane.width),
        }
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn shape(&self) -> (usize, usize) {
        self.pixels.spatial()
    }

    /// Channel mean, clamped to [0, 1].
    pub fn gray_plane(&self) -> Plane {
        let data = self
            .pixels
            .channel_mean()
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        Plane {
            height: self.pixels.height(),
            width: self.pixels.width(),
            data,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub attn_blocks: usize,
    pub attn_feat_channels: usize,
    pub aux_channels: usize,
    pub merge_channels: usize,
    pub drdb_growth: usize,
    pub drdb_count: usize,
    pub head_channels: usize,
    pub conv_kernel: usize,
    pub dilation: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            attn_blocks: 5,
            attn_feat_channels: 16,
            aux_channels: 32,
            merge_channels: 32,
            drdb_growth: 16,
            drdb_count: 1,
            head_channels: 16,
            conv_kernel: 3,
            dilation: 2,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attn_blocks == 0 {
            return Err(FusionError::InvalidConfig("attn_blocks must be >= 1".into()));
        }
        let widths = [
            ("attn_feat_channels", self.attn_feat_channels),
            ("aux_channels", self.aux_channels),
            ("merge_channels", self.merge_channels),
            ("drdb_growth", self.drdb_growth),
            ("head_channels", self.head_channels),
        ];
        for (name, w) in widths {
            if w == 0 {
                return Err(FusionError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.conv_kernel % 2 == 0 || self.dilation == 0 {
            return Err(FusionError::InvalidConfig(
                "conv_kernel must be odd and dilation >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Weights of the four objective terms: MSE and SSIM against each source.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_mi: f64,
    pub lambda_mj: f64,
    pub lambda_si: f64,
    pub lambda_sj: f64,
}

impl LossWeights {
    pub fn new(lambda_mi: f64, lambda_mj: f64, lambda_si: f64, lambda_sj: f64) -> Result<Self> {
        let w = LossWeights {
            lambda_mi,
            lambda_mj,
            lambda_si,
            lambda_sj,
        };
        let all = w.as_array();
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(FusionError::InvalidConfig(
                "loss weights must be finite and nonnegative".into(),
            ));
        }
        if all.iter().all(|v| *v == 0.0) {
            return Err(FusionError::InvalidConfig(
                "at least one loss weight must be positive".into(),
            ));
        }
        Ok(w)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.lambda_mi, self.lambda_mj, self.lambda_si, self.lambda_sj]
    }

    pub fn scaled(&self, alpha: f64) -> LossWeights {
        LossWeights {
            lambda_mi: alpha * self.lambda_mi,
            lambda_mj: alpha * self.lambda_mj,
            lambda_si: alpha * self.lambda_si,
            lambda_sj: alpha * self.lambda_sj,
        }
    }
}

/// Per-task weight presets for (MSE_i, MSE_j, SSIM_i, SSIM_j).
pub fn preset_weights(task: TaskKind) -> LossWeights {
    let (lambda_mi, lambda_mj, lambda_si, lambda_sj) = match task {
        TaskKind::InfraredVisible => (1.0, 0.5, 0.03, 0.03),
        TaskKind::MriPet => (1.0, 1.0, 0.01, 0.0),
        TaskKind::MultiFocus => (2.0, 5.0, 1.0, 1.0),
        TaskKind::MultiExposure => (0.5, 0.7, 1.3, 1.0),
    };
    LossWeights {
        lambda_mi,
        lambda_mj,
        lambda_si,
        lambda_sj,
    }
}
