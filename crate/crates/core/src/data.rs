//! Dataset ingestion, patch expansion and 8-bit export.
//!
//! Pairs are discovered either from `<root>/a/<name>.<ext>` matched with
//! `<root>/b/<name>.<ext>`, or from a manifest of `pathA,pathB` lines.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ExtendedColorType, ImageError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FusionError, Result};
use crate::types::{validate_pair, FusedImage, Image, ImagePair, TaskKind, MIN_SIDE};

pub const DEFAULT_PATCH: usize = 64;
pub const DEFAULT_STRIDE: usize = 32;

const EXTENSIONS: [&str; 6] = ["png", "bmp", "tif", "tiff", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColorPolicy {
    /// Color sources are reduced to luminance at load time.
    GrayReplicate,
    /// Color is kept; the network sees luminance and chroma is reattached at export.
    #[default]
    LuminanceFuse,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairingRule {
    /// Same file stem in two sibling directories under the root.
    Subdirs { a: String, b: String },
    /// One `pathA,pathB` pair per line; relative paths resolve against the
    /// manifest's directory.
    Manifest(PathBuf),
}

impl Default for PairingRule {
    fn default() -> Self {
        PairingRule::Subdirs {
            a: "a".into(),
            b: "b".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub pairing: PairingRule,
    pub task: TaskKind,
    pub color_policy: ColorPolicy,
}

impl DatasetSpec {
    pub fn new(root: impl Into<PathBuf>, task: TaskKind) -> Self {
        DatasetSpec {
            root: root.into(),
            pairing: PairingRule::default(),
            task,
            color_policy: ColorPolicy::default(),
        }
    }

    pub fn with_manifest(mut self, manifest: impl Into<PathBuf>) -> Self {
        self.pairing = PairingRule::Manifest(manifest.into());
        self
    }

    pub fn with_color_policy(mut self, policy: ColorPolicy) -> Self {
        self.color_policy = policy;
        self
    }
}

fn decode_error(path: &Path, e: impl ToString) -> FusionError {
    FusionError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn write_error(e: ImageError) -> FusionError {
    match e {
        ImageError::IoError(io) => FusionError::Io(io),
        other => FusionError::Io(std::io::Error::other(other.to_string())),
    }
}

/// Decodes a file into a normalized [0, 1] image. 16-bit files are scaled by
/// 65535, everything else by 255; alpha is dropped.
pub fn load_image(path: &Path, policy: ColorPolicy) -> Result<Image> {
    let reader = image::ImageReader::open(path)?
        .with_guessed_format()
        .map_err(|e| decode_error(path, e))?;
    let img = reader.decode().map_err(|e| decode_error(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let color = img.color();
    let wide = color.bytes_per_pixel() / color.channel_count().max(1) >= 2;
    let keep_color = color.has_color() && policy == ColorPolicy::LuminanceFuse;
    let (channels, interleaved, bit_depth): (usize, Vec<f64>, u8) = match (keep_color, wide) {
        (true, true) => (3, scale16(img.to_rgb16().into_raw()), 16),
        (true, false) => (3, scale8(img.to_rgb8().into_raw()), 8),
        (false, true) => (1, gray16(&img), 16),
        (false, false) => (1, gray8(&img), 8),
    };
    let mut planar = vec![0.0; interleaved.len()];
    let n = h * w;
    for (k, v) in interleaved.into_iter().enumerate() {
        planar[(k % channels) * n + k / channels] = v;
    }
    Image::new(id, h, w, channels, planar)
        .map(|i| i.with_bit_depth(bit_depth))
        .map_err(|e| match e {
            FusionError::ShapeTooSmall { .. } => e,
            other => decode_error(path, other),
        })
}

fn scale8(raw: Vec<u8>) -> Vec<f64> {
    raw.into_iter().map(|v| v as f64 / 255.0).collect()
}

fn scale16(raw: Vec<u16>) -> Vec<f64> {
    raw.into_iter().map(|v| v as f64 / 65535.0).collect()
}

// Color files under GrayReplicate go through BT.601 luminance so that the
// result matches `Image::luminance`.
fn gray8(img: &DynamicImage) -> Vec<f64> {
    if img.color().has_color() {
        let rgb = scale8(img.to_rgb8().into_raw());
        rgb.chunks_exact(3).map(luma).collect()
    } else {
        scale8(img.to_luma8().into_raw())
    }
}

fn gray16(img: &DynamicImage) -> Vec<f64> {
    if img.color().has_color() {
        let rgb = scale16(img.to_rgb16().into_raw());
        rgb.chunks_exact(3).map(luma).collect()
    } else {
        scale16(img.to_luma16().into_raw())
    }
}

fn luma(p: &[f64]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn is_image_file(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn files_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if is_image_file(&path) {
            let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            if out.insert(stem.clone(), path).is_some() {
                return Err(FusionError::UnpairedFile(format!("{stem} (duplicate stem in {})", dir.display())));
            }
        }
    }
    Ok(out)
}

/// Resolves the (A, B) file paths of a dataset, in a deterministic order.
pub fn discover_pairs(spec: &DatasetSpec) -> Result<Vec<(PathBuf, PathBuf)>> {
    if !spec.root.exists() {
        return Err(FusionError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("dataset root {} does not exist", spec.root.display()),
        )));
    }
    match &spec.pairing {
        PairingRule::Subdirs { a, b } => {
            let files_a = files_by_stem(&spec.root.join(a))?;
            let mut files_b = files_by_stem(&spec.root.join(b))?;
            let mut pairs = Vec::with_capacity(files_a.len());
            for (stem, pa) in files_a {
                match files_b.remove(&stem) {
                    Some(pb) => pairs.push((pa, pb)),
                    None => return Err(FusionError::UnpairedFile(pa.display().to_string())),
                }
            }
            if let Some(pb) = files_b.into_values().next() {
                return Err(FusionError::UnpairedFile(pb.display().to_string()));
            }
            Ok(pairs)
        }
        PairingRule::Manifest(manifest) => {
            let manifest = if manifest.is_absolute() {
                manifest.clone()
            } else {
                spec.root.join(manifest)
            };
            let base = manifest.parent().unwrap_or(Path::new("."));
            let text = fs::read_to_string(&manifest)?;
            let mut pairs = Vec::new();
            for line in text.lines().map(str::trim) {
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (a, b) = line
                    .split_once(',')
                    .ok_or_else(|| FusionError::UnpairedFile(line.to_string()))?;
                let (a, b) = (a.trim(), b.trim());
                if a.is_empty() || b.is_empty() {
                    return Err(FusionError::UnpairedFile(line.to_string()));
                }
                pairs.push((base.join(a), base.join(b)));
            }
            Ok(pairs)
        }
    }
}

pub fn load_pair(path_a: &Path, path_b: &Path, task: TaskKind, policy: ColorPolicy) -> Result<ImagePair> {
    let a = load_image(path_a, policy)?;
    let b = load_image(path_b, policy)?;
    validate_pair(&a, &b, task)
}

/// Loads and validates every pair of a dataset. Files are decoded in parallel
/// and returned in discovery order.
pub fn load_pairs(spec: &DatasetSpec) -> Result<Vec<ImagePair>> {
    discover_pairs(spec)?
        .par_iter()
        .map(|(a, b)| load_pair(a, b, spec.task, spec.color_policy))
        .collect()
}

/// Fixed-size aligned crops of a list of pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub patches: Vec<ImagePair>,
    pub patch: usize,
    pub stride: usize,
    /// Id of the source pair each patch was cut from.
    pub source_ids: Vec<String>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

fn offsets(extent: usize, patch: usize, stride: usize) -> impl Iterator<Item = usize> {
    (0..=(extent - patch) / stride).map(move |k| k * stride)
}

/// Sliding-window crops of size `patch` at `stride`, row-major within each
/// pair and in pair order.
pub fn expand_patches(pairs: &[ImagePair], patch: usize, stride: usize) -> Result<PatchSet> {
    if patch < MIN_SIDE || stride == 0 {
        return Err(FusionError::InvalidConfig(format!(
            "patch must be >= {MIN_SIDE} and stride >= 1 (got {patch}, {stride})"
        )));
    }
    let mut patches = Vec::new();
    let mut source_ids = Vec::new();
    for pair in pairs {
        let (h, w) = pair.shape();
        if patch > h.min(w) {
            return Err(FusionError::PatchTooLarge {
                patch,
                dimension: h.min(w),
            });
        }
        for top in offsets(h, patch, stride) {
            for left in offsets(w, patch, stride) {
                let a = pair.a().crop(top, left, patch, patch)?;
                let b = pair.b().crop(top, left, patch, patch)?;
                patches.push(validate_pair(&a, &b, pair.task())?);
                source_ids.push(pair.a().id().to_string());
            }
        }
    }
    Ok(PatchSet {
        patches,
        patch,
        stride,
        source_ids,
    })
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a [0, 1] plane as an 8-bit grayscale image; format follows the
/// file extension.
pub fn write_gray_png(plane: &[f64], height: usize, width: usize, path: &Path) -> Result<()> {
    if plane.len() != height * width {
        return Err(FusionError::shape(format!("{} values for a {height}x{width} plane", plane.len())));
    }
    let bytes: Vec<u8> = plane.iter().map(|&v| quantize(v)).collect();
    image::save_buffer(path, &bytes, width as u32, height as u32, ExtendedColorType::L8).map_err(write_error)
}

/// Recombines fused luminance with source chroma. Per pixel, each source's
/// (Cb, Cr) is weighted by its saturation |Cb - 0.5| + |Cr - 0.5|.
pub fn recombine_color(luma_plane: &[f64], pair: &ImagePair) -> [Vec<f64>; 3] {
    let (cb_a, cr_a) = pair.a().chroma();
    let (cb_b, cr_b) = pair.b().chroma();
    let n = luma_plane.len();
    let mut rgb = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for k in 0..n {
        let wa = (cb_a[k] - 0.5).abs() + (cr_a[k] - 0.5).abs();
        let wb = (cb_b[k] - 0.5).abs() + (cr_b[k] - 0.5).abs();
        let (cb, cr) = if wa + wb > 0.0 {
            (
                (wa * cb_a[k] + wb * cb_b[k]) / (wa + wb),
                (wa * cr_a[k] + wb * cr_b[k]) / (wa + wb),
            )
        } else {
            (0.5, 0.5)
        };
        let y = luma_plane[k];
        let r = y + 1.402 * (cr - 0.5);
        let b = y + 1.772 * (cb - 0.5);
        let g = (y - 0.299 * r - 0.114 * b) / 0.587;
        rgb[0][k] = r.clamp(0.0, 1.0);
        rgb[1][k] = g.clamp(0.0, 1.0);
        rgb[2][k] = b.clamp(0.0, 1.0);
    }
    rgb
}

/// Writes the fused result as an 8-bit file: grayscale (channel mean) unless
/// either source carries color.
pub fn export_fused(f: &FusedImage, original: &ImagePair, path: &Path) -> Result<()> {
    if f.shape() != original.shape() {
        return Err(FusionError::DimensionMismatch {
            left: f.shape(),
            right: original.shape(),
        });
    }
    let (h, w) = f.shape();
    let gray = f.gray_plane();
    if !original.a().is_color() && !original.b().is_color() {
        return write_gray_png(&gray.data, h, w, path);
    }
    let rgb = recombine_color(&gray.data, original);
    let mut bytes = Vec::with_capacity(3 * h * w);
    for k in 0..h * w {
        bytes.extend(rgb.iter().map(|c| quantize(c[k])));
    }
    image::save_buffer(path, &bytes, w as u32, h as u32, ExtendedColorType::Rgb8).map_err(write_error)
}
