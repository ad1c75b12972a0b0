//! Fusion quality metrics: EN, SD, MI, FMI, SCD, CC, Qabf and SSIM.
//!
//! All metrics work on grayscale planes in [0, 1]: source luminance and the
//! channel mean of the fused output. Histogram metrics use 256 uniform bins
//! (value * 255, rounded), logarithms are base 2.

use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FusionError, Result};
use crate::losses::ssim_plane;
use crate::types::{FusedImage, ImagePair, Plane};

pub const BINS: usize = 256;

// Edge-preservation sigmoid constants (strength g, orientation alpha).
pub const QABF_GAMMA_G: f64 = 0.9994;
pub const QABF_KAPPA_G: f64 = -15.0;
pub const QABF_SIGMA_G: f64 = 0.5;
pub const QABF_GAMMA_A: f64 = 0.9879;
pub const QABF_KAPPA_A: f64 = -22.0;
pub const QABF_SIGMA_A: f64 = 0.8;

/// Variance floor below which a correlation is treated as undefined.
const DEGENERATE_VAR: f64 = 1e-20;

pub fn bin(v: f64) -> usize {
    (v.clamp(0.0, 1.0) * 255.0).round() as usize
}

fn histogram(x: &Plane) -> [f64; BINS] {
    let mut h = [0.0; BINS];
    for &v in &x.data {
        h[bin(v)] += 1.0;
    }
    h
}

fn shannon(counts: &[f64], total: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / total;
            -p * p.log2()
        })
        .sum()
}

/// Shannon entropy of the 256-bin intensity histogram, in bits.
pub fn entropy(x: &Plane) -> f64 {
    shannon(&histogram(x), x.len() as f64)
}

/// Population standard deviation on the 0-255 scale.
pub fn std_dev(x: &Plane) -> f64 {
    // Shifting by the first pixel keeps constant images at exactly zero.
    let shift = x.data.first().copied().unwrap_or(0.0);
    let n = x.len() as f64;
    let mean = x.data.iter().map(|v| v - shift).sum::<f64>() / n;
    let var = x.data.iter().map(|v| (v - shift - mean).powi(2)).sum::<f64>() / n;
    255.0 * var.sqrt()
}

/// Mutual information of two planes from their joint histogram.
pub fn mutual_information_pair(x: &Plane, y: &Plane) -> f64 {
    let n = x.len() as f64;
    let mut joint = vec![0.0; BINS * BINS];
    let mut px = [0.0; BINS];
    let mut py = [0.0; BINS];
    for (&a, &b) in x.data.iter().zip(&y.data) {
        let (i, j) = (bin(a), bin(b));
        joint[i * BINS + j] += 1.0;
        px[i] += 1.0;
        py[j] += 1.0;
    }
    let mut mi = 0.0;
    for i in 0..BINS {
        if px[i] == 0.0 {
            continue;
        }
        for j in 0..BINS {
            let c = joint[i * BINS + j];
            if c > 0.0 {
                mi += (c / n) * (c * n / (px[i] * py[j])).log2();
            }
        }
    }
    mi
}

/// MI(f, a) + MI(f, b).
pub fn mutual_information(a: &Plane, b: &Plane, f: &Plane) -> f64 {
    mutual_information_pair(f, a) + mutual_information_pair(f, b)
}

/// Pearson correlation; 0 when either side has no variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= DEGENERATE_VAR * n || syy <= DEGENERATE_VAR * n {
        return 0.0;
    }
    sxy / (sxx.sqrt() * syy.sqrt())
}

/// Sum of correlations of differences: r(f - a, b) + r(f - b, a).
pub fn scd(a: &Plane, b: &Plane, f: &Plane) -> f64 {
    let fa: Vec<f64> = f.data.iter().zip(&a.data).map(|(x, y)| x - y).collect();
    let fb: Vec<f64> = f.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
    pearson(&fa, &b.data) + pearson(&fb, &a.data)
}

/// Mean of r(f, a) and r(f, b).
pub fn cc(a: &Plane, b: &Plane, f: &Plane) -> f64 {
    0.5 * (pearson(&f.data, &a.data) + pearson(&f.data, &b.data))
}

/// Sobel responses with replicated borders: (horizontal, vertical).
pub fn sobel(x: &Plane) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = x.shape();
    let at = |r: isize, c: isize| {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        x.data[r * w + c]
    };
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let k = r as usize * w + c as usize;
            gx[k] = (at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1));
            gy[k] = (at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1))
                - (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1));
        }
    }
    (gx, gy)
}

/// Edge strength and orientation per pixel.
fn edge_field(x: &Plane) -> (Vec<f64>, Vec<f64>) {
    let (gx, gy) = sobel(x);
    let strength = gx.iter().zip(&gy).map(|(a, b)| (a * a + b * b).sqrt()).collect();
    let angle = gx
        .iter()
        .zip(&gy)
        .map(|(&a, &b)| if a == 0.0 { FRAC_PI_2 } else { (b / a).atan() })
        .collect();
    (strength, angle)
}

/// Per-pixel edge preservation of source `s` in the fused image.
fn preservation(gs: &[f64], as_: &[f64], gf: &[f64], af: &[f64]) -> Vec<f64> {
    (0..gs.len())
        .map(|k| {
            let g = if gs[k] == 0.0 || gf[k] == 0.0 {
                0.0
            } else if gs[k] > gf[k] {
                gf[k] / gs[k]
            } else {
                gs[k] / gf[k]
            };
            let a = 1.0 - (as_[k] - af[k]).abs() / FRAC_PI_2;
            let qg = QABF_GAMMA_G / (1.0 + (QABF_KAPPA_G * (g - QABF_SIGMA_G)).exp());
            let qa = QABF_GAMMA_A / (1.0 + (QABF_KAPPA_A * (a - QABF_SIGMA_A)).exp());
            qg * qa
        })
        .collect()
}

/// Gradient-based edge preservation index in [0, 1].
pub fn qabf(a: &Plane, b: &Plane, f: &Plane) -> f64 {
    let (ga, aa) = edge_field(a);
    let (gb, ab) = edge_field(b);
    let (gf, af) = edge_field(f);
    let qa = preservation(&ga, &aa, &gf, &af);
    let qb = preservation(&gb, &ab, &gf, &af);
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..ga.len() {
        num += qa[k] * ga[k] + qb[k] * gb[k];
        den += ga[k] + gb[k];
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Sobel gradient magnitude scaled by its maximum into [0, 1].
pub fn gradient_feature(x: &Plane) -> Plane {
    let (gx, gy) = sobel(x);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| (a * a + b * b).sqrt()).collect();
    let max = mag.iter().cloned().fold(0.0, f64::max);
    let data = if max > 0.0 {
        mag.iter().map(|v| v / max).collect()
    } else {
        mag
    };
    Plane {
        height: x.height,
        width: x.width,
        data,
    }
}

/// Feature mutual information on gradient-magnitude features, each term
/// normalized as 2 MI / (H_f + H_s), averaged over both sources.
pub fn fmi(a: &Plane, b: &Plane, f: &Plane) -> f64 {
    let (fa, fb, ff) = (gradient_feature(a), gradient_feature(b), gradient_feature(f));
    let hf = entropy(&ff);
    let term = |fs: &Plane| {
        let denom = hf + entropy(fs);
        if denom <= 0.0 {
            0.0
        } else {
            2.0 * mutual_information_pair(&ff, fs) / denom
        }
    };
    0.5 * (term(&fa) + term(&fb))
}

/// Mean of SSIM(f, a) and SSIM(f, b).
pub fn ssim_metric(a: &Plane, b: &Plane, f: &Plane) -> Result<f64> {
    let (h, w) = f.shape();
    Ok(0.5 * (ssim_plane(&f.data, &a.data, h, w)? + ssim_plane(&f.data, &b.data, h, w)?))
}

/// Values of all eight metrics for one fused result.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub en: f64,
    pub sd: f64,
    pub mi: f64,
    pub fmi: f64,
    pub scd: f64,
    pub cc: f64,
    pub qabf: f64,
    pub ssim: f64,
}

impl MetricValues {
    /// Column order used by every report.
    pub const NAMES: [&'static str; 8] = ["EN", "SD", "MI", "FMI", "SCD", "CC", "Qabf", "SSIM"];

    pub fn as_array(&self) -> [f64; 8] {
        [self.en, self.sd, self.mi, self.fmi, self.scd, self.cc, self.qabf, self.ssim]
    }

    pub fn from_array(v: [f64; 8]) -> Self {
        MetricValues {
            en: v[0],
            sd: v[1],
            mi: v[2],
            fmi: v[3],
            scd: v[4],
            cc: v[5],
            qabf: v[6],
            ssim: v[7],
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        Self::NAMES
            .iter()
            .position(|n| n.eq_ignore_ascii_case(name))
            .map(|i| self.as_array()[i])
    }

    pub fn compute(a: &Plane, b: &Plane, f: &Plane) -> Result<Self> {
        if a.shape() != f.shape() || b.shape() != f.shape() {
            return Err(FusionError::DimensionMismatch {
                left: a.shape(),
                right: f.shape(),
            });
        }
        Ok(MetricValues {
            en: entropy(f),
            sd: std_dev(f),
            mi: mutual_information(a, b, f),
            fmi: fmi(a, b, f),
            scd: scd(a, b, f),
            cc: cc(a, b, f),
            qabf: qabf(a, b, f),
            ssim: ssim_metric(a, b, f)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub method: String,
    pub per_pair: Vec<(String, MetricValues)>,
    pub aggregate: MetricValues,
}

/// Scores every (pair, fused) couple and averages each metric.
pub fn evaluate(pairs: &[ImagePair], fused: &[FusedImage]) -> Result<MetricReport> {
    if pairs.len() != fused.len() {
        return Err(FusionError::LengthMismatch {
            left: pairs.len(),
            right: fused.len(),
        });
    }
    if pairs.is_empty() {
        return Err(FusionError::EmptyDataset);
    }
    let per_pair = pairs
        .par_iter()
        .zip(fused.par_iter())
        .map(|(p, f)| {
            let values = MetricValues::compute(&p.a().gray_plane(), &p.b().gray_plane(), &f.gray_plane())?;
            Ok((p.a().id().to_string(), values))
        })
        .collect::<Result<Vec<_>>>()?;
    let aggregate = mean_values(per_pair.iter().map(|(_, v)| v));
    Ok(MetricReport {
        dataset: String::new(),
        method: String::new(),
        per_pair,
        aggregate,
    })
}

fn mean_values<'a>(values: impl Iterator<Item = &'a MetricValues>) -> MetricValues {
    let mut sum = [0.0; 8];
    let mut n = 0usize;
    for v in values {
        for (s, x) in sum.iter_mut().zip(v.as_array()) {
            *s += x;
        }
        n += 1;
    }
    MetricValues::from_array(sum.map(|s| s / n as f64))
}

impl MetricReport {
    pub fn with_labels(mut self, dataset: impl Into<String>, method: impl Into<String>) -> Self {
        self.dataset = dataset.into();
        self.method = method.into();
        self
    }

    /// One row per pair plus a final `mean` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
        let mut header = vec!["pair"];
        header.extend(MetricValues::NAMES);
        w.write_record(&header).map_err(csv_error)?;
        let rows = self
            .per_pair
            .iter()
            .map(|(id, v)| (id.as_str(), v))
            .chain(std::iter::once(("mean", &self.aggregate)));
        for (id, v) in rows {
            let mut rec = vec![id.to_string()];
            rec.extend(v.as_array().iter().map(|x| format!("{x:.6}")));
            w.write_record(&rec).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> FusionError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => FusionError::Io(io),
        other => FusionError::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

/// Aligned text table, methods as rows and metrics as columns.
pub fn format_table(rows: &[(String, MetricValues)]) -> String {
    let name_width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("Methods".len());
    let mut out = String::new();
    let _ = write!(out, "{:<name_width$}", "Methods");
    for n in MetricValues::NAMES {
        let _ = write!(out, " {n:>9}");
    }
    out.push('\n');
    for (name, v) in rows {
        let _ = write!(out, "{name:<name_width$}");
        for x in v.as_array() {
            let _ = write!(out, " {x:>9.4}");
        }
        out.push('\n');
    }
    out
}
