//! Training objective: per-source MSE and SSIM terms, linearly weighted.
//!
//! SSIM is the mean over all fully-contained 11x11 Gaussian windows
//! (sigma 1.5) with C1 = (0.01)^2 and C2 = (0.03)^2 on a unit dynamic range.
//! Multi-channel tensors are compared channel by channel and averaged.

use serde::{Deserialize, Serialize};

use crate::error::{FusionError, Result};
use crate::tensor::Tensor;
use crate::types::{FusedImage, Image, ImagePair, LossWeights};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse_i: f64,
    pub mse_j: f64,
    pub ssim_i: f64,
    pub ssim_j: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn combine(mse_i: f64, mse_j: f64, ssim_i: f64, ssim_j: f64, w: &LossWeights) -> Self {
        LossBreakdown {
            mse_i,
            mse_j,
            ssim_i,
            ssim_j,
            total: w.lambda_mi * mse_i + w.lambda_mj * mse_j + w.lambda_si * ssim_i + w.lambda_sj * ssim_j,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.mse_i, self.mse_j, self.ssim_i, self.ssim_j, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (k, v) in g.iter_mut().enumerate() {
        let d = k as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable "valid" Gaussian filter: (h-10) x (w-10) output.
fn filter_valid(src: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = g.iter().zip(&line[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (k, gk) in g.iter().enumerate() {
            let src_row = &rows[(y + k) * ow..(y + k + 1) * ow];
            for (o, s) in out[y * ow..(y + 1) * ow].iter_mut().zip(src_row) {
                *o += gk * s;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters an (h-10) x (w-10) map back to h x w.
fn filter_valid_adjoint(grad: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..oh {
        for (k, gk) in g.iter().enumerate() {
            let dst = &mut rows[(y + k) * ow..(y + k + 1) * ow];
            for (d, s) in dst.iter_mut().zip(&grad[y * ow..(y + 1) * ow]) {
                *d += gk * s;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let line = &mut out[y * w..(y + 1) * w];
        for x in 0..ow {
            let v = rows[y * ow + x];
            for (d, gk) in line[x..x + SSIM_WINDOW].iter_mut().zip(g) {
                *d += gk * v;
            }
        }
    }
    out
}

fn check_plane(x: &[f64], y: &[f64], h: usize, w: usize) -> Result<()> {
    if x.len() != h * w || y.len() != h * w {
        return Err(FusionError::shape(format!(
            "planes of {} and {} values for {h}x{w}",
            x.len(),
            y.len()
        )));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(FusionError::shape(format!("{h}x{w} is smaller than the SSIM window")));
    }
    Ok(())
}

/// Mean SSIM of two planes and, optionally, its gradient with respect to `x`.
fn ssim_plane_impl(x: &[f64], y: &[f64], h: usize, w: usize, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let g = gaussian_window();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mu_x = filter_valid(x, h, w, &g);
    let mu_y = filter_valid(y, h, w, &g);
    let e_xx = filter_valid(&xx, h, w, &g);
    let e_yy = filter_valid(&yy, h, w, &g);
    let e_xy = filter_valid(&xy, h, w, &g);
    let n = mu_x.len();
    let inv_n = 1.0 / n as f64;

    let mut total = 0.0;
    let (mut d_mu, mut d_xx, mut d_xy) = if want_grad {
        (vec![0.0; n], vec![0.0; n], vec![0.0; n])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for p in 0..n {
        let (mx, my) = (mu_x[p], mu_y[p]);
        let var_x = e_xx[p] - mx * mx;
        let var_y = e_yy[p] - my * my;
        let cov = e_xy[p] - mx * my;
        let a1 = 2.0 * mx * my + SSIM_C1;
        let a2 = 2.0 * cov + SSIM_C2;
        let b1 = mx * mx + my * my + SSIM_C1;
        let b2 = var_x + var_y + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if want_grad {
            // Partials with respect to the raw moments (mu_x, E[x^2], E[xy]).
            d_mu[p] = inv_n * s * (2.0 * my / a1 - 2.0 * my / a2 - 2.0 * mx / b1 + 2.0 * mx / b2);
            d_xx[p] = -inv_n * s / b2;
            d_xy[p] = inv_n * 2.0 * s / a2;
        }
    }
    let value = total * inv_n;
    if !want_grad {
        return (value, None);
    }
    let g_mu = filter_valid_adjoint(&d_mu, h, w, &g);
    let g_xx = filter_valid_adjoint(&d_xx, h, w, &g);
    let g_xy = filter_valid_adjoint(&d_xy, h, w, &g);
    let grad = (0..h * w).map(|q| g_mu[q] + 2.0 * x[q] * g_xx[q] + y[q] * g_xy[q]).collect();
    (value, Some(grad))
}

/// Mean windowed SSIM of two planes of size `h x w` (both at least 11).
pub fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize) -> Result<f64> {
    check_plane(x, y, h, w)?;
    Ok(ssim_plane_impl(x, y, h, w, false).0)
}

/// SSIM and d SSIM / d x.
pub fn ssim_plane_with_grad(x: &[f64], y: &[f64], h: usize, w: usize) -> Result<(f64, Vec<f64>)> {
    check_plane(x, y, h, w)?;
    let (v, g) = ssim_plane_impl(x, y, h, w, true);
    Ok((v, g.expect("gradient requested")))
}

/// SSIM between two images, on luminance.
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(FusionError::shape(format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    ssim_plane(&x.luminance(), &y.luminance(), x.height(), x.width())
}

fn check_tensors(o: &Tensor, t: &Tensor) -> Result<()> {
    if o.channels() != t.channels() || o.spatial() != t.spatial() {
        return Err(FusionError::shape(format!(
            "{}x{:?} vs {}x{:?}",
            o.channels(),
            o.spatial(),
            t.channels(),
            t.spatial()
        )));
    }
    Ok(())
}

fn mse_tensor(o: &Tensor, t: &Tensor) -> f64 {
    let s: f64 = o.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    s / o.len() as f64
}

/// Channel-averaged SSIM, optionally with its gradient.
fn ssim_tensor(o: &Tensor, t: &Tensor, want_grad: bool) -> (f64, Option<Tensor>) {
    let (h, w) = o.spatial();
    let c = o.channels();
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Tensor::zeros(c, h, w));
    for ch in 0..c {
        let (v, gch) = ssim_plane_impl(o.channel(ch), t.channel(ch), h, w, want_grad);
        total += v;
        if let (Some(grad), Some(gch)) = (grad.as_mut(), gch) {
            for (d, s) in grad.channel_mut(ch).iter_mut().zip(gch) {
                *d = s / c as f64;
            }
        }
    }
    (total / c as f64, grad)
}

/// `1 - SSIM(o, i)` against the source's network stream.
pub fn ssim_loss(o: &FusedImage, i: &Image) -> Result<f64> {
    let t = i.stream();
    check_tensors(o.pixels(), &t)?;
    check_plane(o.pixels().channel(0), t.channel(0), t.height(), t.width())?;
    Ok(1.0 - ssim_tensor(o.pixels(), &t, false).0)
}

/// Per-pixel mean squared error against the source's network stream.
pub fn mse_loss(f: &FusedImage, i: &Image) -> Result<f64> {
    let t = i.stream();
    check_tensors(f.pixels(), &t)?;
    Ok(mse_tensor(f.pixels(), &t))
}

pub fn total_loss(f: &FusedImage, pair: &ImagePair, w: &LossWeights) -> Result<LossBreakdown> {
    let (ti, tj) = pair.streams();
    Ok(total_loss_impl(f.pixels(), &ti, &tj, w, false)?.0)
}

/// Objective on raw tensors together with d total / d output.
pub fn total_loss_with_grad(
    output: &Tensor,
    target_i: &Tensor,
    target_j: &Tensor,
    w: &LossWeights,
) -> Result<(LossBreakdown, Tensor)> {
    let (loss, grad) = total_loss_impl(output, target_i, target_j, w, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

fn total_loss_impl(
    output: &Tensor,
    target_i: &Tensor,
    target_j: &Tensor,
    w: &LossWeights,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Tensor>)> {
    check_tensors(output, target_i)?;
    check_tensors(output, target_j)?;
    let (h, wd) = output.spatial();
    if h < SSIM_WINDOW || wd < SSIM_WINDOW {
        return Err(FusionError::shape(format!("{h}x{wd} is smaller than the SSIM window")));
    }
    let mse_i = mse_tensor(output, target_i);
    let mse_j = mse_tensor(output, target_j);
    let (s_i, g_si) = ssim_tensor(output, target_i, want_grad);
    let (s_j, g_sj) = ssim_tensor(output, target_j, want_grad);
    let loss = LossBreakdown::combine(mse_i, mse_j, 1.0 - s_i, 1.0 - s_j, w);
    if !want_grad {
        return Ok((loss, None));
    }
    let (g_si, g_sj) = (g_si.expect("grad"), g_sj.expect("grad"));
    let scale = 2.0 / output.len() as f64;
    let mut grad = Tensor::zeros(output.channels(), h, wd);
    for (k, d) in grad.data_mut().iter_mut().enumerate() {
        let o = output.data()[k];
        *d = w.lambda_mi * scale * (o - target_i.data()[k]) + w.lambda_mj * scale * (o - target_j.data()[k])
            - w.lambda_si * g_si.data()[k]
            - w.lambda_sj * g_sj.data()[k];
    }
    Ok((loss, Some(grad)))
}
