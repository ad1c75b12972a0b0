//! Synthetic infrared/visible style pairs for integration tests.
//!
//! Both sources share one scene layout (discs and boxes at random positions)
//! but carry different intensity cues: the infrared side shows hot objects as
//! soft bright blobs on a cool, smooth background, the visible side shows the
//! same objects with random reflectance and hard edges over a textured
//! background.

#![allow(dead_code)]

use crossfuse::{validate_pair, FusedImage, Image, ImagePair, LossWeights, Plane, TaskKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Object {
    cx: f64,
    cy: f64,
    r: f64,
    disc: bool,
    hot: bool,
    temperature: f64,
    reflectance: f64,
}

impl Object {
    /// Signed distance to the boundary, positive inside.
    fn inside(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        if self.disc {
            self.r - (dx * dx + dy * dy).sqrt()
        } else {
            (self.r - dx.abs()).min(0.6 * self.r - dy.abs())
        }
    }
}

pub fn ir_vis_pair(seed: u64, n: usize) -> ImagePair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nf = n as f64;
    let objects: Vec<Object> = (0..rng.random_range(3..=5))
        .map(|_| Object {
            cx: rng.random_range(0.15..0.85) * nf,
            cy: rng.random_range(0.15..0.85) * nf,
            r: rng.random_range(0.08..0.2) * nf,
            disc: rng.random_bool(0.5),
            hot: rng.random_bool(0.7),
            temperature: rng.random_range(0.7..0.95),
            reflectance: rng.random_range(0.1..0.9),
        })
        .collect();
    let (px, py) = (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3));
    let tilt = rng.random_range(-0.1..0.1);
    let mut ir = vec![0.0; n * n];
    let mut vis = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let texture = (fx * 6.0 / nf * std::f64::consts::TAU + px).sin() * (fy * 4.0 / nf * std::f64::consts::TAU + py).cos();
            let grain: f64 = rng.random_range(-1.0..1.0);
            let mut t = 0.18 + 0.08 * fy / nf + tilt * (fx / nf - 0.5) + 0.01 * grain;
            let mut v = 0.5 + 0.15 * texture + 0.05 * grain;
            for o in &objects {
                let d = o.inside(fx, fy);
                let heat = if o.hot { o.temperature } else { t + 0.03 };
                let soft = 1.0 / (1.0 + (-d / 1.5).exp());
                t = t.max(t + (heat - t) * soft);
                if d > 0.0 {
                    v = o.reflectance * (0.9 + 0.1 * texture);
                }
            }
            ir[y * n + x] = t.clamp(0.0, 1.0);
            vis[y * n + x] = v.clamp(0.0, 1.0);
        }
    }
    let a = Image::gray(format!("ir{seed}"), n, n, ir).unwrap();
    let b = Image::gray(format!("vis{seed}"), n, n, vis).unwrap();
    validate_pair(&a, &b, TaskKind::InfraredVisible).unwrap()
}

/// Per-pixel weighted mean of the sources, the minimizer of the MSE terms.
pub fn weighted_mean_fusion(pair: &ImagePair, w: &LossWeights) -> FusedImage {
    let (h, wd) = pair.shape();
    let s = w.lambda_mi + w.lambda_mj;
    let data = pair
        .a()
        .luminance()
        .iter()
        .zip(pair.b().luminance())
        .map(|(a, b)| (w.lambda_mi * a + w.lambda_mj * b) / s)
        .collect();
    FusedImage::from_plane(&Plane::new(h, wd, data).unwrap())
}
