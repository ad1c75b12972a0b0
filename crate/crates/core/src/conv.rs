//! Stride-1, zero-padded ("same") 2-D convolution with optional dilation,
//! lowered to GEMM through an im2col buffer.
//! The input gradient is itself a convolution, so backward never scatters
//! a column buffer back onto the image.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Arithmetic used inside the convolution GEMMs. Storage, bias, activations
/// and accumulation into gradients are always f64.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    #[default]
    F64,
    /// Products in f32; roughly twice the throughput.
    F32,
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        })
    }
}

impl std::str::FromStr for Precision {
    type Err = crate::error::FusionError;

    fn from_str(s: &str) -> crate::error::Result<Self> {
        match s {
            "f64" => Ok(Precision::F64),
            "f32" => Ok(Precision::F32),
            other => Err(crate::error::FusionError::InvalidConfig(format!("unknown precision `{other}`"))),
        }
    }
}

/// Static shape of a convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    fn taps(&self) -> usize {
        self.kernel * self.kernel
    }

    fn cols_rows(&self) -> usize {
        self.in_channels * self.taps()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1
    }

    /// Signed pixel offset of kernel index `k` along one axis.
    fn offset(&self, k: usize) -> isize {
        (k as isize - (self.kernel / 2) as isize) * self.dilation as isize
    }
}

trait Real: Copy + Default + Send + Sync {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
    );
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
    }
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
    }
}

/// C (m x n, row-major) = A * B + beta * C with explicit strides for A and B.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (isize, isize),
    b: &[T],
    (rsb, csb): (isize, isize),
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths are checked above and the strides describe
    // dense row- or column-major layouts of exactly those extents.
    unsafe { T::gemm_raw(m, k, n, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr()) }
}

fn convert<T: Real>(x: &[f64]) -> Vec<T> {
    x.iter().map(|&v| T::from_f64(v)).collect()
}

/// Builds the (C_in * k * k) x (H * W) patch matrix. Pointwise layers use the
/// input itself.
fn im2col<T: Real>(input: &Tensor, shape: &ConvShape) -> Vec<T> {
    if shape.is_pointwise() {
        return convert(input.data());
    }
    let (h, w) = input.spatial();
    let n = h * w;
    let mut cols = vec![T::default(); shape.cols_rows() * n];
    for ci in 0..shape.in_channels {
        let plane = input.channel(ci);
        for ky in 0..shape.kernel {
            let dy = shape.offset(ky);
            for kx in 0..shape.kernel {
                let dx = shape.offset(kx);
                let row = (ci * shape.taps() + ky * shape.kernel + kx) * n;
                let dst = &mut cols[row..row + n];
                let (x0, x1) = valid_range(w, dx);
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = sy as usize * w;
                    let sx0 = (x0 as isize + dx) as usize;
                    let src = &plane[src_row + sx0..src_row + sx0 + (x1 - x0)];
                    for (d, s) in dst[y * w + x0..y * w + x1].iter_mut().zip(src) {
                        *d = T::from_f64(*s);
                    }
                }
            }
        }
    }
    cols
}

/// Output columns `x` whose source column `x + dx` lies inside `0..w`.
fn valid_range(w: usize, dx: isize) -> (usize, usize) {
    let lo = (-dx).max(0) as usize;
    let hi = (w as isize - dx.max(0)).max(0) as usize;
    (lo.min(w), hi)
}

fn forward_impl<T: Real>(input: &Tensor, weight: &[f64], bias: &[f64], shape: &ConvShape) -> Tensor {
    let (h, w) = input.spatial();
    let n = h * w;
    let k = shape.cols_rows();
    let cols = im2col::<T>(input, shape);
    let mut out = vec![T::default(); shape.out_channels * n];
    gemm(
        shape.out_channels,
        k,
        n,
        &convert::<T>(weight),
        (k as isize, 1),
        &cols,
        (n as isize, 1),
        T::default(),
        &mut out,
    );
    let mut result = Tensor::zeros(shape.out_channels, h, w);
    for (co, b) in bias.iter().enumerate() {
        for (d, s) in result.channel_mut(co).iter_mut().zip(&out[co * n..(co + 1) * n]) {
            *d = s.to_f64() + b;
        }
    }
    result
}

pub fn conv2d_forward(input: &Tensor, weight: &[f64], bias: &[f64], shape: &ConvShape) -> Tensor {
    conv2d_forward_with(input, weight, bias, shape, Precision::F64)
}

pub fn conv2d_forward_with(
    input: &Tensor,
    weight: &[f64],
    bias: &[f64],
    shape: &ConvShape,
    precision: Precision,
) -> Tensor {
    debug_assert_eq!(input.channels(), shape.in_channels);
    debug_assert_eq!(weight.len(), shape.weight_len());
    match precision {
        Precision::F64 => forward_impl::<f64>(input, weight, bias, shape),
        Precision::F32 => forward_impl::<f32>(input, weight, bias, shape),
    }
}

fn weight_grad_impl<T: Real>(input: &Tensor, grad_out: &Tensor, shape: &ConvShape, grad_weight: &mut [f64]) {
    let n = input.plane_len();
    let k = shape.cols_rows();
    let cols = im2col::<T>(input, shape);
    let mut gw = vec![T::default(); shape.weight_len()];
    // dW (Cout x K) = dY (Cout x N) * cols^T (N x K)
    gemm(
        shape.out_channels,
        n,
        k,
        &convert::<T>(grad_out.data()),
        (n as isize, 1),
        &cols,
        (1, n as isize),
        T::default(),
        &mut gw,
    );
    for (d, s) in grad_weight.iter_mut().zip(&gw) {
        *d += s.to_f64();
    }
}

fn pointwise_input_grad<T: Real>(weight: &[f64], grad_out: &Tensor, shape: &ConvShape) -> Tensor {
    let (h, w) = grad_out.spatial();
    let n = h * w;
    let k = shape.in_channels;
    let mut gx = vec![T::default(); k * n];
    // dX (Cin x N) = W^T (Cin x Cout) * dY (Cout x N)
    gemm(
        k,
        shape.out_channels,
        n,
        &convert::<T>(weight),
        (1, k as isize),
        &convert::<T>(grad_out.data()),
        (n as isize, 1),
        T::default(),
        &mut gx,
    );
    Tensor::from_vec(k, h, w, gx.into_iter().map(Real::to_f64).collect()).expect("pointwise shape")
}

/// Accumulates weight and bias gradients, and returns the input gradient when
/// `want_input` is set.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &[f64],
    grad_out: &Tensor,
    shape: &ConvShape,
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    want_input: bool,
) -> Option<Tensor> {
    conv2d_backward_with(input, weight, grad_out, shape, grad_weight, grad_bias, want_input, Precision::F64)
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_with(
    input: &Tensor,
    weight: &[f64],
    grad_out: &Tensor,
    shape: &ConvShape,
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    want_input: bool,
    precision: Precision,
) -> Option<Tensor> {
    for (co, gb) in grad_bias.iter_mut().enumerate() {
        *gb += grad_out.channel(co).iter().sum::<f64>();
    }
    match precision {
        Precision::F64 => weight_grad_impl::<f64>(input, grad_out, shape, grad_weight),
        Precision::F32 => weight_grad_impl::<f32>(input, grad_out, shape, grad_weight),
    }
    if !want_input {
        return None;
    }
    if shape.is_pointwise() {
        return Some(match precision {
            Precision::F64 => pointwise_input_grad::<f64>(weight, grad_out, shape),
            Precision::F32 => pointwise_input_grad::<f32>(weight, grad_out, shape),
        });
    }
    // The input gradient of a same-padded stride-1 convolution is the
    // convolution of dY with the spatially flipped, channel-transposed kernel.
    let flipped = ConvShape {
        in_channels: shape.out_channels,
        out_channels: shape.in_channels,
        ..*shape
    };
    let taps = shape.taps();
    let mut wt = vec![0.0; shape.weight_len()];
    for co in 0..shape.out_channels {
        for ci in 0..shape.in_channels {
            let src = &weight[(co * shape.in_channels + ci) * taps..][..taps];
            let dst = &mut wt[(ci * shape.out_channels + co) * taps..][..taps];
            for (t, v) in src.iter().enumerate() {
                dst[taps - 1 - t] = *v;
            }
        }
    }
    Some(conv2d_forward_with(grad_out, &wt, &vec![0.0; shape.in_channels], &flipped, precision))
}
