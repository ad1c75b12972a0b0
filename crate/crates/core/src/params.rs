//! Named parameter storage and the layer handles that index into it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::conv::ConvShape;
use crate::error::{FusionError, Result};

pub type ParamId = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Kernel initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with the given std, resampled outside two standard deviations.
    TruncatedNormal { std: f64 },
    /// Truncated normal with std sqrt(2 / fan_in).
    He,
    Constant(f64),
}

/// Flat, ordered collection of every trainable tensor in a network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.params[id].values
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id].values
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn scalar_count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.values.len())
            .sum()
    }

    /// Registers a tensor. Each tensor draws from its own stream seeded by
    /// `seed` and its name, so shared layers initialize identically across
    /// architecture variants.
    pub fn add(&mut self, name: String, shape: Vec<usize>, fan_in: usize, init: Init, seed: u64) -> ParamId {
        let len: usize = shape.iter().product();
        let values = match init {
            Init::Constant(v) => vec![v; len],
            Init::TruncatedNormal { std } => truncated_normal(len, std, seed ^ name_hash(&name)),
            Init::He => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                truncated_normal(len, std, seed ^ name_hash(&name))
            }
        };
        self.params.push(Param {
            name,
            shape,
            values,
        });
        self.params.len() - 1
    }

    pub(crate) fn push(&mut self, param: Param) {
        self.params.push(param);
    }

    /// Replaces every tensor's values from `other`, matched by name and shape.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        if other.len() != self.len() {
            return Err(FusionError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                self.len(),
                other.len()
            )));
        }
        for p in &mut self.params {
            let src = other
                .params
                .iter()
                .find(|q| q.name == p.name)
                .ok_or_else(|| FusionError::Checkpoint(format!("missing tensor {}", p.name)))?;
            if src.shape != p.shape {
                return Err(FusionError::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    p.name, src.shape, p.shape
                )));
            }
            p.values.copy_from_slice(&src.values);
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| vec![0.0; p.values.len()]).collect()
    }
}

fn truncated_normal(len: usize, std: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..len)
        .map(|_| loop {
            let z: f64 = normal.sample(&mut rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect()
}

/// FNV-1a over the parameter name.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Handle to a convolution's weight and bias tensors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub shape: ConvShape,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
        init: Init,
        seed: u64,
    ) -> Self {
        let shape = ConvShape {
            in_channels,
            out_channels,
            kernel,
            dilation,
        };
        let fan_in = in_channels * kernel * kernel;
        let weight = params.add(
            format!("{name}.weight"),
            vec![out_channels, in_channels, kernel, kernel],
            fan_in,
            init,
            seed,
        );
        let bias = params.add(format!("{name}.bias"), vec![out_channels], fan_in, Init::Constant(0.0), seed);
        Conv2d {
            weight,
            bias,
            shape,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.shape.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.shape.out_channels
    }
}

/// Handle to a per-location channel layer norm's scale and shift.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub channels: usize,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, name: &str, channels: usize, seed: u64) -> Self {
        let scale = params.add(format!("{name}.scale"), vec![channels], channels, Init::Constant(1.0), seed);
        let shift = params.add(format!("{name}.shift"), vec![channels], channels, Init::Constant(0.0), seed);
        LayerNorm {
            scale,
            shift,
            channels,
        }
    }
}
