//! Reconstruction head: 1x1 fusion of the attention and auxiliary features,
//! dilated residual dense blocks, and a head over the features concatenated
//! with the raw source stack.

use crate::error::{FusionError, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{Conv2d, Init, ParamSet};
use crate::tensor::{FeatureMap, Tensor};
use crate::types::FusedImage;

pub const DRDB_LAYERS: usize = 3;

/// Three densely connected dilated 3x3 conv+ReLU layers, a 1x1 fusion back to
/// the input width, and a residual add.
#[derive(Clone, Debug, PartialEq)]
pub struct Drdb {
    pub layers: Vec<Conv2d>,
    pub fuse: Conv2d,
    pub channels: usize,
}

impl Drdb {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        channels: usize,
        growth: usize,
        kernel: usize,
        dilation: usize,
        seed: u64,
    ) -> Self {
        let layers = (0..DRDB_LAYERS)
            .map(|l| {
                Conv2d::new(
                    params,
                    &format!("{name}.conv{}", l + 1),
                    channels + l * growth,
                    growth,
                    kernel,
                    dilation,
                    Init::He,
                    seed,
                )
            })
            .collect();
        let fuse = Conv2d::new(
            params,
            &format!("{name}.fuse"),
            channels + DRDB_LAYERS * growth,
            channels,
            1,
            1,
            Init::He,
            seed,
        );
        Drdb {
            layers,
            fuse,
            channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let found = g.value(x).channels();
        if found != self.channels {
            return Err(FusionError::ChannelMismatch {
                expected: self.channels,
                found,
            });
        }
        let mut dense = vec![x];
        for layer in &self.layers {
            let input = if dense.len() == 1 { x } else { g.concat(&dense)? };
            let y = g.conv(input, layer)?;
            dense.push(g.relu(y));
        }
        let all = g.concat(&dense)?;
        let fused = g.conv(all, &self.fuse)?;
        g.add(x, fused)
    }

    pub fn apply(&self, params: &ParamSet, x: &FeatureMap) -> Result<FeatureMap> {
        let mut g = Graph::new(params);
        let i = g.input(x.clone());
        let out = self.forward(&mut g, i)?;
        Ok(g.value(out).clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergingNet {
    pub concat_1x1: Conv2d,
    pub drdbs: Vec<Drdb>,
    pub head_conv: Conv2d,
    pub head_out: Conv2d,
}

impl MergingNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        in_channels: usize,
        width: usize,
        growth: usize,
        drdb_count: usize,
        head_channels: usize,
        kernel: usize,
        dilation: usize,
        seed: u64,
    ) -> Self {
        let concat_1x1 = Conv2d::new(params, "merge.concat_1x1", in_channels, width, 1, 1, Init::He, seed);
        let drdbs = (0..drdb_count)
            .map(|k| Drdb::new(params, &format!("merge.drdb{}", k + 1), width, growth, kernel, dilation, seed))
            .collect();
        let head_conv = Conv2d::new(params, "merge.head_conv", width + 6, head_channels, kernel, 1, Init::He, seed);
        let head_out = Conv2d::new(params, "merge.head_out", head_channels, 3, 1, 1, Init::He, seed);
        MergingNet {
            concat_1x1,
            drdbs,
            head_conv,
            head_out,
        }
    }

    /// Returns the sigmoid output node (three channels in (0, 1)).
    pub fn forward(&self, g: &mut Graph, z_g: NodeId, aux: NodeId, stacked: NodeId) -> Result<NodeId> {
        let shapes = [g.value(z_g).spatial(), g.value(aux).spatial(), g.value(stacked).spatial()];
        if shapes[0] != shapes[1] || shapes[0] != shapes[2] {
            let bad = if shapes[0] != shapes[1] { shapes[1] } else { shapes[2] };
            return Err(FusionError::DimensionMismatch {
                left: shapes[0],
                right: bad,
            });
        }
        let features = g.concat(&[z_g, aux])?;
        let mut x = g.conv(features, &self.concat_1x1)?;
        for block in &self.drdbs {
            x = block.forward(g, x)?;
        }
        let with_sources = g.concat(&[x, stacked])?;
        let h = g.conv(with_sources, &self.head_conv)?;
        let h = g.relu(h);
        let out = g.conv(h, &self.head_out)?;
        Ok(g.sigmoid(out))
    }

    pub fn apply(&self, params: &ParamSet, z_g: &FeatureMap, aux: &FeatureMap, stacked: &Tensor) -> Result<FusedImage> {
        let mut g = Graph::new(params);
        let z = g.input(z_g.clone());
        let a = g.input(aux.clone());
        let s = g.input(stacked.clone());
        let out = self.forward(&mut g, z, a, s)?;
        FusedImage::new(g.value(out).clone())
    }
}
