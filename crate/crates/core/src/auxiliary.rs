//! Long-range branch: 1x1 projection of the stacked sources, three parallel
//! convolutions (1x1, 3x3, 5x5) each followed by layer norm, and a final
//! layer-normed 1x1 fusion of the three branches.

use crate::error::{FusionError, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{Conv2d, Init, LayerNorm, ParamSet};
use crate::tensor::{FeatureMap, Tensor};

pub const BRANCH_KERNELS: [usize; 3] = [1, 3, 5];

#[derive(Clone, Debug, PartialEq)]
pub struct AuxiliaryNet {
    pub conv_in: Conv2d,
    pub branches: [Conv2d; 3],
    pub branch_norms: [LayerNorm; 3],
    pub conv_out: Conv2d,
    pub out_norm: LayerNorm,
}

impl AuxiliaryNet {
    pub fn new(params: &mut ParamSet, channels: usize, seed: u64) -> Self {
        let conv_in = Conv2d::new(params, "aux.conv_in", 6, channels, 1, 1, Init::He, seed);
        let branches = BRANCH_KERNELS
            .map(|k| Conv2d::new(params, &format!("aux.branch{k}"), channels, channels, k, 1, Init::He, seed));
        let branch_norms = BRANCH_KERNELS.map(|k| LayerNorm::new(params, &format!("aux.branch{k}.norm"), channels, seed));
        let conv_out = Conv2d::new(params, "aux.conv_out", 3 * channels, channels, 1, 1, Init::He, seed);
        let out_norm = LayerNorm::new(params, "aux.out_norm", channels, seed);
        AuxiliaryNet {
            conv_in,
            branches,
            branch_norms,
            conv_out,
            out_norm,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv_out.out_channels()
    }

    /// `stacked` is concat(I_i, I_j), six channels.
    pub fn forward(&self, g: &mut Graph, stacked: NodeId) -> Result<NodeId> {
        let x = g.conv(stacked, &self.conv_in)?;
        let x = g.relu(x);
        let mut outs = [0; 3];
        for (slot, (conv, norm)) in outs.iter_mut().zip(self.branches.iter().zip(&self.branch_norms)) {
            let b = g.conv(x, conv)?;
            let b = g.relu(b);
            *slot = g.layer_norm(b, norm)?;
        }
        let y = g.concat(&outs)?;
        let y = g.conv(y, &self.conv_out)?;
        g.layer_norm(y, &self.out_norm)
    }

    pub fn apply(&self, params: &ParamSet, stream_i: &Tensor, stream_j: &Tensor) -> Result<FeatureMap> {
        if stream_i.spatial() != stream_j.spatial() {
            return Err(FusionError::DimensionMismatch {
                left: stream_i.spatial(),
                right: stream_j.spatial(),
            });
        }
        let mut g = Graph::new(params);
        let stacked = g.input(Tensor::concat(&[stream_i, stream_j])?);
        let out = self.forward(&mut g, stacked)?;
        Ok(g.value(out).clone())
    }
}
