//! The assembled fusion network and its ablation variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionDenseNet, AttentionMap};
use crate::auxiliary::AuxiliaryNet;
use crate::conv::Precision;
use crate::error::{FusionError, Result};
use crate::graph::{Gradients, Graph, NodeId};
use crate::losses::{total_loss_with_grad, LossBreakdown};
use crate::merging::MergingNet;
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::types::{FusedImage, ImagePair, LossWeights, NetworkConfig, MIN_SIDE};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    Full,
    /// Merging network without dilated residual dense blocks.
    NoDrdb,
    /// Attention maps replaced by the constant 1.
    PlainDensenet,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::PlainDensenet, Ablation::NoDrdb, Ablation::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoDrdb => "no-drdb",
            Ablation::PlainDensenet => "plain-densenet",
        }
    }

    /// Row label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "Proposed",
            Ablation::NoDrdb => "Without DRDB",
            Ablation::PlainDensenet => "Densenet",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no-drdb" => Ok(Ablation::NoDrdb),
            "plain-densenet" => Ok(Ablation::PlainDensenet),
            other => Err(FusionError::InvalidConfig(format!("unknown ablation `{other}`"))),
        }
    }
}

/// Graph nodes of one full forward pass.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub output: NodeId,
    pub z_g: NodeId,
    pub aux: NodeId,
    pub maps: Vec<(NodeId, NodeId)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionNetwork {
    config: NetworkConfig,
    ablation: Ablation,
    pub attention: AttentionDenseNet,
    pub auxiliary: AuxiliaryNet,
    pub merging: MergingNet,
    params: ParamSet,
}

impl FusionNetwork {
    pub fn new(config: &NetworkConfig, ablation: Ablation, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let attention = AttentionDenseNet::new(
            &mut params,
            config.attn_blocks,
            config.attn_feat_channels,
            config.conv_kernel,
            ablation == Ablation::PlainDensenet,
            seed,
        );
        let auxiliary = AuxiliaryNet::new(&mut params, config.aux_channels, seed);
        let drdb_count = if ablation == Ablation::NoDrdb { 0 } else { config.drdb_count };
        let merging = MergingNet::new(
            &mut params,
            attention.out_channels() + auxiliary.out_channels(),
            config.merge_channels,
            config.drdb_growth,
            drdb_count,
            config.head_channels,
            config.conv_kernel,
            config.dilation,
            seed,
        );
        Ok(FusionNetwork {
            config: config.clone(),
            ablation,
            attention,
            auxiliary,
            merging,
            params,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn ablation(&self) -> Ablation {
        self.ablation
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn forward(&self, g: &mut Graph, stream_i: &Tensor, stream_j: &Tensor) -> Result<ForwardNodes> {
        if stream_i.spatial() != stream_j.spatial() {
            return Err(FusionError::DimensionMismatch {
                left: stream_i.spatial(),
                right: stream_j.spatial(),
            });
        }
        let si = g.input(stream_i.clone());
        let sj = g.input(stream_j.clone());
        let stacked = g.concat(&[si, sj])?;
        let attn = self.attention.forward(g, si, sj)?;
        let aux = self.auxiliary.forward(g, stacked)?;
        let output = self.merging.forward(g, attn.z_g, aux, stacked)?;
        Ok(ForwardNodes {
            output,
            z_g: attn.z_g,
            aux,
            maps: attn.maps,
        })
    }

    /// Full-resolution inference.
    pub fn fuse(&self, pair: &ImagePair) -> Result<FusedImage> {
        let (h, w) = pair.shape();
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(FusionError::ShapeTooSmall { height: h, width: w });
        }
        let (si, sj) = pair.streams();
        let mut g = Graph::new(&self.params);
        let nodes = self.forward(&mut g, &si, &sj)?;
        FusedImage::new(g.value(nodes.output).clone())
    }

    pub fn attention_maps(&self, pair: &ImagePair) -> Result<Vec<(AttentionMap, AttentionMap)>> {
        let (si, sj) = pair.streams();
        let mut g = Graph::new(&self.params);
        let nodes = self.forward(&mut g, &si, &sj)?;
        nodes
            .maps
            .iter()
            .map(|&(a, b)| Ok((AttentionMap::new(g.value(a).clone())?, AttentionMap::new(g.value(b).clone())?)))
            .collect()
    }

    /// Objective and its parameter gradients on one sample.
    pub fn loss_and_grad(&self, stream_i: &Tensor, stream_j: &Tensor, weights: &LossWeights) -> Result<(LossBreakdown, Gradients)> {
        self.loss_and_grad_with(stream_i, stream_j, weights, Precision::F64)
    }

    pub fn loss_and_grad_with(
        &self,
        stream_i: &Tensor,
        stream_j: &Tensor,
        weights: &LossWeights,
        precision: Precision,
    ) -> Result<(LossBreakdown, Gradients)> {
        let mut g = Graph::with_precision(&self.params, precision);
        let nodes = self.forward(&mut g, stream_i, stream_j)?;
        let (loss, seed) = total_loss_with_grad(g.value(nodes.output), stream_i, stream_j, weights)?;
        Ok((loss, g.backward(nodes.output, seed)))
    }

    /// Objective only.
    pub fn loss(&self, stream_i: &Tensor, stream_j: &Tensor, weights: &LossWeights) -> Result<LossBreakdown> {
        let mut g = Graph::new(&self.params);
        let nodes = self.forward(&mut g, stream_i, stream_j)?;
        Ok(total_loss_with_grad(g.value(nodes.output), stream_i, stream_j, weights)?.0)
    }
}
