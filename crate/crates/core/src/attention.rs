//! Cross attention-guided dense network.
//!
//! Each block sees two streams `f_i`, `f_j`. Three convolutions extract
//! features from `f_i`, `f_j` and their concatenation; each stream's attention
//! module turns `[stream features, joint features]` into a single sigmoid map.
//! The block output is
//!
//! ```text
//! Z = concat(concat(f_i, f_j), A_i * f_i, A_j * f_j)
//! ```
//!
//! Blocks are densely connected per stream: block `k` receives the raw
//! 3-channel stream concatenated with the attended features of blocks `1..k`.

use std::path::{Path, PathBuf};

use crate::error::{FusionError, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{Conv2d, Init, ParamSet};
use crate::tensor::{FeatureMap, Tensor};

/// Kernel std for every convolution in this rail.
pub const ATTENTION_INIT_STD: f64 = 0.05;

/// Per-location gate in (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap(Tensor);

impl AttentionMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.channels() != 1 {
            return Err(FusionError::ChannelMismatch {
                expected: 1,
                found: values.channels(),
            });
        }
        Ok(AttentionMap(values))
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.spatial()
    }
}

/// conv3x3 -> ReLU -> conv3x3 (one channel) -> sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionModule {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl AttentionModule {
    pub fn new(params: &mut ParamSet, name: &str, in_channels: usize, feat: usize, kernel: usize, seed: u64) -> Self {
        let init = Init::TruncatedNormal {
            std: ATTENTION_INIT_STD,
        };
        AttentionModule {
            conv1: Conv2d::new(params, &format!("{name}.conv1"), in_channels, feat, kernel, 1, init, seed),
            conv2: Conv2d::new(params, &format!("{name}.conv2"), feat, 1, kernel, 1, init, seed),
        }
    }

    pub fn forward(&self, g: &mut Graph, z: NodeId) -> Result<NodeId> {
        let h = g.conv(z, &self.conv1)?;
        let h = g.relu(h);
        let m = g.conv(h, &self.conv2)?;
        Ok(g.sigmoid(m))
    }

    /// Standalone evaluation on a feature map.
    pub fn apply(&self, params: &ParamSet, z: &FeatureMap) -> Result<AttentionMap> {
        let mut g = Graph::new(params);
        let i = g.input(z.clone());
        let out = self.forward(&mut g, i)?;
        AttentionMap::new(g.value(out).clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttentionBlock {
    pub conv_i: Conv2d,
    pub conv_j: Conv2d,
    pub conv_cat: Conv2d,
    pub attn_i: AttentionModule,
    pub attn_j: AttentionModule,
    pub stream_channels: usize,
}

/// Graph nodes produced by one block.
#[derive(Clone, Copy, Debug)]
pub struct BlockNodes {
    pub z: NodeId,
    pub attn_i: NodeId,
    pub attn_j: NodeId,
    pub gated_i: NodeId,
    pub gated_j: NodeId,
}

impl CrossAttentionBlock {
    pub fn new(params: &mut ParamSet, name: &str, stream_channels: usize, feat: usize, kernel: usize, seed: u64) -> Self {
        let init = Init::TruncatedNormal {
            std: ATTENTION_INIT_STD,
        };
        let conv = |params: &mut ParamSet, part: &str, cin| {
            Conv2d::new(params, &format!("{name}.{part}"), cin, feat, kernel, 1, init, seed)
        };
        let conv_i = conv(params, "conv_i", stream_channels);
        let conv_j = conv(params, "conv_j", stream_channels);
        let conv_cat = conv(params, "conv_cat", 2 * stream_channels);
        CrossAttentionBlock {
            conv_i,
            conv_j,
            conv_cat,
            attn_i: AttentionModule::new(params, &format!("{name}.attn_i"), 2 * feat, feat, kernel, seed),
            attn_j: AttentionModule::new(params, &format!("{name}.attn_j"), 2 * feat, feat, kernel, seed),
            stream_channels,
        }
    }

    /// Output channel count: both streams twice.
    pub fn out_channels(&self) -> usize {
        4 * self.stream_channels
    }

    pub fn forward(&self, g: &mut Graph, f_i: NodeId, f_j: NodeId) -> Result<BlockNodes> {
        let (si, sj) = (g.value(f_i).spatial(), g.value(f_j).spatial());
        if si != sj {
            return Err(FusionError::DimensionMismatch { left: si, right: sj });
        }
        let joint = g.concat(&[f_i, f_j])?;
        let xi = g.conv(f_i, &self.conv_i)?;
        let xi = g.relu(xi);
        let xj = g.conv(f_j, &self.conv_j)?;
        let xj = g.relu(xj);
        let xc = g.conv(joint, &self.conv_cat)?;
        let xc = g.relu(xc);

        let in_i = g.concat(&[xi, xc])?;
        let attn_i = self.attn_i.forward(g, in_i)?;
        let in_j = g.concat(&[xj, xc])?;
        let attn_j = self.attn_j.forward(g, in_j)?;

        let gated_i = g.gate(attn_i, f_i)?;
        let gated_j = g.gate(attn_j, f_j)?;
        let z = g.concat(&[joint, gated_i, gated_j])?;
        Ok(BlockNodes {
            z,
            attn_i,
            attn_j,
            gated_i,
            gated_j,
        })
    }

    /// Standalone evaluation: returns (Z, A_i, A_j).
    pub fn apply(
        &self,
        params: &ParamSet,
        f_i: &FeatureMap,
        f_j: &FeatureMap,
    ) -> Result<(FeatureMap, AttentionMap, AttentionMap)> {
        let mut g = Graph::new(params);
        let i = g.input(f_i.clone());
        let j = g.input(f_j.clone());
        let nodes = self.forward(&mut g, i, j)?;
        Ok((
            g.value(nodes.z).clone(),
            AttentionMap::new(g.value(nodes.attn_i).clone())?,
            AttentionMap::new(g.value(nodes.attn_j).clone())?,
        ))
    }
}

/// The full attention rail. With `plain` set, every attention map is the
/// constant 1 and no attention parameters exist (the plain-densenet ablation).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDenseNet {
    pub blocks: Vec<CrossAttentionBlock>,
    block_count: usize,
    plain: bool,
}

/// Nodes produced by the rail: the final Z_g and every block's two maps.
#[derive(Clone, Debug)]
pub struct AttentionNodes {
    pub z_g: NodeId,
    pub maps: Vec<(NodeId, NodeId)>,
}

/// Stream width seen by block `k` (0-based): 3, 6, 12, ...
pub fn stream_channels(block: usize) -> usize {
    3 << block
}

impl AttentionDenseNet {
    pub fn new(params: &mut ParamSet, blocks: usize, feat: usize, kernel: usize, plain: bool, seed: u64) -> Self {
        let built = if plain {
            Vec::new()
        } else {
            (0..blocks)
                .map(|k| {
                    CrossAttentionBlock::new(params, &format!("attn.block{}", k + 1), stream_channels(k), feat, kernel, seed)
                })
                .collect()
        };
        AttentionDenseNet {
            blocks: built,
            block_count: blocks,
            plain,
        }
    }

    pub fn block_count(&self) -> usize {
        self.block_count
    }

    pub fn is_plain(&self) -> bool {
        self.plain
    }

    /// Channels of Z_g.
    pub fn out_channels(&self) -> usize {
        4 * stream_channels(self.block_count - 1)
    }

    pub fn forward(&self, g: &mut Graph, stream_i: NodeId, stream_j: NodeId) -> Result<AttentionNodes> {
        let (h, w) = g.value(stream_i).spatial();
        let mut dense_i = vec![stream_i];
        let mut dense_j = vec![stream_j];
        let mut maps = Vec::with_capacity(self.block_count);
        let mut z_g = None;
        for k in 0..self.block_count {
            let f_i = if dense_i.len() == 1 { dense_i[0] } else { g.concat(&dense_i)? };
            let f_j = if dense_j.len() == 1 { dense_j[0] } else { g.concat(&dense_j)? };
            let nodes = if self.plain {
                let ones_i = g.input(Tensor::filled(1, h, w, 1.0));
                let ones_j = g.input(Tensor::filled(1, h, w, 1.0));
                let joint = g.concat(&[f_i, f_j])?;
                let gated_i = g.gate(ones_i, f_i)?;
                let gated_j = g.gate(ones_j, f_j)?;
                let z = g.concat(&[joint, gated_i, gated_j])?;
                BlockNodes {
                    z,
                    attn_i: ones_i,
                    attn_j: ones_j,
                    gated_i,
                    gated_j,
                }
            } else {
                self.blocks[k].forward(g, f_i, f_j)?
            };
            dense_i.push(nodes.gated_i);
            dense_j.push(nodes.gated_j);
            maps.push((nodes.attn_i, nodes.attn_j));
            z_g = Some(nodes.z);
        }
        Ok(AttentionNodes {
            z_g: z_g.expect("at least one block"),
            maps,
        })
    }

    /// Standalone evaluation on two 3-channel streams.
    pub fn apply(
        &self,
        params: &ParamSet,
        stream_i: &Tensor,
        stream_j: &Tensor,
    ) -> Result<(FeatureMap, Vec<(AttentionMap, AttentionMap)>)> {
        let mut g = Graph::new(params);
        let i = g.input(stream_i.clone());
        let j = g.input(stream_j.clone());
        let nodes = self.forward(&mut g, i, j)?;
        let maps = nodes
            .maps
            .iter()
            .map(|&(a, b)| Ok((AttentionMap::new(g.value(a).clone())?, AttentionMap::new(g.value(b).clone())?)))
            .collect::<Result<Vec<_>>>()?;
        Ok((g.value(nodes.z_g).clone(), maps))
    }
}

/// Writes each map as 8-bit grayscale `block{k}_stream{i|j}.png` (k from 1).
pub fn export_attention_maps(maps: &[(AttentionMap, AttentionMap)], dir: &Path) -> Result<Vec<PathBuf>> {
    if maps.is_empty() {
        return Err(FusionError::InvalidConfig("no attention maps to export".into()));
    }
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::with_capacity(2 * maps.len());
    for (k, (a_i, a_j)) in maps.iter().enumerate() {
        for (tag, map) in [("i", a_i), ("j", a_j)] {
            let path = dir.join(format!("block{}_stream{tag}.png", k + 1));
            let (h, w) = map.shape();
            crate::data::write_gray_png(map.values().channel(0), h, w, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}
