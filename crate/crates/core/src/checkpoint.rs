//! Binary checkpoint container.
//!
//! Layout, all integers u64 and floats f64, little-endian:
//!
//! ```text
//! magic    8 bytes  "XFUSECKP"
//! version  u32      1
//! config   len + UTF-8 JSON of the training configuration
//! params   count, then per tensor: name (len + UTF-8), ndim, dims..., values (row-major)
//! adam     step t, then first moments and second moments in parameter order
//! history  count, then per step: mse_i, mse_j, ssim_i, ssim_j, total
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{FusionError, Result};
use crate::losses::LossBreakdown;
use crate::network::FusionNetwork;
use crate::params::{Param, ParamSet};
use crate::training::{build_ablation, Adam, TrainConfig};

pub const MAGIC: &[u8; 8] = b"XFUSECKP";
pub const VERSION: u32 = 1;

// Guards against allocating from a corrupt length field.
const MAX_LEN: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub network: FusionNetwork,
    pub optimizer: Adam,
    pub history: Vec<LossBreakdown>,
}

impl Checkpoint {
    /// A fresh, untrained checkpoint.
    pub fn initial(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let network = build_ablation(config)?;
        let optimizer = Adam::new(&network);
        Ok(Checkpoint {
            config: config.clone(),
            network,
            optimizer,
            history: Vec::new(),
        })
    }

    pub fn step(&self) -> u64 {
        self.optimizer.t
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let json = serde_json::to_vec(&self.config).map_err(|e| FusionError::Checkpoint(e.to_string()))?;
        write_bytes(w, &json)?;
        let params = self.network.params();
        write_u64(w, params.len() as u64)?;
        for p in params.iter() {
            write_bytes(w, p.name.as_bytes())?;
            write_u64(w, p.shape.len() as u64)?;
            for &d in &p.shape {
                write_u64(w, d as u64)?;
            }
            write_f64s(w, &p.values)?;
        }
        write_u64(w, self.optimizer.t)?;
        for moments in [&self.optimizer.m, &self.optimizer.v] {
            for m in moments {
                write_f64s(w, m)?;
            }
        }
        write_u64(w, self.history.len() as u64)?;
        for l in &self.history {
            write_f64s(w, &[l.mse_i, l.mse_j, l.ssim_i, l.ssim_j, l.total])?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(FusionError::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let mut version = [0u8; 4];
        r.read_exact(&mut version)?;
        let version = u32::from_le_bytes(version);
        if version != VERSION {
            return Err(FusionError::Checkpoint(format!("unsupported version {version}")));
        }
        let config: TrainConfig =
            serde_json::from_slice(&read_bytes(r)?).map_err(|e| FusionError::Checkpoint(e.to_string()))?;
        let mut network = build_ablation(&config)?;

        let count = read_len(r)?;
        let mut loaded = ParamSet::new();
        for _ in 0..count {
            let name = String::from_utf8(read_bytes(r)?).map_err(|e| FusionError::Checkpoint(e.to_string()))?;
            let ndim = read_len(r)?;
            let shape = (0..ndim).map(|_| read_len(r)).collect::<Result<Vec<_>>>()?;
            let values = read_f64s(r, shape.iter().product())?;
            loaded.push(Param { name, shape, values });
        }
        let names_match = loaded.iter().zip(network.params().iter()).all(|(a, b)| a.name == b.name);
        if loaded.len() != network.params().len() || !names_match {
            return Err(FusionError::Checkpoint("parameter layout does not match the recorded configuration".into()));
        }
        network.params_mut().load_from(&loaded)?;

        let t = read_u64(r)?;
        let mut moments = [Vec::new(), Vec::new()];
        for slot in &mut moments {
            for p in network.params().iter() {
                slot.push(read_f64s(r, p.values.len())?);
            }
        }
        let [m, v] = moments;
        let steps = read_len(r)?;
        let history = (0..steps)
            .map(|_| {
                let x = read_f64s(r, 5)?;
                Ok(LossBreakdown {
                    mse_i: x[0],
                    mse_j: x[1],
                    ssim_i: x[2],
                    ssim_j: x[3],
                    total: x[4],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Checkpoint {
            config,
            network,
            optimizer: Adam { m, v, t },
            history,
        })
    }
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_bytes(w: &mut impl Write, b: &[u8]) -> Result<()> {
    write_u64(w, b.len() as u64)?;
    w.write_all(b)?;
    Ok(())
}

fn write_f64s(w: &mut impl Write, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_len(r: &mut impl Read) -> Result<usize> {
    let v = read_u64(r)?;
    if v > MAX_LEN {
        return Err(FusionError::Checkpoint(format!("implausible length {v}")));
    }
    Ok(v as usize)
}

fn read_bytes(r: &mut impl Read) -> Result<Vec<u8>> {
    let mut b = vec![0u8; read_len(r)?];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut raw = vec![0u8; 8 * n];
    r.read_exact(&mut raw)?;
    Ok(raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::expand_patches;
    use crate::network::Ablation;
    use crate::training::train;
    use crate::types::{validate_pair, Image, NetworkConfig, TaskKind};

    fn config(ablation: Ablation) -> TrainConfig {
        TrainConfig {
            batch_size: 1,
            learning_rate: 1e-3,
            epochs: 1,
            ablation,
            network: NetworkConfig {
                attn_blocks: 2,
                attn_feat_channels: 4,
                aux_channels: 4,
                merge_channels: 4,
                drdb_growth: 4,
                head_channels: 4,
                ..NetworkConfig::default()
            },
            ..TrainConfig::new(TaskKind::MultiFocus)
        }
    }

    fn pair() -> crate::types::ImagePair {
        let a: Vec<f64> = (0..256).map(|k| 0.5 + 0.3 * (k as f64 * 0.2).sin()).collect();
        let b: Vec<f64> = (0..256).map(|k| 0.5 + 0.3 * (k as f64 * 0.05).cos()).collect();
        validate_pair(
            &Image::gray("a", 16, 16, a).unwrap(),
            &Image::gray("b", 16, 16, b).unwrap(),
            TaskKind::MultiFocus,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        for ablation in Ablation::ALL {
            let p = pair();
            let ckpt = train(&config(ablation), &expand_patches(&[p.clone()], 16, 16).unwrap()).unwrap();
            let mut buf = Vec::new();
            ckpt.write_to(&mut buf).unwrap();
            let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
            assert_eq!(back, ckpt);
            assert_eq!(back.network.fuse(&p).unwrap(), ckpt.network.fuse(&p).unwrap());
        }
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let ckpt = Checkpoint::initial(&config(Ablation::Full)).unwrap();
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'Y';
        assert!(matches!(Checkpoint::read_from(&mut bad.as_slice()), Err(FusionError::Checkpoint(_))));
        let truncated = &buf[..buf.len() / 2];
        assert!(Checkpoint::read_from(&mut &truncated[..]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ckpt = Checkpoint::initial(&config(Ablation::NoDrdb)).unwrap();
        ckpt.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
    }
}
