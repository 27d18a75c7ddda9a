//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every parameter as raw little-endian `f32` in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SplitConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Network};
use crate::params::ParamStore;
use crate::train::{TrainConfig, TrainOutcome, ValidationRecord};

pub const MAGIC: &[u8; 8] = b"PROTOSEG";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob section.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format: u32,
    model: ModelConfig,
    train: TrainConfig,
    split: SplitConfig,
    episodes: usize,
    history: Vec<ValidationRecord>,
    params: Vec<ParamEntry>,
}

/// Trained parameters plus everything needed to rebuild and audit the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
    /// Training episodes consumed.
    pub episodes: usize,
    pub history: Vec<ValidationRecord>,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn new(net: &Network<f32>, train: &TrainConfig, split: &SplitConfig, episodes: usize, history: Vec<ValidationRecord>) -> Self {
        Self {
            model: net.config.clone(),
            train: train.clone(),
            split: split.clone(),
            episodes,
            history,
            params: net.params.clone(),
        }
    }

    pub fn from_outcome(outcome: &TrainOutcome, train: &TrainConfig, split: &SplitConfig) -> Self {
        Self::new(&outcome.net, train, split, outcome.episodes, outcome.history.clone())
    }

    pub fn network(&self) -> Result<Network<f32>> {
        Network::with_params(self.model.clone(), self.params.clone())
    }

    pub fn manifest(&self) -> Vec<ParamEntry> {
        let mut offset = 0u64;
        self.params
            .iter()
            .map(|(_, p)| {
                let e = ParamEntry {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    offset,
                };
                offset += 4 * p.data.len() as u64;
                e
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format: FORMAT_VERSION,
            model: self.model.clone(),
            train: self.train.clone(),
            split: self.split.clone(),
            episodes: self.episodes,
            history: self.history.clone(),
            params: self.manifest(),
        };
        let text = serde_json::to_vec_pretty(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + text.len() + 4 * self.params.scalar_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(&text);
        for (_, p) in self.params.iter() {
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if hlen > body.len() {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if header.format != FORMAT_VERSION {
            return Err(bad("header format disagrees with container version"));
        }
        let blob = &body[hlen..];
        let mut params = ParamStore::new();
        let mut expected = 0u64;
        for e in &header.params {
            if e.offset != expected {
                return Err(Error::Checkpoint(format!("param {} at offset {} (expected {expected})", e.name, e.offset)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * n;
            let raw = blob.get(start..end).ok_or_else(|| Error::Checkpoint(format!("param {} runs past the end", e.name)))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            if params.find(&e.name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate param {}", e.name)));
            }
            params.add(e.name.clone(), e.shape.clone(), data);
            expected = end as u64;
        }
        if expected as usize != blob.len() {
            return Err(bad("trailing bytes after parameter blobs"));
        }
        let ck = Self {
            model: header.model,
            train: header.train,
            split: header.split,
            episodes: header.episodes,
            history: header.history,
            params,
        };
        // rejects manifests that do not fit the configured graph
        ck.network()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(Error::io("writing checkpoint", path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io("reading checkpoint", path))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_splits;
    use crate::train::TrainFlags;

    fn sample() -> Checkpoint {
        let split = make_splits(16, 2).unwrap();
        let train = TrainConfig {
            episodes: 7,
            flags: TrainFlags::base(),
            ..TrainConfig::default()
        };
        let mut model = ModelConfig::micro(split.train_classes.len());
        model.fusion = crate::fusion::FusionKind::Base;
        let mut net = Network::<f32>::new(model, 9).unwrap();
        // exercise awkward bit patterns
        let id = net.params.ids().next().unwrap();
        let v = net.params.values_mut(id);
        v[0] = -0.0;
        v[1] = f32::MIN_POSITIVE / 2.0;
        v[2] = f32::MAX;
        let history = vec![ValidationRecord {
            episode: 5,
            mean_iou: 0.25,
            binary_iou: 0.5,
        }];
        Checkpoint::new(&net, &train, &split, 7, history)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.model, ck.model);
        assert_eq!(back.train, ck.train);
        assert_eq!(back.split, ck.split);
        assert_eq!(back.history, ck.history);
        assert_eq!(back.episodes, 7);
        for ((_, a), (_, b)) in ck.params.iter().zip(back.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            let ab: Vec<u32> = a.data.iter().map(|x| x.to_bits()).collect();
            let bb: Vec<u32> = b.data.iter().map(|x| x.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn blob_layout_matches_manifest() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let blob = &bytes[20 + hlen..];
        assert_eq!(blob.len(), 4 * ck.params.scalar_count());
        for (entry, (_, p)) in ck.manifest().iter().zip(ck.params.iter()) {
            let o = entry.offset as usize;
            let last = p.data.len() - 1;
            let got = f32::from_le_bytes(blob[o + 4 * last..o + 4 * last + 4].try_into().unwrap());
            assert_eq!(got.to_bits(), p.data[last].to_bits());
        }
    }

    #[test]
    fn corrupt_containers_are_rejected() {
        let bytes = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..10]), Err(Error::Checkpoint(_))));
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong_magic).is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(Checkpoint::from_bytes(&wrong_version).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 4]);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn mismatched_graph_is_rejected() {
        let mut ck = sample();
        ck.model.fusion_width = 8;
        assert!(matches!(Checkpoint::from_bytes(&ck.to_bytes()), Err(Error::Checkpoint(_))));
    }
}
