//! Binary container of named f64 tensors.
//!
//! Layout, all integers little-endian: the 7-byte magic `FGCKPT1`, a u64
//! tensor count, then per tensor a u32 name length, the UTF-8 name, a u32
//! rank, `rank` u64 dimensions, and the row-major f64 values. Scalars are
//! rank-0 tensors holding one value.

use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::denoiser::tape::Mat;
use crate::denoiser::{DenoiserConfig, DenoiserParams, ModelShape};
use crate::graphdata::{DatasetMarginals, SplitSpec, Standardization, Vocab};
use crate::nodecount::NodeCountModel;
use crate::smiles::PropertyId;

pub const MAGIC: &[u8; 7] = b"FGCKPT1";
const MAX_RANK: u32 = 8;
const MAX_NAME: u32 = 4096;
/// Largest integer stored exactly in a scalar tensor.
pub const MAX_EXACT: f64 = 9_007_199_254_740_992.0;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn scalar(v: f64) -> Self {
        Self {
            dims: vec![],
            data: vec![v],
        }
    }

    pub fn vector(v: Vec<f64>) -> Self {
        Self {
            dims: vec![v.len()],
            data: v,
        }
    }

    pub fn matrix(m: &Mat) -> Self {
        Self {
            dims: vec![m.rows, m.cols],
            data: m.data.clone(),
        }
    }
}

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(String, Tensor)]) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
        for d in &t.dims {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => CheckpointError::Truncated,
        _ => CheckpointError::Malformed(e.to_string()),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let count = read_u64(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u32(&mut r)?;
        if len > MAX_NAME {
            return Err(CheckpointError::Malformed(format!("name length {len}")));
        }
        let mut name = vec![0u8; len as usize];
        read_exact(&mut r, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Malformed("name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)?;
        if rank > MAX_RANK {
            return Err(CheckpointError::Malformed(format!("tensor {name} has rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let size = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&s| s <= 1 << 28)
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor {name} is too large")))?;
        let mut bytes = vec![0u8; size * 8];
        read_exact(&mut r, &mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((name, Tensor { dims, data }));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| CheckpointError::Malformed(e.to_string()))? != 0 {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    Ok(out)
}

/// Everything needed to sample and evaluate after training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub vocab: String,
    pub properties: Vec<PropertyId>,
    pub schedule_offset: f64,
    /// Split used at training time, so evaluation can re-derive the test set.
    pub split: SplitSpec,
    pub marginals: DatasetMarginals,
    pub standardization: Standardization,
    pub denoiser: DenoiserParams,
    pub nodecount: Option<NodeCountModel>,
}

const DENOISER_PREFIX: &str = "denoiser.";

impl Checkpoint {
    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let c = &self.denoiser.config;
        let s = &self.denoiser.shape;
        let sc = |name: &str, v: f64| (name.to_string(), Tensor::scalar(v));
        let mut out = vec![
            sc("meta.vocab", Vocab::code(&self.vocab).expect("known vocabulary") as f64),
            (
                "meta.properties".into(),
                Tensor::vector(self.properties.iter().map(|p| p.code() as f64).collect()),
            ),
            sc("split.train", self.split.train),
            sc("split.validation", self.split.validation),
            sc("split.seed", self.split.seed as f64),
            sc("schedule.steps", s.steps as f64),
            sc("schedule.offset", self.schedule_offset),
            sc("config.layers", c.layers as f64),
            sc("config.d_node", c.d_node as f64),
            sc("config.d_edge", c.d_edge as f64),
            sc("config.d_global", c.d_global as f64),
            sc("config.heads", c.heads as f64),
            sc("config.d_guide", c.d_guide as f64),
            sc("config.rho", c.rho),
            sc("config.gamma", c.gamma),
            sc("shape.guide_dim", s.guide_dim as f64),
            sc("shape.atom_types", s.atom_types as f64),
            sc("shape.bond_types", s.bond_types as f64),
            sc("shape.n_max", s.n_max as f64),
            ("marginals.node".into(), Tensor::vector(self.marginals.node.clone())),
            ("marginals.edge".into(), Tensor::vector(self.marginals.edge.clone())),
            ("marginals.size".into(), Tensor::vector(self.marginals.size.clone())),
            ("standardization.mean".into(), Tensor::vector(self.standardization.mean.clone())),
            ("standardization.std".into(), Tensor::vector(self.standardization.std.clone())),
        ];
        for (name, m) in self.denoiser.names().iter().zip(&self.denoiser.tensors) {
            out.push((format!("{DENOISER_PREFIX}{name}"), Tensor::matrix(m)));
        }
        if let Some(nc) = &self.nodecount {
            out.extend(nc.to_named().into_iter().map(|(n, m)| (n, Tensor::matrix(&m))));
        }
        out
    }

    pub fn from_tensors(tensors: &[(String, Tensor)]) -> Result<Self, CheckpointError> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| CheckpointError::Malformed(format!("missing {name}")))
        };
        let scalar = |name: &str| -> Result<f64, CheckpointError> {
            let t = find(name)?;
            if !t.dims.is_empty() {
                return Err(CheckpointError::Malformed(format!("{name} is not a scalar")));
            }
            Ok(t.data[0])
        };
        let count = |name: &str| -> Result<usize, CheckpointError> {
            let v = scalar(name)?;
            if v >= 0.0 && v.fract() == 0.0 && v <= MAX_EXACT {
                Ok(v as usize)
            } else {
                Err(CheckpointError::Malformed(format!("{name} = {v} is not a count")))
            }
        };
        let vector = |name: &str| -> Result<Vec<f64>, CheckpointError> {
            let t = find(name)?;
            if t.dims.len() != 1 {
                return Err(CheckpointError::Malformed(format!("{name} is not a vector")));
            }
            Ok(t.data.clone())
        };
        let vocab = Vocab::name_of_code(count("meta.vocab")? as u32)
            .ok_or_else(|| CheckpointError::Malformed("unknown vocabulary code".into()))?
            .to_string();
        let properties = vector("meta.properties")?
            .into_iter()
            .map(|c| PropertyId::from_code(c as u32))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| CheckpointError::Malformed("unknown property code".into()))?;
        let config = DenoiserConfig {
            layers: count("config.layers")?,
            d_node: count("config.d_node")?,
            d_edge: count("config.d_edge")?,
            d_global: count("config.d_global")?,
            heads: count("config.heads")?,
            d_guide: count("config.d_guide")?,
            rho: scalar("config.rho")?,
            gamma: scalar("config.gamma")?,
        };
        let shape = ModelShape {
            guide_dim: count("shape.guide_dim")?,
            atom_types: count("shape.atom_types")?,
            bond_types: count("shape.bond_types")?,
            steps: count("schedule.steps")?,
            n_max: count("shape.n_max")?,
        };
        let mut named = Vec::new();
        for (name, t) in tensors {
            if let Some(rest) = name.strip_prefix(DENOISER_PREFIX) {
                named.push((rest.to_string(), as_mat(name, t)?));
            }
        }
        let denoiser =
            DenoiserParams::from_named(config, shape, &named).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let nc_named = tensors
            .iter()
            .filter(|(n, _)| n.starts_with(crate::nodecount::TENSOR_PREFIX))
            .map(|(n, t)| as_mat(n, t).map(|m| (n.clone(), m)))
            .collect::<Result<Vec<_>, _>>()?;
        let nodecount = if nc_named.is_empty() {
            None
        } else {
            Some(
                NodeCountModel::from_named(&nc_named)
                    .ok_or_else(|| CheckpointError::Malformed("inconsistent node-count tensors".into()))?,
            )
        };
        let ck = Self {
            vocab,
            properties,
            schedule_offset: scalar("schedule.offset")?,
            split: SplitSpec {
                train: scalar("split.train")?,
                validation: scalar("split.validation")?,
                seed: count("split.seed")? as u64,
            },
            marginals: DatasetMarginals {
                node: vector("marginals.node")?,
                edge: vector("marginals.edge")?,
                size: vector("marginals.size")?,
            },
            standardization: Standardization {
                mean: vector("standardization.mean")?,
                std: vector("standardization.std")?,
            },
            denoiser,
            nodecount,
        };
        ck.check()?;
        Ok(ck)
    }

    fn check(&self) -> Result<(), CheckpointError> {
        let s = &self.denoiser.shape;
        let bad = |m: String| Err(CheckpointError::Malformed(m));
        if self.marginals.node.len() != s.atom_types || self.marginals.edge.len() != s.bond_types {
            return bad("marginal lengths disagree with the model".into());
        }
        if self.marginals.size.len() != s.n_max {
            return bad("size marginal disagrees with n_max".into());
        }
        let d = s.guide_dim;
        if self.standardization.mean.len() != d || self.standardization.std.len() != d || self.properties.len() != d {
            return bad("guide dimension disagrees across sections".into());
        }
        if let Some(nc) = &self.nodecount {
            if nc.guide_dim != d {
                return bad("node-count model guide dimension disagrees".into());
            }
        }
        if !self.denoiser.is_finite() {
            return bad("non-finite parameters".into());
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io_err = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = std::fs::File::create(path).map_err(io_err)?;
        write_tensors(io::BufWriter::new(file), &self.to_tensors()).map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let file = std::fs::File::open(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_tensors(&read_tensors(io::BufReader::new(file))?)
    }
}

fn as_mat(name: &str, t: &Tensor) -> Result<Mat, CheckpointError> {
    if t.dims.len() != 2 {
        return Err(CheckpointError::Malformed(format!("{name} is not a matrix")));
    }
    Ok(Mat::from_vec(t.dims[0], t.dims[1], t.data.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_checkpoint(with_nodecount: bool) -> Checkpoint {
        let config = DenoiserConfig {
            layers: 1,
            d_node: 4,
            d_edge: 2,
            d_global: 2,
            heads: 2,
            d_guide: 2,
            rho: 0.1,
            gamma: 2.0,
        };
        let shape = ModelShape {
            guide_dim: 2,
            atom_types: 4,
            bond_types: 4,
            steps: 7,
            n_max: 3,
        };
        Checkpoint {
            vocab: "qm9".into(),
            properties: vec![PropertyId::HeavyAtomCount, PropertyId::HeteroFraction],
            schedule_offset: 0.008,
            split: SplitSpec {
                train: 0.8,
                validation: 0.1,
                seed: 12,
            },
            marginals: DatasetMarginals {
                node: vec![0.7, 0.1, 0.1, 0.1],
                edge: vec![0.6, 0.3, 0.05, 0.05],
                size: vec![0.2, 0.3, 0.5],
            },
            standardization: Standardization {
                mean: vec![5.0, 0.25],
                std: vec![1.5, 0.1],
            },
            denoiser: DenoiserParams::init(config, shape, 4).unwrap(),
            nodecount: with_nodecount.then(|| NodeCountModel::init(2, 3, 3, 1).unwrap()),
        }
    }

    #[test]
    fn round_trip_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        for with in [false, true] {
            let ck = sample_checkpoint(with);
            let path = dir.path().join("model.ckpt");
            ck.save(&path).unwrap();
            assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        }
    }

    #[test]
    fn header_bytes() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("x".into(), Tensor::scalar(1.5))]).unwrap();
        let mut want = b"FGCKPT1".to_vec();
        want.extend(1u64.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.push(b'x');
        want.extend(0u32.to_le_bytes());
        want.extend(1.5f64.to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn corruption_is_detected() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &sample_checkpoint(true).to_tensors()).unwrap();
        assert!(matches!(read_tensors(&b"NOTCKPT"[..]), Err(CheckpointError::BadMagic)));
        assert!(matches!(read_tensors(&buf[..buf.len() - 3]), Err(CheckpointError::Truncated)));
        let mut extra = buf.clone();
        extra.push(0);
        assert!(matches!(read_tensors(&extra[..]), Err(CheckpointError::Malformed(_))));
        let mut tensors = read_tensors(&buf[..]).unwrap();
        tensors.retain(|(n, _)| n != "marginals.edge");
        assert!(Checkpoint::from_tensors(&tensors).is_err());
    }

    proptest! {
        #[test]
        fn tensor_lists_round_trip(
            items in proptest::collection::vec(
                ("[a-z.]{1,12}", proptest::collection::vec(1usize..4, 0..3), any::<u64>()),
                0..6,
            )
        ) {
            let tensors: Vec<(String, Tensor)> = items
                .into_iter()
                .map(|(name, dims, bits)| {
                    let size: usize = dims.iter().product();
                    let data = (0..size).map(|k| f64::from_bits(bits.rotate_left(k as u32 * 7))).collect();
                    (name, Tensor { dims, data })
                })
                .collect();
            let mut buf = Vec::new();
            write_tensors(&mut buf, &tensors).unwrap();
            let back = read_tensors(&buf[..]).unwrap();
            prop_assert_eq!(back.len(), tensors.len());
            for ((n1, t1), (n2, t2)) in back.iter().zip(&tensors) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(&t1.dims, &t2.dims);
                let b1: Vec<u64> = t1.data.iter().map(|x| x.to_bits()).collect();
                let b2: Vec<u64> = t2.data.iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(b1, b2);
            }
        }
    }
}
