//! Tensor archives for network and optimizer state.
//!
//! Layout of a `.nck` file:
//!
//! ```text
//! 8 bytes   magic "NGCKPT01"
//! 8 bytes   header length N, u64 little endian
//! N bytes   JSON header: {"kind", "role", "config", "tensors": [{"name", "shape", "offset", "len"}]}
//! rest      f32 little-endian payload; `offset`/`len` count f32 values
//! ```
//!
//! Tensor names are layer paths such as `enc.3.conv.weight` or `dec.0.bn.gamma`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Discriminator, Generator, Role, UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::tensor::Real;

pub const MAGIC: &[u8; 8] = b"NGCKPT01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    role: Option<Role>,
    config: Option<UNetConfig>,
    tensors: Vec<TensorEntry>,
}

/// Named f32 tensors plus an optional network description.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorArchive {
    pub kind: String,
    pub role: Option<Role>,
    pub config: Option<UNetConfig>,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl TensorArchive {
    pub fn from_net<T: Real>(net: &UNet<T>) -> Self {
        Self {
            kind: "network".into(),
            role: Some(net.role()),
            config: Some(net.config().clone()),
            tensors: net
                .params()
                .iter()
                .map(|p| {
                    let data = p.data.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect();
                    (p.name.clone(), p.shape.clone(), data)
                })
                .collect(),
        }
    }

    /// Rebuilds a network; the stored role must match `role`.
    pub fn to_net<T: Real>(&self, role: Role, path: &Path) -> Result<UNet<T>> {
        if self.role != Some(role) {
            return Err(corrupt(path, format!("expected a {role:?} archive, found {:?}", self.role)));
        }
        let config = self.config.clone().ok_or_else(|| corrupt(path, "archive has no network config"))?;
        // Initial values are overwritten right away.
        let mut net = UNet::new(config, role, &mut ChaCha8Rng::seed_from_u64(0))?;
        let values = self
            .tensors
            .iter()
            .map(|(n, s, d)| (n.clone(), s.clone(), d.iter().map(|&v| T::lit(v as f64)).collect()))
            .collect();
        net.load_params(values).map_err(|e| corrupt(path, e.to_string()))?;
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(name, shape, data)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                    offset,
                    len: data.len(),
                };
                offset += data.len();
                e
            })
            .collect();
        let header = Header {
            kind: self.kind.clone(),
            role: self.role,
            config: self.config.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, data) in &self.tensors {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt(path, "not a normgen checkpoint (bad magic)"));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = bytes.get(16..16usize.saturating_add(n)).ok_or_else(|| corrupt(path, "truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| corrupt(path, format!("bad header: {e}")))?;
        let payload = &bytes[16 + n..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            if e.shape.iter().product::<usize>() != e.len {
                return Err(corrupt(path, format!("tensor `{}` shape disagrees with its length", e.name)));
            }
            let raw = payload
                .get(4 * e.offset..4 * (e.offset + e.len))
                .ok_or_else(|| corrupt(path, format!("tensor `{}` runs past the end of the file", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name, e.shape, data));
        }
        Ok(Self {
            kind: header.kind,
            role: header.role,
            config: header.config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn get(&self, name: &str) -> Option<&(String, Vec<usize>, Vec<f32>)> {
        self.tensors.iter().find(|(n, _, _)| n == name)
    }
}

pub fn save_generator<T: Real>(g: &Generator<T>, path: &Path) -> Result<()> {
    TensorArchive::from_net(&g.0).save(path)
}

pub fn load_generator<T: Real>(path: &Path) -> Result<Generator<T>> {
    TensorArchive::load(path)?.to_net(Role::Generator, path).map(Generator)
}

pub fn save_discriminator<T: Real>(d: &Discriminator<T>, path: &Path) -> Result<()> {
    TensorArchive::from_net(&d.0).save(path)
}

pub fn load_discriminator<T: Real>(path: &Path) -> Result<Discriminator<T>> {
    TensorArchive::load(path)?.to_net(Role::Critic, path).map(Discriminator)
}
