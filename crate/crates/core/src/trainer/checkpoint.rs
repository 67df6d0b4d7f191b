//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `SLSD`, `u32` version, `u64` entry count, then per entry
//! `u16` name length, UTF-8 name, `u8` dtype, `u8` rank, `rank × u64` dims and the raw
//! payload; a trailing CRC-32 covers every preceding byte. Entries are sorted by name.
//! dtype 0 holds 32-bit reals (rank 4, `N,C,H,W`); dtype 1 holds bytes (rank 1) and
//! carries JSON metadata.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::OptimizerState;
use crate::error::{Error, Result};
use crate::network::{build, NetworkConfig, ParameterSet};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"SLSD";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_BYTES: u8 = 1;

const PARAM: &str = "param.";
const MOMENT1: &str = "adam.m.";
const MOMENT2: &str = "adam.v.";
const META_NETWORK: &str = "meta.network";
const META_STATE: &str = "meta.state";

/// Counters needed to continue a run; every random stream is derived from them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed iterations.
    pub iter: u64,
    pub max_iter: u64,
    pub seed: u64,
    pub optimizer_steps: u64,
    pub best_val_jac: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub network: NetworkConfig,
    pub params: ParameterSet<f32>,
    pub optimizer: OptimizerState,
    pub state: TrainState,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Tensor<f32>),
    Bytes(Vec<u8>),
}

pub fn encode(entries: &BTreeMap<String, Payload>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, payload) in entries {
        let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        match payload {
            Payload::F32(t) => {
                out.push(DTYPE_F32);
                out.push(4);
                for d in t.shape().dims() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Payload::Bytes(b) => {
                out.push(DTYPE_BYTES);
                out.push(1);
                out.extend_from_slice(&(b.len() as u64).to_le_bytes());
                out.extend_from_slice(b);
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated: needed {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<BTreeMap<String, Payload>> {
    if bytes.len() < MAGIC.len() + 4 + 8 + 4 {
        return Err(Error::Checkpoint(format!("truncated: {} bytes", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Checkpoint(format!("checksum mismatch (stored {stored:08x}, computed {actual:08x})")));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let count = r.u64()?;
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let payload = match (dtype, rank) {
            (DTYPE_F32, 4) => {
                let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
                let n = shape.numel();
                let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflows".into()))?)?;
                let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Payload::F32(Tensor::new(shape, data)?)
            }
            (DTYPE_BYTES, 1) => Payload::Bytes(r.take(dims[0])?.to_vec()),
            _ => return Err(Error::Checkpoint(format!("`{name}`: unsupported dtype {dtype} with rank {rank}"))),
        };
        if entries.insert(name.clone(), payload).is_some() {
            return Err(Error::Checkpoint(format!("duplicate entry `{name}`")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(entries)
}

/// Writes `bytes` to a temporary sibling, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = BTreeMap::new();
        for (name, p) in self.params.iter() {
            entries.insert(format!("{PARAM}{name}"), Payload::F32((*p.value).clone()));
        }
        for (name, (m, v)) in &self.optimizer.moments {
            entries.insert(format!("{MOMENT1}{name}"), Payload::F32(m.clone()));
            entries.insert(format!("{MOMENT2}{name}"), Payload::F32(v.clone()));
        }
        let mut state = self.state.clone();
        state.optimizer_steps = self.optimizer.t;
        entries.insert(META_NETWORK.into(), Payload::Bytes(serde_json::to_vec(&self.network)?));
        entries.insert(META_STATE.into(), Payload::Bytes(serde_json::to_vec(&state)?));
        encode(&entries)
    }

    /// Decodes a checkpoint and checks it against the network it declares.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let entries = decode(bytes)?;
        let network: NetworkConfig = serde_json::from_slice(meta(&entries, META_NETWORK)?)?;
        Self::from_entries(entries, network)
    }

    /// Decodes a checkpoint and checks its tensors against `network`, naming the first
    /// missing or mismatched tensor.
    pub fn from_bytes_for(bytes: &[u8], network: &NetworkConfig) -> Result<Self> {
        Self::from_entries(decode(bytes)?, network.clone())
    }

    fn from_entries(mut entries: BTreeMap<String, Payload>, network: NetworkConfig) -> Result<Self> {
        let state: TrainState = serde_json::from_slice(meta(&entries, META_STATE)?)?;
        let (_, mut params) = build(&network, 0)?;
        let mut optimizer = OptimizerState { t: state.optimizer_steps, moments: BTreeMap::new() };
        let names: Vec<(String, bool)> = params.iter().map(|(n, p)| (n.to_string(), p.group().is_some())).collect();
        for (name, trainable) in names {
            let value = take_f32(&mut entries, &format!("{PARAM}{name}"), &name)?;
            let expected = params.tensor(&name)?.shape();
            if value.shape() != expected {
                return Err(Error::ParameterShape { name, expected, found: value.shape() });
            }
            params.set(&name, value)?;
            if trainable {
                let m = take_f32(&mut entries, &format!("{MOMENT1}{name}"), &name)?;
                let v = take_f32(&mut entries, &format!("{MOMENT2}{name}"), &name)?;
                if m.shape() != expected || v.shape() != expected {
                    return Err(Error::ParameterShape { name, expected, found: m.shape() });
                }
                optimizer.moments.insert(name, (m, v));
            }
        }
        entries.remove(META_NETWORK);
        entries.remove(META_STATE);
        if let Some(extra) = entries.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        Ok(Checkpoint { network, params, optimizer, state })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn load_for(path: &Path, network: &NetworkConfig) -> Result<Self> {
        Self::from_bytes_for(&fs::read(path).map_err(|e| Error::io(path, e))?, network)
    }
}

fn meta<'a>(entries: &'a BTreeMap<String, Payload>, key: &str) -> Result<&'a [u8]> {
    match entries.get(key) {
        Some(Payload::Bytes(b)) => Ok(b),
        _ => Err(Error::Checkpoint(format!("missing `{key}`"))),
    }
}

fn take_f32(entries: &mut BTreeMap<String, Payload>, key: &str, param: &str) -> Result<Tensor<f32>> {
    match entries.remove(key) {
        Some(Payload::F32(t)) => Ok(t),
        Some(_) => Err(Error::Checkpoint(format!("`{key}` is not a real tensor"))),
        None => Err(Error::MissingParameter(param.into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let network = NetworkConfig::desk(16, 48);
        let (_, params) = build(&network, 5).unwrap();
        let mut optimizer = OptimizerState::new(&params);
        optimizer.t = 3;
        for (m, _) in optimizer.moments.values_mut() {
            m.data_mut()[0] = 0.25;
        }
        Checkpoint { network, params, optimizer, state: TrainState { iter: 3, max_iter: 10, seed: 1, optimizer_steps: 3, best_val_jac: Some(0.5) } }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.optimizer, c.optimizer);
        assert_eq!(back.state, c.state);
        for (n, p) in c.params.iter() {
            assert_eq!(back.params.tensor(n).unwrap(), &*p.value);
        }
    }

    #[test]
    fn corruption_detected() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[bytes.len() / 2] ^= 1;
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("checksum"));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 10]).is_err());
        let mut v2 = bytes.clone();
        v2[4] = 2;
        let n = v2.len() - 4;
        let crc = crc32fast::hash(&v2[..n]);
        v2[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(Checkpoint::from_bytes(&v2).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn mismatched_network_named() {
        let bytes = sample().to_bytes().unwrap();
        let other = NetworkConfig::desk(8, 48);
        let err = Checkpoint::from_bytes_for(&bytes, &other).unwrap_err().to_string();
        assert!(err.contains("decoder.") || err.contains("encoder."), "{err}");
        assert!(err.contains("expected"), "{err}");
    }
}
