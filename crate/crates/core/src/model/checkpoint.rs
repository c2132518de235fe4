//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! b"MTSE"  u32 format_version  u32 header_len  header (JSON)
//! u32 array_count
//! per array: u32 name_len  name (UTF-8)  u32 rank  u64 dims[rank]  f32 data[]
//! ```
//!
//! Arrays are the network parameters in declaration order, optionally
//! followed by the optimizer moments (`adam.m.<name>`, then `adam.v.<name>`).

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Network, NetworkConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MTSE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: NetworkConfig,
    epoch: u64,
    step: u64,
    /// Optimizer step count when moments are stored.
    optimizer_step: Option<u64>,
}

/// First and second moment estimates, in parameter-store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerMoments {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub network: Network,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    pub moments: Option<OptimizerMoments>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_array(w: &mut impl Write, name: &str, t: &Tensor) -> io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(4 * t.len());
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| corrupt("truncated file"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| corrupt("truncated file"))?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64)
        .read_to_end(&mut buf)
        .map_err(|e| corrupt(e.to_string()))?;
    if buf.len() != n {
        return Err(corrupt("truncated file"));
    }
    Ok(buf)
}

fn read_array(r: &mut impl Read) -> Result<(String, Tensor)> {
    let len = read_u32(r)? as usize;
    let name = String::from_utf8(read_bytes(r, len)?).map_err(|_| corrupt("array name is not UTF-8"))?;
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(corrupt(format!("array `{name}` has rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(r)? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n > 0 && n < 1 << 32)
        .ok_or_else(|| corrupt(format!("array `{name}` has shape {shape:?}")))?;
    let raw = read_bytes(r, 4 * n)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Ok((name, Tensor::new(&shape, data)?))
}

/// Serializes `net` with its training position.
pub fn write_to(
    w: &mut impl Write,
    net: &Network,
    epoch: u64,
    step: u64,
    moments: Option<&OptimizerMoments>,
) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        config: net.config().clone(),
        epoch,
        step,
        optimizer_step: moments.map(|m| m.step),
    };
    let json = serde_json::to_vec(&header)?;
    let io = |e: io::Error| corrupt(e.to_string());
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    let store = net.store();
    let count = store.len() * if moments.is_some() { 3 } else { 1 };
    w.write_all(&(count as u32).to_le_bytes()).map_err(io)?;
    for (name, t) in store.iter() {
        write_array(w, name, t).map_err(io)?;
    }
    if let Some(m) = moments {
        for (tag, arrays) in [("m", &m.m), ("v", &m.v)] {
            for (name, t) in store.names().iter().zip(arrays) {
                write_array(w, &format!("adam.{tag}.{name}"), t).map_err(io)?;
            }
        }
    }
    Ok(())
}

pub fn read_from(r: &mut impl Read) -> Result<Checkpoint> {
    let magic = read_bytes(r, 4)?;
    if magic != MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)"));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let len = read_u32(r)? as usize;
    let header: Header = serde_json::from_slice(&read_bytes(r, len)?)
        .map_err(|e| corrupt(format!("bad header: {e}")))?;
    header.config.validate()?;
    let mut network = Network::init(header.config.clone(), 0)?;
    let n = network.store().len();
    let count = read_u32(r)? as usize;
    let want = n * if header.optimizer_step.is_some() { 3 } else { 1 };
    if count != want {
        return Err(corrupt(format!(
            "{count} arrays stored, configuration needs {want}"
        )));
    }
    let params = (0..n).map(|_| read_array(r)).collect::<Result<Vec<_>>>()?;
    network.store_mut().load(params)?;
    let moments = match header.optimizer_step {
        None => None,
        Some(step) => {
            let mut read_set = |tag: &str| -> Result<Vec<Tensor>> {
                let names = network.store().names().to_vec();
                names
                    .iter()
                    .zip(network.store().values())
                    .map(|(name, value)| {
                        let (got, t) = read_array(r)?;
                        let want = format!("adam.{tag}.{name}");
                        if got != want || t.shape() != value.shape() {
                            return Err(corrupt(format!("expected `{want}`, found `{got}`")));
                        }
                        Ok(t)
                    })
                    .collect()
            };
            let m = read_set("m")?;
            let v = read_set("v")?;
            Some(OptimizerMoments { step, m, v })
        }
    };
    Ok(Checkpoint {
        network,
        epoch: header.epoch,
        step: header.step,
        moments,
    })
}

pub fn save(
    path: &Path,
    net: &Network,
    epoch: u64,
    step: u64,
    moments: Option<&OptimizerMoments>,
) -> Result<()> {
    let mut buf = Vec::new();
    write_to(&mut buf, net, epoch, step, moments)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_from(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkConfig {
        NetworkConfig::from_json(
            r#"{"blocks":1,"channels":4,"compress_ratio":0.4,"window_scales":[4],"terms":1,"heads":1}"#,
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_preserves_f32_values_and_moments() {
        let net = Network::init(tiny(), 5).unwrap();
        let moments = OptimizerMoments {
            step: 7,
            m: net.store().values().iter().map(|t| t.scale(0.5)).collect(),
            v: net.store().values().iter().map(|t| t.map(|x| x * x)).collect(),
        };
        let mut buf = Vec::new();
        write_to(&mut buf, &net, 3, 21, Some(&moments)).unwrap();
        let ck = read_from(&mut buf.as_slice()).unwrap();
        assert_eq!((ck.epoch, ck.step), (3, 21));
        assert_eq!(ck.network.config(), net.config());
        for (a, b) in ck.network.store().values().iter().zip(net.store().values()) {
            assert_eq!(a, &b.map(|x| f64::from(x as f32)));
        }
        let m = ck.moments.unwrap();
        assert_eq!(m.step, 7);
        assert_eq!(m.m.len(), net.store().len());
    }

    #[test]
    fn rejects_corruption() {
        let net = Network::init(tiny(), 5).unwrap();
        let mut buf = Vec::new();
        write_to(&mut buf, &net, 0, 0, None).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_from(&mut bad.as_slice()), Err(Error::Checkpoint(_))));
        let cut = &buf[..buf.len() - 3];
        assert!(matches!(read_from(&mut &cut[..]), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn rejects_config_that_disagrees_with_arrays() {
        let net = Network::init(tiny(), 5).unwrap();
        let mut buf = Vec::new();
        write_to(&mut buf, &net, 0, 0, None).unwrap();
        // Same header length, different term count.
        let at = buf.windows(9).position(|w| w == b"\"terms\":1").unwrap();
        let mut bytes = buf.clone();
        bytes[at + 8] = b'2';
        assert!(matches!(read_from(&mut bytes.as_slice()), Err(Error::Checkpoint(_))));
    }
}
