//! Binary named-tensor archive.
//!
//! Layout, all integers little-endian: magic `DPUC`, `u32` version, `u32`
//! tensor count, then per tensor a `u16` name length, the UTF-8 name, a `u8`
//! rank, one `u32` per dim and the row-major `f64` values.
//!
//! Network checkpoints start with a `topology` tensor describing the
//! configuration, followed by every parameter and buffer in build order.

use std::path::Path;

use crate::attention::{AttentionConfig, Correlation, Neighborhood};
use crate::error::{shape_err, Error, Result};
use crate::network::{Network, NetworkConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DPUC";
pub const VERSION: u32 = 1;
pub const TOPOLOGY: &str = "topology";

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn encode(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| format_err("too many tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let len =
            u16::try_from(name.len()).map_err(|_| format_err(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank =
            u8::try_from(t.rank()).map_err(|_| format_err(format!("rank too large for {name}")))?;
        out.push(rank);
        for &d in t.dims() {
            let d = u32::try_from(d).map_err(|_| format_err(format!("dim too large in {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format_err(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if &r.array::<4>()? != MAGIC {
        return Err(format_err("bad magic, not a checkpoint"));
    }
    let version = u32::from_le_bytes(r.array()?);
    if version != VERSION {
        return Err(format_err(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = u32::from_le_bytes(r.array()?) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u16::from_le_bytes(r.array()?) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| format_err("tensor name is not UTF-8"))?
            .to_string();
        let rank = r.array::<1>()?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(r.array()?) as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| format_err(format!("dims of {name} overflow")))?;
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| format_err("tensor too large"))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        out.push((name, Tensor::new(dims, data)?));
    }
    if r.pos != bytes.len() {
        return Err(format_err(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

fn topology_tensor(cfg: &NetworkConfig) -> Tensor {
    let a = &cfg.attention;
    let values = [
        cfg.levels as f64,
        cfg.base_channels as f64,
        if cfg.attention_enabled { 1.0 } else { 0.0 },
        match a.mode {
            Correlation::Covariance => 0.0,
            Correlation::Dot => 1.0,
        },
        match a.neighborhood {
            Neighborhood::CrissCross => 0.0,
            Neighborhood::Full => 1.0,
        },
        a.reduction as f64,
        a.loops as f64,
    ];
    Tensor::new(vec![values.len()], values.to_vec()).expect("length matches")
}

fn config_from_topology(t: &Tensor) -> Result<NetworkConfig> {
    let v = t.data();
    if t.dims() != [7] || v.iter().any(|x| x.fract() != 0.0 || *x < 0.0) {
        return Err(format_err("malformed topology tensor"));
    }
    let flag = |x: f64, what: &str| match x as u64 {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(format_err(format!("bad {what} code {x}"))),
    };
    Ok(NetworkConfig {
        levels: v[0] as usize,
        base_channels: v[1] as usize,
        attention_enabled: flag(v[2], "attention flag")?,
        attention: AttentionConfig {
            mode: if flag(v[3], "mode")? {
                Correlation::Dot
            } else {
                Correlation::Covariance
            },
            neighborhood: if flag(v[4], "neighborhood")? {
                Neighborhood::Full
            } else {
                Neighborhood::CrissCross
            },
            reduction: v[5] as usize,
            loops: v[6] as usize,
        },
        seed: 0,
    })
}

pub fn network_tensors(net: &Network) -> Vec<(String, Tensor)> {
    let mut out = vec![(TOPOLOGY.to_string(), topology_tensor(net.config()))];
    out.extend(
        net.params
            .ids()
            .map(|id| (net.params.name(id).to_string(), net.params.get(id).clone())),
    );
    out
}

pub fn save(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(&network_tensors(net))?)?;
    Ok(())
}

/// Overwrites every tensor of `net` from `tensors`, which must match the
/// network's names and dims exactly.
pub fn restore(net: &mut Network, tensors: Vec<(String, Tensor)>) -> Result<()> {
    let expected = network_tensors(net);
    if tensors.len() != expected.len() {
        return Err(shape_err!(
            "checkpoint holds {} tensors, network expects {}",
            tensors.len(),
            expected.len()
        ));
    }
    for ((name, t), (want_name, want)) in tensors.iter().zip(&expected) {
        if name != want_name || t.dims() != want.dims() {
            return Err(shape_err!(
                "checkpoint tensor {:?} {:?} does not match network tensor {:?} {:?}",
                name,
                t.dims(),
                want_name,
                want.dims()
            ));
        }
        if name == TOPOLOGY && t != want {
            return Err(shape_err!(
                "checkpoint topology differs from the network configuration"
            ));
        }
    }
    let ids: Vec<_> = net.params.ids().collect();
    for (id, (_, t)) in ids.into_iter().zip(tensors.into_iter().skip(1)) {
        *net.params.get_mut(id) = t;
    }
    Ok(())
}

/// Loads into an existing network built from a configuration.
pub fn load_into(net: &mut Network, path: impl AsRef<Path>) -> Result<()> {
    let tensors = decode(&std::fs::read(path)?)?;
    restore(net, tensors)
}

/// Rebuilds the network described by the checkpoint's topology.
pub fn load(path: impl AsRef<Path>) -> Result<Network> {
    let tensors = decode(&std::fs::read(path)?)?;
    let topo = tensors
        .first()
        .filter(|(name, _)| name == TOPOLOGY)
        .ok_or_else(|| format_err("checkpoint has no topology tensor"))?;
    let cfg = config_from_topology(&topo.1)?;
    let mut net = Network::build(&cfg).map_err(|e| format_err(format!("topology: {e}")))?;
    restore(&mut net, tensors)?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn small(attention: bool) -> NetworkConfig {
        NetworkConfig {
            levels: 2,
            base_channels: 2,
            attention_enabled: attention,
            seed: 9,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn layout_of_a_single_tensor() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -0.5]).unwrap();
        let bytes = encode(&[("ab".to_string(), t.clone())]).unwrap();
        let mut want = b"DPUC".to_vec();
        want.extend_from_slice(&[
            1, 0, 0, 0, 1, 0, 0, 0, 2, 0, b'a', b'b', 2, 1, 0, 0, 0, 2, 0, 0, 0,
        ]);
        want.extend_from_slice(&1.0f64.to_le_bytes());
        want.extend_from_slice(&(-0.5f64).to_le_bytes());
        assert_eq!(bytes, want);
        assert_eq!(decode(&bytes).unwrap(), vec![("ab".to_string(), t)]);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut net = Network::build(&small(true)).unwrap();
        // move the running statistics off their initial values
        let x = Tensor::rand_uniform(&[2, 1, 8, 8], 0.0, 1.0, &mut Rng::new(1));
        net.forward(&x, crate::ops::Mode::Train).unwrap();
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        save(&net, &a).unwrap();
        let loaded = load(&a).unwrap();
        assert_eq!(loaded.params, net.params);
        assert_eq!(loaded.config().attention, net.config().attention);
        save(&loaded, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn rejects_corrupt_files() {
        let net = Network::build(&small(false)).unwrap();
        let bytes = encode(&network_tensors(&net)).unwrap();
        for cut in [0, 3, 7, 12, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(decode(&bytes[..cut]), Err(Error::Format(_))),
                "cut {cut}"
            );
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::Format(_))));
    }

    #[test]
    fn mismatched_config_is_a_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.ckpt");
        save(&Network::build(&small(false)).unwrap(), &path).unwrap();
        let mut deeper = Network::build(&NetworkConfig {
            levels: 3,
            ..small(false)
        })
        .unwrap();
        assert!(matches!(
            load_into(&mut deeper, &path),
            Err(Error::ShapeMismatch(_))
        ));
        let mut with_attention = Network::build(&small(true)).unwrap();
        assert!(matches!(
            load_into(&mut with_attention, &path),
            Err(Error::ShapeMismatch(_))
        ));
        let mut same = Network::build(&NetworkConfig {
            seed: 1,
            ..small(false)
        })
        .unwrap();
        load_into(&mut same, &path).unwrap();
    }
}
