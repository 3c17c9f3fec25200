//! Versioned binary checkpoint files.
//!
//! ```text
//! "CDHN" | version u16 | config_len u32 | config block | tensor_count u32 |
//!   per tensor: name_len u16 | name | rank u8 | dims u32 x rank | f32 x numel
//! ```
//!
//! Every integer and float is little-endian.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net::{HybridNetConfig, HybridNetwork};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CDHN";
pub const FORMAT_VERSION: u16 = 1;

/// SHA-256 over the serialized config and every weight byte.
pub type ConfigDigest = [u8; 32];

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated: need {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn u16_field(v: usize, what: &str) -> Result<[u8; 2]> {
    u16::try_from(v)
        .map(u16::to_le_bytes)
        .map_err(|_| Error::Format(format!("{what} = {v} does not fit in u16")))
}

fn u8_field(v: usize, what: &str) -> Result<u8> {
    u8::try_from(v).map_err(|_| Error::Format(format!("{what} = {v} does not fit in u8")))
}

/// Binary form of a network config.
pub fn encode_config(cfg: &HybridNetConfig) -> Result<Vec<u8>> {
    let mut b = Vec::new();
    b.extend(u16_field(cfg.n_layers, "n_layers")?);
    b.extend(u16_field(cfg.split_point, "split_point")?);
    b.push(cfg.edge_bits);
    b.push(cfg.cloud_bits);
    b.extend(u16_field(cfg.in_channels, "in_channels")?);
    b.extend(u16_field(cfg.height, "height")?);
    b.extend(u16_field(cfg.width, "width")?);
    b.extend(u16_field(cfg.num_classes, "num_classes")?);
    b.push(u8_field(cfg.stage_widths.len(), "stages")?);
    for &w in &cfg.stage_widths {
        b.extend(u16_field(w, "stage width")?);
    }
    b.push(u8_field(cfg.exit_locations.len(), "exits")?);
    for (&loc, &t) in cfg.exit_locations.iter().zip(&cfg.thresholds) {
        b.extend(u16_field(loc, "exit location")?);
        b.extend(t.to_le_bytes());
    }
    b.push(u8_field(cfg.lambdas.len(), "lambdas")?);
    for &l in &cfg.lambdas {
        b.extend(l.to_le_bytes());
    }
    Ok(b)
}

pub fn decode_config(bytes: &[u8]) -> Result<HybridNetConfig> {
    let mut r = Reader::new(bytes);
    let n_layers = r.u16()? as usize;
    let split_point = r.u16()? as usize;
    let edge_bits = r.u8()?;
    let cloud_bits = r.u8()?;
    let in_channels = r.u16()? as usize;
    let height = r.u16()? as usize;
    let width = r.u16()? as usize;
    let num_classes = r.u16()? as usize;
    let stages = r.u8()? as usize;
    let stage_widths = (0..stages).map(|_| r.u16().map(usize::from)).collect::<Result<_>>()?;
    let exits = r.u8()? as usize;
    let mut exit_locations = Vec::with_capacity(exits);
    let mut thresholds = Vec::with_capacity(exits);
    for _ in 0..exits {
        exit_locations.push(r.u16()? as usize);
        thresholds.push(r.f64()?);
    }
    let n_lambdas = r.u8()? as usize;
    let lambdas = (0..n_lambdas).map(|_| r.f64()).collect::<Result<_>>()?;
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes in config block", r.remaining())));
    }
    let cfg = HybridNetConfig {
        n_layers,
        split_point,
        edge_bits,
        cloud_bits,
        in_channels,
        height,
        width,
        stage_widths,
        exit_locations,
        num_classes,
        thresholds,
        lambdas,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn encode_checkpoint(net: &HybridNetwork) -> Result<Vec<u8>> {
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    b.extend(FORMAT_VERSION.to_le_bytes());
    let cfg = encode_config(net.config())?;
    b.extend((cfg.len() as u32).to_le_bytes());
    b.extend(cfg);
    let state = net.state();
    b.extend((state.len() as u32).to_le_bytes());
    for (name, t) in state {
        b.extend(u16_field(name.len(), "name length")?);
        b.extend(name.as_bytes());
        b.push(u8_field(t.rank(), "rank")?);
        for &d in t.shape() {
            b.extend(
                u32::try_from(d)
                    .map_err(|_| Error::Format(format!("dim {d} too large")))?
                    .to_le_bytes(),
            );
        }
        b.extend(t.to_le_bytes());
    }
    Ok(b)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<HybridNetwork> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:02x?}, expected \"CDHN\"")));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = r.u32()? as usize;
    let cfg = decode_config(r.take(cfg_len)?)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Format(format!("tensor {name}: size overflow")))?;
        let data = r.f32s(numel)?;
        let t = Tensor::new(&dims, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        tensors.push((name, t));
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes after tensors", r.remaining())));
    }
    let mut net = HybridNetwork::build(cfg, 0)?;
    net.load_state(tensors)?;
    Ok(net)
}

pub fn digest_bytes(bytes: &[u8]) -> ConfigDigest {
    Sha256::digest(bytes).into()
}

/// Digest that pins an edge runner and a cloud server to the same checkpoint.
pub fn network_digest(net: &HybridNetwork) -> Result<ConfigDigest> {
    Ok(digest_bytes(&encode_checkpoint(net)?))
}

pub fn save(net: &HybridNetwork, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(net)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<HybridNetwork> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> HybridNetwork {
        let cfg = HybridNetConfig {
            height: 8,
            width: 8,
            stage_widths: vec![4, 8],
            ..HybridNetConfig::desk(5, 3, 2)
        }
        .with_exits(vec![1, 3], 0.6, f64::INFINITY);
        HybridNetwork::build(cfg, 42).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let n = net();
        let bytes = encode_checkpoint(&n).unwrap();
        assert_eq!(&bytes[..4], b"CDHN");
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.config(), n.config());
        assert_eq!(back.state(), n.state());
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        assert_eq!(network_digest(&back).unwrap(), network_digest(&n).unwrap());
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let bytes = encode_checkpoint(&net()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }

    #[test]
    fn digest_tracks_weights() {
        let a = net();
        let mut b = net();
        b.final_head.bias.value.data_mut()[0] += 1e-3;
        assert_ne!(network_digest(&a).unwrap(), network_digest(&b).unwrap());
    }
}
