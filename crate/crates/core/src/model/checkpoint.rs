//! Self-describing little-endian checkpoint format.
//!
//! ```text
//! magic       8 bytes  "DFBCKPT\0"
//! version     u32
//! mode        u8       0 baseline, 1 dfb_cnn, 2 dfb_fc
//! input_size  u32
//! n_conv      u32      then per block: out u32, kernel u32, stride u32, pool u8
//! n_hidden    u32      then per layer: width u32
//! classes     u32
//! dfb_norm    f64
//! adam_t      u64
//! n_tensors   u32      then per tensor: len u64, len × f64
//! adam m, adam v       same lengths, no prefix
//! ```

use std::fs;
use std::path::Path;

use super::adam::AdamState;
use super::network::Network;
use super::train::NetworkState;
use super::{Architecture, ConvSpec, FusionMode};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DFBCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn checkpoint_bytes(state: &NetworkState) -> Vec<u8> {
    let net = &state.net;
    let arch = net.arch();
    let mut b = Vec::with_capacity(64 + net.param_count() * 24);
    b.extend_from_slice(CHECKPOINT_MAGIC);
    b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    b.push(net.mode().tag());
    put_u32(&mut b, arch.input_size);
    put_u32(&mut b, arch.conv.len());
    for c in &arch.conv {
        put_u32(&mut b, c.out_channels);
        put_u32(&mut b, c.kernel);
        put_u32(&mut b, c.stride);
        b.push(c.pool as u8);
    }
    put_u32(&mut b, arch.hidden.len());
    for &h in &arch.hidden {
        put_u32(&mut b, h);
    }
    put_u32(&mut b, arch.classes);
    b.extend_from_slice(&state.dfb_norm.to_le_bytes());
    b.extend_from_slice(&state.adam.t.to_le_bytes());
    put_u32(&mut b, net.params().len());
    for p in net.params() {
        b.extend_from_slice(&(p.len() as u64).to_le_bytes());
        p.iter().for_each(|v| b.extend_from_slice(&v.to_le_bytes()));
    }
    for t in state.adam.m.iter().chain(&state.adam.v) {
        t.iter().for_each(|v| b.extend_from_slice(&v.to_le_bytes()));
    }
    b
}

fn put_u32(b: &mut Vec<u8>, v: usize) {
    b.extend_from_slice(&(v as u32).to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| bad("tensor too large"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format { what: "checkpoint", detail: detail.into() }
}

pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<NetworkState> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mode = FusionMode::from_tag(r.u8()?).ok_or_else(|| bad("unknown fusion mode"))?;
    let input_size = r.u32()?;
    let n_conv = r.u32()?;
    let mut conv = Vec::with_capacity(n_conv.min(64));
    for _ in 0..n_conv {
        let (out, kernel, stride) = (r.u32()?, r.u32()?, r.u32()?);
        conv.push(ConvSpec::new(out, kernel, stride, r.u8()? != 0));
    }
    let n_hidden = r.u32()?;
    let hidden = (0..n_hidden).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let classes = r.u32()?;
    let dfb_norm = r.f64()?;
    let t = r.u64()?;
    let n_tensors = r.u32()?;
    let mut params = Vec::with_capacity(n_tensors.min(256));
    for _ in 0..n_tensors {
        let len = r.u64()? as usize;
        params.push(r.f64s(len)?);
    }
    let arch = Architecture { input_size, conv, hidden, classes };
    let lens: Vec<usize> = params.iter().map(Vec::len).collect();
    let net = Network::from_params(arch, mode, params)?;
    let m = lens.iter().map(|&n| r.f64s(n)).collect::<Result<Vec<_>>>()?;
    let v = lens.iter().map(|&n| r.f64s(n)).collect::<Result<Vec<_>>>()?;
    if r.pos != buf.len() {
        return Err(bad("trailing bytes"));
    }
    if !(dfb_norm > 0.0) {
        return Err(bad("non-positive dfb_norm"));
    }
    Ok(NetworkState { net, adam: AdamState { m, v, t }, dfb_norm })
}

pub fn write_checkpoint(path: &Path, state: &NetworkState) -> Result<()> {
    crate::io::write_bytes(path, &checkpoint_bytes(state))
}

pub fn read_checkpoint(path: &Path) -> Result<NetworkState> {
    let buf = fs::read(path).map_err(|source| Error::Io { path: path.into(), source })?;
    checkpoint_from_bytes(&buf)
}
