//! Binary checkpoint format.
//!
//! ```text
//! "LMCK"  u32 version  u32 count
//! count × { u32 name_len, name bytes, u32 rank, rank × u32 extent, f32 LE values }
//! u32 meta_len, meta bytes (UTF-8 key=value lines)
//! ```
//!
//! All integers are little-endian. The trailing metadata block carries the
//! model configuration and the threshold-policy state.

use std::io::{self, Read, Write};

use super::{ParamStore, Tensor};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub params: ParamStore<S>,
    pub meta: Vec<(String, String)>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

fn put_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

pub fn write_checkpoint<S: Scalar>(w: &mut impl Write, params: &ParamStore<S>, meta: &[(String, String)]) -> io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION)?;
    put_u32(w, params.len() as u32)?;
    for (name, t) in params.iter() {
        put_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.rank() as u32)?;
        for &d in t.shape() {
            put_u32(w, d as u32)?;
        }
        for v in t.data() {
            w.write_all(&(v.f64() as f32).to_le_bytes())?;
        }
    }
    let mut text = String::new();
    for (k, v) in meta {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(invalid(format!("metadata entry `{k}` cannot be encoded")));
        }
        text.push_str(&format!("{k}={v}\n"));
    }
    put_u32(w, text.len() as u32)?;
    w.write_all(text.as_bytes())
}

pub fn read_checkpoint<S: Scalar>(r: &mut impl Read) -> io::Result<Checkpoint<S>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(invalid("bad checkpoint magic"));
    }
    let version = get_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(invalid(format!("unsupported checkpoint version {version}")));
    }
    let count = get_u32(r)?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = get_u32(r)? as usize;
        if len > 4096 {
            return Err(invalid("parameter name too long"));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| invalid("parameter name is not UTF-8"))?;
        let rank = get_u32(r)? as usize;
        if rank == 0 || rank > 8 {
            return Err(invalid(format!("bad rank {rank} for `{name}`")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(get_u32(r)? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= 1 << 28)
            .ok_or_else(|| invalid(format!("extent overflow for `{name}`")))?;
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| S::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| invalid(e.to_string()))?;
        params.add(name, t);
    }
    let meta_len = get_u32(r)? as usize;
    let mut text = vec![0u8; meta_len];
    r.read_exact(&mut text)?;
    let text = String::from_utf8(text).map_err(|_| invalid("metadata is not UTF-8"))?;
    let meta = text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| invalid(format!("bad metadata line `{l}`")))
        })
        .collect::<io::Result<_>>()?;
    Ok(Checkpoint { params, meta })
}
