//! Versioned binary checkpoints for networks and their output heads.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic      8 bytes "DLGNCKPT"
//! version    u32     1
//! input_dim  u64
//! seed       u64     seed the wiring and initial logits were drawn from
//! layers     u32     L
//! widths     L * u32
//! wiring     per layer: width * u32 in_a, then width * u32 in_b
//! logits     per layer: width * 16 * f32
//! head tag   u8      0 none, 1 Group-Sum, 2 binary-logit, 3 codebook
//! head       Group-Sum / binary-logit: n u32, k u32, tau f64
//!            codebook: k u32, o u32, group_input u64 (0 = none), tau f64,
//!                      then k rows of (u32 bit length, ceil(o/64) * u64)
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gates::NUM_GATES;
use crate::heads::{Codebook, GroupSumHead, Head};
use crate::network::{Layer, LogicNetwork};

const MAGIC: &[u8; 8] = b"DLGNCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: LogicNetwork,
    pub head: Option<Head>,
}

pub fn save_checkpoint(net: &LogicNetwork, head: Option<&Head>) -> Vec<u8> {
    let mut w = Vec::new();
    w.extend_from_slice(MAGIC);
    w.write_u32::<LittleEndian>(VERSION).unwrap();
    w.write_u64::<LittleEndian>(net.input_dim() as u64).unwrap();
    w.write_u64::<LittleEndian>(net.seed()).unwrap();
    w.write_u32::<LittleEndian>(net.layers().len() as u32).unwrap();
    for l in net.layers() {
        w.write_u32::<LittleEndian>(l.width() as u32).unwrap();
    }
    for l in net.layers() {
        for &i in l.in_a.iter().chain(&l.in_b) {
            w.write_u32::<LittleEndian>(i).unwrap();
        }
    }
    for l in net.layers() {
        for logits in l.logits() {
            for &v in logits {
                w.write_f32::<LittleEndian>(v).unwrap();
            }
        }
    }
    match head {
        None => w.push(0),
        Some(Head::GroupSum(h)) | Some(Head::BinaryLogit(h)) => {
            w.push(if matches!(head, Some(Head::GroupSum(_))) { 1 } else { 2 });
            w.write_u32::<LittleEndian>(h.outputs() as u32).unwrap();
            w.write_u32::<LittleEndian>(h.classes() as u32).unwrap();
            w.write_f64::<LittleEndian>(h.tau()).unwrap();
        }
        Some(Head::Codebook { codebook, tau }) => {
            w.push(3);
            w.write_u32::<LittleEndian>(codebook.classes() as u32).unwrap();
            w.write_u32::<LittleEndian>(codebook.code_len() as u32).unwrap();
            w.write_u64::<LittleEndian>(codebook.group_input().unwrap_or(0) as u64).unwrap();
            w.write_f64::<LittleEndian>(*tau).unwrap();
            for c in 0..codebook.classes() {
                w.write_u32::<LittleEndian>(codebook.code_len() as u32).unwrap();
                for &word in codebook.packed_code(c) {
                    w.write_u64::<LittleEndian>(word).unwrap();
                }
            }
        }
    }
    w
}

fn truncated(e: std::io::Error) -> Error {
    Error::corrupt("checkpoint", format!("truncated ({e})"))
}

fn read_u32s(r: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<u32>> {
    remaining_at_least(r, n * 4)?;
    (0..n)
        .map(|_| r.read_u32::<LittleEndian>().map_err(truncated))
        .collect()
}

fn remaining_at_least(r: &Cursor<&[u8]>, bytes: usize) -> Result<()> {
    let left = r.get_ref().len() as u64 - r.position();
    if (left as usize) < bytes {
        Err(Error::corrupt(
            "checkpoint",
            format!("truncated: need {bytes} more bytes, {left} left"),
        ))
    } else {
        Ok(())
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::corrupt("checkpoint", "bad magic"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
    if version != VERSION {
        return Err(Error::Version {
            kind: "checkpoint",
            found: version,
            supported: VERSION,
        });
    }
    let input_dim = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
    let seed = r.read_u64::<LittleEndian>().map_err(truncated)?;
    let n_layers = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let widths: Vec<usize> = read_u32s(&mut r, n_layers)?
        .into_iter()
        .map(|w| w as usize)
        .collect();
    let mut wiring = Vec::with_capacity(n_layers);
    for &w in &widths {
        let in_a = read_u32s(&mut r, w)?;
        let in_b = read_u32s(&mut r, w)?;
        wiring.push((in_a, in_b));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for ((in_a, in_b), &w) in wiring.into_iter().zip(&widths) {
        remaining_at_least(&r, w * NUM_GATES * 4)?;
        let mut logits = vec![[0f32; NUM_GATES]; w];
        for l in &mut logits {
            r.read_f32_into::<LittleEndian>(l).map_err(truncated)?;
        }
        layers.push(Layer { in_a, in_b, logits });
    }
    let network = LogicNetwork::from_parts(input_dim, seed, layers)
        .map_err(|e| Error::corrupt("checkpoint", e.to_string()))?;

    let tag = r.read_u8().map_err(truncated)?;
    let head = match tag {
        0 => None,
        1 | 2 => {
            let n = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
            let k = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
            let tau = r.read_f64::<LittleEndian>().map_err(truncated)?;
            let h = GroupSumHead::new(n, k, tau).map_err(|e| Error::corrupt("checkpoint", e.to_string()))?;
            Some(if tag == 1 { Head::GroupSum(h) } else { Head::BinaryLogit(h) })
        }
        3 => {
            let k = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
            let o = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
            let group = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
            let tau = r.read_f64::<LittleEndian>().map_err(truncated)?;
            let words = o.div_ceil(64);
            let mut rows = Vec::with_capacity(k);
            for _ in 0..k {
                let len = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
                if len != o {
                    return Err(Error::corrupt("checkpoint", "codebook row length mismatch"));
                }
                remaining_at_least(&r, words * 8)?;
                let mut row = vec![0u64; words];
                r.read_u64_into::<LittleEndian>(&mut row).map_err(truncated)?;
                rows.push(row);
            }
            let mut cb = Codebook::from_packed(o, rows).map_err(|e| Error::corrupt("checkpoint", e.to_string()))?;
            if group != 0 {
                cb = cb
                    .with_group_reduction(group)
                    .map_err(|e| Error::corrupt("checkpoint", e.to_string()))?;
            }
            Some(Head::Codebook { codebook: cb, tau })
        }
        t => return Err(Error::corrupt("checkpoint", format!("unknown head tag {t}"))),
    };
    if r.position() as usize != bytes.len() {
        return Err(Error::corrupt("checkpoint", "trailing bytes after head section"));
    }
    Ok(Checkpoint { network, head })
}

pub fn write_checkpoint(path: impl AsRef<Path>, net: &LogicNetwork, head: Option<&Head>) -> Result<()> {
    fs::write(path, save_checkpoint(net, head))?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    load_checkpoint(&fs::read(path)?)
}

/// Short content hash of a network (wiring, logits, dimensions, seed).
pub fn fingerprint(net: &LogicNetwork) -> String {
    short_hash(&save_checkpoint(net, None))
}

pub(crate) fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(&digest[..8])
}
