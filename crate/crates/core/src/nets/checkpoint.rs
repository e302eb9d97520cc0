//! `IVFL` checkpoint encoding.
//!
//! Little-endian throughout: magic `"IVFL"`, `u32` format version, `u64` config
//! hash, `u32` tensor count, then per tensor a `u32` name length, UTF-8 name,
//! `u32` rank, `u32` extents and raw `f32` values.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::num::Tensor;

const MAGIC: &[u8; 4] = b"IVFL";
pub const FORMAT_VERSION: u32 = 1;
const PARTS: [&str; 5] = ["teacher", "generator", "inverter", "disc", "extra"];

/// All trained state of one run.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelBundle {
    pub config_hash: u64,
    /// Stored bit-exactly as pairs of 32-bit words.
    pub schedule_betas: Vec<f64>,
    pub step: u64,
    pub teacher: Option<ParamSet<f32>>,
    pub generator: Option<ParamSet<f32>>,
    pub inverter: Option<ParamSet<f32>>,
    pub disc: Option<ParamSet<f32>>,
    /// Optimizer moments and other resumable state.
    pub extra: Option<ParamSet<f32>>,
}

impl ModelBundle {
    fn parts(&self) -> [Option<&ParamSet<f32>>; 5] {
        [
            self.teacher.as_ref(),
            self.generator.as_ref(),
            self.inverter.as_ref(),
            self.disc.as_ref(),
            self.extra.as_ref(),
        ]
    }

    fn part_mut(&mut self, i: usize) -> &mut Option<ParamSet<f32>> {
        match i {
            0 => &mut self.teacher,
            1 => &mut self.generator,
            2 => &mut self.inverter,
            3 => &mut self.disc,
            _ => &mut self.extra,
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: impl Iterator<Item = u32>) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len())?;
    for &d in shape {
        put_u32(out, d)?;
    }
    for bits in data {
        out.extend_from_slice(&bits.to_le_bytes());
    }
    Ok(())
}

pub fn encode_checkpoint(bundle: &ModelBundle) -> Result<Vec<u8>> {
    let mut body = Vec::new();
    let mut count = 2;
    let betas = &bundle.schedule_betas;
    if betas.is_empty() {
        return Err(Error::Checkpoint("bundle has no schedule".into()));
    }
    let words = betas.iter().flat_map(|b| {
        let bits = b.to_bits();
        [(bits >> 32) as u32, bits as u32]
    });
    put_tensor(&mut body, "schedule.beta", &[betas.len(), 2], words)?;
    if bundle.step >= 1 << 48 {
        return Err(Error::Checkpoint("step counter exceeds 2^48".into()));
    }
    let halves = [(bundle.step >> 24) as f32, (bundle.step & 0xFF_FFFF) as f32];
    put_tensor(&mut body, "meta.step", &[2], halves.iter().map(|h| h.to_bits()))?;
    for (prefix, part) in PARTS.iter().zip(bundle.parts()) {
        let Some(set) = part else { continue };
        for (name, t) in set.iter() {
            put_tensor(&mut body, &format!("{prefix}.{name}"), t.shape(), t.data().iter().map(|v| v.to_bits()))?;
            count += 1;
        }
    }
    let mut out = Vec::with_capacity(20 + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&bundle.config_hash.to_le_bytes());
    put_u32(&mut out, count)?;
    out.extend_from_slice(&body);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("truncated file while reading {what} at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Decodes a checkpoint, rejecting it unless its hash equals `expected_hash` when given.
pub fn decode_checkpoint(bytes: &[u8], expected_hash: Option<u64>) -> Result<ModelBundle> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not an IVFL checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}, expected {FORMAT_VERSION}")));
    }
    let h = r.take(8, "config hash")?;
    let config_hash = u64::from_le_bytes([h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7]]);
    if let Some(want) = expected_hash {
        if want != config_hash {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint config hash {config_hash:016x} does not match current config {want:016x}"
            )));
        }
    }
    let count = r.u32("tensor count")? as usize;
    let mut bundle = ModelBundle { config_hash, ..Default::default() };
    let (mut saw_beta, mut saw_step) = (false, false);
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(len, "name")?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.filter(|n| n.checked_mul(4).is_some()).ok_or_else(|| Error::Checkpoint(format!("{name}: extents overflow")))?;
        let words: Vec<u32> = r
            .take(n * 4, &name)?
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        match name.as_str() {
            "schedule.beta" => {
                if shape.len() != 2 || shape[1] != 2 {
                    return Err(Error::Checkpoint("schedule.beta must be [T, 2]".into()));
                }
                bundle.schedule_betas = words
                    .chunks_exact(2)
                    .map(|w| f64::from_bits(((w[0] as u64) << 32) | w[1] as u64))
                    .collect();
                saw_beta = true;
            }
            "meta.step" => {
                if words.len() != 2 {
                    return Err(Error::Checkpoint("meta.step must hold two values".into()));
                }
                let (hi, lo) = (f32::from_bits(words[0]), f32::from_bits(words[1]));
                bundle.step = ((hi as u64) << 24) | lo as u64;
                saw_step = true;
            }
            _ => {
                let (prefix, rest) = name
                    .split_once('.')
                    .ok_or_else(|| Error::Checkpoint(format!("unqualified tensor name {name}")))?;
                let i = PARTS
                    .iter()
                    .position(|p| *p == prefix)
                    .ok_or_else(|| Error::Checkpoint(format!("unknown tensor group {prefix}")))?;
                let t = Tensor::new(&shape, words.into_iter().map(f32::from_bits).collect())
                    .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
                bundle.part_mut(i).get_or_insert_with(ParamSet::new).push(rest, t)?;
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after last tensor", bytes.len() - r.pos)));
    }
    if !(saw_beta && saw_step) {
        return Err(Error::Checkpoint("missing schedule or step record".into()));
    }
    Ok(bundle)
}
