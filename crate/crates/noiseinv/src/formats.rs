//! Plain-file artifacts: PGM images, `.meta` sidecars and CSV tables.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use noiseinv_core::num::Tensor;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Identity of the run that produced a file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub config_hash: u64,
    pub seed: u64,
}

impl Provenance {
    fn line(&self) -> String {
        format!("noiseinv config={:016x} seed={} version={}", self.config_hash, self.seed, CODE_VERSION)
    }
}

/// Writes through a temporary sibling and renames, so readers never see half a file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension(format!("{}.tmp", path.extension().and_then(|e| e.to_str()).unwrap_or("")));
    let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path).with_context(|| format!("renaming {} to {}", tmp.display(), path.display()))
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// `path.meta`: `key=value` lines for the config hash, seed, code version and command.
pub fn write_meta(path: &Path, prov: Provenance, command: &str) -> Result<()> {
    let text = format!(
        "config_hash={:016x}\nseed={}\ncode_version={}\ncommand={}\n",
        prov.config_hash, prov.seed, CODE_VERSION, command
    );
    write_atomic(&meta_path(path), text.as_bytes())
}

pub fn read_meta(path: &Path) -> Result<Vec<(String, String)>> {
    let p = meta_path(path);
    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    text.lines()
        .map(|l| match l.split_once('=') {
            Some((k, v)) => Ok((k.to_string(), v.to_string())),
            None => bail!("{}: malformed line {l:?}", p.display()),
        })
        .collect()
}

/// 8-bit level of a pixel value in `[-1, 1]`, clamping outside it.
pub fn to_gray(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) as f64 + 1.0) * 127.5).round()) as u8
}

pub fn from_gray(g: u8) -> f32 {
    (g as f64 / 127.5 - 1.0) as f32
}

/// Binary P5 graymap of a `[1, 1, H, W]` (or `[1, H, W]`) tensor with values in `[-1, 1]`.
///
/// Header: `P5\n# <provenance>\n<W> <H>\n255\n`, then `W*H` bytes row-major.
pub fn encode_pgm(img: &Tensor<f32>, prov: Provenance) -> Result<Vec<u8>> {
    let s = img.shape();
    let (h, w) = match s {
        [1, 1, h, w] | [1, h, w] => (*h, *w),
        _ => bail!("expected a single-channel image, got shape {s:?}"),
    };
    let mut out = format!("P5\n# {}\n{w} {h}\n255\n", prov.line()).into_bytes();
    out.extend(img.data().iter().map(|&v| to_gray(v)));
    Ok(out)
}

/// Mask as a P5 graymap: 1 (inpaint) is white, 0 (keep) is black.
pub fn encode_mask_pgm(mask: &Tensor<f32>, prov: Provenance) -> Result<Vec<u8>> {
    encode_pgm(&mask.map(|v| v * 2.0 - 1.0), prov)
}

/// Parses a P5 file with `maxval` 255; comment lines are allowed anywhere in the header.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            bail!("truncated PGM header");
        }
        fields.push(std::str::from_utf8(&bytes[start..pos])?.to_string());
    }
    if fields[0] != "P5" {
        bail!("not a binary PGM (magic {:?})", fields[0]);
    }
    let w: usize = fields[1].parse().context("PGM width")?;
    let h: usize = fields[2].parse().context("PGM height")?;
    if fields[3] != "255" {
        bail!("unsupported PGM maxval {}", fields[3]);
    }
    let data = bytes.get(pos + 1..).unwrap_or(&[]);
    if data.len() != w * h {
        bail!("PGM body has {} bytes, expected {}", data.len(), w * h);
    }
    Ok(Tensor::new(&[1, 1, h, w], data.iter().map(|&g| from_gray(g)).collect())?)
}

/// CSV from a header and rows; floats use Rust's shortest round-trip formatting.
pub fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header = r.headers()?.iter().map(String::from).collect();
    let rows = r.records().map(|rec| Ok(rec?.iter().map(String::from).collect())).collect::<Result<_>>()?;
    Ok((header, rows))
}

/// Writes a CSV and its sidecar.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>], prov: Provenance, command: &str) -> Result<()> {
    write_atomic(path, &csv_bytes(header, rows)?)?;
    write_meta(path, prov, command)
}
