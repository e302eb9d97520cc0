//! Random inpainting masks and image-to-latent mask downsampling.
//!
//! Masks are `f32` tensors holding exactly 0.0 (keep) or 1.0 (fill).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::num::{RngStream, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskFamily {
    ThickStroke,
    ThinStroke,
    Rectangle,
    HalfImage,
    Mixed,
}

impl MaskFamily {
    pub const ALL: [MaskFamily; 5] = [
        MaskFamily::ThickStroke,
        MaskFamily::ThinStroke,
        MaskFamily::Rectangle,
        MaskFamily::HalfImage,
        MaskFamily::Mixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskFamily::ThickStroke => "thick_stroke",
            MaskFamily::ThinStroke => "thin_stroke",
            MaskFamily::Rectangle => "rectangle",
            MaskFamily::HalfImage => "half_image",
            MaskFamily::Mixed => "mixed",
        }
    }
}

impl FromStr for MaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown mask family {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskConfig {
    pub coverage_min: f64,
    pub coverage_max: f64,
    /// Brush radius ranges in pixels.
    pub thick_radius: (f64, f64),
    pub thin_radius: (f64, f64),
    /// Polyline vertex count range (inclusive).
    pub vertices: (usize, usize),
    pub max_tries: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            coverage_min: 0.1,
            coverage_max: 0.6,
            thick_radius: (1.5, 2.5),
            thin_radius: (0.6, 1.0),
            vertices: (4, 8),
            max_tries: 512,
        }
    }
}

impl MaskConfig {
    /// Checks that every family can reach the coverage bounds at `resolution`.
    pub fn validate(&self, family: MaskFamily, resolution: usize) -> Result<()> {
        let (lo, hi) = (self.coverage_min, self.coverage_max);
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidConfig(format!("coverage bounds [{lo}, {hi}] must satisfy 0 < min <= max <= 1")));
        }
        if self.vertices.0 < 2 || self.vertices.0 > self.vertices.1 || self.max_tries == 0 {
            return Err(Error::InvalidConfig("need 2 <= vertices.0 <= vertices.1 and max_tries > 0".into()));
        }
        for (a, b) in [self.thick_radius, self.thin_radius] {
            if !(0.0 < a && a <= b) {
                return Err(Error::InvalidConfig(format!("invalid brush radius range [{a}, {b}]")));
            }
        }
        let families = match family {
            MaskFamily::Mixed => MaskFamily::ALL[..4].to_vec(),
            f => vec![f],
        };
        for f in families {
            if f == MaskFamily::HalfImage && !(lo <= 0.5 && 0.5 <= hi) {
                return Err(Error::InvalidConfig(format!("half_image coverage 0.5 outside [{lo}, {hi}]")));
            }
            let mut probe = RngStream::new(0, "mask-validate").derive(f.name());
            if draw_family(f, resolution, self, &mut probe).is_none() {
                return Err(Error::InvalidConfig(format!(
                    "{} masks cannot reach coverage [{lo}, {hi}] at resolution {resolution} within {} tries",
                    f.name(),
                    self.max_tries
                )));
            }
        }
        Ok(())
    }
}

/// Image-resolution mask `full` and its latent-resolution counterpart `latent`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPair {
    pub full: Tensor<f32>,
    pub latent: Tensor<f32>,
}

pub fn coverage(mask: &Tensor<f32>) -> f64 {
    mask.data().iter().filter(|&&v| v == 1.0).count() as f64 / mask.len() as f64
}

pub fn ensure_binary<S: Scalar>(m: &Tensor<S>) -> Result<()> {
    if m.data().iter().all(|&v| v == S::ZERO || v == S::ONE) {
        Ok(())
    } else {
        Err(Error::NonBinaryMask)
    }
}

fn seg_dist2(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let s = if len2 > 0.0 {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (ex, ey) = (a.0 + s * dx - px, a.1 + s * dy - py);
    ex * ex + ey * ey
}

fn stroke(n: usize, radius: (f64, f64), cfg: &MaskConfig, rng: &mut RngStream) -> Vec<f32> {
    let r = n as f64;
    let brush = rng.uniform_range(radius.0, radius.1);
    let count = cfg.vertices.0 + rng.below(cfg.vertices.1 - cfg.vertices.0 + 1);
    let mut p = (rng.uniform_range(0.0, r - 1.0), rng.uniform_range(0.0, r - 1.0));
    let mut heading = rng.uniform_range(0.0, 2.0 * PI);
    let mut pts = vec![p];
    for _ in 1..count {
        heading += rng.uniform_range(-0.6 * PI, 0.6 * PI);
        let len = rng.uniform_range(0.15 * r, 0.4 * r);
        p = (
            (p.0 + len * libm::cos(heading)).clamp(0.0, r - 1.0),
            (p.1 + len * libm::sin(heading)).clamp(0.0, r - 1.0),
        );
        pts.push(p);
    }
    let b2 = brush * brush;
    let mut out = vec![0.0f32; n * n];
    for y in 0..n {
        for x in 0..n {
            let hit = pts.windows(2).any(|w| seg_dist2(x as f64, y as f64, w[0], w[1]) <= b2);
            if hit {
                out[y * n + x] = 1.0;
            }
        }
    }
    out
}

fn rectangle(n: usize, rng: &mut RngStream) -> Vec<f32> {
    let (w, h) = (1 + rng.below(n), 1 + rng.below(n));
    let (x0, y0) = (rng.below(n - w + 1), rng.below(n - h + 1));
    let mut out = vec![0.0f32; n * n];
    for y in y0..y0 + h {
        out[y * n + x0..y * n + x0 + w].fill(1.0);
    }
    out
}

fn half_image(n: usize, rng: &mut RngStream) -> Vec<f32> {
    let side = rng.below(4);
    let h = n / 2;
    let mut out = vec![0.0f32; n * n];
    for y in 0..n {
        for x in 0..n {
            let masked = match side {
                0 => x < h,
                1 => x >= h,
                2 => y < h,
                _ => y >= h,
            };
            if masked {
                out[y * n + x] = 1.0;
            }
        }
    }
    out
}

fn draw_family(family: MaskFamily, n: usize, cfg: &MaskConfig, rng: &mut RngStream) -> Option<Vec<f32>> {
    let family = match family {
        MaskFamily::Mixed => MaskFamily::ALL[rng.below(4)],
        f => f,
    };
    for _ in 0..cfg.max_tries {
        let m = match family {
            MaskFamily::ThickStroke => stroke(n, cfg.thick_radius, cfg, rng),
            MaskFamily::ThinStroke => stroke(n, cfg.thin_radius, cfg, rng),
            MaskFamily::Rectangle => rectangle(n, rng),
            _ => return Some(half_image(n, rng)),
        };
        let cov = m.iter().filter(|&&v| v == 1.0).count() as f64 / (n * n) as f64;
        if cfg.coverage_min <= cov && cov <= cfg.coverage_max {
            return Some(m);
        }
    }
    None
}

/// Samples one `[1, 1, R, R]` mask by rejection until its coverage lies in the configured bounds.
pub fn sample_mask(resolution: usize, factor: usize, family: MaskFamily, cfg: &MaskConfig, rng: &mut RngStream) -> Result<MaskPair> {
    let data = draw_family(family, resolution, cfg, rng).ok_or_else(|| {
        Error::InvalidConfig(format!("{} mask coverage bounds unreachable", family.name()))
    })?;
    let full = Tensor::new(&[1, 1, resolution, resolution], data)?;
    let latent = downsample_mask(&full, factor)?;
    Ok(MaskPair { full, latent })
}

/// One mask per sample, stacked to `[N, 1, R, R]`; sample `i` uses `rng.derive_index(i)`.
pub fn sample_mask_batch(n: usize, resolution: usize, factor: usize, family: MaskFamily, cfg: &MaskConfig, rng: &RngStream) -> Result<MaskPair> {
    let pairs = (0..n)
        .map(|i| sample_mask(resolution, factor, family, cfg, &mut rng.derive_index(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let full: Vec<_> = pairs.iter().map(|p| p.full.clone()).collect();
    let latent: Vec<_> = pairs.into_iter().map(|p| p.latent).collect();
    Ok(MaskPair { full: Tensor::stack(&full)?, latent: Tensor::stack(&latent)? })
}

/// Max-pool downsampling of `[N, C, H, W]`: a cell is 1 if any covered pixel is 1.
pub fn downsample_mask<S: Scalar>(mask: &Tensor<S>, factor: usize) -> Result<Tensor<S>> {
    ensure_binary(mask)?;
    let s = mask.shape();
    if s.len() != 4 || factor == 0 || !s[2].is_multiple_of(factor) || !s[3].is_multiple_of(factor) {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: format!("expected [N, C, H, W] divisible by factor {factor}"),
        });
    }
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![S::ZERO; planes * oh * ow];
    for p in 0..planes {
        for y in 0..h {
            for x in 0..w {
                if mask.data()[(p * h + y) * w + x] == S::ONE {
                    out[(p * oh + y / factor) * ow + x / factor] = S::ONE;
                }
            }
        }
    }
    Tensor::new(&[s[0], s[1], oh, ow], out)
}

const MSK_MAGIC: &[u8; 4] = b"MSK1";

/// 16-byte header (`"MSK1"`, `u32` width, `u32` height, `u32` zero, little-endian),
/// then rows of `ceil(W/8)` bytes, most significant bit first.
pub fn encode_mask(mask: &Tensor<f32>) -> Result<Vec<u8>> {
    ensure_binary(mask)?;
    let s = mask.shape();
    let (h, w) = (s[s.len().saturating_sub(2)], s[s.len() - 1]);
    if s.len() < 2 || mask.len() != h * w {
        return Err(Error::InvalidShape { shape: s.to_vec(), reason: "expected a single H x W mask".into() });
    }
    let stride = w.div_ceil(8);
    let mut out = Vec::with_capacity(16 + stride * h);
    out.extend_from_slice(MSK_MAGIC);
    for v in [w as u32, h as u32, 0] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for row in mask.data().chunks_exact(w) {
        let mut bytes = vec![0u8; stride];
        for (x, &v) in row.iter().enumerate() {
            if v == 1.0 {
                bytes[x / 8] |= 0x80 >> (x % 8);
            }
        }
        out.extend_from_slice(&bytes);
    }
    Ok(out)
}

pub fn decode_mask(bytes: &[u8]) -> Result<Tensor<f32>> {
    let bad = |why: &str| Error::Format(String::from(why));
    if bytes.len() < 16 || &bytes[..4] != MSK_MAGIC {
        return Err(bad("bad MSK1 header"));
    }
    let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]) as usize;
    let (w, h) = (word(4), word(8));
    let stride = w.div_ceil(8);
    if w == 0 || h == 0 || bytes.len() != 16 + stride * h {
        return Err(bad("MSK1 size does not match header"));
    }
    let mut data = Vec::with_capacity(w * h);
    for row in bytes[16..].chunks_exact(stride) {
        data.extend((0..w).map(|x| if row[x / 8] & (0x80 >> (x % 8)) != 0 { 1.0 } else { 0.0 }));
    }
    Tensor::new(&[1, 1, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(m: &Tensor<f32>) -> usize {
        m.data().iter().filter(|&&v| v == 1.0).count()
    }

    #[test]
    fn half_image_is_exactly_half() {
        let cfg = MaskConfig::default();
        for i in 0..20 {
            let p = sample_mask(16, 1, MaskFamily::HalfImage, &cfg, &mut RngStream::new(i, "m")).unwrap();
            assert_eq!(count(&p.full), 128);
            assert_eq!(p.full, p.latent);
        }
    }

    #[test]
    fn rectangle_fills_its_bounding_box() {
        let cfg = MaskConfig::default();
        for i in 0..50 {
            let p = sample_mask(16, 1, MaskFamily::Rectangle, &cfg, &mut RngStream::new(i, "m")).unwrap();
            let d = p.full.data();
            let on: Vec<(usize, usize)> = (0..256).filter(|&k| d[k] == 1.0).map(|k| (k % 16, k / 16)).collect();
            let (x0, x1) = (on.iter().map(|p| p.0).min().unwrap(), on.iter().map(|p| p.0).max().unwrap());
            let (y0, y1) = (on.iter().map(|p| p.1).min().unwrap(), on.iter().map(|p| p.1).max().unwrap());
            assert_eq!(on.len(), (x1 - x0 + 1) * (y1 - y0 + 1));
        }
    }

    #[test]
    fn mixed_coverage_within_bounds() {
        let cfg = MaskConfig::default();
        let base = RngStream::new(9, "mixed");
        let (mut lo, mut hi) = (1.0f64, 0.0f64);
        for i in 0..10_000u64 {
            let p = sample_mask(16, 1, MaskFamily::Mixed, &cfg, &mut base.derive_index(i)).unwrap();
            let c = coverage(&p.full);
            lo = lo.min(c);
            hi = hi.max(c);
        }
        assert!(lo >= cfg.coverage_min && hi <= cfg.coverage_max, "[{lo}, {hi}]");
    }

    #[test]
    fn every_family_reachable_at_default_bounds() {
        let cfg = MaskConfig::default();
        for f in MaskFamily::ALL {
            cfg.validate(f, 16).unwrap();
            assert_eq!(f.name().parse::<MaskFamily>().unwrap(), f);
        }
        let tight = MaskConfig { coverage_min: 0.1, coverage_max: 0.4, ..cfg.clone() };
        assert!(tight.validate(MaskFamily::HalfImage, 16).is_err());
        assert!(tight.validate(MaskFamily::Mixed, 16).is_err());
        let huge = MaskConfig { coverage_min: 0.95, coverage_max: 1.0, ..cfg };
        assert!(huge.validate(MaskFamily::ThinStroke, 16).is_err());
    }

    #[test]
    fn downsample_rules() {
        let z = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
        assert_eq!(downsample_mask(&z, 2).unwrap(), Tensor::zeros(&[1, 1, 2, 2]));
        let o = Tensor::<f32>::ones(&[1, 1, 4, 4]);
        assert_eq!(downsample_mask(&o, 2).unwrap(), Tensor::ones(&[1, 1, 2, 2]));
        let one = Tensor::<f32>::from_f64(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(downsample_mask(&one, 2).unwrap().data(), &[1.0]);
        assert!(downsample_mask(&z, 3).is_err());
        let half = Tensor::<f32>::from_f64(&[1, 1, 1, 2], &[0.5, 0.0]).unwrap();
        assert!(matches!(downsample_mask(&half, 1), Err(Error::NonBinaryMask)));
    }

    #[test]
    fn downsample_is_monotone() {
        let cfg = MaskConfig::default();
        for i in 0..50 {
            let a = sample_mask(16, 1, MaskFamily::ThinStroke, &cfg, &mut RngStream::new(i, "a")).unwrap().full;
            let b = sample_mask(16, 1, MaskFamily::Rectangle, &cfg, &mut RngStream::new(i, "b")).unwrap().full;
            let union = a.zip_map(&b, |x, y| x.max(y)).unwrap();
            let (da, du) = (downsample_mask(&a, 4).unwrap(), downsample_mask(&union, 4).unwrap());
            assert!(da.data().iter().zip(du.data()).all(|(x, y)| x <= y));
            ensure_binary(&du).unwrap();
        }
    }

    #[test]
    fn msk1_round_trip() {
        let cfg = MaskConfig::default();
        let p = sample_mask(16, 1, MaskFamily::ThickStroke, &cfg, &mut RngStream::new(3, "m")).unwrap();
        let bytes = encode_mask(&p.full).unwrap();
        assert_eq!(bytes.len(), 16 + 2 * 16);
        assert_eq!(&bytes[..4], b"MSK1");
        assert_eq!(decode_mask(&bytes).unwrap(), p.full);
        assert!(decode_mask(&bytes[..20]).is_err());
        // odd width packs into a partial trailing byte
        let odd = Tensor::<f32>::from_f64(&[1, 1, 1, 9], &[1., 0., 0., 0., 0., 0., 0., 0., 1.]).unwrap();
        let b = encode_mask(&odd).unwrap();
        assert_eq!(&b[16..], &[0x80, 0x80]);
        assert_eq!(decode_mask(&b).unwrap(), odd);
    }
}
