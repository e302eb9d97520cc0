//! Procedural shape images with class labels.
//!
//! The working latent space is pixel space: images are single-channel
//! `[N, 1, H, W]` tensors with values in `[-1, 1]`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::num::{RngStream, Tensor};

pub const CLASS_NAMES: [&str; 4] = ["disk", "square", "cross", "stripes"];

/// Conditioning label. The embedding is the one-hot vector of width `classes`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PromptClass {
    pub id: usize,
}

impl PromptClass {
    pub fn new(id: usize, classes: usize) -> Result<Self> {
        if id < classes {
            Ok(Self { id })
        } else {
            Err(Error::InvalidConfig(format!("class {id} out of range for {classes} classes")))
        }
    }

    pub fn one_hot(self, classes: usize) -> Vec<f32> {
        (0..classes).map(|k| if k == self.id { 1.0 } else { 0.0 }).collect()
    }

    pub fn name(self) -> &'static str {
        CLASS_NAMES[self.id]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub resolution: usize,
    pub classes: usize,
    /// Maximum center offset along each axis, as a fraction of the resolution.
    pub position_jitter: f64,
    /// Shape half-extent range, as fractions of the resolution.
    pub size_min: f64,
    pub size_max: f64,
    pub foreground: (f64, f64),
    pub background: (f64, f64),
    /// Stripe period range in pixels.
    pub stripe_period: (f64, f64),
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            resolution: 16,
            classes: 4,
            position_jitter: 0.15,
            size_min: 0.2,
            size_max: 0.32,
            foreground: (0.4, 1.0),
            background: (-0.9, -0.7),
            stripe_period: (4.0, 6.0),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let r = self.resolution;
        if r < 8 || !r.is_power_of_two() {
            return Err(Error::InvalidConfig(format!("resolution {r} must be a power of two >= 8")));
        }
        if self.classes == 0 || self.classes > CLASS_NAMES.len() {
            return Err(Error::InvalidConfig(format!("classes must be in 1..=4, got {}", self.classes)));
        }
        if !(0.0..0.5).contains(&self.position_jitter) {
            return Err(Error::InvalidConfig("position_jitter must lie in [0, 0.5)".into()));
        }
        let ranges = [
            ("size", (self.size_min, self.size_max), (0.0, 0.5)),
            ("foreground", self.foreground, (-1.0, 1.0)),
            ("background", self.background, (-1.0, 1.0)),
            ("stripe_period", self.stripe_period, (2.0, f64::INFINITY)),
        ];
        for (name, (lo, hi), (floor, ceil)) in ranges {
            if !(floor <= lo && lo <= hi && hi <= ceil) {
                return Err(Error::InvalidConfig(format!("{name} range [{lo}, {hi}] outside [{floor}, {ceil}]")));
            }
        }
        Ok(())
    }

    /// Spec with every jitter range collapsed to its midpoint.
    pub fn without_jitter(&self) -> Self {
        let mid = |(a, b): (f64, f64)| ((a + b) / 2.0, (a + b) / 2.0);
        let size = (self.size_min + self.size_max) / 2.0;
        Self {
            position_jitter: 0.0,
            size_min: size,
            size_max: size,
            foreground: mid(self.foreground),
            background: mid(self.background),
            stripe_period: mid(self.stripe_period),
            ..self.clone()
        }
    }
}

/// Coverage of a pixel by a shape with signed distance `d` (negative inside), 1-pixel ramp.
fn coverage(d: f64) -> f64 {
    (0.5 - d).clamp(0.0, 1.0)
}

/// Draws one `[1, 1, H, W]` image of `class`.
pub fn gen_image(spec: &SynthSpec, class: PromptClass, rng: &mut RngStream) -> Tensor<f32> {
    let r = spec.resolution as f64;
    let jitter = spec.position_jitter * r;
    let cx = r / 2.0 + rng.uniform_range(-jitter, jitter);
    let cy = r / 2.0 + rng.uniform_range(-jitter, jitter);
    let size = rng.uniform_range(spec.size_min, spec.size_max) * r;
    let fg = rng.uniform_range(spec.foreground.0, spec.foreground.1);
    let bg = rng.uniform_range(spec.background.0, spec.background.1);
    let period = rng.uniform_range(spec.stripe_period.0, spec.stripe_period.1);

    let n = spec.resolution;
    let mut data = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            // pixel (i, j) is sampled at integer coordinates so the center pixel is exact
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let d = match class.id {
                0 => libm::sqrt(dx * dx + dy * dy) - size,
                1 => dx.abs().max(dy.abs()) - size,
                2 => {
                    let arm = size / 3.0;
                    (dx.abs() - arm).max(dy.abs() - size).min((dy.abs() - arm).max(dx.abs() - size))
                }
                _ => {
                    // horizontal bands, phase locked to cy so the band through the center is foreground
                    let u = dy / period;
                    let phase = u - libm::floor(u);
                    let band = (phase.min(1.0 - phase) - 0.25) * period;
                    band.max(dx.abs() - size).max(dy.abs() - size)
                }
            };
            let c = coverage(d);
            data.push((bg + (fg - bg) * c).clamp(-1.0, 1.0) as f32);
        }
    }
    Tensor::new(&[1, 1, n, n], data).expect("shape matches data")
}

/// Uniform classes from `rng.derive("class")`; image `i` jitter from `rng.derive("image").derive_index(i)`.
pub fn gen_batch(spec: &SynthSpec, batch: usize, rng: &RngStream) -> Result<(Tensor<f32>, Vec<PromptClass>)> {
    if batch == 0 {
        return Err(Error::InvalidShape { shape: alloc::vec![0], reason: "batch must be at least 1".into() });
    }
    let mut class_rng = rng.derive("class");
    let image_rng = rng.derive("image");
    let classes: Vec<PromptClass> = (0..batch)
        .map(|_| PromptClass { id: class_rng.below(spec.classes) })
        .collect();
    let images: Vec<Tensor<f32>> = classes
        .iter()
        .enumerate()
        .map(|(i, &c)| gen_image(spec, c, &mut image_rng.derive_index(i as u64)))
        .collect();
    Ok((Tensor::stack(&images)?, classes))
}

const SYNW_MAGIC: &[u8; 5] = b"SYNW1";

/// Flat dataset dump: `"SYNW1"`, then `u32` resolution, channels, count (little-endian),
/// then per record one class byte and `C*H*W` little-endian `f32` values in row-major order.
pub fn encode_dataset(images: &Tensor<f32>, classes: &[PromptClass]) -> Result<Vec<u8>> {
    let s = images.shape();
    if s.len() != 4 || s[2] != s[3] || s[0] != classes.len() {
        return Err(Error::InvalidShape { shape: s.to_vec(), reason: "expected [N, C, R, R] with one class per record".into() });
    }
    let per = images.per_sample();
    let mut out = Vec::with_capacity(17 + s[0] * (1 + 4 * per));
    out.extend_from_slice(SYNW_MAGIC);
    for v in [s[2], s[1], s[0]] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for (i, c) in classes.iter().enumerate() {
        out.push(c.id as u8);
        for v in &images.data()[i * per..(i + 1) * per] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<(Tensor<f32>, Vec<PromptClass>)> {
    let word = |i: usize| -> Result<usize> {
        bytes
            .get(5 + 4 * i..9 + 4 * i)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
            .ok_or_else(|| Error::Format("truncated SYNW1 header".into()))
    };
    if bytes.get(..5) != Some(SYNW_MAGIC.as_slice()) {
        return Err(Error::Format("bad SYNW1 magic".into()));
    }
    let (res, ch, count) = (word(0)?, word(1)?, word(2)?);
    let per = ch * res * res;
    let expected = 17 + count * (1 + 4 * per);
    if bytes.len() != expected {
        return Err(Error::Format(format!("SYNW1 body is {} bytes, expected {expected}", bytes.len())));
    }
    let mut data = Vec::with_capacity(count * per);
    let mut classes = Vec::with_capacity(count);
    for rec in bytes[17..].chunks_exact(1 + 4 * per) {
        classes.push(PromptClass { id: rec[0] as usize });
        data.extend(rec[1..].chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])));
    }
    Ok((Tensor::new(&[count, ch, res, res], data)?, classes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centered_disk_without_jitter() {
        let spec = SynthSpec::default().without_jitter();
        let img = gen_image(&spec, PromptClass { id: 0 }, &mut RngStream::new(1, "s"));
        let c = spec.resolution / 2;
        assert_eq!(img.data()[c * spec.resolution + c], spec.foreground.0 as f32);
        assert_eq!(img.data()[0], spec.background.0 as f32);
    }

    #[test]
    fn same_seed_same_image_and_range() {
        let spec = SynthSpec::default();
        for id in 0..4 {
            let a = gen_image(&spec, PromptClass { id }, &mut RngStream::new(3, "s"));
            let b = gen_image(&spec, PromptClass { id }, &mut RngStream::new(3, "s"));
            assert_eq!(a, b);
            assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn classes_differ_at_same_jitter() {
        let spec = SynthSpec::default().without_jitter();
        let imgs: Vec<_> = (0..4)
            .map(|id| gen_image(&spec, PromptClass { id }, &mut RngStream::new(0, "s")))
            .collect();
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(imgs[i], imgs[j], "classes {i} and {j}");
            }
        }
    }

    #[test]
    fn class_frequencies_near_uniform() {
        let spec = SynthSpec::default();
        let n = 4000;
        let (_, classes) = gen_batch(&spec, n, &RngStream::new(4, "b")).unwrap();
        let p = 0.25;
        let sigma = libm::sqrt(n as f64 * p * (1.0 - p));
        for k in 0..4 {
            let count = classes.iter().filter(|c| c.id == k).count() as f64;
            assert!((count - n as f64 * p).abs() < 3.0 * sigma, "class {k}: {count}");
        }
    }

    #[test]
    fn singleton_batch_matches_gen_image() {
        let spec = SynthSpec::default();
        let rng = RngStream::new(5, "b");
        let (img, cls) = gen_batch(&spec, 1, &rng).unwrap();
        let direct = gen_image(&spec, cls[0], &mut rng.derive("image").derive_index(0));
        assert_eq!(img, direct);
    }

    #[test]
    fn class_and_jitter_streams_are_isolated() {
        let spec = SynthSpec::default();
        let (a_img, a_cls) = gen_batch(&spec, 16, &RngStream::new(6, "b")).unwrap();
        // reproduce with a different class stream by drawing images with forced classes
        let image_rng = RngStream::new(6, "b").derive("image");
        let forced: Vec<_> = a_cls
            .iter()
            .enumerate()
            .map(|(i, c)| gen_image(&spec, *c, &mut image_rng.derive_index(i as u64)))
            .collect();
        assert_eq!(Tensor::stack(&forced).unwrap(), a_img);
        let other = gen_image(&spec, PromptClass { id: (a_cls[0].id + 1) % 4 }, &mut image_rng.derive_index(0));
        // same jitter draws: the background intensity (first pixel) is unchanged by the class
        assert_eq!(other.data()[0], a_img.data()[0]);
    }

    #[test]
    fn dataset_round_trip_and_rejects() {
        let spec = SynthSpec::default();
        let (img, cls) = gen_batch(&spec, 3, &RngStream::new(7, "b")).unwrap();
        let bytes = encode_dataset(&img, &cls).unwrap();
        assert_eq!(&bytes[..5], b"SYNW1");
        assert_eq!(bytes.len(), 17 + 3 * (1 + 4 * 256));
        let (img2, cls2) = decode_dataset(&bytes).unwrap();
        assert_eq!((img2, cls2), (img, cls));
        assert!(decode_dataset(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_dataset(&bad).is_err());
    }

    #[test]
    fn validation() {
        assert!(SynthSpec::default().validate().is_ok());
        assert!(SynthSpec { resolution: 12, ..Default::default() }.validate().is_err());
        assert!(SynthSpec { resolution: 4, ..Default::default() }.validate().is_err());
        assert!(SynthSpec { classes: 5, ..Default::default() }.validate().is_err());
        assert!(SynthSpec { size_min: 0.4, size_max: 0.3, ..Default::default() }.validate().is_err());
    }
}
