//! Counter-based random streams.
//!
//! A stream is a 64-bit key derived from `(seed, label)`; draw `i` is a pure
//! function of `(key, i)`, so results never depend on call order or on how
//! work is split across threads.

use alloc::vec::Vec;

use super::{Scalar, Tensor};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStream {
    key: u64,
    cursor: u64,
}

impl RngStream {
    pub fn new(seed: u64, label: &str) -> Self {
        Self {
            key: mix(seed ^ mix(fnv1a64(label.as_bytes()))),
            cursor: 0,
        }
    }

    /// Independent child stream, e.g. `rng.derive("mask")`.
    pub fn derive(&self, label: &str) -> Self {
        Self {
            key: mix(self.key ^ mix(fnv1a64(label.as_bytes()).wrapping_add(GOLDEN))),
            cursor: 0,
        }
    }

    /// Independent child stream keyed by an integer (step, case id, ...).
    pub fn derive_index(&self, index: u64) -> Self {
        Self {
            key: mix(self.key.wrapping_add(mix(index ^ 0x5851_F42D_4C95_7F2D))),
            cursor: 0,
        }
    }

    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    /// Raw draw at an absolute index; does not move the cursor.
    pub fn u64_at(&self, index: u64) -> u64 {
        mix(self.key.wrapping_add(index.wrapping_mul(GOLDEN)))
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = self.u64_at(self.cursor);
        self.cursor += 1;
        v
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal at absolute index `i` (Box-Muller over the pair `i / 2`).
    pub fn normal_at(&self, i: u64) -> f64 {
        let pair = i / 2;
        let u1 = ((self.u64_at(2 * pair) >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
        let u2 = (self.u64_at(2 * pair + 1) >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        if i.is_multiple_of(2) {
            r * libm::cos(theta)
        } else {
            r * libm::sin(theta)
        }
    }

    pub fn normal(&mut self) -> f64 {
        let v = self.normal_at(self.cursor);
        self.cursor += 1;
        v
    }

    /// Fills `n` normals starting at the cursor, then aligns the cursor to an even index.
    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        let start = self.cursor;
        let out = (0..n as u64).map(|i| self.normal_at(start + i)).collect();
        self.cursor = start + n as u64 + (n as u64 & 1);
        out
    }
}

/// I.i.d. standard-normal tensor drawn from `rng`.
pub fn gauss_draw<S: Scalar>(rng: &mut RngStream, shape: &[usize]) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data = rng.normals(n).into_iter().map(S::from_f64).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_label_index_is_identical() {
        let a = RngStream::new(7, "noise");
        let b = RngStream::new(7, "noise");
        assert_eq!(a.u64_at(12345), b.u64_at(12345));
        let x: Tensor<f32> = gauss_draw(&mut a.clone(), &[4, 4]);
        let y: Tensor<f32> = gauss_draw(&mut b.clone(), &[4, 4]);
        assert_eq!(x, y);
    }

    #[test]
    fn labels_separate_streams() {
        let a = RngStream::new(7, "noise");
        let b = RngStream::new(7, "mask");
        assert_ne!(a.u64_at(0), b.u64_at(0));
        assert_ne!(a.derive("x").u64_at(0), a.derive("y").u64_at(0));
        assert_ne!(a.derive_index(1).u64_at(0), a.derive_index(2).u64_at(0));
    }

    #[test]
    fn draws_are_order_independent() {
        let s = RngStream::new(3, "n");
        let forward: Vec<f64> = (0..10).map(|i| s.normal_at(i)).collect();
        let backward: Vec<f64> = (0..10).rev().map(|i| s.normal_at(i)).collect();
        let mut rev = backward.clone();
        rev.reverse();
        assert_eq!(forward, rev);
    }

    #[test]
    fn below_stays_in_range() {
        let mut s = RngStream::new(1, "b");
        for _ in 0..1000 {
            assert!(s.below(5) < 5);
        }
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }
}
