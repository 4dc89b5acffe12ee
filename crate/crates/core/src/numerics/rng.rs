//! Counter-based random stream (Philox4x32-10).
//!
//! Every output is a pure function of `(seed, counter)`, so a stream can be
//! replayed from any point and per-row sub-streams never interact. The
//! transcendental functions used for normal draws come from `libm` so the
//! bit patterns do not depend on the platform's C library.

use serde::{Deserialize, Serialize};

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

#[inline]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = u64::from(a) * u64::from(b);
    ((p >> 32) as u32, p as u32)
}

/// Philox4x32 with 10 rounds.
pub fn philox4x32_10(ctr: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut c = ctr;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(PHILOX_W0);
            k[1] = k[1].wrapping_add(PHILOX_W1);
        }
        let (hi0, lo0) = mulhilo(PHILOX_M0, c[0]);
        let (hi1, lo1) = mulhilo(PHILOX_M1, c[2]);
        c = [hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0];
    }
    c
}

/// Deterministic stream keyed by `seed`, positioned at `counter` blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomStream {
    pub seed: u64,
    pub counter: u64,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn at(seed: u64, counter: u64) -> Self {
        Self { seed, counter }
    }

    fn block_with(&self, counter: u64, domain: u32) -> [u32; 4] {
        philox4x32_10(
            [counter as u32, (counter >> 32) as u32, domain, 0],
            [self.seed as u32, (self.seed >> 32) as u32],
        )
    }

    #[inline]
    fn next_block(&mut self) -> [u32; 4] {
        let b = self.block_with(self.counter, 0);
        self.counter = self.counter.wrapping_add(1);
        b
    }

    /// Independent stream for sub-task `index`; does not advance `self`.
    pub fn derive(&self, index: u64) -> RandomStream {
        let b = self.block_with(index, 0x5EED_0001);
        RandomStream::new(u64::from(b[0]) | (u64::from(b[1]) << 32))
    }

    pub fn next_u64(&mut self) -> u64 {
        let b = self.next_block();
        u64::from(b[0]) | (u64::from(b[1]) << 32)
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`; `n` must be nonzero.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        // Lemire's multiply-shift with rejection keeps this unbiased.
        let threshold = n.wrapping_neg() % n;
        loop {
            let x = self.next_u64();
            let m = u128::from(x) * u128::from(n);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    /// Bernoulli(p) draw.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Two independent standard normals from one counter block (Box-Muller).
    pub fn normal_pair(&mut self) -> [f64; 2] {
        let b = self.next_block();
        let u1 = ((u64::from(b[0]) | (u64::from(b[1]) << 32)) >> 11) as f64
            * (1.0 / (1u64 << 53) as f64);
        let u2 = ((u64::from(b[2]) | (u64::from(b[3]) << 32)) >> 11) as f64
            * (1.0 / (1u64 << 53) as f64);
        // 1 - u1 lies in (0, 1], so the log is finite.
        let r = libm::sqrt(-2.0 * libm::log(1.0 - u1));
        let theta = 2.0 * std::f64::consts::PI * u2;
        [r * libm::cos(theta), r * libm::sin(theta)]
    }

    /// `n` i.i.d. standard normal draws; consumes `ceil(n/2)` blocks.
    pub fn gaussian(&mut self, n: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n + 1);
        while out.len() < n {
            out.extend_from_slice(&self.normal_pair());
        }
        out.truncate(n);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn philox_known_answers() {
        // Random123 known-answer vectors for philox4x32_10.
        assert_eq!(
            philox4x32_10([0, 0, 0, 0], [0, 0]),
            [0x6627_e8d5, 0xe169_c58d, 0xbc57_ac4c, 0x9b00_dbd8]
        );
        assert_eq!(
            philox4x32_10([u32::MAX; 4], [u32::MAX; 2]),
            [0x408f_276d, 0x41c8_3b0e, 0xa20b_c7c6, 0x6d54_51fd]
        );
        assert_eq!(
            philox4x32_10(
                [0x243f_6a88, 0x85a3_08d3, 0x1319_8a2e, 0x0370_7344],
                [0xa409_3822, 0x299f_31d0]
            ),
            [0xd16c_fe09, 0x94fd_cceb, 0x5001_e420, 0x2412_6ea1]
        );
    }

    #[test]
    fn same_seed_and_counter_replay() {
        let mut a = RandomStream::at(42, 17);
        let mut b = RandomStream::at(42, 17);
        assert_eq!(a.gaussian(101), b.gaussian(101));
        assert_eq!(a, b);
        assert_eq!(a.counter, 17 + 51);
    }

    #[test]
    fn gaussian_moments() {
        let n = 1_000_000;
        let xs = RandomStream::new(7).gaussian(n);
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!(mean.abs() <= 4.0 / (n as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() <= 0.01, "var {var}");
    }

    #[test]
    fn disjoint_counter_ranges_are_uncorrelated() {
        let n = 1_000_000;
        let xs = RandomStream::at(3, 0).gaussian(n);
        // The halves come from the block ranges [0, n/4) and [n/4, n/2).
        let (first, second) = xs.split_at(n / 2);
        let corr = first.iter().zip(second).map(|(x, y)| x * y).sum::<f64>() / (n / 2) as f64;
        assert!(corr.abs() <= 0.01, "corr {corr}");
    }

    #[test]
    fn below_stays_in_range() {
        let mut s = RandomStream::new(1);
        for n in [1u64, 2, 3, 7, 100] {
            for _ in 0..200 {
                assert!(s.below(n) < n);
            }
        }
    }

    #[test]
    fn derived_streams_differ() {
        let root = RandomStream::new(9);
        let a = root.derive(0).gaussian(4);
        let b = root.derive(1).gaussian(4);
        assert_ne!(a, b);
        assert_eq!(root.counter, 0);
    }
}
