//! Deterministic parameter initialization.
//!
//! Every draw is a pure function of `(seed, shape)`: the generator is a
//! SplitMix64 stream keyed by the seed mixed with the shape.

use crate::tensor::Tensor;

/// SplitMix64 generator.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of mantissa.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        (self.next_f64() * n as f64) as usize % n.max(1)
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }
}

/// Derives a sub-seed, so that distinct parameter groups get independent streams.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut g = SplitMix64::new(seed ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    g.next_u64()
}

fn shape_key(seed: u64, shape: &[usize]) -> u64 {
    shape.iter().fold(seed, |acc, &d| {
        let mut g = SplitMix64::new(acc ^ (d as u64).rotate_left(17));
        g.next_u64()
    })
}

/// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn init_uniform(seed: u64, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    uniform_tensor(seed, shape, -bound, bound)
}

/// Uniform on `[lo, hi)`, keyed by `(seed, shape)`.
pub fn uniform_tensor(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut g = SplitMix64::new(shape_key(seed, shape));
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| g.uniform(lo, hi)).collect();
    Tensor::new(shape, data).expect("shape/data agree by construction")
}
