//! Counter-based deterministic random streams.
//!
//! A [`RngStream`] is fully described by `(seed, stream_id, counter)`:
//! sample `n` is a pure function of those three words, so streams can be
//! split, replayed, and evaluated in any order without shared state.
//! Consumers derive dedicated substreams instead of sharing one sequence —
//! the pipeline assigns one stream per ensemble sample `m`, per level `k`,
//! per instance, which makes parallel sampling equivalent to sequential.

use crate::numerics::tensor::{Scalar, Tensor};

const GOLDEN: u64 = 0x9E3779B97F4A7C15;

/// splitmix64 finalizer (Stafford variant 13).
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        RngStream {
            seed,
            stream_id,
            counter: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Derive an independent stream keyed by `label`. Derivation does not
    /// advance `self`, so the same child can be re-derived at any time.
    pub fn substream(&self, label: u64) -> Self {
        let id = mix64(self.stream_id ^ mix64(label ^ 0xD1342543DE82EF95));
        RngStream::new(self.seed, id)
    }

    fn key(&self) -> u64 {
        mix64(mix64(self.seed) ^ self.stream_id)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key().wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        (self.next_u64() >> 11) as f64 * SCALE
    }

    /// Uniform in `(0, 1]` (safe to pass through `ln`).
    fn next_open_f64(&mut self) -> f64 {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        ((self.next_u64() >> 11) + 1) as f64 * SCALE
    }

    /// Uniform integer in `[lo, hi]` inclusive.
    pub fn next_range(&mut self, lo: u64, hi: u64) -> u64 {
        debug_assert!(lo <= hi);
        let span = hi - lo + 1;
        lo + self.next_u64() % span
    }

    /// Standard normal draw via Box-Muller. Consumes two uniforms per call.
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = self.next_open_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_range(0, i as u64) as usize;
            items.swap(i, j);
        }
    }
}

impl<T: Scalar> Tensor<T> {
    /// Tensor of i.i.d. standard normal entries drawn from `rng`.
    pub fn gaussian(rng: &mut RngStream, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n).map(|_| T::from_f64(rng.next_gaussian())).collect();
        Tensor::from_vec(shape.to_vec(), data).expect("shape/data size agree by construction")
    }

    /// Truncated normal (resample outside two standard deviations), scaled
    /// by `sigma`. The conventional transformer weight init.
    pub fn trunc_normal(rng: &mut RngStream, shape: &[usize], sigma: f64) -> Self {
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n)
            .map(|_| {
                let mut z = rng.next_gaussian();
                while z.abs() > 2.0 {
                    z = rng.next_gaussian();
                }
                T::from_f64(z * sigma)
            })
            .collect();
        Tensor::from_vec(shape.to_vec(), data).expect("shape/data size agree by construction")
    }
}
