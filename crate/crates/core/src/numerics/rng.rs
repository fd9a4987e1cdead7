use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Deterministic, splittable random stream.
///
/// Child streams are derived from the seed and a key, never from the current
/// position, so `derive(k)` returns the same stream no matter how many values
/// the parent has already produced.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: [u8; 32],
    inner: ChaCha8Rng,
}

/// Serializable snapshot of an [`Rng`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn expand_seed(mut state: u64) -> [u8; 32] {
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    seed
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::from_seed_bytes(expand_seed(seed))
    }

    fn from_seed_bytes(seed: [u8; 32]) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::from_seed(seed),
        }
    }

    /// Independent child stream identified by `key`.
    pub fn derive(&self, key: u64) -> Rng {
        let mut mix = key ^ 0xA076_1D64_78BD_642F;
        for chunk in self.seed.chunks_exact(8) {
            let word = u64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            mix = splitmix64(&mut mix) ^ word;
        }
        Self::from_seed_bytes(expand_seed(mix))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw on the open interval (0, 1); never returns 0 or 1.
    pub fn uniform(&mut self) -> f64 {
        ((self.inner.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw on (lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn gauss(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Exponential draw with the given rate.
    pub fn exponential(&mut self, rate: f64) -> f64 {
        -self.uniform().ln() / rate
    }

    /// Fair sign, +1 or -1.
    pub fn sign(&mut self) -> f64 {
        if self.inner.next_u64() >> 63 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index range must be non-empty");
        // Lemire's multiply-shift; bias is below 2^-64 * n.
        ((self.inner.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Categorical draw from (not necessarily normalised) weights.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut target = self.uniform() * total;
        for (i, w) in weights.iter().enumerate() {
            if target < *w {
                return i;
            }
            target -= w;
        }
        weights.len() - 1
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    pub fn state(&self) -> RngState {
        let pos = self.inner.get_word_pos();
        RngState {
            seed: self.seed,
            stream: self.inner.get_stream(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn from_state(state: &RngState) -> Self {
        let mut rng = Self::from_seed_bytes(state.seed);
        rng.inner.set_stream(state.stream);
        rng.inner
            .set_word_pos(((state.word_pos_hi as u128) << 64) | state.word_pos_lo as u128);
        rng
    }
}

pub fn gauss_sample(rng: &mut Rng) -> f64 {
    rng.gauss()
}

pub fn uniform_sample(rng: &mut Rng) -> f64 {
    rng.uniform()
}

/// Event times of a homogeneous Poisson process with rate `rate` on (0, horizon].
pub fn poisson_event_times(rate: f64, horizon: f64, rng: &mut Rng) -> Vec<f64> {
    let mut times = Vec::new();
    if !(rate > 0.0) || !(horizon > 0.0) {
        return times;
    }
    let mut t = rng.exponential(rate);
    while t <= horizon {
        times.push(t);
        t += rng.exponential(rate);
    }
    times
}
