//! Counter-based random numbers.
//!
//! Every value is a pure function of `(seed, index)`, so a stream can be
//! replayed from any position and independent consumers never perturb each
//! other's draws.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The `index`-th 64-bit word of the stream keyed by `seed`.
#[inline]
pub fn draw_u64(seed: u64, index: u64) -> u64 {
    mix64(mix64(seed ^ GOLDEN).wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN)))
}

/// FNV-1a, used to key per-name substreams.
pub fn name_key(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CounterRng {
    seed: u64,
    index: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, index: 0 }
    }

    /// Independent child stream; distinct `key`s give unrelated sequences.
    pub fn substream(&self, key: u64) -> Self {
        Self::new(mix64(self.seed ^ mix64(key.wrapping_add(GOLDEN))))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 64-bit words consumed so far.
    pub fn position(&self) -> u64 {
        self.index
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = draw_u64(self.seed, self.index);
        self.index += 1;
        v
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "empty range");
        // Lemire's multiply-shift; the residual bias is below 2^-64 · n.
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Standard normal via Box–Muller; always consumes exactly two words.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
