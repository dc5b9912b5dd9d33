//! Seedable splittable PRNG.
//!
//! One 64-bit mixing generator per consumer: every subsystem derives its own
//! child stream from the parent seed and a label, so adding a consumer never
//! shifts the draws seen by another.

/// SplitMix64-style generator with labelled child derivation.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    state: u64,
}

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    z
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, state: seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent stream from this generator's seed and a label.
    /// Children depend only on (seed, label), never on draw position.
    pub fn child(&self, label: &str) -> Rng {
        Rng::new(mix64(self.seed ^ fnv1a(label.as_bytes())))
    }

    /// Indexed child derivation, for per-task or per-episode streams.
    pub fn child_indexed(&self, label: &str, index: u64) -> Rng {
        Rng::new(mix64(
            self.seed ^ fnv1a(label.as_bytes()) ^ mix64(index.wrapping_add(GAMMA)),
        ))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        mix64(self.state)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (self.uniform() as f32) * (hi - lo)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let x = (self.uniform() * n as f64) as usize;
        x.min(n - 1)
    }

    /// Standard Box-Muller normal draw; always consumes two raw values.
    pub fn normal(&mut self, mean: f32, std: f32) -> f32 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        mean + std * (r * theta.cos()) as f32
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
