//! Counter-based deterministic random streams.
//!
//! A stream is identified by a 64-bit key derived from a root seed and a path
//! of labels (`seed / "pepper" / sequence / frame`). Draw `i` of a stream is
//! `mix(key + (i + 1)·γ)` with the SplitMix64 finalizer, so any stream can be
//! re-created from its label path alone, without replaying other streams.
//!
//! Normal draws use the Box–Muller transform on a pair of uniforms
//! `u1 ∈ (0, 1]`, `u2 ∈ [0, 1)`: `r = √(−2 ln u1)`, yielding `r·cos 2πu2` and
//! then `r·sin 2πu2`.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3))
}

#[derive(Clone, Debug)]
pub struct Prng {
    key: u64,
    counter: u64,
    spare: Option<f64>,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Self { key: mix(seed ^ 0x5EED_0000_0000_0000), counter: 0, spare: None }
    }

    fn with_key(key: u64) -> Self {
        Self { key, counter: 0, spare: None }
    }

    /// Child stream keyed by a text label.
    pub fn fork(&self, label: &str) -> Self {
        Self::with_key(mix(self.key ^ mix(fnv1a(label.as_bytes()).wrapping_add(GAMMA))))
    }

    /// Child stream keyed by an integer label (frame, iteration, element, ...).
    pub fn fork_index(&self, index: u64) -> Self {
        Self::with_key(mix(self.key.wrapping_add(GAMMA) ^ mix(index.wrapping_mul(GAMMA) ^ 0xA5A5_A5A5)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}
