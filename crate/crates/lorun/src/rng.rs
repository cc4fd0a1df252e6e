//! Counter-based pseudo-random generator.
//!
//! Every random draw in the toolkit flows through [`Rng`], a SplitMix64
//! generator: the state advances by a fixed odd constant and the output is a
//! bijective mix of the counter, so a (seed, index) pair always yields the
//! same value on every platform. Sub-streams for distinct purposes are
//! derived by hashing the purpose string into the seed.

/// SplitMix64 over a 64-bit counter.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    /// Box-Muller produces pairs; the spare half is cached here.
    cached_gauss: Option<f64>,
}

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            state: seed,
            cached_gauss: None,
        }
    }

    /// Derive the seed of an independent sub-stream from a purpose label.
    pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
        let mut h = mix(seed ^ GOLDEN_GAMMA);
        for &b in purpose.as_bytes() {
            h = mix(h ^ u64::from(b)).wrapping_add(GOLDEN_GAMMA);
        }
        h
    }

    /// Sub-stream generator for a named purpose.
    pub fn for_purpose(seed: u64, purpose: &str) -> Self {
        Rng::new(Self::derive_seed(seed, purpose))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix(self.state)
    }

    /// Uniform in [0, 1) with 53 bits of mantissa.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard Gaussian via Box-Muller.
    pub fn gauss(&mut self) -> f64 {
        if let Some(g) = self.cached_gauss.take() {
            return g;
        }
        // u1 in (0,1] so the log is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_gauss = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn gauss_scaled(&mut self, std: f64) -> f64 {
        self.gauss() * std
    }
}
