//! Counter-based deterministic RNG.
//!
//! Every random draw is a pure function of `(seed, stream, counter)`, so
//! generation is order-independent: example 57 of a dataset has the same
//! pixels whether examples are produced sequentially or on demand. Streams
//! keep independent consumers (per-tensor init, per-example noise) from
//! sharing a sequence.

/// splitmix64 finalizer: one bijective mixing round.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stateless PRF over a (seed, stream, counter) triple.
#[inline]
pub fn hash3(seed: u64, stream: u64, counter: u64) -> u64 {
    mix64(mix64(mix64(seed) ^ stream.wrapping_mul(0xA24B_AED4_963E_E407)) ^ counter)
}

/// Sequential view over one `(seed, stream)` lane of the PRF.
#[derive(Debug, Clone)]
pub struct CounterRng {
    base: u64,
    ctr: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        CounterRng {
            base: mix64(mix64(seed) ^ stream.wrapping_mul(0xA24B_AED4_963E_E407)),
            ctr: 0,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let v = mix64(self.base ^ self.ctr.wrapping_mul(0x9FB2_1C65_1E98_DF25));
        self.ctr += 1;
        v
    }

    /// Uniform on [0, 1) with 53-bit resolution.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, bound). Modulo bias is irrelevant at the
    /// bounds used here (tens), so no rejection loop.
    #[inline]
    pub fn below(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        (self.next_u64() % bound as u64) as usize
    }

    /// Standard normal via Box-Muller (cosine branch; two draws per sample).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]: keeps ln() finite
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Normal(0, sigma) truncated to ±2·sigma by rejection.
    pub fn trunc_normal(&mut self, sigma: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * sigma;
            }
        }
    }
}
