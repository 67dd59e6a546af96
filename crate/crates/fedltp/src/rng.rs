//! Deterministic random number streams.
//!
//! Every source of randomness in a run is a [`RngStream`] derived from the
//! master seed plus a purpose label and zero or more integer coordinates
//! (client id, round, ticket index, ...). Streams are independent by
//! construction, so the simulation trace does not depend on scheduling:
//! evaluating clients in any order yields the same numbers.
//!
//! The generator is xoshiro256** seeded through splitmix64, implemented here
//! rather than pulled in as a dependency so the exact draw order is pinned by
//! this crate alone:
//!
//! - `next_u64`: one xoshiro256** step.
//! - `uniform`: top 53 bits of `next_u64`, mapped to `[0, 1)`.
//! - `normal`: Box-Muller on two uniforms (`u1` mapped to `(0, 1]`),
//!   returning `r*cos(theta)` first and caching `r*sin(theta)` for the next
//!   call.
//! - `laplace`: inverse CDF, `-b * sign(u) * ln(1 - 2|u|)` for `u` uniform in
//!   `(-1/2, 1/2)`.

/// Order-stable FNV-1a hash of a purpose label, usable in constants.
pub const fn purpose_tag(label: &str) -> u64 {
    let bytes = label.as_bytes();
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    let mut i = 0;
    while i < bytes.len() {
        hash ^= bytes[i] as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        i += 1;
    }
    hash
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A deterministic pseudo-random stream (xoshiro256**).
#[derive(Clone, Debug)]
pub struct RngStream {
    s: [u64; 4],
    cached_normal: Option<f64>,
}

impl RngStream {
    /// Stream identified by a master seed, a purpose tag, and extra
    /// coordinates such as (client id, round).
    pub fn derive(master_seed: u64, purpose: u64, coords: &[u64]) -> Self {
        let mut acc = master_seed;
        let mut mixed = splitmix64(&mut acc) ^ purpose;
        mixed = splitmix64(&mut mixed);
        for &c in coords {
            mixed ^= c.wrapping_mul(0x9e37_79b9_7f4a_7c15);
            mixed = splitmix64(&mut mixed);
        }
        Self::from_seed(mixed)
    }

    /// Stream seeded directly from a single 64-bit value.
    pub fn from_seed(seed: u64) -> Self {
        let mut state = seed;
        let s = [
            splitmix64(&mut state),
            splitmix64(&mut state),
            splitmix64(&mut state),
            splitmix64(&mut state),
        ];
        RngStream {
            s,
            cached_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform integer in `[0, n)` without modulo bias.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0) is undefined");
        let threshold = n.wrapping_neg() % n;
        loop {
            let x = self.next_u64();
            if x >= threshold {
                return x % n;
            }
        }
    }

    /// Standard normal via Box-Muller; pairs are drawn together and the
    /// second value is cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        // u1 in (0, 1] keeps ln finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Zero-mean Laplace sample with scale `b` via the inverse CDF:
    /// for `u` uniform in `(-1/2, 1/2)`, the sample is
    /// `-b * sign(u) * ln(1 - 2|u|)`.
    pub fn laplace(&mut self, b: f64) -> f64 {
        let mut u = self.uniform() - 0.5;
        while u == -0.5 {
            u = self.uniform() - 0.5;
        }
        -b * u.signum() * (-2.0 * u.abs()).ln_1p()
    }

    /// Gamma(shape, 1) via Marsaglia-Tsang, boosted for shape < 1.
    pub fn gamma(&mut self, shape: f64) -> f64 {
        assert!(shape > 0.0, "gamma shape must be positive");
        if shape < 1.0 {
            let boost = self.gamma(shape + 1.0);
            let u = {
                let mut u = self.uniform();
                while u == 0.0 {
                    u = self.uniform();
                }
                u
            };
            return boost * u.powf(1.0 / shape);
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (3.0 * d.sqrt());
        loop {
            let x = self.normal();
            let v = (1.0 + c * x).powi(3);
            if v <= 0.0 {
                continue;
            }
            let u = self.uniform();
            if u < 1.0 - 0.0331 * x.powi(4) {
                return d * v;
            }
            if u > 0.0 && u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
                return d * v;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// `k` distinct values sampled from `0..n` (partial Fisher-Yates); the
    /// returned order is part of the trace.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} of {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

/// Stream purposes used by the simulator, one tag per independent concern.
pub mod purpose {
    use super::purpose_tag;

    pub const DATA_PUBLIC: u64 = purpose_tag("data/public");
    pub const DATA_PRIVATE: u64 = purpose_tag("data/private");
    pub const CARVE: u64 = purpose_tag("data/carve");
    pub const PARTITION: u64 = purpose_tag("data/partition");
    pub const SPLIT: u64 = purpose_tag("data/split");
    pub const TICKET: u64 = purpose_tag("lth/ticket");
    pub const TICKET_SELECT: u64 = purpose_tag("lth/select");
    pub const DENSE_INIT: u64 = purpose_tag("init/dense");
    pub const COHORT: u64 = purpose_tag("round/cohort");
    pub const MODEL_SHUFFLE: u64 = purpose_tag("round/shuffle");
    pub const CLIENT_UPDATE: u64 = purpose_tag("client/update");
    pub const VALIDATION_NOISE: u64 = purpose_tag("validation/noise");
}
