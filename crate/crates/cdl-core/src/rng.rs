//! Counter-based deterministic random numbers.
//!
//! Every stream is a pure function of (seed, counter), so identical seeds
//! reproduce identical sequences on every platform, and streams derived via
//! [`SeededRng::split`] never overlap with their parent or siblings.

/// Golden-ratio increment used by the splitmix64 generator.
const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// splitmix64 finalizer: a strong 64-bit mixing function.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over raw bytes; used to derive child seeds from stream labels.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Counter-based deterministic generator.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    counter: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng { seed, counter: 0 }
    }

    /// Derives an independent child stream from a label. Children with
    /// distinct labels (or distinct parents) never share outputs.
    pub fn split(&self, label: &str) -> SeededRng {
        SeededRng {
            seed: mix64(self.seed ^ fnv1a(label.as_bytes()).wrapping_mul(GOLDEN)),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)).wrapping_add(GOLDEN));
        self.counter += 1;
        v
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        // 53 mantissa bits of the raw draw.
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Signed integer uniform in [-radius, radius].
    pub fn jitter_int(&mut self, radius: usize) -> i64 {
        if radius == 0 {
            return 0;
        }
        self.below(2 * radius + 1) as i64 - radius as i64
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let mut u1 = self.next_f64();
        if u1 < 1e-300 {
            u1 = 1e-300;
        }
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = SeededRng::new(7);
        let mut b = SeededRng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn split_streams_are_independent_of_parent_use() {
        let parent = SeededRng::new(42);
        let mut child1 = parent.split("dataset");
        let mut consumed = parent.clone();
        consumed.next_u64();
        let mut child2 = consumed.split("dataset");
        // split depends only on (seed, label), not on parent counter state
        assert_eq!(child1.next_u64(), child2.next_u64());
    }

    #[test]
    fn distinct_labels_disagree() {
        let parent = SeededRng::new(42);
        assert_ne!(parent.split("a").next_u64(), parent.split("b").next_u64());
    }

    #[test]
    fn uniform_range() {
        let mut r = SeededRng::new(1);
        for _ in 0..1000 {
            let v = r.uniform(-1.0, 1.0);
            assert!((-1.0..1.0).contains(&v));
        }
    }

    #[test]
    fn normal_moments_roughly_standard() {
        let mut r = SeededRng::new(3);
        let n = 20_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let v = r.normal();
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
    }
}
