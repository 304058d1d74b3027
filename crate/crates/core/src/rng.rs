//! SplitMix64: the fixed pseudo-random stream behind every seeded artifact
//! (toy-model weights, beta draws, synthetic probes). The constants are part
//! of the reproducibility contract — identical seeds must yield bit-identical
//! streams in any implementation of this toolkit.

/// SplitMix64 generator state.
#[derive(Debug, Clone, Copy)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    /// Next raw 64-bit output.
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1): top 53 bits of the raw output.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [-0.5, 0.5).
    pub fn next_centered(&mut self) -> f64 {
        self.next_f64() - 0.5
    }

    /// Uniform in [-1, 1).
    pub fn next_symmetric(&mut self) -> f64 {
        2.0 * self.next_f64() - 1.0
    }

    /// Uniform index in [0, bound). Uses the high bits via 128-bit multiply,
    /// which is unbiased enough for probe selection at these bounds.
    pub fn next_index(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        ((self.next_u64() as u128 * bound as u128) >> 64) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Standalone reference generator, written independently of the struct
    // above, straight from the canonical description.
    fn reference_splitmix64(seed: u64, n: usize) -> Vec<u64> {
        let mut out = Vec::with_capacity(n);
        let mut x = seed;
        for _ in 0..n {
            x = x.wrapping_add(0x9E3779B97F4A7C15);
            let mut z = x;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
            out.push(z ^ (z >> 31));
        }
        out
    }

    #[test]
    fn matches_reference_for_seed_42() {
        let mut rng = SplitMix64::new(42);
        let expected = reference_splitmix64(42, 8);
        let got: Vec<u64> = (0..8).map(|_| rng.next_u64()).collect();
        assert_eq!(got, expected);
        // First draw frozen from the reference generator.
        assert_eq!(expected[0], 0xBDD7_3226_2FEB_6E95);
    }

    #[test]
    fn first_draw_differs_between_adjacent_seeds() {
        let a = SplitMix64::new(42).next_u64();
        let b = SplitMix64::new(43).next_u64();
        assert_ne!(a, b);
    }

    #[test]
    fn unit_range_outputs() {
        let mut rng = SplitMix64::new(7);
        for _ in 0..1000 {
            let v = rng.next_f64();
            assert!((0.0..1.0).contains(&v));
            let c = rng.next_centered();
            assert!((-0.5..0.5).contains(&c));
        }
    }
}
