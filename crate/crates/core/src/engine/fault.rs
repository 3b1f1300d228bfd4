use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Crash tasks at start with a fixed probability, deterministically per attempt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaultPolicy {
    pub probability: f64,
    pub seed: u64,
    pub max_retries: u32,
}

impl Default for FaultPolicy {
    fn default() -> Self {
        FaultPolicy { probability: 0.0, seed: 0, max_retries: 4 }
    }
}

impl FaultPolicy {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(probability: f64, seed: u64) -> Self {
        FaultPolicy { probability, seed, ..Self::default() }
    }

    pub fn with_max_retries(mut self, max_retries: u32) -> Self {
        self.max_retries = max_retries;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(format!("fault probability {} is outside [0, 1]", self.probability));
        }
        Ok(())
    }

    /// Whether `attempt` of `task` in stage `stage_seq` crashes.
    pub fn crashes(&self, stage_seq: u64, reduce_phase: bool, task: u64, attempt: u32) -> bool {
        if self.probability <= 0.0 {
            return false;
        }
        if self.probability >= 1.0 {
            return true;
        }
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for word in [self.seed, stage_seq, reduce_phase as u64, task, attempt as u64] {
            for b in word.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        ChaCha8Rng::seed_from_u64(h).gen::<f64>() < self.probability
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_are_repeatable_and_roughly_calibrated() {
        let p = FaultPolicy::new(0.125, 7);
        let a: Vec<bool> = (0..4000).map(|t| p.crashes(1, false, t, 0)).collect();
        let b: Vec<bool> = (0..4000).map(|t| p.crashes(1, false, t, 0)).collect();
        assert_eq!(a, b);
        let rate = a.iter().filter(|&&x| x).count() as f64 / 4000.0;
        assert!((rate - 0.125).abs() < 0.02, "{rate}");
        // retries get fresh draws
        assert!((0..4000).any(|t| p.crashes(1, false, t, 0) != p.crashes(1, false, t, 1)));
    }

    #[test]
    fn extremes() {
        assert!(!FaultPolicy::none().crashes(0, false, 0, 0));
        assert!(FaultPolicy::new(1.0, 0).crashes(3, true, 9, 5));
        assert!(FaultPolicy::new(1.5, 0).validate().is_err());
    }
}
