//! Seeded randomness with per-component streams.
//!
//! Each model component derives its own stream from (base seed, component
//! name), so two models built from the same base seed share bit-identical
//! init for every component they have in common. That keeps ablation
//! baselines fair: the vision-only variant starts from the same vision and
//! LM weights as the audio-visual one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub struct ComponentRng {
    rng: ChaCha8Rng,
}

impl ComponentRng {
    pub fn for_component(base_seed: u64, component: &str) -> Self {
        let digest = Sha256::digest(component.as_bytes());
        let tag = u64::from_le_bytes(digest[0..8].try_into().unwrap());
        ComponentRng {
            rng: ChaCha8Rng::seed_from_u64(base_seed ^ tag),
        }
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// n independent N(0, sigma^2) draws via Box-Muller.
    pub fn normal(&mut self, n: usize, sigma: f32) -> Vec<f32> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let u1: f64 = self.rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = self.rng.gen();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            out.push((r * theta.cos()) as f32 * sigma);
            if out.len() < n {
                out.push((r * theta.sin()) as f32 * sigma);
            }
        }
        out
    }
}
