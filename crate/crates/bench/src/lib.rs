//! Shared fixtures for the hot-path benchmarks: a desk-scale agent with
//! random weights and synthetic batches shaped like the trainer's.

use pompc::policy::PolicyBatch;
use pompc::worldmodel::{simnorm, ModelBatch};
use pompc::{Agent, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub cfg: TrainConfig,
    pub agent: Agent,
    pub rng: ChaCha8Rng,
}

impl Fixture {
    pub fn desk(seed: u64) -> Self {
        let mut cfg = TrainConfig::desk();
        cfg.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let agent = Agent::new(&cfg, &mut rng).expect("desk config is valid");
        Fixture { cfg, agent, rng }
    }

    pub fn obs(&mut self) -> Vec<f64> {
        let d = self.cfg.env.name.spec().obs_dim;
        (0..d).map(|_| self.rng.random_range(-1.0..1.0)).collect()
    }

    fn latent(&mut self) -> Vec<f64> {
        let l = self.cfg.model.latent_dim;
        let raw: Vec<f64> = (0..l).map(|_| self.rng.random_range(-2.0..2.0)).collect();
        simnorm(&raw, self.cfg.model.simnorm_dim)
    }

    fn action(&mut self) -> Vec<f64> {
        let a = self.cfg.env.name.spec().action_dim;
        (0..a).map(|_| self.rng.random_range(-1.0..1.0)).collect()
    }

    /// One training batch at the configured batch size and horizon.
    pub fn model_batch(&mut self) -> ModelBatch {
        let (n, h) = (self.cfg.replay.batch_size, self.cfg.planner.horizon);
        let mut b = ModelBatch {
            obs0: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            next_latents: Vec::new(),
            value_targets: Vec::new(),
        };
        for _ in 0..n {
            b.obs0.push(self.obs());
            b.actions.push((0..h).map(|_| self.action()).collect());
            b.rewards.push((0..h).map(|_| self.rng.random_range(-16.0..0.0)).collect());
            b.next_latents.push((0..h).map(|_| self.latent()).collect());
            b.value_targets.push((0..h).map(|_| self.rng.random_range(-300.0..0.0)).collect());
        }
        b
    }

    pub fn policy_batch(&mut self) -> PolicyBatch {
        let (n, h) = (self.cfg.replay.batch_size, self.cfg.planner.horizon);
        let mut b = PolicyBatch {
            latents: Vec::new(),
            plan_mean: Vec::new(),
            plan_std: Vec::new(),
        };
        for _ in 0..n {
            b.latents.push((0..h).map(|_| self.latent()).collect());
            b.plan_mean.push((0..h).map(|_| self.action()).collect());
            b.plan_std.push((0..h).map(|_| self.action().iter().map(|x| 0.1 + x.abs()).collect()).collect());
        }
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_match_the_config() {
        let mut f = Fixture::desk(0);
        let b = f.model_batch();
        assert_eq!(b.len(), f.cfg.replay.batch_size);
        assert_eq!(b.horizon(), f.cfg.planner.horizon);
        let p = f.policy_batch();
        assert_eq!(p.horizon(), f.cfg.planner.horizon);
        assert!(p.plan_std.iter().flatten().flatten().all(|s| *s > 0.0));
    }
}
