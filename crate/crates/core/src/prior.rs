//! Adaptive prior: a Gaussian policy distilled from stored planner Gaussians.

use serde::{Deserialize, Serialize};

use crate::dists::{kl_grads, kl_unchecked, DiagGaussian};
use crate::error::{Error, Result};
use crate::nnet::{GradBundle, MlpGrads};
use crate::policy::{GaussianPolicy, PolicyBatch};
use crate::worldmodel::horizon_weights;

/// The prior network shares the sampling policy's architecture.
pub type PriorPolicy = GaussianPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    /// `KL(pi_p || pi_P)`: mode-seeking.
    #[default]
    ReverseKl,
    /// `KL(pi_P || pi_p)`: mass-covering.
    ForwardKl,
    /// No network; the stored planner Gaussians are the prior.
    ReplayDirect,
}

impl std::str::FromStr for PriorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reverse_kl" => Ok(PriorMode::ReverseKl),
            "forward_kl" => Ok(PriorMode::ForwardKl),
            "replay_direct" => Ok(PriorMode::ReplayDirect),
            other => Err(Error::Config {
                key: "prior.mode".into(),
                msg: format!("unknown mode {other:?}"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorLoss {
    pub loss: f64,
    /// Unscaled per-step KLs, for the `S_p` tracker.
    pub kl_values: Vec<f64>,
    /// Steps dropped because their stored std was not strictly positive.
    pub skipped: usize,
    pub grads: GradBundle,
}

fn stored(batch: &PolicyBatch, b: usize, t: usize) -> Option<DiagGaussian> {
    let std = &batch.plan_std[b][t];
    if std.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return None;
    }
    DiagGaussian::new(batch.plan_mean[b][t].clone(), std.clone()).ok()
}

/// `rho`-weighted KL between the prior and the stored planner Gaussians,
/// divided by `scale = max(1, S_p)` and averaged over the batch.
pub fn prior_loss(prior: &PriorPolicy, batch: &PolicyBatch, mode: PriorMode, scale: f64, rho: f64) -> Result<PriorLoss> {
    if mode == PriorMode::ReplayDirect {
        return Err(Error::Config {
            key: "prior.mode".into(),
            msg: "replay_direct has no prior network to train".into(),
        });
    }
    let n_b = batch.len();
    let h = batch.horizon();
    if n_b == 0 || h == 0 {
        return Err(Error::Shape {
            what: "prior batch",
            expected: 1,
            got: 0,
        });
    }
    let weights = horizon_weights(rho, h);
    let mut grads = MlpGrads::zeros_like(&prior.net);
    let mut kl_term = 0.0;
    let mut kl_values = Vec::with_capacity(n_b * h);
    let mut skipped = 0;
    for b in 0..n_b {
        for t in 0..h {
            let Some(plan) = stored(batch, b, t) else {
                skipped += 1;
                continue;
            };
            let w = weights[t] / n_b as f64;
            let tape = prior.forward_tape(&batch.latents[b][t])?;
            let (kl, d_mean, d_std) = match mode {
                PriorMode::ReverseKl => {
                    let g = kl_grads(tape.dist(), &plan);
                    (kl_unchecked(tape.dist(), &plan), g.p_mean, g.p_std)
                }
                _ => {
                    let g = kl_grads(&plan, tape.dist());
                    (kl_unchecked(&plan, tape.dist()), g.q_mean, g.q_std)
                }
            };
            kl_term += w * kl;
            kl_values.push(kl);
            let d_mean: Vec<f64> = d_mean.iter().map(|g| w * g / scale).collect();
            let d_std: Vec<f64> = d_std.iter().map(|g| w * g / scale).collect();
            prior.backward_into(&tape, &d_mean, &d_std, &mut grads)?;
        }
    }
    let loss = kl_term / scale;
    if !loss.is_finite() {
        return Err(Error::Numeric("prior loss".into()));
    }
    Ok(PriorLoss {
        loss,
        kl_values,
        skipped,
        grads: GradBundle::new(vec![grads]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{Activation, Optimizer};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn prior(seed: u64) -> PriorPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GaussianPolicy::new(3, 1, 16, Activation::Mish, -5.0, 2.0, &mut rng)
    }

    fn one_state(mean: &[f64], std: &[f64]) -> PolicyBatch {
        PolicyBatch {
            latents: mean.iter().map(|_| vec![vec![0.2, 0.3, 0.5]]).collect(),
            plan_mean: mean.iter().map(|m| vec![vec![*m]]).collect(),
            plan_std: std.iter().map(|s| vec![vec![*s]]).collect(),
        }
    }

    fn fit(mode: PriorMode, batch: &PolicyBatch, steps: usize) -> PriorPolicy {
        let mut p = prior(1);
        let mut opt = Optimizer::new(&p.net, 1e-2, 1e9, 0.9, 0.999);
        for _ in 0..steps {
            let l = prior_loss(&p, batch, mode, 1.0, 0.5).unwrap();
            opt.step(&mut p.net, l.grads).unwrap();
        }
        p
    }

    #[test]
    fn zero_head_emits_midpoint() {
        let mut p = prior(0);
        p.net.zero_params();
        let d = p.forward(&[0.1, 0.2, 0.7]).unwrap();
        assert_eq!(d.mean(), &[0.0]);
        assert!((d.std()[0] - (-1.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn zero_loss_at_identity() {
        let p = prior(0);
        let z = vec![0.2, 0.3, 0.5];
        let d = p.forward(&z).unwrap();
        let batch = PolicyBatch {
            latents: vec![vec![z.clone(), z]],
            plan_mean: vec![vec![d.mean().to_vec(); 2]],
            plan_std: vec![vec![d.std().to_vec(); 2]],
        };
        for mode in [PriorMode::ReverseKl, PriorMode::ForwardKl] {
            let l = prior_loss(&p, &batch, mode, 1.0, 0.5).unwrap();
            assert!(l.loss.abs() < 1e-15);
            assert!(l.grads.norm() < 1e-12);
        }
    }

    #[test]
    fn degenerate_std_is_skipped() {
        let p = prior(0);
        let batch = one_state(&[0.1, 0.2], &[0.0, 0.3]);
        let l = prior_loss(&p, &batch, PriorMode::ReverseKl, 1.0, 0.5).unwrap();
        assert_eq!(l.skipped, 1);
        assert_eq!(l.kl_values.len(), 1);
        assert!(prior_loss(&p, &batch, PriorMode::ReplayDirect, 1.0, 0.5).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = PolicyBatch {
            latents: (0..2).map(|_| (0..3).map(|_| (0..3).map(|_| rng.random_range(0.0..1.0)).collect()).collect()).collect(),
            plan_mean: (0..2).map(|_| (0..3).map(|_| vec![rng.random_range(-0.8..0.8)]).collect()).collect(),
            plan_std: (0..2).map(|_| (0..3).map(|_| vec![rng.random_range(0.1..1.5)]).collect()).collect(),
        };
        for mode in [PriorMode::ReverseKl, PriorMode::ForwardKl] {
            let mut p = prior(2);
            let g = prior_loss(&p, &batch, mode, 2.5, 0.5).unwrap().grads;
            for k in (0..p.net.param_count()).step_by(7) {
                let orig = *p.net.param_mut(k);
                *p.net.param_mut(k) = orig + 1e-5;
                let lp = prior_loss(&p, &batch, mode, 2.5, 0.5).unwrap().loss;
                *p.net.param_mut(k) = orig - 1e-5;
                let lm = prior_loss(&p, &batch, mode, 2.5, 0.5).unwrap().loss;
                *p.net.param_mut(k) = orig;
                let num = (lp - lm) / 2e-5;
                let ana = g.nets()[0].param(k);
                assert!((num - ana).abs() <= 1e-4 * num.abs().max(ana.abs()).max(1e-6), "{mode:?} {k}: {num} vs {ana}");
            }
        }
    }

    #[test]
    fn both_modes_recover_a_single_gaussian() {
        let batch = one_state(&[0.4], &[0.3]);
        let target = DiagGaussian::new(vec![0.4], vec![0.3]).unwrap();
        for mode in [PriorMode::ReverseKl, PriorMode::ForwardKl] {
            let p = fit(mode, &batch, 1500);
            let d = p.forward(&batch.latents[0][0]).unwrap();
            assert!(kl_unchecked(&d, &target) < 1e-3, "{mode:?}");
        }
    }

    #[test]
    fn forward_fit_is_wider_than_reverse_fit() {
        let (c, s) = (0.5, 0.2);
        let batch = one_state(&[-c, c], &[s, s]);
        let z = &batch.latents[0][0];
        let fwd = fit(PriorMode::ForwardKl, &batch, 2000).forward(z).unwrap();
        let rev = fit(PriorMode::ReverseKl, &batch, 2000).forward(z).unwrap();
        assert!((fwd.std()[0] - (s * s + c * c).sqrt()).abs() < 1e-2);
        assert!(fwd.mean()[0].abs() < 1e-2);
        assert!((rev.std()[0] - s).abs() < 1e-2);
        assert!(fwd.std()[0] > rev.std()[0]);
    }

    #[test]
    fn mode_names_parse() {
        assert_eq!("forward_kl".parse::<PriorMode>().unwrap(), PriorMode::ForwardKl);
        assert!("both".parse::<PriorMode>().is_err());
    }
}
