//! Latent world model: encoder, latent dynamics and a discrete-regression
//! reward head, trained jointly with the bootstrap critic.

mod twohot;

pub use twohot::{log_softmax, softmax, symexp, symlog, TwoHot};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::nnet::{Activation, GradBundle, Mlp, MlpGrads, ParamGroup, Tape};
use crate::value::QEnsemble;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldModelConfig {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub latent_dim: usize,
    pub simnorm_dim: usize,
    pub enc_dim: usize,
    pub num_enc_layers: usize,
    pub mlp_dim: usize,
    pub num_bins: usize,
    pub symlog_min: f64,
    pub symlog_max: f64,
    pub activation: Activation,
}

impl WorldModelConfig {
    pub fn grid(&self) -> TwoHot {
        TwoHot::new(self.num_bins, self.symlog_min, self.symlog_max)
    }
}

/// Per-group softmax over contiguous blocks of `group` entries.
pub fn simnorm(x: &[f64], group: usize) -> Vec<f64> {
    debug_assert_eq!(x.len() % group, 0);
    x.chunks_exact(group).flat_map(softmax).collect()
}

/// Backward of [`simnorm`] given its output `y`.
pub fn simnorm_backward(y: &[f64], grad_y: &[f64], group: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(y.len());
    for (ys, gs) in y.chunks_exact(group).zip(grad_y.chunks_exact(group)) {
        let inner: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
        out.extend(ys.iter().zip(gs).map(|(a, b)| a * (b - inner)));
    }
    out
}

pub(crate) fn concat(z: &[f64], a: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(z.len() + a.len());
    v.extend_from_slice(z);
    v.extend_from_slice(a);
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldModel {
    cfg: WorldModelConfig,
    pub encoder: Mlp,
    pub dynamics: Mlp,
    pub reward: Mlp,
    pub target_encoder: Mlp,
}

impl WorldModel {
    pub fn new<R: Rng + ?Sized>(cfg: WorldModelConfig, rng: &mut R) -> Result<Self> {
        if cfg.simnorm_dim == 0 || !cfg.latent_dim.is_multiple_of(cfg.simnorm_dim) {
            return Err(Error::Config {
                key: "model.simnorm_dim".into(),
                msg: "must divide latent_dim".into(),
            });
        }
        let act = cfg.activation;
        let mut enc_dims = vec![cfg.obs_dim];
        enc_dims.extend(std::iter::repeat_n(cfg.enc_dim, cfg.num_enc_layers.saturating_sub(1).max(1)));
        enc_dims.push(cfg.latent_dim);
        let za = cfg.latent_dim + cfg.action_dim;
        let encoder = Mlp::new(&enc_dims, act, Activation::Identity, rng);
        let dynamics = Mlp::new(&[za, cfg.mlp_dim, cfg.mlp_dim, cfg.latent_dim], act, Activation::Identity, rng);
        let mut reward = Mlp::new(&[za, cfg.mlp_dim, cfg.mlp_dim, cfg.num_bins], act, Activation::Identity, rng);
        zero_last_layer(&mut reward);
        Ok(WorldModel {
            cfg,
            target_encoder: encoder.clone(),
            encoder,
            dynamics,
            reward,
        })
    }

    pub fn config(&self) -> &WorldModelConfig {
        &self.cfg
    }

    pub fn grid(&self) -> TwoHot {
        self.cfg.grid()
    }

    pub fn encode(&self, s: &[f64]) -> Result<Vec<f64>> {
        check_len("observation", self.cfg.obs_dim, s.len())?;
        Ok(simnorm(&self.encoder.infer(s), self.cfg.simnorm_dim))
    }

    /// Encodes with the slowly-moving target encoder.
    pub fn encode_target(&self, s: &[f64]) -> Result<Vec<f64>> {
        check_len("observation", self.cfg.obs_dim, s.len())?;
        Ok(simnorm(&self.target_encoder.infer(s), self.cfg.simnorm_dim))
    }

    pub fn dynamics_step(&self, z: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        check_len("latent", self.cfg.latent_dim, z.len())?;
        check_len("action", self.cfg.action_dim, a.len())?;
        Ok(self.next_latent(z, a))
    }

    pub fn reward_predict(&self, z: &[f64], a: &[f64]) -> Result<(Vec<f64>, f64)> {
        check_len("latent", self.cfg.latent_dim, z.len())?;
        check_len("action", self.cfg.action_dim, a.len())?;
        let logits = self.reward.infer(&concat(z, a));
        let r = self.grid().decode(&logits);
        Ok((logits, r))
    }

    pub(crate) fn next_latent(&self, z: &[f64], a: &[f64]) -> Vec<f64> {
        simnorm(&self.dynamics.infer(&concat(z, a)), self.cfg.simnorm_dim)
    }

    pub(crate) fn reward_value(&self, z: &[f64], a: &[f64]) -> f64 {
        self.grid().decode(&self.reward.infer(&concat(z, a)))
    }

    pub fn polyak_target_encoder(&mut self, tau: f64) {
        self.target_encoder.soft_update_from(&self.encoder, tau);
    }
}

pub(crate) fn zero_last_layer(net: &mut Mlp) {
    let last = net.layers_mut().last_mut().expect("non-empty mlp");
    last.weight.iter_mut().for_each(|w| *w = 0.0);
    last.bias.iter_mut().for_each(|b| *b = 0.0);
}

/// The nets updated by the joint model loss, in gradient order:
/// encoder, dynamics, reward, then every online critic head.
pub struct ModelAndCritic<'a> {
    pub model: &'a mut WorldModel,
    pub critic: &'a mut QEnsemble,
}

impl ParamGroup for ModelAndCritic<'_> {
    fn nets(&self) -> Vec<&Mlp> {
        let mut v = vec![&self.model.encoder, &self.model.dynamics, &self.model.reward];
        v.extend(self.critic.heads());
        v
    }

    fn nets_mut(&mut self) -> Vec<&mut Mlp> {
        let mut v = vec![&mut self.model.encoder, &mut self.model.dynamics, &mut self.model.reward];
        v.extend(self.critic.heads_mut());
        v
    }
}

/// One batch of `n_b` contiguous `H`-step slices, with stop-gradient targets
/// already computed.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBatch {
    /// `[n_b][obs_dim]`, the first observation of each slice.
    pub obs0: Vec<Vec<f64>>,
    /// `[n_b][H][action_dim]`.
    pub actions: Vec<Vec<Vec<f64>>>,
    /// `[n_b][H]`.
    pub rewards: Vec<Vec<f64>>,
    /// Target-encoder latents of `s_{t+1}`, `[n_b][H][latent_dim]`.
    pub next_latents: Vec<Vec<Vec<f64>>>,
    /// Bootstrap TD targets, `[n_b][H]`.
    pub value_targets: Vec<Vec<f64>>,
}

impl ModelBatch {
    pub fn len(&self) -> usize {
        self.obs0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs0.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.actions.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelLossCoefs {
    pub consistency: f64,
    pub reward: f64,
    pub value: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelLoss {
    pub total: f64,
    pub consistency: f64,
    pub reward: f64,
    pub value: f64,
    /// Predicted latents `z_0..z_H` per slice, `[n_b][H+1][latent_dim]`.
    pub rollout: Vec<Vec<Vec<f64>>>,
}

/// Per-step weight `rho^t / H`.
pub fn horizon_weights(rho: f64, horizon: usize) -> Vec<f64> {
    (0..horizon).map(|t| rho.powi(t as i32) / horizon as f64).collect()
}

/// Joint consistency + reward + bootstrap-value loss over a latent rollout.
///
/// Gradients are returned for `[encoder, dynamics, reward, critic heads..]`
/// and flow through the whole rollout. `rng` drives critic dropout.
pub fn world_model_loss(
    wm: &WorldModel,
    critic: &QEnsemble,
    batch: &ModelBatch,
    coefs: &ModelLossCoefs,
    rng: &mut dyn RngCore,
) -> Result<(ModelLoss, GradBundle)> {
    let cfg = wm.cfg;
    let n_b = batch.len();
    let h = batch.horizon();
    if n_b == 0 || h == 0 {
        return Err(Error::Shape {
            what: "model batch",
            expected: 1,
            got: 0,
        });
    }
    let grid = wm.grid();
    let group = cfg.simnorm_dim;
    let weights = horizon_weights(coefs.rho, h);
    let inv_b = 1.0 / n_b as f64;
    let l = cfg.latent_dim;

    let mut g_enc = MlpGrads::zeros_like(&wm.encoder);
    let mut g_dyn = MlpGrads::zeros_like(&wm.dynamics);
    let mut g_rew = MlpGrads::zeros_like(&wm.reward);
    let mut g_q: Vec<MlpGrads> = critic.heads().iter().map(MlpGrads::zeros_like).collect();

    let (mut cons_total, mut rew_total, mut val_total) = (0.0, 0.0, 0.0);
    let mut rollouts = Vec::with_capacity(n_b);

    for b in 0..n_b {
        check_len("slice actions", h, batch.actions[b].len())?;
        check_len("slice rewards", h, batch.rewards[b].len())?;
        check_len("slice next latents", h, batch.next_latents[b].len())?;
        check_len("slice value targets", h, batch.value_targets[b].len())?;

        let (enc_out, enc_tape) = wm.encoder.forward(&batch.obs0[b])?;
        let mut zs = vec![simnorm(&enc_out, group)];
        let mut dyn_tapes: Vec<Tape> = Vec::with_capacity(h);
        for t in 0..h {
            let (u, tape) = wm.dynamics.forward(&concat(&zs[t], &batch.actions[b][t]))?;
            zs.push(simnorm(&u, group));
            dyn_tapes.push(tape);
        }

        let mut gz = vec![vec![0.0; l]; h + 1];
        for t in 0..h {
            let w = weights[t] * inv_b;
            let za = concat(&zs[t], &batch.actions[b][t]);

            let target = &batch.next_latents[b][t];
            check_len("consistency target", l, target.len())?;
            let mut sq = 0.0;
            for (i, (zp, zt)) in zs[t + 1].iter().zip(target).enumerate() {
                let d = zp - zt;
                sq += d * d;
                gz[t + 1][i] += coefs.consistency * w * 2.0 * d / l as f64;
            }
            cons_total += w * sq / l as f64;

            let (logits, rtape) = wm.reward.forward(&za)?;
            let (ce, mut dlogits) = TwoHot::cross_entropy(&logits, &grid.encode(batch.rewards[b][t]));
            rew_total += w * ce;
            dlogits.iter_mut().for_each(|g| *g *= coefs.reward * w);
            let din = wm.reward.backward_into(&rtape, &dlogits, &mut g_rew)?;
            gz[t].iter_mut().zip(&din[..l]).for_each(|(a, b)| *a += b);

            let target_w = grid.encode(batch.value_targets[b][t]);
            let (ce, dz) =
                critic.ce_backward(&zs[t], &batch.actions[b][t], &target_w, coefs.value * w, rng, &mut g_q)?;
            val_total += w * ce;
            gz[t].iter_mut().zip(&dz).for_each(|(a, b)| *a += b);
        }

        for t in (0..h).rev() {
            let du = simnorm_backward(&zs[t + 1], &gz[t + 1], group);
            let din = wm.dynamics.backward_into(&dyn_tapes[t], &du, &mut g_dyn)?;
            gz[t].iter_mut().zip(&din[..l]).for_each(|(a, b)| *a += b);
        }
        let du0 = simnorm_backward(&zs[0], &gz[0], group);
        wm.encoder.backward_into(&enc_tape, &du0, &mut g_enc)?;
        rollouts.push(zs);
    }

    let total = coefs.consistency * cons_total + coefs.reward * rew_total + coefs.value * val_total;
    if !total.is_finite() {
        return Err(Error::Numeric("world model loss".into()));
    }
    let mut nets = vec![g_enc, g_dyn, g_rew];
    nets.extend(g_q);
    Ok((
        ModelLoss {
            total,
            consistency: cons_total,
            reward: rew_total,
            value: val_total,
            rollout: rollouts,
        },
        GradBundle::new(nets),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn small_cfg() -> WorldModelConfig {
        WorldModelConfig {
            obs_dim: 3,
            action_dim: 1,
            latent_dim: 8,
            simnorm_dim: 4,
            enc_dim: 8,
            num_enc_layers: 2,
            mlp_dim: 8,
            num_bins: 11,
            symlog_min: -3.0,
            symlog_max: 3.0,
            activation: Activation::Mish,
        }
    }

    #[test]
    fn simnorm_groups_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let wm = WorldModel::new(small_cfg(), &mut rng).unwrap();
        let z = wm.encode(&[0.3, -2.0, 5.0]).unwrap();
        for g in z.chunks(4) {
            assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(g.iter().all(|v| *v > 0.0 && *v < 1.0));
        }
        let z2 = wm.dynamics_step(&z, &[0.5]).unwrap();
        for g in z2.chunks(4) {
            assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_give_uniform_groups_and_zero_reward() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut wm = WorldModel::new(small_cfg(), &mut rng).unwrap();
        wm.encoder.zero_params();
        wm.dynamics.zero_params();
        wm.reward.zero_params();
        let z = wm.encode(&[1.0, 2.0, 3.0]).unwrap();
        assert!(z.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let z2 = wm.dynamics_step(&z, &[0.1]).unwrap();
        assert!(z2.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let (_, r) = wm.reward_predict(&z, &[0.1]).unwrap();
        assert!(r.abs() < 1e-12);
    }

    #[test]
    fn encode_matches_straight_line_softmax_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let wm = WorldModel::new(small_cfg(), &mut rng).unwrap();
        let s = [0.2, 0.4, -0.6];
        let raw = wm.encoder.infer(&s);
        let z = wm.encode(&s).unwrap();
        for g in 0..2 {
            let block = &raw[g * 4..g * 4 + 4];
            let denom: f64 = block.iter().map(|x| x.exp()).sum();
            for i in 0..4 {
                assert!((z[g * 4 + i] - block[i].exp() / denom).abs() < 1e-12);
            }
        }
        let (logits, r) = wm.reward_predict(&z, &[0.3]).unwrap();
        assert_eq!(r, wm.grid().decode(&logits));
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let wm = WorldModel::new(small_cfg(), &mut rng).unwrap();
        assert!(wm.encode(&[1.0]).is_err());
        assert!(wm.dynamics_step(&[0.0; 8], &[0.0, 0.0]).is_err());
        assert!(wm.reward_predict(&[0.0; 3], &[0.0]).is_err());
    }

    #[test]
    fn simnorm_backward_matches_finite_differences() {
        let x = [0.3, -0.2, 1.1, 0.0, 2.0, -1.0];
        let w = [0.5, -1.0, 0.25, 2.0, 0.1, -0.3];
        let y = simnorm(&x, 3);
        let g = simnorm_backward(&y, &w, 3);
        for i in 0..6 {
            let mut p = x;
            p[i] += 1e-6;
            let mut m = x;
            m[i] -= 1e-6;
            let f = |v: &[f64]| simnorm(v, 3).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let num = (f(&p) - f(&m)) / 2e-6;
            assert!((num - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn horizon_weights_are_rho_powers_over_h() {
        assert_eq!(horizon_weights(0.5, 3), vec![1.0 / 3.0, 0.5 / 3.0, 0.25 / 3.0]);
        assert_eq!(horizon_weights(0.5, 1), vec![1.0]);
    }
}
