//! MPPI over the latent model, seeded with trajectories from the sampling policy.
//!
//! Every trajectory draws its noise from its own ChaCha8 stream, keyed by the
//! plan seed, the iteration, and the trajectory index (see [`trajectory_rng`]),
//! so results do not depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dists::{clip_action, standard_normal};
use crate::error::{check_len, Error, Result};
use crate::nnet::{column, pair_cols};
use crate::policy::ActionDistribution;
use crate::value::{QEnsemble, Reduce};
use crate::worldmodel::{simnorm, WorldModel};

/// Deterministic latent transition and reward.
pub trait LatentModel {
    fn next(&self, z: &[f64], a: &[f64]) -> Vec<f64>;
    fn reward(&self, z: &[f64], a: &[f64]) -> f64;

    /// `(rewards, next latents)` for many pairs at once.
    fn step_batch(&self, zs: &[Vec<f64>], actions: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
        zs.iter().zip(actions).map(|(z, a)| (self.reward(z, a), self.next(z, a))).unzip()
    }
}

/// Terminal value used to bootstrap the H-step return.
pub trait ValueFn {
    fn value(&self, z: &[f64], a: &[f64]) -> f64;

    fn value_batch(&self, zs: &[Vec<f64>], actions: &[Vec<f64>]) -> Vec<f64> {
        zs.iter().zip(actions).map(|(z, a)| self.value(z, a)).collect()
    }
}

impl LatentModel for WorldModel {
    fn next(&self, z: &[f64], a: &[f64]) -> Vec<f64> {
        self.next_latent(z, a)
    }

    fn reward(&self, z: &[f64], a: &[f64]) -> f64 {
        self.reward_value(z, a)
    }

    fn step_batch(&self, zs: &[Vec<f64>], actions: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = zs.len();
        let x = pair_cols(zs, actions);
        let grid = self.grid();
        let logits = self.reward.infer_cols(&x, n);
        let rewards = (0..n).map(|r| grid.decode(&column(&logits, n, r))).collect();
        let raw = self.dynamics.infer_cols(&x, n);
        let group = self.config().simnorm_dim;
        let next = (0..n).map(|r| simnorm(&column(&raw, n, r), group)).collect();
        (rewards, next)
    }
}

impl ValueFn for QEnsemble {
    fn value(&self, z: &[f64], a: &[f64]) -> f64 {
        self.q_value(z, a, false, Reduce::Mean)
    }

    fn value_batch(&self, zs: &[Vec<f64>], actions: &[Vec<f64>]) -> Vec<f64> {
        let n = zs.len();
        let x = pair_cols(zs, actions);
        let grid = self.grid();
        let mut sum = vec![0.0; n];
        for head in self.heads() {
            let logits = head.infer_cols(&x, n);
            for (r, s) in sum.iter_mut().enumerate() {
                *s += grid.decode(&column(&logits, n, r));
            }
        }
        let k = self.num_heads() as f64;
        sum.into_iter().map(|s| s / k).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub horizon: usize,
    pub iterations: usize,
    pub population: usize,
    pub policy_samples: usize,
    pub elites: usize,
    pub temperature: f64,
    pub min_std: f64,
    pub max_std: f64,
    pub discount: f64,
    /// Execute the final mean instead of sampling around it.
    pub deterministic: bool,
    /// Reuse iteration 0's noise streams in every iteration.
    pub common_random_numbers: bool,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            horizon: 3,
            iterations: 8,
            population: 512,
            policy_samples: 24,
            elites: 64,
            temperature: 1.0,
            min_std: 0.05,
            max_std: 2.0,
            discount: 0.99,
            deterministic: false,
            common_random_numbers: false,
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::Config {
                key: format!("planner.{key}"),
                msg: msg.into(),
            })
        };
        if self.horizon == 0 {
            return bad("horizon", "must be >= 1");
        }
        if self.iterations == 0 {
            return bad("iterations", "must be >= 1");
        }
        if self.policy_samples >= self.population {
            return bad("policy_samples", "must be smaller than population");
        }
        if self.elites == 0 || self.elites > self.population {
            return bad("elites", "must be in 1..=population");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature", "must be > 0");
        }
        if !(self.min_std > 0.0 && self.min_std <= self.max_std) {
            return bad("min_std", "need 0 < min_std <= max_std");
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return bad("discount", "must be in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    pub action: Vec<f64>,
    /// `[H][action_dim]`.
    pub mean: Vec<Vec<f64>>,
    /// `[H][action_dim]`, within `[min_std, max_std]`.
    pub std: Vec<Vec<f64>>,
    /// Best elite score of each iteration.
    pub best_scores: Vec<f64>,
    /// Mean score over the final iteration's elites.
    pub elite_mean: f64,
    /// Every trajectory was disqualified; the action is the policy mean.
    pub fallback: bool,
}

/// Noise stream for trajectory `index` of `iteration`. The final executed
/// action uses `iteration = J`, `index = 0`.
pub fn trajectory_rng(seed: u64, iteration: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((iteration << 32) | index);
    rng
}

/// `sum_t gamma^t r(z_t, a_t) + gamma^H Q(z_H, a_H)` for `H + 1` actions.
/// Non-finite results score `-inf`.
pub fn hstep_return<M: LatentModel + ?Sized, V: ValueFn + ?Sized>(
    z0: &[f64],
    actions: &[Vec<f64>],
    model: &M,
    value: &V,
    discount: f64,
) -> f64 {
    let h = actions.len() - 1;
    let mut z = z0.to_vec();
    let mut ret = 0.0;
    let mut g = 1.0;
    for a in &actions[..h] {
        ret += g * model.reward(&z, a);
        z = model.next(&z, a);
        g *= discount;
    }
    ret += g * value.value(&z, &actions[h]);
    if ret.is_finite() {
        ret
    } else {
        f64::NEG_INFINITY
    }
}

/// Softmax of `(score - max) / temperature`.
pub fn mppi_weights(scores: &[f64], temperature: f64) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = scores.iter().map(|s| ((s - max) / temperature).exp()).collect();
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= sum);
    w
}

/// Weighted refit around the pre-update mean. `elites[i][t]` are actions;
/// returns the new mean and the clamped weighted RMS deviation.
pub fn mppi_refit(
    elites: &[&[Vec<f64>]],
    weights: &[f64],
    mean: &[Vec<f64>],
    min_std: f64,
    max_std: f64,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let wsum: f64 = weights.iter().sum();
    let mut new_mean = mean.to_vec();
    let mut new_std = mean.to_vec();
    for (t, mt) in mean.iter().enumerate() {
        for (d, m) in mt.iter().enumerate() {
            let mut shift = 0.0;
            let mut sq = 0.0;
            for (e, w) in elites.iter().zip(weights) {
                let dev = e[t][d] - m;
                shift += w * dev;
                sq += w * dev * dev;
            }
            new_mean[t][d] = m + shift;
            new_std[t][d] = (sq / wsum).sqrt().clamp(min_std, max_std);
        }
    }
    (new_mean, new_std)
}

/// Shifts a plan mean one step left and zero-fills the last step.
pub fn shift_warm_start(mean: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = mean.iter().skip(1).cloned().collect();
    if let Some(last) = mean.last() {
        out.push(vec![0.0; last.len()]);
    }
    out
}

/// Indices of the `k` best scores, ties broken by lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[allow(clippy::too_many_arguments)]
/// Samples and scores one iteration's population. Policy trajectories come
/// first; each trajectory consumes only its own noise stream, in time order.
fn rollout_population<P, M, V>(
    z0: &[f64],
    cfg: &PlanConfig,
    mean: &[Vec<f64>],
    std: &[Vec<f64>],
    policy: &P,
    model: &M,
    value: &V,
    seed: u64,
    stream_iter: u64,
) -> (Vec<Vec<Vec<f64>>>, Vec<f64>)
where
    P: ActionDistribution + ?Sized,
    M: LatentModel + ?Sized,
    V: ValueFn + ?Sized,
{
    let n = cfg.population;
    let n_pi = cfg.policy_samples;
    let h = cfg.horizon;
    let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|i| trajectory_rng(seed, stream_iter, i as u64)).collect();
    let mut trajs: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(h); n];
    for (traj, rng) in trajs.iter_mut().zip(rngs.iter_mut()).skip(n_pi) {
        for (m, s) in mean.iter().zip(std) {
            let eps = standard_normal(rng, m.len());
            let mut a: Vec<f64> = m.iter().zip(s).zip(&eps).map(|((m, s), e)| m + s * e).collect();
            clip_action(&mut a);
            traj.push(a);
        }
    }
    let mut zs = vec![z0.to_vec(); n];
    let mut rets = vec![0.0; n];
    let mut g = 1.0;
    for t in 0..h {
        if n_pi > 0 {
            let dists = policy.distribution_batch(&zs[..n_pi]);
            for ((d, traj), rng) in dists.iter().zip(&mut trajs).zip(&mut rngs) {
                let mut a = d.sample_rng(rng);
                clip_action(&mut a);
                traj.push(a);
            }
        }
        let acts: Vec<Vec<f64>> = trajs.iter().map(|tr| tr[t].clone()).collect();
        let (r, next) = model.step_batch(&zs, &acts);
        for (ret, ri) in rets.iter_mut().zip(&r) {
            *ret += g * ri;
        }
        zs = next;
        g *= cfg.discount;
    }
    let dists = policy.distribution_batch(&zs);
    let a_h: Vec<Vec<f64>> = dists
        .iter()
        .zip(&mut rngs)
        .enumerate()
        .map(|(i, (d, rng))| {
            if i < n_pi {
                let mut a = d.sample_rng(rng);
                clip_action(&mut a);
                a
            } else {
                d.mean().to_vec()
            }
        })
        .collect();
    let v = value.value_batch(&zs, &a_h);
    for (ret, vi) in rets.iter_mut().zip(&v) {
        *ret += g * vi;
        if !ret.is_finite() {
            *ret = f64::NEG_INFINITY;
        }
    }
    (trajs, rets)
}

/// Runs MPPI from `z0`. `warm_start` is the initial mean (already shifted);
/// `None` starts from zeros. The std always starts at `max_std`.
pub fn plan<P, M, V>(
    z0: &[f64],
    warm_start: Option<&[Vec<f64>]>,
    cfg: &PlanConfig,
    policy: &P,
    model: &M,
    value: &V,
    seed: u64,
) -> Result<PlanResult>
where
    P: ActionDistribution + ?Sized,
    M: LatentModel + ?Sized,
    V: ValueFn + ?Sized,
{
    cfg.validate()?;
    let a_dim = policy.action_dim();
    let h = cfg.horizon;
    let mut mean = match warm_start {
        Some(w) => {
            check_len("warm start horizon", h, w.len())?;
            for row in w {
                check_len("warm start action", a_dim, row.len())?;
            }
            w.to_vec()
        }
        None => vec![vec![0.0; a_dim]; h],
    };
    let mut std = vec![vec![cfg.max_std; a_dim]; h];
    let mut best_scores = Vec::with_capacity(cfg.iterations);
    let mut elite_mean = f64::NEG_INFINITY;

    for j in 0..cfg.iterations {
        let stream_iter = if cfg.common_random_numbers { 0 } else { j as u64 };
        let (trajs, scores) = rollout_population(z0, cfg, &mean, &std, policy, model, value, seed, stream_iter);
        let elite_idx = top_k(&scores, cfg.elites);
        let elite_scores: Vec<f64> = elite_idx.iter().map(|&i| scores[i]).collect();
        if elite_scores[0] == f64::NEG_INFINITY {
            return Ok(PlanResult {
                action: policy.distribution(z0).mean().to_vec(),
                mean,
                std: vec![vec![cfg.max_std; a_dim]; h],
                best_scores,
                elite_mean: f64::NEG_INFINITY,
                fallback: true,
            });
        }
        best_scores.push(elite_scores[0]);
        let finite: Vec<f64> = elite_scores.iter().copied().filter(|s| s.is_finite()).collect();
        elite_mean = finite.iter().sum::<f64>() / finite.len() as f64;
        let weights = mppi_weights(&elite_scores, cfg.temperature);
        let elites: Vec<&[Vec<f64>]> = elite_idx.iter().map(|&i| trajs[i].as_slice()).collect();
        (mean, std) = mppi_refit(&elites, &weights, &mean, cfg.min_std, cfg.max_std);
    }

    let action = if cfg.deterministic {
        let mut a = mean[0].clone();
        clip_action(&mut a);
        a
    } else {
        let mut rng = trajectory_rng(seed, cfg.iterations as u64, 0);
        let eps = standard_normal(&mut rng, a_dim);
        let mut a: Vec<f64> = mean[0].iter().zip(&std[0]).zip(&eps).map(|((m, s), e)| m + s * e).collect();
        clip_action(&mut a);
        a
    };
    Ok(PlanResult {
        action,
        mean,
        std,
        best_scores,
        elite_mean,
        fallback: false,
    })
}
