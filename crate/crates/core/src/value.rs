//! Action-value ensembles with two-hot heads, TD targets, and adaptive scales.
//!
//! Two ensembles share this code: the bootstrap critic scored by the planner
//! and the KL-regularized critic read by the policy update. They differ only
//! in their TD targets ([`td_target_bootstrap`] vs [`td_target_klreg`]).

use rand::{Rng, RngCore};

use crate::dists::{clip_action, kl_unchecked, DiagGaussian};
use crate::error::{check_len, Error, Result};
use crate::nnet::{Activation, GradBundle, Mlp, MlpGrads, ParamGroup};
use crate::policy::ActionDistribution;
use crate::worldmodel::{concat, horizon_weights, zero_last_layer, TwoHot};

/// Value of `(z, a)` with its gradient with respect to the action.
pub trait Critic {
    fn value_and_action_grad(&self, z: &[f64], a: &[f64]) -> (f64, Vec<f64>);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    /// Minimum over the two listed heads.
    MinOfPair(usize, usize),
    Mean,
}

/// Two distinct heads drawn uniformly.
pub fn subsample_pair<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Reduce {
    debug_assert!(n >= 2);
    let i = rng.random_range(0..n);
    let mut j = rng.random_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    Reduce::MinOfPair(i, j)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QEnsemble {
    heads: Vec<Mlp>,
    targets: Vec<Mlp>,
    grid: TwoHot,
    latent_dim: usize,
    action_dim: usize,
}

impl QEnsemble {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        latent_dim: usize,
        action_dim: usize,
        mlp_dim: usize,
        num_heads: usize,
        grid: TwoHot,
        dropout: f64,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if num_heads < 2 {
            return Err(Error::Config {
                key: "model.num_q".into(),
                msg: "an ensemble needs at least two heads".into(),
            });
        }
        let dims = [latent_dim + action_dim, mlp_dim, mlp_dim, grid.num_bins];
        let heads: Vec<Mlp> = (0..num_heads)
            .map(|_| {
                let mut h = Mlp::new(&dims, activation, Activation::Identity, rng);
                zero_last_layer(&mut h);
                if dropout > 0.0 {
                    h.with_dropout(0, dropout)
                } else {
                    h
                }
            })
            .collect();
        Ok(QEnsemble {
            targets: heads.clone(),
            heads,
            grid,
            latent_dim,
            action_dim,
        })
    }

    /// Assembles an ensemble from explicit heads; targets start as copies.
    pub fn from_heads(heads: Vec<Mlp>, grid: TwoHot, latent_dim: usize, action_dim: usize) -> Result<Self> {
        if heads.len() < 2 {
            return Err(Error::Config {
                key: "model.num_q".into(),
                msg: "an ensemble needs at least two heads".into(),
            });
        }
        for h in &heads {
            check_len("critic head input", latent_dim + action_dim, h.in_dim())?;
            check_len("critic head bins", grid.num_bins, h.out_dim())?;
        }
        Ok(QEnsemble {
            targets: heads.clone(),
            heads,
            grid,
            latent_dim,
            action_dim,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn grid(&self) -> TwoHot {
        self.grid
    }

    pub fn heads(&self) -> &[Mlp] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [Mlp] {
        &mut self.heads
    }

    pub fn targets(&self) -> &[Mlp] {
        &self.targets
    }

    pub fn targets_mut(&mut self) -> &mut [Mlp] {
        &mut self.targets
    }

    pub fn heads_and_targets_mut(&mut self) -> (&mut [Mlp], &mut [Mlp]) {
        (&mut self.heads, &mut self.targets)
    }

    pub fn head_value(&self, k: usize, z: &[f64], a: &[f64], use_target: bool) -> f64 {
        let net = if use_target { &self.targets[k] } else { &self.heads[k] };
        self.grid.decode(&net.infer(&concat(z, a)))
    }

    pub fn q_value(&self, z: &[f64], a: &[f64], use_target: bool, reduce: Reduce) -> f64 {
        debug_assert_eq!(z.len(), self.latent_dim);
        debug_assert_eq!(a.len(), self.action_dim);
        match reduce {
            Reduce::MinOfPair(i, j) => self.head_value(i, z, a, use_target).min(self.head_value(j, z, a, use_target)),
            Reduce::Mean => {
                let n = self.heads.len();
                (0..n).map(|k| self.head_value(k, z, a, use_target)).sum::<f64>() / n as f64
            }
        }
    }

    /// `target <- tau * online + (1 - tau) * target` for every head.
    pub fn polyak_update(&mut self, tau: f64) {
        debug_assert!(tau > 0.0 && tau <= 1.0);
        for (t, h) in self.targets.iter_mut().zip(&self.heads) {
            t.soft_update_from(h, tau);
        }
    }

    /// Train-mode cross-entropy of every head against `target_w`.
    ///
    /// Head gradients are accumulated into `grads` scaled by
    /// `weight / num_heads`; returns the head-mean CE and the latent gradient.
    pub(crate) fn ce_backward(
        &self,
        z: &[f64],
        a: &[f64],
        target_w: &[f64],
        weight: f64,
        rng: &mut dyn RngCore,
        grads: &mut [MlpGrads],
    ) -> Result<(f64, Vec<f64>)> {
        let input = concat(z, a);
        let n = self.heads.len() as f64;
        let mut dz = vec![0.0; self.latent_dim];
        let mut ce_sum = 0.0;
        for (head, g) in self.heads.iter().zip(grads.iter_mut()) {
            let (logits, tape) = head.forward_train(&input, rng)?;
            let (ce, mut dl) = TwoHot::cross_entropy(&logits, target_w);
            ce_sum += ce;
            dl.iter_mut().for_each(|v| *v *= weight / n);
            let din = head.backward_into(&tape, &dl, g)?;
            dz.iter_mut().zip(&din[..self.latent_dim]).for_each(|(x, y)| *x += y);
        }
        Ok((ce_sum / n, dz))
    }
}

impl ParamGroup for QEnsemble {
    fn nets(&self) -> Vec<&Mlp> {
        self.heads.iter().collect()
    }

    fn nets_mut(&mut self) -> Vec<&mut Mlp> {
        self.heads.iter_mut().collect()
    }
}

impl Critic for QEnsemble {
    /// Mean over online heads, evaluation mode.
    fn value_and_action_grad(&self, z: &[f64], a: &[f64]) -> (f64, Vec<f64>) {
        let input = concat(z, a);
        let n = self.heads.len() as f64;
        let mut v = 0.0;
        let mut da = vec![0.0; self.action_dim];
        for head in &self.heads {
            let (logits, tape) = head.forward(&input).expect("critic input validated by caller");
            let (q, dl) = self.grid.decode_with_grad(&logits);
            v += q;
            let din = head.input_grad(&tape, &dl).expect("tape matches head");
            da.iter_mut().zip(&din[self.latent_dim..]).for_each(|(x, y)| *x += y / n);
        }
        (v / n, da)
    }
}

fn sample_action<P: ActionDistribution + ?Sized>(dist: &DiagGaussian, _p: &P, rng: &mut dyn RngCore) -> Vec<f64> {
    let mut a = dist.sample_rng(rng);
    clip_action(&mut a);
    a
}

/// `r + gamma * Q_target(z', a~)`, `a~ ~ pi_s(z')`, min over two random target heads.
pub fn td_target_bootstrap<P: ActionDistribution + ?Sized>(
    reward: f64,
    z_next: &[f64],
    policy: &P,
    target: &QEnsemble,
    gamma: f64,
    rng: &mut dyn RngCore,
) -> f64 {
    let dist = policy.distribution(z_next);
    let a = sample_action(&dist, policy, rng);
    let pair = subsample_pair(rng, target.num_heads());
    reward + gamma * target.q_value(z_next, &a, true, pair)
}

/// KL-regularized target:
/// `r + gamma * (Q~_target(z', a~) - lambda * KL(pi_s(z') || pi_p(z')) / kl_scale)`.
#[allow(clippy::too_many_arguments)]
pub fn td_target_klreg<P: ActionDistribution + ?Sized>(
    reward: f64,
    z_next: &[f64],
    policy: &P,
    prior: &DiagGaussian,
    target: &QEnsemble,
    lambda: f64,
    kl_scale: f64,
    gamma: f64,
    rng: &mut dyn RngCore,
) -> f64 {
    let dist = policy.distribution(z_next);
    let a = sample_action(&dist, policy, rng);
    let pair = subsample_pair(rng, target.num_heads());
    let q = target.q_value(z_next, &a, true, pair);
    reward + gamma * (q - lambda * kl_unchecked(&dist, prior) / kl_scale)
}

/// Latent rollouts with stored actions and precomputed TD targets.
#[derive(Debug, Clone, PartialEq)]
pub struct QBatch {
    /// `[n_b][H][latent_dim]`.
    pub latents: Vec<Vec<Vec<f64>>>,
    /// `[n_b][H][action_dim]`.
    pub actions: Vec<Vec<Vec<f64>>>,
    /// `[n_b][H]`.
    pub targets: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QLoss {
    pub loss: f64,
    pub grads: GradBundle,
}

/// `rho`-weighted two-hot cross-entropy of every head against its TD target,
/// averaged over heads and batch.
pub fn q_loss(e: &QEnsemble, batch: &QBatch, rho: f64, rng: &mut dyn RngCore) -> Result<QLoss> {
    let n_b = batch.latents.len();
    let h = batch.latents.first().map_or(0, Vec::len);
    if n_b == 0 || h == 0 {
        return Err(Error::Shape {
            what: "critic batch",
            expected: 1,
            got: 0,
        });
    }
    let weights = horizon_weights(rho, h);
    let mut grads: Vec<MlpGrads> = e.heads.iter().map(MlpGrads::zeros_like).collect();
    let mut loss = 0.0;
    for b in 0..n_b {
        for t in 0..h {
            let w = weights[t] / n_b as f64;
            let target_w = e.grid.encode(batch.targets[b][t]);
            let (ce, _) = e.ce_backward(&batch.latents[b][t], &batch.actions[b][t], &target_w, w, rng, &mut grads)?;
            loss += w * ce;
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numeric("critic loss".into()));
    }
    Ok(QLoss {
        loss,
        grads: GradBundle::new(grads),
    })
}

/// Same loss as [`q_loss`]; the batch carries KL-regularized targets.
pub fn klreg_q_loss(e: &QEnsemble, batch: &QBatch, rho: f64, rng: &mut dyn RngCore) -> Result<QLoss> {
    q_loss(e, batch, rho, rng)
}

/// Linear-interpolation percentile of sorted data, `p` in `[0, 100]`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// EMA of the 5th-95th percentile spread; divisors are `max(1, S)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleTracker {
    pub value: f64,
    pub rate: f64,
}

impl ScaleTracker {
    pub fn new(rate: f64) -> Self {
        debug_assert!(rate > 0.0 && rate <= 1.0);
        ScaleTracker { value: 1.0, rate }
    }

    /// Folds a batch in; returns the batch statistic. Batches with fewer
    /// than two finite values are ignored.
    pub fn update(&mut self, observations: &[f64]) -> f64 {
        let mut v: Vec<f64> = observations.iter().copied().filter(|x| x.is_finite()).collect();
        if v.len() < 2 {
            return 0.0;
        }
        v.sort_by(f64::total_cmp);
        let stat = percentile(&v, 95.0) - percentile(&v, 5.0);
        self.value = (1.0 - self.rate) * self.value + self.rate * stat;
        stat
    }

    pub fn scale(&self) -> f64 {
        self.value.max(1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ensemble(seed: u64, heads: usize) -> QEnsemble {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        QEnsemble::new(4, 1, 8, heads, TwoHot::new(11, -3.0, 3.0), 0.0, Activation::Mish, &mut rng).unwrap()
    }

    fn randomize(e: &mut QEnsemble, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for h in e.heads_mut() {
            for k in 0..h.param_count() {
                *h.param_mut(k) = rng.random_range(-0.5..0.5);
            }
        }
        let heads = e.heads.clone();
        e.targets = heads;
    }

    struct Fixed(DiagGaussian);
    impl ActionDistribution for Fixed {
        fn action_dim(&self) -> usize {
            self.0.dim()
        }
        fn distribution(&self, _z: &[f64]) -> DiagGaussian {
            self.0.clone()
        }
    }

    #[test]
    fn zero_heads_value_zero() {
        let e = ensemble(0, 3);
        let z = [0.25; 4];
        assert_eq!(e.q_value(&z, &[0.3], false, Reduce::Mean), 0.0);
        assert_eq!(e.q_value(&z, &[0.3], true, Reduce::MinOfPair(0, 2)), 0.0);
    }

    #[test]
    fn identical_heads_reduce_identically() {
        let mut e = ensemble(0, 3);
        randomize(&mut e, 1);
        let h0 = e.heads[0].clone();
        for h in e.heads_mut() {
            *h = h0.clone();
        }
        let z = [0.1, 0.2, 0.3, 0.4];
        let single = e.head_value(0, &z, &[0.5], false);
        let mean = e.q_value(&z, &[0.5], false, Reduce::Mean);
        assert!((mean - single).abs() < 1e-12);
        assert_eq!(e.q_value(&z, &[0.5], false, Reduce::MinOfPair(1, 2)), single);
    }

    #[test]
    fn reduce_matches_straight_line_oracle() {
        let mut e = ensemble(0, 5);
        randomize(&mut e, 9);
        let z = [0.1, 0.2, 0.3, 0.4];
        let a = [-0.2];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pair = subsample_pair(&mut rng, 5);
        let Reduce::MinOfPair(i, j) = pair else { panic!() };
        assert_ne!(i, j);
        let input = [0.1, 0.2, 0.3, 0.4, -0.2];
        let decode = |k: usize| {
            let logits = e.heads[k].infer(&input);
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = ex.iter().sum();
            let y: f64 = ex.iter().enumerate().map(|(b, p)| p / s * (-3.0 + 0.6 * b as f64)).sum();
            y.signum() * (y.abs().exp() - 1.0)
        };
        let oracle_min = decode(i).min(decode(j));
        assert!((e.q_value(&z, &a, false, pair) - oracle_min).abs() <= 1e-12);
        let oracle_mean = (0..5).map(decode).sum::<f64>() / 5.0;
        assert!((e.q_value(&z, &a, false, Reduce::Mean) - oracle_mean).abs() <= 1e-12);
    }

    #[test]
    fn subsample_pair_is_uniform_over_distinct_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = [[0u32; 4]; 4];
        for _ in 0..120_000 {
            let Reduce::MinOfPair(i, j) = subsample_pair(&mut rng, 4) else { panic!() };
            assert_ne!(i, j);
            counts[i][j] += 1;
        }
        for (i, row) in counts.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                if i != j {
                    assert!((*c as f64 - 10_000.0).abs() < 5.0 * 100.0);
                }
            }
        }
    }

    #[test]
    fn bootstrap_target_cases() {
        let mut e = ensemble(0, 2);
        let pol = Fixed(DiagGaussian::new(vec![0.2], vec![0.1]).unwrap());
        let z = [0.25; 4];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(td_target_bootstrap(1.5, &z, &pol, &e, 0.0, &mut rng), 1.5);
        assert_eq!(td_target_bootstrap(0.0, &z, &pol, &e, 0.99, &mut rng), 0.0);

        randomize(&mut e, 3);
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let got = td_target_bootstrap(1.0, &z, &pol, &e, 0.9, &mut r1);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let mut a = pol.0.sample_rng(&mut r2);
        clip_action(&mut a);
        let pair = subsample_pair(&mut r2, 2);
        let q = e.q_value(&z, &a, true, pair);
        assert!((got - (1.0 + 0.9 * q)).abs() <= 1e-12);
    }

    #[test]
    fn klreg_target_reduces_to_bootstrap() {
        let mut e = ensemble(0, 3);
        randomize(&mut e, 4);
        let pol = Fixed(DiagGaussian::new(vec![0.1], vec![0.3]).unwrap());
        let prior = DiagGaussian::new(vec![-0.4], vec![0.6]).unwrap();
        let z = [0.2, 0.1, 0.3, 0.4];
        for seed in 0..20 {
            let mut r1 = ChaCha8Rng::seed_from_u64(seed);
            let mut r2 = ChaCha8Rng::seed_from_u64(seed);
            let a = td_target_bootstrap(0.7, &z, &pol, &e, 0.99, &mut r1);
            let b = td_target_klreg(0.7, &z, &pol, &prior, &e, 0.0, 1.0, 0.99, &mut r2);
            assert_eq!(a.to_bits(), b.to_bits());
            let mut r3 = ChaCha8Rng::seed_from_u64(seed);
            let c = td_target_klreg(0.7, &z, &pol, &pol.0, &e, 5.0, 1.0, 0.99, &mut r3);
            assert_eq!(a, c);
        }
    }

    #[test]
    fn klreg_target_scalar_case() {
        // Q-bar = 2 from heads whose logits put all mass on symlog(2).
        let grid = TwoHot::new(101, -10.0, 10.0);
        let w = grid.encode(2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut head = Mlp::new(&[5, 4, 101], Activation::Mish, Activation::Identity, &mut rng);
        head.zero_params();
        let last = head.layers_mut().last_mut().unwrap();
        for (b, wk) in last.bias.iter_mut().zip(&w) {
            *b = (wk + 1e-300).ln();
        }
        let e = QEnsemble::from_heads(vec![head.clone(), head], grid, 4, 1).unwrap();
        let pol = Fixed(DiagGaussian::new(vec![0.0], vec![1.0]).unwrap());
        let prior = DiagGaussian::new(vec![1.0], vec![1.0]).unwrap();
        let t = td_target_klreg(1.0, &[0.25; 4], &pol, &prior, &e, 1.0, 1.0, 0.99, &mut rng);
        assert!((t - 2.485).abs() < 1e-9);
    }

    fn q_batch(seed: u64, n_b: usize, h: usize) -> QBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut latent = || -> Vec<f64> {
            let v: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
            let s: f64 = v.iter().sum();
            v.iter().map(|x| x / s).collect()
        };
        let latents = (0..n_b).map(|_| (0..h).map(|_| latent()).collect()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        QBatch {
            latents,
            actions: (0..n_b).map(|_| (0..h).map(|_| vec![rng.random_range(-1.0..1.0)]).collect()).collect(),
            targets: (0..n_b).map(|_| (0..h).map(|_| rng.random_range(-5.0..5.0)).collect()).collect(),
        }
    }

    #[test]
    fn q_loss_at_optimum_has_zero_gradient() {
        let grid = TwoHot::new(11, -3.0, 3.0);
        let target = 1.7;
        let w = grid.encode(target);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut head = Mlp::new(&[5, 4, 11], Activation::Mish, Activation::Identity, &mut rng);
        head.zero_params();
        for (b, wk) in head.layers_mut()[1].bias.iter_mut().zip(&w) {
            *b = (wk + 1e-300).ln();
        }
        let e = QEnsemble::from_heads(vec![head.clone(), head], grid, 4, 1).unwrap();
        let batch = QBatch {
            latents: vec![vec![vec![0.25; 4]]],
            actions: vec![vec![vec![0.1]]],
            targets: vec![vec![target]],
        };
        let out = q_loss(&e, &batch, 0.5, &mut rng).unwrap();
        let entropy: f64 = -w.iter().filter(|x| **x > 0.0).map(|x| x * x.ln()).sum::<f64>();
        assert!((out.loss - entropy).abs() < 1e-12);
        assert!(out.grads.norm() < 1e-12);
    }

    #[test]
    fn q_loss_horizon_one_is_single_ce() {
        let mut e = ensemble(0, 2);
        randomize(&mut e, 2);
        let batch = q_batch(3, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = q_loss(&e, &batch, 0.5, &mut rng).unwrap();
        let input = concat(&batch.latents[0][0], &batch.actions[0][0]);
        let tw = e.grid.encode(batch.targets[0][0]);
        let ce = (0..2)
            .map(|k| TwoHot::cross_entropy(&e.heads[k].infer(&input), &tw).0)
            .sum::<f64>()
            / 2.0;
        assert!((out.loss - ce).abs() < 1e-12);
    }

    #[test]
    fn q_loss_gradient_matches_finite_differences() {
        let mut e = ensemble(0, 2);
        randomize(&mut e, 5);
        let batch = q_batch(7, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = q_loss(&e, &batch, 0.5, &mut rng).unwrap();
        for k in 0..2 {
            for p in (0..e.heads[k].param_count()).step_by(3) {
                let orig = *e.heads[k].param_mut(p);
                *e.heads[k].param_mut(p) = orig + 1e-5;
                let lp = q_loss(&e, &batch, 0.5, &mut rng).unwrap().loss;
                *e.heads[k].param_mut(p) = orig - 1e-5;
                let lm = q_loss(&e, &batch, 0.5, &mut rng).unwrap().loss;
                *e.heads[k].param_mut(p) = orig;
                let num = (lp - lm) / 2e-5;
                let ana = out.grads.nets()[k].param(p);
                assert!((num - ana).abs() / num.abs().max(ana.abs()).max(1e-6) < 1e-4);
            }
        }
    }

    #[test]
    fn target_params_do_not_enter_online_gradients() {
        let mut e = ensemble(0, 2);
        randomize(&mut e, 5);
        let batch = q_batch(7, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let before = q_loss(&e, &batch, 0.5, &mut rng).unwrap();
        for t in e.targets_mut() {
            *t.param_mut(0) += 1.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let after = q_loss(&e, &batch, 0.5, &mut rng).unwrap();
        assert_eq!(before.grads, after.grads);

        // Targets built from perturbed target heads change the loss but still
        // contribute nothing to gradients beyond the new target values.
        let pol = Fixed(DiagGaussian::new(vec![0.0], vec![0.3]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b2 = batch.clone();
        for (row, lat) in b2.targets.iter_mut().zip(&batch.latents) {
            for (t, z) in row.iter_mut().zip(lat) {
                *t = td_target_bootstrap(*t, z, &pol, &e, 0.9, &mut rng);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l2 = q_loss(&e, &b2, 0.5, &mut rng).unwrap();
        assert_ne!(l2.loss, after.loss);
    }

    #[test]
    fn polyak_cases() {
        let mut e = ensemble(0, 2);
        randomize(&mut e, 1);
        for t in e.targets_mut() {
            t.zero_params();
        }
        let mut full = e.clone();
        full.polyak_update(1.0);
        assert_eq!(full.targets, full.heads);

        let mut same = e.clone();
        same.targets = same.heads.clone();
        let before = same.targets.clone();
        same.polyak_update(0.3);
        assert_eq!(same.targets, before);

        let mut s = e.clone();
        *s.heads[0].param_mut(0) = 1.0;
        s.polyak_update(0.01);
        assert!((s.targets[0].params().next().unwrap() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn polyak_is_a_contraction() {
        let mut e = ensemble(0, 2);
        randomize(&mut e, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for t in e.targets_mut() {
            for k in 0..t.param_count() {
                *t.param_mut(k) = rng.random_range(-1.0..1.0);
            }
        }
        let dist = |e: &QEnsemble| {
            e.targets
                .iter()
                .zip(&e.heads)
                .flat_map(|(t, h)| t.params().zip(h.params()).map(|(a, b)| (a - b) * (a - b)))
                .sum::<f64>()
                .sqrt()
        };
        let d0 = dist(&e);
        e.polyak_update(0.01);
        assert!((dist(&e) - 0.99 * d0).abs() < 1e-12 * d0.max(1.0));
    }

    #[test]
    fn percentile_and_scale() {
        let grid: Vec<f64> = (0..=100).map(f64::from).collect();
        assert!((percentile(&grid, 95.0) - percentile(&grid, 5.0) - 90.0).abs() < 1e-12);
        let mut s = ScaleTracker::new(1.0);
        assert_eq!(s.update(&grid), 90.0);
        assert_eq!(s.value, 90.0);
        assert_eq!(s.scale(), 90.0);

        let mut c = ScaleTracker::new(0.01);
        for _ in 0..1000 {
            c.update(&[3.0; 10]);
        }
        assert!(c.value < 1e-3);
        assert_eq!(c.scale(), 1.0);
    }

    proptest::proptest! {
        #[test]
        fn scale_floor_holds(obs in proptest::collection::vec(-1e3f64..1e3, 2..40), rate in 0.001f64..1.0) {
            let mut s = ScaleTracker::new(rate);
            s.update(&obs);
            proptest::prop_assert!(s.scale() >= 1.0);
            proptest::prop_assert!(s.value.is_finite() && s.value >= 0.0);
        }
    }
}
