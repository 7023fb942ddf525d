//! The learned sampling policy and its KL-regularized update.
//!
//! The policy head emits a tanh-bounded mean and a log-std squashed into
//! `[log_std_min, log_std_max]`. The objective per latent is
//!
//! ```text
//! lambda * KL(pi_s || pi_p) / max(1, S_KL) - Q(z, a~pi_s) / max(1, S_Q) - alpha * H(pi_s)
//! ```
//!
//! weighted by `rho^t / H` and averaged over the batch. `lambda = 0` is pure
//! value maximization; [`Lambda::Infinite`] switches to [`kl_only_loss`].

use rand::{Rng, RngCore};

use crate::dists::{clip_action, entropy_std_grad, kl_grads, kl_unchecked, standard_normal, DiagGaussian};
use crate::error::{check_len, Error, Result};
use crate::nnet::{column, row_cols, Activation, GradBundle, Mlp, MlpGrads, Tape};
use crate::value::Critic;
use crate::worldmodel::horizon_weights;

/// Anything that maps a latent to a diagonal Gaussian over actions.
pub trait ActionDistribution {
    fn action_dim(&self) -> usize;
    fn distribution(&self, z: &[f64]) -> DiagGaussian;

    /// One distribution per latent; defaults to [`ActionDistribution::distribution`].
    fn distribution_batch(&self, zs: &[Vec<f64>]) -> Vec<DiagGaussian> {
        zs.iter().map(|z| self.distribution(z)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub net: Mlp,
    pub log_std_min: f64,
    pub log_std_max: f64,
    action_dim: usize,
}

#[derive(Debug, Clone)]
pub struct PolicyTape {
    net: Tape,
    raw: Vec<f64>,
    dist: DiagGaussian,
}

impl PolicyTape {
    pub fn dist(&self) -> &DiagGaussian {
        &self.dist
    }
}

impl GaussianPolicy {
    pub fn new<R: Rng + ?Sized>(
        latent_dim: usize,
        action_dim: usize,
        mlp_dim: usize,
        activation: Activation,
        log_std_min: f64,
        log_std_max: f64,
        rng: &mut R,
    ) -> Self {
        assert!(log_std_min < log_std_max);
        let net = Mlp::new(&[latent_dim, mlp_dim, mlp_dim, 2 * action_dim], activation, Activation::Identity, rng);
        GaussianPolicy {
            net,
            log_std_min,
            log_std_max,
            action_dim,
        }
    }

    pub fn from_net(net: Mlp, log_std_min: f64, log_std_max: f64) -> Result<Self> {
        if !net.out_dim().is_multiple_of(2) {
            return Err(Error::Format("policy head must emit mean and log-std".into()));
        }
        Ok(GaussianPolicy {
            action_dim: net.out_dim() / 2,
            net,
            log_std_min,
            log_std_max,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.net.in_dim()
    }

    /// Std emitted by a zero-output head: `exp((log_std_min + log_std_max) / 2)`.
    pub fn midpoint_std(&self) -> f64 {
        (0.5 * (self.log_std_min + self.log_std_max)).exp()
    }

    fn head(&self, raw: &[f64]) -> DiagGaussian {
        let a = self.action_dim;
        let half = 0.5 * (self.log_std_max - self.log_std_min);
        let mean = raw[..a].iter().map(|u| u.tanh()).collect();
        let std = raw[a..]
            .iter()
            .map(|v| (self.log_std_min + half * (v.tanh() + 1.0)).exp())
            .collect();
        DiagGaussian::new(mean, std).expect("squashed head is always a valid gaussian")
    }

    pub fn forward(&self, z: &[f64]) -> Result<DiagGaussian> {
        check_len("policy latent", self.latent_dim(), z.len())?;
        Ok(self.head(&self.net.infer(z)))
    }

    pub fn forward_tape(&self, z: &[f64]) -> Result<PolicyTape> {
        let (raw, net) = self.net.forward(z)?;
        let dist = self.head(&raw);
        Ok(PolicyTape { net, raw, dist })
    }

    /// Backpropagates `d loss / d mean` and `d loss / d std` into `grads`.
    pub fn backward_into(&self, tape: &PolicyTape, d_mean: &[f64], d_std: &[f64], grads: &mut MlpGrads) -> Result<()> {
        let a = self.action_dim;
        let half = 0.5 * (self.log_std_max - self.log_std_min);
        let mut g = vec![0.0; 2 * a];
        for i in 0..a {
            let m = tape.dist.mean()[i];
            g[i] = d_mean[i] * (1.0 - m * m);
            let t = tape.raw[a + i].tanh();
            g[a + i] = d_std[i] * tape.dist.std()[i] * half * (1.0 - t * t);
        }
        self.net.backward_into(&tape.net, &g, grads)?;
        Ok(())
    }
}

impl ActionDistribution for GaussianPolicy {
    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn distribution(&self, z: &[f64]) -> DiagGaussian {
        self.head(&self.net.infer(z))
    }

    fn distribution_batch(&self, zs: &[Vec<f64>]) -> Vec<DiagGaussian> {
        let n = zs.len();
        let raw = self.net.infer_cols(&row_cols(zs), n);
        (0..n).map(|r| self.head(&column(&raw, n, r))).collect()
    }
}

/// The mean action, or a sample clipped into the action box.
pub fn act<P: ActionDistribution + ?Sized, R: Rng + ?Sized>(
    policy: &P,
    z: &[f64],
    deterministic: bool,
    rng: &mut R,
) -> Vec<f64> {
    let d = policy.distribution(z);
    if deterministic {
        d.mean().to_vec()
    } else {
        let mut a = d.sample_rng(rng);
        clip_action(&mut a);
        a
    }
}

/// KL weight; `Infinite` selects the pure distillation objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lambda {
    Finite(f64),
    Infinite,
}

impl Lambda {
    pub fn from_f64(v: f64) -> Result<Self> {
        if v == f64::INFINITY {
            Ok(Lambda::Infinite)
        } else if v.is_finite() && v >= 0.0 {
            Ok(Lambda::Finite(v))
        } else {
            Err(Error::Config {
                key: "lambda".into(),
                msg: format!("must be >= 0 or inf, got {v}"),
            })
        }
    }
}

/// Latent rollouts plus the planner Gaussians stored alongside each step.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyBatch {
    /// `[n_b][H][latent_dim]`.
    pub latents: Vec<Vec<Vec<f64>>>,
    /// `[n_b][H][action_dim]`.
    pub plan_mean: Vec<Vec<Vec<f64>>>,
    /// `[n_b][H][action_dim]`.
    pub plan_std: Vec<Vec<Vec<f64>>>,
}

impl PolicyBatch {
    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.latents.first().map_or(0, Vec::len)
    }

    pub fn stored(&self, b: usize, t: usize) -> Result<DiagGaussian> {
        DiagGaussian::new(self.plan_mean[b][t].clone(), self.plan_std[b][t].clone())
    }
}

/// Where the regularizing prior comes from.
#[derive(Debug, Clone, Copy)]
pub enum PriorSource<'a> {
    /// The learned adaptive prior, evaluated at each latent.
    Network(&'a GaussianPolicy),
    /// The planner Gaussians stored in replay.
    Replay,
}

impl PriorSource<'_> {
    pub fn resolve(&self, batch: &PolicyBatch, b: usize, t: usize) -> Result<DiagGaussian> {
        match self {
            PriorSource::Network(p) => p.forward(&batch.latents[b][t]),
            PriorSource::Replay => batch.stored(b, t),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyLossConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyLoss {
    pub loss: f64,
    pub kl_term: f64,
    pub q_term: f64,
    pub entropy_term: f64,
    /// Unscaled per-sample KL values, for the `S_KL` tracker.
    pub kl_values: Vec<f64>,
    /// Unscaled per-sample critic values, for the `S_Q` tracker.
    pub q_values: Vec<f64>,
    pub grads: GradBundle,
}

/// KL-regularized policy loss. `kl_scale` and `q_scale` are the already
/// floored `max(1, S)` divisors; the critic and prior are held fixed.
#[allow(clippy::too_many_arguments)]
pub fn policy_loss<C: Critic + ?Sized>(
    policy: &GaussianPolicy,
    batch: &PolicyBatch,
    prior: PriorSource<'_>,
    critic: &C,
    kl_scale: f64,
    q_scale: f64,
    cfg: &PolicyLossConfig,
    rng: &mut dyn RngCore,
) -> Result<PolicyLoss> {
    let n_b = batch.len();
    let h = batch.horizon();
    check_nonempty(n_b, h)?;
    let weights = horizon_weights(cfg.rho, h);
    let a_dim = policy.action_dim;
    let mut grads = MlpGrads::zeros_like(&policy.net);
    let (mut kl_term, mut q_term, mut ent_term) = (0.0, 0.0, 0.0);
    let mut kl_values = Vec::with_capacity(n_b * h);
    let mut q_values = Vec::with_capacity(n_b * h);
    let kl_coef = cfg.lambda / kl_scale;

    for b in 0..n_b {
        for t in 0..h {
            let z = &batch.latents[b][t];
            let w = weights[t] / n_b as f64;
            let tape = policy.forward_tape(z)?;
            let dist = tape.dist();
            let prior_d = prior.resolve(batch, b, t)?;
            let noise = standard_normal(rng, a_dim);
            let raw = dist.sample(&noise);
            let mut a = raw.clone();
            clip_action(&mut a);
            let (q, dq) = critic.value_and_action_grad(z, &a);
            let kl = kl_unchecked(dist, &prior_d);
            let kg = kl_grads(dist, &prior_d);
            let ent = dist.entropy();
            let dent = entropy_std_grad(dist);

            kl_term += w * kl;
            q_term += w * q;
            ent_term += w * ent;
            kl_values.push(kl);
            q_values.push(q);

            let mut d_mean = vec![0.0; a_dim];
            let mut d_std = vec![0.0; a_dim];
            for i in 0..a_dim {
                let qg = if raw[i] == a[i] { dq[i] / q_scale } else { 0.0 };
                d_mean[i] = w * (kl_coef * kg.p_mean[i] - qg);
                d_std[i] = w * (kl_coef * kg.p_std[i] - qg * noise[i] - cfg.alpha * dent[i]);
            }
            policy.backward_into(&tape, &d_mean, &d_std, &mut grads)?;
        }
    }
    let loss = kl_coef * kl_term - q_term / q_scale - cfg.alpha * ent_term;
    if !loss.is_finite() {
        return Err(Error::Numeric("policy loss".into()));
    }
    Ok(PolicyLoss {
        loss,
        kl_term,
        q_term,
        entropy_term: ent_term,
        kl_values,
        q_values,
        grads: GradBundle::new(vec![grads]),
    })
}

/// Pure distillation toward the prior: `rho`-weighted `KL(pi_s || pi_p) / max(1, S_KL)`.
pub fn kl_only_loss(
    policy: &GaussianPolicy,
    batch: &PolicyBatch,
    prior: PriorSource<'_>,
    kl_scale: f64,
    rho: f64,
) -> Result<PolicyLoss> {
    let n_b = batch.len();
    let h = batch.horizon();
    check_nonempty(n_b, h)?;
    let weights = horizon_weights(rho, h);
    let mut grads = MlpGrads::zeros_like(&policy.net);
    let mut kl_term = 0.0;
    let mut kl_values = Vec::with_capacity(n_b * h);
    for b in 0..n_b {
        for t in 0..h {
            let w = weights[t] / n_b as f64;
            let tape = policy.forward_tape(&batch.latents[b][t])?;
            let prior_d = prior.resolve(batch, b, t)?;
            let kl = kl_unchecked(tape.dist(), &prior_d);
            let kg = kl_grads(tape.dist(), &prior_d);
            kl_term += w * kl;
            kl_values.push(kl);
            let d_mean: Vec<f64> = kg.p_mean.iter().map(|g| w * g / kl_scale).collect();
            let d_std: Vec<f64> = kg.p_std.iter().map(|g| w * g / kl_scale).collect();
            policy.backward_into(&tape, &d_mean, &d_std, &mut grads)?;
        }
    }
    let loss = kl_term / kl_scale;
    if !loss.is_finite() {
        return Err(Error::Numeric("kl-only policy loss".into()));
    }
    Ok(PolicyLoss {
        loss,
        kl_term,
        q_term: 0.0,
        entropy_term: 0.0,
        kl_values,
        q_values: Vec::new(),
        grads: GradBundle::new(vec![grads]),
    })
}

/// Dispatches on `lambda`: finite weights use [`policy_loss`], infinite uses
/// [`kl_only_loss`] and never reads the critic.
#[allow(clippy::too_many_arguments)]
pub fn policy_objective<C: Critic + ?Sized>(
    policy: &GaussianPolicy,
    batch: &PolicyBatch,
    prior: PriorSource<'_>,
    critic: &C,
    lambda: Lambda,
    alpha: f64,
    rho: f64,
    kl_scale: f64,
    q_scale: f64,
    rng: &mut dyn RngCore,
) -> Result<PolicyLoss> {
    match lambda {
        Lambda::Finite(lambda) => {
            let cfg = PolicyLossConfig { lambda, alpha, rho };
            policy_loss(policy, batch, prior, critic, kl_scale, q_scale, &cfg, rng)
        }
        Lambda::Infinite => kl_only_loss(policy, batch, prior, kl_scale, rho),
    }
}

fn check_nonempty(n_b: usize, h: usize) -> Result<()> {
    if n_b == 0 || h == 0 {
        Err(Error::Shape {
            what: "policy batch",
            expected: 1,
            got: 0,
        })
    } else {
        Ok(())
    }
}
