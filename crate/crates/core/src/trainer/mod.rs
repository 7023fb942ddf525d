//! The plan / distill / regularize control loop with seeding, checkpoints,
//! metrics and evaluation.

pub mod checkpoint;
pub mod config;
pub mod metrics;

use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dists::DiagGaussian;
use crate::envs::{Env, EnvKind};
use crate::error::{Error, Result};
use crate::nnet::{GradBundle, Mlp, Optimizer, ParamGroup};
use crate::planner::{plan, shift_warm_start, PlanConfig, PlanResult};
use crate::policy::{act, policy_objective, GaussianPolicy, Lambda, PolicyBatch, PriorSource};
use crate::prior::{prior_loss, PriorMode};
use crate::replay::{lazy_reanalyze, ReplayBuffer, Slice, TransitionRecord};
use crate::value::{q_loss, td_target_bootstrap, td_target_klreg, QBatch, QEnsemble, ScaleTracker};
use crate::worldmodel::{world_model_loss, ModelAndCritic, ModelBatch, ModelLoss, ModelLossCoefs, WorldModel};

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use metrics::{MetricsRow, MetricsSink, RowKind};

/// Every learned function of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub model: WorldModel,
    /// Bootstrap critic used inside planning.
    pub critic: QEnsemble,
    /// KL-regularized critic used by the policy update.
    pub klq: QEnsemble,
    pub prior: GaussianPolicy,
    pub policy: GaussianPolicy,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(cfg: &TrainConfig, rng: &mut R) -> Result<Self> {
        let wm_cfg = cfg.world_model();
        let m = &cfg.model;
        let model = WorldModel::new(wm_cfg, rng)?;
        let grid = wm_cfg.grid();
        let (l, a) = (m.latent_dim, wm_cfg.action_dim);
        let critic = QEnsemble::new(l, a, m.mlp_dim, m.num_q, grid, m.dropout, m.activation, rng)?;
        let klq = QEnsemble::new(l, a, m.mlp_dim, m.num_q, grid, m.dropout, m.activation, rng)?;
        let (lo, hi) = (cfg.policy.log_std_min, cfg.policy.log_std_max);
        let prior = GaussianPolicy::new(l, a, m.mlp_dim, m.activation, lo, hi, rng);
        let policy = GaussianPolicy::new(l, a, m.mlp_dim, m.activation, lo, hi, rng);
        Ok(Agent {
            model,
            critic,
            klq,
            prior,
            policy,
        })
    }

    /// Encodes `obs` and runs the planner against the bootstrap critic.
    pub fn plan(&self, obs: &[f64], warm_start: Option<&[Vec<f64>]>, cfg: &PlanConfig, seed: u64) -> Result<PlanResult> {
        let z = self.model.encode(obs)?;
        plan(&z, warm_start, cfg, &self.policy, &self.model, &self.critic, seed)
    }

    fn nets(&self) -> Vec<(String, &Mlp)> {
        let mut v = vec![
            ("model.encoder".to_owned(), &self.model.encoder),
            ("model.dynamics".to_owned(), &self.model.dynamics),
            ("model.reward".to_owned(), &self.model.reward),
            ("model.target_encoder".to_owned(), &self.model.target_encoder),
            ("prior".to_owned(), &self.prior.net),
            ("policy".to_owned(), &self.policy.net),
        ];
        for (name, e) in [("critic", &self.critic), ("klq", &self.klq)] {
            for (k, h) in e.heads().iter().enumerate() {
                v.push((format!("{name}.head{k}"), h));
            }
            for (k, h) in e.targets().iter().enumerate() {
                v.push((format!("{name}.target{k}"), h));
            }
        }
        v
    }

    fn nets_mut(&mut self) -> Vec<(String, &mut Mlp)> {
        let mut v = vec![
            ("model.encoder".to_owned(), &mut self.model.encoder),
            ("model.dynamics".to_owned(), &mut self.model.dynamics),
            ("model.reward".to_owned(), &mut self.model.reward),
            ("model.target_encoder".to_owned(), &mut self.model.target_encoder),
            ("prior".to_owned(), &mut self.prior.net),
            ("policy".to_owned(), &mut self.policy.net),
        ];
        for (name, e) in [("critic", &mut self.critic), ("klq", &mut self.klq)] {
            let (heads, targets) = e.heads_and_targets_mut();
            for (k, h) in heads.iter_mut().enumerate() {
                v.push((format!("{name}.head{k}"), h));
            }
            for (k, h) in targets.iter_mut().enumerate() {
                v.push((format!("{name}.target{k}"), h));
            }
        }
        v
    }

    pub fn write_checkpoint(&self, ckpt: &mut Checkpoint) {
        for (name, net) in self.nets() {
            ckpt.put_mlp(&name, net);
        }
    }

    pub fn read_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for (name, net) in self.nets_mut() {
            ckpt.get_mlp(&name, net)?;
        }
        Ok(())
    }
}

/// One Adam state per update line.
#[derive(Debug, Clone, PartialEq)]
struct Optimizers {
    model: Optimizer,
    prior: Optimizer,
    klq: Optimizer,
    policy: Optimizer,
}

impl Optimizers {
    fn new(agent: &mut Agent, cfg: &TrainConfig) -> Self {
        let o = &cfg.optim;
        fn mk<G: ParamGroup + ?Sized>(g: &G, o: &config::OptimConfig) -> Optimizer {
            let mut opt = Optimizer::new(g, o.lr, o.max_grad_norm, o.beta1, o.beta2);
            opt.state.eps = o.eps;
            opt
        }
        let model = mk(
            &ModelAndCritic {
                model: &mut agent.model,
                critic: &mut agent.critic,
            },
            o,
        );
        Optimizers {
            model,
            prior: mk(&agent.prior.net, o),
            klq: mk(&agent.klq, o),
            policy: mk(&agent.policy.net, o),
        }
    }

    fn all(&self) -> [(&'static str, &Optimizer); 4] {
        [("opt.model", &self.model), ("opt.prior", &self.prior), ("opt.klq", &self.klq), ("opt.policy", &self.policy)]
    }

    fn all_mut(&mut self) -> [(&'static str, &mut Optimizer); 4] {
        [
            ("opt.model", &mut self.model),
            ("opt.prior", &mut self.prior),
            ("opt.klq", &mut self.klq),
            ("opt.policy", &mut self.policy),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Scales {
    kl: ScaleTracker,
    q: ScaleTracker,
    prior: ScaleTracker,
}

/// Update stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Sample,
    Reanalyze,
    WorldModel,
    BootstrapQ,
    Prior,
    KlQ,
    Policy,
    Polyak,
}

/// Number of optimizer steps (or soft updates, for `targets`) applied to
/// each parameter group, pre-updates included.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Versions {
    pub model: u64,
    pub bootstrap_q: u64,
    pub prior: u64,
    pub klq: u64,
    pub policy: u64,
    pub targets: u64,
}

/// One slice touched by a reanalyze pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ReanalyzedSlice {
    pub seq: u64,
    /// Step-0 std returned by the planner, `None` if it failed.
    pub emitted_std: Option<Vec<f64>>,
    /// Step-0 std carried by the batch after the pass.
    pub batch_std: Vec<f64>,
    /// Step-0 std stored in the buffer after the pass.
    pub stored_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReanalyzeEvent {
    pub update: u64,
    pub written: usize,
    pub failures: usize,
    pub slices: Vec<ReanalyzedSlice>,
}

/// Optional trace of main-loop updates (pre-updates are not traced).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Instrumentation {
    /// Stages of every update, concatenated.
    pub stages: Vec<Stage>,
    pub reanalyze: Vec<ReanalyzeEvent>,
}

/// Mean return with a normal-approximation 95% half-width.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub returns: Vec<f64>,
    pub mean: f64,
    /// `None` for a single episode.
    pub ci95: Option<f64>,
}

impl EvalReport {
    pub fn from_returns(returns: Vec<f64>) -> Self {
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let ci95 = (returns.len() > 1).then(|| {
            let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
            1.96 * (var / n).sqrt()
        });
        EvalReport { returns, mean, ci95 }
    }
}

/// Full episodes with deterministic planning (the final mean is executed).
pub fn evaluate(agent: &Agent, cfg: &TrainConfig, episodes: usize, seed: u64) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::Config {
            key: "episodes".into(),
            msg: "must be >= 1".into(),
        });
    }
    let mut pcfg = cfg.planner.clone();
    pcfg.deterministic = true;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut env = Env::new(cfg.env.name, &mut rng);
        let mut warm: Option<Vec<Vec<f64>>> = None;
        let mut ret = 0.0;
        loop {
            let res = agent.plan(&env.observe(), warm.as_deref(), &pcfg, rng.next_u64())?;
            warm = Some(shift_warm_start(&res.mean));
            let st = env.step(&res.action)?;
            ret += st.reward;
            if st.done {
                break;
            }
        }
        returns.push(ret);
    }
    Ok(EvalReport::from_returns(returns))
}

/// Uniform random actions in the action box.
pub fn random_policy_baseline(kind: EnvKind, episodes: usize, seed: u64) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::Config {
            key: "episodes".into(),
            msg: "must be >= 1".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a_dim = kind.spec().action_dim;
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut env = Env::new(kind, &mut rng);
        let mut ret = 0.0;
        loop {
            let a: Vec<f64> = (0..a_dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let st = env.step(&a)?;
            ret += st.reward;
            if st.done {
                break;
            }
        }
        returns.push(ret);
    }
    Ok(EvalReport::from_returns(returns))
}

/// Training state plus the loop that advances it.
#[derive(Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    lambda: Lambda,
    pub agent: Agent,
    opts: Optimizers,
    pub buffer: ReplayBuffer,
    scales: Scales,
    rng: ChaCha8Rng,
    env: Env,
    warm_start: Option<Vec<Vec<f64>>>,
    env_steps: u64,
    updates: u64,
    episode: u64,
    episode_return: f64,
    episode_returns: Vec<f64>,
    /// `(planner std mean, elite score mean)` of the latest planned step.
    last_plan: Option<(f64, f64)>,
    versions: Versions,
    instrument: Option<Instrumentation>,
    metrics: MetricsSink,
}

impl Trainer {
    /// Fresh run; an existing metrics file is truncated.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let t = Self::build(cfg)?;
        if let Some(p) = t.metrics.path() {
            std::fs::File::create(p)?;
        }
        Ok(t)
    }

    fn build(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let lambda = cfg.lambda()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut agent = Agent::new(&cfg, &mut rng)?;
        let opts = Optimizers::new(&mut agent, &cfg);
        let spec = cfg.env.name.spec();
        let buffer = ReplayBuffer::new(
            cfg.replay.capacity,
            spec.obs_dim,
            spec.action_dim,
            cfg.planner.min_std,
            cfg.planner.max_std,
        )?;
        let env = Env::new(cfg.env.name, &mut rng);
        let rate = cfg.loss.scale_rate;
        let metrics = MetricsSink::new((!cfg.metrics_path.is_empty()).then(|| PathBuf::from(&cfg.metrics_path)));
        Ok(Trainer {
            lambda,
            agent,
            opts,
            buffer,
            scales: Scales {
                kl: ScaleTracker::new(rate),
                q: ScaleTracker::new(rate),
                prior: ScaleTracker::new(rate),
            },
            rng,
            env,
            warm_start: None,
            env_steps: 0,
            updates: 0,
            episode: 0,
            episode_return: 0.0,
            episode_returns: Vec::new(),
            last_plan: None,
            versions: Versions::default(),
            instrument: None,
            metrics,
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    /// Main-loop gradient updates so far.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Returns of completed training episodes.
    pub fn episode_returns(&self) -> &[f64] {
        &self.episode_returns
    }

    pub fn versions(&self) -> Versions {
        self.versions
    }

    /// Current `max(1, S)` divisors for the KL, Q and prior terms.
    pub fn scales(&self) -> (f64, f64, f64) {
        (self.scales.kl.scale(), self.scales.q.scale(), self.scales.prior.scale())
    }

    pub fn enable_instrumentation(&mut self) {
        self.instrument.get_or_insert_with(Instrumentation::default);
    }

    pub fn instrumentation(&self) -> Option<&Instrumentation> {
        self.instrument.as_ref()
    }

    fn mark(&mut self, s: Stage) {
        if let Some(i) = &mut self.instrument {
            i.stages.push(s);
        }
    }

    /// Runs until `cfg.total_steps` environment steps and flushes metrics.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.cfg.total_steps)
    }

    pub fn run_until(&mut self, total_steps: u64) -> Result<()> {
        while self.env_steps < total_steps {
            self.step()?;
        }
        self.metrics.flush()
    }

    /// One environment interaction followed by whatever updates are due.
    pub fn step(&mut self) -> Result<()> {
        let n_s = self.cfg.seeding_steps;
        let obs = self.env.observe();
        let seeding = self.env_steps < n_s;
        let a_dim = self.env.spec().action_dim;
        let (action, plan_mean, plan_std) = if seeding {
            let z = self.agent.model.encode(&obs)?;
            let a = act(&self.agent.policy, &z, false, &mut self.rng);
            (a, vec![0.0; a_dim], vec![self.cfg.planner.max_std; a_dim])
        } else {
            let seed = self.rng.next_u64();
            let res = self.agent.plan(&obs, self.warm_start.as_deref(), &self.cfg.planner, seed)?;
            self.warm_start = Some(shift_warm_start(&res.mean));
            let all_std: Vec<f64> = res.std.iter().flatten().copied().collect();
            self.last_plan = Some((all_std.iter().sum::<f64>() / all_std.len() as f64, res.elite_mean));
            (res.action, res.mean[0].clone(), res.std[0].clone())
        };
        let t = self.env.t as u64;
        let st = self.env.step(&action)?;
        self.buffer.push(TransitionRecord {
            obs,
            action,
            reward: st.reward,
            next_obs: st.obs,
            plan_mean,
            plan_std,
            episode: self.episode,
            step: t,
            done: st.done,
        })?;
        self.episode_return += st.reward;
        self.env_steps += 1;

        if n_s > 0 && self.env_steps == n_s {
            self.pretrain()?;
        } else if self.env_steps > n_s && (self.env_steps - n_s).is_multiple_of(self.cfg.update_every) {
            self.update().map_err(|e| self.diagnose(e))?;
        }

        if st.done {
            let mut row = MetricsRow::new(RowKind::Episode, self.env_steps, self.updates, self.episode);
            row.episode_return = Some(self.episode_return);
            row.episode_length = Some(self.env.t as u64);
            self.metrics.push(row);
            self.episode_returns.push(self.episode_return);
            self.episode_return = 0.0;
            self.episode += 1;
            self.warm_start = None;
            self.env.reset(&mut self.rng);
            self.metrics.flush()?;
        }
        Ok(())
    }

    fn diagnose(&self, e: Error) -> Error {
        match e {
            Error::Numeric(what) => Error::Numeric(format!(
                "{what} at env step {}, update {}; scales (kl, q, prior) = {:?}; model grad moments step {}",
                self.env_steps,
                self.updates,
                self.scales(),
                self.opts.model.state.step,
            )),
            e => e,
        }
    }

    /// `N_s` world-model + bootstrap-critic updates on the seeding data.
    fn pretrain(&mut self) -> Result<()> {
        let h = self.cfg.planner.horizon;
        if self.buffer.valid_starts(h).is_empty() {
            return Ok(());
        }
        for _ in 0..self.cfg.seeding_steps {
            let slices = self.buffer.sample_slices(self.cfg.replay.batch_size, h, &mut self.rng)?;
            self.model_update(&slices).map_err(|e| self.diagnose(e))?;
            let tau = self.cfg.loss.tau;
            self.agent.critic.polyak_update(tau);
            self.agent.model.polyak_target_encoder(tau);
            self.versions.targets += 1;
        }
        Ok(())
    }

    fn model_update(&mut self, slices: &[Slice]) -> Result<(ModelLoss, f64)> {
        let gamma = self.cfg.planner.discount;
        let n = slices.len();
        let mut batch = ModelBatch {
            obs0: Vec::with_capacity(n),
            actions: Vec::with_capacity(n),
            rewards: Vec::with_capacity(n),
            next_latents: Vec::with_capacity(n),
            value_targets: Vec::with_capacity(n),
        };
        for s in slices {
            let mut next = Vec::with_capacity(s.horizon());
            let mut targets = Vec::with_capacity(s.horizon());
            for (o, r) in s.next_obs.iter().zip(&s.rewards) {
                let zn = self.agent.model.encode(o)?;
                targets.push(td_target_bootstrap(*r, &zn, &self.agent.policy, &self.agent.critic, gamma, &mut self.rng));
                next.push(self.agent.model.encode_target(o)?);
            }
            batch.obs0.push(s.obs[0].clone());
            batch.actions.push(s.actions.clone());
            batch.rewards.push(s.rewards.clone());
            batch.next_latents.push(next);
            batch.value_targets.push(targets);
        }
        let l = &self.cfg.loss;
        let coefs = ModelLossCoefs {
            consistency: l.consistency_coef,
            reward: l.reward_coef,
            value: l.value_coef,
            rho: l.rho,
        };
        let (loss, grads) = world_model_loss(&self.agent.model, &self.agent.critic, &batch, &coefs, &mut self.rng)?;
        if !grads.is_finite() {
            return Err(Error::Numeric("world model gradients".into()));
        }
        let mut group = ModelAndCritic {
            model: &mut self.agent.model,
            critic: &mut self.agent.critic,
        };
        let norm = self.opts.model.step(&mut group, grads)?;
        self.versions.model += 1;
        self.versions.bootstrap_q += 1;
        Ok((loss, norm))
    }

    fn reanalyze(&mut self, slices: &mut [Slice]) -> Result<Option<usize>> {
        let r = &self.cfg.replay;
        let (n_b_r, k) = (r.reanalyze_batch, r.reanalyze_interval);
        let mut emitted: Vec<Option<Vec<f64>>> = Vec::new();
        let report = {
            let agent = &self.agent;
            let pcfg = &self.cfg.planner;
            let rng = &mut self.rng;
            lazy_reanalyze(&mut self.buffer, slices, n_b_r, k, self.updates, |obs| {
                let res = agent.plan(obs, None, pcfg, rng.next_u64());
                emitted.push(res.as_ref().ok().filter(|r| !r.fallback).map(|r| r.std[0].clone()));
                res
            })
        };
        if !report.triggered {
            return Ok(None);
        }
        self.mark(Stage::Reanalyze);
        if let Some(inst) = &mut self.instrument {
            let touched = slices
                .iter()
                .zip(emitted)
                .map(|(s, e)| ReanalyzedSlice {
                    seq: s.seq,
                    emitted_std: e,
                    batch_std: s.plan_std[0].clone(),
                    stored_std: self.buffer.get(s.seq).map(|r| r.plan_std.clone()).unwrap_or_default(),
                })
                .collect();
            inst.reanalyze.push(ReanalyzeEvent {
                update: self.updates,
                written: report.written,
                failures: report.failures,
                slices: touched,
            });
        }
        Ok(Some(report.written))
    }

    /// Prior at `z'` in replay-direct mode: the stored stats of the next step.
    fn stored_next(slice: &Slice, t: usize) -> Result<DiagGaussian> {
        let (m, s) = if t + 1 < slice.horizon() {
            (&slice.plan_mean[t + 1], &slice.plan_std[t + 1])
        } else if let Some((m, s)) = &slice.successor {
            (m, s)
        } else {
            (&slice.plan_mean[t], &slice.plan_std[t])
        };
        DiagGaussian::new(m.clone(), s.clone())
    }

    fn update(&mut self) -> Result<()> {
        let h = self.cfg.planner.horizon;
        if self.buffer.len() < h || self.buffer.valid_starts(h).is_empty() {
            return Ok(());
        }
        let mut slices = self.buffer.sample_slices(self.cfg.replay.batch_size, h, &mut self.rng)?;
        self.mark(Stage::Sample);
        let reanalyzed = self.reanalyze(&mut slices)?;

        let (mloss, model_norm) = self.model_update(&slices)?;
        self.mark(Stage::WorldModel);
        self.mark(Stage::BootstrapQ);

        let lc = self.cfg.loss.clone();
        let mode = self.cfg.prior.mode;
        let batch = PolicyBatch {
            latents: mloss.rollout.iter().map(|r| r[..h].to_vec()).collect(),
            plan_mean: slices.iter().map(|s| s.plan_mean.clone()).collect(),
            plan_std: slices.iter().map(|s| s.plan_std.clone()).collect(),
        };
        let mut row = MetricsRow::new(RowKind::Update, self.env_steps, self.updates + 1, self.episode);
        row.model_loss = Some(mloss.total);
        row.consistency_loss = Some(mloss.consistency);
        row.reward_loss = Some(mloss.reward);
        row.value_loss = Some(mloss.value);
        row.model_grad_norm = Some(model_norm);
        row.reanalyzed = reanalyzed.map(|w| w as u64);

        if mode != PriorMode::ReplayDirect {
            let pl = prior_loss(&self.agent.prior, &batch, mode, self.scales.prior.scale(), lc.rho)?;
            self.opts.prior.step(&mut self.agent.prior.net, pl.grads)?;
            self.scales.prior.update(&pl.kl_values);
            self.versions.prior += 1;
            self.mark(Stage::Prior);
            row.prior_loss = Some(pl.loss);
        }

        if let Lambda::Finite(lam) = self.lambda {
            let gamma = self.cfg.planner.discount;
            let kl_scale = self.scales.kl.scale();
            let mut targets = Vec::with_capacity(slices.len());
            for s in &slices {
                let mut row_t = Vec::with_capacity(h);
                for t in 0..h {
                    let zn = self.agent.model.encode(&s.next_obs[t])?;
                    let prior_d = match mode {
                        PriorMode::ReplayDirect => Self::stored_next(s, t)?,
                        _ => self.agent.prior.forward(&zn)?,
                    };
                    row_t.push(td_target_klreg(
                        s.rewards[t],
                        &zn,
                        &self.agent.policy,
                        &prior_d,
                        &self.agent.klq,
                        lam,
                        kl_scale,
                        gamma,
                        &mut self.rng,
                    ));
                }
                targets.push(row_t);
            }
            let qb = QBatch {
                latents: batch.latents.clone(),
                actions: slices.iter().map(|s| s.actions.clone()).collect(),
                targets,
            };
            let ql = q_loss(&self.agent.klq, &qb, lc.rho, &mut self.rng)?;
            let grads = GradBundle::new(
                ql.grads
                    .into_nets()
                    .into_iter()
                    .map(|mut g| {
                        g.scale(lc.klq_coef);
                        g
                    })
                    .collect(),
            );
            self.opts.klq.step(&mut self.agent.klq, grads)?;
            self.versions.klq += 1;
            self.mark(Stage::KlQ);
            row.klq_loss = Some(lc.klq_coef * ql.loss);
        }

        let prior_src = match mode {
            PriorMode::ReplayDirect => PriorSource::Replay,
            _ => PriorSource::Network(&self.agent.prior),
        };
        let pl = policy_objective(
            &self.agent.policy,
            &batch,
            prior_src,
            &self.agent.klq,
            self.lambda,
            lc.entropy_coef,
            lc.rho,
            self.scales.kl.scale(),
            self.scales.q.scale(),
            &mut self.rng,
        )?;
        self.opts.policy.step(&mut self.agent.policy.net, pl.grads)?;
        self.scales.kl.update(&pl.kl_values);
        self.scales.q.update(&pl.q_values);
        self.versions.policy += 1;
        self.mark(Stage::Policy);
        row.policy_loss = Some(pl.loss);
        row.kl_term = Some(pl.kl_term);
        row.q_term = Some(pl.q_term);
        row.entropy_term = Some(pl.entropy_term);

        self.agent.critic.polyak_update(lc.tau);
        self.agent.klq.polyak_update(lc.tau);
        self.agent.model.polyak_target_encoder(lc.tau);
        self.versions.targets += 1;
        self.mark(Stage::Polyak);

        self.updates += 1;
        row.s_kl = Some(self.scales.kl.value);
        row.s_q = Some(self.scales.q.value);
        row.s_p = Some(self.scales.prior.value);
        if let Some((std_mean, elite)) = self.last_plan {
            row.plan_std_mean = Some(std_mean);
            row.elite_score_mean = Some(elite);
        }
        self.metrics.push(row);
        Ok(())
    }

    /// Flushes pending metrics and writes the whole training state.
    pub fn save_checkpoint(&mut self, path: &Path) -> Result<()> {
        self.metrics.flush()?;
        self.to_checkpoint().save(path)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.cfg.to_toml());
        self.agent.write_checkpoint(&mut c);
        for (name, opt) in self.opts.all() {
            c.put_adam(name, &opt.state);
        }
        let s = &self.scales;
        c.put_f64("scales", vec![3], vec![s.kl.value, s.q.value, s.prior.value]);
        c.put_u64("counters", vec![self.env_steps, self.updates, self.episode]);
        let v = &self.versions;
        c.put_u64("versions", vec![v.model, v.bootstrap_q, v.prior, v.klq, v.policy, v.targets]);
        let seed = self.rng.get_seed();
        let mut rng_words: Vec<u64> = seed
            .chunks_exact(8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let pos = self.rng.get_word_pos();
        rng_words.extend([self.rng.get_stream(), pos as u64, (pos >> 64) as u64]);
        c.put_u64("rng", rng_words);

        let width = self.buffer.record_width();
        c.put_u64("replay.header", vec![self.buffer.capacity() as u64, self.buffer.next_seq()]);
        let rows = self.buffer.record_rows();
        c.put_f64("replay.records", vec![rows.len() / width, width], rows);

        c.put_f64("env.state", vec![self.env.state.len()], self.env.state.clone());
        c.put_u64("env.t", vec![self.env.t as u64]);
        c.put_f64("episode.return", vec![1], vec![self.episode_return]);
        c.put_f64("episode.history", vec![self.episode_returns.len()], self.episode_returns.clone());
        match &self.warm_start {
            Some(w) => {
                let flat: Vec<f64> = w.iter().flatten().copied().collect();
                c.put_u64("warm_start.present", vec![1]);
                c.put_f64("warm_start", vec![w.len(), w[0].len()], flat);
            }
            None => c.put_u64("warm_start.present", vec![0]),
        }
        match self.last_plan {
            Some((a, b)) => {
                c.put_u64("last_plan.present", vec![1]);
                c.put_f64("last_plan", vec![2], vec![a, b]);
            }
            None => c.put_u64("last_plan.present", vec![0]),
        }
        c
    }

    /// Resumes a run; new metrics rows are appended to the configured file.
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let cfg = TrainConfig::parse(&c.config, &[])?;
        let mut t = Self::build(cfg)?;
        t.agent.read_checkpoint(c)?;
        for (name, opt) in t.opts.all_mut() {
            c.get_adam(name, &mut opt.state)?;
        }
        let s = fixed::<3, _>(c.f64s("scales")?, "scales")?;
        t.scales.kl.value = s[0];
        t.scales.q.value = s[1];
        t.scales.prior.value = s[2];
        let [env_steps, updates, episode] = fixed::<3, _>(c.u64s("counters")?, "counters")?;
        (t.env_steps, t.updates, t.episode) = (env_steps, updates, episode);
        let v = fixed::<6, _>(c.u64s("versions")?, "versions")?;
        t.versions = Versions {
            model: v[0],
            bootstrap_q: v[1],
            prior: v[2],
            klq: v[3],
            policy: v[4],
            targets: v[5],
        };
        let r = fixed::<7, _>(c.u64s("rng")?, "rng")?;
        let mut seed = [0u8; 32];
        for (chunk, w) in seed.chunks_exact_mut(8).zip(&r[..4]) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        t.rng = ChaCha8Rng::from_seed(seed);
        t.rng.set_stream(r[4]);
        t.rng.set_word_pos(u128::from(r[5]) | (u128::from(r[6]) << 64));

        let [capacity, next_seq] = fixed::<2, _>(c.u64s("replay.header")?, "replay.header")?;
        t.buffer = ReplayBuffer::from_rows(
            capacity as usize,
            t.buffer.dims(),
            t.buffer.std_bounds(),
            next_seq,
            c.f64s("replay.records")?,
        )?;

        let state = c.f64s("env.state")?;
        if state.len() != t.env.state.len() {
            return Err(Error::Format("env.state does not match the environment".into()));
        }
        t.env.state = state.to_vec();
        t.env.t = c.u64s("env.t")?.first().copied().unwrap_or(0) as usize;
        t.episode_return = fixed::<1, _>(c.f64s("episode.return")?, "episode.return")?[0];
        t.episode_returns = c.f64s("episode.history")?.to_vec();
        t.warm_start = if c.u64s("warm_start.present")? == [1] {
            let shape = c.shape("warm_start")?;
            Some(c.f64s("warm_start")?.chunks(shape[1].max(1)).map(<[f64]>::to_vec).collect())
        } else {
            None
        };
        t.last_plan = if c.u64s("last_plan.present")? == [1] {
            let p = fixed::<2, _>(c.f64s("last_plan")?, "last_plan")?;
            Some((p[0], p[1]))
        } else {
            None
        };
        Ok(t)
    }
}

fn fixed<const N: usize, T: Copy>(v: &[T], name: &str) -> Result<[T; N]> {
    v.try_into()
        .map_err(|_| Error::Format(format!("block `{name}` should hold {N} values, found {}", v.len())))
}
