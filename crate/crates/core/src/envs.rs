//! Analytic continuous-control tasks with documented dynamics.
//!
//! Pendulum (angle `0` is upright), with `k = 3g / (2l) = 15`:
//!
//! ```text
//! u        = 2 a
//! thdot'   = clip(thdot + (k sin th + 3 u / (m l^2)) dt, -8, 8)
//! th'      = th + thdot' dt
//! reward   = -(wrap(th)^2 + 0.1 thdot^2 + 0.001 u^2)
//! obs      = (cos th, sin th, thdot / 8)
//! ```
//!
//! Point-mass in `[-1, 1]^2`, acceleration equal to the action:
//!
//! ```text
//! vel'     = clip(vel + a dt, -2, 2)
//! pos'     = clip(pos + vel' dt, -1, 1), velocity zeroed on a wall hit
//! reward   = -|pos - goal|^2 - 0.01 |a|^2
//! obs      = (pos, vel / 2, goal)
//! ```
//!
//! Rewards are computed on the pre-step state. Both use `dt = 0.05` and end by
//! time limit after 200 steps.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, Error, Result};

pub const DT: f64 = 0.05;
pub const EPISODE_LEN: usize = 200;

pub const PENDULUM_G: f64 = 10.0;
pub const PENDULUM_M: f64 = 1.0;
pub const PENDULUM_L: f64 = 1.0;
pub const PENDULUM_MAX_SPEED: f64 = 8.0;
pub const PENDULUM_MAX_TORQUE: f64 = 2.0;
pub const POINTMASS_MAX_SPEED: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    #[default]
    Pendulum,
    Pointmass,
}

impl std::str::FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pendulum" => Ok(EnvKind::Pendulum),
            "pointmass" => Ok(EnvKind::Pointmass),
            other => Err(Error::Config {
                key: "env.name".into(),
                msg: format!("unknown environment {other:?}"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvSpec {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub state_dim: usize,
    pub episode_len: usize,
    pub dt: f64,
    /// Rewards lie in `[reward_min, 0]`.
    pub reward_min: f64,
}

impl EnvKind {
    pub fn spec(self) -> EnvSpec {
        match self {
            EnvKind::Pendulum => EnvSpec {
                obs_dim: 3,
                action_dim: 1,
                state_dim: 2,
                episode_len: EPISODE_LEN,
                dt: DT,
                reward_min: -(PI * PI + 0.1 * PENDULUM_MAX_SPEED.powi(2) + 0.001 * PENDULUM_MAX_TORQUE.powi(2)),
            },
            EnvKind::Pointmass => EnvSpec {
                obs_dim: 6,
                action_dim: 2,
                state_dim: 6,
                episode_len: EPISODE_LEN,
                dt: DT,
                reward_min: -(8.0 + 0.02),
            },
        }
    }

    /// Initial state drawn from `rng`.
    pub fn reset<R: Rng + ?Sized>(self, rng: &mut R) -> Vec<f64> {
        match self {
            EnvKind::Pendulum => vec![rng.random_range(-PI..PI), rng.random_range(-1.0..1.0)],
            EnvKind::Pointmass => {
                let mut s = vec![0.0; 6];
                s[0] = rng.random_range(-1.0..1.0);
                s[1] = rng.random_range(-1.0..1.0);
                s[4] = rng.random_range(-1.0..1.0);
                s[5] = rng.random_range(-1.0..1.0);
                s
            }
        }
    }

    pub fn reset_seeded(self, seed: u64) -> Vec<f64> {
        self.reset(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Pure transition: `(next_state, reward)`. The action is clipped to the box.
    pub fn step(self, state: &[f64], action: &[f64]) -> Result<(Vec<f64>, f64)> {
        let spec = self.spec();
        crate::error::check_len("env state", spec.state_dim, state.len())?;
        crate::error::check_len("env action", spec.action_dim, action.len())?;
        check_finite("env state", state)?;
        check_finite("env action", action)?;
        let a: Vec<f64> = action.iter().map(|x| x.clamp(-1.0, 1.0)).collect();
        Ok(match self {
            EnvKind::Pendulum => pendulum_step(state, a[0]),
            EnvKind::Pointmass => pointmass_step(state, &a),
        })
    }

    pub fn observe(self, state: &[f64]) -> Vec<f64> {
        match self {
            EnvKind::Pendulum => vec![state[0].cos(), state[0].sin(), state[1] / PENDULUM_MAX_SPEED],
            EnvKind::Pointmass => vec![
                state[0],
                state[1],
                state[2] / POINTMASS_MAX_SPEED,
                state[3] / POINTMASS_MAX_SPEED,
                state[4],
                state[5],
            ],
        }
    }
}

/// Angle wrapped into `[-pi, pi)`.
pub fn wrap_angle(th: f64) -> f64 {
    (th + PI).rem_euclid(2.0 * PI) - PI
}

fn pendulum_step(s: &[f64], a: f64) -> (Vec<f64>, f64) {
    let (th, thdot) = (s[0], s[1]);
    let u = PENDULUM_MAX_TORQUE * a;
    let w = wrap_angle(th);
    let reward = -(w * w + 0.1 * thdot * thdot + 0.001 * u * u);
    let k = 3.0 * PENDULUM_G / (2.0 * PENDULUM_L);
    let acc = k * th.sin() + 3.0 / (PENDULUM_M * PENDULUM_L * PENDULUM_L) * u;
    let new_thdot = (thdot + acc * DT).clamp(-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED);
    (vec![th + new_thdot * DT, new_thdot], reward)
}

fn pointmass_step(s: &[f64], a: &[f64]) -> (Vec<f64>, f64) {
    let (dx, dy) = (s[0] - s[4], s[1] - s[5]);
    let reward = -(dx * dx + dy * dy) - 0.01 * (a[0] * a[0] + a[1] * a[1]);
    let mut next = s.to_vec();
    for i in 0..2 {
        let v = (s[2 + i] + a[i] * DT).clamp(-POINTMASS_MAX_SPEED, POINTMASS_MAX_SPEED);
        let p = s[i] + v * DT;
        if p.abs() > 1.0 {
            next[i] = p.clamp(-1.0, 1.0);
            next[2 + i] = 0.0;
        } else {
            next[i] = p;
            next[2 + i] = v;
        }
    }
    (next, reward)
}

/// One step's outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub obs: Vec<f64>,
    pub reward: f64,
    /// Time limit reached.
    pub done: bool,
}

/// A stateful episode wrapper around [`EnvKind`].
#[derive(Debug, Clone, PartialEq)]
pub struct Env {
    pub kind: EnvKind,
    pub state: Vec<f64>,
    pub t: usize,
}

impl Env {
    pub fn new<R: Rng + ?Sized>(kind: EnvKind, rng: &mut R) -> Self {
        Env {
            kind,
            state: kind.reset(rng),
            t: 0,
        }
    }

    pub fn spec(&self) -> EnvSpec {
        self.kind.spec()
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<f64> {
        self.state = self.kind.reset(rng);
        self.t = 0;
        self.observe()
    }

    pub fn observe(&self) -> Vec<f64> {
        self.kind.observe(&self.state)
    }

    pub fn step(&mut self, action: &[f64]) -> Result<Step> {
        let (next, reward) = self.kind.step(&self.state, action)?;
        self.state = next;
        self.t += 1;
        Ok(Step {
            obs: self.observe(),
            reward,
            done: self.t >= self.spec().episode_len,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_points() {
        let (s, r) = EnvKind::Pendulum.step(&[0.0, 0.0], &[0.0]).unwrap();
        assert_eq!((s, r), (vec![0.0, 0.0], 0.0));
        let state = [0.3, -0.2, 0.0, 0.0, 0.3, -0.2];
        let (s, r) = EnvKind::Pointmass.step(&state, &[0.0, 0.0]).unwrap();
        assert_eq!(r, 0.0);
        assert_eq!(s, state.to_vec());
    }

    #[test]
    fn reset_is_seeded() {
        assert_eq!(EnvKind::Pendulum.reset_seeded(3), EnvKind::Pendulum.reset_seeded(3));
        assert_ne!(EnvKind::Pendulum.reset_seeded(3), EnvKind::Pendulum.reset_seeded(4));
        let s = EnvKind::Pointmass.reset_seeded(0);
        assert_eq!((s[2], s[3]), (0.0, 0.0));
    }

    #[test]
    fn reset_angle_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 100_000;
        let mut bins = [0usize; 10];
        for _ in 0..n {
            let th = EnvKind::Pendulum.reset(&mut rng)[0];
            bins[(((th + PI) / (2.0 * PI)) * 10.0) as usize] += 1;
        }
        let sd = (n as f64 * 0.1 * 0.9).sqrt();
        assert!(bins.iter().all(|b| (*b as f64 - 10_000.0).abs() < 5.0 * sd));
    }

    #[test]
    fn pendulum_matches_straight_line_integrator() {
        let acts = [0.3, -1.0, 0.8, 0.0, 1.0, -0.2, 0.5, 0.5, -0.7, 0.1];
        let mut s = vec![2.0, -0.5];
        let (mut th, mut w) = (2.0f64, -0.5f64);
        for a in acts {
            let (n, r) = EnvKind::Pendulum.step(&s, &[a]).unwrap();
            let wrapped = ((th + PI) % (2.0 * PI) + 2.0 * PI) % (2.0 * PI) - PI;
            let u = 2.0 * a;
            let oracle_r = -(wrapped * wrapped + 0.1 * w * w + 0.001 * u * u);
            w = (w + (15.0 * th.sin() + 3.0 * u) * 0.05).clamp(-8.0, 8.0);
            th += w * 0.05;
            assert!((r - oracle_r).abs() < 1e-12);
            assert!((n[0] - th).abs() < 1e-12 && (n[1] - w).abs() < 1e-12);
            s = n;
        }
    }

    #[test]
    fn pointmass_matches_straight_line_integrator() {
        let mut s = vec![0.9, -0.2, 0.5, 0.0, -0.4, 0.1];
        let (mut p, mut v) = ([0.9f64, -0.2], [0.5f64, 0.0]);
        for k in 0..10 {
            let a = [1.0, -0.5 + 0.1 * k as f64];
            let (n, r) = EnvKind::Pointmass.step(&s, &a).unwrap();
            let oracle_r = -((p[0] + 0.4).powi(2) + (p[1] - 0.1).powi(2)) - 0.01 * (a[0] * a[0] + a[1] * a[1]);
            for i in 0..2 {
                v[i] = (v[i] + a[i] * 0.05).clamp(-2.0, 2.0);
                p[i] += v[i] * 0.05;
                if p[i].abs() > 1.0 {
                    p[i] = p[i].signum();
                    v[i] = 0.0;
                }
            }
            assert!((r - oracle_r).abs() < 1e-12);
            for i in 0..2 {
                assert!((n[i] - p[i]).abs() < 1e-12 && (n[2 + i] - v[i]).abs() < 1e-12);
            }
            s = n;
        }
    }

    #[test]
    fn pendulum_energy_drift_is_bounded() {
        // Symplectic Euler without clipping: |dE| <= dt^2 (k^2 + k w'^2) / 2.
        let k = 15.0;
        let energy = |s: &[f64]| 0.5 * s[1] * s[1] + k * s[0].cos();
        for i in 0..40 {
            for j in 0..20 {
                let s = [-PI + i as f64 * PI / 20.0, -3.0 + j as f64 * 0.3];
                let (n, _) = EnvKind::Pendulum.step(&s, &[0.0]).unwrap();
                let bound = 0.5 * DT * DT * (k * k + k * n[1] * n[1]) + 1e-12;
                assert!((energy(&n) - energy(&s)).abs() <= bound);
            }
        }
    }

    #[test]
    fn rewards_are_bounded_and_steps_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kind in [EnvKind::Pendulum, EnvKind::Pointmass] {
            let spec = kind.spec();
            let mut s = kind.reset(&mut rng);
            for _ in 0..500 {
                let a: Vec<f64> = (0..spec.action_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let (n, r) = kind.step(&s, &a).unwrap();
                assert_eq!(kind.step(&s, &a).unwrap(), (n.clone(), r));
                assert!(r <= 0.0 && r >= spec.reward_min);
                s = n;
            }
        }
    }

    #[test]
    fn episode_ends_at_time_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut env = Env::new(EnvKind::Pendulum, &mut rng);
        for t in 1..=EPISODE_LEN {
            assert_eq!(env.step(&[0.0]).unwrap().done, t == EPISODE_LEN);
        }
        assert!(EnvKind::Pendulum.step(&[f64::NAN, 0.0], &[0.0]).is_err());
    }
}
