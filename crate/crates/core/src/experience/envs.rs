//! Small continuous-control tasks and their registry.

use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Static description of an environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub id: String,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub reward_min: f64,
    pub reward_max: f64,
    /// Maximum episode length.
    pub horizon: usize,
    /// Whether reaching the horizon is a true terminal state rather than a
    /// time-limit truncation.
    pub terminal_at_horizon: bool,
}

impl EnvSpec {
    /// `sum_{t < T} gamma^t` for terminating tasks, `1 / (1 - gamma)` otherwise.
    pub fn return_scale(&self, gamma: f64) -> f64 {
        if self.terminal_at_horizon {
            (1.0 - gamma.powi(self.horizon as i32)) / (1.0 - gamma)
        } else {
            1.0 / (1.0 - gamma)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    /// True terminal state: no bootstrapping past it.
    pub done: bool,
    /// Episode cut by the time limit.
    pub truncated: bool,
}

pub trait Environment: Send {
    fn spec(&self) -> EnvSpec;
    /// Starts a new episode; identical seeds give identical episodes.
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    /// Advances one step. Actions are clipped to `[-1, 1]`.
    fn step(&mut self, action: &[f64]) -> StepResult;
}

pub const ENVIRONMENTS: &[&str] = &["bandit", "pointmass2d", "pendulum"];

pub fn make(id: &str) -> Result<Box<dyn Environment>> {
    match id {
        "bandit" => Ok(Box::new(Bandit::default())),
        "pointmass2d" => Ok(Box::new(PointMass::default())),
        "pendulum" => Ok(Box::new(Pendulum::default())),
        other => Err(Error::UnknownEnvironment(other.to_string())),
    }
}

fn clip_action(action: &[f64]) -> impl Iterator<Item = f64> + '_ {
    action.iter().map(|a| a.clamp(-1.0, 1.0))
}

fn normal_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    (-0.5 * z * z).exp() / (std * (2.0 * PI).sqrt())
}

/// Single-step task with reward `log(0.5 N(a; -0.7, 0.1^2) + 0.5 N(a; 0.7, 0.1^2))`.
#[derive(Debug, Clone, Copy)]
pub struct Bandit {
    pub mode: f64,
    pub width: f64,
}

impl Default for Bandit {
    fn default() -> Self {
        Self { mode: 0.7, width: 0.1 }
    }
}

impl Bandit {
    pub fn reward(&self, a: f64) -> f64 {
        let a = a.clamp(-1.0, 1.0);
        // log-sum-exp over the two components
        let log_c = |m: f64| -0.5 * ((a - m) / self.width).powi(2) - (self.width * (2.0 * PI).sqrt()).ln();
        let (l0, l1) = (log_c(-self.mode), log_c(self.mode));
        let hi = l0.max(l1);
        hi + (0.5 * (l0 - hi).exp() + 0.5 * (l1 - hi).exp()).ln()
    }

    /// Density of the mixture itself, for quadrature.
    pub fn density(&self, a: f64) -> f64 {
        0.5 * normal_pdf(a, -self.mode, self.width) + 0.5 * normal_pdf(a, self.mode, self.width)
    }
}

impl Environment for Bandit {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            id: "bandit".into(),
            obs_dim: 1,
            act_dim: 1,
            reward_min: self.reward(0.0),
            reward_max: self.reward(self.mode),
            horizon: 1,
            terminal_at_horizon: true,
        }
    }

    fn reset(&mut self, _seed: u64) -> Vec<f64> {
        vec![0.0]
    }

    fn step(&mut self, action: &[f64]) -> StepResult {
        StepResult {
            observation: vec![0.0],
            reward: self.reward(action[0]),
            done: true,
            truncated: false,
        }
    }
}

/// Planar double integrator with two goals at `(+-1, 0)`.
///
/// Observation `(x, y, vx, vy)`; reward `-min_g |p - g|^2 - 0.01 |a|^2`.
#[derive(Debug, Clone)]
pub struct PointMass {
    pub dt: f64,
    pub max_speed: f64,
    pub bound: f64,
    pub horizon: usize,
    pos: [f64; 2],
    vel: [f64; 2],
    t: usize,
}

impl Default for PointMass {
    fn default() -> Self {
        Self {
            dt: 0.1,
            max_speed: 1.0,
            bound: 2.0,
            horizon: 200,
            pos: [0.0; 2],
            vel: [0.0; 2],
            t: 0,
        }
    }
}

impl PointMass {
    pub const GOALS: [[f64; 2]; 2] = [[-1.0, 0.0], [1.0, 0.0]];

    pub fn goal_cost(pos: [f64; 2]) -> f64 {
        Self::GOALS
            .iter()
            .map(|g| (pos[0] - g[0]).powi(2) + (pos[1] - g[1]).powi(2))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn set_state(&mut self, pos: [f64; 2], vel: [f64; 2]) {
        self.pos = pos;
        self.vel = vel;
    }

    fn observation(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }
}

impl Environment for PointMass {
    fn spec(&self) -> EnvSpec {
        // farthest point from both goals inside the box is (0, +-bound)
        let worst = Self::goal_cost([0.0, self.bound]).max(Self::goal_cost([self.bound, self.bound]));
        EnvSpec {
            id: "pointmass2d".into(),
            obs_dim: 4,
            act_dim: 2,
            reward_min: -worst - 0.02,
            reward_max: 0.0,
            horizon: self.horizon,
            terminal_at_horizon: false,
        }
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.pos = [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)];
        self.vel = [0.0; 2];
        self.t = 0;
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> StepResult {
        let a: Vec<f64> = clip_action(action).collect();
        for d in 0..2 {
            self.vel[d] = (self.vel[d] + a[d] * self.dt).clamp(-self.max_speed, self.max_speed);
            self.pos[d] += self.vel[d] * self.dt;
            if self.pos[d].abs() > self.bound {
                self.pos[d] = self.pos[d].clamp(-self.bound, self.bound);
                self.vel[d] = 0.0;
            }
        }
        self.t += 1;
        let effort = 0.01 * (a[0] * a[0] + a[1] * a[1]);
        StepResult {
            observation: self.observation(),
            reward: -Self::goal_cost(self.pos) - effort,
            done: false,
            truncated: self.t >= self.horizon,
        }
    }
}

/// Torque-limited pendulum, `theta = 0` upright: `theta'' = g/l sin(theta) + u/(m l^2)`.
///
/// Observation `(cos theta, sin theta, theta')`; reward
/// `-(theta^2 + 0.1 theta'^2 + 0.001 u^2)` at the pre-step state.
#[derive(Debug, Clone)]
pub struct Pendulum {
    pub dt: f64,
    pub gravity: f64,
    pub mass: f64,
    pub length: f64,
    pub max_torque: f64,
    pub max_speed: f64,
    pub horizon: usize,
    theta: f64,
    omega: f64,
    t: usize,
}

impl Default for Pendulum {
    fn default() -> Self {
        Self {
            dt: 0.05,
            gravity: 9.81,
            mass: 1.0,
            length: 1.0,
            max_torque: 2.0,
            max_speed: 8.0,
            horizon: 200,
            theta: 0.0,
            omega: 0.0,
            t: 0,
        }
    }
}

pub fn wrap_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

impl Pendulum {
    pub fn set_state(&mut self, theta: f64, omega: f64) {
        self.theta = theta;
        self.omega = omega;
    }

    pub fn state(&self) -> (f64, f64) {
        (self.theta, self.omega)
    }

    /// Mechanical energy per unit inertia.
    pub fn energy(&self) -> f64 {
        0.5 * self.omega * self.omega + self.gravity / self.length * self.theta.cos()
    }

    fn accel(&self, theta: f64, torque: f64) -> f64 {
        self.gravity / self.length * theta.sin() + torque / (self.mass * self.length * self.length)
    }

    /// One RK4 step with the torque held constant.
    pub fn integrate(&mut self, torque: f64) {
        let h = self.dt;
        let f = |th: f64, w: f64| (w, self.accel(th, torque));
        let (th, w) = (self.theta, self.omega);
        let k1 = f(th, w);
        let k2 = f(th + 0.5 * h * k1.0, w + 0.5 * h * k1.1);
        let k3 = f(th + 0.5 * h * k2.0, w + 0.5 * h * k2.1);
        let k4 = f(th + h * k3.0, w + h * k3.1);
        self.theta = th + h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        self.omega = w + h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
    }

    fn observation(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.omega]
    }
}

impl Environment for Pendulum {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            id: "pendulum".into(),
            obs_dim: 3,
            act_dim: 1,
            reward_min: -(PI * PI + 0.1 * self.max_speed.powi(2) + 0.001 * self.max_torque.powi(2)),
            reward_max: 0.0,
            horizon: self.horizon,
            terminal_at_horizon: false,
        }
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.theta = rng.random_range(-PI..PI);
        self.omega = rng.random_range(-1.0..1.0);
        self.t = 0;
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> StepResult {
        let torque = action[0].clamp(-1.0, 1.0) * self.max_torque;
        let th = wrap_angle(self.theta);
        let reward = -(th * th + 0.1 * self.omega * self.omega + 0.001 * torque * torque);
        self.integrate(torque);
        self.omega = self.omega.clamp(-self.max_speed, self.max_speed);
        self.t += 1;
        StepResult {
            observation: self.observation(),
            reward,
            done: false,
            truncated: self.t >= self.horizon,
        }
    }
}

/// One row of an episode trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
}

/// Writes `t,s0..,a0..,r` rows with a header.
pub fn write_trace<W: Write>(mut out: W, rows: &[TraceRow]) -> std::io::Result<()> {
    let (obs, act) = rows.first().map_or((0, 0), |r| (r.state.len(), r.action.len()));
    let mut header = vec!["t".to_string()];
    header.extend((0..obs).map(|i| format!("s{i}")));
    header.extend((0..act).map(|i| format!("a{i}")));
    header.push("r".into());
    writeln!(out, "{}", header.join(","))?;
    for row in rows {
        let mut fields = vec![row.t.to_string()];
        fields.extend(row.state.iter().map(|v| v.to_string()));
        fields.extend(row.action.iter().map(|v| v.to_string()));
        fields.push(row.reward.to_string());
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

/// Rolls out one episode with `policy` choosing actions from observations.
pub fn rollout<F>(env: &mut dyn Environment, seed: u64, mut policy: F) -> Result<Vec<TraceRow>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut obs = env.reset(seed);
    let mut rows = Vec::new();
    for t in 0..env.spec().horizon {
        let action = policy(&obs)?;
        let step = env.step(&action);
        rows.push(TraceRow {
            t,
            state: obs,
            action,
            reward: step.reward,
        });
        obs = step.observation;
        if step.done || step.truncated {
            break;
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bandit_is_symmetric_with_modes_at_07() {
        let b = Bandit::default();
        assert!((b.reward(-0.7) - b.reward(0.7)).abs() < 1e-15);
        let grid = 10_000;
        let spacing = 2.0 / grid as f64;
        let best = (0..=grid)
            .map(|i| -1.0 + i as f64 * spacing)
            .max_by(|x, y| b.reward(*x).total_cmp(&b.reward(*y)))
            .unwrap();
        assert!((best.abs() - 0.7).abs() <= spacing);
        assert!((b.reward(0.3) - b.density(0.3).ln()).abs() < 1e-12);
        let spec = b.spec();
        assert!((spec.reward_min + 23.1164).abs() < 1e-3);
        assert!((spec.reward_max - 0.6905).abs() < 1e-3);
    }

    #[test]
    fn pointmass_rest_stays_put() {
        let mut env = PointMass::default();
        env.reset(3);
        env.set_state([0.3, -0.2], [0.0, 0.0]);
        let step = env.step(&[0.0, 0.0]);
        assert_eq!(&step.observation[..2], &[0.3, -0.2]);
        assert!((step.reward + PointMass::goal_cost([0.3, -0.2])).abs() < 1e-15);
        assert!((PointMass::goal_cost([0.3, -0.2]) - (0.49 + 0.04)).abs() < 1e-12);
    }

    #[test]
    fn pendulum_upright_rest_has_zero_reward() {
        let mut env = Pendulum::default();
        env.set_state(0.0, 0.0);
        assert_eq!(env.step(&[0.0]).reward, 0.0);
    }

    #[test]
    fn pendulum_energy_is_conserved_per_step() {
        let mut env = Pendulum {
            dt: 0.01,
            max_speed: f64::INFINITY,
            ..Pendulum::default()
        };
        for (theta, omega) in [(PI - 0.1, 0.0), (2.0, 1.0), (0.3, -5.0), (PI - 0.1, 6.0)] {
            env.set_state(theta, omega);
            for _ in 0..2000 {
                let before = env.energy();
                env.integrate(0.0);
                assert!((env.energy() - before).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identical_seeds_give_identical_episodes() {
        for id in ENVIRONMENTS {
            let run = || {
                let mut env = make(id).unwrap();
                let mut k = 0u32;
                rollout(env.as_mut(), 11, |_| {
                    k += 1;
                    Ok(vec![(k as f64 * 0.37).sin(); env_act_dim(id)])
                })
                .unwrap()
            };
            assert_eq!(run(), run());
        }
    }

    fn env_act_dim(id: &str) -> usize {
        make(id).unwrap().spec().act_dim
    }

    #[test]
    fn unknown_id_is_an_error() {
        assert!(matches!(make("cartpole"), Err(Error::UnknownEnvironment(_))));
    }

    #[test]
    fn trace_csv_layout() {
        let rows = vec![TraceRow {
            t: 0,
            state: vec![1.0, 2.0],
            action: vec![0.5],
            reward: -1.0,
        }];
        let mut out = Vec::new();
        write_trace(&mut out, &rows).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "t,s0,s1,a0,r\n0,1,2,0.5,-1\n");
    }
}
