//! Deterministic desk-scale environments: CartPole, a chain MDP and a
//! two-fork crossroads grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::quantizer::{QuantizerConfig, RewardShaping};
use crate::scalar::Scalar;

pub const DEFAULT_LEVELS: u32 = 128;

pub const CARTPOLE_LEVELS: u32 = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec<T: Scalar> {
    pub id: String,
    pub state_dims: usize,
    pub action_count: usize,
    pub max_steps: u32,
    /// Default quantizer for this environment.
    pub quantizer: QuantizerConfig<T>,
    pub shaping: RewardShaping,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult<T: Scalar> {
    pub next_state: Vec<T>,
    /// Raw environment reward, before shaping.
    pub reward: T,
    pub terminal: bool,
}

pub trait Environment<T: Scalar>: Send {
    fn spec(&self) -> &EnvSpec<T>;

    /// Starts a new episode. The same seed always yields the same state.
    fn reset(&mut self, seed: u64) -> Vec<T>;

    /// Advances one step. Errors on an invalid action or after termination.
    fn step(&mut self, action: usize) -> Result<StepResult<T>>;

    /// Total `step` calls made on this instance since construction.
    fn total_steps(&self) -> u64;

    /// A fresh instance with the same configuration and a zeroed counter.
    fn boxed_fresh(&self) -> Box<dyn Environment<T>>;
}

/// Builds an environment from its id: `cartpole`, `chain` (6 states),
/// `chain-<n>`, or `crossroads`.
pub fn make_env<T: Scalar>(id: &str) -> Result<Box<dyn Environment<T>>> {
    match id {
        "cartpole" => Ok(Box::new(CartPole::new())),
        "chain" => Ok(Box::new(ChainMdp::new(6)?)),
        "crossroads" => Ok(Box::new(Crossroads::new())),
        other => {
            if let Some(n) = other.strip_prefix("chain-") {
                let n = n
                    .parse()
                    .map_err(|_| Error::Config(format!("bad chain length in {other:?}")))?;
                return Ok(Box::new(ChainMdp::new(n)?));
            }
            Err(Error::Config(format!("unknown environment {other:?}")))
        }
    }
}

/// Guards shared by every environment.
#[derive(Debug, Clone, Default)]
struct EpisodeClock {
    steps: u32,
    done: bool,
    total: u64,
}

impl EpisodeClock {
    fn reset(&mut self) {
        self.steps = 0;
        self.done = false;
    }

    fn begin_step<T: Scalar>(&mut self, spec: &EnvSpec<T>, action: usize) -> Result<()> {
        if self.done {
            return Err(Error::Contract(format!("{}: step after terminal", spec.id)));
        }
        if action >= spec.action_count {
            return Err(Error::Input(format!(
                "{}: action {action} out of range for {} actions",
                spec.id, spec.action_count
            )));
        }
        self.steps += 1;
        self.total += 1;
        Ok(())
    }

    fn finish(&mut self, max_steps: u32, terminal: bool) -> bool {
        self.done = terminal || self.steps >= max_steps;
        self.done
    }
}

/// Classic cart-pole balancing with explicit Euler integration.
#[derive(Debug, Clone)]
pub struct CartPole<T: Scalar> {
    spec: EnvSpec<T>,
    state: [T; 4],
    clock: EpisodeClock,
}

impl<T: Scalar> CartPole<T> {
    pub const GRAVITY: f64 = 9.8;
    pub const CART_MASS: f64 = 1.0;
    pub const POLE_MASS: f64 = 0.1;
    pub const HALF_LENGTH: f64 = 0.5;
    pub const FORCE: f64 = 10.0;
    pub const TAU: f64 = 0.02;
    pub const X_LIMIT: f64 = 2.4;
    pub const THETA_LIMIT: f64 = 12.0 * std::f64::consts::PI / 180.0;
    pub const MAX_STEPS: u32 = 500;

    pub fn new() -> Self {
        let v = T::lit(3.0);
        let x = T::lit(Self::X_LIMIT);
        let th = T::lit(Self::THETA_LIMIT);
        let quantizer =
            QuantizerConfig::new(CARTPOLE_LEVELS, vec![-x, -v, -th, -v], vec![x, v, th, v])
                .expect("static bounds");
        Self {
            spec: EnvSpec {
                id: "cartpole".into(),
                state_dims: 4,
                action_count: 2,
                max_steps: Self::MAX_STEPS,
                quantizer,
                shaping: RewardShaping::Tanh10,
            },
            state: [T::zero(); 4],
            clock: EpisodeClock::default(),
        }
    }

    /// Places the system in an arbitrary state (for tests and analysis).
    pub fn set_state(&mut self, state: [T; 4]) {
        self.state = state;
        self.clock.reset();
    }

    /// One Euler step of the equations of motion: `[x, x_dot, theta, theta_dot]`.
    pub fn dynamics(state: [T; 4], action: usize) -> [T; 4] {
        let [x, x_dot, theta, theta_dot] = state;
        let g = T::lit(Self::GRAVITY);
        let total_mass = T::lit(Self::CART_MASS + Self::POLE_MASS);
        let pole_mass = T::lit(Self::POLE_MASS);
        let length = T::lit(Self::HALF_LENGTH);
        let pm_len = pole_mass * length;
        let tau = T::lit(Self::TAU);
        let force = if action == 1 { T::lit(Self::FORCE) } else { -T::lit(Self::FORCE) };

        let (sin, cos) = theta.sin_cos();
        let temp = (force + pm_len * theta_dot * theta_dot * sin) / total_mass;
        let theta_acc = (g * sin - cos * temp)
            / (length * (T::lit(4.0 / 3.0) - pole_mass * cos * cos / total_mass));
        let x_acc = temp - pm_len * theta_acc * cos / total_mass;

        [
            x + tau * x_dot,
            x_dot + tau * x_acc,
            theta + tau * theta_dot,
            theta_dot + tau * theta_acc,
        ]
    }
}

impl<T: Scalar> Default for CartPole<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Environment<T> for CartPole<T> {
    fn spec(&self) -> &EnvSpec<T> {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in self.state.iter_mut() {
            *s = T::lit(rng.gen_range(-0.05..0.05));
        }
        self.clock.reset();
        self.state.to_vec()
    }

    fn step(&mut self, action: usize) -> Result<StepResult<T>> {
        self.clock.begin_step(&self.spec, action)?;
        self.state = Self::dynamics(self.state, action);
        let [x, _, theta, _] = self.state;
        let failed = x.abs() > T::lit(Self::X_LIMIT) || theta.abs() > T::lit(Self::THETA_LIMIT);
        let terminal = self.clock.finish(self.spec.max_steps, failed);
        Ok(StepResult { next_state: self.state.to_vec(), reward: T::one(), terminal })
    }

    fn total_steps(&self) -> u64 {
        self.clock.total
    }

    fn boxed_fresh(&self) -> Box<dyn Environment<T>> {
        Box::new(Self::new())
    }
}

/// A line of `n` cells. Action 0 moves left (walls at cell 0), action 1
/// moves right. Entering a cell pays its reward; terminal cells end the
/// episode. Every episode starts in cell 0.
#[derive(Debug, Clone)]
pub struct ChainMdp<T: Scalar> {
    spec: EnvSpec<T>,
    rewards: Vec<T>,
    terminal: Vec<bool>,
    pos: usize,
    clock: EpisodeClock,
}

impl<T: Scalar> ChainMdp<T> {
    /// Default layout: reward 1 for entering the last cell, which is terminal.
    pub fn new(n: usize) -> Result<Self> {
        let mut rewards = vec![T::zero(); n.max(1)];
        let mut terminal = vec![false; n.max(1)];
        if let Some(last) = n.checked_sub(1) {
            rewards[last] = T::one();
            terminal[last] = true;
        }
        Self::with_layout(rewards, terminal, 100)
    }

    pub fn with_layout(rewards: Vec<T>, terminal: Vec<bool>, max_steps: u32) -> Result<Self> {
        let n = rewards.len();
        if n < 2 || terminal.len() != n {
            return Err(Error::Config("chain needs at least two cells and one flag per cell".into()));
        }
        if max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        let id = if n == 6 { "chain".to_string() } else { format!("chain-{n}") };
        let quantizer = QuantizerConfig::new(
            DEFAULT_LEVELS.max(n as u32),
            vec![T::zero()],
            vec![T::from_count(n as u64 - 1)],
        )?;
        Ok(Self {
            spec: EnvSpec {
                id,
                state_dims: 1,
                action_count: 2,
                max_steps,
                quantizer,
                shaping: RewardShaping::Identity,
            },
            rewards,
            terminal,
            pos: 0,
            clock: EpisodeClock::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Deterministic successor cell.
    pub fn next_cell(&self, cell: usize, action: usize) -> usize {
        if action == 0 {
            cell.saturating_sub(1)
        } else {
            (cell + 1).min(self.len() - 1)
        }
    }

    pub fn reward_at(&self, cell: usize) -> T {
        self.rewards[cell]
    }

    pub fn is_terminal_cell(&self, cell: usize) -> bool {
        self.terminal[cell]
    }

    pub fn cell_state(cell: usize) -> Vec<T> {
        vec![T::from_count(cell as u64)]
    }
}

impl<T: Scalar> Environment<T> for ChainMdp<T> {
    fn spec(&self) -> &EnvSpec<T> {
        &self.spec
    }

    fn reset(&mut self, _seed: u64) -> Vec<T> {
        self.pos = 0;
        self.clock.reset();
        Self::cell_state(0)
    }

    fn step(&mut self, action: usize) -> Result<StepResult<T>> {
        self.clock.begin_step(&self.spec, action)?;
        self.pos = self.next_cell(self.pos, action);
        let reward = self.rewards[self.pos];
        let terminal = self.clock.finish(self.spec.max_steps, self.terminal[self.pos]);
        Ok(StepResult { next_state: Self::cell_state(self.pos), reward, terminal })
    }

    fn total_steps(&self) -> u64 {
        self.clock.total
    }

    fn boxed_fresh(&self) -> Box<dyn Environment<T>> {
        let mut fresh = self.clone();
        fresh.clock = EpisodeClock::default();
        fresh.pos = 0;
        Box::new(fresh)
    }
}

/// Two forks on the way to an exit.
///
/// ```text
///   y=3   money(+1)   bomb(-1)
///   y=2        high fork
///   y=1   left         right
///   y=0        low fork (start)
/// ```
///
/// At the low fork both branches (action 0 = left, 1 = right) lead to the
/// high fork with the same reward. At the high fork, left finds the money
/// (+1, terminal) and right the bomb (-1, terminal). State is `[x, y]`.
#[derive(Debug, Clone)]
pub struct Crossroads<T: Scalar> {
    spec: EnvSpec<T>,
    pos: (i32, i32),
    clock: EpisodeClock,
}

impl<T: Scalar> Crossroads<T> {
    pub const LOW_FORK: (i32, i32) = (0, 0);
    pub const HIGH_FORK: (i32, i32) = (0, 2);

    pub fn new() -> Self {
        let quantizer = QuantizerConfig::new(
            DEFAULT_LEVELS,
            vec![-T::one(), T::zero()],
            vec![T::one(), T::lit(3.0)],
        )
        .expect("static bounds");
        Self {
            spec: EnvSpec {
                id: "crossroads".into(),
                state_dims: 2,
                action_count: 2,
                max_steps: 10,
                quantizer,
                shaping: RewardShaping::Identity,
            },
            pos: Self::LOW_FORK,
            clock: EpisodeClock::default(),
        }
    }

    pub fn cell_state((x, y): (i32, i32)) -> Vec<T> {
        vec![T::lit(x as f64), T::lit(y as f64)]
    }
}

impl<T: Scalar> Default for Crossroads<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Environment<T> for Crossroads<T> {
    fn spec(&self) -> &EnvSpec<T> {
        &self.spec
    }

    fn reset(&mut self, _seed: u64) -> Vec<T> {
        self.pos = Self::LOW_FORK;
        self.clock.reset();
        Self::cell_state(self.pos)
    }

    fn step(&mut self, action: usize) -> Result<StepResult<T>> {
        self.clock.begin_step(&self.spec, action)?;
        let side = if action == 0 { -1 } else { 1 };
        let (next, reward, exit) = match self.pos {
            Self::LOW_FORK => ((side, 1), T::zero(), false),
            (_, 1) => (Self::HIGH_FORK, T::zero(), false),
            Self::HIGH_FORK => ((side, 3), if action == 0 { T::one() } else { -T::one() }, true),
            other => (other, T::zero(), true),
        };
        self.pos = next;
        let terminal = self.clock.finish(self.spec.max_steps, exit);
        Ok(StepResult { next_state: Self::cell_state(next), reward, terminal })
    }

    fn total_steps(&self) -> u64 {
        self.clock.total
    }

    fn boxed_fresh(&self) -> Box<dyn Environment<T>> {
        Box::new(Self::new())
    }
}
