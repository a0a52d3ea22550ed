//! Desk-scale deterministic environments, observation preprocessing and the
//! evaluation protocol (random no-op starts, fixed-epsilon greedy play).
//!
//! Action 0 is the no-op in every environment.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::network::QNetwork;
use crate::qlearn::{epsilon_greedy, greedy_action};
use crate::real::Real;

/// Names accepted by [`make_env`].
pub const ENV_NAMES: [&str; 2] = ["catch", "gridworld"];

/// Outcome of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub obs: Vec<f32>,
    pub reward: f64,
    pub done: bool,
}

pub trait Environment {
    fn name(&self) -> &'static str;

    /// Starts a new episode; identical seeds give identical episodes.
    fn reset(&mut self, seed: u64) -> Vec<f32>;

    /// Fails with a contract violation on an invalid action or when the
    /// episode has already ended.
    fn step(&mut self, action: usize) -> Result<Step>;

    fn num_actions(&self) -> usize;

    /// `[channels, height, width]` of one raw frame.
    fn obs_shape(&self) -> Vec<usize>;

    /// Largest number of opening no-ops that still leaves the episode
    /// winnable.
    fn noop_budget(&self) -> usize {
        usize::MAX
    }
}

/// A ball falls one row per step from a random column of the top row; the
/// agent moves a one-cell paddle on the bottom row (0 stay, 1 left, 2 right)
/// and gets +1 for a catch or -1 for a miss. Episodes last exactly
/// `height - 1` steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatchEnv {
    pub width: usize,
    pub height: usize,
    pub ball_row: usize,
    pub ball_col: usize,
    pub paddle: usize,
    pub done: bool,
}

impl CatchEnv {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width < 1 || height < 2 {
            return Err(Error::Config(format!("catch grid {width}x{height} is too small")));
        }
        Ok(Self { width, height, ball_row: 0, ball_col: 0, paddle: width / 2, done: true })
    }

    /// Starts an episode with the ball in a chosen column.
    pub fn reset_to(&mut self, ball_col: usize) -> Vec<f32> {
        self.ball_row = 0;
        self.ball_col = ball_col.min(self.width - 1);
        self.paddle = self.width / 2;
        self.done = false;
        self.observe()
    }

    fn observe(&self) -> Vec<f32> {
        let mut obs = vec![0.0; self.width * self.height];
        obs[self.ball_row * self.width + self.ball_col] = 1.0;
        obs[(self.height - 1) * self.width + self.paddle] = 1.0;
        obs
    }

    /// Action that moves the paddle toward the ball's column.
    pub fn optimal_action(&self) -> usize {
        use std::cmp::Ordering::*;
        match self.ball_col.cmp(&self.paddle) {
            Less => 1,
            Greater => 2,
            Equal => 0,
        }
    }
}

impl Environment for CatchEnv {
    fn name(&self) -> &'static str {
        "catch"
    }

    fn reset(&mut self, seed: u64) -> Vec<f32> {
        let col = ChaCha8Rng::seed_from_u64(seed).gen_range(0..self.width);
        self.reset_to(col)
    }

    fn step(&mut self, action: usize) -> Result<Step> {
        if self.done {
            return Err(Error::contract("catch: step after episode end"));
        }
        self.paddle = match action {
            0 => self.paddle,
            1 => self.paddle.saturating_sub(1),
            2 => (self.paddle + 1).min(self.width - 1),
            _ => return Err(Error::contract(format!("catch: invalid action {action}"))),
        };
        self.ball_row += 1;
        let mut reward = 0.0;
        if self.ball_row == self.height - 1 {
            self.done = true;
            reward = if self.ball_col == self.paddle { 1.0 } else { -1.0 };
        }
        Ok(Step { obs: self.observe(), reward, done: self.done })
    }

    fn num_actions(&self) -> usize {
        3
    }

    fn obs_shape(&self) -> Vec<usize> {
        vec![1, self.height, self.width]
    }

    fn noop_budget(&self) -> usize {
        let start = self.width / 2;
        let reach = start.max(self.width - 1 - start);
        (self.height - 1).saturating_sub(reach)
    }
}

/// Walk from a start cell to the goal in the bottom-right corner.
///
/// Actions: 0 stay, 1 up, 2 down, 3 left, 4 right. Each step costs 0.01
/// unless it reaches the goal, which pays +1 and ends the episode. Episodes
/// are also cut at `max_steps`. Observations are two `N x N` planes: agent
/// and goal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridWorldEnv {
    pub size: usize,
    pub max_steps: usize,
    pub random_start: bool,
    pub agent: (usize, usize),
    pub goal: (usize, usize),
    pub steps: usize,
    pub done: bool,
}

pub const GRID_STEP_REWARD: f64 = -0.01;
pub const GRID_GOAL_REWARD: f64 = 1.0;

impl GridWorldEnv {
    pub fn new(size: usize, max_steps: usize, random_start: bool) -> Result<Self> {
        if size < 2 || max_steps < 1 {
            return Err(Error::Config(format!("gridworld size {size} / max_steps {max_steps} invalid")));
        }
        Ok(Self { size, max_steps, random_start, agent: (0, 0), goal: (size - 1, size - 1), steps: 0, done: true })
    }

    pub fn reset_to(&mut self, agent: (usize, usize)) -> Vec<f32> {
        self.agent = agent;
        self.steps = 0;
        self.done = false;
        self.observe()
    }

    fn observe(&self) -> Vec<f32> {
        let n = self.size;
        let mut obs = vec![0.0; 2 * n * n];
        obs[self.agent.0 * n + self.agent.1] = 1.0;
        obs[n * n + self.goal.0 * n + self.goal.1] = 1.0;
        obs
    }

    pub fn distance_to_goal(&self) -> usize {
        self.agent.0.abs_diff(self.goal.0) + self.agent.1.abs_diff(self.goal.1)
    }

    /// Best achievable return from the current cell, if the goal is
    /// reachable within the step limit.
    pub fn optimal_return(&self) -> Option<f64> {
        let d = self.distance_to_goal();
        (1..=self.max_steps).contains(&d).then_some(GRID_STEP_REWARD * (d as f64 - 1.0) + GRID_GOAL_REWARD)
    }

    pub fn optimal_action(&self) -> usize {
        if self.agent.0 < self.goal.0 {
            2
        } else if self.agent.1 < self.goal.1 {
            4
        } else {
            0
        }
    }
}

impl Environment for GridWorldEnv {
    fn name(&self) -> &'static str {
        "gridworld"
    }

    fn reset(&mut self, seed: u64) -> Vec<f32> {
        let start = if self.random_start {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            loop {
                let cell = (rng.gen_range(0..self.size), rng.gen_range(0..self.size));
                if cell != self.goal {
                    break cell;
                }
            }
        } else {
            (0, 0)
        };
        self.reset_to(start)
    }

    fn step(&mut self, action: usize) -> Result<Step> {
        if self.done {
            return Err(Error::contract("gridworld: step after episode end"));
        }
        let (r, c) = self.agent;
        let last = self.size - 1;
        self.agent = match action {
            0 => (r, c),
            1 => (r.saturating_sub(1), c),
            2 => ((r + 1).min(last), c),
            3 => (r, c.saturating_sub(1)),
            4 => (r, (c + 1).min(last)),
            _ => return Err(Error::contract(format!("gridworld: invalid action {action}"))),
        };
        self.steps += 1;
        let reward = if self.agent == self.goal {
            self.done = true;
            GRID_GOAL_REWARD
        } else {
            GRID_STEP_REWARD
        };
        if self.steps >= self.max_steps {
            self.done = true;
        }
        Ok(Step { obs: self.observe(), reward, done: self.done })
    }

    fn num_actions(&self) -> usize {
        5
    }

    fn obs_shape(&self) -> Vec<usize> {
        vec![2, self.size, self.size]
    }

    fn noop_budget(&self) -> usize {
        self.max_steps.saturating_sub(2 * (self.size - 1))
    }
}

/// Registered environments as one serializable value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnvKind {
    Catch(CatchEnv),
    Gridworld(GridWorldEnv),
}

impl EnvKind {
    fn inner(&self) -> &dyn Environment {
        match self {
            EnvKind::Catch(e) => e,
            EnvKind::Gridworld(e) => e,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Environment {
        match self {
            EnvKind::Catch(e) => e,
            EnvKind::Gridworld(e) => e,
        }
    }
}

impl Environment for EnvKind {
    fn name(&self) -> &'static str {
        self.inner().name()
    }
    fn reset(&mut self, seed: u64) -> Vec<f32> {
        self.inner_mut().reset(seed)
    }
    fn step(&mut self, action: usize) -> Result<Step> {
        self.inner_mut().step(action)
    }
    fn num_actions(&self) -> usize {
        self.inner().num_actions()
    }
    fn obs_shape(&self) -> Vec<usize> {
        self.inner().obs_shape()
    }
    fn noop_budget(&self) -> usize {
        self.inner().noop_budget()
    }
}

/// Environment section of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub name: String,
    /// Catch grid width.
    pub width: usize,
    /// Catch grid height.
    pub height: usize,
    /// GridWorld side length.
    pub size: usize,
    /// GridWorld step limit.
    pub max_steps: usize,
    pub random_start: bool,
    /// Number of stacked frames fed to the network.
    pub frames: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { name: "catch".into(), width: 10, height: 10, size: 5, max_steps: 20, random_start: true, frames: 1 }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Config("env.frames must be at least 1".into()));
        }
        make_env(self).map(|_| ())
    }

    /// Network input shape after frame stacking.
    pub fn input_shape(&self) -> Result<Vec<usize>> {
        let mut shape = make_env(self)?.obs_shape();
        shape[0] *= self.frames;
        Ok(shape)
    }
}

/// Looks an environment up by name.
pub fn make_env(cfg: &EnvConfig) -> Result<EnvKind> {
    match cfg.name.as_str() {
        "catch" => Ok(EnvKind::Catch(CatchEnv::new(cfg.width, cfg.height)?)),
        "gridworld" => Ok(EnvKind::Gridworld(GridWorldEnv::new(cfg.size, cfg.max_steps, cfg.random_start)?)),
        other => Err(Error::Config(format!("unknown environment {other:?}; expected one of {ENV_NAMES:?}"))),
    }
}

/// Scales raw frames into `[0, 1]` and stacks the last `frames` of them
/// along the channel axis, oldest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub frame_len: usize,
    pub frames: usize,
    pub lo: f32,
    pub hi: f32,
    pub stack: VecDeque<Vec<f32>>,
}

impl Preprocessor {
    /// For raw values already in `[0, 1]`.
    pub fn new(frame_len: usize, frames: usize) -> Self {
        Self::with_range(frame_len, frames, 0.0, 1.0)
    }

    pub fn with_range(frame_len: usize, frames: usize, lo: f32, hi: f32) -> Self {
        Self { frame_len, frames: frames.max(1), lo, hi, stack: VecDeque::new() }
    }

    pub fn for_env(env: &dyn Environment, frames: usize) -> Self {
        Self::new(env.obs_shape().iter().product(), frames)
    }

    fn scale(&self, obs: &[f32]) -> Result<Vec<f32>> {
        ensure_len("observation frame", obs.len(), self.frame_len)?;
        let span = self.hi - self.lo;
        Ok(obs.iter().map(|&x| ((x - self.lo) / span).clamp(0.0, 1.0)).collect())
    }

    /// First frame of an episode: fills the whole stack with it.
    pub fn reset(&mut self, obs: &[f32]) -> Result<Vec<f32>> {
        let frame = self.scale(obs)?;
        self.stack = std::iter::repeat_n(frame, self.frames).collect();
        Ok(self.current())
    }

    pub fn push(&mut self, obs: &[f32]) -> Result<Vec<f32>> {
        let frame = self.scale(obs)?;
        if self.stack.is_empty() {
            return self.reset(obs);
        }
        self.stack.pop_front();
        self.stack.push_back(frame);
        Ok(self.current())
    }

    pub fn current(&self) -> Vec<f32> {
        self.stack.iter().flatten().copied().collect()
    }
}

/// Preprocesses a single frame without stacking.
pub fn preprocess(obs: &[f32], frame_len: usize) -> Result<Vec<f32>> {
    Preprocessor::new(frame_len, 1).reset(obs)
}

/// Result of an evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub mean: f64,
    pub returns: Vec<f64>,
}

impl EvalResult {
    pub fn from_returns(returns: Vec<f64>) -> Self {
        let mean = returns.iter().sum::<f64>() / returns.len().max(1) as f64;
        Self { mean, returns }
    }
}

/// Evaluation protocol knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalProtocol {
    pub episodes: usize,
    pub epsilon: f64,
    pub noop_max: usize,
    pub frames: usize,
}

/// Plays `protocol.episodes` episodes. Each starts with `k` no-ops, `k`
/// uniform in `[0, min(noop_max, env.noop_budget())]`, then acts
/// epsilon-greedily on `greedy(state)`. `on_state` sees every state that
/// reaches action selection.
pub fn run_episodes<E, R, G>(env: &mut E, protocol: &EvalProtocol, rng: &mut R, mut greedy: G) -> Result<EvalResult>
where
    E: Environment + ?Sized,
    R: Rng + ?Sized,
    G: FnMut(&[f32]) -> Result<usize>,
{
    if protocol.episodes == 0 {
        return Err(Error::contract("evaluation needs at least one episode"));
    }
    let n_actions = env.num_actions();
    let mut pre = Preprocessor::new(env.obs_shape().iter().product(), protocol.frames);
    let mut returns = Vec::with_capacity(protocol.episodes);
    for _ in 0..protocol.episodes {
        let seed = rng.next_u64();
        let mut state = pre.reset(&env.reset(seed))?;
        let noops = rng.gen_range(0..=protocol.noop_max.min(env.noop_budget()));
        let mut total = 0.0;
        let mut done = false;
        for _ in 0..noops {
            let step = env.step(0)?;
            total += step.reward;
            state = pre.push(&step.obs)?;
            if step.done {
                done = true;
                break;
            }
        }
        while !done {
            let action = epsilon_greedy(protocol.epsilon, n_actions, rng, || greedy(&state))?;
            let step = env.step(action)?;
            total += step.reward;
            state = pre.push(&step.obs)?;
            done = step.done;
        }
        returns.push(total);
    }
    Ok(EvalResult::from_returns(returns))
}

/// Evaluates a network with the standard protocol.
pub fn evaluate<F: Real, E: Environment + ?Sized, R: Rng + ?Sized>(
    net: &QNetwork<F>,
    env: &mut E,
    protocol: &EvalProtocol,
    rng: &mut R,
) -> Result<EvalResult> {
    if net.num_actions() != env.num_actions() {
        return Err(Error::contract("network and environment disagree on the action count"));
    }
    run_episodes(env, protocol, rng, |state| {
        let x: Vec<F> = state.iter().map(|&v| F::of(v as f64)).collect();
        Ok(greedy_action(&net.q_values(&x)?))
    })
}
