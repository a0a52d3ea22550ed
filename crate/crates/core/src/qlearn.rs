//! Deep Q-learning on top of the spiking network.
//!
//! The loss is the squared Bellman error `(y - Q(s, a; theta))^2` with
//! `y = r + gamma max_a' Q(s', a'; theta-)` from a lagged target network.
//! Its gradient seeds `dL/dQ` only at the taken action's output neuron and
//! hands the rest to [`crate::grad::backward_recursive`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{make_env, EnvKind, Environment, EvalProtocol, Preprocessor};
use crate::error::{ensure_len, Error, Result};
use crate::grad::{backward_accumulate, GradientSet};
use crate::network::QNetwork;
use crate::real::Real;
use crate::runtime::{rng_stream, MetricsRow, RunConfig};

/// One replay record.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f32>,
    pub a: usize,
    pub r: f32,
    pub s_next: Vec<f32>,
    pub done: bool,
}

/// Fixed-capacity FIFO of transitions with uniform sampling (with
/// replacement).
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    /// Slot the next push overwrites once full.
    head: usize,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, rng: ChaCha8Rng) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { capacity, items: Vec::with_capacity(capacity.min(1 << 16)), head: 0, rng }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    /// Contents from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let (newer, older) = self.items.split_at(self.head);
        older.iter().chain(newer)
    }

    pub fn sample(&mut self, batch: usize) -> Result<Vec<&Transition>> {
        if self.items.is_empty() {
            return Err(Error::contract("cannot sample from an empty replay buffer"));
        }
        let idx: Vec<usize> = (0..batch).map(|_| self.rng.gen_range(0..self.items.len())).collect();
        Ok(idx.into_iter().map(|i| &self.items[i]).collect())
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    /// Rebuilds a buffer from oldest-first contents.
    pub fn restore(capacity: usize, items: Vec<Transition>, rng: ChaCha8Rng) -> Result<Self> {
        if items.len() > capacity {
            return Err(Error::contract("replay contents exceed capacity"));
        }
        let head = 0;
        Ok(Self { capacity, items, head, rng })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Plain squared error.
    #[default]
    Mse,
    /// Squared error with the residual's gradient clipped to `[-1, 1]`.
    Huber,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Environment steps between target-network syncs.
    pub target_sync: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_anneal_steps: usize,
    pub eval_epsilon: f64,
    pub replay_capacity: usize,
    /// Environment steps collected before the first update.
    pub warmup: usize,
    /// Environment steps per gradient update.
    pub train_freq: usize,
    pub loss: LossKind,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lr: 0.00025,
            batch_size: 32,
            target_sync: 1000,
            epsilon_start: 1.0,
            epsilon_end: 0.1,
            epsilon_anneal_steps: 50_000,
            eval_epsilon: 0.05,
            replay_capacity: 50_000,
            warmup: 1000,
            train_freq: 4,
            loss: LossKind::Mse,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} invalid", self.lr)));
        }
        if !(unit(self.epsilon_start) && unit(self.epsilon_end) && unit(self.eval_epsilon)) {
            return Err(Error::Config("epsilon values must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 || self.target_sync == 0 || self.replay_capacity == 0 || self.train_freq == 0 {
            return Err(Error::Config(
                "batch_size, target_sync, replay_capacity and train_freq must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Behaviour epsilon after `step` environment steps: linear from start to
    /// end over the anneal window, constant afterwards.
    pub fn epsilon_at(&self, step: u64) -> f64 {
        if self.epsilon_anneal_steps == 0 {
            return self.epsilon_end;
        }
        let frac = (step as f64 / self.epsilon_anneal_steps as f64).min(1.0);
        self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)
    }
}

/// Online parameters and their lagged target copy.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetPair<F> {
    pub online: QNetwork<F>,
    pub target: QNetwork<F>,
    pub steps_since_sync: u64,
}

impl<F: Real> TargetPair<F> {
    pub fn new(online: QNetwork<F>) -> Self {
        Self { target: online.clone(), online, steps_since_sync: 0 }
    }

    pub fn sync(&mut self) {
        self.target.clone_from(&self.online);
        self.steps_since_sync = 0;
    }
}

fn to_real<F: Real>(x: &[f32]) -> Vec<F> {
    x.iter().map(|&v| F::of(v as f64)).collect()
}

/// `y = r` for terminal transitions, else `r + gamma max_a' Q(s', a'; theta-)`.
pub fn td_target<F: Real>(t: &Transition, target: &QNetwork<F>, gamma: f64) -> Result<F> {
    let r = F::of(t.r as f64);
    if t.done {
        return Ok(r);
    }
    let q = target.q_values(&to_real(&t.s_next))?;
    let best = q.iter().copied().fold(F::neg_infinity(), F::max);
    Ok(r + F::of(gamma) * best)
}

/// Mean squared Bellman error over the batch and its parameter gradient.
pub fn loss_and_grad<F: Real>(
    batch: &[&Transition],
    nets: &TargetPair<F>,
    hp: &HyperParams,
) -> Result<(f64, GradientSet<F>)> {
    if batch.is_empty() {
        return Err(Error::contract("loss_and_grad needs a non-empty batch"));
    }
    let n_actions = nets.online.num_actions();
    let scale = F::of(2.0 / batch.len() as f64);
    let mut total = GradientSet::zeros_like(&nets.online);
    let mut loss = 0.0;
    for t in batch {
        if t.a >= n_actions {
            return Err(Error::contract(format!("action {} out of range", t.a)));
        }
        ensure_len("transition next state", t.s_next.len(), t.s.len())?;
        let y = td_target(t, &nets.target, hp.gamma)?;
        let (q, trace) = nets.online.forward(&to_real(&t.s))?;
        let residual = y - q[t.a];
        let r = residual.as_f64();
        let pushed = match hp.loss {
            LossKind::Mse => {
                loss += r * r;
                residual
            }
            LossKind::Huber => {
                // Matches the clipped gradient: r^2 inside [-1, 1], 2|r| - 1 outside.
                loss += if r.abs() <= 1.0 { r * r } else { 2.0 * r.abs() - 1.0 };
                residual.max(-F::one()).min(F::one())
            }
        };
        if pushed == F::zero() {
            continue;
        }
        let mut seed = vec![F::zero(); n_actions];
        seed[t.a] = -scale * pushed;
        backward_accumulate(&trace, &nets.online, &seed, &mut total)?;
    }
    Ok((loss / batch.len() as f64, total))
}

/// Bias-corrected Adam with `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    pub t: u64,
}

impl<F: Real> Adam<F> {
    pub fn new(net: &QNetwork<F>) -> Self {
        let zeros: Vec<Vec<F>> = net.params().map(|w| vec![F::zero(); w.len()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, net: &mut QNetwork<F>, grads: &GradientSet<F>, lr: f64) -> Result<()> {
        ensure_len("gradient layers", grads.layers.len(), self.m.len())?;
        for (k, w) in net.params().enumerate() {
            ensure_len("gradient layer", grads.layers[k].len(), w.len())?;
            ensure_len("optimizer moments", self.m[k].len(), w.len())?;
        }
        self.t += 1;
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let (one_b1, one_b2) = (F::one() - b1, F::one() - b2);
        let t = self.t as i32;
        let correction1 = F::one() - b1.powi(t);
        let correction2 = F::one() - b2.powi(t);
        let lr = F::of(lr);
        let eps = F::of(self.eps);
        for (k, w) in net.params_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads.layers[k]);
            for i in 0..w.len() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                let m_hat = m[i] / correction1;
                let v_hat = v[i] / correction2;
                w[i] = w[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn greedy_action<F: Real>(q: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// With probability `epsilon` a uniform random action, else `greedy()`.
/// Always draws exactly one uniform number first.
pub fn epsilon_greedy<R: Rng + ?Sized>(
    epsilon: f64,
    n_actions: usize,
    rng: &mut R,
    greedy: impl FnOnce() -> Result<usize>,
) -> Result<usize> {
    if rng.gen::<f64>() < epsilon {
        Ok(rng.gen_range(0..n_actions))
    } else {
        greedy()
    }
}

pub fn select_action<F: Real, R: Rng + ?Sized>(
    net: &QNetwork<F>,
    obs: &[F],
    epsilon: f64,
    rng: &mut R,
) -> Result<usize> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::contract(format!("epsilon {epsilon} outside [0, 1]")));
    }
    epsilon_greedy(epsilon, net.num_actions(), rng, || Ok(greedy_action(&net.q_values(obs)?)))
}

/// Receives training events.
pub trait TrainHooks {
    fn on_row(&mut self, _row: &MetricsRow) -> Result<()> {
        Ok(())
    }

    /// Called after every environment step with the full trainer state.
    fn after_step(&mut self, _trainer: &Trainer) -> Result<()> {
        Ok(())
    }
}

/// Hooks that collect rows in memory.
#[derive(Debug, Default, Clone)]
pub struct RowCollector {
    pub rows: Vec<MetricsRow>,
}

impl TrainHooks for RowCollector {
    fn on_row(&mut self, row: &MetricsRow) -> Result<()> {
        self.rows.push(row.clone());
        Ok(())
    }
}

/// Loop schedule around the hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub total_steps: u64,
    /// Environment steps between evaluations; 0 disables evaluation.
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub noop_max: usize,
    /// Stop as soon as an evaluation reaches this mean return.
    pub target_return: Option<f64>,
    /// Environment steps between periodic checkpoints; 0 disables them.
    pub checkpoint_interval: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            total_steps: 150_000,
            eval_interval: 5_000,
            eval_episodes: 100,
            noop_max: 30,
            target_return: None,
            checkpoint_interval: 0,
        }
    }
}

/// Counters and per-episode bookkeeping of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub step: u64,
    pub episode: u64,
    pub episode_return: f64,
    pub last_loss: Option<f64>,
    pub last_eval: Option<f64>,
    pub best_eval: Option<f64>,
    pub stopped: bool,
}

/// Complete, resumable state of a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: RunConfig,
    pub env: EnvKind,
    pub eval_env: EnvKind,
    pub pre: Preprocessor,
    pub state: Vec<f32>,
    pub nets: TargetPair<f32>,
    pub adam: Adam<f32>,
    pub replay: ReplayBuffer,
    pub env_rng: ChaCha8Rng,
    pub policy_rng: ChaCha8Rng,
    pub eval_rng: ChaCha8Rng,
    pub progress: Progress,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let mut env = make_env(&config.env)?;
        let eval_env = env.clone();
        let online =
            config.network.build(&config.env.input_shape()?, env.num_actions(), &mut rng_stream(seed, "init"))?;
        let adam = Adam::new(&online);
        let replay = ReplayBuffer::new(config.hyper.replay_capacity, rng_stream(seed, "replay"));
        let mut env_rng = rng_stream(seed, "env");
        let mut pre = Preprocessor::for_env(&env, config.env.frames);
        let state = pre.reset(&env.reset(env_rng.gen()))?;
        Ok(Self {
            env,
            eval_env,
            pre,
            state,
            nets: TargetPair::new(online),
            adam,
            replay,
            env_rng,
            policy_rng: rng_stream(seed, "policy"),
            eval_rng: rng_stream(seed, "eval"),
            progress: Progress {
                step: 0,
                episode: 0,
                episode_return: 0.0,
                last_loss: None,
                last_eval: None,
                best_eval: None,
                stopped: false,
            },
            config,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.config.hyper.epsilon_at(self.progress.step)
    }

    pub fn eval_protocol(&self) -> EvalProtocol {
        EvalProtocol {
            episodes: self.config.train.eval_episodes,
            epsilon: self.config.hyper.eval_epsilon,
            noop_max: self.config.train.noop_max,
            frames: self.config.env.frames,
        }
    }

    /// Evaluates the online network on the evaluation stream.
    pub fn evaluate(&mut self) -> Result<f64> {
        let protocol = self.eval_protocol();
        Ok(crate::envs::evaluate(&self.nets.online, &mut self.eval_env, &protocol, &mut self.eval_rng)?.mean)
    }

    /// Advances one environment step, with any update, sync, evaluation and
    /// episode bookkeeping it triggers.
    pub fn step(&mut self, hooks: &mut dyn TrainHooks) -> Result<()> {
        let hp = self.config.hyper.clone();
        let epsilon = self.epsilon();
        let x: Vec<f32> = self.state.clone();
        let action = select_action(&self.nets.online, &x, epsilon, &mut self.policy_rng)?;
        let out = self.env.step(action)?;
        let next = self.pre.push(&out.obs)?;
        self.replay.push(Transition {
            s: std::mem::take(&mut self.state),
            a: action,
            r: out.reward as f32,
            s_next: next.clone(),
            done: out.done,
        });
        self.progress.episode_return += out.reward;
        self.progress.step += 1;
        self.nets.steps_since_sync += 1;
        let step = self.progress.step;

        if step > hp.warmup as u64 && step.is_multiple_of(hp.train_freq as u64) {
            let batch = self.replay.sample(hp.batch_size)?;
            let (loss, grads) = loss_and_grad(&batch, &self.nets, &hp)?;
            self.adam.step(&mut self.nets.online, &grads, hp.lr)?;
            self.progress.last_loss = Some(loss);
        }
        if self.nets.steps_since_sync >= hp.target_sync as u64 {
            self.nets.sync();
        }

        if out.done {
            hooks.on_row(&MetricsRow {
                step,
                episode: self.progress.episode,
                ret: Some(self.progress.episode_return),
                loss: self.progress.last_loss,
                epsilon,
                eval_mean: None,
            })?;
            self.progress.episode += 1;
            self.progress.episode_return = 0.0;
            let seed = self.env_rng.gen();
            self.state = self.pre.reset(&self.env.reset(seed))?;
        } else {
            self.state = next;
        }

        let sched = &self.config.train;
        if sched.eval_interval > 0 && step.is_multiple_of(sched.eval_interval) {
            let target = sched.target_return;
            let mean = self.evaluate()?;
            self.progress.last_eval = Some(mean);
            self.progress.best_eval = Some(self.progress.best_eval.map_or(mean, |b| b.max(mean)));
            hooks.on_row(&MetricsRow {
                step,
                episode: self.progress.episode,
                ret: None,
                loss: self.progress.last_loss,
                epsilon: self.epsilon(),
                eval_mean: Some(mean),
            })?;
            if target.is_some_and(|t| mean >= t) {
                self.progress.stopped = true;
            }
        }
        hooks.after_step(self)
    }

    /// Steps until `total_steps`, an early stop, or `until` (exclusive cap on
    /// the step counter), whichever comes first.
    pub fn run(&mut self, until: Option<u64>, hooks: &mut dyn TrainHooks) -> Result<()> {
        let end = until.unwrap_or(u64::MAX).min(self.config.train.total_steps);
        while self.progress.step < end && !self.progress.stopped {
            self.step(hooks)?;
        }
        Ok(())
    }
}

/// Convenience wrapper: trains a fresh run to completion.
pub fn train(config: RunConfig, hooks: &mut dyn TrainHooks) -> Result<Trainer> {
    let mut trainer = Trainer::new(config)?;
    trainer.run(None, hooks)?;
    Ok(trainer)
}
