//! Writer agents and the outer writing loop.
//!
//! A writer learns with its own rule (tabular Q-learning or DQN) while every
//! terminated episode is handed to zero or more books for a backward pass.
//! Books only observe: they never touch the writer's random stream or
//! parameters, so a run with books attached is bit-identical to one without.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::book::{Book, Episode, Transition};
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::neural::{AdamState, InputScaler, Mlp};
use crate::quantizer::{quantize, shape_reward, LinguisticState, QuantizerConfig};
use crate::scalar::Scalar;

/// Maps a state to an action.
pub trait Policy<T: Scalar> {
    fn act(&mut self, state: &[T]) -> usize;
}

impl<T: Scalar, F: FnMut(&[T]) -> usize> Policy<T> for F {
    fn act(&mut self, state: &[T]) -> usize {
        self(state)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn epsilon_greedy<T: Scalar, R: Rng + ?Sized>(q_values: &[T], epsilon: f64, rng: &mut R) -> usize {
    debug_assert!(!q_values.is_empty());
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        rng.gen_range(0..q_values.len())
    } else {
        argmax(q_values)
    }
}

/// Linear decay from `start` to `end` over `decay_steps`, constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: u64,
}

impl EpsilonSchedule {
    /// 1.0 → 0.05 over the first half of training.
    pub fn standard(total_steps: u64) -> Self {
        Self { start: 1.0, end: 0.05, decay_steps: (total_steps / 2).max(1) }
    }

    pub fn constant(epsilon: f64) -> Self {
        Self { start: epsilon, end: epsilon, decay_steps: 1 }
    }

    pub fn value(&self, step: u64) -> f64 {
        if step >= self.decay_steps {
            return self.end;
        }
        let frac = step as f64 / self.decay_steps as f64;
        self.start + (self.end - self.start) * frac
    }

    fn validate(&self) -> Result<()> {
        let ok = |e: f64| (0.0..=1.0).contains(&e);
        if !ok(self.start) || !ok(self.end) || self.decay_steps == 0 {
            return Err(Error::Config(format!("invalid epsilon schedule {self:?}")));
        }
        Ok(())
    }
}

/// Fixed-capacity ring of transitions with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T: Scalar> {
    items: Vec<Transition<T>>,
    capacity: usize,
    next: usize,
}

impl<T: Scalar> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { items: Vec::with_capacity(capacity.min(1 << 16)), capacity, next: 0 }
    }

    pub fn push(&mut self, tr: Transition<T>) {
        if self.items.len() < self.capacity {
            self.items.push(tr);
        } else {
            self.items[self.next] = tr;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Indices drawn uniformly with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| rng.gen_range(0..self.items.len())).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&Transition<T>> {
        self.sample_indices(n, rng).into_iter().map(|i| &self.items[i]).collect()
    }
}

/// Lookup-table Q-function over quantized states.
#[derive(Debug, Clone)]
pub struct TabularQ<T: Scalar> {
    quantizer: QuantizerConfig<T>,
    action_count: usize,
    table: HashMap<LinguisticState, Vec<T>>,
}

impl<T: Scalar> TabularQ<T> {
    pub fn new(quantizer: QuantizerConfig<T>, action_count: usize) -> Self {
        Self { quantizer, action_count, table: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Q-values of a state; unseen states read as zeros.
    pub fn values(&self, state: &[T]) -> Result<Vec<T>> {
        let key = quantize(state, &self.quantizer)?;
        Ok(self.table.get(&key).cloned().unwrap_or_else(|| vec![T::zero(); self.action_count]))
    }

    /// `Q(s,a) += alpha * (r + gamma * max Q(s') * [not terminal] - Q(s,a))`
    pub fn tabular_q_update(&mut self, tr: &Transition<T>, alpha: T, gamma: T) -> Result<()> {
        let bootstrap = if tr.terminal {
            T::zero()
        } else {
            let next = self.values(&tr.next_state)?;
            gamma * next[argmax(&next)]
        };
        let key = quantize(&tr.state, &self.quantizer)?;
        let row = self.table.entry(key).or_insert_with(|| vec![T::zero(); self.action_count]);
        let q = &mut row[tr.action];
        *q += alpha * (tr.reward + bootstrap - *q);
        Ok(())
    }
}

impl<T: Scalar> Policy<T> for TabularQ<T> {
    fn act(&mut self, state: &[T]) -> usize {
        self.values(state).map(|v| argmax(&v)).unwrap_or(0)
    }
}

/// Network Q-function: one Q-head, or a value net plus an advantage net
/// combined as `Q(s,a) = V(s) + A(s,a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub enum QHead<T: Scalar> {
    Single(Mlp<T>),
    Split { value: Mlp<T>, advantage: Mlp<T> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct QModel<T: Scalar> {
    pub scaler: InputScaler<T>,
    pub head: QHead<T>,
}

impl<T: Scalar> QModel<T> {
    pub fn single<R: Rng + ?Sized>(scaler: InputScaler<T>, hidden: &[usize], actions: usize, rng: &mut R) -> Result<Self> {
        let sizes = layer_sizes(scaler.dims(), hidden, actions);
        Ok(Self { scaler, head: QHead::Single(Mlp::new(&sizes, rng)?) })
    }

    pub fn split<R: Rng + ?Sized>(scaler: InputScaler<T>, hidden: &[usize], actions: usize, rng: &mut R) -> Result<Self> {
        let value = Mlp::new(&layer_sizes(scaler.dims(), hidden, 1), rng)?;
        let advantage = Mlp::new(&layer_sizes(scaler.dims(), hidden, actions), rng)?;
        Ok(Self { scaler, head: QHead::Split { value, advantage } })
    }

    pub fn action_count(&self) -> usize {
        match &self.head {
            QHead::Single(n) => n.output_dim(),
            QHead::Split { advantage, .. } => advantage.output_dim(),
        }
    }

    pub fn nets(&self) -> Vec<&Mlp<T>> {
        match &self.head {
            QHead::Single(n) => vec![n],
            QHead::Split { value, advantage } => vec![value, advantage],
        }
    }

    pub fn nets_mut(&mut self) -> Vec<&mut Mlp<T>> {
        match &mut self.head {
            QHead::Single(n) => vec![n],
            QHead::Split { value, advantage } => vec![value, advantage],
        }
    }

    pub fn q_values(&self, state: &[T]) -> Result<Vec<T>> {
        let x = self.scaler.scale(state);
        match &self.head {
            QHead::Single(n) => n.forward(&x),
            QHead::Split { value, advantage } => {
                let v = value.forward(&x)?[0];
                Ok(advantage.forward(&x)?.into_iter().map(|a| a + v).collect())
            }
        }
    }

    /// Greedy action. For the split head only the advantage net is consulted.
    pub fn greedy(&self, state: &[T]) -> Result<usize> {
        let x = self.scaler.scale(state);
        match &self.head {
            QHead::Single(n) => Ok(argmax(&n.forward(&x)?)),
            QHead::Split { advantage, .. } => Ok(argmax(&advantage.forward(&x)?)),
        }
    }

    /// Q-values at `state`, accumulating `dL/dparams` into `grads` (one
    /// buffer per net) where `dL/dQ` is produced by `out_grad` from the
    /// forward values.
    fn accumulate(
        &self,
        state: &[T],
        grads: &mut [Vec<T>],
        out_grad: impl FnOnce(&[T]) -> Vec<T>,
    ) -> Result<Vec<T>> {
        let x = self.scaler.scale(state);
        match &self.head {
            QHead::Single(n) => {
                let trace = n.forward_trace(&x)?;
                let q = trace.output().to_vec();
                let g = out_grad(&q);
                n.backward(&trace, &g, &mut grads[0])?;
                Ok(q)
            }
            QHead::Split { value, advantage } => {
                let tv = value.forward_trace(&x)?;
                let ta = advantage.forward_trace(&x)?;
                let v = tv.output()[0];
                let q: Vec<T> = ta.output().iter().map(|&a| a + v).collect();
                let g = out_grad(&q);
                let gv = g.iter().copied().sum::<T>();
                value.backward(&tv, &[gv], &mut grads[0])?;
                advantage.backward(&ta, &g, &mut grads[1])?;
                Ok(q)
            }
        }
    }

    pub fn optimizers(&self, learning_rate: T) -> Vec<AdamState<T>> {
        self.nets().iter().map(|n| AdamState::new(n.num_params(), learning_rate)).collect()
    }

    fn zero_grads(&self) -> Vec<Vec<T>> {
        self.nets().iter().map(|n| vec![T::zero(); n.num_params()]).collect()
    }

    fn apply(&mut self, optims: &mut [AdamState<T>], grads: &[Vec<T>]) -> Result<()> {
        for ((net, opt), g) in self.nets_mut().into_iter().zip(optims.iter_mut()).zip(grads) {
            opt.adam_step(net.params_mut(), g)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Policy<T> for QModel<T> {
    fn act(&mut self, state: &[T]) -> usize {
        self.greedy(state).unwrap_or(0)
    }
}

pub(crate) fn layer_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(hidden.len() + 2);
    sizes.push(input);
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    sizes
}

/// One Adam step on the mean squared TD error of `batch`, with targets
/// `r + gamma * max_a' target(s')[a']` (no bootstrap on terminal steps).
/// Returns the loss before the step.
pub fn dqn_update<T: Scalar>(
    online: &mut QModel<T>,
    target: &QModel<T>,
    optims: &mut [AdamState<T>],
    batch: &[&Transition<T>],
    gamma: T,
) -> Result<T> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let n = T::from_count(batch.len() as u64);
    let two = T::lit(2.0);
    let mut grads = online.zero_grads();
    let mut loss = T::zero();
    for tr in batch {
        let y = if tr.terminal {
            tr.reward
        } else {
            let next = target.q_values(&tr.next_state)?;
            tr.reward + gamma * next[argmax(&next)]
        };
        online.accumulate(&tr.state, &mut grads, |q| {
            let err = q[tr.action] - y;
            loss += err * err;
            let mut g = vec![T::zero(); q.len()];
            g[tr.action] = two * err / n;
            g
        })?;
    }
    let loss = loss / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("TD loss {loss}")));
    }
    online.apply(optims, &grads)?;
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WriterAlgo {
    TabularQ,
    Dqn,
}

impl WriterAlgo {
    pub fn name(&self) -> &'static str {
        match self {
            WriterAlgo::TabularQ => "tabular_q",
            WriterAlgo::Dqn => "dqn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tabular_q" | "tabular" => Ok(WriterAlgo::TabularQ),
            "dqn" => Ok(WriterAlgo::Dqn),
            other => Err(Error::Config(format!("unknown writer algorithm {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WriterConfig {
    pub algo: WriterAlgo,
    pub total_steps: u64,
    pub epsilon: EpsilonSchedule,
    pub gamma: f64,
    pub learning_rate: f64,
    /// Tabular step size.
    pub alpha: f64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    /// Environment steps between target-network syncs.
    pub target_sync_period: u64,
    /// Environment steps collected before the first DQN update.
    pub learning_starts: u64,
    pub hidden: Vec<usize>,
    /// Quantization levels for the tabular learner (env default when unset).
    pub levels: Option<u32>,
    /// Greedy evaluation every this many steps, for learning curves.
    pub eval_every: Option<u64>,
    pub eval_episodes: usize,
}

impl WriterConfig {
    pub fn new(algo: WriterAlgo, total_steps: u64) -> Self {
        Self {
            algo,
            total_steps,
            epsilon: EpsilonSchedule::standard(total_steps),
            gamma: 0.99,
            learning_rate: 5e-4,
            alpha: 0.1,
            replay_capacity: 50_000,
            batch_size: 32,
            target_sync_period: 500,
            learning_starts: 1_000,
            hidden: vec![64],
            levels: None,
            eval_every: None,
            eval_episodes: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be at least 1".into()));
        }
        self.epsilon.validate()?;
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if self.batch_size == 0 || self.replay_capacity == 0 || self.target_sync_period == 0 {
            return Err(Error::Config("batch size, replay capacity and sync period must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: u64,
    /// Cumulative environment steps at the end of the episode.
    pub steps: u64,
    /// Raw (unshaped) episode return.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub transitions: u64,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub enum WriterPolicy<T: Scalar> {
    Tabular(TabularQ<T>),
    Network(QModel<T>),
}

impl<T: Scalar> Policy<T> for WriterPolicy<T> {
    fn act(&mut self, state: &[T]) -> usize {
        match self {
            WriterPolicy::Tabular(t) => t.act(state),
            WriterPolicy::Network(m) => m.act(state),
        }
    }
}

#[derive(Debug, Clone)]
pub struct WriterOutcome<T: Scalar> {
    pub policy: WriterPolicy<T>,
    pub episodes: Vec<EpisodeRecord>,
    pub curve: Vec<CurvePoint>,
    /// Mean TD loss over consecutive windows of updates (DQN only).
    pub loss_windows: Vec<f64>,
}

const LOSS_WINDOW: usize = 1_000;

/// DQN learner state: online and target models plus replay.
#[derive(Debug, Clone)]
pub struct DqnAgent<T: Scalar> {
    pub online: QModel<T>,
    pub target: QModel<T>,
    optims: Vec<AdamState<T>>,
    pub replay: ReplayBuffer<T>,
    gamma: T,
    batch_size: usize,
    target_sync_period: u64,
    learning_starts: u64,
    observed: u64,
}

impl<T: Scalar> DqnAgent<T> {
    pub fn new(model: QModel<T>, cfg: &WriterConfig) -> Self {
        let optims = model.optimizers(T::lit(cfg.learning_rate));
        Self {
            target: model.clone(),
            online: model,
            optims,
            replay: ReplayBuffer::new(cfg.replay_capacity),
            gamma: T::lit(cfg.gamma),
            batch_size: cfg.batch_size,
            target_sync_period: cfg.target_sync_period,
            learning_starts: cfg.learning_starts,
            observed: 0,
        }
    }

    /// Stores a transition and, once warmed up, performs one update.
    pub fn observe<R: Rng + ?Sized>(&mut self, tr: Transition<T>, rng: &mut R) -> Result<Option<T>> {
        self.replay.push(tr);
        self.observed += 1;
        let mut loss = None;
        if self.observed >= self.learning_starts && self.replay.len() >= self.batch_size {
            let batch = self.replay.sample(self.batch_size, rng);
            loss = Some(dqn_update(&mut self.online, &self.target, &mut self.optims, &batch, self.gamma)?);
        }
        if self.observed.is_multiple_of(self.target_sync_period) {
            self.target = self.online.clone();
        }
        Ok(loss)
    }
}

enum Learner<T: Scalar> {
    Tabular { table: TabularQ<T>, alpha: T, gamma: T },
    Dqn(Box<DqnAgent<T>>),
}

impl<T: Scalar> Learner<T> {
    fn q_values(&self, state: &[T]) -> Result<Vec<T>> {
        match self {
            Learner::Tabular { table, .. } => table.values(state),
            Learner::Dqn(agent) => agent.online.q_values(state),
        }
    }

    fn observe<R: Rng + ?Sized>(&mut self, tr: Transition<T>, rng: &mut R) -> Result<Option<T>> {
        match self {
            Learner::Tabular { table, alpha, gamma } => {
                table.tabular_q_update(&tr, *alpha, *gamma)?;
                Ok(None)
            }
            Learner::Dqn(agent) => agent.observe(tr, rng),
        }
    }

    fn policy(&self) -> WriterPolicy<T> {
        match self {
            Learner::Tabular { table, .. } => WriterPolicy::Tabular(table.clone()),
            Learner::Dqn(agent) => WriterPolicy::Network(agent.online.clone()),
        }
    }
}

/// Runs the writing loop: act, learn every step, and feed each terminated
/// episode to every book in `books` (backward pass inside the book).
pub fn train_writer<T: Scalar>(
    env: &mut dyn Environment<T>,
    cfg: &WriterConfig,
    books: &mut [Book<T>],
    seed: u64,
) -> Result<WriterOutcome<T>> {
    cfg.validate()?;
    let spec = env.spec().clone();
    for b in books.iter() {
        if b.action_count() != spec.action_count || b.quantizer().dims() != spec.state_dims {
            return Err(Error::Incompatible(format!(
                "book shape ({} actions, {} dims) does not match {}",
                b.action_count(),
                b.quantizer().dims(),
                spec.id
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let learner = match cfg.algo {
        WriterAlgo::TabularQ => {
            let quantizer = match cfg.levels {
                Some(l) => spec.quantizer.with_levels(l),
                None => spec.quantizer.clone(),
            };
            Learner::Tabular {
                table: TabularQ::new(quantizer, spec.action_count),
                alpha: T::lit(cfg.alpha),
                gamma: T::lit(cfg.gamma),
            }
        }
        WriterAlgo::Dqn => {
            let scaler = InputScaler::from_quantizer(&spec.quantizer);
            let model = QModel::single(scaler, &cfg.hidden, spec.action_count, &mut rng)?;
            Learner::Dqn(Box::new(DqnAgent::new(model, cfg)))
        }
    };
    run_training(env, cfg, learner, books, seed, rng)
}

/// Continues DQN-style training from existing parameters (either head).
pub fn train_model<T: Scalar>(
    env: &mut dyn Environment<T>,
    cfg: &WriterConfig,
    model: QModel<T>,
    books: &mut [Book<T>],
    seed: u64,
) -> Result<WriterOutcome<T>> {
    cfg.validate()?;
    let rng = ChaCha8Rng::seed_from_u64(seed);
    run_training(env, cfg, Learner::Dqn(Box::new(DqnAgent::new(model, cfg))), books, seed, rng)
}

fn run_training<T: Scalar>(
    env: &mut dyn Environment<T>,
    cfg: &WriterConfig,
    mut learner: Learner<T>,
    books: &mut [Book<T>],
    seed: u64,
    mut rng: ChaCha8Rng,
) -> Result<WriterOutcome<T>> {
    let shaping = env.spec().shaping;
    let mut episodes = Vec::new();
    let mut curve = Vec::new();
    let mut loss_windows = Vec::new();
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    let mut memory: Vec<Transition<T>> = Vec::new();
    let mut score = 0.0;
    let mut state = env.reset(rng.gen());

    for step in 0..cfg.total_steps {
        let eps = cfg.epsilon.value(step);
        let action = epsilon_greedy(&learner.q_values(&state)?, eps, &mut rng);
        let res = env.step(action)?;
        score += res.reward.as_f64();
        let tr = Transition {
            state: std::mem::take(&mut state),
            action,
            reward: shape_reward(res.reward, shaping)?,
            next_state: res.next_state.clone(),
            terminal: res.terminal,
        };
        if let Some(loss) = learner.observe(tr.clone(), &mut rng)? {
            loss_sum += loss.as_f64();
            loss_n += 1;
            if loss_n == LOSS_WINDOW {
                loss_windows.push(loss_sum / loss_n as f64);
                (loss_sum, loss_n) = (0.0, 0);
            }
        }
        memory.push(tr);

        if res.terminal {
            let episode = Episode::new(std::mem::take(&mut memory))?;
            for book in books.iter_mut() {
                book.record_episode(&episode)?;
            }
            episodes.push(EpisodeRecord { episode: episodes.len() as u64, steps: step + 1, score });
            score = 0.0;
            state = env.reset(rng.gen());
        } else {
            state = res.next_state;
        }

        if let Some(every) = cfg.eval_every {
            if (step + 1) % every == 0 {
                let mut policy = learner.policy();
                let mut eval_env = env.boxed_fresh();
                let eval_seed = seed ^ (step + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                let s = evaluate(&mut policy, eval_env.as_mut(), cfg.eval_episodes, eval_seed)?;
                curve.push(CurvePoint { transitions: step + 1, score: s });
            }
        }
    }
    Ok(WriterOutcome { policy: learner.policy(), episodes, curve, loss_windows })
}

/// Mean raw return of `episodes` greedy rollouts. No learning happens.
pub fn evaluate<T: Scalar>(
    policy: &mut dyn Policy<T>,
    env: &mut dyn Environment<T>,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut state = env.reset(rng.gen());
        loop {
            let res = env.step(policy.act(&state))?;
            total += res.reward.as_f64();
            if res.terminal {
                break;
            }
            state = res.next_state;
        }
    }
    Ok(total / episodes as f64)
}
