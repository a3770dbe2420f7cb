//! Reader agents: fresh networks pre-trained from a published book alone,
//! optionally followed by conventional environment training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{layer_sizes, train_model, QHead, QModel, WriterConfig, WriterOutcome, WriterPolicy};
use crate::book::{decode_va, BookEntry, PublishedBook};
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::neural::{AdamState, InputScaler, Mlp};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReaderHead {
    QHead,
    VaHead,
}

impl ReaderHead {
    pub fn name(&self) -> &'static str {
        match self {
            ReaderHead::QHead => "q_head",
            ReaderHead::VaHead => "va_head",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "q_head" | "q" => Ok(ReaderHead::QHead),
            "va_head" | "va" => Ok(ReaderHead::VaHead),
            other => Err(Error::Config(format!("unknown reader head {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReaderConfig {
    pub head: ReaderHead,
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
}

impl Default for ReaderConfig {
    fn default() -> Self {
        Self { head: ReaderHead::QHead, iterations: 10_000, batch_size: 8, learning_rate: 5e-4, seed: 0, hidden: vec![64] }
    }
}

impl ReaderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("reader batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("reader learning rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }
}

fn check_net<T: Scalar>(net: &Mlp<T>, book: &PublishedBook<T>, outputs: usize) -> Result<()> {
    if net.input_dim() != book.state_dims() {
        return Err(Error::Shape { expected: book.state_dims(), actual: net.input_dim() });
    }
    if net.output_dim() != outputs {
        return Err(Error::Shape { expected: outputs, actual: net.output_dim() });
    }
    Ok(())
}

/// Squared error on known actions only, averaged over the batch. Unknown
/// actions get no gradient. Returns the loss.
fn q_batch<T: Scalar>(net: &Mlp<T>, scaler: &InputScaler<T>, batch: &[&BookEntry<T>], grads: &mut [T]) -> Result<T> {
    let n = T::from_count(batch.len() as u64);
    let two = T::lit(2.0);
    let mut loss = T::zero();
    for e in batch {
        let trace = net.forward_trace(&scaler.scale(&e.sample_state))?;
        let out = trace.output();
        let mut g = vec![T::zero(); out.len()];
        for a in e.known_actions() {
            let err = out[a] - e.q[a];
            loss += err * err;
            g[a] = two * err / n;
        }
        net.backward(&trace, &g, grads)?;
    }
    Ok(loss / n)
}

/// Supervises `net(sample)[a]` toward the stored `q[a]` for known actions,
/// sampling entries uniformly with replacement. Returns per-iteration losses.
pub fn pretrain_q_reader<T: Scalar>(book: &PublishedBook<T>, net: &mut Mlp<T>, cfg: &ReaderConfig) -> Result<Vec<T>> {
    cfg.validate()?;
    if book.is_empty() {
        return Err(Error::EmptyBook);
    }
    check_net(net, book, book.action_count())?;
    let scaler = InputScaler::from_quantizer(book.quantizer());
    let entries = book.entries();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(net.num_params(), T::lit(cfg.learning_rate));
    let mut losses = Vec::with_capacity(cfg.iterations as usize);
    let mut grads = vec![T::zero(); net.num_params()];
    for _ in 0..cfg.iterations {
        let batch: Vec<&BookEntry<T>> =
            (0..cfg.batch_size).map(|_| &entries[rng.gen_range(0..entries.len())]).collect();
        grads.iter_mut().for_each(|g| *g = T::zero());
        let loss = q_batch(net, &scaler, &batch, &mut grads)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("reader loss {loss}")));
        }
        adam.adam_step(net.params_mut(), &grads)?;
        losses.push(loss);
    }
    Ok(losses)
}

struct VaTarget<'a, T: Scalar> {
    state: &'a [T],
    value: T,
    advantages: Vec<(usize, T)>,
}

/// Supervises `v_net` toward the decoded state value and `a_net` toward the
/// decoded advantages of known actions. Entries that cannot be decoded are
/// skipped. Returns per-iteration losses (value plus advantage terms).
pub fn pretrain_va_reader<T: Scalar>(
    book: &PublishedBook<T>,
    v_net: &mut Mlp<T>,
    a_net: &mut Mlp<T>,
    cfg: &ReaderConfig,
) -> Result<Vec<T>> {
    cfg.validate()?;
    if book.is_empty() {
        return Err(Error::EmptyBook);
    }
    check_net(v_net, book, 1)?;
    check_net(a_net, book, book.action_count())?;
    let targets: Vec<VaTarget<T>> = book
        .entries()
        .iter()
        .filter_map(|e| decode_va(e).ok())
        .map(|d| VaTarget { state: d.state, value: d.value, advantages: d.advantages })
        .collect();
    if targets.is_empty() {
        return Err(Error::Decode("no entry in the book has a non-zero frequency".into()));
    }
    let scaler = InputScaler::from_quantizer(book.quantizer());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lr = T::lit(cfg.learning_rate);
    let mut adam_v = AdamState::new(v_net.num_params(), lr);
    let mut adam_a = AdamState::new(a_net.num_params(), lr);
    let mut gv = vec![T::zero(); v_net.num_params()];
    let mut ga = vec![T::zero(); a_net.num_params()];
    let n = T::from_count(cfg.batch_size as u64);
    let two = T::lit(2.0);
    let mut losses = Vec::with_capacity(cfg.iterations as usize);
    for _ in 0..cfg.iterations {
        gv.iter_mut().for_each(|g| *g = T::zero());
        ga.iter_mut().for_each(|g| *g = T::zero());
        let mut loss = T::zero();
        for _ in 0..cfg.batch_size {
            let t = &targets[rng.gen_range(0..targets.len())];
            let x = scaler.scale(t.state);
            let tv = v_net.forward_trace(&x)?;
            let err_v = tv.output()[0] - t.value;
            loss += err_v * err_v;
            v_net.backward(&tv, &[two * err_v / n], &mut gv)?;
            let ta = a_net.forward_trace(&x)?;
            let out = ta.output();
            let mut g = vec![T::zero(); out.len()];
            for &(a, adv) in &t.advantages {
                let err = out[a] - adv;
                loss += err * err;
                g[a] = two * err / n;
            }
            a_net.backward(&ta, &g, &mut ga)?;
        }
        let loss = loss / n;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("reader loss {loss}")));
        }
        adam_v.adam_step(v_net.params_mut(), &gv)?;
        adam_a.adam_step(a_net.params_mut(), &ga)?;
        losses.push(loss);
    }
    Ok(losses)
}

/// Builds freshly initialized reader networks (seeded by `cfg.seed`) and
/// pre-trains them from `book`.
pub fn train_reader<T: Scalar>(book: &PublishedBook<T>, cfg: &ReaderConfig) -> Result<QModel<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005E_ED0F_BEEF);
    let dims = book.state_dims();
    let scaler = InputScaler::from_quantizer(book.quantizer());
    let head = match cfg.head {
        ReaderHead::QHead => {
            let mut net = Mlp::new(&layer_sizes(dims, &cfg.hidden, book.action_count()), &mut rng)?;
            pretrain_q_reader(book, &mut net, cfg)?;
            QHead::Single(net)
        }
        ReaderHead::VaHead => {
            let mut value = Mlp::new(&layer_sizes(dims, &cfg.hidden, 1), &mut rng)?;
            let mut advantage = Mlp::new(&layer_sizes(dims, &cfg.hidden, book.action_count()), &mut rng)?;
            pretrain_va_reader(book, &mut value, &mut advantage, cfg)?;
            QHead::Split { value, advantage }
        }
    };
    Ok(QModel { scaler, head })
}

/// Conventional DQN-style training from the given parameters, with an empty
/// replay buffer. A split head trains `Q = V + A` end to end.
pub fn continue_training<T: Scalar>(
    model: QModel<T>,
    env: &mut dyn Environment<T>,
    cfg: &WriterConfig,
    seed: u64,
) -> Result<WriterOutcome<T>> {
    if cfg.total_steps == 0 {
        return Ok(WriterOutcome {
            policy: WriterPolicy::Network(model),
            episodes: Vec::new(),
            curve: Vec::new(),
            loss_windows: Vec::new(),
        });
    }
    train_model(env, cfg, model, &mut [], seed)
}

/// Greedy policy over a trained reader: argmax of the Q-head, or of the
/// advantage net for a split head.
pub fn greedy_policy_from<T: Scalar>(model: &QModel<T>) -> QModel<T> {
    model.clone()
}
