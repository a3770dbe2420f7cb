//! The BOOK store.
//!
//! Each entry covers one linguistic state `c_k` and holds, per action, a
//! credible Q-value and a capped hit frequency. Terminated episodes are
//! replayed backward so the successor of every transition has already been
//! updated when its predecessor reads it; terminal steps anchor the chain.
//!
//! Entries compete for a fixed capacity by entry-level priority
//! (importance × frequency, maximised over actions). When an insert hits the
//! capacity, the book keeps the top `prune_keep_fraction` and drops the rest.

use std::cmp::Ordering;
use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::{quantize, LinguisticState, QuantizerConfig};
use crate::scalar::Scalar;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct BookParams<T: Scalar> {
    pub gamma: T,
    pub f_limit: u32,
    /// Frequencies decay by one every `decay_period` recorded episodes.
    pub decay_period: u32,
    pub prune_keep_fraction: T,
}

impl<T: Scalar> Default for BookParams<T> {
    fn default() -> Self {
        Self {
            gamma: T::lit(0.99),
            f_limit: 20,
            decay_period: 100,
            prune_keep_fraction: T::lit(0.5),
        }
    }
}

impl<T: Scalar> BookParams<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > T::zero() && self.gamma <= T::one()) {
            return Err(Error::Config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if self.f_limit == 0 {
            return Err(Error::Config("frequency limit must be positive".into()));
        }
        if self.decay_period == 0 {
            return Err(Error::Config("decay period must be positive".into()));
        }
        if !(self.prune_keep_fraction > T::zero() && self.prune_keep_fraction <= T::one()) {
            return Err(Error::Config(format!(
                "prune keep fraction {} outside (0, 1]",
                self.prune_keep_fraction
            )));
        }
        Ok(())
    }
}

/// One cluster's record. Unknown actions carry `q = 0`, `f = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct BookEntry<T: Scalar> {
    pub key: LinguisticState,
    pub sample_state: Vec<T>,
    pub q: Vec<T>,
    pub f: Vec<u32>,
    pub known: Vec<bool>,
}

impl<T: Scalar> BookEntry<T> {
    pub fn new(key: LinguisticState, sample_state: Vec<T>, action_count: usize) -> Self {
        Self {
            key,
            sample_state,
            q: vec![T::zero(); action_count],
            f: vec![0; action_count],
            known: vec![false; action_count],
        }
    }

    pub fn action_count(&self) -> usize {
        self.q.len()
    }

    pub fn known_actions(&self) -> impl Iterator<Item = usize> + '_ {
        self.known.iter().enumerate().filter(|(_, &k)| k).map(|(a, _)| a)
    }

    pub fn known_count(&self) -> usize {
        self.known.iter().filter(|&&k| k).count()
    }

    /// Every frequency has decayed to zero.
    pub fn is_stale(&self) -> bool {
        self.f.iter().all(|&f| f == 0)
    }

    /// Highest known Q-value, lowest action index on ties.
    pub fn best_known_action(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for a in self.known_actions() {
            match best {
                Some(b) if self.q[a] <= self.q[b] => {}
                _ => best = Some(a),
            }
        }
        best
    }

    pub fn max_frequency(&self) -> u32 {
        self.f.iter().copied().max().unwrap_or(0)
    }
}

/// One environment step as stored for book writing. `reward` is shaped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Transition<T: Scalar> {
    pub state: Vec<T>,
    pub action: usize,
    pub reward: T,
    pub next_state: Vec<T>,
    pub terminal: bool,
}

/// A terminated episode: only the last step is terminal.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Episode<T: Scalar> {
    steps: Vec<Transition<T>>,
}

impl<T: Scalar> Episode<T> {
    pub fn new(steps: Vec<Transition<T>>) -> Result<Self> {
        if let Some((last, rest)) = steps.split_last() {
            if !last.terminal {
                return Err(Error::Input("episode does not end in a terminal step".into()));
            }
            if rest.iter().any(|t| t.terminal) {
                return Err(Error::Input("terminal step before the end of the episode".into()));
            }
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[Transition<T>] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Rule used to rank entries when pruning and publishing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Retention {
    /// importance × frequency
    #[default]
    Proposed,
    /// Uniformly random ranking, fixed per entry at insertion.
    Random { seed: u64 },
    /// Frequency alone.
    FrequencyOnly,
    /// Magnitude of the most recent update residual `|q_target - q_old|`.
    PerStyle,
}

impl Retention {
    pub fn name(&self) -> &'static str {
        match self {
            Retention::Proposed => "proposed",
            Retention::Random { .. } => "random",
            Retention::FrequencyOnly => "frequency_only",
            Retention::PerStyle => "per_style",
        }
    }
}

/// Blending weight kept by the stored value: `f_current / (f_current + f_successor)`.
///
/// Panics if both frequencies are zero; successor frequencies start at 1.
pub fn beta<T: Scalar>(f_current: u32, f_successor: u32) -> T {
    assert!(
        f_current > 0 || f_successor > 0,
        "beta is undefined when both frequencies are zero"
    );
    let cur = T::from_count(f_current as u64);
    cur / (cur + T::from_count(f_successor as u64))
}

/// Largest minus smallest known Q-value; zero with fewer than two known actions.
pub fn importance<T: Scalar>(entry: &BookEntry<T>) -> T {
    let mut known = entry.known_actions().map(|a| entry.q[a]);
    let Some(first) = known.next() else {
        return T::zero();
    };
    let (lo, hi) = known.fold((first, first), |(lo, hi), q| (lo.min(q), hi.max(q)));
    hi - lo
}

pub fn priority<T: Scalar>(entry: &BookEntry<T>, action: usize) -> T {
    importance(entry) * T::from_count(entry.f[action] as u64)
}

/// Entry-level priority: the maximum of [`priority`] over actions.
pub fn entry_priority<T: Scalar>(entry: &BookEntry<T>) -> T {
    importance(entry) * T::from_count(entry.max_frequency() as u64)
}

/// Q-form decoding: one `(state, action, q)` per known action.
pub fn decode_q<T: Scalar>(entry: &BookEntry<T>) -> Vec<(&[T], usize, T)> {
    entry
        .known_actions()
        .map(|a| (entry.sample_state.as_slice(), a, entry.q[a]))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedVa<'a, T: Scalar> {
    pub state: &'a [T],
    pub value: T,
    pub advantages: Vec<(usize, T)>,
}

/// Value/advantage decoding: `V` is the frequency-weighted mean of the known
/// Q-values and `A(a) = Q(a) - V`.
pub fn decode_va<T: Scalar>(entry: &BookEntry<T>) -> Result<DecodedVa<'_, T>> {
    let mut weight = T::zero();
    let mut weighted = T::zero();
    for a in entry.known_actions() {
        let f = T::from_count(entry.f[a] as u64);
        weight += f;
        weighted += f * entry.q[a];
    }
    if weight <= T::zero() {
        return Err(Error::Decode("all hit frequencies are zero".into()));
    }
    let value = weighted / weight;
    let advantages = entry.known_actions().map(|a| (a, entry.q[a] - value)).collect();
    Ok(DecodedVa { state: &entry.sample_state, value, advantages })
}

#[derive(Debug, Clone)]
struct Slot<T: Scalar> {
    entry: BookEntry<T>,
    seq: u64,
    hits: u64,
    residual: Vec<T>,
    tag: T,
}

/// Metadata attached when publishing.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PublishMeta {
    pub env_id: String,
    pub writer_algo: String,
}

impl PublishMeta {
    pub fn new(env_id: impl Into<String>, writer_algo: impl Into<String>) -> Self {
        Self { env_id: env_id.into(), writer_algo: writer_algo.into() }
    }
}

#[derive(Debug, Clone)]
pub struct Book<T: Scalar> {
    entries: IndexMap<LinguisticState, Slot<T>>,
    capacity: usize,
    action_count: usize,
    params: BookParams<T>,
    quantizer: QuantizerConfig<T>,
    retention: Retention,
    rng: ChaCha8Rng,
    next_seq: u64,
    episodes: u64,
    prunes: u64,
}

impl<T: Scalar> Book<T> {
    pub fn new(
        quantizer: QuantizerConfig<T>,
        action_count: usize,
        capacity: usize,
        params: BookParams<T>,
    ) -> Result<Self> {
        quantizer.validate()?;
        params.validate()?;
        if action_count == 0 {
            return Err(Error::Config("action count must be positive".into()));
        }
        if capacity == 0 {
            return Err(Error::Config("capacity must be positive".into()));
        }
        Ok(Self {
            entries: IndexMap::new(),
            capacity,
            action_count,
            params,
            quantizer,
            retention: Retention::Proposed,
            rng: ChaCha8Rng::seed_from_u64(0),
            next_seq: 0,
            episodes: 0,
            prunes: 0,
        })
    }

    pub fn with_retention(mut self, retention: Retention) -> Self {
        if let Retention::Random { seed } = retention {
            self.rng = ChaCha8Rng::seed_from_u64(seed);
        }
        self.retention = retention;
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Changes the capacity, pruning immediately if the book is now over it.
    pub fn set_capacity(&mut self, capacity: usize) -> Result<()> {
        if capacity == 0 {
            return Err(Error::Config("capacity must be positive".into()));
        }
        self.capacity = capacity;
        self.prune();
        Ok(())
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn params(&self) -> &BookParams<T> {
        &self.params
    }

    pub fn quantizer(&self) -> &QuantizerConfig<T> {
        &self.quantizer
    }

    pub fn retention(&self) -> Retention {
        self.retention
    }

    pub fn episodes_recorded(&self) -> u64 {
        self.episodes
    }

    pub fn prune_count(&self) -> u64 {
        self.prunes
    }

    pub fn entry(&self, key: &LinguisticState) -> Option<&BookEntry<T>> {
        self.entries.get(key).map(|s| &s.entry)
    }

    /// Entries in insertion order.
    pub fn entries(&self) -> impl Iterator<Item = &BookEntry<T>> {
        self.entries.values().map(|s| &s.entry)
    }

    /// Total updates absorbed by an entry (uncapped, never decays).
    pub fn hits(&self, key: &LinguisticState) -> Option<u64> {
        self.entries.get(key).map(|s| s.hits)
    }

    /// Ranking score of an entry under this book's retention rule.
    pub fn retention_score(&self, key: &LinguisticState) -> Option<T> {
        self.entries.get(key).map(|s| self.score(s))
    }

    pub fn key_of(&self, state: &[T]) -> Result<LinguisticState> {
        quantize(state, &self.quantizer)
    }

    /// Target value and successor frequency for one transition.
    pub fn credible_target(&self, tr: &Transition<T>) -> Result<(T, u32)> {
        if tr.terminal {
            return Ok((tr.reward, 1));
        }
        let next = quantize(&tr.next_state, &self.quantizer)?;
        let successor = self
            .entries
            .get(&next)
            .and_then(|s| s.entry.best_known_action().map(|a| (&s.entry, a)));
        Ok(match successor {
            // A known successor whose frequency decayed to zero still counts once.
            Some((e, a)) => (tr.reward + self.params.gamma * e.q[a], e.f[a].max(1)),
            None => (tr.reward, 1),
        })
    }

    pub fn update_entry(
        &mut self,
        key: LinguisticState,
        action: usize,
        sample: &[T],
        q_target: T,
        f_successor: u32,
    ) -> Result<()> {
        if action >= self.action_count {
            return Err(Error::Input(format!(
                "action {action} out of range for {} actions",
                self.action_count
            )));
        }
        if !q_target.is_finite() {
            return Err(Error::NonFinite(format!("q target {q_target}")));
        }
        if f_successor == 0 {
            return Err(Error::Contract("successor frequency must be at least 1".into()));
        }
        if key.dims() != self.quantizer.dims() || sample.len() != self.quantizer.dims() {
            return Err(Error::Shape { expected: self.quantizer.dims(), actual: sample.len() });
        }
        if !self.entries.contains_key(&key) {
            if self.entries.len() >= self.capacity {
                self.make_room();
            }
            let tag = if matches!(self.retention, Retention::Random { .. }) {
                T::lit(self.rng.gen::<f64>())
            } else {
                T::zero()
            };
            let slot = Slot {
                entry: BookEntry::new(key.clone(), sample.to_vec(), self.action_count),
                seq: self.next_seq,
                hits: 0,
                residual: vec![T::zero(); self.action_count],
                tag,
            };
            self.next_seq += 1;
            self.entries.insert(key.clone(), slot);
        }
        let f_limit = self.params.f_limit;
        let slot = self.entries.get_mut(&key).expect("entry present");
        let e = &mut slot.entry;
        let old = e.q[action];
        let f = e.f[action];
        // (1 - beta) * target + beta * old, written so that target == old is exact.
        let w = T::one() - beta::<T>(f, f_successor);
        let blended = old + w * (q_target - old);
        let updated = if f == 0 { q_target } else { blended.max(old.min(q_target)).min(old.max(q_target)) };
        slot.residual[action] = (q_target - old).abs();
        e.q[action] = updated;
        e.f[action] = f.saturating_add(f_successor).min(f_limit);
        e.known[action] = true;
        slot.hits += 1;
        Ok(())
    }

    /// Backward pass over a terminated episode, then periodic decay.
    pub fn record_episode(&mut self, episode: &Episode<T>) -> Result<()> {
        if episode.is_empty() {
            return Ok(());
        }
        for tr in episode.steps().iter().rev() {
            let (q_target, f_successor) = self.credible_target(tr)?;
            let key = quantize(&tr.state, &self.quantizer)?;
            self.update_entry(key, tr.action, &tr.state, q_target, f_successor)?;
        }
        self.episodes += 1;
        if self.episodes.is_multiple_of(self.params.decay_period as u64) {
            self.decay();
        }
        Ok(())
    }

    pub fn decay(&mut self) {
        for slot in self.entries.values_mut() {
            for f in slot.entry.f.iter_mut() {
                *f = f.saturating_sub(1);
            }
        }
    }

    /// Shrinks an over-capacity book to its top `ceil(capacity * keep_fraction)` entries.
    pub fn prune(&mut self) {
        if self.entries.len() > self.capacity {
            self.retain_top(self.keep_count());
        }
    }

    /// Returns the top `min(n, len)` entries by retention score.
    pub fn publish(&self, n: usize, meta: &PublishMeta) -> Result<PublishedBook<T>> {
        if n == 0 {
            return Err(Error::Config("publish size must be at least 1".into()));
        }
        let ranked = self.ranked_indices();
        let entries = ranked
            .into_iter()
            .take(n)
            .map(|i| self.entries[i].entry.clone())
            .collect();
        Ok(PublishedBook {
            entries,
            quantizer: self.quantizer.clone(),
            action_count: self.action_count,
            gamma: self.params.gamma,
            env_id: meta.env_id.clone(),
            writer_algo: meta.writer_algo.clone(),
        })
    }

    fn keep_count(&self) -> usize {
        let k = (T::from_count(self.capacity as u64) * self.params.prune_keep_fraction).ceil();
        k.to_usize().unwrap_or(self.capacity).min(self.capacity)
    }

    fn make_room(&mut self) {
        let keep = self.keep_count().min(self.capacity - 1);
        self.retain_top(keep);
    }

    fn retain_top(&mut self, keep: usize) {
        let ranked = self.ranked_indices();
        let mut flags = vec![false; self.entries.len()];
        for &i in ranked.iter().take(keep) {
            flags[i] = true;
        }
        let mut idx = 0;
        self.entries.retain(|_, _| {
            let k = flags[idx];
            idx += 1;
            k
        });
        self.prunes += 1;
    }

    fn score(&self, slot: &Slot<T>) -> T {
        match self.retention {
            Retention::Proposed => entry_priority(&slot.entry),
            Retention::FrequencyOnly => T::from_count(slot.entry.max_frequency() as u64),
            Retention::Random { .. } => slot.tag,
            Retention::PerStyle => {
                slot.residual.iter().copied().fold(T::zero(), |m, r| m.max(r))
            }
        }
    }

    /// Indices into `entries`: live before stale, score descending, oldest first.
    fn ranked_indices(&self) -> Vec<usize> {
        let keyed: Vec<(bool, T, u64)> = self
            .entries
            .values()
            .map(|s| (s.entry.is_stale(), self.score(s), s.seq))
            .collect();
        let mut order: Vec<usize> = (0..keyed.len()).collect();
        order.sort_by(|&i, &j| {
            let (si, pi, qi) = keyed[i];
            let (sj, pj, qj) = keyed[j];
            si.cmp(&sj)
                .then_with(|| pj.partial_cmp(&pi).unwrap_or(Ordering::Equal))
                .then_with(|| qi.cmp(&qj))
        });
        order
    }
}

/// Immutable top-N snapshot of a book, the transfer artifact between
/// writer and reader runs.
#[derive(Debug, Clone, PartialEq)]
pub struct PublishedBook<T: Scalar> {
    entries: Vec<BookEntry<T>>,
    quantizer: QuantizerConfig<T>,
    action_count: usize,
    gamma: T,
    env_id: String,
    writer_algo: String,
}

#[derive(Serialize)]
#[serde(bound = "")]
struct BookFileRef<'a, T: Scalar> {
    format_version: u32,
    env_id: &'a str,
    writer_algo: &'a str,
    action_count: usize,
    gamma: T,
    quantizer: &'a QuantizerConfig<T>,
    entries: Vec<EntryRecordRef<'a, T>>,
}

#[derive(Serialize)]
#[serde(bound = "")]
struct EntryRecordRef<'a, T: Scalar> {
    bins: &'a [u32],
    sample: &'a [T],
    q: &'a [T],
    f: &'a [u32],
    known: &'a [bool],
}

#[derive(Deserialize)]
#[serde(bound = "", deny_unknown_fields)]
struct BookFile<T: Scalar> {
    format_version: u32,
    env_id: String,
    writer_algo: String,
    action_count: usize,
    gamma: T,
    quantizer: QuantizerConfig<T>,
    entries: Vec<EntryRecord<T>>,
}

#[derive(Deserialize)]
#[serde(bound = "", deny_unknown_fields)]
struct EntryRecord<T: Scalar> {
    bins: Vec<u32>,
    sample: Vec<T>,
    q: Vec<T>,
    f: Vec<u32>,
    known: Vec<bool>,
}

impl<T: Scalar> PublishedBook<T> {
    pub fn entries(&self) -> &[BookEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn quantizer(&self) -> &QuantizerConfig<T> {
        &self.quantizer
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn state_dims(&self) -> usize {
        self.quantizer.dims()
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }

    pub fn env_id(&self) -> &str {
        &self.env_id
    }

    pub fn writer_algo(&self) -> &str {
        &self.writer_algo
    }

    /// Re-ranks by importance × frequency (stable on the current order) and
    /// keeps the first `n`.
    pub fn top(&self, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("publish size must be at least 1".into()));
        }
        let mut order: Vec<(T, bool, usize)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (entry_priority(e), e.is_stale(), i))
            .collect();
        order.sort_by(|a, b| {
            a.1.cmp(&b.1)
                .then_with(|| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal))
                .then_with(|| a.2.cmp(&b.2))
        });
        Ok(Self {
            entries: order.into_iter().take(n).map(|(_, _, i)| self.entries[i].clone()).collect(),
            ..self.clone_header()
        })
    }

    fn clone_header(&self) -> Self {
        Self {
            entries: Vec::new(),
            quantizer: self.quantizer.clone(),
            action_count: self.action_count,
            gamma: self.gamma,
            env_id: self.env_id.clone(),
            writer_algo: self.writer_algo.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = BookFileRef {
            format_version: FORMAT_VERSION,
            env_id: &self.env_id,
            writer_algo: &self.writer_algo,
            action_count: self.action_count,
            gamma: self.gamma,
            quantizer: &self.quantizer,
            entries: self
                .entries
                .iter()
                .map(|e| EntryRecordRef {
                    bins: e.key.bins(),
                    sample: &e.sample_state,
                    q: &e.q,
                    f: &e.f,
                    known: &e.known,
                })
                .collect(),
        };
        let mut s = serde_json::to_string(&file)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: BookFile<T> = serde_json::from_str(text)?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format_version {}",
                file.format_version
            )));
        }
        file.quantizer.validate().map_err(|e| Error::Format(e.to_string()))?;
        if file.action_count == 0 {
            return Err(Error::Format("action_count must be positive".into()));
        }
        let dims = file.quantizer.dims();
        let a = file.action_count;
        let mut entries = Vec::with_capacity(file.entries.len());
        for (i, r) in file.entries.into_iter().enumerate() {
            let bad = |msg: &str| Error::Format(format!("entry {i}: {msg}"));
            if r.bins.len() != dims || r.sample.len() != dims {
                return Err(bad("bins/sample length does not match quantizer dimensions"));
            }
            if r.q.len() != a || r.f.len() != a || r.known.len() != a {
                return Err(bad("q/f/known length does not match action_count"));
            }
            if r.q.iter().chain(&r.sample).any(|v| !v.is_finite()) {
                return Err(bad("non-finite number"));
            }
            if (0..a).any(|j| !r.known[j] && r.f[j] != 0) {
                return Err(bad("unknown action with non-zero frequency"));
            }
            let key = LinguisticState::new(r.bins);
            if quantize(&r.sample, &file.quantizer)? != key {
                return Err(bad("sample state does not quantize to its key"));
            }
            entries.push(BookEntry { key, sample_state: r.sample, q: r.q, f: r.f, known: r.known });
        }
        Ok(Self {
            entries,
            quantizer: file.quantizer,
            action_count: a,
            gamma: file.gamma,
            env_id: file.env_id,
            writer_algo: file.writer_algo,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_json()?.as_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const EPS: f64 = 1e-12;

    fn line_quantizer() -> QuantizerConfig<f64> {
        // integer states 0..=9 land in distinct bins
        QuantizerConfig::new(10, vec![0.0], vec![10.0]).unwrap()
    }

    fn book(capacity: usize) -> Book<f64> {
        Book::new(line_quantizer(), 2, capacity, BookParams::default()).unwrap()
    }

    fn key(b: &Book<f64>, x: f64) -> LinguisticState {
        b.key_of(&[x]).unwrap()
    }

    fn tr(s: f64, a: usize, r: f64, s2: f64, terminal: bool) -> Transition<f64> {
        Transition { state: vec![s], action: a, reward: r, next_state: vec![s2], terminal }
    }

    fn entry_with(q: &[f64], f: &[u32], known: &[bool]) -> BookEntry<f64> {
        BookEntry {
            key: LinguisticState::new(vec![0]),
            sample_state: vec![0.5],
            q: q.to_vec(),
            f: f.to_vec(),
            known: known.to_vec(),
        }
    }

    #[test]
    fn beta_examples() {
        assert_abs_diff_eq!(beta::<f64>(3, 1), 0.75, epsilon = EPS);
        assert_eq!(beta::<f64>(0, 1), 0.0);
        assert_abs_diff_eq!(beta::<f64>(5, 5), 0.5, epsilon = EPS);
    }

    #[test]
    #[should_panic]
    fn beta_both_zero_panics() {
        let _ = beta::<f64>(0, 0);
    }

    #[test]
    fn credible_target_terminal() {
        let b = book(10);
        assert_eq!(b.credible_target(&tr(1.0, 0, 1.0, 2.0, true)).unwrap(), (1.0, 1));
    }

    #[test]
    fn credible_target_reads_successor_max() {
        let mut b = book(10);
        let k = key(&b, 3.0);
        // a0: q=2.0 with F=4, a1: q=1.0 with F=9
        b.update_entry(k.clone(), 0, &[3.0], 2.0, 4).unwrap();
        b.update_entry(k, 1, &[3.0], 1.0, 9).unwrap();
        let (q, f) = b.credible_target(&tr(2.0, 1, 0.0, 3.0, false)).unwrap();
        assert_abs_diff_eq!(q, 1.98, epsilon = EPS);
        assert_eq!(f, 4);
    }

    #[test]
    fn credible_target_missing_successor() {
        let b = book(10);
        assert_eq!(b.credible_target(&tr(2.0, 1, 0.5, 3.0, false)).unwrap(), (0.5, 1));
    }

    #[test]
    fn credible_target_tie_picks_lowest_action() {
        let mut b = book(10);
        let k = key(&b, 3.0);
        b.update_entry(k.clone(), 0, &[3.0], 1.0, 2).unwrap();
        b.update_entry(k, 1, &[3.0], 1.0, 7).unwrap();
        assert_eq!(b.credible_target(&tr(2.0, 0, 0.0, 3.0, false)).unwrap().1, 2);
    }

    #[test]
    fn update_entry_blends() {
        let mut b = book(10);
        let k = key(&b, 1.0);
        b.update_entry(k.clone(), 0, &[1.0], 2.0, 3).unwrap();
        assert_eq!(b.entry(&k).unwrap().f[0], 3);
        b.update_entry(k.clone(), 0, &[1.0], 1.0, 1).unwrap();
        let e = b.entry(&k).unwrap();
        assert_abs_diff_eq!(e.q[0], 1.75, epsilon = EPS);
        assert_eq!(e.f[0], 4);
    }

    #[test]
    fn update_entry_new_adopts_target() {
        let mut b = book(10);
        let k = key(&b, 1.0);
        b.update_entry(k.clone(), 1, &[1.2], 5.0, 1).unwrap();
        let e = b.entry(&k).unwrap();
        assert_eq!(e.q[1], 5.0);
        assert_eq!(e.f[1], 1);
        assert_eq!(e.known, vec![false, true]);
        assert_eq!(e.sample_state, vec![1.2]);
    }

    #[test]
    fn update_entry_caps_frequency() {
        let mut b = book(10);
        let k = key(&b, 1.0);
        b.update_entry(k.clone(), 0, &[1.0], 1.0, 19).unwrap();
        b.update_entry(k.clone(), 0, &[1.0], 1.0, 5).unwrap();
        assert_eq!(b.entry(&k).unwrap().f[0], 20);
    }

    #[test]
    fn update_entry_rejects_bad_input() {
        let mut b = book(10);
        let k = key(&b, 1.0);
        assert!(b.update_entry(k.clone(), 2, &[1.0], 1.0, 1).is_err());
        assert!(b.update_entry(k.clone(), 0, &[1.0], f64::NAN, 1).is_err());
        assert!(b.update_entry(k, 0, &[1.0], 1.0, 0).is_err());
        assert!(b.is_empty());
    }

    #[test]
    fn one_step_episode() {
        let mut b = book(10);
        b.record_episode(&Episode::new(vec![tr(1.0, 1, 1.0, 2.0, true)]).unwrap()).unwrap();
        assert_eq!(b.len(), 1);
        let e = b.entry(&key(&b, 1.0)).unwrap();
        assert_eq!(e.q[1], 1.0);
        assert_eq!(e.f[1], 1);
        assert_eq!(b.episodes_recorded(), 1);
    }

    #[test]
    fn two_step_episode_propagates_backward() {
        let mut b = book(10);
        let ep = Episode::new(vec![tr(0.0, 1, 0.0, 1.0, false), tr(1.0, 1, 1.0, 2.0, true)]).unwrap();
        b.record_episode(&ep).unwrap();
        assert_eq!(b.entry(&key(&b, 1.0)).unwrap().q[1], 1.0);
        assert_abs_diff_eq!(b.entry(&key(&b, 0.0)).unwrap().q[1], 0.99, epsilon = EPS);
    }

    #[test]
    fn replay_is_a_fixed_point() {
        let mut b = book(10);
        let ep = Episode::new(vec![
            tr(0.0, 1, 0.0, 1.0, false),
            tr(1.0, 0, 0.25, 2.0, false),
            tr(2.0, 1, 1.0, 3.0, true),
        ])
        .unwrap();
        b.record_episode(&ep).unwrap();
        let first: Vec<Vec<f64>> = b.entries().map(|e| e.q.clone()).collect();
        for _ in 0..25 {
            b.record_episode(&ep).unwrap();
        }
        let later: Vec<Vec<f64>> = b.entries().map(|e| e.q.clone()).collect();
        assert_eq!(first, later);
    }

    #[test]
    fn empty_episode_is_noop() {
        let mut b = book(10);
        b.record_episode(&Episode::new(vec![]).unwrap()).unwrap();
        assert!(b.is_empty());
        assert_eq!(b.episodes_recorded(), 0);
    }

    #[test]
    fn malformed_episodes_rejected() {
        assert!(Episode::new(vec![tr(0.0, 0, 0.0, 1.0, false)]).is_err());
        assert!(Episode::new(vec![tr(0.0, 0, 0.0, 1.0, true), tr(1.0, 0, 0.0, 2.0, true)]).is_err());
    }

    #[test]
    fn importance_examples() {
        assert_abs_diff_eq!(importance(&entry_with(&[1.0, -0.5], &[1, 1], &[true, true])), 1.5, epsilon = EPS);
        assert_eq!(importance(&entry_with(&[3.0, 0.0], &[2, 0], &[true, false])), 0.0);
        assert_eq!(importance(&entry_with(&[0.7, 0.7], &[1, 3], &[true, true])), 0.0);
        assert_eq!(importance(&entry_with(&[0.0, 0.0], &[0, 0], &[false, false])), 0.0);
    }

    #[test]
    fn priority_examples() {
        let e = entry_with(&[1.0, -0.5], &[4, 0], &[true, true]);
        assert_abs_diff_eq!(priority(&e, 0), 6.0, epsilon = EPS);
        assert_eq!(priority(&e, 1), 0.0);
        let flat = entry_with(&[0.3, 0.3], &[20, 20], &[true, true]);
        assert_eq!(priority(&flat, 0), 0.0);
        assert_abs_diff_eq!(entry_priority(&e), 6.0, epsilon = EPS);
    }

    #[test]
    fn decay_examples() {
        let mut b = book(10);
        let k = key(&b, 1.0);
        b.update_entry(k.clone(), 0, &[1.0], 1.0, 20).unwrap();
        b.update_entry(k.clone(), 1, &[1.0], 1.0, 1).unwrap();
        b.decay();
        assert_eq!(b.entry(&k).unwrap().f, vec![19, 0]);
        b.decay();
        assert_eq!(b.entry(&k).unwrap().f, vec![18, 0]);
        for _ in 0..21 {
            b.decay();
        }
        let e = b.entry(&k).unwrap();
        assert_eq!(e.f, vec![0, 0]);
        assert_eq!(e.known, vec![true, true]);
    }

    #[test]
    fn decay_runs_on_episode_period() {
        let params = BookParams { decay_period: 3, ..BookParams::default() };
        let mut b = Book::new(line_quantizer(), 2, 10, params).unwrap();
        let ep = Episode::new(vec![tr(1.0, 0, 1.0, 2.0, true)]).unwrap();
        b.record_episode(&ep).unwrap();
        b.record_episode(&ep).unwrap();
        assert_eq!(b.entry(&key(&b, 1.0)).unwrap().f[0], 2);
        // third episode: update to 3, then decay to 2
        b.record_episode(&ep).unwrap();
        assert_eq!(b.entry(&key(&b, 1.0)).unwrap().f[0], 2);
    }

    /// Six entries with distinct priorities; returns the book and the keys
    /// in priority order (highest first).
    fn ranked_toy_book() -> (Book<f64>, Vec<LinguisticState>) {
        let mut b = book(6);
        // (state, q gap, frequency) -> priority = gap * freq
        let spec = [(0.0, 1.0, 1), (1.0, 2.0, 3), (2.0, 0.5, 2), (3.0, 3.0, 3), (4.0, 0.1, 5), (5.0, 1.0, 4)];
        for &(s, gap, f) in &spec {
            let k = key(&b, s);
            b.update_entry(k.clone(), 0, &[s], gap, f).unwrap();
            b.update_entry(k, 1, &[s], 0.0, f).unwrap();
        }
        // priorities: 1*1, 2*3=6, 0.5*2=1, 3*3=9, 0.1*5=0.5, 1*4=4
        let order = [3.0, 1.0, 5.0, 0.0, 2.0, 4.0].iter().map(|&s| key(&b, s)).collect();
        (b, order)
    }

    #[test]
    fn prune_keeps_top_fraction() {
        let (mut b, order) = ranked_toy_book();
        b.set_capacity(4).unwrap();
        assert_eq!(b.len(), 2);
        assert!(b.entry(&order[0]).is_some());
        assert!(b.entry(&order[1]).is_some());
    }

    #[test]
    fn prune_under_capacity_is_noop() {
        let (mut b, _) = ranked_toy_book();
        let before: Vec<_> = b.entries().cloned().collect();
        b.prune();
        assert_eq!(before, b.entries().cloned().collect::<Vec<_>>());
    }

    #[test]
    fn prune_ties_keep_oldest() {
        let mut b = book(8);
        for s in 0..8 {
            let k = key(&b, s as f64);
            b.update_entry(k, 0, &[s as f64], 1.0, 1).unwrap();
        }
        b.set_capacity(6).unwrap();
        let kept: Vec<_> = b.entries().map(|e| e.sample_state[0]).collect();
        assert_eq!(kept, vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn insert_at_capacity_prunes_first() {
        let (mut b, order) = ranked_toy_book();
        let k = key(&b, 9.0);
        b.update_entry(k.clone(), 0, &[9.0], 1.0, 1).unwrap();
        // ceil(6 * 0.5) = 3 survivors plus the new entry
        assert_eq!(b.len(), 4);
        assert!(b.entry(&k).is_some());
        for survivor in &order[..3] {
            assert!(b.entry(survivor).is_some());
        }
    }

    #[test]
    fn stale_entries_rank_last() {
        let mut b = book(4);
        let live = key(&b, 0.0);
        b.update_entry(live.clone(), 0, &[0.0], 1.0, 1).unwrap();
        let stale = key(&b, 1.0);
        b.update_entry(stale.clone(), 0, &[1.0], 1.0, 1).unwrap();
        b.decay();
        let fresh = key(&b, 2.0);
        b.update_entry(fresh.clone(), 0, &[2.0], 1.0, 1).unwrap();
        let p = b.publish(3, &PublishMeta::default()).unwrap();
        let keys: Vec<_> = p.entries().iter().map(|e| e.key.clone()).collect();
        assert_eq!(keys.last(), Some(&stale));
        let _ = live;
    }

    #[test]
    fn publish_examples() {
        let (b, order) = ranked_toy_book();
        let meta = PublishMeta::new("chain", "tabular_q");
        let p = b.publish(3, &meta).unwrap();
        assert_eq!(p.len(), 3);
        let keys: Vec<_> = p.entries().iter().map(|e| e.key.clone()).collect();
        assert_eq!(keys, order[..3].to_vec());
        assert_eq!(b.publish(100, &meta).unwrap().len(), 6);
        assert_eq!(b.publish(3, &meta).unwrap(), p);
        assert_eq!(p.env_id(), "chain");
        assert_eq!(b.len(), 6);
        assert!(b.publish(0, &meta).is_err());
        assert!(book(5).publish(10, &meta).unwrap().is_empty());
    }

    #[test]
    fn decode_q_examples() {
        let e = entry_with(&[2.0, -1.0], &[3, 1], &[true, true]);
        let d = decode_q(&e);
        assert_eq!(d, vec![(&[0.5][..], 0, 2.0), (&[0.5][..], 1, -1.0)]);
        assert!(decode_q(&entry_with(&[0.0, 0.0], &[0, 0], &[false, false])).is_empty());
    }

    #[test]
    fn decode_va_examples() {
        let e = entry_with(&[2.0, 0.0], &[3, 1], &[true, true]);
        let d = decode_va(&e).unwrap();
        assert_abs_diff_eq!(d.value, 1.5, epsilon = EPS);
        assert_abs_diff_eq!(d.advantages[0].1, 0.5, epsilon = EPS);
        assert_abs_diff_eq!(d.advantages[1].1, -1.5, epsilon = EPS);

        let e = entry_with(&[0.0, 4.0], &[0, 2], &[false, true]);
        let single = decode_va(&e).unwrap();
        assert_eq!(single.value, 4.0);
        assert_eq!(single.advantages, vec![(1, 0.0)]);

        let e = entry_with(&[1.0, 3.0], &[5, 5], &[true, true]);
        let equal = decode_va(&e).unwrap();
        assert_abs_diff_eq!(equal.value, 2.0, epsilon = EPS);

        assert!(matches!(
            decode_va(&entry_with(&[1.0, 3.0], &[0, 0], &[true, true])),
            Err(Error::Decode(_))
        ));
    }

    #[test]
    fn retention_rules_rank_differently() {
        let mut b = book(10).with_retention(Retention::FrequencyOnly);
        let a = key(&b, 0.0);
        b.update_entry(a.clone(), 0, &[0.0], 5.0, 1).unwrap();
        b.update_entry(a.clone(), 1, &[0.0], -5.0, 1).unwrap();
        let z = key(&b, 1.0);
        b.update_entry(z.clone(), 0, &[1.0], 1.0, 9).unwrap();
        assert_eq!(b.publish(1, &PublishMeta::default()).unwrap().entries()[0].key, z);

        let mut per = book(10).with_retention(Retention::PerStyle);
        per.update_entry(a.clone(), 0, &[0.0], 1.0, 1).unwrap();
        per.update_entry(z.clone(), 0, &[1.0], 3.0, 1).unwrap();
        assert_eq!(per.retention_score(&z), Some(3.0));
        per.update_entry(z.clone(), 0, &[1.0], 3.0, 1).unwrap();
        assert_eq!(per.retention_score(&z), Some(0.0));
    }

    #[test]
    fn random_retention_is_seeded() {
        let fill = |seed| {
            let mut b = book(40).with_retention(Retention::Random { seed });
            for s in 0..10 {
                let k = key(&b, s as f64);
                b.update_entry(k, 0, &[s as f64], 1.0, 1).unwrap();
            }
            b.publish(4, &PublishMeta::default()).unwrap()
        };
        assert_eq!(fill(7), fill(7));
        assert_ne!(fill(7), fill(8));
    }

    #[test]
    fn json_round_trip_and_validation() {
        let (b, _) = ranked_toy_book();
        let p = b.publish(4, &PublishMeta::new("chain", "dqn")).unwrap();
        let text = p.to_json().unwrap();
        let back = PublishedBook::<f64>::from_json(&text).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.to_json().unwrap(), text);
        assert!(text.starts_with("{\"format_version\":1,\"env_id\":\"chain\""));

        let wrong_version = text.replacen("\"format_version\":1", "\"format_version\":2", 1);
        assert!(matches!(PublishedBook::<f64>::from_json(&wrong_version), Err(Error::Format(_))));
        let wrong_key = text.replacen("\"bins\":[3]", "\"bins\":[4]", 1);
        assert!(PublishedBook::<f64>::from_json(&wrong_key).is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let q = QuantizerConfig::new(10, vec![0.0f32], vec![10.0]).unwrap();
        let mut b: Book<f32> = Book::new(q, 2, 10, BookParams::default()).unwrap();
        let ep = Episode::new(vec![
            Transition { state: vec![0.0], action: 1, reward: 0.0, next_state: vec![1.0], terminal: false },
            Transition { state: vec![1.0], action: 1, reward: 1.0, next_state: vec![2.0], terminal: true },
        ])
        .unwrap();
        b.record_episode(&ep).unwrap();
        assert_eq!(b.entry(&b.key_of(&[0.0]).unwrap()).unwrap().q[1], 0.99f32);
        let p = b.publish(2, &PublishMeta::default()).unwrap();
        assert_eq!(PublishedBook::<f32>::from_json(&p.to_json().unwrap()).unwrap(), p);
    }

    proptest! {
        #[test]
        fn update_invariants(
            ops in proptest::collection::vec((0u32..6, 0usize..2, -5.0f64..5.0, 1u32..30), 1..200)
        ) {
            let mut b = book(4);
            for (s, a, target, fs) in ops {
                let k = key(&b, s as f64);
                let old = b.entry(&k).filter(|e| e.known[a]).map(|e| (e.q[a], e.f[a]));
                prop_assert!((0.0..1.0).contains(&beta::<f64>(old.map_or(0, |o| o.1), fs)));
                b.update_entry(k.clone(), a, &[s as f64], target, fs).unwrap();
                let e = b.entry(&k).unwrap();
                if let Some((q_old, _)) = old {
                    prop_assert!(e.q[a] >= q_old.min(target) && e.q[a] <= q_old.max(target));
                } else {
                    prop_assert_eq!(e.q[a], target);
                }
                prop_assert!(b.len() <= b.capacity());
                for e in b.entries() {
                    for j in 0..2 {
                        prop_assert!(e.f[j] <= 20);
                        if !e.known[j] { prop_assert_eq!(e.f[j], 0); }
                    }
                }
            }
        }

        #[test]
        fn decoded_advantage_is_zero_sum(
            q in proptest::collection::vec(-50.0f64..50.0, 4),
            f in proptest::collection::vec(0u32..21, 4),
            known in proptest::collection::vec(any::<bool>(), 4),
        ) {
            let f: Vec<u32> = f.iter().zip(&known).map(|(&f, &k)| if k { f } else { 0 }).collect();
            let e = BookEntry { key: LinguisticState::new(vec![0]), sample_state: vec![0.0], q, f: f.clone(), known };
            if let Ok(d) = decode_va(&e) {
                let s: f64 = d.advantages.iter().map(|&(a, adv)| f[a] as f64 * adv).sum();
                prop_assert!(s.abs() < 1e-9);
                // doubling frequencies leaves the decoding unchanged
                let mut e2 = e.clone();
                e2.f.iter_mut().for_each(|x| *x *= 2);
                let d2 = decode_va(&e2).unwrap();
                prop_assert!((d2.value - d.value).abs() < 1e-12);
            }
        }
    }
}
