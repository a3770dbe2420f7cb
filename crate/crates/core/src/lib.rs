//! Episodic BOOK memory for reinforcement learning.
//!
//! A writer agent learns in an environment while every terminated episode is
//! replayed backward into a [`Book`]: a bounded map from quantized state
//! clusters ([`LinguisticState`]) to per-action Q-values and hit frequencies.
//! The book keeps its highest-priority clusters (importance × frequency),
//! publishes the top N as an immutable [`PublishedBook`], and fresh reader
//! networks are pre-trained from that snapshot alone.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the `*64`
//! and `*32` aliases below fix the precision.

pub mod agents;
pub mod book;
pub mod envs;
pub mod error;
pub mod harness;
pub mod neural;
pub mod quantizer;
pub mod reader;
pub mod scalar;

pub use agents::{
    argmax, epsilon_greedy, evaluate, train_writer, DqnAgent, EpsilonSchedule, Policy, QModel,
    ReplayBuffer, TabularQ, WriterAlgo, WriterConfig, WriterOutcome,
};
pub use book::{
    beta, decode_q, decode_va, importance, priority, Book, BookEntry, BookParams, DecodedVa,
    Episode, PublishMeta, PublishedBook, Retention, Transition,
};
pub use envs::{make_env, CartPole, ChainMdp, Crossroads, EnvSpec, Environment, StepResult};
pub use error::{Error, Result};
pub use neural::{AdamState, InputScaler, Mlp};
pub use quantizer::{quantize, shape_reward, LinguisticFunction, LinguisticState, QuantizerConfig, RewardShaping};
pub use reader::{
    continue_training, greedy_policy_from, pretrain_q_reader, pretrain_va_reader, ReaderConfig,
    ReaderHead,
};
pub use scalar::Scalar;

pub type Book64 = Book<f64>;
pub type Book32 = Book<f32>;
pub type PublishedBook64 = PublishedBook<f64>;
pub type PublishedBook32 = PublishedBook<f32>;
pub type BookEntry64 = BookEntry<f64>;
pub type QuantizerConfig64 = QuantizerConfig<f64>;
pub type QuantizerConfig32 = QuantizerConfig<f32>;
pub type Transition64 = Transition<f64>;
pub type Episode64 = Episode<f64>;
pub type Mlp64 = Mlp<f64>;
pub type Mlp32 = Mlp<f32>;
pub type QModel64 = QModel<f64>;
