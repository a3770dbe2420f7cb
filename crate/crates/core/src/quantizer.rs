//! The linguistic function: maps continuous states to discrete cluster keys
//! by uniform per-dimension quantization, plus reward shaping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Uniform grid over a box. Observations outside `[lower, upper]` clamp to
/// the edge bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct QuantizerConfig<T: Scalar> {
    pub levels: u32,
    pub lower: Vec<T>,
    pub upper: Vec<T>,
}

impl<T: Scalar> QuantizerConfig<T> {
    pub fn new(levels: u32, lower: Vec<T>, upper: Vec<T>) -> Result<Self> {
        let cfg = Self { levels, lower, upper };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        // A single level is accepted as the degenerate "everything is one
        // cluster" quantizer.
        if self.levels == 0 {
            return Err(Error::Config("quantizer needs at least one level".into()));
        }
        if self.lower.is_empty() {
            return Err(Error::Config("quantizer needs at least one dimension".into()));
        }
        if self.lower.len() != self.upper.len() {
            return Err(Error::Config(format!(
                "lower has {} dimensions but upper has {}",
                self.lower.len(),
                self.upper.len()
            )));
        }
        for (i, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(Error::Config(format!(
                    "dimension {i}: bounds [{lo}, {hi}] are not an increasing finite interval"
                )));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> usize {
        self.lower.len()
    }

    /// Same bounds at a different resolution.
    pub fn with_levels(&self, levels: u32) -> Self {
        Self { levels, ..self.clone() }
    }
}

/// Cluster key: one bin index per state dimension.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LinguisticState(Vec<u32>);

impl LinguisticState {
    pub fn new(bins: Vec<u32>) -> Self {
        Self(bins)
    }

    pub fn bins(&self) -> &[u32] {
        &self.0
    }

    pub fn dims(&self) -> usize {
        self.0.len()
    }
}

/// A mapping from raw states to cluster keys.
pub trait LinguisticFunction<T: Scalar> {
    fn dims(&self) -> usize;
    fn key(&self, state: &[T]) -> Result<LinguisticState>;
}

impl<T: Scalar> LinguisticFunction<T> for QuantizerConfig<T> {
    fn dims(&self) -> usize {
        QuantizerConfig::dims(self)
    }

    fn key(&self, state: &[T]) -> Result<LinguisticState> {
        quantize(state, self)
    }
}

pub fn quantize<T: Scalar>(state: &[T], cfg: &QuantizerConfig<T>) -> Result<LinguisticState> {
    if state.len() != cfg.dims() {
        return Err(Error::Config(format!(
            "state has {} dimensions, quantizer expects {}",
            state.len(),
            cfg.dims()
        )));
    }
    let levels = T::from_count(cfg.levels as u64);
    let top = cfg.levels - 1;
    let mut bins = Vec::with_capacity(state.len());
    for (i, &x) in state.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::Input(format!("state component {i} is {x}")));
        }
        let (lo, hi) = (cfg.lower[i], cfg.upper[i]);
        let clamped = x.max(lo).min(hi);
        let scaled = ((clamped - lo) / (hi - lo) * levels).floor();
        let bin = scaled.to_u32().unwrap_or(top).min(top);
        bins.push(bin);
    }
    Ok(LinguisticState(bins))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardShaping {
    /// `tanh(r / 10)`
    Tanh10,
    /// `r` clipped to `[-1, 1]`
    Clip1,
    #[default]
    Identity,
}

pub fn shape_reward<T: Scalar>(r: T, mode: RewardShaping) -> Result<T> {
    if !r.is_finite() {
        return Err(Error::Input(format!("reward {r} is not finite")));
    }
    Ok(match mode {
        RewardShaping::Tanh10 => (r / T::lit(10.0)).tanh(),
        RewardShaping::Clip1 => r.max(-T::one()).min(T::one()),
        RewardShaping::Identity => r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(levels: u32) -> QuantizerConfig<f64> {
        QuantizerConfig::new(levels, vec![0.0], vec![1.0]).unwrap()
    }

    #[test]
    fn lower_edge_maps_to_zero() {
        let cfg = QuantizerConfig::new(128, vec![-1.0, -2.0, 0.0], vec![1.0, 2.0, 5.0]).unwrap();
        assert_eq!(quantize(&[-1.0, -2.0, 0.0], &cfg).unwrap().bins(), &[0, 0, 0]);
    }

    #[test]
    fn upper_edge_clamps_to_top_bin() {
        let cfg = QuantizerConfig::new(128, vec![-1.0, -2.0, 0.0], vec![1.0, 2.0, 5.0]).unwrap();
        assert_eq!(quantize(&[1.0, 2.0, 5.0], &cfg).unwrap().bins(), &[127, 127, 127]);
    }

    #[test]
    fn interior_value() {
        // floor(0.49 * 4) = 1
        assert_eq!(quantize(&[0.49], &unit(4)).unwrap().bins(), &[1]);
        assert_eq!(quantize(&[0.49f32], &QuantizerConfig::new(4, vec![0.0f32], vec![1.0]).unwrap()).unwrap().bins(), &[1]);
    }

    #[test]
    fn out_of_range_clamps() {
        assert_eq!(quantize(&[-7.0], &unit(8)).unwrap().bins(), &[0]);
        assert_eq!(quantize(&[1e9], &unit(8)).unwrap().bins(), &[7]);
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        assert!(matches!(quantize(&[0.1, 0.2], &unit(4)), Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_is_input_error() {
        assert!(matches!(quantize(&[f64::NAN], &unit(4)), Err(Error::Input(_))));
        assert!(matches!(quantize(&[f64::INFINITY], &unit(4)), Err(Error::Input(_))));
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(QuantizerConfig::new(0, vec![0.0], vec![1.0]).is_err());
        assert!(QuantizerConfig::new(4, vec![1.0], vec![1.0]).is_err());
        assert!(QuantizerConfig::new(4, vec![0.0, 0.0], vec![1.0]).is_err());
        assert!(QuantizerConfig::<f64>::new(4, vec![], vec![]).is_err());
    }

    #[test]
    fn single_level_collapses_everything() {
        let cfg = unit(1);
        assert_eq!(quantize(&[0.0], &cfg).unwrap(), quantize(&[0.99], &cfg).unwrap());
        assert_eq!(quantize(&[1.0], &cfg).unwrap().bins(), &[0]);
    }

    #[test]
    fn reward_shaping_modes() {
        assert_eq!(shape_reward(0.0, RewardShaping::Tanh10).unwrap(), 0.0);
        approx::assert_abs_diff_eq!(
            shape_reward(10.0, RewardShaping::Tanh10).unwrap(),
            0.761_594_155_955_764_9,
            epsilon = 1e-12
        );
        assert_eq!(shape_reward(5.0, RewardShaping::Clip1).unwrap(), 1.0);
        assert_eq!(shape_reward(-5.0, RewardShaping::Clip1).unwrap(), -1.0);
        assert_eq!(shape_reward(0.3, RewardShaping::Clip1).unwrap(), 0.3);
        assert_eq!(shape_reward(-3.5, RewardShaping::Identity).unwrap(), -3.5);
        assert!(shape_reward(f64::NAN, RewardShaping::Identity).is_err());
    }

    proptest! {
        #[test]
        fn deterministic_and_monotone(
            levels in 1u32..300,
            xs in proptest::collection::vec(-3.0f64..3.0, 3),
            bump in 0.0f64..2.0,
            dim in 0usize..3,
        ) {
            let cfg = QuantizerConfig::new(levels, vec![-1.0, -2.0, 0.0], vec![1.0, 2.0, 0.5]).unwrap();
            let a = quantize(&xs, &cfg).unwrap();
            prop_assert_eq!(&a, &quantize(&xs, &cfg).unwrap());
            for &b in a.bins() {
                prop_assert!(b < levels);
            }
            let mut ys = xs.clone();
            ys[dim] += bump;
            let b = quantize(&ys, &cfg).unwrap();
            prop_assert!(b.bins()[dim] >= a.bins()[dim]);
        }
    }
}
