//! Channel statistics, instance normalization, AdaIN and MixStyle.
//!
//! MixStyle normalizes each instance's feature map with its own channel
//! statistics and re-styles it with a random convex combination of its
//! statistics and those of a reference instance drawn from the same batch:
//!
//! ```text
//! gamma_mix = lambda * sigma(f) + (1 - lambda) * sigma(f')
//! beta_mix  = lambda * mu(f)    + (1 - lambda) * mu(f')
//! out       = gamma_mix * (f - mu(f)) / sigma(f) + beta_mix
//! ```
//!
//! `lambda ~ Beta(alpha, alpha)` per instance. The statistics are computed
//! behind a stop-gradient, so the layer is differentiable with respect to
//! `f` only through the normalized term. The layer is an identity outside
//! training and when its activation coin comes up tails.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::seq::SliceRandom;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default variance stabilizer added under the square root.
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Per-(instance, channel) mean and standard deviation, both `(B, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats<S> {
    pub mu: Tensor<S>,
    pub sigma: Tensor<S>,
}

impl<S: Scalar> ChannelStats<S> {
    /// `[mu_0 .. mu_C, sigma_0 .. sigma_C]` for instance `b`.
    pub fn style_vector(&self, b: usize) -> Vec<S> {
        let mut v = self.mu.item(b).to_vec();
        v.extend_from_slice(self.sigma.item(b));
        v
    }

    pub fn batch(&self) -> usize {
        self.mu.shape()[0]
    }
}

/// How the reference batch `F'` is formed from `F`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Uniformly random shuffle of the batch.
    Random,
    /// Swap the two single-domain halves of the batch.
    CrossDomain,
}

/// Mixing statistics (`Mix`) or substituting the reference statistics
/// outright (`Replace`, i.e. AdaIN with `lambda = 0`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Mix,
    Replace,
}

/// Whether the activation coin is flipped per module or once per pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoinSharing {
    Independent,
    Shared,
}

/// Whether each module draws its own permutation or all modules reuse the
/// first one drawn in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShuffleSharing {
    PerLayer,
    Fixed,
}

/// Backbone insertion points, as 0-based block indices (`res1` is 0).
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Placement(BTreeSet<usize>);

impl Placement {
    pub const NUM_SLOTS: usize = 4;

    pub fn new(blocks: impl IntoIterator<Item = usize>) -> Result<Self> {
        let set: BTreeSet<usize> = blocks.into_iter().collect();
        if let Some(&bad) = set.iter().find(|&&b| b >= Self::NUM_SLOTS) {
            return Err(Error::invalid(format!(
                "insertion point res{} does not exist (res1..res{})",
                bad + 1,
                Self::NUM_SLOTS
            )));
        }
        Ok(Self(set))
    }

    pub fn none() -> Self {
        Self(BTreeSet::new())
    }

    pub fn contains(&self, block: usize) -> bool {
        self.0.contains(&block)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn blocks(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "none");
        }
        write!(f, "res")?;
        for b in &self.0 {
            write!(f, "{}", b + 1)?;
        }
        Ok(())
    }
}

impl FromStr for Placement {
    type Err = Error;

    /// Accepts `none`, `res123`-style names, and comma lists (`res1,res3`).
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(Self::none());
        }
        let mut blocks = Vec::new();
        for part in s.split(',') {
            let digits = part
                .trim()
                .strip_prefix("res")
                .ok_or_else(|| Error::invalid(format!("bad insertion point {part:?}")))?;
            if digits.is_empty() {
                return Err(Error::invalid(format!("bad insertion point {part:?}")));
            }
            for ch in digits.chars() {
                let d = ch
                    .to_digit(10)
                    .filter(|&d| d >= 1)
                    .ok_or_else(|| Error::invalid(format!("bad insertion point {part:?}")))?;
                blocks.push(d as usize - 1);
            }
        }
        Self::new(blocks)
    }
}

impl Serialize for Placement {
    fn serialize<Se: serde::Serializer>(&self, s: Se) -> std::result::Result<Se::Ok, Se::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Placement {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixStyleConfig {
    pub alpha: f64,
    pub p_active: f64,
    pub epsilon: f64,
    pub strategy: Strategy,
    pub variant: Variant,
    pub insertion_points: Placement,
    pub coin: CoinSharing,
    pub shuffle: ShuffleSharing,
    pub train_mode: bool,
}

impl Default for MixStyleConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            p_active: 0.5,
            epsilon: DEFAULT_EPSILON,
            strategy: Strategy::Random,
            variant: Variant::Mix,
            insertion_points: Placement::new([0, 1, 2]).expect("valid"),
            coin: CoinSharing::Independent,
            shuffle: ShuffleSharing::PerLayer,
            train_mode: true,
        }
    }
}

impl MixStyleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.p_active) {
            return Err(Error::invalid(format!(
                "p_active must lie in [0, 1], got {}",
                self.p_active
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// One `lambda` per instance, each in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaVector<S>(Vec<S>);

impl<S: Scalar> LambdaVector<S> {
    pub fn new(values: Vec<S>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(**v >= S::zero() && **v <= S::one())) {
            return Err(Error::invalid(format!("lambda {v} outside [0, 1]")));
        }
        Ok(Self(values))
    }

    pub fn constant(value: S, batch: usize) -> Result<Self> {
        Self::new(vec![value; batch])
    }

    pub fn as_slice(&self) -> &[S] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Channel statistics of a `(B, C, H, W)` tensor, `sigma = sqrt(var + eps)`
/// with the biased (divide by `HW`) variance.
pub fn compute_channel_stats<S: Scalar>(features: &Tensor<S>, epsilon: S) -> Result<ChannelStats<S>> {
    let mut g = Graph::inference();
    let f = g.constant(features.clone());
    let (mu, sigma) = blocked_stats(&mut g, f, epsilon)?;
    Ok(ChannelStats {
        mu: g.value(mu).clone(),
        sigma: g.value(sigma).clone(),
    })
}

/// `(mu, sigma)` nodes of `f` recorded behind a stop-gradient.
pub fn blocked_stats<S: Scalar>(g: &mut Graph<S>, f: Var, epsilon: S) -> Result<(Var, Var)> {
    let detached = g.stop_gradient(f);
    let mu = g.channel_mean(detached)?;
    let sigma = g.channel_std(detached, epsilon)?;
    Ok((mu, sigma))
}

/// `gamma * (f - mu(f)) / sigma(f) + beta`, differentiable in all inputs.
pub fn instance_norm<S: Scalar>(
    g: &mut Graph<S>,
    f: Var,
    gamma: Var,
    beta: Var,
    epsilon: S,
) -> Result<Var> {
    let mu = g.channel_mean(f)?;
    let sigma = g.channel_std(f, epsilon)?;
    let centered = g.sub_channel(f, mu)?;
    let normalized = g.div_channel(centered, sigma)?;
    g.scale_shift(normalized, gamma, beta)
}

/// `sigma(f') * (f - mu(f)) / sigma(f) + mu(f')` with blocked statistics.
pub fn adain<S: Scalar>(g: &mut Graph<S>, f: Var, style: Var, epsilon: S) -> Result<Var> {
    let (fs, ss) = (g.value(f).shape().to_vec(), g.value(style).shape().to_vec());
    if fs != ss {
        return Err(Error::mismatch("adain", &fs, &ss));
    }
    let (mu, sigma) = blocked_stats(g, f, epsilon)?;
    let (smu, ssigma) = blocked_stats(g, style, epsilon)?;
    let centered = g.sub_channel(f, mu)?;
    let normalized = g.div_channel(centered, sigma)?;
    let scaled = g.mul_channel(normalized, ssigma)?;
    g.add_channel(scaled, smu)
}

/// `batch` i.i.d. draws of `Beta(alpha, alpha)`.
pub fn sample_lambda<S: Scalar, R: Rng + ?Sized>(
    alpha: f64,
    batch: usize,
    rng: &mut R,
) -> Result<LambdaVector<S>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("alpha must be > 0, got {alpha}")));
    }
    let dist = Beta::new(alpha, alpha).map_err(|e| Error::invalid(e.to_string()))?;
    let draws = (0..batch)
        .map(|_| S::lit(dist.sample(rng).clamp(0.0, 1.0)))
        .collect();
    LambdaVector::new(draws)
}

/// Reference order for `F'`: `F'[i] = F[perm[i]]`.
///
/// `groups` holds one id per instance (usually the domain id). The
/// cross-domain strategy requires an even batch whose first half shares one
/// id and whose second half shares a different one.
pub fn make_reference_permutation<R: Rng + ?Sized>(
    batch: usize,
    strategy: Strategy,
    groups: &[usize],
    rng: &mut R,
) -> Result<Vec<usize>> {
    if batch == 0 {
        return Err(Error::invalid("empty batch"));
    }
    match strategy {
        Strategy::Random => {
            let mut perm: Vec<usize> = (0..batch).collect();
            perm.shuffle(rng);
            Ok(perm)
        }
        Strategy::CrossDomain => {
            if batch % 2 != 0 {
                return Err(Error::invalid(format!(
                    "cross-domain mixing needs an even batch, got {batch}"
                )));
            }
            if groups.len() != batch {
                return Err(Error::mismatch("cross-domain groups", &[batch], &[groups.len()]));
            }
            let half = batch / 2;
            let (first, second) = groups.split_at(half);
            let uniform = |s: &[usize]| s.iter().all(|&d| d == s[0]);
            if !uniform(first) || !uniform(second) {
                return Err(Error::invalid(
                    "cross-domain mixing needs single-domain batch halves",
                ));
            }
            if first[0] == second[0] {
                return Err(Error::invalid(format!(
                    "cross-domain mixing needs two different domains, both halves are {}",
                    first[0]
                )));
            }
            Ok((half..batch).chain(0..half).collect())
        }
    }
}

/// `(gamma_mix, beta_mix)` with `lambda` broadcast over channels.
pub fn mix_statistics<S: Scalar>(
    a: &ChannelStats<S>,
    b: &ChannelStats<S>,
    lambda: &LambdaVector<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    if a.mu.shape() != b.mu.shape() || a.sigma.shape() != b.sigma.shape() {
        return Err(Error::mismatch("mix_statistics", a.mu.shape(), b.mu.shape()));
    }
    let mut g = Graph::inference();
    let (sa, sb) = (g.constant(a.sigma.clone()), g.constant(b.sigma.clone()));
    let (ma, mb) = (g.constant(a.mu.clone()), g.constant(b.mu.clone()));
    let gamma = g.mix(sa, sb, lambda.as_slice())?;
    let beta = g.mix(ma, mb, lambda.as_slice())?;
    Ok((g.value(gamma).clone(), g.value(beta).clone()))
}

/// Randomness consumed by one MixStyle module in one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct MixDecision<S> {
    pub active: bool,
    pub perm: Vec<usize>,
    pub lambda: LambdaVector<S>,
}

/// Activation coin (always drawn in training mode).
pub fn draw_coin<R: Rng + ?Sized>(config: &MixStyleConfig, rng: &mut R) -> bool {
    let u: f64 = rng.random();
    u < config.p_active
}

/// Permutation and `lambda` for an active module.
pub fn draw_mixing<S: Scalar, R: Rng + ?Sized>(
    config: &MixStyleConfig,
    groups: &[usize],
    rng: &mut R,
) -> Result<(Vec<usize>, LambdaVector<S>)> {
    let batch = groups.len();
    let perm = make_reference_permutation(batch, config.strategy, groups, rng)?;
    let lambda = match config.variant {
        Variant::Mix => sample_lambda(config.alpha, batch, rng)?,
        Variant::Replace => LambdaVector::constant(S::zero(), batch)?,
    };
    Ok((perm, lambda))
}

/// Applies the MixStyle transform to `f` with an explicit reference order
/// and mixing weights. Statistics are blocked from the gradient.
pub fn apply_mixstyle<S: Scalar>(
    g: &mut Graph<S>,
    f: Var,
    perm: &[usize],
    lambda: &LambdaVector<S>,
    epsilon: S,
) -> Result<Var> {
    let (mu, sigma) = blocked_stats(g, f, epsilon)?;
    mix_normalized(g, f, (mu, sigma), perm, lambda)
}

/// `gamma_mix * (f - mu) / sigma + beta_mix` for given statistic nodes.
pub fn mix_normalized<S: Scalar>(
    g: &mut Graph<S>,
    f: Var,
    (mu, sigma): (Var, Var),
    perm: &[usize],
    lambda: &LambdaVector<S>,
) -> Result<Var> {
    let batch = g.value(f).dims4()?.0;
    if perm.len() != batch || lambda.len() != batch {
        return Err(Error::mismatch(
            "mixstyle",
            g.value(f).shape(),
            &[perm.len(), lambda.len()],
        ));
    }
    let ref_mu = g.permute_rows(mu, perm)?;
    let ref_sigma = g.permute_rows(sigma, perm)?;
    let gamma_mix = g.mix(sigma, ref_sigma, lambda.as_slice())?;
    let beta_mix = g.mix(mu, ref_mu, lambda.as_slice())?;
    let centered = g.sub_channel(f, mu)?;
    let normalized = g.div_channel(centered, sigma)?;
    let styled = g.mul_channel(normalized, gamma_mix)?;
    g.add_channel(styled, beta_mix)
}

/// A single MixStyle module: coin flip, reference permutation, `lambda`
/// draw and the transform. Identity (the very same node) when not training
/// or when the coin comes up tails.
pub fn mixstyle_forward<S: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<S>,
    f: Var,
    config: &MixStyleConfig,
    groups: &[usize],
    rng: &mut R,
) -> Result<Var> {
    g.value(f).dims4()?;
    if !config.train_mode || !draw_coin(config, rng) {
        return Ok(f);
    }
    let (perm, lambda) = draw_mixing::<S, R>(config, groups, rng)?;
    apply_mixstyle(g, f, &perm, &lambda, S::lit(config.epsilon))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn plane(values: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[1, 1, 2, 2], values).unwrap()
    }

    #[test]
    fn stats_of_known_channel() {
        let s = compute_channel_stats(&plane(&[1.0, 3.0, 5.0, 7.0]), 0.0).unwrap();
        assert_eq!(s.mu.data()[0], 4.0);
        assert!((s.sigma.data()[0] - 5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn constant_and_single_pixel_channels_fall_back_to_epsilon() {
        let s = compute_channel_stats(&plane(&[2.5; 4]), 1e-5).unwrap();
        assert_eq!(s.mu.data()[0], 2.5);
        assert!((s.sigma.data()[0] - 1e-5f64.sqrt()).abs() < 1e-15);

        let one = Tensor::<f32>::from_f64(&[1, 1, 1, 1], &[-3.0]).unwrap();
        let s = compute_channel_stats(&one, 1e-5).unwrap();
        assert_eq!(s.mu.data()[0], -3.0);
        assert!((s.sigma.data()[0] - 1e-5f32.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn instance_norm_examples() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(plane(&[1.0, 3.0, 5.0, 7.0]));
        let one = g.constant(Tensor::from_f64(&[1], &[1.0]).unwrap());
        let zero = g.constant(Tensor::from_f64(&[1], &[0.0]).unwrap());
        let y = instance_norm(&mut g, f, one, zero, 0.0).unwrap();
        let r5 = 5f64.sqrt();
        for (a, b) in g.value(y).data().iter().zip([-3.0 / r5, -1.0 / r5, 1.0 / r5, 3.0 / r5]) {
            assert!((a - b).abs() < 1e-12);
        }

        let beta = g.constant(Tensor::from_f64(&[1], &[0.7]).unwrap());
        let y = instance_norm(&mut g, f, zero, beta, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.7));

        let c = g.constant(plane(&[3.0; 4]));
        let y = instance_norm(&mut g, c, one, zero, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adain_examples() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(plane(&[1.0, 3.0, 5.0, 7.0]));
        let same = adain(&mut g, f, f, 1e-5).unwrap();
        assert!(g.value(same).max_abs_diff(&plane(&[1.0, 3.0, 5.0, 7.0])) < 1e-12);

        let style = g.constant(plane(&[10.0; 4]));
        let y = adain(&mut g, f, style, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|v| (v - 10.0).abs() < 0.02));

        let bad = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(adain(&mut g, f, bad, 1e-5).is_err());
    }

    #[test]
    fn mix_statistics_worked_example() {
        let a = ChannelStats {
            mu: Tensor::<f64>::from_f64(&[1, 1], &[1.0]).unwrap(),
            sigma: Tensor::from_f64(&[1, 1], &[2.0]).unwrap(),
        };
        let b = ChannelStats {
            mu: Tensor::from_f64(&[1, 1], &[5.0]).unwrap(),
            sigma: Tensor::from_f64(&[1, 1], &[4.0]).unwrap(),
        };
        let (gm, bm) = mix_statistics(&a, &b, &LambdaVector::constant(0.25, 1).unwrap()).unwrap();
        assert_eq!(gm.data(), &[3.5]);
        assert_eq!(bm.data(), &[4.0]);
        let (gm, bm) = mix_statistics(&a, &b, &LambdaVector::constant(1.0, 1).unwrap()).unwrap();
        assert_eq!((gm.data()[0], bm.data()[0]), (2.0, 1.0));
        let (gm, bm) = mix_statistics(&a, &b, &LambdaVector::constant(0.0, 1).unwrap()).unwrap();
        assert_eq!((gm.data()[0], bm.data()[0]), (4.0, 5.0));
    }

    #[test]
    fn permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = make_reference_permutation(4, Strategy::CrossDomain, &[0, 0, 1, 1], &mut rng).unwrap();
        assert_eq!(p, vec![2, 3, 0, 1]);
        assert_eq!(
            make_reference_permutation(1, Strategy::Random, &[0], &mut rng).unwrap(),
            vec![0]
        );
        assert!(make_reference_permutation(3, Strategy::CrossDomain, &[0, 0, 1], &mut rng).is_err());
        assert!(make_reference_permutation(4, Strategy::CrossDomain, &[0, 1, 1, 1], &mut rng).is_err());
        assert!(make_reference_permutation(4, Strategy::CrossDomain, &[2, 2, 2, 2], &mut rng).is_err());
        let mut r = make_reference_permutation(9, Strategy::Random, &[0; 9], &mut rng).unwrap();
        r.sort_unstable();
        assert_eq!(r, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn lambda_rejects_bad_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_lambda::<f32, _>(0.0, 4, &mut rng).is_err());
        assert!(sample_lambda::<f32, _>(-1.0, 4, &mut rng).is_err());
        let l = sample_lambda::<f32, _>(0.1, 1000, &mut rng).unwrap();
        assert!(l.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn placement_names_round_trip() {
        for name in ["res1", "res12", "res123", "res1234", "res14", "res23", "none"] {
            let p: Placement = name.parse().unwrap();
            assert_eq!(p.to_string(), name);
        }
        assert_eq!("res1,res3".parse::<Placement>().unwrap().to_string(), "res13");
        assert!("res5".parse::<Placement>().is_err());
        assert!("res0".parse::<Placement>().is_err());
        assert!("conv1".parse::<Placement>().is_err());
    }

    #[test]
    fn inactive_or_eval_is_the_same_node() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::<f32>::new();
        let f = g.param(Tensor::from_fn(&[4, 2, 3, 3], |i| i as f32 * 0.1));
        let mut cfg = MixStyleConfig {
            train_mode: false,
            p_active: 1.0,
            ..Default::default()
        };
        assert_eq!(mixstyle_forward(&mut g, f, &cfg, &[0; 4], &mut rng).unwrap(), f);
        cfg.train_mode = true;
        cfg.p_active = 0.0;
        assert_eq!(mixstyle_forward(&mut g, f, &cfg, &[0; 4], &mut rng).unwrap(), f);
        cfg.p_active = 1.0;
        assert_ne!(mixstyle_forward(&mut g, f, &cfg, &[0; 4], &mut rng).unwrap(), f);
    }

    #[test]
    fn config_validation() {
        assert!(MixStyleConfig::default().validate().is_ok());
        for bad in [
            MixStyleConfig { alpha: 0.0, ..Default::default() },
            MixStyleConfig { p_active: 1.5, ..Default::default() },
            MixStyleConfig { epsilon: 0.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
