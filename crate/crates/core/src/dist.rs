//! Probability-space primitives: similarity-to-distribution conversion,
//! KL divergence, entropy and argmax prediction.
//!
//! All logarithms are natural, so the closed forms (`ln K` for the entropy of
//! a uniform distribution over `K` classes) hold exactly.

use crate::error::{Error, Result};

/// Temperature used for zero-shot softmax scores unless configured otherwise.
pub const DEFAULT_TEMPERATURE: f64 = 0.01;

const SUM_TOLERANCE: f64 = 1e-9;
const SIM_TOLERANCE: f64 = 1e-6;

/// A normalized probability vector over an ordered label set.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionDistribution {
    probs: Vec<f64>,
    labels: Vec<String>,
}

impl PredictionDistribution {
    pub fn new(probs: Vec<f64>, labels: Vec<String>) -> Result<Self> {
        if probs.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} probabilities for {} labels",
                probs.len(),
                labels.len()
            )));
        }
        if probs.len() < 2 {
            return Err(Error::invalid("a distribution needs at least two classes"));
        }
        if let Some((i, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0)
        {
            return Err(Error::invalid(format!("probs[{i}] = {p} is not a probability")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::invalid(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self { probs, labels })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest probability, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax_index(&self.probs)
    }
}

/// Cosine similarities between one image and `K` class texts, plus the
/// softmax temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityVector {
    sims: Vec<f64>,
    temperature: f64,
}

impl SimilarityVector {
    pub fn new(sims: Vec<f64>, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        if let Some((i, s)) = sims
            .iter()
            .enumerate()
            .find(|(_, s)| !s.is_finite() || s.abs() > 1.0 + SIM_TOLERANCE)
        {
            return Err(Error::invalid(format!("sims[{i}] = {s} is not a cosine")));
        }
        Ok(Self { sims, temperature })
    }

    pub fn sims(&self) -> &[f64] {
        &self.sims
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }
}

/// The uniform distribution over `k` classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UniformTarget {
    k: usize,
}

impl UniformTarget {
    pub fn new(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::invalid(format!("uniform target needs k >= 2, got {k}")));
        }
        Ok(Self { k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn distribution(&self, labels: Vec<String>) -> Result<PredictionDistribution> {
        if labels.len() != self.k {
            return Err(Error::invalid(format!(
                "uniform target over {} classes given {} labels",
                self.k,
                labels.len()
            )));
        }
        PredictionDistribution::new(vec![1.0 / self.k as f64; self.k], labels)
    }
}

/// Stable `log(sum(exp(x)))`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Log-softmax of raw logits.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|l| l - lse).collect()
}

/// Softmax of raw logits with max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `probs[k] = exp(sims[k]/τ) / Σ_j exp(sims[j]/τ)`.
pub fn softmax_from_similarities(
    s: &SimilarityVector,
    labels: &[String],
) -> Result<PredictionDistribution> {
    if s.sims.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} similarities for {} labels",
            s.sims.len(),
            labels.len()
        )));
    }
    let logits: Vec<f64> = s.sims.iter().map(|v| v / s.temperature).collect();
    PredictionDistribution::new(softmax(&logits), labels.to_vec())
}

/// `KL(p || q) = Σ p_k ln(p_k / q_k)` with `0 ln(0/q) = 0`.
pub fn kl_divergence(p: &PredictionDistribution, q: &PredictionDistribution) -> Result<f64> {
    if p.labels != q.labels {
        return Err(Error::invalid("KL divergence over mismatched label sets"));
    }
    let mut total = 0.0;
    for (index, (&pk, &qk)) in p.probs.iter().zip(&q.probs).enumerate() {
        if pk == 0.0 {
            continue;
        }
        if qk == 0.0 {
            return Err(Error::DivergenceUndefined { index, p_val: pk });
        }
        total += pk * (pk / qk).ln();
    }
    // Rounding can leave a tiny negative residue when p ≈ q.
    Ok(total.max(0.0))
}

/// Shannon entropy in nats.
pub fn entropy(p: &PredictionDistribution) -> f64 {
    entropy_of(&p.probs)
}

pub(crate) fn entropy_of(probs: &[f64]) -> f64 {
    let h: f64 = probs
        .iter()
        .filter(|&&pk| pk > 0.0)
        .map(|&pk| -pk * pk.ln())
        .sum();
    h.max(0.0)
}

/// Label of the largest probability; the lowest index wins ties.
pub fn argmax_predict(p: &PredictionDistribution) -> &str {
    &p.labels[p.argmax()]
}

pub(crate) fn argmax_index(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Element-wise mean of several distributions over the same labels.
pub fn average(dists: &[PredictionDistribution]) -> Result<PredictionDistribution> {
    let first = dists
        .first()
        .ok_or_else(|| Error::invalid("cannot average zero distributions"))?;
    let mut acc = vec![0.0; first.len()];
    for d in dists {
        if d.labels != first.labels {
            return Err(Error::invalid("averaging distributions over different labels"));
        }
        for (a, p) in acc.iter_mut().zip(&d.probs) {
            *a += p;
        }
    }
    let n = dists.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    PredictionDistribution::new(acc, first.labels.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    fn dist(p: &[f64]) -> PredictionDistribution {
        PredictionDistribution::new(p.to_vec(), labels(p.len())).unwrap()
    }

    #[test]
    fn symmetric_sims_give_uniform() {
        let s = SimilarityVector::new(vec![0.5, 0.5], DEFAULT_TEMPERATURE).unwrap();
        let p = softmax_from_similarities(&s, &labels(2)).unwrap();
        assert_eq!(p.probs(), &[0.5, 0.5]);
    }

    #[test]
    fn one_logit_gap() {
        // exp(1) / (exp(1) + 1), evaluated at 30 digits
        let s = SimilarityVector::new(vec![0.30, 0.29], 0.01).unwrap();
        let p = softmax_from_similarities(&s, &labels(2)).unwrap();
        assert!((p.probs()[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((p.probs()[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_temperature_and_sims() {
        assert!(SimilarityVector::new(vec![0.1, 0.2], 0.0).is_err());
        assert!(SimilarityVector::new(vec![0.1, 0.2], -1.0).is_err());
        assert!(SimilarityVector::new(vec![0.1, 1.5], 0.01).is_err());
        let s = SimilarityVector::new(vec![0.1, 0.2], 0.01).unwrap();
        assert!(softmax_from_similarities(&s, &labels(3)).is_err());
    }

    #[test]
    fn kl_examples() {
        let p = dist(&[0.75, 0.25]);
        let q = dist(&[0.5, 0.5]);
        assert!((kl_divergence(&p, &q).unwrap() - 0.130_812_035_941_137).abs() < 1e-12);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let onehot = dist(&[0.0, 1.0, 0.0, 0.0]);
        let u = UniformTarget::new(4).unwrap().distribution(labels(4)).unwrap();
        assert!((kl_divergence(&onehot, &u).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_errors() {
        let p = dist(&[0.5, 0.5]);
        let q = dist(&[1.0, 0.0]);
        assert!(matches!(
            kl_divergence(&p, &q),
            Err(Error::DivergenceUndefined { index: 1, .. })
        ));
        let other = PredictionDistribution::new(vec![0.5, 0.5], vec!["x".into(), "y".into()]).unwrap();
        assert!(matches!(kl_divergence(&p, &other), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&dist(&[1.0, 0.0, 0.0])), 0.0);
        assert!((entropy(&dist(&[0.25; 4])) - 4f64.ln()).abs() < 1e-15);
        assert!((entropy(&dist(&[0.9, 0.1])) - 0.325_082_973_391_448_2).abs() < 1e-12);
    }

    #[test]
    fn argmax_and_ties() {
        let p = PredictionDistribution::new(vec![0.2, 0.8], vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(argmax_predict(&p), "b");
        let t = PredictionDistribution::new(vec![0.5, 0.5], vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(argmax_predict(&t), "a");
    }

    #[test]
    fn distribution_invariants_enforced() {
        assert!(PredictionDistribution::new(vec![1.0], labels(1)).is_err());
        assert!(PredictionDistribution::new(vec![0.6, 0.6], labels(2)).is_err());
        assert!(PredictionDistribution::new(vec![1.1, -0.1], labels(2)).is_err());
        assert!(UniformTarget::new(1).is_err());
    }

    fn sims_strategy() -> impl Strategy<Value = Vec<f64>> {
        (2usize..10).prop_flat_map(|k| proptest::collection::vec(-1.0f64..=1.0, k))
    }

    proptest! {
        #[test]
        fn softmax_normalized_and_argmax_invariant(sims in sims_strategy(), t1 in 1e-3f64..10.0, t2 in 1e-3f64..10.0) {
            let l = labels(sims.len());
            let p1 = softmax_from_similarities(&SimilarityVector::new(sims.clone(), t1).unwrap(), &l).unwrap();
            let p2 = softmax_from_similarities(&SimilarityVector::new(sims.clone(), t2).unwrap(), &l).unwrap();
            let sum: f64 = p1.probs().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert_eq!(p1.argmax(), argmax_index(&sims));
            prop_assert_eq!(argmax_predict(&p1), argmax_predict(&p2));
        }

        #[test]
        fn entropy_non_decreasing_in_temperature(sims in sims_strategy(), t in 1e-2f64..5.0, dt in 0.0f64..5.0) {
            let mut distinct = sims.clone();
            distinct.sort_by(f64::total_cmp);
            prop_assume!(distinct.windows(2).all(|w| w[1] - w[0] > 1e-6));
            let l = labels(sims.len());
            let h1 = entropy(&softmax_from_similarities(&SimilarityVector::new(sims.clone(), t).unwrap(), &l).unwrap());
            let h2 = entropy(&softmax_from_similarities(&SimilarityVector::new(sims, t + dt).unwrap(), &l).unwrap());
            prop_assert!(h2 >= h1 - 1e-12);
        }

        #[test]
        fn kl_non_negative(a in proptest::collection::vec(0.0f64..1.0, 5), b in proptest::collection::vec(1e-3f64..1.0, 5)) {
            let sa: f64 = a.iter().sum();
            prop_assume!(sa > 1e-6);
            let sb: f64 = b.iter().sum();
            let p = dist(&a.iter().map(|x| x / sa).collect::<Vec<_>>());
            let q = dist(&b.iter().map(|x| x / sb).collect::<Vec<_>>());
            prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        }
    }
}
