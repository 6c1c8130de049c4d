//! Variational lower bounds on mutual information and exact reference values.
//!
//! Two estimators are provided, both in nats:
//!
//! * Jensen-Shannon: `E_P[-sp(-T)] - E_Q[sp(T)]`, whose supremum over critics
//!   is `2 JSD(P, Q) - 2 ln 2`. This is the default training objective.
//! * Donsker-Varadhan: `E_P[T] - log E_Q[e^T]`, whose supremum is `I(X; Y)`.
//!
//! `P` is the joint distribution (aligned pairs) and `Q` the product of
//! marginals, sampled by re-pairing a batch through a derangement.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{CmimError, Result};

/// `log(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Critic outputs on aligned (joint) and re-paired (marginal) samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ScorePair {
    joint: Vec<f64>,
    marginal: Vec<f64>,
}

impl ScorePair {
    pub fn new(joint: Vec<f64>, marginal: Vec<f64>) -> Result<Self> {
        if joint.is_empty() || marginal.is_empty() {
            return Err(CmimError::EmptySample);
        }
        if joint.iter().chain(&marginal).any(|s| !s.is_finite()) {
            return Err(CmimError::NonFiniteScore);
        }
        Ok(Self { joint, marginal })
    }

    pub fn joint(&self) -> &[f64] {
        &self.joint
    }

    pub fn marginal(&self) -> &[f64] {
        &self.marginal
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    #[default]
    Jsd,
    Dv,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiEstimate {
    pub value: f64,
    pub kind: EstimatorKind,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `log(mean(exp(xs)))` with the maximum factored out.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + (s / xs.len() as f64).ln()
}

pub fn jsd_mi_lower_bound(scores: &ScorePair) -> MiEstimate {
    let pos = mean(&scores.joint.iter().map(|t| -softplus(-t)).collect::<Vec<_>>());
    let neg = mean(&scores.marginal.iter().map(|t| softplus(*t)).collect::<Vec<_>>());
    MiEstimate {
        value: pos - neg,
        kind: EstimatorKind::Jsd,
    }
}

pub fn dv_mi_lower_bound(scores: &ScorePair) -> MiEstimate {
    MiEstimate {
        value: mean(&scores.joint) - log_mean_exp(&scores.marginal),
        kind: EstimatorKind::Dv,
    }
}

pub fn mi_lower_bound(scores: &ScorePair, kind: EstimatorKind) -> MiEstimate {
    match kind {
        EstimatorKind::Jsd => jsd_mi_lower_bound(scores),
        EstimatorKind::Dv => dv_mi_lower_bound(scores),
    }
}

/// Differentiable form of the selected bound over score tensors of any shape.
pub fn lower_bound_on_graph(g: &mut Graph, joint: Var, marginal: Var, kind: EstimatorKind) -> Var {
    match kind {
        EstimatorKind::Jsd => {
            let nj = g.neg(joint);
            let spj = g.softplus(nj);
            let pos = g.mean(spj);
            let spm = g.softplus(marginal);
            let neg = g.mean(spm);
            let total = g.add(pos, neg);
            g.neg(total)
        }
        EstimatorKind::Dv => {
            let pos = g.mean(joint);
            let lme = g.log_mean_exp(marginal);
            g.sub(pos, lme)
        }
    }
}

/// Seeded uniformly random derangement of `0..batch_size`, used to pair each
/// sample with another sample's partner.
pub fn make_marginal_pairing(batch_size: usize, seed: u64) -> Result<Vec<usize>> {
    if batch_size < 2 {
        return Err(CmimError::CannotPair(batch_size));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..batch_size).collect();
    // rejection sampling; accepts with probability ~1/e
    loop {
        perm.shuffle(&mut rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

/// Plug-in mutual information of a discrete joint probability table.
pub fn discrete_mi_oracle(joint: &Array2<f64>) -> Result<f64> {
    if joint.is_empty() {
        return Err(CmimError::invalid("empty joint table"));
    }
    if joint.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(CmimError::invalid("joint table has negative or non-finite entries"));
    }
    let total: f64 = joint.sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(CmimError::invalid(format!(
            "joint table sums to {total}, expected 1"
        )));
    }
    let px = joint.sum_axis(ndarray::Axis(1));
    let py = joint.sum_axis(ndarray::Axis(0));
    let mut mi = 0.0;
    for ((i, j), &p) in joint.indexed_iter() {
        if p > 0.0 {
            mi += p * (p / (px[i] * py[j])).ln();
        }
    }
    Ok(mi)
}

/// Mutual information of a bivariate Gaussian with correlation `rho`.
pub fn gaussian_mi_oracle(rho: f64) -> Result<f64> {
    if !(rho.abs() < 1.0) {
        return Err(CmimError::invalid(format!(
            "correlation must lie in (-1, 1), got {rho}"
        )));
    }
    Ok(-0.5 * (1.0 - rho * rho).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn pair(j: &[f64], m: &[f64]) -> ScorePair {
        ScorePair::new(j.to_vec(), m.to_vec()).unwrap()
    }

    #[test]
    fn softplus_examples() {
        assert_abs_diff_eq!(softplus(0.0), 2f64.ln(), epsilon = 1e-15);
        let tiny = softplus(-100.0);
        assert!((tiny / (-100f64).exp() - 1.0).abs() < 1e-12);
        // log(1 + e^20) evaluated at higher precision
        assert_abs_diff_eq!(softplus(20.0), 20.000000002061153, epsilon = 1e-12);
        assert_eq!(softplus(1000.0), 1000.0);
    }

    #[test]
    fn jsd_examples() {
        let v = jsd_mi_lower_bound(&pair(&[0.0], &[0.0]));
        assert_eq!(v.kind, EstimatorKind::Jsd);
        assert_abs_diff_eq!(v.value, -2.0 * 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(
            jsd_mi_lower_bound(&pair(&[1.0], &[-1.0])).value,
            -0.6265233750364457,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            jsd_mi_lower_bound(&pair(&[10.0, 10.0], &[-10.0, -10.0])).value,
            -9.07977984337293e-5,
            epsilon = 1e-12
        );
    }

    #[test]
    fn dv_examples() {
        assert_eq!(dv_mi_lower_bound(&pair(&[0.0, 0.0], &[0.0, 0.0])).value, 0.0);
        assert_eq!(dv_mi_lower_bound(&pair(&[1.0, 1.0], &[0.0, 0.0])).value, 1.0);
        assert_abs_diff_eq!(
            dv_mi_lower_bound(&pair(&[1.0, 1.0], &[0.0, 2.0])).value,
            -0.43378083048302707,
            epsilon = 1e-12
        );
    }

    #[test]
    fn dv_survives_huge_scores() {
        let v = dv_mi_lower_bound(&pair(&[800.0], &[800.0, 700.0]));
        assert!(v.value.is_finite());
    }

    #[test]
    fn empty_or_nonfinite_samples_rejected() {
        assert!(matches!(
            ScorePair::new(vec![], vec![1.0]),
            Err(CmimError::EmptySample)
        ));
        assert!(matches!(
            ScorePair::new(vec![1.0], vec![]),
            Err(CmimError::EmptySample)
        ));
        assert!(ScorePair::new(vec![f64::NAN], vec![1.0]).is_err());
    }

    #[test]
    fn graph_bounds_match_scalar_bounds() {
        let j = [0.3, -1.2, 2.5];
        let m = [1.1, -0.4, 0.0, 3.0];
        for kind in [EstimatorKind::Jsd, EstimatorKind::Dv] {
            let mut g = Graph::new();
            let jv = g.constant(ndarray::arr1(&j).into_dyn());
            let mv = g.constant(ndarray::arr1(&m).into_dyn());
            let b = lower_bound_on_graph(&mut g, jv, mv, kind);
            let expected = mi_lower_bound(&pair(&j, &m), kind).value;
            assert_abs_diff_eq!(g.scalar(b), expected, epsilon = 1e-14);
        }
    }

    #[test]
    fn pairing_examples() {
        for seed in 0..20 {
            assert_eq!(make_marginal_pairing(2, seed).unwrap(), vec![1, 0]);
        }
        assert!(matches!(
            make_marginal_pairing(1, 0),
            Err(CmimError::CannotPair(1))
        ));
        assert!(make_marginal_pairing(0, 0).is_err());
    }

    #[test]
    fn pairing_of_four_is_one_of_nine_derangements() {
        // enumerate every permutation of 0..4 and keep those without fixed points
        let mut derangements = Vec::new();
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    for d in 0..4 {
                        let p = [a, b, c, d];
                        let mut seen = [false; 4];
                        p.iter().for_each(|&x| seen[x] = true);
                        if seen.iter().all(|s| *s) && p.iter().enumerate().all(|(i, &x)| i != x) {
                            derangements.push(p.to_vec());
                        }
                    }
                }
            }
        }
        assert_eq!(derangements.len(), 9);
        assert!(derangements.contains(&make_marginal_pairing(4, 7).unwrap()));
        let mut hit = std::collections::BTreeSet::new();
        for seed in 0..400 {
            let p = make_marginal_pairing(4, seed).unwrap();
            assert!(derangements.contains(&p));
            hit.insert(p);
        }
        assert_eq!(hit.len(), 9, "sampler reaches every derangement");
    }

    #[test]
    fn discrete_oracle_examples() {
        assert_abs_diff_eq!(
            discrete_mi_oracle(&Array2::from_elem((2, 2), 0.25)).unwrap(),
            0.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            discrete_mi_oracle(&array![[0.5, 0.0], [0.0, 0.5]]).unwrap(),
            2f64.ln(),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            discrete_mi_oracle(&array![[0.4, 0.1], [0.1, 0.4]]).unwrap(),
            0.19274475702175753,
            epsilon = 1e-12
        );
        assert!(discrete_mi_oracle(&array![[0.4, 0.1], [0.1, 0.3]]).is_err());
        assert!(discrete_mi_oracle(&array![[1.2, -0.2]]).is_err());
    }

    #[test]
    fn gaussian_oracle_examples() {
        assert_eq!(gaussian_mi_oracle(0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(gaussian_mi_oracle(0.8).unwrap(), 0.5108256237659907, epsilon = 1e-12);
        assert_eq!(gaussian_mi_oracle(-0.8).unwrap(), gaussian_mi_oracle(0.8).unwrap());
        assert!(gaussian_mi_oracle(1.0).is_err());
        assert!(gaussian_mi_oracle(-1.5).is_err());
        assert!(gaussian_mi_oracle(f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn softplus_identity_and_monotone(z in -50.0f64..50.0, dz in 1e-6f64..10.0) {
            prop_assert!((softplus(z) - softplus(-z) - z).abs() < 1e-9);
            prop_assert!(softplus(z + dz) > softplus(z));
        }

        #[test]
        fn dv_shift_invariant(
            j in proptest::collection::vec(-5.0f64..5.0, 1..20),
            m in proptest::collection::vec(-5.0f64..5.0, 1..20),
            c in -100.0f64..100.0,
        ) {
            let base = dv_mi_lower_bound(&pair(&j, &m)).value;
            let js: Vec<f64> = j.iter().map(|x| x + c).collect();
            let ms: Vec<f64> = m.iter().map(|x| x + c).collect();
            let shifted = dv_mi_lower_bound(&pair(&js, &ms)).value;
            prop_assert!((base - shifted).abs() < 1e-9);
        }

        #[test]
        fn zero_critic_jsd_is_minus_two_ln_two(nj in 1usize..50, nm in 1usize..50) {
            let v = jsd_mi_lower_bound(&pair(&vec![0.0; nj], &vec![0.0; nm])).value;
            prop_assert!((v + 2.0 * 2f64.ln()).abs() < 1e-14);
        }

        #[test]
        fn pairing_is_a_deterministic_derangement(n in 2usize..64, seed in any::<u64>()) {
            let p = make_marginal_pairing(n, seed).unwrap();
            prop_assert_eq!(&p, &make_marginal_pairing(n, seed).unwrap());
            let mut seen = vec![false; n];
            for (i, &x) in p.iter().enumerate() {
                prop_assert!(i != x);
                prop_assert!(!seen[x]);
                seen[x] = true;
            }
        }
    }
}
