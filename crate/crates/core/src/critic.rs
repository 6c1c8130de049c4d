//! Concat-and-convolve critics.
//!
//! A critic scores a pair of feature vectors: the two vectors are
//! concatenated along the channel axis and passed through a stack of 1x1
//! convolutions (a per-location MLP) ending in a single channel. The first
//! layer's weight is stored as two blocks, one per input, so that scoring
//! every location pair of two feature maps only needs each block applied
//! once per location; `[a; b] W = a W_a + b W_b` keeps this identical to
//! concatenation.

use ndarray::{s, Array2, ArrayD, ArrayView2, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{CmimError, Result};
use crate::mi::{
    lower_bound_on_graph, make_marginal_pairing, mi_lower_bound, EstimatorKind, MiEstimate, ScorePair,
};
use crate::optim::{Adam, AdamConfig};
use crate::params::{uniform_fan_in, zeros, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CriticKind {
    LocalLocal,
    LocalGlobal,
    GlobalGlobal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    kind: CriticKind,
    dim_a: usize,
    dim_b: usize,
    hidden: usize,
    w1a: ParamId,
    w1b: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    w3: ParamId,
    b3: ParamId,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        kind: CriticKind,
        dim_a: usize,
        dim_b: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let fan1 = dim_a + dim_b;
        let w1a = store.add(
            format!("{name}.w1a"),
            uniform_fan_in(rng, &[dim_a, hidden], fan1, 1.0),
            true,
        );
        let w1b = store.add(
            format!("{name}.w1b"),
            uniform_fan_in(rng, &[dim_b, hidden], fan1, 1.0),
            true,
        );
        let b1 = store.add(format!("{name}.b1"), zeros(&[hidden]), true);
        let w2 = store.add(
            format!("{name}.w2"),
            uniform_fan_in(rng, &[hidden, hidden], hidden, 1.0),
            true,
        );
        let b2 = store.add(format!("{name}.b2"), zeros(&[hidden]), true);
        let w3 = store.add(
            format!("{name}.w3"),
            uniform_fan_in(rng, &[hidden, 1], hidden, 1.0),
            true,
        );
        let b3 = store.add(format!("{name}.b3"), zeros(&[1]), true);
        Self {
            kind,
            dim_a,
            dim_b,
            hidden,
            w1a,
            w1b,
            b1,
            w2,
            b2,
            w3,
            b3,
        }
    }

    pub fn kind(&self) -> CriticKind {
        self.kind
    }

    pub fn input_dims(&self) -> (usize, usize) {
        (self.dim_a, self.dim_b)
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> [ParamId; 7] {
        [
            self.w1a, self.w1b, self.b1, self.w2, self.b2, self.w3, self.b3,
        ]
    }

    /// Layers after the first: `[R, H] -> [R, 1]`.
    fn tail(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Var {
        let b1 = g.param(store, self.b1);
        let h = g.add_bias(h, b1);
        let h = g.relu(h);
        let w2 = g.param(store, self.w2);
        let b2 = g.param(store, self.b2);
        let h = g.linear(h, w2, Some(b2));
        let h = g.relu(h);
        let w3 = g.param(store, self.w3);
        let b3 = g.param(store, self.b3);
        g.linear(h, w3, Some(b3))
    }

    fn check_dims(&self, g: &Graph, a: Var, b: Var) {
        let (sa, sb) = (g.shape(a), g.shape(b));
        assert_eq!(sa.len(), 3, "critic input a must be [B, N, D]");
        assert_eq!(sb.len(), 3, "critic input b must be [B, N, D]");
        assert_eq!(sa[2], self.dim_a, "critic input a dim");
        assert_eq!(sb[2], self.dim_b, "critic input b dim");
        assert_eq!(sa[0], sb[0], "critic batch mismatch");
    }

    /// Scores every location pair: `a [B, Na, Da]`, `b [B, Nb, Db]` give
    /// `[B, Na, Nb]`.
    pub fn score_grid(&self, g: &mut Graph, store: &ParamStore, a: Var, b: Var) -> Var {
        self.check_dims(g, a, b);
        let (bs, na, nb) = (g.shape(a)[0], g.shape(a)[1], g.shape(b)[1]);
        let w1a = g.param(store, self.w1a);
        let w1b = g.param(store, self.w1b);
        let ha = g.linear(a, w1a, None);
        let hb = g.linear(b, w1b, None);
        let h = g.pairwise_add(ha, hb);
        let h = g.reshape(h, &[bs * na * nb, self.hidden]);
        let s = self.tail(g, store, h);
        g.reshape(s, &[bs, na, nb])
    }

    /// Scores aligned pairs: `a [B, P, Da]`, `b [B, P, Db]` give `[B, P]`.
    pub fn score_aligned(&self, g: &mut Graph, store: &ParamStore, a: Var, b: Var) -> Var {
        self.check_dims(g, a, b);
        let (bs, p) = (g.shape(a)[0], g.shape(a)[1]);
        assert_eq!(g.shape(b)[1], p, "aligned scoring needs equal location counts");
        let w1a = g.param(store, self.w1a);
        let w1b = g.param(store, self.w1b);
        let ha = g.linear(a, w1a, None);
        let hb = g.linear(b, w1b, None);
        let h = g.add(ha, hb);
        let h = g.reshape(h, &[bs * p, self.hidden]);
        let s = self.tail(g, store, h);
        g.reshape(s, &[bs, p])
    }

    fn check_len(&self, what: &str, got: usize, want: usize) -> Result<()> {
        if got != want {
            return Err(CmimError::Shape(format!(
                "{what} has dimension {got}, critic expects {want}"
            )));
        }
        Ok(())
    }

    fn rows_to_var(g: &mut Graph, rows: &Array2<f64>) -> Var {
        let (n, d) = rows.dim();
        let t = rows
            .clone()
            .into_shape_with_order(IxDyn(&[1, n, d]))
            .expect("reshape");
        g.constant(t)
    }

    fn vec_to_var(g: &mut Graph, v: &[f64]) -> Var {
        g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 1, v.len()]), v.to_vec()).expect("shape"))
    }

    pub fn score_local_local(&self, store: &ParamStore, a: &[f64], b: &[f64]) -> Result<f64> {
        self.check_len("first input", a.len(), self.dim_a)?;
        self.check_len("second input", b.len(), self.dim_b)?;
        let mut g = Graph::new();
        let av = Self::vec_to_var(&mut g, a);
        let bv = Self::vec_to_var(&mut g, b);
        let s = self.score_grid(&mut g, store, av, bv);
        Ok(g.scalar(s))
    }

    /// Broadcasts `global` to every row of `local [N, Da]`; one score per row.
    pub fn score_local_global(
        &self,
        store: &ParamStore,
        local: &Array2<f64>,
        global: &[f64],
    ) -> Result<Vec<f64>> {
        self.check_len("local map", local.ncols(), self.dim_a)?;
        self.check_len("global vector", global.len(), self.dim_b)?;
        let mut g = Graph::new();
        let lv = Self::rows_to_var(&mut g, local);
        let gv = Self::vec_to_var(&mut g, global);
        let s = self.score_grid(&mut g, store, lv, gv);
        Ok(g.value(s).iter().copied().collect())
    }

    pub fn score_global_global(&self, store: &ParamStore, g1: &[f64], g2: &[f64]) -> Result<f64> {
        self.score_local_local(store, g1, g2)
    }

    /// Scores row pairs `(x[i], y[i])` of two sample matrices.
    pub fn score_rows(&self, store: &ParamStore, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<Vec<f64>> {
        self.check_len("x", x.ncols(), self.dim_a)?;
        self.check_len("y", y.ncols(), self.dim_b)?;
        if x.nrows() != y.nrows() {
            return Err(CmimError::Shape(format!("{} x rows vs {} y rows", x.nrows(), y.nrows())));
        }
        let mut out = Vec::with_capacity(x.nrows());
        let n = x.nrows();
        for start in (0..n).step_by(4096) {
            let end = (start + 4096).min(n);
            let mut g = Graph::new();
            let a = column_batch(&mut g, x.slice(s![start..end, ..]));
            let b = column_batch(&mut g, y.slice(s![start..end, ..]));
            let sc = self.score_aligned(&mut g, store, a, b);
            out.extend(g.value(sc).iter().copied());
        }
        Ok(out)
    }
}

/// `[n, d]` rows as a `[n, 1, d]` constant.
fn column_batch(g: &mut Graph, rows: ArrayView2<f64>) -> Var {
    let (n, d) = rows.dim();
    let t = rows
        .to_owned()
        .into_shape_with_order(IxDyn(&[n, 1, d]))
        .expect("reshape");
    g.constant(t)
}

/// Settings for fitting a standalone critic to paired samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticFit {
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub estimator: EstimatorKind,
    pub seed: u64,
}

impl Default for CriticFit {
    fn default() -> Self {
        Self {
            hidden: 64,
            steps: 2000,
            batch_size: 512,
            learning_rate: 1e-3,
            estimator: EstimatorKind::Dv,
            seed: 0,
        }
    }
}

/// Trains a fresh critic to maximize the chosen bound on `(x[i], y[i])`
/// pairs, with minibatch marginals built by within-batch derangements.
pub fn fit_critic(x: ArrayView2<f64>, y: ArrayView2<f64>, fit: &CriticFit) -> Result<(ParamStore, Critic)> {
    let n = x.nrows();
    if n != y.nrows() {
        return Err(CmimError::Shape(format!("{n} x rows vs {} y rows", y.nrows())));
    }
    if n < 2 || fit.batch_size < 2 {
        return Err(CmimError::InsufficientBatch(n.min(fit.batch_size)));
    }
    let bs = fit.batch_size.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(fit.seed);
    let mut store = ParamStore::new();
    let critic = Critic::new(
        &mut store,
        "critic",
        CriticKind::GlobalGlobal,
        x.ncols(),
        y.ncols(),
        fit.hidden,
        &mut rng,
    );
    let mut adam = Adam::new(AdamConfig {
        learning_rate: fit.learning_rate,
        ..AdamConfig::default()
    });
    for step in 0..fit.steps {
        let idx = rand::seq::index::sample(&mut rng, n, bs).into_vec();
        let pairing = make_marginal_pairing(bs, fit.seed.wrapping_add(step as u64))?;
        let shuffled: Vec<usize> = pairing.iter().map(|&p| idx[p]).collect();
        let mut g = Graph::new();
        let a = column_batch(&mut g, x.select(Axis(0), &idx).view());
        let b = column_batch(&mut g, y.select(Axis(0), &idx).view());
        let b_marg = column_batch(&mut g, y.select(Axis(0), &shuffled).view());
        let joint = critic.score_aligned(&mut g, &store, a, b);
        let marginal = critic.score_aligned(&mut g, &store, a, b_marg);
        let bound = lower_bound_on_graph(&mut g, joint, marginal, fit.estimator);
        let loss = g.neg(bound);
        if !g.scalar(loss).is_finite() {
            return Err(CmimError::NonFinite {
                component: "critic".into(),
                epoch: 0,
                step,
            });
        }
        let grads = g.backward(loss);
        adam.step(&mut store, &grads);
    }
    Ok((store, critic))
}

/// The chosen bound for a fixed critic over all pairs `(x[i], y[i])`, with
/// marginals `(x[i], y[π(i)])` for a seeded derangement `π`.
pub fn critic_bound(
    store: &ParamStore,
    critic: &Critic,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    kind: EstimatorKind,
    seed: u64,
) -> Result<MiEstimate> {
    let pairing = make_marginal_pairing(y.nrows(), seed)?;
    let joint = critic.score_rows(store, x, y)?;
    let marginal = critic.score_rows(store, x, y.select(Axis(0), &pairing).view())?;
    Ok(mi_lower_bound(&ScorePair::new(joint, marginal)?, kind))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn critic(dim_a: usize, dim_b: usize, hidden: usize, seed: u64) -> (ParamStore, Critic) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = Critic::new(
            &mut store,
            "critic",
            CriticKind::LocalLocal,
            dim_a,
            dim_b,
            hidden,
            &mut rng,
        );
        (store, c)
    }

    fn randv(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    /// Literal concat-then-MLP evaluation used as a reference.
    fn reference_score(store: &ParamStore, c: &Critic, a: &[f64], b: &[f64]) -> f64 {
        let x: Vec<f64> = a.iter().chain(b).copied().collect();
        let w1a = store.get(c.w1a);
        let w1b = store.get(c.w1b);
        let w1: Vec<Vec<f64>> = (0..x.len())
            .map(|i| {
                (0..c.hidden)
                    .map(|j| if i < c.dim_a { w1a[[i, j]] } else { w1b[[i - c.dim_a, j]] })
                    .collect()
            })
            .collect();
        let layer = |x: &[f64], w: &dyn Fn(usize, usize) -> f64, b: &dyn Fn(usize) -> f64, out: usize, relu: bool| {
            (0..out)
                .map(|j| {
                    let s = b(j) + x.iter().enumerate().map(|(i, xi)| xi * w(i, j)).sum::<f64>();
                    if relu { s.max(0.0) } else { s }
                })
                .collect::<Vec<f64>>()
        };
        let (b1, w2, b2, w3, b3) = (
            store.get(c.b1),
            store.get(c.w2),
            store.get(c.b2),
            store.get(c.w3),
            store.get(c.b3),
        );
        let h1 = layer(&x, &|i, j| w1[i][j], &|j| b1[j], c.hidden, true);
        let h2 = layer(&h1, &|i, j| w2[[i, j]], &|j| b2[j], c.hidden, true);
        layer(&h2, &|i, j| w3[[i, j]], &|_| b3[0], 1, false)[0]
    }

    #[test]
    fn zero_critic_scores_zero() {
        let (mut store, c) = critic(4, 3, 8, 0);
        store.zero_all();
        assert_eq!(c.score_local_local(&store, &[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0]).unwrap(), 0.0);
        assert_eq!(c.score_global_global(&store, &[0.5; 4], &[-3.0; 3]).unwrap(), 0.0);
    }

    #[test]
    fn default_sizes_give_one_finite_score() {
        let (store, c) = critic(64, 64, 256, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = c
            .score_local_local(&store, &randv(&mut rng, 64), &randv(&mut rng, 64))
            .unwrap();
        assert!(s.is_finite());
    }

    #[test]
    fn scoring_is_deterministic_and_matches_concat_reference() {
        let (store, c) = critic(5, 3, 16, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a, b) = (randv(&mut rng, 5), randv(&mut rng, 3));
        let s1 = c.score_local_local(&store, &a, &b).unwrap();
        let s2 = c.score_local_local(&store, &a, &b).unwrap();
        assert_eq!(s1, s2);
        assert!((s1 - reference_score(&store, &c, &a, &b)).abs() < 1e-12);
        let g = c.score_global_global(&store, &a, &b).unwrap();
        assert_eq!(g, c.score_global_global(&store, &a, &b).unwrap());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let (store, c) = critic(4, 3, 8, 0);
        assert!(matches!(
            c.score_local_local(&store, &[0.0; 3], &[0.0; 3]),
            Err(CmimError::Shape(_))
        ));
        assert!(c.score_global_global(&store, &[0.0; 4], &[0.0; 4]).is_err());
        assert!(c
            .score_local_global(&store, &Array2::zeros((2, 5)), &[0.0; 3])
            .is_err());
    }

    #[test]
    fn local_global_single_location_equals_pair_score() {
        let (store, c) = critic(4, 6, 8, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (a, g) = (randv(&mut rng, 4), randv(&mut rng, 6));
        let local = Array2::from_shape_vec((1, 4), a.clone()).unwrap();
        let scores = c.score_local_global(&store, &local, &g).unwrap();
        assert_eq!(scores.len(), 1);
        assert_eq!(scores[0], c.score_local_local(&store, &a, &g).unwrap());
    }

    #[test]
    fn local_global_on_8x8_map_and_location_equivariance() {
        let (store, c) = critic(8, 8, 16, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let local = Array2::from_shape_vec((64, 8), randv(&mut rng, 64 * 8)).unwrap();
        let gvec = randv(&mut rng, 8);
        let scores = c.score_local_global(&store, &local, &gvec).unwrap();
        assert_eq!(scores.len(), 64);
        assert!(scores.iter().all(|s| s.is_finite()));
        let perm: Vec<usize> = (0..64).map(|i| (i * 17 + 5) % 64).collect();
        let permuted = local.select(ndarray::Axis(0), &perm);
        let pscores = c.score_local_global(&store, &permuted, &gvec).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(pscores[i], scores[p]);
        }
    }

    #[test]
    fn grid_and_aligned_scoring_agree_with_single_pairs() {
        let (store, c) = critic(3, 2, 8, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = ArrayD::from_shape_vec(IxDyn(&[2, 3, 3]), randv(&mut rng, 18)).unwrap();
        let b = ArrayD::from_shape_vec(IxDyn(&[2, 3, 2]), randv(&mut rng, 12)).unwrap();
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let grid = c.score_grid(&mut g, &store, av, bv);
        let aligned = c.score_aligned(&mut g, &store, av, bv);
        for bi in 0..2 {
            for n in 0..3 {
                for m in 0..3 {
                    let av: Vec<f64> = (0..3).map(|k| a[[bi, n, k]]).collect();
                    let bvv: Vec<f64> = (0..2).map(|k| b[[bi, m, k]]).collect();
                    let s = c.score_local_local(&store, &av, &bvv).unwrap();
                    assert!((g.value(grid)[[bi, n, m]] - s).abs() < 1e-12);
                    if n == m {
                        assert!((g.value(aligned)[[bi, n]] - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn critic_gradients_match_finite_differences() {
        let (mut store, c) = critic(3, 2, 6, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = ArrayD::from_shape_vec(IxDyn(&[2, 2, 3]), randv(&mut rng, 12)).unwrap();
        let b = ArrayD::from_shape_vec(IxDyn(&[2, 3, 2]), randv(&mut rng, 12)).unwrap();
        let f = |g: &mut Graph, s: &ParamStore| {
            let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
            let grid = c.score_grid(g, s, av, bv);
            g.mean(grid)
        };
        let report = crate::gradcheck::check_gradients(&mut store, &c.params(), 1e-5, f);
        assert_eq!(report.checked, 3 * 6 + 2 * 6 + 6 + 36 + 6 + 6 + 1);
        assert!(report.max_rel_error < 1e-4, "{:?}", report.worst);
    }
}
