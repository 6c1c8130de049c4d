use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{CmimError, Result};
use crate::layers::Linear;
use crate::params::{ParamId, ParamStore};

/// Scales row `b` of `v` by `weights[b]`.
pub(crate) fn scale_rows(g: &mut Graph, v: Var, weights: &[f64]) -> Var {
    let shape = g.shape(v).to_vec();
    let per_row: usize = shape[1..].iter().product();
    let w = ArrayD::from_shape_fn(IxDyn(&shape), |idx| weights[idx[0]]);
    debug_assert_eq!(w.len(), weights.len() * per_row);
    g.mul_const(v, w)
}

/// Projects each modality's local map to a shared width (no bias) and stacks
/// the results along the location axis. Locations of a modality absent from a
/// sample are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalFusion {
    projections: Vec<Linear>,
    locations: Vec<usize>,
    out_dim: usize,
}

impl LocalFusion {
    /// `inputs[i] = (locations, channels)` of modality `i`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: &[(usize, usize)],
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let projections = inputs
            .iter()
            .enumerate()
            .map(|(i, &(_, c))| Linear::new(store, &format!("{name}.proj{i}"), c, out_dim, false, rng))
            .collect();
        Self {
            projections,
            locations: inputs.iter().map(|p| p.0).collect(),
            out_dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn num_locations(&self) -> usize {
        self.locations.iter().sum()
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.projections.iter().flat_map(|p| p.params()).collect()
    }

    /// `locals[i]` is `[B, N_i, C_i]` or `None` if modality `i` is absent from
    /// the whole batch. Output `[B, sum N_i, out_dim]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        locals: &[Option<Var>],
        present: &Array2<bool>,
    ) -> Result<Var> {
        let (bs, m) = present.dim();
        if locals.len() != self.projections.len() || m != locals.len() {
            return Err(CmimError::Shape(format!(
                "{} local maps for {} projections",
                locals.len(),
                self.projections.len()
            )));
        }
        let mut parts = Vec::with_capacity(m);
        for (i, local) in locals.iter().enumerate() {
            let part = match local {
                Some(v) => {
                    let p = self.projections[i].forward(g, store, *v);
                    let col = present.column(i);
                    if col.iter().all(|x| *x) {
                        p
                    } else {
                        let w: Vec<f64> = col.iter().map(|x| f64::from(u8::from(*x))).collect();
                        scale_rows(g, p, &w)
                    }
                }
                None => g.constant(ArrayD::zeros(IxDyn(&[bs, self.locations[i], self.out_dim]))),
            };
            parts.push(part);
        }
        Ok(g.concat(&parts, 1))
    }

    /// Single-sample form on plain arrays.
    pub fn fuse_local(&self, store: &ParamStore, locals: &[Option<&Array2<f64>>]) -> Result<Array2<f64>> {
        if locals.iter().all(|l| l.is_none()) {
            return Err(CmimError::invalid("no modality present"));
        }
        let mut g = Graph::new();
        let mut vars = Vec::with_capacity(locals.len());
        let mut present = Array2::from_elem((1, locals.len()), false);
        for (i, l) in locals.iter().enumerate() {
            vars.push(match l {
                Some(a) => {
                    let expected = (self.locations[i], self.projections[i].in_dim(store));
                    if a.dim() != expected {
                        return Err(CmimError::Shape(format!(
                            "local map {i} is {:?}, expected {expected:?}",
                            a.dim()
                        )));
                    }
                    present[[0, i]] = true;
                    Some(g.constant((*a).clone().insert_axis(Axis(0)).into_dyn()))
                }
                None => None,
            });
        }
        let out = self.forward(&mut g, store, &vars, &present)?;
        Ok(g.value(out)
            .index_axis(Axis(0), 0)
            .to_owned()
            .into_dimensionality()
            .expect("[N, C]"))
    }
}

/// Low-rank bilinear pooling of global vectors:
/// `((g_1 U_1) * (g_2 U_2) * ...) P`, no biases.
#[derive(Clone, Debug, PartialEq)]
pub struct BilinearFusion {
    factors: Vec<Linear>,
    output: Linear,
    rank: usize,
}

impl BilinearFusion {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dims: &[usize],
        rank: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let factors = in_dims
            .iter()
            .enumerate()
            .map(|(i, &d)| Linear::new(store, &format!("{name}.u{i}"), d, rank, false, rng))
            .collect();
        let output = Linear::new(store, &format!("{name}.p"), rank, out_dim, false, rng);
        Self { factors, output, rank }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.factors.iter().flat_map(|f| f.params()).collect();
        ids.extend(self.output.params());
        ids
    }

    /// `globals[i]` is `[B, G_i]`; output `[B, out_dim]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, globals: &[Var]) -> Result<Var> {
        if globals.len() != self.factors.len() {
            return Err(CmimError::Shape(format!(
                "{} global vectors for {} factors",
                globals.len(),
                self.factors.len()
            )));
        }
        let mut acc: Option<Var> = None;
        for (f, v) in self.factors.iter().zip(globals) {
            let p = f.forward(g, store, *v);
            acc = Some(match acc {
                None => p,
                Some(a) => g.mul(a, p),
            });
        }
        let h = acc.ok_or_else(|| CmimError::invalid("bilinear fusion needs at least one input"))?;
        Ok(self.output.forward(g, store, h))
    }

    pub fn fuse_global(&self, store: &ParamStore, globals: &[&Array1<f64>]) -> Result<Array1<f64>> {
        let mut g = Graph::new();
        let mut vars = Vec::with_capacity(globals.len());
        for (i, v) in globals.iter().enumerate() {
            let d = self.factors.get(i).map(|f| f.in_dim(store));
            if d != Some(v.len()) {
                return Err(CmimError::Shape(format!(
                    "global vector {i} has length {}, expected {d:?}",
                    v.len()
                )));
            }
            vars.push(g.constant((*v).clone().insert_axis(Axis(0)).into_dyn()));
        }
        let out = self.forward(&mut g, store, &vars)?;
        Ok(g.value(out)
            .index_axis(Axis(0), 0)
            .to_owned()
            .into_dimensionality()
            .expect("[C]"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn local_fusion_stacks_locations() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = LocalFusion::new(&mut store, "lf", &[(4, 3), (6, 5)], 7, &mut rng);
        let a = Array2::from_elem((4, 3), 0.5);
        let b = Array2::from_elem((6, 5), -0.25);
        let out = f.fuse_local(&store, &[Some(&a), Some(&b)]).unwrap();
        assert_eq!(out.dim(), (10, 7));
        let w0 = store.get(f.projections[0].w).clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        let expected = a.dot(&w0);
        for (x, y) in out.slice(ndarray::s![0..4, ..]).iter().zip(expected.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        let only_a = f.fuse_local(&store, &[Some(&a), None]).unwrap();
        assert!(only_a.slice(ndarray::s![4.., ..]).iter().all(|x| *x == 0.0));
        assert!(f.fuse_local(&store, &[None, None]).is_err());
        assert!(f.fuse_local(&store, &[Some(&b), None]).is_err());
    }

    #[test]
    fn bilinear_matches_hand_computation() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = BilinearFusion::new(&mut store, "bf", &[2, 2], 2, 1, &mut rng);
        store.set(f.factors[0].w, array![[1.0, 0.0], [0.0, 2.0]].into_dyn());
        store.set(f.factors[1].w, array![[1.0, 1.0], [0.0, 1.0]].into_dyn());
        store.set(f.output.w, array![[1.0], [-1.0]].into_dyn());
        // a U = [1, 4], b V = [3, 5], product [3, 20], P -> -17
        let out = f
            .fuse_global(&store, &[&array![1.0, 2.0], &array![3.0, 2.0]])
            .unwrap();
        assert_eq!(out, array![-17.0]);
        assert!(f.fuse_global(&store, &[&array![1.0], &array![3.0, 2.0]]).is_err());
    }

    #[test]
    fn bilinear_is_zero_when_one_input_is_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = BilinearFusion::new(&mut store, "bf", &[5, 4], 8, 6, &mut rng);
        let out = f
            .fuse_global(&store, &[&Array1::from_elem(5, 0.3), &Array1::zeros(4)])
            .unwrap();
        assert!(out.iter().all(|x| *x == 0.0));
    }
}
