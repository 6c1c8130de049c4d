//! Parameterized building blocks shared by encoders, heads and critics.

use rand::Rng;

use crate::autograd::{Conv2dSpec, Graph, Var};
use crate::params::{he_uniform, uniform_fan_in, zeros, ParamId, ParamStore};

/// Convolution with kernel `[kh, kw, Ci, Co]` and per-channel bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: Conv2dSpec,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        kernel: (usize, usize),
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let (kh, kw) = kernel;
        let w = store.add(
            format!("{name}.w"),
            he_uniform(rng, &[kh, kw, c_in, c_out], kh * kw * c_in),
            true,
        );
        let b = store.add(format!("{name}.b"), zeros(&[c_out]), true);
        Self {
            w,
            b,
            spec: Conv2dSpec::same(kh, kw, stride),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.conv2d(x, w, self.spec);
        g.add_bias(y, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

/// Dense map over the last axis, optionally without bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            uniform_fan_in(rng, &[d_in, d_out], d_in, 1.0),
            true,
        );
        let b = bias.then(|| store.add(format!("{name}.b"), zeros(&[d_out]), true));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.get(self.w).shape()[0]
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}
