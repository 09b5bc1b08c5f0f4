//! Tokenwise affine layers and parameter initialization.

use rand::Rng;

use crate::graph::{Graph, Mat, ParamId, ParamStore, Var};

/// Samples a `rows x cols` matrix uniformly from `[-bound, bound]`.
pub fn uniform_matrix(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Mat {
    Mat::from_shape_simple_fn((rows, cols), || {
        if bound == 0.0 {
            0.0
        } else {
            rng.random_range(-bound..=bound)
        }
    })
}

/// `y = x·W + b`, applied to every row of `x`. `W` is `fan_in x fan_out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Uniform init with bound `1/sqrt(fan_in)` for weights and bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform_matrix(rng, fan_in, fan_out, bound),
        );
        let bias = store.add(format!("{name}.bias"), uniform_matrix(rng, 1, fan_out, bound));
        Linear { weight, bias }
    }

    pub fn fan_in(&self, store: &ParamStore) -> usize {
        store.get(self.weight).nrows()
    }

    pub fn fan_out(&self, store: &ParamStore) -> usize {
        store.get(self.weight).ncols()
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    /// Plain evaluation outside any graph.
    pub fn apply(&self, store: &ParamStore, x: &Mat) -> Mat {
        x.dot(store.get(self.weight)) + store.get(self.bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_respects_bound_and_shape() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new(&mut store, "l", 16, 5, &mut rng);
        assert_eq!(store.get(lin.weight).dim(), (16, 5));
        assert_eq!(store.get(lin.bias).dim(), (1, 5));
        assert!(store.get(lin.weight).iter().all(|v| v.abs() <= 0.25));
        assert_eq!(store.name(lin.bias), "l.bias");
    }

    #[test]
    fn graph_and_plain_evaluation_agree() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lin = Linear::new(&mut store, "l", 3, 2, &mut rng);
        let x = uniform_matrix(&mut rng, 4, 3, 1.0);
        let mut g = Graph::new(&store);
        let xv = g.constant(x.clone());
        let y = lin.forward(&mut g, xv);
        assert_eq!(g.value(y), &lin.apply(&store, &x));
    }
}
