//! Implicit similarity graph, per-schema sparsification, fusion with the
//! probe graph and assembly of the weighted heterogeneous graph.

use crate::autodiff::{Tape, Var};
use crate::corpus::{HeteroGraph, LinkingMatrix, Relation};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Norm below which a projected vector counts as zero.
pub const NORM_EPS: f64 = 1e-12;

/// `W1`, `W2`: encoder dimension to similarity dimension.
#[derive(Clone, Copy, Debug)]
pub struct SimilarityParams {
    pub w1: ParamId,
    pub w2: ParamId,
}

impl SimilarityParams {
    /// Both maps start at the identity plus small noise (square when the
    /// similarity dimension equals the input dimension).
    pub fn register<T: Scalar, R: rand::Rng>(params: &mut ParamStore<T>, input_dim: usize, sim_dim: usize, rng: &mut R) -> Self {
        let init = |rng: &mut R| {
            let mut t = Tensor::<T>::randn(input_dim, sim_dim, 0.02, rng);
            for i in 0..input_dim.min(sim_dim) {
                t.set(i, i, t.get(i, i) + T::one());
            }
            t
        };
        let w1 = params.add("sim.w1", init(rng));
        let w2 = params.add("sim.w2", init(rng));
        SimilarityParams { w1, w2 }
    }
}

/// `A(i, j) = ReLU(cos(q_i W1, s_j W2))`; pairs involving a projection
/// with norm below [`NORM_EPS`] score 0.
pub fn implicit_similarity<T: Scalar>(tape: &mut Tape<'_, T>, q: Var, s: Var, w1: Var, w2: Var) -> Var {
    let qp = tape.matmul(q, w1);
    let sp = tape.matmul(s, w2);
    let qn = tape.normalize_rows(qp, T::of(NORM_EPS));
    let sn = tape.normalize_rows(sp, T::of(NORM_EPS));
    let cos = tape.matmul_t(qn, sn);
    tape.relu(cos)
}

/// Tensor-level convenience wrapper around [`implicit_similarity`].
pub fn implicit_similarity_values<T: Scalar>(q: &Tensor<T>, s: &Tensor<T>, w1: &Tensor<T>, w2: &Tensor<T>) -> LinkingMatrix<T> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let vars = [q, s, w1, w2].map(|t| tape.constant(t.clone()));
    let a = implicit_similarity(&mut tape, vars[0], vars[1], vars[2], vars[3]);
    tape.value(a).clone()
}

/// 0/1 mask keeping the maximum of each column; ties keep the smallest row
/// and all-zero columns keep nothing.
pub fn sparsify_mask<T: Scalar>(a: &LinkingMatrix<T>) -> Tensor<T> {
    let mut mask = Tensor::zeros(a.rows(), a.cols());
    for j in 0..a.cols() {
        let mut best: Option<(usize, T)> = None;
        for i in 0..a.rows() {
            let v = a.get(i, j);
            if v > T::zero() && best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        if let Some((i, _)) = best {
            mask.set(i, j, T::one());
        }
    }
    mask
}

pub fn sparsify_per_schema<T: Scalar>(a: &LinkingMatrix<T>) -> LinkingMatrix<T> {
    a.zip_map(&sparsify_mask(a), |x, m| x * m)
}

/// Sparsification on the tape; the mask is a constant, so only kept
/// entries pass gradient.
pub fn sparsify_var<T: Scalar>(tape: &mut Tape<'_, T>, a: Var) -> Var {
    let mask = sparsify_mask(tape.value(a));
    let m = tape.constant(mask);
    tape.mul(a, m)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::Config(format!("lambda {lambda} outside [0, 1]")))
    }
}

/// `λ A_init + (1 − λ) A_t`.
pub fn fuse_graphs<T: Scalar>(a_init: &LinkingMatrix<T>, a_t: &LinkingMatrix<T>, lambda: f64) -> Result<LinkingMatrix<T>> {
    check_lambda(lambda)?;
    if a_init.shape() != a_t.shape() {
        return Err(Error::Internal(format!("fusing {:?} with {:?}", a_init.shape(), a_t.shape())));
    }
    let (l, r) = (T::of(lambda), T::of(1.0 - lambda));
    Ok(a_init.zip_map(a_t, |x, y| l * x + r * y))
}

/// Fusion on the tape; `a_init` is a constant.
pub fn fuse_var<T: Scalar>(tape: &mut Tape<'_, T>, a_init: &LinkingMatrix<T>, a_t: Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    if a_init.shape() != tape.shape(a_t) {
        return Err(Error::Internal(format!("fusing {:?} with {:?}", a_init.shape(), tape.shape(a_t))));
    }
    let init = tape.constant(a_init.scale(T::of(lambda)));
    let learned = tape.scale(a_t, T::of(1.0 - lambda));
    Ok(tape.add(init, learned))
}

/// Typed edges `E` and weights `M` over all `|Q| + |S|` nodes.
#[derive(Clone, PartialEq)]
pub struct WeightedGraph<T> {
    pub num_question: usize,
    /// Row-major relation ids.
    pub edge_types: Vec<usize>,
    pub weights: Tensor<T>,
}

impl<T: Scalar> std::fmt::Debug for WeightedGraph<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WeightedGraph").field("num_question", &self.num_question).field("weights", &self.weights).finish()
    }
}

impl<T: Scalar> WeightedGraph<T> {
    pub fn num_nodes(&self) -> usize {
        self.weights.rows()
    }

    pub fn edge(&self, i: usize, j: usize) -> usize {
        self.edge_types[i * self.num_nodes() + j]
    }
}

/// Edge types with the question/schema block set from `Ã > 0`.
pub fn edge_types_for(graph: &HeteroGraph, a_tilde: &LinkingMatrix<impl Scalar>) -> Vec<usize> {
    let mut types = graph.type_ids();
    let (n, q) = (graph.num_nodes(), graph.num_question);
    for i in 0..q {
        for j in 0..graph.num_schema() {
            let r = if a_tilde.get(i, j) > num_traits::Zero::zero() { Relation::Semantic } else { Relation::NoLink };
            types[i * n + q + j] = r.id();
            types[(q + j) * n + i] = r.id();
        }
    }
    types
}

pub fn assemble_weighted_graph<T: Scalar>(graph: &HeteroGraph, a_tilde: &LinkingMatrix<T>) -> WeightedGraph<T> {
    let (n, q) = (graph.num_nodes(), graph.num_question);
    let weights = Tensor::from_fn(n, n, |i, j| match (i < q, j < q) {
        (true, false) => a_tilde.get(i, j - q),
        (false, true) => a_tilde.get(j, i - q),
        _ => T::one(),
    });
    WeightedGraph { num_question: q, edge_types: edge_types_for(graph, a_tilde), weights }
}

/// Weight matrix `M` built on the tape from `Ã` so that gradients reach the
/// learned graph: `[[1, Ã], [Ãᵀ, 1]]`.
pub fn weights_var<T: Scalar>(tape: &mut Tape<'_, T>, graph: &HeteroGraph, a_tilde: Var) -> Var {
    let (q, s) = (graph.num_question, graph.num_schema());
    let qq = tape.constant(Tensor::ones(q, q));
    let ss = tape.constant(Tensor::ones(s, s));
    let at = tape.transpose(a_tilde);
    let top = tape.concat_cols(&[qq, a_tilde]);
    let bottom = tape.concat_cols(&[at, ss]);
    tape.concat_rows(&[top, bottom])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_static_edges, test_fixtures::example};

    #[test]
    fn cosine_edge_cases() {
        let id = Tensor::<f64>::identity(2);
        let q = Tensor::from_rows(&[vec![1.0, 0.0]]);
        let s = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 0.0]]);
        let a = implicit_similarity_values(&q, &s, &id, &id);
        assert_eq!(a.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn sparsify_rules() {
        let a = Tensor::<f64>::from_rows(&[vec![0.2, 0.0, 0.5], vec![0.9, 0.0, 0.5], vec![0.4, 0.0, 0.1]]);
        let s = sparsify_per_schema(&a);
        assert_eq!(s.to_f64_rows(), vec![vec![0.0, 0.0, 0.5], vec![0.9, 0.0, 0.0], vec![0.0, 0.0, 0.0]]);
    }

    #[test]
    fn fusion_boundaries() {
        let a = Tensor::<f64>::from_rows(&[vec![1.0]]);
        let b = Tensor::<f64>::from_rows(&[vec![0.5]]);
        assert!((fuse_graphs(&a, &b, 0.2).unwrap().get(0, 0) - 0.6).abs() < 1e-12);
        assert_eq!(fuse_graphs(&a, &b, 1.0).unwrap(), a);
        assert_eq!(fuse_graphs(&a, &b, 0.0).unwrap(), b);
        assert!(fuse_graphs(&a, &Tensor::zeros(2, 1), 0.5).is_err());
    }

    #[test]
    fn assembled_graph_is_symmetric_in_the_link_block() {
        let (ex, s) = example("how many singers", "SELECT count(*) FROM singer");
        let g = build_static_edges(&ex, &s);
        let mut a = Tensor::<f64>::zeros(3, s.num_items());
        a.set(2, 1, 0.6);
        let w = assemble_weighted_graph(&g, &a);
        assert_eq!(w.edge(2, 3 + 1), Relation::Semantic.id());
        assert_eq!(w.edge(3 + 1, 2), Relation::Semantic.id());
        assert_eq!(w.weights.get(2, 4), 0.6);
        assert_eq!(w.weights.get(4, 2), 0.6);
        assert_eq!(w.edge_types.iter().filter(|&&t| t == Relation::Semantic.id()).count(), 2);

        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let av = tape.constant(a.clone());
        let m = weights_var(&mut tape, &g, av);
        assert_eq!(tape.value(m), &w.weights);
    }
}
