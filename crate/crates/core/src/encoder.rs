//! Relation-aware graph attention over the weighted heterogeneous graph.
//!
//! For query node `i` and key node `j` with relation `r = E[j][i]` and
//! weight `m = M[j][i]`, head `h` scores
//! `q_i · (k_j + m F_h(r)) / sqrt(d / H)` and aggregates
//! `Σ_j α_ij (v_j + m F_h(r))`. The layer output is
//! `FFN(LayerNorm(x + x̂ W_o))`.

use crate::autodiff::{Tape, Var};
use crate::corpus::Relation;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct RgatLayerParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct RgatParams {
    pub dim: usize,
    pub heads: usize,
    pub layers: Vec<RgatLayerParams>,
    /// `|relations| x dim`, shared by all layers.
    pub relations: ParamId,
}

impl RgatParams {
    pub fn register<T: Scalar, R: rand::Rng>(
        params: &mut ParamStore<T>,
        dim: usize,
        heads: usize,
        layers: usize,
        ffn_dim: usize,
        rng: &mut R,
    ) -> Self {
        assert_eq!(dim % heads, 0, "dim must be divisible by the head count");
        let layers = (0..layers)
            .map(|l| {
                let p = format!("rgat.l{l}");
                RgatLayerParams {
                    wq: params.add(format!("{p}.wq"), Tensor::xavier(dim, dim, rng)),
                    wk: params.add(format!("{p}.wk"), Tensor::xavier(dim, dim, rng)),
                    wv: params.add(format!("{p}.wv"), Tensor::xavier(dim, dim, rng)),
                    wo: params.add(format!("{p}.wo"), Tensor::xavier(dim, dim, rng)),
                    ln_gain: params.add(format!("{p}.ln.gain"), Tensor::ones(1, dim)),
                    ln_bias: params.add(format!("{p}.ln.bias"), Tensor::zeros(1, dim)),
                    w1: params.add(format!("{p}.ffn.w1"), Tensor::xavier(dim, ffn_dim, rng)),
                    b1: params.add(format!("{p}.ffn.b1"), Tensor::zeros(1, ffn_dim)),
                    w2: params.add(format!("{p}.ffn.w2"), Tensor::xavier(ffn_dim, dim, rng)),
                    b2: params.add(format!("{p}.ffn.b2"), Tensor::zeros(1, dim)),
                }
            })
            .collect();
        let relations = params.add("rgat.relations", Tensor::randn(Relation::COUNT, dim, 0.1, rng));
        RgatParams { dim, heads, layers, relations }
    }
}

/// Output of one layer plus the per-head attention matrices (`α[i][j]`,
/// rows summing to one).
pub struct LayerOutput {
    pub x: Var,
    pub attention: Vec<Var>,
}

fn transpose_types(types: &[usize], n: usize) -> Vec<usize> {
    (0..n * n).map(|k| types[(k % n) * n + k / n]).collect()
}

/// One relational attention layer. `types` holds `E` row-major over `n`
/// nodes; `m` is the `n x n` weight matrix `M`.
pub fn rgat_layer<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: Var,
    types: &[usize],
    m: Var,
    layer: &RgatLayerParams,
    relations: Var,
    heads: usize,
    layer_index: usize,
) -> Result<LayerOutput> {
    let (n, d) = tape.shape(x);
    let dh = d / heads;
    let types_t = transpose_types(types, n);
    let m_t = tape.transpose(m);
    let (wq, wk, wv, wo) = (tape.param(layer.wq), tape.param(layer.wk), tape.param(layer.wv), tape.param(layer.wo));
    let q = tape.matmul(x, wq);
    let k = tape.matmul(x, wk);
    let v = tape.matmul(x, wv);
    let temp = T::of(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    let mut attention = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let fh = tape.slice_cols(relations, h * dh, dh);
        let content = tape.matmul_t(qh, kh);
        let qf = tape.matmul_t(qh, fh);
        let rel = tape.gather_by_type(qf, types_t.clone());
        let rel = tape.mul(rel, m_t);
        let scores = tape.add(content, rel);
        let scores = tape.scale(scores, temp);
        if !tape.value(scores).all_finite() {
            return Err(Error::Numerical(format!("attention scores in layer {layer_index}, head {h}")));
        }
        let alpha = tape.softmax_rows(scores);
        let weighted = tape.mul(alpha, m_t);
        let per_type = tape.scatter_by_type(weighted, types_t.clone(), Relation::COUNT);
        let rel_out = tape.matmul(per_type, fh);
        let val_out = tape.matmul(alpha, vh);
        outs.push(tape.add(val_out, rel_out));
        attention.push(alpha);
    }
    let cat = tape.concat_cols(&outs);
    let proj = tape.matmul(cat, wo);
    let res = tape.add(x, proj);
    let (g, b) = (tape.param(layer.ln_gain), tape.param(layer.ln_bias));
    let normed = tape.layer_norm(res, g, b, T::of(1e-5));
    let (w1, b1, w2, b2) = (tape.param(layer.w1), tape.param(layer.b1), tape.param(layer.w2), tape.param(layer.b2));
    let hdn = tape.matmul(normed, w1);
    let hdn = tape.add_row(hdn, b1);
    let hdn = tape.relu(hdn);
    let out = tape.matmul(hdn, w2);
    let out = tape.add_row(out, b2);
    Ok(LayerOutput { x: out, attention })
}

/// Applies every layer and splits rows into question and schema outputs.
pub fn encode_graph<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x0: Var,
    num_question: usize,
    types: &[usize],
    m: Var,
    params: &RgatParams,
) -> Result<(Var, Var)> {
    let relations = tape.param(params.relations);
    let mut x = x0;
    for (l, layer) in params.layers.iter().enumerate() {
        x = rgat_layer(tape, x, types, m, layer, relations, params.heads, l)?.x;
    }
    let n = tape.shape(x).0;
    let q = tape.slice_rows(x, 0, num_question);
    let s = tape.slice_rows(x, num_question, n - num_question);
    Ok((q, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::seeded_rng;

    fn setup(n: usize, layers: usize) -> (ParamStore<f64>, RgatParams, Tensor<f64>, Vec<usize>, Tensor<f64>) {
        let mut rng = seeded_rng(3);
        let mut store = ParamStore::new();
        let p = RgatParams::register(&mut store, 8, 2, layers, 16, &mut rng);
        let x = Tensor::randn(n, 8, 1.0, &mut rng);
        let types = (0..n * n).map(|k| (k * 7 + 3) % Relation::COUNT).collect();
        let m = Tensor::from_fn(n, n, |i, j| 0.25 + 0.1 * ((i + 2 * j) % 5) as f64);
        (store, p, x, types, m)
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (store, p, x, types, m) = setup(5, 1);
        let mut tape = Tape::new(&store);
        let (xv, mv) = (tape.constant(x), tape.constant(m));
        let rel = tape.param(p.relations);
        let out = rgat_layer(&mut tape, xv, &types, mv, &p.layers[0], rel, p.heads, 0).unwrap();
        for a in out.attention {
            for r in 0..5 {
                let s: f64 = tape.value(a).row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_layers_is_identity_split() {
        let (store, mut p, x, types, m) = setup(4, 0);
        p.layers.clear();
        let mut tape = Tape::new(&store);
        let (xv, mv) = (tape.constant(x.clone()), tape.constant(m));
        let (q, s) = encode_graph(&mut tape, xv, 1, &types, mv, &p).unwrap();
        assert_eq!(tape.value(q), &x.slice_rows(0, 1));
        assert_eq!(tape.value(s), &x.slice_rows(1, 3));
    }

    #[test]
    fn permutation_equivariance() {
        let n = 4;
        let (store, p, x, types, m) = setup(n, 1);
        let perm = [2, 0, 3, 1];
        let px = Tensor::from_fn(n, 8, |i, c| x.get(perm[i], c));
        let pm = Tensor::from_fn(n, n, |i, j| m.get(perm[i], perm[j]));
        let ptypes: Vec<usize> = (0..n * n).map(|k| types[perm[k / n] * n + perm[k % n]]).collect();
        let run = |x: Tensor<f64>, types: &[usize], m: Tensor<f64>| {
            let mut tape = Tape::new(&store);
            let (xv, mv) = (tape.constant(x), tape.constant(m));
            let rel = tape.param(p.relations);
            let out = rgat_layer(&mut tape, xv, types, mv, &p.layers[0], rel, p.heads, 0).unwrap();
            tape.value(out.x).clone()
        };
        let base = run(x, &types, m);
        let permuted = run(px, &ptypes, pm);
        for i in 0..n {
            for c in 0..8 {
                assert!((permuted.get(i, c) - base.get(perm[i], c)).abs() < 1e-10);
            }
        }
    }
}
