//! Full parser: context encoder, learned linking graph, graph encoder and
//! grammar decoder over one parameter store.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::corpus::{build_static_edges, DatabaseSchema, Example, HeteroGraph, LinkingMatrix};
use crate::decoder::{ast_to_actions, Action, Decoded, Decoder, DecoderParams};
use crate::encoder::{encode_graph, RgatParams};
use crate::error::{Error, Result};
use crate::graph_learner::{edge_types_for, fuse_var, implicit_similarity, sparsify_var, weights_var, SimilarityParams};
use crate::params::{seeded_rng, Gradients, ParamId, ParamStore};
use crate::probing::{encode_joint, ContextConfig, ContextEncoder, EncoderInput, JointEncoding, CONTEXT_PREFIX};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Where the question/schema block `Ã` comes from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LinkMode {
    /// `λ A_init + (1 − λ) sparsify(A_t)`.
    Fused { lambda: f64 },
    /// The example's precomputed matrix (exact-match baseline or oracle).
    Fixed,
    /// All zero: every question/schema edge is `NoLink`.
    Unlinked,
}

/// Per-example inputs that do not change during training.
#[derive(Clone)]
pub struct PreparedExample<T> {
    pub example: Example,
    pub graph: HeteroGraph,
    pub a_init: LinkingMatrix<T>,
    pub fixed_link: Option<LinkingMatrix<T>>,
    /// Encoder output, cached when the encoder is frozen.
    pub encoding: Option<JointEncoding<T>>,
    pub actions: Vec<Action>,
    /// Oracle overlay `(keep, values)`: `Ã` becomes `Ã ⊙ keep + values`.
    pub oracle: Option<(LinkingMatrix<T>, LinkingMatrix<T>)>,
    /// Gold mentions entering the graph regularizer (wildcard removed).
    pub reg_mentions: Vec<usize>,
}

impl<T: Scalar> PreparedExample<T> {
    pub fn new(example: &Example, schema: &DatabaseSchema, a_init: LinkingMatrix<T>) -> Result<Self> {
        let expected = (example.question_tokens.len(), schema.num_items());
        if a_init.shape() != expected {
            return Err(Error::Internal(format!(
                "initial graph for {} is {:?}, expected {expected:?}",
                example.id,
                a_init.shape()
            )));
        }
        Ok(PreparedExample {
            example: example.clone(),
            graph: build_static_edges(example, schema),
            a_init,
            fixed_link: None,
            encoding: None,
            actions: ast_to_actions(&example.gold_ast)?,
            oracle: None,
            reg_mentions: example.gold_mentions.iter().copied().filter(|&j| !schema.is_wildcard_item(j)).collect(),
        })
    }
}

/// Tape handles of one forward pass.
pub struct Forward {
    /// Sparsified implicit graph.
    pub a_t: Var,
    pub a_tilde: Var,
    pub q_out: Var,
    pub s_out: Var,
}

#[derive(Clone, Debug)]
pub struct ExampleLoss {
    pub l_sql: f64,
    pub l_g: f64,
    pub total: f64,
}

pub struct Prediction<T> {
    /// `None` when decoding hit the step cap.
    pub decoded: Option<Decoded>,
    pub a_tilde: LinkingMatrix<T>,
}

pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub context: ContextEncoder,
    pub sim: SimilarityParams,
    /// Encoder-to-graph projection, absent when the widths agree.
    pub proj: Option<ParamId>,
    pub rgat: RgatParams,
    pub dec: DecoderParams,
}

impl<T: Scalar> Model<T> {
    pub fn new(encoder: ContextConfig, config: ModelConfig, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let context = ContextEncoder::register(&mut params, encoder);
        let mut rng = seeded_rng(seed);
        let enc_dim = context.config.dim;
        let sim = SimilarityParams::register(&mut params, enc_dim, config.sim_dim, &mut rng);
        let proj = (enc_dim != config.dim).then(|| params.add("proj.w", Tensor::xavier(enc_dim, config.dim, &mut rng)));
        let rgat = RgatParams::register(&mut params, config.dim, config.heads, config.layers, config.ffn_dim, &mut rng);
        let dec = DecoderParams::register(
            &mut params,
            config.dim,
            config.dec_hidden,
            config.action_dim,
            config.type_dim,
            &mut rng,
        );
        Model { config, params, context, sim, proj, rgat, dec }
    }

    pub fn freeze_encoder(&mut self, frozen: bool) {
        self.params.set_trainable_prefix(CONTEXT_PREFIX, !frozen);
    }

    pub fn encoder_frozen(&self) -> bool {
        self.params.ids().filter(|&id| self.params.name(id).starts_with(CONTEXT_PREFIX)).all(|id| !self.params.is_trainable(id))
    }

    /// Unmasked encoder output for caching under a frozen encoder.
    pub fn encode(&self, example: &Example, schema: &DatabaseSchema) -> Result<JointEncoding<T>> {
        encode_joint(&self.context, &self.params, example, schema, None)
    }

    fn encoder_vars(&self, tape: &mut Tape<'_, T>, prep: &PreparedExample<T>, schema: &DatabaseSchema) -> Result<(Var, Var)> {
        let q = prep.example.question_tokens.len();
        match &prep.encoding {
            Some(enc) => Ok((tape.constant(enc.question.clone()), tape.constant(enc.schema.clone()))),
            None => {
                let input = EncoderInput::build(&prep.example, schema, None)?;
                let x = self.context.forward(tape, &input, &prep.example.id)?;
                let n = tape.shape(x).0;
                Ok((tape.slice_rows(x, 0, q), tape.slice_rows(x, q, n - q)))
            }
        }
    }

    /// Encoder pass and linking graph only, returning `(A_t, Ã)` handles.
    pub fn link(&self, tape: &mut Tape<'_, T>, prep: &PreparedExample<T>, schema: &DatabaseSchema, mode: LinkMode) -> Result<(Var, Var, Var, Var)> {
        let (q, s) = self.encoder_vars(tape, prep, schema)?;
        let (w1, w2) = (tape.param(self.sim.w1), tape.param(self.sim.w2));
        let raw = implicit_similarity(tape, q, s, w1, w2);
        let a_t = sparsify_var(tape, raw);
        let a_tilde = match mode {
            LinkMode::Fused { lambda } => fuse_var(tape, &prep.a_init, a_t, lambda)?,
            LinkMode::Fixed => {
                let fixed = prep
                    .fixed_link
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("no fixed linking matrix for {}", prep.example.id)))?;
                tape.constant(fixed.clone())
            }
            LinkMode::Unlinked => {
                let (r, c) = prep.a_init.shape();
                tape.constant(Tensor::zeros(r, c))
            }
        };
        let a_tilde = match &prep.oracle {
            Some((keep, values)) => {
                let (k, v) = (tape.constant(keep.clone()), tape.constant(values.clone()));
                let kept = tape.mul(a_tilde, k);
                tape.add(kept, v)
            }
            None => a_tilde,
        };
        Ok((q, s, a_t, a_tilde))
    }

    pub fn forward(&self, tape: &mut Tape<'_, T>, prep: &PreparedExample<T>, schema: &DatabaseSchema, mode: LinkMode) -> Result<Forward> {
        let (q, s, a_t, a_tilde) = self.link(tape, prep, schema, mode)?;
        let types = edge_types_for(&prep.graph, tape.value(a_tilde));
        let m = weights_var(tape, &prep.graph, a_tilde);
        let mut x0 = tape.concat_rows(&[q, s]);
        if let Some(p) = self.proj {
            let w = tape.param(p);
            x0 = tape.matmul(x0, w);
        }
        let (q_out, s_out) = encode_graph(tape, x0, prep.graph.num_question, &types, m, &self.rgat)?;
        Ok(Forward { a_t, a_tilde, q_out, s_out })
    }

    /// Teacher-forced `L_SQL + μ L_g`, its gradients and the `Ã` used.
    pub fn example_gradients<R: Rng>(
        &self,
        prep: &PreparedExample<T>,
        schema: &DatabaseSchema,
        mode: LinkMode,
        mu: f64,
        rng: &mut R,
    ) -> Result<(ExampleLoss, Gradients<T>, LinkingMatrix<T>)> {
        let mut tape = Tape::new(&self.params);
        let f = self.forward(&mut tape, prep, schema, mode)?;
        let mut dec = Decoder::new(&self.dec);
        dec.dropout = self.config.dropout;
        let ctx = dec.context(&mut tape, f.q_out, f.s_out, schema.num_tables());
        let (l_sql, _) = dec.teacher_force(&mut tape, &ctx, &prep.actions, rng)?;
        let l_g = crate::training::graph_regularization_var(&mut tape, f.a_t, &prep.reg_mentions);
        let total = crate::training::total_loss_var(&mut tape, l_sql, l_g, mu);
        let loss = ExampleLoss {
            l_sql: tape.scalar(l_sql).as_f64(),
            l_g: tape.scalar(l_g).as_f64(),
            total: tape.scalar(total).as_f64(),
        };
        if !loss.total.is_finite() {
            return Err(Error::Numerical(format!("loss for {} is {}", prep.example.id, loss.total)));
        }
        Ok((loss, tape.backward(total), tape.value(f.a_tilde).clone()))
    }

    pub fn predict(&self, prep: &PreparedExample<T>, schema: &DatabaseSchema, mode: LinkMode, beam: usize) -> Result<Prediction<T>> {
        let mut tape = Tape::new(&self.params);
        let f = self.forward(&mut tape, prep, schema, mode)?;
        let dec = Decoder::new(&self.dec);
        let ctx = dec.context(&mut tape, f.q_out, f.s_out, schema.num_tables());
        let decoded = match dec.decode(&mut tape, &ctx, beam) {
            Ok(d) => Some(d),
            Err(Error::Truncated(n)) => {
                log::warn!("decoding {} stopped after {n} actions", prep.example.id);
                None
            }
            Err(e) => return Err(e),
        };
        Ok(Prediction { decoded, a_tilde: tape.value(f.a_tilde).clone() })
    }

    /// `(A_t, Ã)` values without running the graph encoder.
    pub fn linking_matrices(
        &self,
        prep: &PreparedExample<T>,
        schema: &DatabaseSchema,
        mode: LinkMode,
    ) -> Result<(LinkingMatrix<T>, LinkingMatrix<T>)> {
        let mut tape = Tape::new(&self.params);
        let (_, _, a_t, a_tilde) = self.link(&mut tape, prep, schema, mode)?;
        Ok((tape.value(a_t).clone(), tape.value(a_tilde).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::test_fixtures::example;

    fn small() -> ModelConfig {
        ModelConfig { dim: 16, heads: 2, layers: 1, ffn_dim: 16, sim_dim: 16, dec_hidden: 16, action_dim: 8, type_dim: 8, dropout: 0.0 }
    }

    fn encoder() -> ContextConfig {
        ContextConfig { dim: 16, layers: 1, heads: 2, ffn_dim: 16, ..ContextConfig::default() }
    }

    #[test]
    fn cached_and_live_encodings_agree() {
        let model = Model::<f64>::new(encoder(), small(), 1);
        let (ex, s) = example("how many singers are there", "SELECT count(*) FROM singer");
        let a_init = Tensor::zeros(ex.question_tokens.len(), s.num_items());
        let live = PreparedExample::new(&ex, &s, a_init).unwrap();
        let mut cached = live.clone();
        cached.encoding = Some(model.encode(&ex, &s).unwrap());
        let mode = LinkMode::Fused { lambda: 0.2 };
        let mut rng = seeded_rng(0);
        let (a, _, _) = model.example_gradients(&live, &s, mode, 1.0, &mut rng).unwrap();
        let (b, _, _) = model.example_gradients(&cached, &s, mode, 1.0, &mut rng).unwrap();
        assert!((a.total - b.total).abs() < 1e-9);
        assert!((a.total - a.l_sql - a.l_g).abs() < 1e-9);
    }

    #[test]
    fn projection_only_when_widths_differ() {
        let m = Model::<f32>::new(encoder(), small(), 1);
        assert!(m.proj.is_none());
        let m = Model::<f32>::new(encoder(), ModelConfig { dim: 8, ..small() }, 1);
        assert!(m.proj.is_some());
    }

    #[test]
    fn unlinked_mode_zeroes_the_block() {
        let model = Model::<f64>::new(encoder(), small(), 1);
        let (ex, s) = example("list singer names", "SELECT name FROM singer");
        let a_init = Tensor::full(ex.question_tokens.len(), s.num_items(), 1.0);
        let prep = PreparedExample::new(&ex, &s, a_init).unwrap();
        let (_, a) = model.linking_matrices(&prep, &s, LinkMode::Unlinked).unwrap();
        assert_eq!(a.max_abs(), 0.0);
        let (_, a) = model.linking_matrices(&prep, &s, LinkMode::Fused { lambda: 1.0 }).unwrap();
        assert!(a.data().iter().all(|&v| v == 1.0));
        assert!(model.linking_matrices(&prep, &s, LinkMode::Fixed).is_err());
    }
}
