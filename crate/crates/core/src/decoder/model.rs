//! LSTM decoder over grammar actions with attention over encoder outputs.
//!
//! Step `i` feeds `[a_{i-1}; a_p; h_p; t_i; h̃_{i-1}]` to the LSTM, attends
//! over every encoder output to form `h̃_i = tanh([h_i; ctx_i] W)`, then
//! scores rules with `h̃_i W_R` and schema items with bilinear pointers
//! `(h̃_i W_q)(x_j W_k)ᵀ`.

use rand::Rng;

use super::grammar::{actions_to_ast, Action, Frontier, NonTerminal, SqlGrammar, Symbol};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::sql::SqlAst;
use crate::tensor::Tensor;

/// Decoding halts with [`Error::Truncated`] after this many actions.
pub const STEP_CAP: usize = 200;

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub hidden: usize,
    pub action_dim: usize,
    pub type_dim: usize,
    pub enc_dim: usize,
    rule_emb: ParamId,
    schema_action: ParamId,
    type_emb: ParamId,
    start_action: ParamId,
    root_action: ParamId,
    root_hidden: ParamId,
    lstm_wx: ParamId,
    lstm_wh: ParamId,
    lstm_b: ParamId,
    h0_w: ParamId,
    h0_b: ParamId,
    att_w: ParamId,
    comb_w: ParamId,
    rule_w: ParamId,
    rule_b: ParamId,
    tab_q: ParamId,
    tab_k: ParamId,
    col_q: ParamId,
    col_k: ParamId,
}

impl DecoderParams {
    pub fn register<T: Scalar, R: Rng>(
        params: &mut ParamStore<T>,
        enc_dim: usize,
        hidden: usize,
        action_dim: usize,
        type_dim: usize,
        rng: &mut R,
    ) -> Self {
        let rules = SqlGrammar::get().num_rules();
        let input = 2 * action_dim + 2 * hidden + type_dim;
        let mut lstm_b = Tensor::zeros(1, 4 * hidden);
        for k in hidden..2 * hidden {
            lstm_b.set(0, k, T::one());
        }
        let mut add = |name: &str, t: Tensor<T>| params.add(format!("dec.{name}"), t);
        DecoderParams {
            hidden,
            action_dim,
            type_dim,
            enc_dim,
            rule_emb: add("rule_emb", Tensor::randn(rules, action_dim, 0.1, rng)),
            schema_action: add("schema_action", Tensor::xavier(enc_dim, action_dim, rng)),
            type_emb: add("type_emb", Tensor::randn(Symbol::COUNT, type_dim, 0.1, rng)),
            start_action: add("start_action", Tensor::randn(1, action_dim, 0.1, rng)),
            root_action: add("root_action", Tensor::randn(1, action_dim, 0.1, rng)),
            root_hidden: add("root_hidden", Tensor::randn(1, hidden, 0.1, rng)),
            lstm_wx: add("lstm.wx", Tensor::xavier(input, 4 * hidden, rng)),
            lstm_wh: add("lstm.wh", Tensor::xavier(hidden, 4 * hidden, rng)),
            lstm_b: add("lstm.b", lstm_b),
            h0_w: add("h0.w", Tensor::xavier(enc_dim, hidden, rng)),
            h0_b: add("h0.b", Tensor::zeros(1, hidden)),
            att_w: add("att.w", Tensor::xavier(hidden, enc_dim, rng)),
            comb_w: add("comb.w", Tensor::xavier(hidden + enc_dim, hidden, rng)),
            rule_w: add("rule.w", Tensor::xavier(hidden, rules, rng)),
            rule_b: add("rule.b", Tensor::zeros(1, rules)),
            tab_q: add("tab.q", Tensor::xavier(hidden, enc_dim, rng)),
            tab_k: add("tab.k", Tensor::xavier(enc_dim, enc_dim, rng)),
            col_q: add("col.q", Tensor::xavier(hidden, enc_dim, rng)),
            col_k: add("col.k", Tensor::xavier(enc_dim, enc_dim, rng)),
        }
    }
}

/// Per-example decoder inputs recorded once on the tape.
pub struct DecoderContext {
    memory: Var,
    tables: Var,
    columns: Var,
    table_keys: Var,
    column_keys: Var,
    pub num_tables: usize,
    pub num_columns: usize,
}

/// Recurrent state of one hypothesis.
#[derive(Clone)]
pub struct DecoderState {
    h: Var,
    c: Var,
    h_tilde: Var,
    prev_action: Var,
    pub frontier: Frontier,
    /// `(action embedding, hidden state)` of every step so far.
    history: Vec<(Var, Var)>,
    pub actions: Vec<Action>,
    pub log_prob: f64,
}

/// Log-probabilities over the actions of the current frontier symbol.
pub struct StepOutput {
    pub symbol: Symbol,
    /// `1 x k` log-probabilities; illegal entries are `-inf`.
    pub log_probs: Var,
    h: Var,
    c: Var,
    h_tilde: Var,
}

impl StepOutput {
    pub fn action_at(&self, k: usize) -> Action {
        match self.symbol {
            Symbol::Nt(_) => Action::ApplyRule(k),
            Symbol::Table => Action::SelectTable(k),
            Symbol::Column => Action::SelectColumn(k),
        }
    }

    pub fn index_of(action: Action) -> usize {
        match action {
            Action::ApplyRule(k) | Action::SelectTable(k) | Action::SelectColumn(k) => k,
        }
    }
}

pub struct Decoder<'a> {
    pub params: &'a DecoderParams,
    /// Dropout on `h̃` during training.
    pub dropout: f64,
}

impl<'a> Decoder<'a> {
    pub fn new(params: &'a DecoderParams) -> Self {
        Decoder { params, dropout: 0.0 }
    }

    /// `q_out` holds question rows, `s_out` tables then columns.
    pub fn context<T: Scalar>(&self, tape: &mut Tape<'_, T>, q_out: Var, s_out: Var, num_tables: usize) -> DecoderContext {
        let p = self.params;
        let num_columns = tape.shape(s_out).0 - num_tables;
        let memory = tape.concat_rows(&[q_out, s_out]);
        let tables = tape.slice_rows(s_out, 0, num_tables);
        let columns = tape.slice_rows(s_out, num_tables, num_columns);
        let (tk, ck) = (tape.param(p.tab_k), tape.param(p.col_k));
        let table_keys = tape.matmul(tables, tk);
        let column_keys = tape.matmul(columns, ck);
        DecoderContext { memory, tables, columns, table_keys, column_keys, num_tables, num_columns }
    }

    pub fn initial_state<T: Scalar>(&self, tape: &mut Tape<'_, T>, ctx: &DecoderContext) -> DecoderState {
        let p = self.params;
        let mean = tape.mean_rows(ctx.memory);
        let w = tape.param(p.h0_w);
        let b = tape.param(p.h0_b);
        let h = tape.matmul(mean, w);
        let h = tape.add(h, b);
        let h = tape.tanh(h);
        let c = tape.constant(Tensor::zeros(1, p.hidden));
        let h_tilde = tape.constant(Tensor::zeros(1, p.hidden));
        let prev_action = tape.param(p.start_action);
        DecoderState {
            h,
            c,
            h_tilde,
            prev_action,
            frontier: Frontier::default(),
            history: Vec::new(),
            actions: Vec::new(),
            log_prob: 0.0,
        }
    }

    /// One recurrent update and the distribution over legal actions.
    pub fn step<T: Scalar, R: Rng>(
        &self,
        tape: &mut Tape<'_, T>,
        ctx: &DecoderContext,
        state: &DecoderState,
        rng: &mut R,
    ) -> Result<StepOutput> {
        let p = self.params;
        let (symbol, parent) =
            state.frontier.peek().ok_or_else(|| Error::Internal("decode step on a finished tree".into()))?;
        let (parent_action, parent_h) = match parent {
            Some(k) => state.history[k],
            None => (tape.param(p.root_action), tape.param(p.root_hidden)),
        };
        let types = tape.param(p.type_emb);
        let t = tape.gather_rows(types, vec![symbol.id()]);
        let input = tape.concat_cols(&[state.prev_action, parent_action, parent_h, t, state.h_tilde]);
        let (h, c) = self.lstm(tape, input, state.h, state.c);

        let aw = tape.param(p.att_w);
        let query = tape.matmul(h, aw);
        let scores = tape.matmul_t(query, ctx.memory);
        let attn = tape.softmax_rows(scores);
        let ctx_vec = tape.matmul(attn, ctx.memory);
        let joined = tape.concat_cols(&[h, ctx_vec]);
        let cw = tape.param(p.comb_w);
        let h_tilde = tape.matmul(joined, cw);
        let h_tilde = tape.tanh(h_tilde);
        let feat = tape.dropout(h_tilde, self.dropout, rng);

        let log_probs = match symbol {
            Symbol::Nt(nt) => {
                let (w, b) = (tape.param(p.rule_w), tape.param(p.rule_b));
                let logits = tape.matmul(feat, w);
                let logits = tape.add(logits, b);
                tape.masked_log_softmax(logits, rule_mask(nt))
            }
            Symbol::Table => self.pointer(tape, feat, p.tab_q, ctx.table_keys, ctx.num_tables),
            Symbol::Column => self.pointer(tape, feat, p.col_q, ctx.column_keys, ctx.num_columns),
        };
        if !tape.value(log_probs).data().iter().any(|v| v.is_finite()) {
            return Err(Error::Internal(format!("no legal action for {symbol:?}")));
        }
        Ok(StepOutput { symbol, log_probs, h, c, h_tilde })
    }

    fn pointer<T: Scalar>(&self, tape: &mut Tape<'_, T>, feat: Var, wq: ParamId, keys: Var, n: usize) -> Var {
        let wq = tape.param(wq);
        let q = tape.matmul(feat, wq);
        let logits = tape.matmul_t(q, keys);
        tape.masked_log_softmax(logits, vec![true; n])
    }

    fn lstm<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, h: Var, c: Var) -> (Var, Var) {
        let p = self.params;
        let n = p.hidden;
        let (wx, wh, b) = (tape.param(p.lstm_wx), tape.param(p.lstm_wh), tape.param(p.lstm_b));
        let gx = tape.matmul(x, wx);
        let gh = tape.matmul(h, wh);
        let g = tape.add(gx, gh);
        let g = tape.add(g, b);
        let i = tape.slice_cols(g, 0, n);
        let f = tape.slice_cols(g, n, n);
        let u = tape.slice_cols(g, 2 * n, n);
        let o = tape.slice_cols(g, 3 * n, n);
        let (i, f, o) = (tape.sigmoid(i), tape.sigmoid(f), tape.sigmoid(o));
        let u = tape.tanh(u);
        let keep = tape.mul(f, c);
        let write = tape.mul(i, u);
        let c = tape.add(keep, write);
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc);
        (h, c)
    }

    /// Embedding of a taken action: rule embedding, or a projection of the
    /// selected schema item's encoder output.
    fn action_embedding<T: Scalar>(&self, tape: &mut Tape<'_, T>, ctx: &DecoderContext, action: Action) -> Var {
        let p = self.params;
        match action {
            Action::ApplyRule(r) => {
                let emb = tape.param(p.rule_emb);
                tape.gather_rows(emb, vec![r])
            }
            Action::SelectTable(t) => {
                let row = tape.gather_rows(ctx.tables, vec![t]);
                let w = tape.param(p.schema_action);
                tape.matmul(row, w)
            }
            Action::SelectColumn(c) => {
                let row = tape.gather_rows(ctx.columns, vec![c]);
                let w = tape.param(p.schema_action);
                tape.matmul(row, w)
            }
        }
    }

    /// Advances `state` by `action` using the step output that scored it.
    pub fn advance<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        ctx: &DecoderContext,
        state: &DecoderState,
        out: &StepOutput,
        action: Action,
    ) -> Result<DecoderState> {
        let k = StepOutput::index_of(action);
        let lp = tape.value(out.log_probs).data().get(k).copied().unwrap_or(T::neg_infinity()).as_f64();
        if !lp.is_finite() {
            return Err(Error::grammar(format!("action {action:?} has zero probability"), 0..0));
        }
        let mut next = state.clone();
        let step = state.actions.len();
        next.frontier.apply(action, step)?;
        let emb = self.action_embedding(tape, ctx, action);
        next.history.push((emb, out.h));
        next.prev_action = emb;
        next.h = out.h;
        next.c = out.c;
        next.h_tilde = out.h_tilde;
        next.actions.push(action);
        next.log_prob += lp;
        Ok(next)
    }

    /// Teacher-forced negative log-likelihood of `actions` and the per-step
    /// log-probabilities.
    pub fn teacher_force<T: Scalar, R: Rng>(
        &self,
        tape: &mut Tape<'_, T>,
        ctx: &DecoderContext,
        actions: &[Action],
        rng: &mut R,
    ) -> Result<(Var, Vec<f64>)> {
        let mut state = self.initial_state(tape, ctx);
        let mut terms = Vec::with_capacity(actions.len());
        let mut step_lps = Vec::with_capacity(actions.len());
        for &a in actions {
            let out = self.step(tape, ctx, &state, rng)?;
            let lp = tape.pick(out.log_probs, 0, StepOutput::index_of(a));
            step_lps.push(tape.scalar(lp).as_f64());
            terms.push(lp);
            state = self.advance(tape, ctx, &state, &out, a)?;
        }
        if !state.frontier.is_done() {
            return Err(Error::grammar("gold action sequence leaves an incomplete tree", 0..actions.len()));
        }
        let all = tape.concat_cols(&terms);
        let total = tape.sum_all(all);
        Ok((tape.scale(total, -T::one()), step_lps))
    }

    /// Beam search; the greedy rollout is always a candidate so the returned
    /// score is never below the width-1 result.
    pub fn decode<T: Scalar>(&self, tape: &mut Tape<'_, T>, ctx: &DecoderContext, beam: usize) -> Result<Decoded> {
        let greedy = self.search(tape, ctx, 1);
        if beam <= 1 {
            return greedy;
        }
        match (greedy, self.search(tape, ctx, beam)) {
            (Ok(g), Ok(b)) => Ok(if b.log_prob >= g.log_prob { b } else { g }),
            (Ok(g), Err(_)) => Ok(g),
            (Err(_), Ok(b)) => Ok(b),
            (Err(e), Err(_)) => Err(e),
        }
    }

    fn search<T: Scalar>(&self, tape: &mut Tape<'_, T>, ctx: &DecoderContext, beam: usize) -> Result<Decoded> {
        let mut rng = crate::params::seeded_rng(0);
        let mut live = vec![self.initial_state(tape, ctx)];
        let mut done: Vec<DecoderState> = Vec::new();
        for _ in 0..STEP_CAP {
            if live.is_empty() || done.len() >= beam {
                break;
            }
            let mut candidates: Vec<(f64, usize, Action)> = Vec::new();
            let mut outs = Vec::with_capacity(live.len());
            for (h, state) in live.iter().enumerate() {
                let out = self.step(tape, ctx, state, &mut rng)?;
                for (k, &lp) in tape.value(out.log_probs).data().iter().enumerate() {
                    let lp = lp.as_f64();
                    if lp.is_finite() {
                        candidates.push((state.log_prob + lp, h, out.action_at(k)));
                    }
                }
                outs.push(out);
            }
            candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
            let mut next = Vec::new();
            for &(_, h, action) in candidates.iter().take(beam - done.len()) {
                let s = self.advance(tape, ctx, &live[h], &outs[h], action)?;
                if s.frontier.is_done() {
                    done.push(s);
                } else {
                    next.push(s);
                }
            }
            live = next;
        }
        let best = done.into_iter().max_by(|a, b| a.log_prob.total_cmp(&b.log_prob)).ok_or(Error::Truncated(STEP_CAP))?;
        Ok(Decoded { ast: actions_to_ast(&best.actions)?, log_prob: best.log_prob, actions: best.actions })
    }
}

fn rule_mask(nt: NonTerminal) -> Vec<bool> {
    let g = SqlGrammar::get();
    let mut mask = vec![false; g.num_rules()];
    for &r in g.rules_for(nt) {
        mask[r] = true;
    }
    mask
}

#[derive(Clone, Debug)]
pub struct Decoded {
    pub ast: SqlAst,
    pub actions: Vec<Action>,
    pub log_prob: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::grammar::Production;
    use crate::params::seeded_rng;

    fn setup() -> (ParamStore<f64>, DecoderParams, Tensor<f64>, Tensor<f64>) {
        let mut rng = seeded_rng(5);
        let mut store = ParamStore::new();
        let p = DecoderParams::register(&mut store, 8, 16, 6, 4, &mut rng);
        let q = Tensor::randn(3, 8, 1.0, &mut rng);
        let s = Tensor::randn(5, 8, 1.0, &mut rng);
        (store, p, q, s)
    }

    #[test]
    fn single_rule_frontier_is_certain() {
        let (store, p, q, s) = setup();
        let dec = Decoder::new(&p);
        let mut tape = Tape::new(&store);
        let (qv, sv) = (tape.constant(q), tape.constant(s));
        let ctx = dec.context(&mut tape, qv, sv, 2);
        let mut rng = seeded_rng(0);
        let st = dec.initial_state(&mut tape, &ctx);
        let g = SqlGrammar::get();
        let out = dec.step(&mut tape, &ctx, &st, &mut rng).unwrap();
        let st = dec.advance(&mut tape, &ctx, &st, &out, Action::ApplyRule(g.id(Production::SqlSingle))).unwrap();
        let out = dec.step(&mut tape, &ctx, &st, &mut rng).unwrap();
        assert_eq!(out.symbol, Symbol::Nt(NonTerminal::Query));
        let lp = tape.value(out.log_probs).get(0, g.id(Production::Query));
        assert!(lp.abs() < 1e-12);
        let total: f64 = tape.value(out.log_probs).data().iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equal_tables_split_evenly() {
        let (store, p, q, s) = setup();
        let s = Tensor::from_fn(5, 8, |r, c| if r < 2 { 0.3 } else { s.get(r, c) });
        let dec = Decoder::new(&p);
        let mut tape = Tape::new(&store);
        let (qv, sv) = (tape.constant(q), tape.constant(s));
        let ctx = dec.context(&mut tape, qv, sv, 2);
        let mut rng = seeded_rng(0);
        let g = SqlGrammar::get();
        let mut st = dec.initial_state(&mut tape, &ctx);
        for prod in [Production::SqlSingle, Production::Query, Production::Select, Production::ItemsLast, Production::Item(crate::sql::Agg::None)] {
            let out = dec.step(&mut tape, &ctx, &st, &mut rng).unwrap();
            st = dec.advance(&mut tape, &ctx, &st, &out, Action::ApplyRule(g.id(prod))).unwrap();
        }
        let out = dec.step(&mut tape, &ctx, &st, &mut rng).unwrap();
        st = dec.advance(&mut tape, &ctx, &st, &out, Action::SelectColumn(1)).unwrap();
        let out = dec.step(&mut tape, &ctx, &st, &mut rng).unwrap();
        st = dec.advance(&mut tape, &ctx, &st, &out, Action::ApplyRule(g.id(Production::TablesLast))).unwrap();
        let out = dec.step(&mut tape, &ctx, &st, &mut rng).unwrap();
        assert_eq!(out.symbol, Symbol::Table);
        let v = tape.value(out.log_probs);
        assert!((v.get(0, 0).exp() - 0.5).abs() < 1e-12 && (v.get(0, 1).exp() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn beam_never_scores_below_greedy() {
        let (store, p, q, s) = setup();
        let dec = Decoder::new(&p);
        let mut tape = Tape::new(&store);
        let (qv, sv) = (tape.constant(q), tape.constant(s));
        let ctx = dec.context(&mut tape, qv, sv, 2);
        let one = dec.decode(&mut tape, &ctx, 1);
        let four = dec.decode(&mut tape, &ctx, 4);
        match (one, four) {
            (Ok(a), Ok(b)) => assert!(b.log_prob >= a.log_prob),
            (Err(Error::Truncated(_)), _) => {}
            (a, b) => panic!("{:?} {:?}", a.map(|d| d.log_prob), b.map(|d| d.log_prob)),
        }
    }
}
