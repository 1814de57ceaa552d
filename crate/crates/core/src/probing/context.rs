//! Deterministic contextual encoder used for probing and as the joint
//! question/schema encoder.
//!
//! Word vectors are derived from hashed concept and character-trigram
//! embeddings, with concepts taken from a bundled lexicon so that related
//! words share a representation. The encoder stack is a small post-norm
//! transformer whose projections start near the identity, which makes
//! attention follow lexical similarity.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::corpus::{DatabaseSchema, Example};
use crate::error::{Error, Result};
use crate::hash::fnv64;
use crate::params::{seeded_rng, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::singularize;

const LEXICON: &str = include_str!("../../assets/lexicon.txt");

pub const MASK_TOKEN: &str = "[MASK]";

const CROSS_ITEM_BIAS: f64 = -4.0;
/// Attention logit multiplier; sharper attention follows lexical overlap.
const SHARPNESS: f64 = 3.0;

fn lexicon() -> &'static HashMap<String, String> {
    static MAP: OnceLock<HashMap<String, String>> = OnceLock::new();
    MAP.get_or_init(|| {
        let mut map = HashMap::new();
        for line in LEXICON.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let words: Vec<&str> = line.split_whitespace().collect();
            for w in &words {
                map.insert(singularize(w), words[0].to_string());
            }
        }
        map
    })
}

/// Concept label of a word: its lexicon group head, else its singular form.
pub fn concept(word: &str) -> String {
    let s = singularize(word);
    lexicon().get(&s).cloned().unwrap_or(s)
}

fn hashed_vector(key: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv64(key.as_bytes()));
    let std = 1.0 / (dim as f64).sqrt();
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).map(|z: f64| z * std).collect()
}

fn word_vector(word: &str, dim: usize) -> Vec<f64> {
    if word.starts_with('[') {
        return hashed_vector(&format!("special:{word}"), dim);
    }
    let mut v = hashed_vector(&format!("concept:{}", concept(word)), dim);
    let chars: Vec<char> = format!("#{}#", word.to_lowercase()).chars().collect();
    let grams: Vec<String> = chars.windows(3).map(|w| w.iter().collect()).collect();
    for g in &grams {
        for (o, x) in v.iter_mut().zip(hashed_vector(&format!("gram:{g}"), dim)) {
            *o += 0.25 * x / grams.len() as f64;
        }
    }
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Segment {
    Question,
    Separator,
    Table,
    Column,
}

/// Encoder input: one word per position plus, for every node, the word
/// positions pooled into its vector.
#[derive(Clone, Debug)]
pub struct EncoderInput {
    pub words: Vec<String>,
    segments: Vec<Segment>,
    /// Schema item owning each position (markers included).
    items: Vec<Option<usize>>,
    /// `|Q| + |S|` position lists, question tokens first.
    pub pools: Vec<Vec<usize>>,
}

impl EncoderInput {
    /// `q_1 .. q_n [SEP] [TAB] t .. [COL:type] c ..`, with tables before
    /// columns. `mask` replaces one question token by [`MASK_TOKEN`].
    pub fn build(example: &Example, schema: &DatabaseSchema, mask: Option<usize>) -> Result<Self> {
        let q = &example.question_tokens;
        if let Some(m) = mask {
            if m >= q.len() {
                return Err(Error::Internal(format!("mask position {m} outside question of length {}", q.len())));
            }
        }
        let mut words = Vec::new();
        let mut segments = Vec::new();
        let mut pools = Vec::new();
        let mut items = Vec::new();
        for (i, w) in q.iter().enumerate() {
            pools.push(vec![words.len()]);
            words.push(if mask == Some(i) { MASK_TOKEN.to_string() } else { w.clone() });
            segments.push(Segment::Question);
            items.push(None);
        }
        words.push("[SEP]".into());
        segments.push(Segment::Separator);
        items.push(None);
        for j in 0..schema.num_items() {
            let (marker, seg) = match schema.item(j) {
                crate::corpus::SchemaItem::Table(_) => ("[TAB]".to_string(), Segment::Table),
                crate::corpus::SchemaItem::Column(c) => {
                    (format!("[COL:{}]", schema.columns[c].ty.as_str()), Segment::Column)
                }
            };
            words.push(marker);
            segments.push(seg);
            items.push(Some(j));
            let start = words.len();
            for w in schema.item_tokens(j) {
                words.push(w.clone());
                segments.push(seg);
                items.push(Some(j));
            }
            pools.push((start..words.len()).collect());
        }
        Ok(EncoderInput { words, segments, items, pools })
    }

    /// Additive attention bias: positions of two different schema items
    /// barely see each other, so schema words attend to their own item and
    /// to the question.
    fn attention_bias<T: Scalar>(&self) -> Tensor<T> {
        let n = self.len();
        Tensor::from_fn(n, n, |p, q| match (self.items[p], self.items[q]) {
            (Some(a), Some(b)) if a != b => T::of(CROSS_ITEM_BIAS),
            _ => T::zero(),
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContextConfig {
    pub name: String,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig { name: "lexctx-small".into(), dim: 128, layers: 4, heads: 4, ffn_dim: 256, max_len: 512, seed: 7 }
    }
}

struct LayerIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln1: (ParamId, ParamId),
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2: (ParamId, ParamId),
}

/// Parameters live in the shared store under the `ctx.` prefix.
pub struct ContextEncoder {
    pub config: ContextConfig,
    layers: Vec<LayerIds>,
    emb_ln: (ParamId, ParamId),
    passes: AtomicUsize,
}

pub const CONTEXT_PREFIX: &str = "ctx.";

impl ContextEncoder {
    pub fn register<T: Scalar>(params: &mut ParamStore<T>, config: ContextConfig) -> Self {
        assert_eq!(config.dim % config.heads, 0, "encoder dim must divide into heads");
        let mut rng = seeded_rng(config.seed);
        let d = config.dim;
        let near_identity = |rng: &mut ChaCha8Rng| {
            let mut t = Tensor::<T>::randn(d, d, 0.02, rng);
            for i in 0..d {
                t.set(i, i, t.get(i, i) + T::one());
            }
            t
        };
        let ln = |params: &mut ParamStore<T>, name: String| {
            (params.add(format!("{name}.gain"), Tensor::ones(1, d)), params.add(format!("{name}.bias"), Tensor::zeros(1, d)))
        };
        let emb_ln = ln(params, "ctx.emb_ln".into());
        let mut layers = Vec::new();
        for l in 0..config.layers {
            let p = format!("ctx.l{l}");
            layers.push(LayerIds {
                wq: params.add(format!("{p}.wq"), near_identity(&mut rng)),
                wk: params.add(format!("{p}.wk"), near_identity(&mut rng)),
                wv: params.add(format!("{p}.wv"), near_identity(&mut rng)),
                wo: params.add(format!("{p}.wo"), near_identity(&mut rng)),
                ln1: ln(params, format!("{p}.ln1")),
                w1: params.add(format!("{p}.w1"), Tensor::randn(d, config.ffn_dim, 0.02, &mut rng)),
                b1: params.add(format!("{p}.b1"), Tensor::zeros(1, config.ffn_dim)),
                w2: params.add(format!("{p}.w2"), Tensor::randn(config.ffn_dim, d, 0.02, &mut rng)),
                b2: params.add(format!("{p}.b2"), Tensor::zeros(1, d)),
                ln2: ln(params, format!("{p}.ln2")),
            });
        }
        ContextEncoder { config, layers, emb_ln, passes: AtomicUsize::new(0) }
    }

    /// Number of forward passes run so far.
    pub fn passes(&self) -> usize {
        self.passes.load(Ordering::Relaxed)
    }

    fn embed<T: Scalar>(&self, input: &EncoderInput) -> Tensor<T> {
        let d = self.config.dim;
        let mut out = Tensor::zeros(input.len(), d);
        let mut q_pos = 0usize;
        for (p, (w, seg)) in input.words.iter().zip(&input.segments).enumerate() {
            let mut v = word_vector(w, d);
            let seg_v = hashed_vector(&format!("segment:{seg:?}"), d);
            for (o, s) in v.iter_mut().zip(seg_v) {
                *o += 0.3 * s;
            }
            if *seg == Segment::Question {
                for (k, o) in v.iter_mut().enumerate() {
                    let rate = 1.0 / 10000f64.powf((k / 2 * 2) as f64 / d as f64);
                    let angle = q_pos as f64 * rate;
                    *o += 0.1 * (if k % 2 == 0 { angle.sin() } else { angle.cos() }) / (d as f64).sqrt();
                }
                q_pos += 1;
            }
            for (k, x) in v.into_iter().enumerate() {
                out.set(p, k, T::of(x));
            }
        }
        out
    }

    /// Pooled node vectors (`|Q| + |S|` rows) recorded on `tape`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, input: &EncoderInput, example_id: &str) -> Result<Var> {
        if input.len() > self.config.max_len {
            return Err(Error::Capacity { example: example_id.to_string(), len: input.len(), limit: self.config.max_len });
        }
        self.passes.fetch_add(1, Ordering::Relaxed);
        let eps = T::of(1e-5);
        let x0 = tape.constant(self.embed(input));
        let (g, b) = (tape.param(self.emb_ln.0), tape.param(self.emb_ln.1));
        let mut x = tape.layer_norm(x0, g, b, eps);
        let heads = self.config.heads;
        let dh = self.config.dim / heads;
        let temp = T::of(SHARPNESS / (dh as f64).sqrt());
        let bias = tape.constant(input.attention_bias());
        for layer in &self.layers {
            let (wq, wk, wv, wo) = (tape.param(layer.wq), tape.param(layer.wk), tape.param(layer.wv), tape.param(layer.wo));
            let q = tape.matmul(x, wq);
            let k = tape.matmul(x, wk);
            let v = tape.matmul(x, wv);
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let (qh, kh, vh) =
                    (tape.slice_cols(q, h * dh, dh), tape.slice_cols(k, h * dh, dh), tape.slice_cols(v, h * dh, dh));
                let s = tape.matmul_t(qh, kh);
                let s = tape.scale(s, temp);
                let s = tape.add(s, bias);
                let a = tape.softmax_rows(s);
                outs.push(tape.matmul(a, vh));
            }
            let cat = tape.concat_cols(&outs);
            let attn = tape.matmul(cat, wo);
            let res = tape.add(x, attn);
            let (g1, b1) = (tape.param(layer.ln1.0), tape.param(layer.ln1.1));
            x = tape.layer_norm(res, g1, b1, eps);
            let (w1, bb1, w2, bb2) = (tape.param(layer.w1), tape.param(layer.b1), tape.param(layer.w2), tape.param(layer.b2));
            let hdn = tape.matmul(x, w1);
            let hdn = tape.add_row(hdn, bb1);
            let hdn = tape.relu(hdn);
            let f = tape.matmul(hdn, w2);
            let f = tape.add_row(f, bb2);
            let res = tape.add(x, f);
            let (g2, b2) = (tape.param(layer.ln2.0), tape.param(layer.ln2.1));
            x = tape.layer_norm(res, g2, b2, eps);
        }
        let pool = Tensor::from_fn(input.pools.len(), input.len(), |r, c| {
            let p = &input.pools[r];
            if p.contains(&c) {
                T::of(1.0 / p.len() as f64)
            } else {
                T::zero()
            }
        });
        let pool = tape.constant(pool);
        Ok(tape.matmul(pool, x))
    }
}
