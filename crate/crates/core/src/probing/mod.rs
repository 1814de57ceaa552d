//! Initial linking graph from masked-token probing of the context encoder.

mod cache;
mod context;

pub use cache::{probe_all, ProbeCache, ProbeStats};
pub use context::{concept, ContextConfig, ContextEncoder, EncoderInput, CONTEXT_PREFIX, MASK_TOKEN};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::corpus::{DatabaseSchema, Example, LinkingMatrix};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub tau: f64,
    pub mask_token: String,
    /// Divide scores by the example's maximum before thresholding.
    pub normalize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { tau: 0.7, mask_token: MASK_TOKEN.to_string(), normalize: true }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.normalize && !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1] with normalization on", self.tau)));
        }
        if self.mask_token != MASK_TOKEN {
            return Err(Error::Config(format!("the context encoder only knows the mask token {MASK_TOKEN}")));
        }
        Ok(())
    }
}

/// Node vectors of one encoder pass.
#[derive(Clone, PartialEq)]
pub struct JointEncoding<T> {
    /// `|Q| x dim`.
    pub question: Tensor<T>,
    /// `|S| x dim`, tables then columns.
    pub schema: Tensor<T>,
}

impl<T: Scalar> std::fmt::Debug for JointEncoding<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("JointEncoding").field("question", &self.question).field("schema", &self.schema).finish()
    }
}

pub fn encode_joint<T: Scalar>(
    encoder: &ContextEncoder,
    params: &ParamStore<T>,
    example: &Example,
    schema: &DatabaseSchema,
    mask_position: Option<usize>,
) -> Result<JointEncoding<T>> {
    let input = EncoderInput::build(example, schema, mask_position)?;
    let mut tape = Tape::new(params);
    let out = encoder.forward(&mut tape, &input, &example.id)?;
    let x = tape.value(out);
    let q = example.question_tokens.len();
    let enc = JointEncoding { question: x.slice_rows(0, q), schema: x.slice_rows(q, x.rows() - q) };
    if !enc.question.all_finite() || !enc.schema.all_finite() {
        return Err(Error::Numerical(format!("encoder output for {}", example.id)));
    }
    Ok(enc)
}

/// `|| s_j(base) - s_j(perturbed) ||_2`. The token index only documents
/// which mask produced `perturbed`.
pub fn impact_score<T: Scalar>(base: &JointEncoding<T>, perturbed: &JointEncoding<T>, _i: usize, j: usize) -> Result<T> {
    if base.schema.shape() != perturbed.schema.shape() || j >= base.schema.rows() {
        return Err(Error::Internal(format!(
            "impact score shapes {:?} vs {:?} at schema {j}",
            base.schema.shape(),
            perturbed.schema.shape()
        )));
    }
    let d = base.schema.row(j).iter().zip(perturbed.schema.row(j)).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>();
    Ok(d.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    /// Raw Euclidean displacement scores.
    pub raw: LinkingMatrix,
    pub a_init: LinkingMatrix,
    /// Set when every raw score is zero; `a_init` is then all zero.
    pub all_zero: bool,
}

/// Thresholds a raw score matrix: optional max-normalization, then entries
/// below `tau` become zero.
pub fn threshold_scores(raw: &LinkingMatrix, cfg: &ProbeConfig) -> ProbeResult {
    let max = raw.data().iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        log::warn!("probe scores are all zero; no linking prior for this example");
        return ProbeResult { raw: raw.clone(), a_init: Tensor::zeros(raw.rows(), raw.cols()), all_zero: true };
    }
    let scale = if cfg.normalize { 1.0 / max } else { 1.0 };
    let a_init = raw.map(|v| {
        let s = v * scale;
        if s >= cfg.tau {
            s
        } else {
            0.0
        }
    });
    ProbeResult { raw: raw.clone(), a_init, all_zero: false }
}

/// `|Q| + 1` encoder passes: one unmasked, then one per masked token.
pub fn probe_initial_graph<T: Scalar>(
    encoder: &ContextEncoder,
    params: &ParamStore<T>,
    example: &Example,
    schema: &DatabaseSchema,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let base = encode_joint(encoder, params, example, schema, None)?;
    let (q, s) = (example.question_tokens.len(), schema.num_items());
    let mut raw = Tensor::zeros(q, s);
    for i in 0..q {
        let perturbed = encode_joint(encoder, params, example, schema, Some(i))?;
        for j in 0..s {
            raw.set(i, j, impact_score(&base, &perturbed, i, j)?.as_f64());
        }
    }
    Ok(threshold_scores(&raw, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::test_fixtures::example;

    fn encoder() -> (ContextEncoder, ParamStore<f64>) {
        let mut params = ParamStore::new();
        let enc = ContextEncoder::register(&mut params, ContextConfig::default());
        (enc, params)
    }

    #[test]
    fn threshold_boundary_is_kept() {
        let raw = Tensor::from_rows(&[vec![0.69, 0.7, 1.0]]);
        let r = threshold_scores(&raw, &ProbeConfig::default());
        assert_eq!(r.a_init.data(), &[0.0, 0.7, 1.0]);
        let zero = threshold_scores(&Tensor::zeros(2, 2), &ProbeConfig::default());
        assert!(zero.all_zero);
    }

    #[test]
    fn impact_of_unit_displacement() {
        let base = JointEncoding { question: Tensor::<f64>::zeros(1, 2), schema: Tensor::from_rows(&[vec![1.0, 0.0]]) };
        let moved = JointEncoding { question: Tensor::zeros(1, 2), schema: Tensor::zeros(1, 2) };
        assert_eq!(impact_score(&base, &moved, 0, 0).unwrap(), 1.0);
        assert_eq!(impact_score(&base, &base, 0, 0).unwrap(), 0.0);
    }

    #[test]
    fn encoding_is_deterministic_and_shaped() {
        let (enc, params) = encoder();
        let (ex, s) = example("how many singers", "SELECT count(*) FROM singer");
        let a = encode_joint(&enc, &params, &ex, &s, None).unwrap();
        let b = encode_joint(&enc, &params, &ex, &s, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.question.shape(), (3, 128));
        assert_eq!(a.schema.shape(), (s.num_items(), 128));
    }

    #[test]
    fn probing_links_synonyms_and_costs_q_plus_one_passes() {
        let (enc, params) = encoder();
        let (ex, s) = example("show the ages for all french musicians", "SELECT age FROM singer");
        let before = params.checksum();
        let r = probe_initial_graph(&enc, &params, &ex, &s, &ProbeConfig::default()).unwrap();
        assert_eq!(enc.passes(), ex.question_tokens.len() + 1);
        assert_eq!(params.checksum(), before);
        let age = s.column_item(13);
        let singer = s.table_item(1);
        assert!(r.a_init.get(2, age) > 0.0, "ages -> singer.age");
        assert!(r.a_init.get(6, singer) > 0.0, "musicians -> singer");
        assert!(r.a_init.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
