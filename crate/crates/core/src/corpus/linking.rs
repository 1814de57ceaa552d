use super::{DatabaseSchema, Example};
use crate::tensor::Tensor;
use crate::text::singularize;

/// Nonnegative `|Q| x (|T|+|C|)` question/schema matrix.
pub type LinkingMatrix<T = f64> = Tensor<T>;

const MAX_NGRAM: usize = 5;

fn words_match(ngram: &[String], name: &[String]) -> bool {
    if ngram.len() == name.len() && ngram.iter().zip(name).all(|(a, b)| singularize(a) == singularize(b)) {
        return true;
    }
    let joined = |ws: &[String]| singularize(&ws.concat());
    joined(ngram) == joined(name)
}

/// String-match baseline: `(i, j) = 1` when an n-gram (n <= 5) starting at
/// token `i` equals item `j`'s name, ignoring case, plural suffixes and word
/// boundaries. The wildcard never links.
pub fn exact_match_linking(example: &Example, schema: &DatabaseSchema) -> LinkingMatrix {
    let q = &example.question_tokens;
    let mut out = Tensor::zeros(q.len(), schema.num_items());
    for j in 0..schema.num_items() {
        if schema.is_wildcard_item(j) {
            continue;
        }
        let name = schema.item_tokens(j);
        for i in 0..q.len() {
            let hit = (1..=MAX_NGRAM.min(q.len() - i)).any(|n| words_match(&q[i..i + n], name));
            if hit {
                out.set(i, j, 1.0);
            }
        }
    }
    out
}
