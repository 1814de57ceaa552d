//! Stage glue shared by the command line and the tests.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::corpus::{build_static_edges, exact_match_linking, load_examples, load_schemas, Corpus, DatabaseSchema, Example};
use crate::decoder::ast_to_actions;
use crate::error::{Error, Result};
use crate::model::{Model, PreparedExample};
use crate::probing::{probe_all, ProbeCache, ProbeStats};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::schema_for;

/// Schemas from `tables.json` and the examples of `{split}.json`.
pub fn load_split(data_dir: &Path, split: &str) -> Result<Corpus> {
    let schemas = load_schemas(&data_dir.join("tables.json"))?;
    let examples = load_examples(&data_dir.join(format!("{split}.json")), &schemas)?;
    Ok(Corpus { schemas, examples })
}

pub fn build_model<T: Scalar>(cfg: &RunConfig) -> Model<T> {
    let mut model = Model::new(cfg.encoder.clone(), cfg.model.clone(), cfg.train.seed);
    model.freeze_encoder(cfg.train.freeze_encoder);
    model
}

/// Probes every example missing from the on-disk cache and saves it.
pub fn probe_corpus<T: Scalar>(model: &Model<T>, corpus: &Corpus, cfg: &RunConfig) -> Result<(ProbeCache, ProbeStats)> {
    std::fs::create_dir_all(&cfg.cache_dir).map_err(|e| Error::io(&cfg.cache_dir, e))?;
    let mut cache = ProbeCache::open(&cfg.cache_dir, &cfg.encoder.name, &cfg.probe)?;
    let stats = probe_all(&model.context, &model.params, corpus, &corpus.examples, &cfg.probe, &mut cache)?;
    if stats.probed > 0 || !cache.corrupted.is_empty() {
        cache.save()?;
    }
    Ok((cache, stats))
}

/// Static graphs, gold actions, initial graphs and (under a frozen encoder)
/// cached encodings. `cache` may be `None` only when probing is ablated.
pub fn prepare<T: Scalar>(
    model: &Model<T>,
    corpus: &Corpus,
    cache: Option<&ProbeCache>,
    cfg: &RunConfig,
) -> Result<Vec<PreparedExample<T>>> {
    let freeze = model.encoder_frozen();
    corpus
        .examples
        .par_iter()
        .map(|ex| {
            let schema = corpus.schema_of(ex);
            let a_init = match cache.and_then(|c| c.get(ex, schema.num_items())) {
                Some(r) => r.a_init.cast(),
                None if cfg.ablations.no_probe => Tensor::zeros(ex.question_tokens.len(), schema.num_items()),
                None => return Err(Error::Config(format!("no probe result for {}; run the probe stage first", ex.id))),
            };
            let mut prep = PreparedExample::new(ex, schema, a_init)?;
            if cfg.ablations.exact_match {
                prep.fixed_link = Some(exact_match_linking(ex, schema).cast());
            }
            if freeze {
                prep.encoding = Some(model.encode(ex, schema)?);
            }
            Ok(prep)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PreprocessRecord {
    id: String,
    db_id: String,
    num_question: usize,
    num_tables: usize,
    num_columns: usize,
    edge_types: Vec<u8>,
    actions: Vec<String>,
    gold_mentions: Vec<String>,
}

fn record(ex: &Example, schema: &DatabaseSchema) -> Result<PreprocessRecord> {
    let graph = build_static_edges(ex, schema);
    Ok(PreprocessRecord {
        id: ex.id.clone(),
        db_id: ex.db_id.clone(),
        num_question: graph.num_question,
        num_tables: graph.num_tables,
        num_columns: graph.num_columns,
        edge_types: graph.type_ids().into_iter().map(|t| t as u8).collect(),
        actions: ast_to_actions(&ex.gold_ast)?.iter().map(|a| format!("{a:?}")).collect(),
        gold_mentions: ex.gold_mentions.iter().map(|&j| schema.item_name(j)).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreprocessSummary {
    pub path: PathBuf,
    pub records: usize,
    /// SHA-256 of the written file.
    pub digest: String,
}

/// Writes `preprocess-{split}.jsonl`: one line per example with its static
/// graph and gold action sequence.
pub fn preprocess(corpus: &Corpus, split: &str, cache_dir: &Path) -> Result<PreprocessSummary> {
    std::fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    let mut text = Vec::new();
    for ex in &corpus.examples {
        let schema = schema_for(&corpus.schemas, &ex.db_id)?;
        let line = serde_json::to_string(&record(ex, schema)?).map_err(|e| Error::Internal(e.to_string()))?;
        writeln!(text, "{line}").expect("writing to memory");
    }
    let path = cache_dir.join(format!("preprocess-{split}.jsonl"));
    std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    Ok(PreprocessSummary { path, records: corpus.examples.len(), digest: hex::encode(Sha256::digest(&text)) })
}
