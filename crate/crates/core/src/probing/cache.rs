use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{probe_initial_graph, ContextEncoder, ProbeConfig, ProbeResult};
use crate::corpus::{Corpus, Example};
use crate::error::{Error, Result};
use crate::hash::Fnv64;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Record {
    example_id: String,
    encoder: String,
    tau: f64,
    normalize: bool,
    rows: usize,
    cols: usize,
    raw: Vec<f64>,
    a_init: Vec<f64>,
    all_zero: bool,
    checksum: String,
}

fn checksum(rows: usize, cols: usize, raw: &[f64], a_init: &[f64]) -> String {
    let mut h = Fnv64::new();
    h.write(&(rows as u64).to_le_bytes());
    h.write(&(cols as u64).to_le_bytes());
    for v in raw.iter().chain(a_init) {
        h.write(&v.to_bits().to_le_bytes());
    }
    format!("{:016x}", h.finish())
}

impl Record {
    fn new(example_id: &str, encoder: &str, cfg: &ProbeConfig, r: &ProbeResult) -> Self {
        let (rows, cols) = r.raw.shape();
        Record {
            example_id: example_id.to_string(),
            encoder: encoder.to_string(),
            tau: cfg.tau,
            normalize: cfg.normalize,
            rows,
            cols,
            raw: r.raw.data().to_vec(),
            a_init: r.a_init.data().to_vec(),
            all_zero: r.all_zero,
            checksum: checksum(rows, cols, r.raw.data(), r.a_init.data()),
        }
    }

    fn is_valid(&self) -> bool {
        self.raw.len() == self.rows * self.cols
            && self.a_init.len() == self.rows * self.cols
            && self.checksum == checksum(self.rows, self.cols, &self.raw, &self.a_init)
    }

    fn into_result(self) -> ProbeResult {
        ProbeResult {
            raw: Tensor::from_vec(self.rows, self.cols, self.raw),
            a_init: Tensor::from_vec(self.rows, self.cols, self.a_init),
            all_zero: self.all_zero,
        }
    }
}

/// JSON-lines store of probe results for one `(encoder, tau, normalization)`
/// key; records are addressed by example id.
pub struct ProbeCache {
    path: PathBuf,
    encoder: String,
    cfg: ProbeConfig,
    entries: BTreeMap<String, ProbeResult>,
    /// Ids of records that failed validation on load.
    pub corrupted: Vec<String>,
}

impl ProbeCache {
    pub fn file_name(encoder: &str, cfg: &ProbeConfig) -> String {
        format!("probe-{encoder}-tau{}-{}.jsonl", cfg.tau, if cfg.normalize { "norm" } else { "raw" })
    }

    pub fn open(dir: &Path, encoder: &str, cfg: &ProbeConfig) -> Result<Self> {
        let path = dir.join(Self::file_name(encoder, cfg));
        let mut cache =
            ProbeCache { path, encoder: encoder.to_string(), cfg: cfg.clone(), entries: BTreeMap::new(), corrupted: Vec::new() };
        let text = match std::fs::read_to_string(&cache.path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(cache),
            Err(e) => return Err(Error::io(&cache.path, e)),
        };
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            match serde_json::from_str::<Record>(line) {
                Ok(r) if r.is_valid() && r.encoder == encoder && r.tau == cfg.tau && r.normalize == cfg.normalize => {
                    cache.entries.insert(r.example_id.clone(), r.into_result());
                }
                Ok(r) => {
                    log::warn!("{}: line {} ({}) failed validation; it will be re-probed", cache.path.display(), n + 1, r.example_id);
                    cache.corrupted.push(r.example_id);
                }
                Err(e) => {
                    log::warn!("{}: line {} is unreadable ({e}); it will be re-probed", cache.path.display(), n + 1);
                    cache.corrupted.push(format!("line {}", n + 1));
                }
            }
        }
        Ok(cache)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Cached result whose shape fits `example` on a schema of `num_items`.
    pub fn get(&self, example: &Example, num_items: usize) -> Option<&ProbeResult> {
        self.entries
            .get(&example.id)
            .filter(|r| r.raw.shape() == (example.question_tokens.len(), num_items))
    }

    pub fn insert(&mut self, example_id: &str, result: ProbeResult) {
        self.entries.insert(example_id.to_string(), result);
    }

    pub fn save(&self) -> Result<()> {
        if let Some(dir) = self.path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut out = Vec::new();
        for (id, r) in &self.entries {
            let line = serde_json::to_string(&Record::new(id, &self.encoder, &self.cfg, r))
                .map_err(|e| Error::Internal(e.to_string()))?;
            writeln!(out, "{line}").map_err(|e| Error::io(&self.path, e))?;
        }
        std::fs::write(&self.path, out).map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ProbeStats {
    pub hits: usize,
    pub probed: usize,
}

/// Fills `cache` for every example, probing misses in parallel.
pub fn probe_all<T: Scalar>(
    encoder: &ContextEncoder,
    params: &ParamStore<T>,
    corpus: &Corpus,
    examples: &[Example],
    cfg: &ProbeConfig,
    cache: &mut ProbeCache,
) -> Result<ProbeStats> {
    let misses: Vec<&Example> =
        examples.iter().filter(|e| cache.get(e, corpus.schema_of(e).num_items()).is_none()).collect();
    let results: Vec<Result<(String, ProbeResult)>> = misses
        .par_iter()
        .map(|e| Ok((e.id.clone(), probe_initial_graph(encoder, params, e, corpus.schema_of(e), cfg)?)))
        .collect();
    let stats = ProbeStats { hits: examples.len() - misses.len(), probed: misses.len() };
    for r in results {
        let (id, result) = r?;
        cache.insert(&id, result);
    }
    Ok(stats)
}
