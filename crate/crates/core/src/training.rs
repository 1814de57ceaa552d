//! Joint training of the parser and the learned linking graph, oracle
//! injection and checkpoints.

use std::collections::BTreeSet;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::{OracleMode, RunConfig};
use crate::corpus::{DatabaseSchema, LinkingMatrix};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, predicted_mentions, schema_linking_metrics, LinkingMetrics};
use crate::model::{LinkMode, Model, PreparedExample};
use crate::optim::{AdamW, LinearWarmup};
use crate::params::{seeded_rng, Gradients, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor of the column sums inside the regularizer's logarithm.
pub const REG_EPS: f64 = 1e-6;

/// `−Σ_{j ∈ mentions} ln clamp(Σ_i A_t[i, j], ε, 1)`.
pub fn graph_regularization_loss<T: Scalar>(a_t: &LinkingMatrix<T>, mentions: &BTreeSet<usize>) -> T {
    let mut loss = T::zero();
    for &j in mentions {
        let sum: T = (0..a_t.rows()).map(|i| a_t.get(i, j)).sum();
        loss -= sum.max(T::of(REG_EPS)).min(T::one()).ln();
    }
    loss
}

/// Tape version of [`graph_regularization_loss`]; zero without mentions.
pub fn graph_regularization_var<T: Scalar>(tape: &mut Tape<'_, T>, a_t: Var, mentions: &[usize]) -> Var {
    if mentions.is_empty() {
        return tape.constant(Tensor::zeros(1, 1));
    }
    let sums = tape.sum_rows(a_t);
    let sums = tape.transpose(sums);
    let picked = tape.gather_rows(sums, mentions.to_vec());
    let logs = tape.clamp_log(picked, T::of(REG_EPS), T::one());
    let total = tape.sum_all(logs);
    tape.scale(total, -T::one())
}

pub fn total_loss(l_sql: f64, l_g: f64, mu: f64) -> f64 {
    l_sql + mu * l_g
}

pub fn total_loss_var<T: Scalar>(tape: &mut Tape<'_, T>, l_sql: Var, l_g: Var, mu: f64) -> Var {
    let reg = tape.scale(l_g, T::of(mu));
    tape.add(l_sql, reg)
}

/// `(keep, values)` overlay replacing the oracle-covered columns of `Ã`.
pub fn oracle_overlay<T: Scalar>(
    prep: &PreparedExample<T>,
    schema: &DatabaseSchema,
    mode: OracleMode,
) -> Result<(LinkingMatrix<T>, LinkingMatrix<T>)> {
    let ex = &prep.example;
    let (q, s) = (ex.question_tokens.len(), schema.num_items());
    let nt = schema.num_tables();
    let covered = |j: usize| match mode {
        OracleMode::Columns => j >= nt,
        OracleMode::Tables => j < nt,
        OracleMode::Schema | OracleMode::Full => true,
    };
    let mut keep = Tensor::ones(q, s);
    let mut values = Tensor::zeros(q, s);
    for j in (0..s).filter(|&j| covered(j)) {
        for i in 0..q {
            keep.set(i, j, T::zero());
        }
    }
    match mode {
        OracleMode::Full => {
            let links = ex
                .links
                .as_ref()
                .ok_or_else(|| Error::Config(format!("full-linking oracle needs token links, {} has none", ex.id)))?;
            for &(i, j) in links {
                values.set(i, j, T::one());
            }
        }
        _ => {
            let mass = T::one() / T::of(q as f64);
            for &j in prep.reg_mentions.iter().filter(|&&j| covered(j)) {
                for i in 0..q {
                    values.set(i, j, mass);
                }
            }
        }
    }
    Ok((keep, values))
}

/// Installs the oracle overlay on every example.
pub fn inject_oracle_linking<T: Scalar>(
    examples: &mut [PreparedExample<T>],
    schemas: &[DatabaseSchema],
    mode: OracleMode,
) -> Result<()> {
    for prep in examples.iter_mut() {
        let schema = schema_for(schemas, &prep.example.db_id)?;
        prep.oracle = Some(oracle_overlay(prep, schema, mode)?);
    }
    Ok(())
}

pub(crate) fn schema_for<'a>(schemas: &'a [DatabaseSchema], db_id: &str) -> Result<&'a DatabaseSchema> {
    schemas.iter().find(|s| s.db_id == db_id).ok_or_else(|| Error::Lookup(format!("database `{db_id}`")))
}

/// Linking source implied by the ablation flags.
pub fn link_mode(cfg: &RunConfig) -> LinkMode {
    if cfg.ablations.exact_match {
        LinkMode::Fixed
    } else if cfg.ablations.no_linking {
        LinkMode::Unlinked
    } else {
        LinkMode::Fused { lambda: cfg.effective_lambda() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_sql: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_g: Option<f64>,
    pub col_f1: f64,
    pub tab_f1: f64,
    pub em_train: Option<f64>,
    pub em_dev: Option<f64>,
}

/// `Ã` of one example after `epoch` epochs (0 is before training).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub epoch: usize,
    pub example_id: String,
    pub tokens: Vec<String>,
    pub items: Vec<String>,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Snapshot {
    pub fn matrix(&self) -> LinkingMatrix {
        Tensor::from_vec(self.rows, self.cols, self.values.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
    pub scalar: String,
    pub optimizer_step: usize,
    /// Shuffling draws consumed so far; the stream is reproducible from the
    /// seed.
    pub rng_draws: u64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub snapshots: Vec<Snapshot>,
    pub checkpoint: Option<PathBuf>,
}

/// Output locations; training writes nothing when absent.
#[derive(Clone, Debug)]
pub struct TrainArtifacts {
    pub ckpt_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl TrainArtifacts {
    pub fn metrics_path(&self) -> PathBuf {
        self.report_dir.join("metrics.jsonl")
    }

    pub fn snapshot_dir(&self) -> PathBuf {
        self.report_dir.join("snapshots")
    }
}

fn snapshot_all<T: Scalar>(
    model: &Model<T>,
    examples: &[PreparedExample<T>],
    schemas: &[DatabaseSchema],
    mode: LinkMode,
    epoch: usize,
) -> Result<Vec<Snapshot>> {
    examples
        .par_iter()
        .map(|prep| {
            let schema = schema_for(schemas, &prep.example.db_id)?;
            let (_, a) = model.linking_matrices(prep, schema, mode)?;
            Ok(Snapshot {
                epoch,
                example_id: prep.example.id.clone(),
                tokens: prep.example.question_tokens.clone(),
                items: (0..schema.num_items()).map(|j| schema.item_name(j)).collect(),
                rows: a.rows(),
                cols: a.cols(),
                values: a.data().iter().map(|v| v.as_f64()).collect(),
            })
        })
        .collect()
}

fn write_snapshots(dir: &Path, epoch: usize, snaps: &[Snapshot]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("epoch-{epoch}.json"));
    let text = serde_json::to_string(snaps).map_err(|e| Error::Internal(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_snapshots(dir: &Path) -> Result<Vec<Snapshot>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let snaps: Vec<Snapshot> = serde_json::from_str(&text).map_err(|e| Error::Format {
                file: path.display().to_string(),
                record: None,
                message: e.to_string(),
            })?;
            out.extend(snaps);
        }
    }
    out.sort_by(|a, b| (a.epoch, &a.example_id).cmp(&(b.epoch, &b.example_id)));
    Ok(out)
}

/// Per-example dropout stream, independent of thread scheduling.
fn example_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    let mut h = crate::hash::Fnv64::new();
    for x in [seed, epoch as u64, index as u64] {
        h.write(&x.to_le_bytes());
    }
    h.finish()
}

/// Trains `model` in place. Exact match on `dev` is measured at evaluation
/// epochs when `dev` is non-empty.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_set: &[PreparedExample<T>],
    dev_set: &[PreparedExample<T>],
    schemas: &[DatabaseSchema],
    cfg: &RunConfig,
    artifacts: Option<&TrainArtifacts>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let t = &cfg.train;
    let mode = link_mode(cfg);
    let mu = cfg.effective_mu();
    let hash = cfg.hash();
    let batches_per_epoch = train_set.len().div_ceil(t.batch_size);
    let schedule = LinearWarmup { total_steps: t.epochs * batches_per_epoch, warmup_ratio: t.warmup_ratio };
    let mut opt = AdamW::new(t.optimizer(), &model.params);
    let mut shuffle_rng = seeded_rng(t.seed);
    let mut draws = 0u64;

    let mut metrics_file = match artifacts {
        Some(a) => {
            std::fs::create_dir_all(&a.report_dir).map_err(|e| Error::io(&a.report_dir, e))?;
            let path = a.metrics_path();
            Some((std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };

    let mut snapshots = snapshot_all(model, train_set, schemas, mode, 0)?;
    if let Some(a) = artifacts {
        write_snapshots(&a.snapshot_dir(), 0, &snapshots)?;
    }
    let mut history = Vec::with_capacity(t.epochs);
    let mut checkpoint = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=t.epochs {
        order.shuffle(&mut shuffle_rng);
        draws += order.len() as u64;
        let (mut sum_sql, mut sum_g) = (0.0, 0.0);
        let mut predicted = Vec::with_capacity(train_set.len());
        let mut gold = Vec::with_capacity(train_set.len());
        for (b, batch) in order.chunks(t.batch_size).enumerate() {
            let results: Vec<Result<_>> = batch
                .par_iter()
                .map(|&k| {
                    let prep = &train_set[k];
                    let schema = schema_for(schemas, &prep.example.db_id)?;
                    let mut rng = seeded_rng(example_seed(t.seed, epoch, k));
                    let (loss, grads, a_tilde) = model.example_gradients(prep, schema, mode, mu, &mut rng)?;
                    Ok((loss, grads, predicted_mentions(&a_tilde, schema, cfg.link_threshold)))
                })
                .collect();
            let mut grads = Gradients::new(model.params.len());
            for (r, &k) in results.into_iter().zip(batch) {
                let (loss, g, mentions) = r.map_err(|e| match e {
                    Error::Numerical(m) => Error::Numerical(format!("epoch {epoch}, batch {b}: {m}")),
                    other => other,
                })?;
                sum_sql += loss.l_sql;
                sum_g += loss.l_g;
                grads.merge(&g);
                predicted.push(mentions);
                gold.push(train_set[k].example.gold_mentions.clone());
            }
            grads.scale(T::one() / T::of(batch.len() as f64));
            if !grads.all_finite() {
                return Err(Error::Numerical(format!("epoch {epoch}, batch {b}: non-finite gradient")));
            }
            opt.update(&mut model.params, &grads, schedule.factor(opt.step));
        }

        let linking = linking_on(&predicted, &gold, &order, train_set, schemas)?;
        let eval_now = epoch == t.epochs || (t.eval_every > 0 && epoch % t.eval_every == 0);
        let (em_train, em_dev) = if eval_now {
            let tr = evaluate(model, train_set, schemas, mode, t.beam, cfg.link_threshold)?.report.exact_match;
            let dv = if dev_set.is_empty() {
                None
            } else {
                Some(evaluate(model, dev_set, schemas, mode, t.beam, cfg.link_threshold)?.report.exact_match)
            };
            (Some(tr), dv)
        } else {
            (None, None)
        };
        let n = train_set.len() as f64;
        let m = EpochMetrics {
            epoch,
            loss_sql: sum_sql / n,
            loss_g: (!cfg.ablations.no_reg).then_some(sum_g / n),
            col_f1: linking.col_f,
            tab_f1: linking.tab_f,
            em_train,
            em_dev,
        };
        log::info!(
            "epoch {epoch}: loss_sql {:.4} loss_g {:?} col_f1 {:.3} tab_f1 {:.3} em_train {:?}",
            m.loss_sql,
            m.loss_g,
            m.col_f1,
            m.tab_f1,
            m.em_train
        );
        if let Some((file, path)) = metrics_file.as_mut() {
            let line = serde_json::to_string(&m).map_err(|e| Error::Internal(e.to_string()))?;
            writeln!(file, "{line}").map_err(|e| Error::io(&*path, e))?;
        }
        history.push(m);

        let snap_now = epoch == t.epochs || (t.snapshot_every > 0 && epoch % t.snapshot_every == 0);
        if snap_now {
            let snaps = snapshot_all(model, train_set, schemas, mode, epoch)?;
            if let Some(a) = artifacts {
                write_snapshots(&a.snapshot_dir(), epoch, &snaps)?;
            }
            snapshots.extend(snaps);
        }
        let ckpt_now = epoch == t.epochs || (t.checkpoint_every > 0 && epoch % t.checkpoint_every == 0);
        if let (true, Some(a)) = (ckpt_now, artifacts) {
            let meta = CheckpointMeta {
                epoch,
                seed: t.seed,
                config_hash: hash.clone(),
                scalar: std::any::type_name::<T>().to_string(),
                optimizer_step: opt.step,
                rng_draws: draws,
            };
            checkpoint = Some(save_checkpoint(&a.ckpt_dir, model, &opt, &meta)?);
        }
    }
    Ok(TrainOutcome { history, snapshots, checkpoint })
}

fn linking_on<T: Scalar>(
    predicted: &[BTreeSet<usize>],
    gold: &[BTreeSet<usize>],
    order: &[usize],
    examples: &[PreparedExample<T>],
    schemas: &[DatabaseSchema],
) -> Result<LinkingMetrics> {
    let used: Vec<&DatabaseSchema> =
        order.iter().map(|&k| schema_for(schemas, &examples[k].example.db_id)).collect::<Result<_>>()?;
    Ok(schema_linking_metrics(predicted, gold, &used))
}

const PARAMS_MAGIC: &[u8; 4] = b"SLCK";
const OPTIM_MAGIC: &[u8; 4] = b"SLOP";
const FORMAT_VERSION: u32 = 1;

fn write_u64(w: &mut impl Write, x: u64) -> std::io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Named tensors as little-endian `f64`, so `f32` values round-trip exactly.
fn write_tensors<T: Scalar>(path: &Path, magic: &[u8; 4], header: u64, items: &[(&str, &Tensor<T>)]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(magic).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    write_u64(&mut w, header).map_err(io)?;
    write_u64(&mut w, items.len() as u64).map_err(io)?;
    for (name, t) in items {
        write_u64(&mut w, name.len() as u64).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        write_u64(&mut w, t.rows() as u64).map_err(io)?;
        write_u64(&mut w, t.cols() as u64).map_err(io)?;
        for v in t.data() {
            w.write_all(&v.as_f64().to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

type NamedTensors<T> = Vec<(String, Tensor<T>)>;

fn read_tensors<T: Scalar>(path: &Path, magic: &[u8; 4]) -> Result<(u64, NamedTensors<T>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |m: &str| Error::Format { file: path.display().to_string(), record: None, message: m.to_string() };
    let io = |e: std::io::Error| bad(&e.to_string());
    let mut head = [0u8; 8];
    r.read_exact(&mut head).map_err(io)?;
    if &head[..4] != magic {
        return Err(bad("wrong file magic"));
    }
    if u32::from_le_bytes(head[4..].try_into().expect("4 bytes")) != FORMAT_VERSION {
        return Err(bad("unsupported format version"));
    }
    let header = read_u64(&mut r).map_err(io)?;
    let count = read_u64(&mut r).map_err(io)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u64(&mut r).map_err(io)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
        let rows = read_u64(&mut r).map_err(io)? as usize;
        let cols = read_u64(&mut r).map_err(io)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut b = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut b).map_err(io)?;
            data.push(T::of(f64::from_le_bytes(b)));
        }
        out.push((name, Tensor::from_vec(rows, cols, data)));
    }
    Ok((header, out))
}

/// Writes `ckpt_dir/epoch-N/{params.bin, optimizer.bin, meta.json}`.
pub fn save_checkpoint<T: Scalar>(ckpt_dir: &Path, model: &Model<T>, opt: &AdamW<T>, meta: &CheckpointMeta) -> Result<PathBuf> {
    let dir = ckpt_dir.join(format!("epoch-{}", meta.epoch));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let p = &model.params;
    let items: Vec<(&str, &Tensor<T>)> = p.ids().map(|id| (p.name(id), p.get(id))).collect();
    write_tensors(&dir.join("params.bin"), PARAMS_MAGIC, 0, &items)?;
    let moments: Vec<(String, &Tensor<T>)> = p
        .ids()
        .flat_map(|id| [(format!("{}.m", p.name(id)), &opt.first[id.0]), (format!("{}.v", p.name(id)), &opt.second[id.0])])
        .collect();
    let moments: Vec<(&str, &Tensor<T>)> = moments.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    write_tensors(&dir.join("optimizer.bin"), OPTIM_MAGIC, opt.step as u64, &moments)?;
    let meta_path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(meta).map_err(|e| Error::Internal(e.to_string()))?;
    std::fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
    Ok(dir)
}

pub fn load_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join("meta.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format { file: path.display().to_string(), record: None, message: e.to_string() })
}

/// Loads parameters into `model`, whose architecture must match.
pub fn load_params<T: Scalar>(dir: &Path, params: &mut ParamStore<T>) -> Result<()> {
    let path = dir.join("params.bin");
    let (_, tensors) = read_tensors::<T>(&path, PARAMS_MAGIC)?;
    if tensors.len() != params.len() {
        return Err(Error::Config(format!("checkpoint has {} tensors, model has {}", tensors.len(), params.len())));
    }
    for (name, t) in tensors {
        let id = params.id(&name).ok_or_else(|| Error::Config(format!("checkpoint tensor `{name}` not in model")))?;
        if params.get(id).shape() != t.shape() {
            return Err(Error::Config(format!("checkpoint tensor `{name}` has shape {:?}", t.shape())));
        }
        *params.get_mut(id) = t;
    }
    Ok(())
}

pub fn load_optimizer<T: Scalar>(dir: &Path, opt: &mut AdamW<T>, params: &ParamStore<T>) -> Result<()> {
    let path = dir.join("optimizer.bin");
    let (step, tensors) = read_tensors::<T>(&path, OPTIM_MAGIC)?;
    if tensors.len() != 2 * params.len() {
        return Err(Error::Config("optimizer state does not match the model".into()));
    }
    for (k, (_, t)) in tensors.into_iter().enumerate() {
        let slot = if k % 2 == 0 { &mut opt.first[k / 2] } else { &mut opt.second[k / 2] };
        if slot.shape() != t.shape() {
            return Err(Error::Config("optimizer state shape mismatch".into()));
        }
        *slot = t;
    }
    opt.step = step as usize;
    Ok(())
}

/// Newest `epoch-N` directory under `ckpt_dir`.
pub fn latest_checkpoint(ckpt_dir: &Path) -> Result<PathBuf> {
    let entries = std::fs::read_dir(ckpt_dir).map_err(|e| Error::io(ckpt_dir, e))?;
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(ckpt_dir, e))?.path();
        let epoch = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_prefix("epoch-")).and_then(|n| n.parse().ok());
        if let Some(e) = epoch {
            if best.as_ref().is_none_or(|(b, _)| e > *b) {
                best = Some((e, path));
            }
        }
    }
    best.map(|(_, p)| p).ok_or_else(|| Error::Lookup(format!("no checkpoint in {}", ckpt_dir.display())))
}
