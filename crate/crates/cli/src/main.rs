use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use schemalink::config::{Ablation, OracleMode, RunConfig, CACHE_DIR_ENV};
use schemalink::corpus::Corpus;
use schemalink::evaluation::{emit_report, evaluate, write_heatmaps, write_report_json, Report};
use schemalink::pipeline::{build_model, load_split, prepare, preprocess, probe_corpus};
use schemalink::training::{
    inject_oracle_linking, latest_checkpoint, link_mode, load_meta, load_params, read_snapshots, train, EpochMetrics,
    TrainArtifacts,
};
use schemalink::ModelF64;

#[derive(Parser)]
#[command(name = "schemalink", version, about = "Text-to-SQL with probed and learned schema linking")]
struct Cli {
    #[command(flatten)]
    opts: Opts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Opts {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true, env = CACHE_DIR_ENV)]
    cache_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    ckpt_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    report_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    mu: Option<f64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    beam: Option<usize>,
    #[arg(long, global = true)]
    freeze_encoder: bool,
    #[arg(long, global = true, value_enum)]
    ablate: Vec<AblateArg>,
    #[arg(long, global = true, value_enum)]
    oracle: Option<OracleArg>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
enum AblateArg {
    NoProbe,
    NoImplicit,
    NoReg,
    ExactMatch,
    NoLinking,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum OracleArg {
    Columns,
    Tables,
    Schema,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Build static graphs and gold action sequences for every split.
    Preprocess,
    /// Compute and cache the initial linking graphs.
    Probe,
    /// Train, then evaluate on the dev split and write the report.
    Train,
    /// Evaluate a checkpoint.
    Eval {
        /// Checkpoint directory; defaults to the newest under the checkpoint dir.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Split to evaluate; defaults to the configured dev split.
        #[arg(long)]
        split: Option<String>,
    },
    /// Render the alignment heatmaps of one example across snapshots.
    Inspect { example_id: String },
}

fn resolve(opts: &Opts) -> Result<RunConfig> {
    let mut cfg = match &opts.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &opts.data_dir {
        cfg.data_dir = v.clone();
    }
    if let Some(v) = &opts.cache_dir {
        cfg.cache_dir = v.clone();
    }
    if let Some(v) = &opts.ckpt_dir {
        cfg.ckpt_dir = v.clone();
    }
    if let Some(v) = &opts.report_dir {
        cfg.report_dir = v.clone();
    }
    if let Some(v) = opts.tau {
        cfg.probe.tau = v;
    }
    if let Some(v) = opts.lambda {
        cfg.fusion.lambda = v;
    }
    if let Some(v) = opts.mu {
        cfg.train.mu = v;
    }
    if let Some(v) = opts.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = opts.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = opts.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = opts.beam {
        cfg.train.beam = v;
    }
    if opts.freeze_encoder {
        cfg.train.freeze_encoder = true;
    }
    for a in &opts.ablate {
        cfg.ablations.set(match a {
            AblateArg::NoProbe => Ablation::NoProbe,
            AblateArg::NoImplicit => Ablation::NoImplicit,
            AblateArg::NoReg => Ablation::NoReg,
            AblateArg::ExactMatch => Ablation::ExactMatch,
            AblateArg::NoLinking => Ablation::NoLinking,
        });
    }
    if let Some(o) = opts.oracle {
        cfg.oracle = Some(match o {
            OracleArg::Columns => OracleMode::Columns,
            OracleArg::Tables => OracleMode::Tables,
            OracleArg::Schema => OracleMode::Schema,
            OracleArg::Full => OracleMode::Full,
        });
    }
    cfg.validate()?;
    Ok(cfg)
}

fn split_exists(cfg: &RunConfig, split: &str) -> bool {
    cfg.data_dir.join(format!("{split}.json")).is_file()
}

fn load(cfg: &RunConfig, split: &str) -> Result<Corpus> {
    load_split(&cfg.data_dir, split).with_context(|| format!("loading split `{split}` from {}", cfg.data_dir.display()))
}

fn cmd_preprocess(cfg: &RunConfig) -> Result<()> {
    for split in [&cfg.train_split, &cfg.dev_split] {
        if split != &cfg.train_split && !split_exists(cfg, split) {
            continue;
        }
        let corpus = load(cfg, split)?;
        let s = preprocess(&corpus, split, &cfg.cache_dir)?;
        println!("{split}: {} records -> {} (sha256 {})", s.records, s.path.display(), s.digest);
    }
    Ok(())
}

fn cmd_probe(cfg: &RunConfig) -> Result<()> {
    let model: ModelF64 = build_model(cfg);
    for split in [&cfg.train_split, &cfg.dev_split] {
        if split != &cfg.train_split && !split_exists(cfg, split) {
            continue;
        }
        let corpus = load(cfg, split)?;
        let (cache, stats) = probe_corpus(&model, &corpus, cfg)?;
        println!(
            "{split}: {} cached, {} probed, {} corrupted -> {}",
            stats.hits,
            stats.probed,
            cache.corrupted.len(),
            cache.path().display()
        );
    }
    Ok(())
}

fn prepared(model: &ModelF64, cfg: &RunConfig, split: &str) -> Result<(Corpus, Vec<schemalink::PreparedF64>)> {
    let corpus = load(cfg, split)?;
    let cache = if cfg.ablations.no_probe {
        None
    } else {
        let (cache, stats) = probe_corpus(model, &corpus, cfg)?;
        if stats.probed > 0 {
            log::info!("probed {} uncached examples of `{split}`", stats.probed);
        }
        Some(cache)
    };
    let preps = prepare(model, &corpus, cache.as_ref(), cfg)?;
    Ok((corpus, preps))
}

fn print_report(report: &Report) {
    println!("exact match {:.4} over {} examples", report.exact_match, report.num_examples);
    let (c, t) = (&report.linking.col, &report.linking.tab);
    println!("columns P {:.4} R {:.4} F {:.4}", c.p, c.r, c.f);
    println!("tables  P {:.4} R {:.4} F {:.4}", t.p, t.r, t.f);
    for (name, f) in &report.components {
        println!("  {name:<20} {f:.4}");
    }
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let mut model: ModelF64 = build_model(cfg);
    let (corpus, mut train_set) = prepared(&model, cfg, &cfg.train_split)?;
    let mut dev_set = if split_exists(cfg, &cfg.dev_split) { prepared(&model, cfg, &cfg.dev_split)?.1 } else { Vec::new() };
    if let Some(mode) = cfg.oracle {
        inject_oracle_linking(&mut train_set, &corpus.schemas, mode)?;
        inject_oracle_linking(&mut dev_set, &corpus.schemas, mode)?;
    }
    let artifacts = TrainArtifacts { ckpt_dir: cfg.ckpt_dir.clone(), report_dir: cfg.report_dir.clone() };
    let outcome = train(&mut model, &train_set, &dev_set, &corpus.schemas, cfg, Some(&artifacts))?;
    if let Some(dir) = &outcome.checkpoint {
        println!("checkpoint {}", dir.display());
    }
    let (eval_set, name) = if dev_set.is_empty() { (train_set, &cfg.train_split) } else { (dev_set, &cfg.dev_split) };
    let out = evaluate(&model, &eval_set, &corpus.schemas, link_mode(cfg), cfg.train.beam, cfg.link_threshold)?;
    let report = Report::new(&out, &cfg.hash());
    let files = emit_report(&report, &outcome.history, &outcome.snapshots, &cfg.report_dir)?;
    println!("evaluated on `{name}`; wrote {} report files to {}", files.len(), cfg.report_dir.display());
    print_report(&report);
    Ok(())
}

fn read_history(path: &Path) -> Result<Vec<EpochMetrics>> {
    if !path.is_file() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

fn cmd_eval(cfg: &RunConfig, checkpoint: Option<PathBuf>, split: Option<String>) -> Result<()> {
    let dir = match checkpoint {
        Some(d) => d,
        None => latest_checkpoint(&cfg.ckpt_dir)?,
    };
    let meta = load_meta(&dir)?;
    let hash = cfg.hash();
    if meta.config_hash != hash {
        log::warn!("checkpoint config hash {} differs from the current config hash {hash}", meta.config_hash);
        eprintln!("warning: checkpoint config hash {} does not match current config {hash}", meta.config_hash);
    }
    let mut model: ModelF64 = build_model(cfg);
    load_params(&dir, &mut model.params)?;
    let split = split.unwrap_or_else(|| cfg.dev_split.clone());
    let (corpus, mut preps) = prepared(&model, cfg, &split)?;
    if let Some(mode) = cfg.oracle {
        inject_oracle_linking(&mut preps, &corpus.schemas, mode)?;
    }
    let out = evaluate(&model, &preps, &corpus.schemas, link_mode(cfg), cfg.train.beam, cfg.link_threshold)?;
    let report = Report::new(&out, &hash);
    let history = read_history(&cfg.report_dir.join("metrics.jsonl"))?;
    let written = if history.is_empty() {
        vec![write_report_json(&report, &cfg.report_dir)?]
    } else {
        emit_report(&report, &history, &[], &cfg.report_dir)?
    };
    let preds = cfg.report_dir.join("predictions.jsonl");
    let lines: Vec<String> = out.predictions.iter().map(serde_json::to_string).collect::<Result<_, _>>()?;
    std::fs::write(&preds, lines.join("\n") + "\n")?;
    println!("checkpoint {} (epoch {}) on `{split}`; wrote {}", dir.display(), meta.epoch, written[0].display());
    print_report(&report);
    Ok(())
}

fn cmd_inspect(cfg: &RunConfig, id: &str) -> Result<()> {
    let mut known = load(cfg, &cfg.train_split)?.example(id).is_ok();
    if !known && split_exists(cfg, &cfg.dev_split) {
        known = load(cfg, &cfg.dev_split)?.example(id).is_ok();
    }
    if !known {
        return Err(schemalink::Error::Lookup(format!("example `{id}`")).into());
    }
    let snaps: Vec<_> =
        read_snapshots(&cfg.report_dir.join("snapshots"))?.into_iter().filter(|s| s.example_id == id).collect();
    if snaps.is_empty() {
        bail!("no alignment snapshots for `{id}`; snapshots cover training examples after `train`");
    }
    let out = cfg.report_dir.join("inspect");
    let files = write_heatmaps(&snaps, &out)?;
    for s in &snaps {
        let m = s.matrix();
        let links: Vec<String> = (0..m.cols())
            .filter_map(|j| {
                let (i, v) = (0..m.rows()).map(|i| (i, m.get(i, j))).fold((0, 0.0), |a, b| if b.1 > a.1 { b } else { a });
                (v > 0.0).then(|| format!("{}->{} {v:.2}", s.tokens[i], s.items[j]))
            })
            .collect();
        println!("epoch {:>3}: {}", s.epoch, links.join(", "));
    }
    println!("wrote {} heatmaps to {}", files.len(), out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = resolve(&cli.opts)?;
    match cli.command {
        Command::Preprocess => cmd_preprocess(&cfg),
        Command::Probe => cmd_probe(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Eval { checkpoint, split } => cmd_eval(&cfg, checkpoint, split),
        Command::Inspect { example_id } => cmd_inspect(&cfg, &example_id),
    }
}
