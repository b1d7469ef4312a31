use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use discorec::datamodel::{load_dataset, save_dataset, DatasetBundle, Split};
use discorec::evaluate::{
    evaluate_model, BucketEdges, BucketTable, EvalOptions, ModelEvaluation, ModelRanker, Popularity, PopularityRanker,
    RankingReport,
};
use discorec::exec::{set_thread_count, Exec};
use discorec::featurize::{build_schemas, encode_episodes, encode_users};
use discorec::objective::{train_prepared, EpochRecord, TrainConfig, TrainingData, Variant};
use discorec::synthgen::generate;
use discorec::tower::{read_checkpoint, save_checkpoint, CheckpointMeta};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{layer_dims, overlay, RunConfig, TrainSection};
use crate::{Cli, Command, EvalArgs, GenDataArgs, ReportArgs, TrainArgs, UsageError};

pub fn run(cli: Cli) -> Result<()> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    overlay(&mut config.threads, cli.threads.map(Some));
    if let Some(n) = config.threads {
        if n == 0 {
            return Err(UsageError("--threads must be at least 1".into()).into());
        }
        set_thread_count(n);
    }
    match cli.command {
        Command::GenData(args) => gen_data(config, args),
        Command::Train(args) => train(config, args),
        Command::Eval(args) => eval(config, args),
        Command::Report(args) => report(args),
    }
}

fn short_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes)[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(mut config: RunConfig, args: GenDataArgs) -> Result<()> {
    let s = &mut config.synth;
    overlay(&mut s.seed, args.seed);
    overlay(&mut s.users, args.users);
    overlay(&mut s.shows, args.shows);
    overlay(&mut s.topics, args.topics);
    overlay(&mut s.density, args.density);
    overlay(&mut s.sharpness, args.sharpness);
    overlay(&mut s.kg_signal_strength, args.kg_signal);
    overlay(&mut s.content_signal_strength, args.content_signal);
    overlay(&mut s.noise, args.noise);

    let bundle = generate(&config.synth)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    save_dataset(&bundle, &args.out)?;
    let hash = short_hash(&serde_json::to_vec(&config.synth)?);
    let stats = DatasetStats::of(&bundle, hash, config.synth.seed);
    write(
        &args.out.join("stats.json"),
        serde_json::to_string_pretty(&stats)? + "\n",
    )?;
    print!("{}", stats.to_table());
    Ok(())
}

#[derive(Debug, Serialize)]
struct SplitStats {
    users: usize,
    interactions: usize,
}

#[derive(Debug, Serialize)]
struct DatasetStats {
    config_hash: String,
    seed: u64,
    users: usize,
    shows: usize,
    episodes: usize,
    interactions: usize,
    density: f64,
    splits: BTreeMap<String, SplitStats>,
}

impl DatasetStats {
    fn of(bundle: &DatasetBundle, config_hash: String, seed: u64) -> Self {
        let splits = [Split::Train, Split::Valid, Split::Test]
            .into_iter()
            .map(|s| {
                let users = bundle.users_in(s);
                let interactions = users.iter().map(|&u| bundle.positives_of(u).len()).sum();
                (
                    s.to_string(),
                    SplitStats {
                        users: users.len(),
                        interactions,
                    },
                )
            })
            .collect();
        let interactions = bundle.positive_pairs().len();
        let (u, e) = (bundle.users().len(), bundle.episodes().len());
        DatasetStats {
            config_hash,
            seed,
            users: u,
            shows: bundle.shows().len(),
            episodes: e,
            interactions,
            density: interactions as f64 / (u * e).max(1) as f64,
            splits,
        }
    }

    fn to_table(&self) -> String {
        let mut out = format!(
            "users {}  shows {}  episodes {}  interactions {}  density {:.5}\n",
            self.users, self.shows, self.episodes, self.interactions, self.density
        );
        for (name, s) in &self.splits {
            out += &format!(
                "  {name:<5}  users {:>6}  episodes {:>6}  interactions {:>7}\n",
                s.users, self.episodes, s.interactions
            );
        }
        out += &format!("config {}  seed {}\n", self.config_hash, self.seed);
        out
    }
}

fn apply_train_flags(section: &mut TrainSection, args: &TrainArgs) {
    overlay(&mut section.variant, args.variant);
    overlay(&mut section.lambda, args.lambda);
    overlay(&mut section.temperature, args.temperature);
    section.symmetric |= args.symmetric;
    overlay(&mut section.layers, args.layers.clone());
    overlay(&mut section.dropout, args.dropout.clone());
    overlay(&mut section.dropout_mode, args.dropout_mode);
    overlay(&mut section.embedding_dim, args.embedding_dim);
    section.linear_head |= args.linear_head;
    overlay(&mut section.epochs, args.epochs);
    overlay(&mut section.batch_size, args.batch_size);
    overlay(&mut section.learning_rate, args.lr);
    overlay(&mut section.k_negatives, args.k_negatives);
    section.in_batch_negatives |= args.in_batch_negatives;
    overlay(&mut section.neighbor_k, args.neighbor_k);
    overlay(&mut section.neighbor_mode, args.neighbor_mode);
    overlay(&mut section.seed, args.seed);
    if args.no_masking {
        section.masking = false;
    }
}

/// The concrete training configuration of one grid cell.
fn cell_config(s: &TrainSection, layers: usize, dropout: f64) -> TrainConfig {
    let mut c = TrainConfig {
        hidden_dims: layer_dims(layers, s.embedding_dim),
        linear_head: s.linear_head,
        k_negatives: s.k_negatives,
        in_batch_negatives: s.in_batch_negatives,
        distinct_anchors: s.distinct_anchors,
        batch_size: s.batch_size,
        epochs: s.epochs,
        dropout_p: dropout,
        dropout_mode: s.dropout_mode,
        neighbor_k: s.neighbor_k,
        neighbor_mode: s.neighbor_mode,
        masking: s.masking,
        seed: s.seed,
        ..TrainConfig::default()
    };
    c.objective.temperature = s.temperature;
    c.objective.symmetric = s.symmetric;
    c.adam.learning_rate = s.learning_rate;
    c.schema.normalize_multi_hot = s.normalize_multi_hot;
    c.apply_variant(s.variant, s.lambda);
    c.exec = Exec::Parallel;
    c
}

#[derive(Debug, Serialize, Deserialize)]
struct GridCell {
    layers: usize,
    dropout: f64,
    config_hash: String,
    best_epoch: usize,
    val_ndcg_20: Option<f64>,
}

#[derive(Debug, Serialize)]
struct LogLine<'a> {
    layers: usize,
    dropout: f64,
    seed: u64,
    #[serde(flatten)]
    record: &'a EpochRecord,
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    variant: Variant,
    config_hash: String,
    seed: u64,
    best: usize,
    cells: Vec<GridCell>,
}

fn train(mut config: RunConfig, args: TrainArgs) -> Result<()> {
    apply_train_flags(&mut config.train, &args);
    let section = &config.train;
    if section.layers.is_empty() || section.dropout.is_empty() {
        return Err(UsageError("--layers and --dropout need at least one value".into()).into());
    }
    let bundle = load_dataset(&args.data).with_context(|| format!("loading dataset {}", args.data.display()))?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    // Plain TT ignores dropout, so its grid collapses to one cell per depth.
    let dropouts: Vec<f64> = if section.variant == Variant::Tt {
        vec![0.0]
    } else {
        section.dropout.clone()
    };
    let mut cells = Vec::new();
    let mut log = String::new();
    let mut best: Option<(usize, f64, discorec::objective::TrainOutcome, TrainConfig)> = None;
    let mut data: Option<TrainingData> = None;

    for &layers in &section.layers {
        for &p in &dropouts {
            let cfg = cell_config(section, layers, p);
            // Features and neighbor caches do not depend on depth or dropout.
            if data.is_none() {
                data = Some(TrainingData::prepare(&bundle, &cfg)?);
            }
            let prepared = data.as_ref().expect("prepared above");
            let outcome = train_prepared(&bundle, prepared, &cfg)?;
            let val = outcome
                .log
                .get(outcome.best_epoch)
                .and_then(|r| r.val)
                .map(|m| m.ndcg_20);
            for r in &outcome.log {
                log += &serde_json::to_string(&LogLine {
                    layers,
                    dropout: p,
                    seed: cfg.seed,
                    record: r,
                })?;
                log.push('\n');
            }
            eprintln!(
                "{} layers={layers} dropout={p}: best epoch {} val NDCG@20 {}",
                cfg.label,
                outcome.best_epoch,
                val.map_or("n/a".to_string(), |v| format!("{v:.4}"))
            );
            let score = val.unwrap_or(f64::NEG_INFINITY);
            cells.push(GridCell {
                layers,
                dropout: p,
                config_hash: outcome.config_hash.clone(),
                best_epoch: outcome.best_epoch,
                val_ndcg_20: val,
            });
            if best.as_ref().is_none_or(|b| score > b.1) {
                best = Some((cells.len() - 1, score, outcome, cfg));
            }
        }
    }

    let (best_idx, _, outcome, cfg) = best.expect("grid has at least one cell");
    let meta = CheckpointMeta {
        label: cfg.label.clone(),
        config_hash: outcome.config_hash.clone(),
        seed: cfg.seed,
        epoch: outcome.best_epoch,
        schema: cfg.schema,
    };
    save_checkpoint(
        args.out.join("checkpoint.bin"),
        &outcome.params,
        Some(&outcome.optimizer),
        &outcome.user_schema,
        &outcome.episode_schema,
        meta,
    )?;
    write(&args.out.join("train_log.jsonl"), log)?;
    write(
        &args.out.join("config.json"),
        serde_json::to_string_pretty(&cfg)? + "\n",
    )?;
    let summary = TrainSummary {
        variant: section.variant,
        config_hash: outcome.config_hash.clone(),
        seed: cfg.seed,
        best: best_idx,
        cells,
    };
    write(
        &args.out.join("grid.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    let b = &summary.cells[best_idx];
    println!(
        "best {} layers={} dropout={} epoch {} val NDCG@20 {}  config {}  seed {}",
        cfg.label,
        b.layers,
        b.dropout,
        b.best_epoch,
        b.val_ndcg_20.map_or("n/a".to_string(), |v| format!("{v:.4}")),
        summary.config_hash,
        summary.seed
    );
    Ok(())
}

/// Position of a model label in the comparison table: baselines first, then
/// plain two-tower, then the augmented variants.
fn display_rank(label: &str) -> usize {
    Popularity::ALL
        .iter()
        .map(|p| p.label().to_string())
        .chain(Variant::ALL.iter().map(|v| v.label().to_string()))
        .position(|l| label.starts_with(&l) && label[l.len()..].chars().next().is_none_or(|c| c == ' '))
        .unwrap_or(usize::MAX)
}

fn unique_label(label: &str, taken: &[String]) -> String {
    if !taken.iter().any(|t| t == label) {
        return label.to_string();
    }
    (2..)
        .map(|i| format!("{label} #{i}"))
        .find(|l| !taken.contains(l))
        .expect("unbounded")
}

fn evaluate_checkpoint(
    bundle: &DatasetBundle,
    path: &Path,
    name: String,
    split: Split,
    opts: EvalOptions,
) -> Result<(ModelEvaluation, CheckpointMeta)> {
    let ckpt = read_checkpoint(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let (user_schema, episode_schema) = build_schemas(bundle, ckpt.meta.schema)?;
    ckpt.check_schemas(&user_schema, &episode_schema)
        .with_context(|| format!("checkpoint {} does not match this dataset", path.display()))?;
    let users = encode_users(&user_schema, bundle, opts.exec)?;
    let episodes = encode_episodes(&episode_schema, bundle, opts.exec)?;
    let ranker = ModelRanker::new(name, &ckpt.params, &users, &episodes, opts.exec)?;
    Ok((evaluate_model(&ranker, bundle, split, opts)?, ckpt.meta))
}

#[derive(Debug, Serialize)]
struct EvalIdentity<'a> {
    split: Split,
    masking: bool,
    baselines: &'a [Popularity],
    checkpoints: Vec<(&'a str, &'a str, u64)>,
}

fn eval(mut config: RunConfig, args: EvalArgs) -> Result<()> {
    let section = &mut config.eval;
    overlay(&mut section.baselines, args.baselines.clone());
    overlay(&mut section.split, args.split);
    if args.no_masking {
        section.masking = false;
    }
    if args.checkpoints.is_empty() && section.baselines.is_empty() {
        return Err(UsageError("nothing to evaluate: pass --checkpoint or --baselines".into()).into());
    }
    let bundle = load_dataset(&args.data).with_context(|| format!("loading dataset {}", args.data.display()))?;
    let opts = EvalOptions {
        masking: section.masking,
        exec: Exec::Parallel,
    };

    let mut evals = Vec::new();
    let mut metas = Vec::new();
    for &kind in &section.baselines {
        evals.push(evaluate_model(
            &PopularityRanker::new(&bundle, kind),
            &bundle,
            section.split,
            opts,
        )?);
    }
    for path in &args.checkpoints {
        let taken: Vec<String> = evals.iter().map(|e| e.model.clone()).collect();
        let label = read_checkpoint(path)
            .with_context(|| format!("reading checkpoint {}", path.display()))?
            .meta
            .label;
        let (ev, meta) = evaluate_checkpoint(&bundle, path, unique_label(&label, &taken), section.split, opts)?;
        evals.push(ev);
        metas.push(meta);
    }
    evals.sort_by_key(|e| display_rank(&e.model));

    let identity = EvalIdentity {
        split: section.split,
        masking: section.masking,
        baselines: &section.baselines,
        checkpoints: metas
            .iter()
            .map(|m| (m.label.as_str(), m.config_hash.as_str(), m.seed))
            .collect(),
    };
    let hash = short_hash(&serde_json::to_vec(&identity)?);
    let seed = metas.first().map_or(0, |m| m.seed);
    let report =
        RankingReport::from_evaluations(&bundle, &evals, &BucketEdges::default(), hash, seed, section.masking)?;

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_report_files(&args.out, &report)?;
    print!("{}", report.to_table());
    Ok(())
}

fn stamp(report_hash: &str, seed: u64) -> String {
    format!("config {report_hash}  seed {seed}\n")
}

fn write_report_files(dir: &Path, report: &RankingReport) -> Result<()> {
    write(&dir.join("report.json"), serde_json::to_string_pretty(report)? + "\n")?;
    write(
        &dir.join("report.txt"),
        format!(
            "split {}  users {}\n{}{}",
            report.split,
            report.users,
            report.to_table(),
            stamp(&report.config_hash, report.seed)
        ),
    )?;
    write(
        &dir.join("buckets.csv"),
        csv_with_stamp(&report.buckets, &report.config_hash, report.seed),
    )?;
    Ok(())
}

/// Bucket CSV with the provenance columns appended to every row.
fn csv_with_stamp(table: &BucketTable, hash: &str, seed: u64) -> String {
    let mut out = String::from("model,bucket,interactions,ndcg_20,config_hash,seed\n");
    for r in &table.rows {
        out += &format!(
            "{},{},{},{:.6},{hash},{seed}\n",
            r.model, r.bucket, r.interactions, r.ndcg_20
        );
    }
    out
}

fn report(args: ReportArgs) -> Result<()> {
    let mut reports = Vec::new();
    for path in &args.reports {
        let text = fs::read_to_string(path).with_context(|| format!("reading report {}", path.display()))?;
        let r: RankingReport =
            serde_json::from_str(&text).with_context(|| format!("parsing report {}", path.display()))?;
        reports.push((path.clone(), r));
    }
    let first = &reports[0].1;
    if let Some((p, _)) = reports
        .iter()
        .find(|(_, r)| r.split != first.split || r.masking != first.masking)
    {
        bail!(
            "report {} was evaluated on a different split or masking setting",
            p.display()
        );
    }

    let mut merged = first.clone();
    merged.rows.clear();
    merged.buckets.rows.clear();
    for (_, r) in &reports {
        for row in &r.rows {
            if merged.row(&row.model).is_none() {
                merged.rows.push(row.clone());
            }
        }
        for b in &r.buckets.rows {
            if merged.buckets.get(&b.model, &b.bucket).is_none() {
                merged.buckets.rows.push(b.clone());
            }
        }
    }
    merged.rows.sort_by_key(|r| display_rank(&r.model));
    merged.buckets.rows.sort_by_key(|b| {
        (
            display_rank(&b.model),
            merged.buckets.buckets.iter().position(|l| l == &b.bucket),
        )
    });
    let sources: Vec<&str> = reports.iter().map(|(_, r)| r.config_hash.as_str()).collect();
    merged.config_hash = short_hash(sources.join(",").as_bytes());

    let table = format!(
        "split {}  users {}\n{}{}",
        merged.split,
        merged.users,
        merged.to_table(),
        stamp(&merged.config_hash, merged.seed)
    );
    match args.out {
        Some(dir) => {
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            write(&dir.join("comparison.txt"), &table)?;
            write(
                &dir.join("buckets.csv"),
                csv_with_stamp(&merged.buckets, &merged.config_hash, merged.seed),
            )?;
            write(&dir.join("report.json"), serde_json::to_string_pretty(&merged)? + "\n")?;
            print!("{table}");
        }
        None => print!("{table}"),
    }
    Ok(())
}
