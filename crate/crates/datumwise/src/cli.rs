//! Command-line operator surface: corpus preparation, training,
//! evaluation, diagnostics, and the toy corruptor.
//!
//! Every command is deterministic given its inputs, flags, and seed.
//! Exit codes: 0 ok, 1 usage error, 2 data error, 3 training abort.
//! When `--out` is omitted, the `DATUMWISE_OUT` environment variable
//! supplies the output root.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::Digest;

use crate::error::{Error, Result};
use crate::ingest::{
    build_fold_plans, build_rows, load_corpus, read_csv, serialize_row, toy_corruptor,
    CorruptMode, FoldPlan, RowRecord,
};
use crate::metrics::{accuracy, roc_auc, MetricsReport};
use crate::model::{
    load_model, save_model, score_rows, ModelConfig, ModelKind, ParamStore,
};
use crate::tokenizer::{build_vocab, encode_row, CharVocab, EncodeStats};
use crate::train::{run_cross_validation, LambdaSchedule, TrainConfig};

#[derive(Parser)]
#[command(
    name = "datumwise",
    version,
    about = "Datum-wise transformer detector for synthetic tabular rows"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize a labeled row corpus, vocabulary, and fold plans
    /// from a corpus manifest.
    Prepare(PrepareArgs),
    /// Run 3-fold cross-table cross-validation; write models, epoch
    /// logs, and the metrics report.
    Train(TrainArgs),
    /// Score rows with a saved model; report metrics when labels are
    /// known.
    Eval(EvalArgs),
    /// Print diagnostics for a model file or a serialized row.
    Inspect(InspectArgs),
    /// Write a corrupted (synthetic) copy of a real CSV for toy
    /// experiments.
    Corrupt(CorruptArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Corpus manifest: JSON {"tables":[{"name","real","synthetic":[..]}]}.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory (default: $DATUMWISE_OUT/prepared).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Rows sampled per table: half real, half synthetic.
    #[arg(long, default_value_t = 200)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Minimum occurrence count for a character to enter the vocabulary.
    #[arg(long, default_value_t = 1)]
    min_count: usize,
    /// Overwrite an existing prepared directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory written by `prepare`.
    #[arg(long)]
    prepared: PathBuf,
    /// Run directory (default: $DATUMWISE_OUT/run).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Architecture: datum-wise or flat-text.
    #[arg(long)]
    model: String,
    /// Domain-adversarial training: on or off.
    #[arg(long, default_value = "off", value_parser = ["on", "off"])]
    da: String,
    /// Gradient-reversal strength ramp: cosine, dann, or zero.
    #[arg(long, default_value = "cosine")]
    lambda_schedule: String,
    #[arg(long, default_value_t = 1e-5)]
    lr: f64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    /// Epochs without validation-AUC improvement before stopping.
    #[arg(long, default_value_t = 3)]
    patience: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    datum_layers: Option<usize>,
    #[arg(long)]
    row_layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    max_datum_len: Option<usize>,
    #[arg(long)]
    max_datums: Option<usize>,
    #[arg(long)]
    max_row_chars: Option<usize>,
    /// Overwrite an existing run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Saved model file.
    #[arg(long)]
    model: PathBuf,
    /// Real-rows CSV (labeled mode; requires --synthetic).
    #[arg(long)]
    real: Option<PathBuf>,
    /// Synthetic-rows CSV (labeled mode; requires --real).
    #[arg(long)]
    synthetic: Option<PathBuf>,
    /// Unlabeled CSV: emit scores only.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Prepared directory (labeled mode; requires --table).
    #[arg(long)]
    prepared: Option<PathBuf>,
    /// Table name inside --prepared to evaluate.
    #[arg(long)]
    table: Option<String>,
    /// Write per-row scores as CSV (row_index,score,label).
    #[arg(long)]
    scores_out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    /// Model file to describe.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Row serialized as column:value pairs joined by '|',
    /// e.g. "age:39|job:clerk".
    #[arg(long)]
    row: Option<String>,
}

#[derive(Args)]
struct CorruptArgs {
    /// Real CSV to corrupt.
    #[arg(long)]
    input: PathBuf,
    /// Where to write the corrupted copy.
    #[arg(long)]
    output: PathBuf,
    /// marginal-shuffle or gaussian-jitter.
    #[arg(long)]
    mode: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Binary entry point; returns the process exit code.
pub fn main_entry() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run_from(std::env::args_os()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            e.exit_code()
        }
    }
}

/// Parses and runs one invocation; usable in-process from tests.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e)
            if e.kind() == clap::error::ErrorKind::DisplayHelp
                || e.kind() == clap::error::ErrorKind::DisplayVersion =>
        {
            print!("{}", e);
            return Ok(());
        }
        Err(e) => return Err(Error::usage(e.to_string())),
    };
    match cli.command {
        Command::Prepare(args) => cmd_prepare(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Inspect(args) => cmd_inspect(args),
        Command::Corrupt(args) => cmd_corrupt(args),
    }
}

fn resolve_out(out: Option<PathBuf>, leaf: &str) -> Result<PathBuf> {
    match out {
        Some(p) => Ok(p),
        None => match std::env::var_os("DATUMWISE_OUT") {
            Some(root) => Ok(PathBuf::from(root).join(leaf)),
            None => Err(Error::usage(
                "--out not given and DATUMWISE_OUT is not set",
            )),
        },
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    sha2::Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{:02x}", b))
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.to_path_buf(), e))
}

/// Contents of prepared.json: everything needed to rebuild or audit
/// the prepared corpus.
#[derive(Debug, Serialize, Deserialize)]
pub struct PreparedManifest {
    pub seed: u64,
    pub budget: usize,
    pub min_count: usize,
    pub manifest_sha256: String,
    pub tables: Vec<String>,
    pub fold_plans: Vec<FoldPlan>,
    pub vocab_sha256: String,
    pub row_count: usize,
}

/// A prepared directory loaded back into memory.
pub struct Prepared {
    pub manifest: PreparedManifest,
    pub rows: Vec<RowRecord>,
    pub vocab: CharVocab,
    pub prepared_json: Vec<u8>,
}

pub fn load_prepared(dir: &Path) -> Result<Prepared> {
    let pj = dir.join("prepared.json");
    let prepared_json = std::fs::read(&pj).map_err(|e| Error::io(pj.clone(), e))?;
    let manifest: PreparedManifest = serde_json::from_slice(&prepared_json)
        .map_err(|e| Error::data(format!("{}: {}", pj.display(), e)))?;
    let vocab = CharVocab::load(&dir.join("vocab.tsv"))?;
    if vocab.sha256_hex() != manifest.vocab_sha256 {
        return Err(Error::data(format!(
            "{}: vocab.tsv does not match the recorded checksum",
            dir.display()
        )));
    }
    let rp = dir.join("rows.jsonl");
    let text = std::fs::read_to_string(&rp).map_err(|e| Error::io(rp.clone(), e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let row: RowRecord = serde_json::from_str(line)
            .map_err(|e| Error::data(format!("{} line {}: {}", rp.display(), i + 1, e)))?;
        rows.push(row);
    }
    if rows.len() != manifest.row_count {
        return Err(Error::data(format!(
            "{}: rows.jsonl has {} rows but prepared.json records {}",
            dir.display(),
            rows.len(),
            manifest.row_count
        )));
    }
    Ok(Prepared {
        manifest,
        rows,
        vocab,
        prepared_json,
    })
}

fn cmd_prepare(args: PrepareArgs) -> Result<()> {
    let out = resolve_out(args.out, "prepared")?;
    let marker = out.join("prepared.json");
    if marker.exists() && !args.force {
        return Err(Error::usage(format!(
            "{} already exists; pass --force to overwrite",
            marker.display()
        )));
    }
    let manifest_bytes =
        std::fs::read(&args.manifest).map_err(|e| Error::io(args.manifest.clone(), e))?;
    let sources = load_corpus(&args.manifest)?;
    let rows = build_rows(&sources, args.budget, args.seed)?;
    let table_names: Vec<String> = sources.iter().map(|s| s.table_name.clone()).collect();
    let fold_plans = build_fold_plans(&table_names, args.seed)?;
    let vocab = build_vocab(&rows, args.min_count)?;

    std::fs::create_dir_all(&out).map_err(|e| Error::io(out.clone(), e))?;
    vocab.save(&out.join("vocab.tsv"))?;
    let mut rows_text = String::new();
    for r in &rows {
        rows_text.push_str(
            &serde_json::to_string(r)
                .map_err(|e| Error::data(format!("cannot encode row: {}", e)))?,
        );
        rows_text.push('\n');
    }
    write_text(&out.join("rows.jsonl"), &rows_text)?;

    let prepared = PreparedManifest {
        seed: args.seed,
        budget: args.budget,
        min_count: args.min_count,
        manifest_sha256: sha256_hex(&manifest_bytes),
        tables: table_names,
        fold_plans,
        vocab_sha256: vocab.sha256_hex(),
        row_count: rows.len(),
    };
    let mut pj_text = serde_json::to_string_pretty(&prepared)
        .map_err(|e| Error::data(format!("cannot encode prepared manifest: {}", e)))?;
    pj_text.push('\n');
    write_text(&marker, &pj_text)?;

    for name in &prepared.tables {
        let real = rows
            .iter()
            .filter(|r| &r.domain == name && r.label == 0)
            .count();
        let syn = rows
            .iter()
            .filter(|r| &r.domain == name && r.label == 1)
            .count();
        println!("{}: {} rows ({} real, {} synthetic)", name, real + syn, real, syn);
    }
    println!(
        "prepared {} rows, vocabulary of {} tokens, {} fold plans -> {}",
        rows.len(),
        vocab.size(),
        prepared.fold_plans.len(),
        out.display()
    );
    Ok(())
}

/// Contents of run_manifest.json: the full recipe of a training run.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub model: ModelKind,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub prepared_dir: String,
    pub prepared_sha256: String,
    pub vocab_sha256: String,
    pub fold_plans: Vec<FoldPlan>,
}

/// Contents of report.json: metrics plus the settings that shape them.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub model: ModelKind,
    pub domain_adaptation: bool,
    pub lambda_schedule: LambdaSchedule,
    pub metrics: MetricsReport,
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let out = resolve_out(args.out, "run")?;
    let marker = out.join("run_manifest.json");
    if marker.exists() && !args.force {
        return Err(Error::usage(format!(
            "{} already exists; pass --force to overwrite",
            marker.display()
        )));
    }
    let prepared = load_prepared(&args.prepared)?;
    let kind: ModelKind = args.model.parse()?;
    let da = args.da == "on";
    let schedule: LambdaSchedule = args.lambda_schedule.parse()?;

    let mut mcfg = ModelConfig::with_vocab(prepared.vocab.size());
    if let Some(v) = args.d_model {
        mcfg.d_model = v;
    }
    if let Some(v) = args.datum_layers {
        mcfg.datum_layers = v;
    }
    if let Some(v) = args.row_layers {
        mcfg.row_layers = v;
    }
    if let Some(v) = args.heads {
        mcfg.heads = v;
    }
    if let Some(v) = args.ffn_dim {
        mcfg.ffn_dim = v;
    }
    if let Some(v) = args.dropout {
        mcfg.dropout = v;
    }
    if let Some(v) = args.max_datum_len {
        mcfg.max_datum_len = v;
    }
    if let Some(v) = args.max_datums {
        mcfg.max_datums = v;
    }
    if let Some(v) = args.max_row_chars {
        mcfg.max_row_chars = v;
    }
    mcfg.validate()?;
    let tcfg = TrainConfig {
        learning_rate: args.lr,
        max_epochs: args.epochs,
        patience: args.patience,
        batch_size: args.batch_size,
        lambda_schedule: schedule,
        seed: args.seed,
        domain_adaptation: da,
    };
    tcfg.validate()?;

    log::info!(
        "training {} on {} rows across {} tables ({} folds)",
        kind,
        prepared.rows.len(),
        prepared.manifest.tables.len(),
        prepared.manifest.fold_plans.len()
    );
    let outcome = run_cross_validation(
        kind,
        &prepared.rows,
        &prepared.vocab,
        &prepared.manifest.fold_plans,
        &mcfg,
        &tcfg,
    )?;

    std::fs::create_dir_all(&out).map_err(|e| Error::io(out.clone(), e))?;
    for fold in &outcome.folds {
        let fdir = out.join(format!("fold{}", fold.fold_index));
        std::fs::create_dir_all(&fdir).map_err(|e| Error::io(fdir.clone(), e))?;
        save_model(
            &fdir.join("model.bin"),
            kind,
            &fold.config,
            &prepared.vocab,
            &fold.params,
        )?;
        let mut log_text = String::new();
        for e in &fold.epochs {
            log_text.push_str(
                &serde_json::to_string(e)
                    .map_err(|err| Error::data(format!("cannot encode epoch log: {}", err)))?,
            );
            log_text.push('\n');
        }
        write_text(&fdir.join("epochs.jsonl"), &log_text)?;
    }

    write_text(&out.join("report.csv"), &outcome.report.to_csv_string())?;
    let report = RunReport {
        model: kind,
        domain_adaptation: da,
        lambda_schedule: schedule,
        metrics: outcome.report,
    };
    let mut report_text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::data(format!("cannot encode report: {}", e)))?;
    report_text.push('\n');
    write_text(&out.join("report.json"), &report_text)?;

    let manifest = RunManifest {
        model: kind,
        model_config: mcfg,
        train_config: tcfg,
        prepared_dir: args.prepared.display().to_string(),
        prepared_sha256: sha256_hex(&prepared.prepared_json),
        vocab_sha256: prepared.vocab.sha256_hex(),
        fold_plans: prepared.manifest.fold_plans,
    };
    let mut manifest_text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::data(format!("cannot encode run manifest: {}", e)))?;
    manifest_text.push('\n');
    write_text(&marker, &manifest_text)?;

    for f in &report.metrics.per_fold {
        println!(
            "fold {}: test auc {:.4}, accuracy {:.4} ({} rows)",
            f.fold_index, f.auc, f.accuracy, f.n_rows
        );
    }
    let agg = &report.metrics.aggregate;
    match (agg.auc_std, agg.acc_std) {
        (Some(astd), Some(cstd)) => println!(
            "aggregate: auc {:.4} +/- {:.4}, accuracy {:.4} +/- {:.4}",
            agg.auc_mean, astd, agg.acc_mean, cstd
        ),
        _ => println!(
            "aggregate: auc {:.4}, accuracy {:.4}",
            agg.auc_mean, agg.acc_mean
        ),
    }
    println!("run written to {}", out.display());
    Ok(())
}

/// Reads a real/synthetic CSV pair into labeled rows: all real rows
/// first (label 0), then synthetic (label 1), synthetic cells reordered
/// to the real header's column order.
fn rows_from_pair(real: &Path, synthetic: &Path) -> Result<Vec<RowRecord>> {
    let (rheaders, rcells) = read_csv(real)?;
    let (sheaders, scells) = read_csv(synthetic)?;
    let rset: BTreeSet<&String> = rheaders.iter().collect();
    let sset: BTreeSet<&String> = sheaders.iter().collect();
    if rset != sset {
        let missing: Vec<&&String> = rset.difference(&sset).collect();
        let extra: Vec<&&String> = sset.difference(&rset).collect();
        return Err(Error::data(format!(
            "column mismatch between {} and {}: missing {:?}, extra {:?}",
            real.display(),
            synthetic.display(),
            missing,
            extra
        )));
    }
    let order: Vec<usize> = rheaders
        .iter()
        .map(|h| sheaders.iter().position(|s| s == h).unwrap())
        .collect();
    let domain = real
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "table".to_string());
    let mut rows = Vec::new();
    for cells in &rcells {
        rows.push(RowRecord {
            domain: domain.clone(),
            domain_id: -1,
            datums: serialize_row(&rheaders, cells)?,
            label: 0,
        });
    }
    for cells in &scells {
        let reordered: Vec<String> = order.iter().map(|&i| cells[i].clone()).collect();
        rows.push(RowRecord {
            domain: domain.clone(),
            domain_id: -1,
            datums: serialize_row(&rheaders, &reordered)?,
            label: 1,
        });
    }
    Ok(rows)
}

fn scores_csv(scores: &[f64], labels: Option<&[u8]>) -> String {
    let mut out = String::from("row_index,score,label\n");
    for (i, s) in scores.iter().enumerate() {
        let label = labels.map_or(String::new(), |l| l[i].to_string());
        out.push_str(&format!("{},{},{}\n", i, s, label));
    }
    out
}

#[derive(Serialize)]
struct EvalReport {
    source: String,
    n_rows: usize,
    auc: f64,
    accuracy: f64,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    // Validate the flag combination before touching any file so a bad
    // invocation is a usage error, not a data error.
    match (&args.real, &args.synthetic, &args.input, &args.prepared, &args.table) {
        (Some(_), Some(_), None, None, None)
        | (None, None, Some(_), None, None)
        | (None, None, None, Some(_), Some(_)) => {}
        _ => {
            return Err(Error::usage(
                "eval needs exactly one input mode: --real with --synthetic, \
                 --input, or --prepared with --table",
            ))
        }
    }
    let model = load_model(&args.model)?;
    let (rows, labeled, source): (Vec<RowRecord>, bool, String) = match (
        &args.real,
        &args.synthetic,
        &args.input,
        &args.prepared,
        &args.table,
    ) {
        (Some(r), Some(s), None, None, None) => {
            let rows = rows_from_pair(r, s)?;
            let source = format!("{} vs {}", r.display(), s.display());
            (rows, true, source)
        }
        (None, None, Some(input), None, None) => {
            let (headers, cells) = read_csv(input)?;
            let domain = input
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "table".to_string());
            let rows = cells
                .iter()
                .map(|c| {
                    Ok(RowRecord {
                        domain: domain.clone(),
                        domain_id: -1,
                        datums: serialize_row(&headers, c)?,
                        label: 0,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            (rows, false, input.display().to_string())
        }
        (None, None, None, Some(dir), Some(table)) => {
            let prepared = load_prepared(dir)?;
            if prepared.vocab.sha256_hex() != model.vocab.sha256_hex() {
                log::warn!(
                    "prepared vocabulary differs from the model's; scoring uses the \
                     model vocabulary (unknown characters fall back to UNK)"
                );
            }
            let rows: Vec<RowRecord> = prepared
                .rows
                .into_iter()
                .filter(|r| &r.domain == table)
                .collect();
            if rows.is_empty() {
                return Err(Error::data(format!(
                    "table {} has no rows in {}",
                    table,
                    dir.display()
                )));
            }
            (rows, true, format!("{}:{}", dir.display(), table))
        }
        _ => unreachable!("mode combination validated above"),
    };

    let mut stats = EncodeStats::default();
    let scores = score_rows(
        model.kind,
        &model.params,
        &model.config,
        &model.vocab,
        &rows,
        &mut stats,
    )?;
    if stats.datums_truncated + stats.datums_dropped + stats.rows_flat_truncated > 0 {
        log::warn!(
            "encoding truncations: {} datums cut, {} datums dropped, {} flat rows cut",
            stats.datums_truncated,
            stats.datums_dropped,
            stats.rows_flat_truncated
        );
    }

    let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
    if let Some(path) = &args.scores_out {
        write_text(path, &scores_csv(&scores, labeled.then_some(&labels[..])))?;
    }
    if labeled {
        let report = EvalReport {
            source,
            n_rows: rows.len(),
            auc: roc_auc(&scores, &labels)?,
            accuracy: accuracy(&scores, &labels, 0.5)?,
        };
        println!(
            "{}",
            serde_json::to_string_pretty(&report)
                .map_err(|e| Error::data(format!("cannot encode eval report: {}", e)))?
        );
    } else if args.scores_out.is_none() {
        print!("{}", scores_csv(&scores, None));
    }
    Ok(())
}

/// Parses "col:value|col:value" into a row (first ':' splits each pair).
fn parse_row_arg(text: &str) -> Result<RowRecord> {
    let mut datums = Vec::new();
    for part in text.split('|') {
        let (column, value) = part.split_once(':').ok_or_else(|| {
            Error::usage(format!("datum {:?} has no ':' separator", part))
        })?;
        if column.is_empty() {
            return Err(Error::usage(format!("datum {:?} has an empty column", part)));
        }
        datums.push(crate::ingest::Datum {
            column: column.to_string(),
            value: value.to_string(),
        });
    }
    if datums.is_empty() {
        return Err(Error::usage("row has no datums"));
    }
    Ok(RowRecord {
        domain: "inspect".to_string(),
        domain_id: -1,
        datums,
        label: 0,
    })
}

fn inspect_model(path: &Path) -> Result<(ModelKind, ModelConfig, CharVocab, ParamStore)> {
    let m = load_model(path)?;
    println!("kind: {}", m.kind);
    println!("vocab size: {}", m.vocab.size());
    let c = &m.config;
    println!(
        "config: d_model {}, datum_layers {}, row_layers {}, heads {}, ffn_dim {}, dropout {}",
        c.d_model, c.datum_layers, c.row_layers, c.heads, c.ffn_dim, c.dropout
    );
    println!(
        "limits: max_datum_len {}, max_datums {}, max_row_chars {}, num_domains {}",
        c.max_datum_len, c.max_datums, c.max_row_chars, c.num_domains
    );
    let trainable: usize = m
        .params
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(_, e)| e.value.len())
        .sum();
    println!(
        "parameters: {} scalars in {} tensors ({} trainable)",
        m.params.num_scalars(),
        m.params.len(),
        trainable
    );
    Ok((m.kind, m.config, m.vocab, m.params))
}

fn inspect_row(row: &RowRecord, vocab: &CharVocab, cfg: &ModelConfig) -> Result<()> {
    let mut stats = EncodeStats::default();
    let pre = crate::tokenizer::encode_row_precursor(
        row,
        vocab,
        cfg.max_datum_len,
        cfg.max_datums,
        &mut stats,
    );
    let grid = encode_row(
        row,
        vocab,
        cfg.max_datum_len,
        pre.datums.len(),
        pre.max_datum_len(),
        &mut stats,
    )?;
    println!("datums: {}", grid.datum_mask.len());
    for (i, d) in row.datums.iter().enumerate().take(grid.datum_mask.len()) {
        println!("  datum {}: {}", i, d.serialized());
    }
    println!(
        "token grid {} x {} (0 = PAD, 1 = UNK, 2 = CLS_DATUM, 3 = CLS_TARGET):",
        grid.token_ids.shape()[0],
        grid.token_ids.shape()[1]
    );
    for r in grid.token_ids.rows() {
        let line: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        println!("  [{}]", line.join(" "));
    }
    println!("char mask:");
    for r in grid.char_mask.rows() {
        let line: Vec<String> = r
            .iter()
            .map(|&b| if b { "1" } else { "0" }.to_string())
            .collect();
        println!("  [{}]", line.join(" "));
    }
    println!("cls positions: {:?}", grid.cls_positions);
    if stats.datums_truncated > 0 || stats.datums_dropped > 0 {
        println!(
            "truncation: {} datums cut, {} datums dropped",
            stats.datums_truncated, stats.datums_dropped
        );
    }
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    match (&args.model, &args.row) {
        (Some(path), None) => {
            inspect_model(path)?;
            Ok(())
        }
        (Some(path), Some(text)) => {
            let (_, cfg, vocab, _) = inspect_model(path)?;
            let row = parse_row_arg(text)?;
            inspect_row(&row, &vocab, &cfg)
        }
        (None, Some(text)) => {
            // No model: tokenize against a vocabulary built from the
            // row itself.
            let row = parse_row_arg(text)?;
            let vocab = build_vocab(std::slice::from_ref(&row), 1)?;
            println!("vocab size (from this row alone): {}", vocab.size());
            let cfg = ModelConfig::with_vocab(vocab.size());
            inspect_row(&row, &vocab, &cfg)
        }
        (None, None) => Err(Error::usage("inspect needs --model and/or --row")),
    }
}

fn cmd_corrupt(args: CorruptArgs) -> Result<()> {
    let mode: CorruptMode = args.mode.parse()?;
    toy_corruptor(&args.input, &args.output, mode, args.seed)?;
    println!(
        "wrote corrupted copy of {} to {} ({})",
        args.input.display(),
        args.output.display(),
        args.mode
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_row_arg_splits_on_first_colon() {
        let row = parse_row_arg("age:39|note:a:b").unwrap();
        assert_eq!(row.datums.len(), 2);
        assert_eq!(row.datums[1].column, "note");
        assert_eq!(row.datums[1].value, "a:b");
    }

    #[test]
    fn parse_row_arg_rejects_missing_colon() {
        let err = parse_row_arg("age39").unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn resolve_out_prefers_explicit_path() {
        let p = resolve_out(Some(PathBuf::from("/tmp/x")), "leaf").unwrap();
        assert_eq!(p, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn scores_csv_formats_labels_or_blanks() {
        let csv = scores_csv(&[0.5, 0.25], Some(&[1, 0]));
        assert_eq!(csv, "row_index,score,label\n0,0.5,1\n1,0.25,0\n");
        let csv = scores_csv(&[0.5], None);
        assert_eq!(csv, "row_index,score,label\n0,0.5,\n");
    }

    #[test]
    fn usage_errors_exit_one() {
        let err = run_from(["datumwise", "no-such-command"]).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        let err = run_from(["datumwise", "eval", "--model", "x.bin"]).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn help_is_not_an_error() {
        run_from(["datumwise", "--help"]).unwrap();
    }
}
