use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use ebr_core::augment::{inject_typos_traced, KeyboardMap, TypoConfig};
use ebr_core::catalog::{
    load_jsonl, save_jsonl, Dataset, Query, ENGAGEMENT_FILE, JUDGMENTS_FILE, PRODUCTS_FILE,
    PT_PREDICTIONS_FILE, QUERIES_FILE,
};
use ebr_core::encoder::{TowerParams, CHECKPOINT_FILE};
use ebr_core::evalkit::{report_tsv, EvalKind, EvalReport, EvalSuite};
use ebr_core::labeling::{LabeledRow, LABELED_TRAINING_FILE};
use ebr_core::mining::{mined_file_name, summary_tsv, MiningConfig, Verdict};
use ebr_core::pipeline::{
    comparison_tsv, evaluate_split, omega_svg, omega_table, run_preset, split_queries, PipelineConfig,
    Preset, ScorerKind, Toggles, Workbench,
};
use ebr_core::rng::substream;
use ebr_core::rng::Stream;
use ebr_core::rrm::{RrmParams, ScoreRow, RRM_PARAMS_FILE, RRM_SCORES_FILE};
use ebr_core::synthgen::{
    generate_world, GroundTruth, WorldConfig, CORRUPTED_QUERIES_FILE, GROUND_TRUTH_FILE, WORLD_CONFIG_FILE,
};
use ebr_core::training::{loss_curve_tsv, mine_pass, LOSS_CURVE_FILE, TRAIN_CONFIG_FILE};
use rayon::prelude::*;
use serde::Serialize;

mod manifest;

use manifest::Manifest;

const DATASET_FILES: [&str; 7] = [
    QUERIES_FILE,
    PRODUCTS_FILE,
    ENGAGEMENT_FILE,
    JUDGMENTS_FILE,
    PT_PREDICTIONS_FILE,
    GROUND_TRUTH_FILE,
    CORRUPTED_QUERIES_FILE,
];
const EVAL_REPORT_FILE: &str = "eval_report.tsv";
const EVAL_DETAIL_FILE: &str = "eval_per_query.tsv";
const RUN_SUMMARY_FILE: &str = "run_summary.json";
const RRM_SUMMARY_FILE: &str = "rrm_summary.json";
const COMPARISON_FILE: &str = "comparison.tsv";
const OMEGA_PLOT_FILE: &str = "omega_sweep.svg";
const MINING_SUMMARY_FILE: &str = "mining_summary.tsv";

/// Relevance-aware embedding retrieval workbench.
#[derive(Debug, Parser)]
#[command(name = "ebr", version, about, propagate_version = true)]
struct Cli {
    /// Seed override. `gen`: world seed. `train`, `mine`, `experiment`:
    /// training seed. `rrm-train`: reward model seed. `augment`: typo seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON config: a world config for `gen`, a pipeline config elsewhere.
    /// Missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic world into a dataset directory.
    Gen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the linear relevance reward model on the judgments.
    RrmTrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label every engagement row with revised engagement and relevance labels.
    Annotate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        scorer: ScorerArgs,
        #[command(flatten)]
        labels: LabelArgs,
    },
    /// Train the two-tower encoder.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Precomputed labels from `annotate`; otherwise labels are computed here.
        #[arg(long, conflicts_with_all = ["label_revision", "new_labels"])]
        labels: Option<PathBuf>,
        #[command(flatten)]
        scorer: ScorerArgs,
        #[command(flatten)]
        label_flags: LabelArgs,
        /// Weight of the engagement loss; 1 - omega goes to the relevance loss.
        #[arg(long)]
        omega: Option<f64>,
        /// Typo injection on training queries.
        #[arg(long)]
        typos: Option<Switch>,
        /// Offline hard-negative and semi-positive mining between rounds.
        #[arg(long)]
        mining: Option<Switch>,
    },
    /// Mine hard negatives and semi-positives for the training queries with a checkpoint.
    Mine {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        scorer: ScorerArgs,
        /// Round number used in the output file name and sampling streams.
        #[arg(long, default_value_t = 1)]
        iteration: usize,
    },
    /// Evaluate a checkpoint on the held-out queries.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Cutoffs, comma separated.
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
        /// Evaluation kinds (all three by default).
        #[arg(long, value_delimiter = ',')]
        kinds: Vec<KindArg>,
        /// Alternative query texts (e.g. `queries_corrupted.jsonl`), reported
        /// as a separate section. Queries whose text is unchanged are skipped.
        #[arg(long)]
        queries: Option<PathBuf>,
        /// Also write per-query values.
        #[arg(long)]
        per_query: bool,
    },
    /// Inject typos into a query file and list the edits.
    Augment {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// TSV of edits: query_id, op, word_index, before, after.
        #[arg(long)]
        diff: PathBuf,
        /// Injection probability per query.
        #[arg(long, default_value_t = 0.5)]
        probability: f64,
    },
    /// Run an experiment preset and write a comparison table.
    Experiment {
        /// One of omega_sweep, ablation_lr, ablation_ti, ablation_ls_ns, ablation_mol, full_stack.
        #[arg(long)]
        preset: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also draw the omega sweep as SVG.
        #[arg(long)]
        svg: bool,
    },
    /// Combine evaluation reports of several runs into one table.
    Report {
        /// Run directories holding `eval_report.tsv`, or report files.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    SmallIndexEmRecall,
    BigIndexEmPrecision,
    PurchasedOrderRecall,
}

impl From<KindArg> for EvalKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::SmallIndexEmRecall => EvalKind::SmallIndexEmRecall,
            KindArg::BigIndexEmPrecision => EvalKind::BigIndexEmPrecision,
            KindArg::PurchasedOrderRecall => EvalKind::PurchasedOrderRecall,
        }
    }
}

#[derive(Debug, Args)]
struct ScorerArgs {
    /// Reward model parameters from `rrm-train`; fitted on the fly when absent.
    #[arg(long, conflicts_with = "oracle")]
    rrm: Option<PathBuf>,
    /// Use the ground truth as the reward model.
    #[arg(long)]
    oracle: bool,
}

#[derive(Debug, Args)]
struct LabelArgs {
    /// Downgrade engagement labels the reward model doubts.
    #[arg(long)]
    label_revision: Option<Switch>,
    /// Weighted funnel labels (on) or orders only (off).
    #[arg(long)]
    new_labels: Option<Switch>,
}

/// A problem with how the command was invoked.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                eprintln!("\n{}", Cli::command().render_usage());
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen { out } => cmd_gen(cli, out),
        Command::RrmTrain { data, out } => cmd_rrm_train(cli, data, out),
        Command::Annotate { data, out, scorer, labels } => cmd_annotate(cli, data, out, scorer, labels),
        Command::Train {
            data,
            out,
            labels,
            scorer,
            label_flags,
            omega,
            typos,
            mining,
        } => {
            let toggles = Toggles {
                omega: *omega,
                typos: typos.map(Switch::on),
                label_revision: label_flags.label_revision.map(Switch::on),
                new_labels: label_flags.new_labels.map(Switch::on),
                mining: mining.map(Switch::on),
            };
            cmd_train(cli, data, out, labels.as_deref(), scorer, &toggles)
        }
        Command::Mine {
            data,
            checkpoint,
            out,
            scorer,
            iteration,
        } => cmd_mine(cli, data, checkpoint, out, scorer, *iteration),
        Command::Eval {
            data,
            checkpoint,
            out,
            k,
            kinds,
            queries,
            per_query,
        } => cmd_eval(cli, data, checkpoint, out, k, kinds, queries.as_deref(), *per_query),
        Command::Augment {
            input,
            out,
            diff,
            probability,
        } => cmd_augment(cli, input, out, diff, *probability),
        Command::Experiment { preset, data, out, svg } => cmd_experiment(cli, preset, data, out, *svg),
        Command::Report { runs, out } => cmd_report(runs, out.as_deref()),
    }
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    if !path.is_file() {
        return Err(Usage(format!("config file {} not found", path.display())).into());
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

/// Pipeline config from `--config`, or from `fallback` (a config written by
/// an earlier `train`) when no flag was given.
fn pipeline_config(cli: &Cli, fallback: Option<&Path>) -> Result<PipelineConfig> {
    let path = cli.config.as_deref().or(fallback.filter(|p| p.is_file()));
    let config: PipelineConfig = read_config(path)?;
    config.validate()?;
    Ok(config)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

struct Data {
    dataset: Dataset,
    truth: GroundTruth,
}

fn load_data(dir: &Path) -> Result<Data> {
    let dataset = Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    if !dir.join(GROUND_TRUTH_FILE).is_file() {
        bail!("{} has no {GROUND_TRUTH_FILE}; run `ebr gen` to create a dataset", dir.display());
    }
    let truth = GroundTruth::load(dir)?;
    Ok(Data { dataset, truth })
}

fn dataset_inputs(manifest: &mut Manifest, dir: &Path) -> Result<()> {
    manifest.inputs_in(dir, &DATASET_FILES)
}

fn scorer_config(mut config: PipelineConfig, args: &ScorerArgs) -> Result<(PipelineConfig, Option<RrmParams>)> {
    if args.oracle {
        config.scorer = ScorerKind::Oracle { sharpness: None };
        return Ok((config, None));
    }
    let fitted = match &args.rrm {
        Some(p) => {
            config.scorer = ScorerKind::Surrogate;
            Some(RrmParams::load(p).with_context(|| format!("loading {}", p.display()))?)
        }
        None => None,
    };
    Ok((config, fitted))
}

fn cmd_gen(cli: &Cli, out: &Path) -> Result<()> {
    let mut config: WorldConfig = read_config(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    let world = generate_world(&config)?;
    create_dir(out)?;
    world.save(out)?;
    let mut m = Manifest::new("gen", Some(config.seed), cli.threads, &config)?;
    for name in DATASET_FILES.iter().chain(&[WORLD_CONFIG_FILE]) {
        m.output(&out.join(name))?;
    }
    m.write(out)?;
    println!(
        "wrote {} products, {} queries, {} engagement rows, {} judgments to {}",
        world.dataset.catalog.products.len(),
        world.dataset.catalog.queries.len(),
        world.dataset.engagement.len(),
        world.dataset.judgments.len(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct RrmReport {
    train_accuracy: f64,
    holdout_accuracy: f64,
    /// Candidate revision thresholds for this model; copy them into
    /// `labeling.revision` of a pipeline config to recalibrate.
    suggested_t_low: Option<f64>,
    suggested_t_high: Option<f64>,
    loss_curve: Vec<f64>,
}

fn cmd_rrm_train(cli: &Cli, data: &Path, out: &Path) -> Result<()> {
    let mut config = pipeline_config(cli, None)?;
    if let Some(s) = cli.seed {
        config.rrm.seed = s;
    }
    config.scorer = ScorerKind::Surrogate;
    let d = load_data(data)?;
    let bench = Workbench::new(&d.dataset, &d.truth, &[], &config)?;
    let summary = bench.rrm.as_ref().expect("surrogate scorer");
    create_dir(out)?;
    let params_path = out.join(RRM_PARAMS_FILE);
    summary.params.save(&params_path)?;
    let scorer = bench.scorer();
    let catalog = &d.dataset.catalog;
    let rows: Vec<ScoreRow> = d
        .dataset
        .engagement
        .par_iter()
        .map(|e| {
            let q = catalog.query(&e.query_id).ok_or_else(|| anyhow!("unknown query {}", e.query_id))?;
            let p = catalog.product(&e.product_id).ok_or_else(|| anyhow!("unknown product {}", e.product_id))?;
            Ok(ScoreRow {
                query_id: e.query_id.clone(),
                product_id: e.product_id.clone(),
                probs: scorer.probs(q, p)?,
            })
        })
        .collect::<Result<_>>()?;
    let scores_path = out.join(RRM_SCORES_FILE);
    save_jsonl(&rows, &scores_path)?;
    let report_path = out.join(RRM_SUMMARY_FILE);
    write_json(
        &report_path,
        &RrmReport {
            train_accuracy: summary.train_accuracy,
            holdout_accuracy: summary.holdout_accuracy,
            suggested_t_low: summary.suggested_thresholds.map(|t| t.0),
            suggested_t_high: summary.suggested_thresholds.map(|t| t.1),
            loss_curve: summary.loss_curve.clone(),
        },
    )?;
    let mut m = Manifest::new("rrm-train", Some(config.rrm.seed), cli.threads, &config.rrm)?;
    dataset_inputs(&mut m, data)?;
    for p in [&params_path, &scores_path, &report_path] {
        m.output(p)?;
    }
    m.write(out)?;
    println!(
        "reward model: train accuracy {:.4}, held-out accuracy {:.4}",
        summary.train_accuracy, summary.holdout_accuracy
    );
    if let Some((lo, hi)) = summary.suggested_thresholds {
        println!("held-out irrelevant P^E: p90 {lo:.4}, p95 {hi:.4} (candidate t_low, t_high)");
    }
    Ok(())
}

fn label_toggles(args: &LabelArgs) -> Toggles {
    Toggles {
        label_revision: args.label_revision.map(Switch::on),
        new_labels: args.new_labels.map(Switch::on),
        ..Toggles::default()
    }
}

fn cmd_annotate(cli: &Cli, data: &Path, out: &Path, scorer: &ScorerArgs, labels: &LabelArgs) -> Result<()> {
    let config = pipeline_config(cli, None)?.apply(&label_toggles(labels));
    let (config, fitted) = scorer_config(config, scorer)?;
    let d = load_data(data)?;
    let bench = Workbench::with_rrm(&d.dataset, &d.truth, &[], &config, fitted)?;
    let rows = bench.annotate(&config.labeling)?;
    create_dir(out)?;
    let path = out.join(LABELED_TRAINING_FILE);
    save_jsonl(&rows, &path)?;
    let mut m = Manifest::new("annotate", None, cli.threads, &config)?;
    dataset_inputs(&mut m, data)?;
    if let Some(p) = &scorer.rrm {
        m.input(p)?;
    }
    m.output(&path)?;
    m.write(out)?;
    let revised = rows.iter().filter(|r| r.s_revised != r.s_raw).count();
    println!("labeled {} rows ({} revised) into {}", rows.len(), revised, path.display());
    Ok(())
}

#[derive(Serialize)]
struct RunSummary {
    omega: f64,
    sigma: f64,
    tau: f64,
    /// Temperatures that received no gradient (weight zero in the loss).
    frozen: Vec<&'static str>,
    epochs_run: usize,
    final_mean_loss: f64,
    training_rows: usize,
    mined_per_round: Vec<usize>,
    short_batches: usize,
    dropped_examples: usize,
    rrm_holdout_accuracy: Option<f64>,
}

fn load_corrupted(path: &Path, dataset: &Dataset, eval_ids: &[String]) -> Result<Vec<Query>> {
    let rows: Vec<Query> = load_jsonl(path)?;
    let eval: HashSet<&str> = eval_ids.iter().map(String::as_str).collect();
    let mut out = Vec::new();
    for q in rows {
        let original = dataset
            .catalog
            .query(&q.id)
            .ok_or_else(|| anyhow!("query {} in {} is not in the catalog", q.id, path.display()))?;
        if eval.contains(q.id.as_str()) && original.text != q.text {
            out.push(q);
        }
    }
    Ok(out)
}

fn cmd_train(
    cli: &Cli,
    data: &Path,
    out: &Path,
    labels: Option<&Path>,
    scorer: &ScorerArgs,
    toggles: &Toggles,
) -> Result<()> {
    let mut config = pipeline_config(cli, None)?;
    if let Some(s) = cli.seed {
        config = config.with_training_seed(s);
    }
    let config = config.apply(toggles);
    config.validate()?;
    let (config, fitted) = scorer_config(config, scorer)?;
    let d = load_data(data)?;
    let bench = Workbench::with_rrm(&d.dataset, &d.truth, &[], &config, fitted)?;
    let rows: Vec<LabeledRow> = match labels {
        Some(p) => load_jsonl(p).with_context(|| format!("loading labels {}", p.display()))?,
        None => bench.annotate(&config.labeling)?,
    };
    let set = bench.training_set(&rows, &config)?;
    let model = bench.train(set, &config)?;

    create_dir(out)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    model.params.save(&ckpt)?;
    let curve = model.curve();
    let curve_path = out.join(LOSS_CURVE_FILE);
    write_text(&curve_path, &loss_curve_tsv(&curve))?;
    let cfg_path = out.join(TRAIN_CONFIG_FILE);
    write_json(&cfg_path, &config)?;
    let mut written = vec![ckpt.clone(), curve_path, cfg_path];
    for (i, mined) in model.mined.iter().enumerate() {
        let p = out.join(mined_file_name(i + 1));
        save_jsonl(mined, &p)?;
        written.push(p);
    }
    let omega = config.train.omega;
    let mut frozen = Vec::new();
    if omega == 0.0 {
        frozen.push("sigma");
    }
    if omega == 1.0 {
        frozen.push("tau");
    }
    let summary = RunSummary {
        omega,
        sigma: model.params.sigma(),
        tau: model.params.tau(),
        frozen,
        epochs_run: curve.len(),
        final_mean_loss: curve.last().map_or(f64::NAN, |e| e.mean_loss),
        training_rows: model.final_set_size,
        mined_per_round: model.mined.iter().map(Vec::len).collect(),
        short_batches: model.short_batches,
        dropped_examples: model.dropped_examples,
        rrm_holdout_accuracy: bench.rrm.as_ref().map(|r| r.holdout_accuracy),
    };
    let summary_path = out.join(RUN_SUMMARY_FILE);
    write_json(&summary_path, &summary)?;
    written.push(summary_path);

    let mut m = Manifest::new("train", Some(config.train.seed), cli.threads, &config)?;
    dataset_inputs(&mut m, data)?;
    if let Some(p) = labels {
        m.input(p)?;
    }
    if let Some(p) = &scorer.rrm {
        m.input(p)?;
    }
    for p in &written {
        m.output(p)?;
    }
    m.write(out)?;
    println!(
        "trained {} epochs, final loss {:.4}, sigma {:.4}, tau {:.4}{}; checkpoint {}",
        summary.epochs_run,
        summary.final_mean_loss,
        summary.sigma,
        summary.tau,
        if summary.frozen.is_empty() {
            String::new()
        } else {
            format!(" ({} frozen)", summary.frozen.join(", "))
        },
        ckpt.display()
    );
    Ok(())
}

fn cmd_mine(cli: &Cli, data: &Path, checkpoint: &Path, out: &Path, scorer: &ScorerArgs, iteration: usize) -> Result<()> {
    let fallback = checkpoint.parent().map(|p| p.join(TRAIN_CONFIG_FILE));
    let mut config = pipeline_config(cli, fallback.as_deref())?;
    if let Some(s) = cli.seed {
        config = config.with_training_seed(s);
    }
    let (config, fitted) = scorer_config(config, scorer)?;
    let mining = config.train.mining.clone().unwrap_or_else(|| MiningConfig {
        seed: config.train.seed,
        ..MiningConfig::default()
    });
    let params = TowerParams::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let d = load_data(data)?;
    let bench = Workbench::with_rrm(&d.dataset, &d.truth, &[], &config, fitted)?;
    let verdicts = mine_pass(
        &bench.train_queries,
        &d.dataset,
        &params,
        bench.scorer(),
        &config.labeling.relevance,
        &mining,
        iteration,
    )?;
    create_dir(out)?;
    let path = out.join(mined_file_name(iteration));
    save_jsonl(&verdicts, &path)?;
    let summary_path = out.join(MINING_SUMMARY_FILE);
    let summary = summary_tsv(&verdicts);
    write_text(&summary_path, &summary)?;
    let mut m = Manifest::new("mine", Some(mining.seed), cli.threads, &mining)?;
    dataset_inputs(&mut m, data)?;
    m.input(checkpoint)?;
    m.output(&path)?;
    m.output(&summary_path)?;
    m.write(out)?;
    let semi = verdicts.iter().filter(|v| v.verdict == Verdict::SemiPositive).count();
    println!(
        "mined {} negatives and {semi} semi-positives for {} queries into {}",
        verdicts.len() - semi,
        bench.train_queries.len(),
        path.display()
    );
    Ok(())
}

fn per_query_tsv(reports: &[EvalReport]) -> String {
    let mut out = String::from("query_set\tkind\tquery_id\tk\tvalue\n");
    for rep in reports {
        for res in &rep.results {
            for q in &res.per_query {
                for (s, v) in res.summaries.iter().zip(&q.values) {
                    let v = v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
                    let _ = writeln!(out, "{}\t{}\t{}\t{}\t{v}", rep.query_set, res.kind, q.query_id, s.k);
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    cli: &Cli,
    data: &Path,
    checkpoint: &Path,
    out: &Path,
    ks: &[usize],
    kinds: &[KindArg],
    queries: Option<&Path>,
    per_query: bool,
) -> Result<()> {
    let fallback = checkpoint.parent().map(|p| p.join(TRAIN_CONFIG_FILE));
    let config = pipeline_config(cli, fallback.as_deref())?;
    let ks = if ks.is_empty() { config.eval.ks.clone() } else { ks.to_vec() };
    if ks.contains(&0) {
        return Err(Usage("cutoffs must be positive".into()).into());
    }
    let kinds: Vec<EvalKind> = if kinds.is_empty() {
        EvalKind::ALL.to_vec()
    } else {
        kinds.iter().map(|&k| k.into()).collect()
    };
    let params = TowerParams::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let d = load_data(data)?;
    let (_, eval_ids) = split_queries(&d.dataset, config.eval_fraction, config.eval.seed);
    let suite = EvalSuite::from_dataset(&d.dataset, Some(&eval_ids), &config.eval)?;
    let corrupted = match queries {
        Some(p) => load_corrupted(p, &d.dataset, &eval_ids)?,
        None => Vec::new(),
    };
    if queries.is_some() && corrupted.is_empty() {
        eprintln!("note: no evaluation query has altered text in the given file");
    }
    let reports = evaluate_split(&suite, &d.dataset, Some(&d.truth), &corrupted, &params, &kinds, &ks)?;
    create_dir(out)?;
    let report_path = out.join(EVAL_REPORT_FILE);
    let text = report_tsv(&reports);
    write_text(&report_path, &text)?;
    let mut m = Manifest::new("eval", Some(config.eval.seed), cli.threads, &config.eval)?;
    dataset_inputs(&mut m, data)?;
    m.input(checkpoint)?;
    if let Some(p) = queries {
        m.input(p)?;
    }
    m.output(&report_path)?;
    if per_query {
        let p = out.join(EVAL_DETAIL_FILE);
        write_text(&p, &per_query_tsv(&reports))?;
        m.output(&p)?;
    }
    m.write(out)?;
    print!("{text}");
    Ok(())
}

fn cmd_augment(cli: &Cli, input: &Path, out: &Path, diff: &Path, probability: f64) -> Result<()> {
    let mut config = TypoConfig {
        injection_probability: probability,
        ..TypoConfig::default()
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    config.validate()?;
    let queries: Vec<Query> = load_jsonl(input)?;
    let keyboard = KeyboardMap::qwerty();
    let mut rng = substream(config.seed, Stream::Typos);
    let mut table = String::from("query_id\top\tword_index\tbefore\tafter\n");
    let mut changed = 0;
    let corrupted: Vec<Query> = queries
        .iter()
        .map(|q| {
            let (text, edit) = inject_typos_traced(&q.text, &config, &keyboard, &mut rng);
            if let Some(e) = edit {
                changed += 1;
                let _ = writeln!(table, "{}\t{}\t{}\t{}\t{}", q.id, e.op, e.word_index, e.before, e.after);
            }
            Query { text, ..q.clone() }
        })
        .collect();
    for p in [out, diff] {
        if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
    }
    save_jsonl(&corrupted, out)?;
    write_text(diff, &table)?;
    let mut m = Manifest::new("augment", Some(config.seed), cli.threads, &config)?;
    m.input(input)?;
    m.output(out)?;
    m.output(diff)?;
    let dir = out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    m.write(dir)?;
    println!("altered {changed} of {} queries", queries.len());
    Ok(())
}

fn cmd_experiment(cli: &Cli, preset: &str, data: &Path, out: &Path, svg: bool) -> Result<()> {
    let preset: Preset = preset.parse().map_err(|e: ebr_core::Error| Usage(e.to_string()))?;
    let mut config = pipeline_config(cli, None)?;
    if let Some(s) = cli.seed {
        config = config.with_training_seed(s);
    }
    let d = load_data(data)?;
    let corrupted_path = data.join(CORRUPTED_QUERIES_FILE);
    let (_, eval_ids) = split_queries(&d.dataset, config.eval_fraction, config.eval.seed);
    let corrupted = if corrupted_path.is_file() {
        load_corrupted(&corrupted_path, &d.dataset, &eval_ids)?
    } else {
        Vec::new()
    };
    let bench = Workbench::new(&d.dataset, &d.truth, &corrupted, &config)?;
    let arms = run_preset(&bench, &config, preset)?;
    create_dir(out)?;
    let path = out.join(COMPARISON_FILE);
    let table = comparison_tsv(preset, &arms);
    write_text(&path, &table)?;
    let mut m = Manifest::new("experiment", Some(config.train.seed), cli.threads, &config)?;
    dataset_inputs(&mut m, data)?;
    m.output(&path)?;
    let k = config.eval.ks.first().copied().unwrap_or(20);
    if preset == Preset::OmegaSweep {
        let points = omega_table(&arms, k);
        let mut summary = format!("omega\tem_recall@{k}\n");
        for (o, v) in &points {
            let _ = writeln!(summary, "{o}\t{v:.6}");
        }
        print!("{summary}");
        if svg {
            let p = out.join(OMEGA_PLOT_FILE);
            write_text(&p, &omega_svg(&points, k))?;
            m.output(&p)?;
        }
    } else {
        for line in table.lines().filter(|l| l.split('\t').nth(1) == Some("delta")) {
            println!("{line}");
        }
    }
    m.write(out)?;
    Ok(())
}

/// Reads one report; the run label is the directory name (or file stem).
fn read_report(path: &Path) -> Result<(String, String)> {
    let (file, label) = if path.is_dir() {
        let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        (path.join(EVAL_REPORT_FILE), name)
    } else {
        let stem = path.file_stem().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        (path.to_path_buf(), stem)
    };
    let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
    Ok((label, text))
}

fn cmd_report(runs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    // (query_set, metric, k) -> run -> value, in first-seen order.
    let mut order: Vec<(String, String, String)> = Vec::new();
    let mut values: HashMap<(String, String, String), BTreeMap<usize, String>> = HashMap::new();
    let mut labels = Vec::new();
    for (i, path) in runs.iter().enumerate() {
        let (label, text) = read_report(path)?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != "query_set\tkind\tmetric\tk\tqueries\texcluded\tvalue" {
            bail!("{} is not an evaluation report", path.display());
        }
        for line in lines {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                bail!("malformed report line in {}: {line}", path.display());
            }
            let key = (f[0].to_string(), f[2].to_string(), f[3].to_string());
            if !values.contains_key(&key) {
                order.push(key.clone());
            }
            values.entry(key).or_default().insert(i, f[6].to_string());
        }
        labels.push(label);
    }
    let mut table = format!("query_set\tmetric\tk\t{}\n", labels.join("\t"));
    for key in &order {
        let row = &values[key];
        let cells: Vec<&str> = (0..labels.len()).map(|i| row.get(&i).map_or("NA", String::as_str)).collect();
        let _ = writeln!(table, "{}\t{}\t{}\t{}", key.0, key.1, key.2, cells.join("\t"));
    }
    match out {
        Some(p) => write_text(p, &table)?,
        None => print!("{table}"),
    }
    Ok(())
}
