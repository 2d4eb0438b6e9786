//! `zsre` command-line entry point.
//!
//! Exit codes: 0 success, 2 configuration error, 3 stage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use zsre_core::corpus::{self, DatasetFormat, PairMode};
use zsre_core::embedding::{PromptStyle, ProviderKind};
use zsre_core::pipeline::{self, PipelineError, PipelineOutcome, RunConfig, Services, Stage};
use zsre_core::scoring::{ScoringMode, Weights};
use zsre_core::sideinfo::{self, GenerationConfig, PromptSet, SideInfoStore};
use zsre_core::synthetic;
use zsre_core::zseval::{self, PredictionRecord};

#[derive(Parser)]
#[command(name = "zsre", version, about = "Document-level zero-shot relation extraction with entity side information")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// JSON run configuration; flags and environment override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for label sampling and the mock encoder.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Forbid network calls and fail on any cache miss.
    #[arg(long, global = true)]
    offline: bool,
    /// Check configuration and print the plan without writing or calling anything.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Directory for reports and the run manifest.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    encoder: Option<EncoderArg>,
    /// Remote encoder base URL (also `ZSRE_ENCODER_URL`).
    #[arg(long, global = true)]
    encoder_url: Option<String>,
    #[arg(long, global = true)]
    embedding_cache: Option<PathBuf>,
    /// Render the tail role prompt with "a subject" instead of "an object".
    #[arg(long, global = true)]
    verbatim_appendix_prompts: bool,
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Clone, Copy, ValueEnum)]
enum EncoderArg {
    Mock,
    Remote,
}

#[derive(Args, Default)]
struct DatasetArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// docred_json or men_json.
    #[arg(long)]
    format: Option<DatasetFormat>,
}

#[derive(Args, Default)]
struct ScoringArgs {
    /// desc_only, desc_hypernym, desc_type, desc_hyp_type or full_weighted.
    #[arg(long)]
    mode: Option<ScoringMode>,
    /// Seven weights as a JSON array or object, inline or in a file.
    #[arg(long)]
    weights: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset checks.
    Corpus {
        #[command(subcommand)]
        command: CorpusCommand,
    },
    /// Entity side information.
    Sideinfo {
        #[command(subcommand)]
        command: SideinfoCommand,
    },
    /// Embedding cache.
    Embed {
        #[command(subcommand)]
        command: EmbedCommand,
    },
    /// Write one score breakdown per (pair, label).
    Score {
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long)]
        sideinfo: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[command(flatten)]
        scoring: ScoringArgs,
        /// Score every ordered entity pair instead of gold pairs only.
        #[arg(long)]
        all_pairs: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Zero-shot evaluation.
    Eval {
        #[command(subcommand)]
        command: EvalCommand,
    },
    /// Sentence-gap table from a predictions file.
    Gap {
        #[arg(long)]
        predictions: PathBuf,
        /// Only records of this unseen-set size.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Per-label breakdown for one entity pair.
    Explain {
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long)]
        sideinfo: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Candidate label; repeatable. Defaults to the labels file or dataset inventory.
        #[arg(long = "label")]
        label: Vec<String>,
        #[command(flatten)]
        scoring: ScoringArgs,
        #[arg(long)]
        doc: String,
        #[arg(long)]
        head: usize,
        #[arg(long)]
        tail: usize,
        #[arg(long)]
        json: bool,
    },
    /// Run several stages in dependency order.
    Run {
        /// Comma-separated subset of validate,sideinfo,embed,score,eval.
        #[arg(long, default_value = "validate,sideinfo,embed,score,eval")]
        stages: String,
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long)]
        sideinfo: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[command(flatten)]
        scoring: ScoringArgs,
    },
    /// Write the bundled synthetic corpus, its side information and a config.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum CorpusCommand {
    Validate {
        #[command(flatten)]
        data: DatasetArgs,
        /// Skip the mention-surface check.
        #[arg(long)]
        no_surface_check: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum SideinfoCommand {
    Build {
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        parallelism: Option<usize>,
        /// Chat service base URL.
        #[arg(long)]
        base_url: Option<String>,
        /// Directory with description.txt / hypernym.txt overrides.
        #[arg(long)]
        prompt_dir: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum EmbedCommand {
    Warm {
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long)]
        sideinfo: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum EvalCommand {
    Run {
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long)]
        sideinfo: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[command(flatten)]
        scoring: ScoringArgs,
        /// Unseen-set sizes, comma-separated.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        #[arg(long)]
        samples: Option<usize>,
        /// Leave labels with neither gold nor predicted instances out of macro F1.
        #[arg(long)]
        exclude_zero_support: bool,
        /// Also evaluate every scoring mode.
        #[arg(long)]
        ablation: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn config_error(msg: impl Into<String>) -> PipelineError {
    PipelineError::Config(msg.into())
}

fn parse_weights(raw: &str) -> Result<Weights, PipelineError> {
    let text = if raw.trim_start().starts_with(['{', '[']) {
        raw.to_string()
    } else {
        fs::read_to_string(raw).map_err(|e| config_error(format!("weights file '{raw}': {e}")))?
    };
    serde_json::from_str(&text).map_err(|e| config_error(format!("weights: {e}")))
}

/// defaults < config file < environment < flags
fn base_config(global: &GlobalArgs) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &global.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_env(|k| std::env::var(k).ok());
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if global.offline {
        cfg.offline = true;
    }
    if let Some(dir) = &global.out_dir {
        cfg.output_dir = dir.clone();
    }
    match global.encoder {
        Some(EncoderArg::Mock) => cfg.encoder.provider = ProviderKind::DeterministicMock,
        Some(EncoderArg::Remote) => cfg.encoder.provider = ProviderKind::RemoteHttp,
        None => {}
    }
    if let Some(url) = &global.encoder_url {
        cfg.encoder.base_url = Some(url.clone());
    }
    if let Some(path) = &global.embedding_cache {
        cfg.embedding_cache = path.clone();
    }
    if global.verbatim_appendix_prompts {
        cfg.eval.prompt_style = PromptStyle::VerbatimAppendix;
    }
    Ok(cfg)
}

fn apply_dataset(cfg: &mut RunConfig, data: &DatasetArgs) {
    if let Some(path) = &data.dataset {
        cfg.dataset = Some(path.clone());
    }
    if let Some(format) = data.format {
        cfg.dataset_format = format;
    }
}

fn apply_common(cfg: &mut RunConfig, sideinfo: &Option<PathBuf>, labels: &Option<PathBuf>) {
    if let Some(path) = sideinfo {
        cfg.sideinfo_cache = path.clone();
    }
    if let Some(path) = labels {
        cfg.labels_file = Some(path.clone());
    }
}

fn apply_scoring(cfg: &mut RunConfig, scoring: &ScoringArgs) -> Result<(), PipelineError> {
    if let Some(mode) = scoring.mode {
        cfg.eval.scoring.mode = mode;
    }
    if let Some(raw) = &scoring.weights {
        cfg.eval.scoring.weights = parse_weights(raw)?;
    }
    Ok(())
}

fn execute(cfg: &RunConfig, stages: &[Stage], dry_run: bool) -> Result<PipelineOutcome, PipelineError> {
    let services = Services::from_config(cfg)?;
    let outcome = pipeline::run_pipeline(cfg, stages, &services, dry_run)?;
    if dry_run {
        println!("dry run, nothing written:");
        for line in &outcome.plan {
            println!("  {line}");
        }
    }
    Ok(outcome)
}

fn print_outcome(cfg: &RunConfig, outcome: &PipelineOutcome) {
    if let Some(report) = &outcome.validation {
        println!("{}", serde_json::to_string_pretty(report).expect("report serializes"));
    }
    if let Some(summary) = &outcome.sideinfo {
        println!(
            "sideinfo: {} generated, {} cached -> {}",
            summary.generated,
            summary.cached,
            cfg.sideinfo_cache.display()
        );
    }
    if let Some(n) = outcome.embedded_texts {
        println!("embeddings: {n} cached texts -> {}", cfg.embedding_cache.display());
    }
    if let Some(n) = outcome.breakdowns {
        println!("score: {n} breakdowns -> {}", cfg.breakdowns_path().display());
    }
    if let Some(report) = &outcome.eval {
        print!("{}", report.render_text());
        println!("report -> {}", cfg.report_path().display());
    }
    if let Some(ablation) = &outcome.ablation {
        print!("\n{}", ablation.render_text());
    }
}

fn write_synthetic(out: &Path, dry_run: bool) -> Result<(), PipelineError> {
    let stage_err = |e: &dyn std::fmt::Display| PipelineError::Stage {
        stage: Stage::Sideinfo,
        cause: e.to_string(),
    };
    let dataset_path = out.join("dataset.json");
    let sideinfo_path = out.join("sideinfo.jsonl");
    let labels_path = out.join("labels.txt");
    let config_path = out.join("config.json");
    if dry_run {
        println!("dry run, would write:");
        for p in [&dataset_path, &sideinfo_path, &labels_path, &config_path] {
            println!("  {}", p.display());
        }
        return Ok(());
    }
    fs::create_dir_all(out).map_err(|e| stage_err(&e))?;
    let synth = synthetic::corpus();
    let json = serde_json::to_vec_pretty(&corpus::to_docred_json(&synth.dataset)).expect("dataset serializes");
    pipeline::write_output(&dataset_path, &json).map_err(|e| stage_err(&e))?;
    pipeline::write_output(&labels_path, (synthetic::labels().join("\n") + "\n").as_bytes()).map_err(|e| stage_err(&e))?;

    let client = synthetic::ScriptedChatClient::new(synth.script);
    let _ = fs::remove_file(&sideinfo_path);
    let mut store = SideInfoStore::open(&sideinfo_path).map_err(|e| stage_err(&e))?;
    let generation = GenerationConfig {
        model_id: "scripted-synthetic".into(),
        ..Default::default()
    };
    sideinfo::build_side_info(&synth.dataset, &client, &generation, &PromptSet::default(), &mut store)
        .map_err(|e| stage_err(&e))?;

    let mut cfg = RunConfig {
        dataset: Some(dataset_path.clone()),
        sideinfo_cache: sideinfo_path.clone(),
        embedding_cache: out.join("embeddings.jsonl"),
        output_dir: out.join("run"),
        generation,
        ..Default::default()
    };
    cfg.eval.sizes = vec![5, 10, 15];
    pipeline::write_output(&config_path, cfg.to_json().as_bytes()).map_err(|e| stage_err(&e))?;
    println!(
        "synthetic corpus: {} documents, {} entities, {} relations -> {}",
        synth.dataset.documents.len(),
        synth.dataset.entity_count(),
        synth.dataset.relation_count(),
        out.display()
    );
    Ok(())
}

fn run_gap(predictions: &Path, size: Option<usize>, json: bool) -> Result<(), PipelineError> {
    let raw = fs::read_to_string(predictions)
        .map_err(|e| config_error(format!("{}: {e}", predictions.display())))?;
    let mut records = Vec::new();
    for (i, line) in raw.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: PredictionRecord = serde_json::from_str(line)
            .map_err(|e| config_error(format!("{}:{}: {e}", predictions.display(), i + 1)))?;
        if size.is_none_or(|n| rec.unseen_size == n) {
            records.push(rec);
        }
    }
    let table = zseval::gap_analysis(&records);
    if json {
        println!("{}", serde_json::to_string_pretty(&table).expect("table serializes"));
    } else {
        print!("{}", table.render_text());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let global = &cli.global;
    let dry_run = global.dry_run;
    let mut cfg = base_config(global)?;
    let stages: Vec<Stage> = match &cli.command {
        Command::Corpus {
            command: CorpusCommand::Validate { data, no_surface_check, out },
        } => {
            apply_dataset(&mut cfg, data);
            if *no_surface_check {
                cfg.check_surface = false;
            }
            if out.is_some() {
                cfg.validation_out = out.clone();
            }
            vec![Stage::Validate]
        }
        Command::Sideinfo {
            command:
                SideinfoCommand::Build {
                    data,
                    out,
                    model,
                    parallelism,
                    base_url,
                    prompt_dir,
                },
        } => {
            apply_dataset(&mut cfg, data);
            apply_common(&mut cfg, out, &None);
            if let Some(model) = model {
                cfg.generation.model_id = model.clone();
            }
            if let Some(k) = parallelism {
                cfg.generation.parallelism = *k;
            }
            if let Some(url) = base_url {
                cfg.generation.base_url = url.clone();
            }
            if prompt_dir.is_some() {
                cfg.generation.prompt_dir = prompt_dir.clone();
            }
            vec![Stage::Sideinfo]
        }
        Command::Embed {
            command: EmbedCommand::Warm { data, sideinfo, labels, out },
        } => {
            apply_dataset(&mut cfg, data);
            apply_common(&mut cfg, sideinfo, labels);
            if let Some(out) = out {
                cfg.embedding_cache = out.clone();
            }
            vec![Stage::Embed]
        }
        Command::Score {
            data,
            sideinfo,
            labels,
            scoring,
            all_pairs,
            out,
        } => {
            apply_dataset(&mut cfg, data);
            apply_common(&mut cfg, sideinfo, labels);
            apply_scoring(&mut cfg, scoring)?;
            if *all_pairs {
                cfg.pair_mode = PairMode::AllOrderedPairs;
            }
            if out.is_some() {
                cfg.breakdowns_out = out.clone();
            }
            vec![Stage::Score]
        }
        Command::Eval {
            command:
                EvalCommand::Run {
                    data,
                    sideinfo,
                    labels,
                    scoring,
                    sizes,
                    samples,
                    exclude_zero_support,
                    ablation,
                    out,
                },
        } => {
            apply_dataset(&mut cfg, data);
            apply_common(&mut cfg, sideinfo, labels);
            apply_scoring(&mut cfg, scoring)?;
            if !sizes.is_empty() {
                cfg.eval.sizes = sizes.clone();
            }
            if let Some(k) = samples {
                cfg.eval.samples_per_size = *k;
            }
            if *exclude_zero_support {
                cfg.eval.zero_support = zseval::ZeroSupport::Exclude;
            }
            if *ablation {
                cfg.ablation = true;
            }
            if out.is_some() {
                cfg.report_out = out.clone();
            }
            vec![Stage::Eval]
        }
        Command::Gap { predictions, size, json } => return run_gap(predictions, *size, *json),
        Command::Explain {
            data,
            sideinfo,
            labels,
            label,
            scoring,
            doc,
            head,
            tail,
            json,
        } => {
            apply_dataset(&mut cfg, data);
            apply_common(&mut cfg, sideinfo, labels);
            apply_scoring(&mut cfg, scoring)?;
            cfg.propagate_seed();
            let services = Services::from_config(&cfg)?;
            let explanation = pipeline::explain_pair(&cfg, &services, doc, *head, *tail, Some(label))?;
            if *json {
                println!("{}", serde_json::to_string_pretty(&explanation).expect("explanation serializes"));
            } else {
                print!("{}", explanation.render_text());
            }
            return Ok(());
        }
        Command::Run {
            stages,
            data,
            sideinfo,
            labels,
            scoring,
        } => {
            apply_dataset(&mut cfg, data);
            apply_common(&mut cfg, sideinfo, labels);
            apply_scoring(&mut cfg, scoring)?;
            pipeline::parse_stages(stages)?
        }
        Command::Synth { out } => return write_synthetic(out, dry_run),
    };
    cfg.propagate_seed();
    let outcome = execute(&cfg, &stages, dry_run)?;
    if !dry_run {
        print_outcome(&cfg, &outcome);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
