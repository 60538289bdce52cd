//! Command-line front end for the `refocus` binary.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::env::{generate_dataset, load_dataset, SceneSpec, Tier, DATASET_SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::grpo::{ClipConfig, ClipVariant};
use crate::metrics::{
    classification_report, detection_report, refocus_stats, render_tables, EvalRecord, EvalReport, RefocusConfig,
    RefocusStats, TableFormat,
};
use crate::policy::{PolicyConfig, PolicyParams};
use crate::rewards::{score_output, NegativeScoring, RewardBreakdown, RewardWeights, StageId};
use crate::trainer::{greedy_records, train, CurriculumConfig, Optimizer, TrainConfig};
use crate::transcript::{build_incontext_prompt, parse_transcript, Transcript};

/// Version of the configuration snapshots written into run manifests.
pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (config schema 1)");
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

const DEFAULT_QUESTION: &str =
    "Is there a camouflaged object in this image? If so, locate it and name its category.";

#[derive(Debug, Parser)]
#[command(name = "refocus", version = VERSION, about = "Curriculum refocus training and evaluation toolkit")]
pub struct Cli {
    /// Cap on worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Where to write the run manifest (defaults depend on the command).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic scene dataset.
    GenScenes(GenScenesArgs),
    /// Train the refocus policy with curriculum GRPO.
    Train(TrainArgs),
    /// Score predictions or a checkpoint against a dataset.
    Eval(EvalArgs),
    /// Apply the staged reward to externally generated transcripts.
    ScoreRollouts(ScoreArgs),
    /// Print the in-context prompt.
    MakePrompt(PromptArgs),
    /// Classify refocus transitions in predicted transcripts.
    AnalyzeTrajectories(AnalyzeArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenScenesArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value = "easy")]
    pub tier: Tier,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Probability that a scene contains a target.
    #[arg(long)]
    pub p_pos: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Dataset directory or its manifest.json.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Held-out dataset for periodic evaluation snapshots.
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub group_size: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value = "clip-high")]
    pub variant: ClipVariant,
    #[arg(long, default_value_t = 0.2)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0.3)]
    pub delta: f64,
    #[arg(long, default_value_t = 0.04)]
    pub beta: f64,
    /// Activate all reward components from the first step.
    #[arg(long)]
    pub no_curriculum: bool,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.2)]
    pub lr: f64,
    /// Keep the learning rate constant instead of decaying it linearly.
    #[arg(long)]
    pub constant_lr: bool,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1)]
    pub inner_steps: usize,
    #[arg(long, default_value = "sgd")]
    pub optimizer: Optimizer,
    /// Earn the category reward only on images that contain an object.
    #[arg(long)]
    pub positives_only: bool,
    #[arg(long, default_value_t = 8)]
    pub patch_grid: usize,
    #[arg(long, default_value_t = 16)]
    pub bins: usize,
    #[arg(long, default_value_t = 4)]
    pub t_max: usize,
    #[arg(long, default_value_t = 0.01)]
    pub plateau_tolerance: f64,
    #[arg(long, default_value_t = 2)]
    pub patience: usize,
    #[arg(long, default_value_t = 2)]
    pub window: usize,
    #[arg(long, default_value_t = 6)]
    pub max_epochs_per_stage: usize,
    #[arg(long, default_value_t = 0)]
    pub eval_every: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// JSONL of `{"id", "raw"}` predictions.
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    pub predictions: Option<PathBuf>,
    /// Policy checkpoint decoded greedily on the dataset.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "markdown")]
    pub format: TableFormat,
    /// Include the refocus-transition histogram.
    #[arg(long)]
    pub refocus_stats: bool,
    /// Write the report JSON here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ScoreArgs {
    /// JSONL of `{"id", "raw"}` generator outputs.
    #[arg(long)]
    pub rollouts: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub stage: u8,
    #[arg(long)]
    pub positives_only: bool,
    /// Output JSONL (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct PromptArgs {
    #[arg(long, default_value = DEFAULT_QUESTION)]
    pub question: String,
    /// JSONL of `{"raw"}` demonstration transcripts.
    #[arg(long)]
    pub demos: Option<PathBuf>,
    /// Omit the output-format requirement.
    #[arg(long)]
    pub no_format: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    /// JSONL of `{"id", "raw"}` predictions.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    pub ratio: f64,
    #[arg(long, default_value_t = 2.0)]
    pub slack: f64,
}

/// Written once per invocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub artifacts: Vec<PathBuf>,
    pub tool_version: String,
    pub config_schema_version: u32,
    pub dataset_schema_version: u32,
    pub duration_secs: f64,
}

/// One line of a predictions or rollouts file.
#[derive(Debug, Deserialize)]
struct RawLine {
    #[serde(default)]
    id: Option<String>,
    raw: String,
}

#[derive(Serialize)]
struct ScoreLine<'a> {
    id: &'a str,
    #[serde(flatten)]
    breakdown: RewardBreakdown,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidInput(_) | Error::Config(_) | Error::Schema { .. } => EXIT_USAGE,
        Error::Io { .. } => EXIT_IO,
        Error::NonFinite(_) => EXIT_NUMERIC,
    }
}

fn read_raw_lines(path: &Path, need_id: bool) -> Result<Vec<(Option<String>, String, usize)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawLine =
            serde_json::from_str(&line).map_err(|e| Error::schema(path, i + 1, e.to_string()))?;
        if need_id && rec.id.is_none() {
            return Err(Error::schema(path, i + 1, "missing field `id`"));
        }
        out.push((rec.id, rec.raw, i + 1));
    }
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

fn sibling_manifest(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    path.with_file_name(name)
}

struct Outcome {
    config: serde_json::Value,
    seed: Option<u64>,
    artifacts: Vec<PathBuf>,
    default_manifest: PathBuf,
    stdout: String,
}

fn gen_scenes(a: &GenScenesArgs) -> Result<Outcome> {
    let mut spec = SceneSpec::for_tier(a.tier, a.size);
    if let Some(p) = a.p_pos {
        spec.p_pos = p;
    }
    let manifest = generate_dataset(&spec, a.n, a.seed, &a.out)?;
    let path = a.out.join(crate::env::MANIFEST_FILE);
    log::info!("{} scenes ({} positive)", manifest.counts.total, manifest.counts.positives);
    Ok(Outcome {
        config: serde_json::json!({ "args": to_json(a), "spec": to_json(&spec) }),
        seed: Some(a.seed),
        artifacts: vec![path.clone()],
        default_manifest: a.out.join(RUN_MANIFEST_FILE),
        stdout: format!("{}\n", path.display()),
    })
}

fn train_config(a: &TrainArgs) -> (TrainConfig, CurriculumConfig) {
    let clip = ClipConfig {
        epsilon: a.epsilon,
        delta: a.delta,
        beta: a.beta,
        variant: a.variant,
        ..ClipConfig::default()
    };
    let cfg = TrainConfig {
        group_size: a.group_size,
        temperature: a.temperature,
        learning_rate: a.lr,
        lr_decay: !a.constant_lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        inner_steps: a.inner_steps,
        optimizer: a.optimizer,
        clip,
        seed: a.seed,
        no_curriculum: a.no_curriculum,
        weights: RewardWeights::default(),
        negatives: if a.positives_only {
            NegativeScoring::PositivesOnly
        } else {
            NegativeScoring::Extended
        },
        policy: PolicyConfig {
            patch_grid: a.patch_grid,
            bins: a.bins,
            t_max: a.t_max,
        },
        init_scale: TrainConfig::default().init_scale,
        eval_every: a.eval_every,
    };
    let cur = CurriculumConfig {
        plateau_tolerance: a.plateau_tolerance,
        patience: a.patience,
        window: a.window,
        max_epochs_per_stage: a.max_epochs_per_stage,
    };
    (cfg, cur)
}

fn cmd_train(a: &TrainArgs) -> Result<Outcome> {
    let (cfg, cur) = train_config(a);
    cfg.validate()?;
    cur.validate()?;
    let scenes = load_dataset(&a.dataset)?;
    let heldout = a.heldout.as_deref().map(load_dataset).transpose()?;
    let init = cfg.initial_params();
    let (params, log) = train(&init, &scenes, heldout.as_deref(), &cfg, &cur)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let ck = a.out.join("checkpoint.json");
    params.save(&ck)?;
    log.write(&a.out, cfg.no_curriculum)?;
    Ok(Outcome {
        config: serde_json::json!({ "args": to_json(a), "train": to_json(&cfg), "curriculum": to_json(&cur) }),
        seed: Some(cfg.seed),
        artifacts: ["checkpoint.json", "train_log.jsonl", "trace.jsonl", "summary.json"]
            .iter()
            .map(|f| a.out.join(f))
            .collect(),
        default_manifest: a.out.join(RUN_MANIFEST_FILE),
        stdout: format!("{}\n", ck.display()),
    })
}

fn prediction_records(path: &Path, dataset: &Path) -> Result<Vec<EvalRecord>> {
    let scenes = load_dataset(dataset)?;
    let mut preds: HashMap<String, Transcript> = HashMap::new();
    let index: HashMap<&str, usize> = scenes.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    for (id, raw, line) in read_raw_lines(path, true)? {
        let id = id.expect("id checked");
        if !index.contains_key(id.as_str()) {
            return Err(Error::schema(path, line, format!("id {id:?} not in dataset")));
        }
        if preds.insert(id.clone(), parse_transcript(&raw).0).is_some() {
            return Err(Error::schema(path, line, format!("duplicate id {id:?}")));
        }
    }
    let missing = scenes.len() - preds.len();
    if missing > 0 {
        log::warn!("{missing} dataset scenes have no prediction and count as unanswered");
    }
    Ok(scenes
        .into_iter()
        .map(|s| EvalRecord {
            prediction: preds.remove(&s.id).unwrap_or_default(),
            id: s.id,
            gt: s.gt,
        })
        .collect())
}

fn cmd_eval(a: &EvalArgs) -> Result<Outcome> {
    let records = match (&a.predictions, &a.checkpoint) {
        (Some(p), _) => prediction_records(p, &a.dataset)?,
        (None, Some(ck)) => {
            let params = PolicyParams::load(ck)?;
            greedy_records(&params, &load_dataset(&a.dataset)?)
        }
        (None, None) => return Err(Error::Config("either --predictions or --checkpoint is required".into())),
    };
    let cls = classification_report(&records)?;
    let det = detection_report(&records)?;
    let refocus = a.refocus_stats.then(|| refocus_stats(&records, &RefocusConfig::default()));
    let mut stdout = render_tables(&cls, &det, a.format);
    if let Some(r) = &refocus {
        stdout.push_str(&render_refocus(r));
    }
    let report = EvalReport {
        classification: cls,
        detection: det,
        refocus,
    };
    let mut artifacts = Vec::new();
    if let Some(path) = &a.report {
        write_text(path, &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))?;
        artifacts.push(path.clone());
    }
    Ok(Outcome {
        config: to_json(a),
        seed: None,
        default_manifest: a.report.as_deref().map_or_else(|| PathBuf::from(RUN_MANIFEST_FILE), sibling_manifest),
        artifacts,
        stdout,
    })
}

fn render_refocus(r: &RefocusStats) -> String {
    let mut s = String::from("\n| Transition | Count |\n|---|---|\n");
    for (label, n) in &r.histogram {
        s.push_str(&format!("| {label} | {n} |\n"));
    }
    s.push_str(&format!("\nMean trajectory length: {:.2}\n", r.mean_trajectory_length));
    s
}

fn cmd_score(a: &ScoreArgs) -> Result<Outcome> {
    let stage = StageId::from_number(a.stage).map_err(|e| Error::Config(e.to_string()))?;
    let negatives = if a.positives_only {
        NegativeScoring::PositivesOnly
    } else {
        NegativeScoring::Extended
    };
    let scenes = load_dataset(&a.dataset)?;
    let gts: HashMap<&str, _> = scenes.iter().map(|s| (s.id.as_str(), &s.gt)).collect();
    let weights = RewardWeights::default();
    let mut out = String::new();
    let mut skipped = 0usize;
    for (id, raw, _) in read_raw_lines(&a.rollouts, true)? {
        let id = id.expect("id checked");
        let Some(gt) = gts.get(id.as_str()) else {
            log::warn!("unknown id {id:?} skipped");
            skipped += 1;
            continue;
        };
        let line = ScoreLine {
            id: &id,
            breakdown: score_output(&raw, gt, stage, &weights, negatives),
        };
        out.push_str(&serde_json::to_string(&line).expect("score serializes"));
        out.push('\n');
    }
    if skipped > 0 {
        log::warn!("{skipped} rollouts skipped");
    }
    let (stdout, artifacts, default_manifest) = match &a.out {
        Some(p) => {
            write_text(p, &out)?;
            (String::new(), vec![p.clone()], sibling_manifest(p))
        }
        None => (out, vec![], PathBuf::from(RUN_MANIFEST_FILE)),
    };
    Ok(Outcome {
        config: serde_json::json!({ "args": to_json(a), "skipped": skipped }),
        seed: None,
        artifacts,
        default_manifest,
        stdout,
    })
}

fn cmd_prompt(a: &PromptArgs) -> Result<Outcome> {
    let demos = match &a.demos {
        Some(p) => read_raw_lines(p, false)?
            .into_iter()
            .map(|(_, raw, _)| parse_transcript(&raw).0)
            .collect(),
        None => Vec::new(),
    };
    let prompt = build_incontext_prompt(&a.question, &demos, !a.no_format)?;
    Ok(Outcome {
        config: to_json(a),
        seed: None,
        artifacts: vec![],
        default_manifest: PathBuf::from(RUN_MANIFEST_FILE),
        stdout: prompt + "\n",
    })
}

fn cmd_analyze(a: &AnalyzeArgs) -> Result<Outcome> {
    let records: Vec<EvalRecord> = read_raw_lines(&a.predictions, false)?
        .into_iter()
        .enumerate()
        .map(|(i, (id, raw, _))| EvalRecord {
            id: id.unwrap_or_else(|| i.to_string()),
            prediction: parse_transcript(&raw).0,
            gt: crate::rewards::GroundTruth::negative(),
        })
        .collect();
    let cfg = RefocusConfig {
        ratio: a.ratio,
        slack: a.slack,
    };
    let stats = refocus_stats(&records, &cfg);
    Ok(Outcome {
        config: to_json(a),
        seed: None,
        artifacts: vec![],
        default_manifest: PathBuf::from(RUN_MANIFEST_FILE),
        stdout: serde_json::to_string_pretty(&stats).expect("stats serialize") + "\n",
    })
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenScenes(_) => "gen-scenes",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::ScoreRollouts(_) => "score-rollouts",
        Command::MakePrompt(_) => "make-prompt",
        Command::AnalyzeTrajectories(_) => "analyze-trajectories",
    }
}

/// Runs a parsed command, printing its primary artifact and writing the run manifest.
pub fn run(cli: &Cli, argv: Vec<String>) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        // a pool may already exist when called repeatedly in-process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let start = Instant::now();
    let outcome = match &cli.command {
        Command::GenScenes(a) => gen_scenes(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::ScoreRollouts(a) => cmd_score(a),
        Command::MakePrompt(a) => cmd_prompt(a),
        Command::AnalyzeTrajectories(a) => cmd_analyze(a),
    }?;
    let mut stdout = std::io::stdout().lock();
    stdout
        .write_all(outcome.stdout.as_bytes())
        .and_then(|_| stdout.flush())
        .map_err(|e| Error::io("<stdout>", e))?;
    let manifest = RunManifest {
        command: command_name(&cli.command).into(),
        argv,
        config: outcome.config,
        seed: outcome.seed,
        artifacts: outcome.artifacts,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config_schema_version: CONFIG_SCHEMA_VERSION,
        dataset_schema_version: DATASET_SCHEMA_VERSION,
        duration_secs: start.elapsed().as_secs_f64(),
    };
    let path = cli.manifest.clone().unwrap_or(outcome.default_manifest);
    write_text(&path, &(serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n"))
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn main_with_args(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(&cli, argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
