//! Command-line front end. The `grounding` binary only forwards to [`main_with_args`].

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::event_model::EventTuple;
use crate::metrics::{self, MatchConfig, PerRoleMode};
use crate::reasoner::{run_pipeline, GatingMode, PipelineConfig, RunOutput, RunStats, SceneInput};
use crate::simulator::{self, generate, ScenarioScript};
use crate::stream_io::{
    parse_events, parse_ground_truth, parse_registry, write_predictions, FrameReader,
    GroundTruthFile,
};
use crate::trigger::DebounceConfig;
use crate::vlm_client::{
    FaultConfig, FaultInjector, OracleScript, ReasonerBackend, RemoteBackend, RemoteConfig,
    ScriptedBackend,
};

pub const ENDPOINT_ENV: &str = "GROUNDING_VLM_ENDPOINT";
pub const TOKEN_ENV: &str = "GROUNDING_VLM_TOKEN";

const SCHEMAS: &str = "\
File formats (all UTF-8 JSON):
  frames   *.frames.jsonl  one frame per line:
           {\"frame\":0,\"time\":0.0,\"actions\":{\"person_1\":\"idle\"},
            \"person_crops\":{\"person_1\":\"p1_f0.png\"},\"scene_crop\":\"s_f0.png\"}
           time and frame must strictly increase; scene_crop is optional.
  objects  *.objects.json  {\"objects\":[{\"id\":\"object_1\",\"crop\":\"o1.png\",
           \"first_seen\":0.0,\"label_hint\":\"apple\"}]}
  events   *.events.jsonl  ground truth: first line {\"scenario\":\"sorting\",
           \"constellation\":\"2P+R\",\"recording\":\"...\"}, then one tuple per line:
           {\"actor\":\"person_1\",\"action\":\"handover\",\"object\":\"object_1\",
            \"relation\":{\"rho\":\"to\",\"target\":\"robot_1\"},
            \"robot_interaction\":true,\"time\":4.0}
           Prediction files use the same tuple lines without the header.
  oracle   *.oracle.json   {\"window_s\":10.0,\"answers\":[<tuple>, ...]}
  script   scenario script {\"name\",\"scenario\",\"constellation\",\"objects\":[{\"id\",
           \"label_hint\"}],\"events\":[<tuple>],\"frame_period\",\"event_duration\",
           \"duration\",\"noise\":{\"label_flip_prob\",\"timing_jitter_std_s\",
           \"drop_prob\"},\"seed\"}
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.";

#[derive(Debug, Parser)]
#[command(name = "grounding", version, about = "Trigger-gated event grounding and scoring", after_long_help = SCHEMAS)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate ground truth, frames, registry and oracle answers from a script.
    Simulate(SimulateArgs),
    /// Write every builtin script as JSON into a directory.
    Scripts(ScriptsArgs),
    /// Stream frames through the trigger and reasoner.
    Run(RunArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Score at several temporal tolerances.
    Ablate(AblateArgs),
    /// Simulate, run and score all 16 builtin recordings.
    Suite(SuiteArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Name of a builtin script.
    #[arg(long, conflicts_with = "script", required_unless_present = "script")]
    pub builtin: Option<String>,
    /// Path to a script JSON file; outputs are named after its stem.
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Overrides the script's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScriptsArgs {
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Scripted,
    Fault,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SceneArg {
    Full,
    Cropped,
}

#[derive(Debug, Args)]
pub struct FaultArgs {
    #[arg(long, default_value_t = 0.0)]
    pub p_object: f64,
    #[arg(long, default_value_t = 0.0)]
    pub p_action: f64,
    #[arg(long, default_value_t = 0.0)]
    pub p_relation: f64,
    #[arg(long, default_value_t = 0.0)]
    pub p_flag: f64,
    #[arg(long, default_value_t = 0.0)]
    pub p_malformed: f64,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long)]
    pub objects: PathBuf,
    #[arg(long, value_enum, default_value = "scripted")]
    pub backend: BackendKind,
    /// Oracle answers for the scripted and fault backends.
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    #[command(flatten)]
    pub fault: FaultArgs,
    /// Seed for fault injection.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub min_hold: u32,
    #[arg(long, default_value_t = 2)]
    pub in_flight: usize,
    #[arg(long, value_enum, default_value = "full")]
    pub scene_input: SceneArg,
    /// Baseline: query once per actor per frame instead of on triggers.
    #[arg(long)]
    pub frame_by_frame: bool,
    /// Remote endpoint URL (falls back to $GROUNDING_VLM_ENDPOINT).
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Bearer token (falls back to $GROUNDING_VLM_TOKEN).
    #[arg(long)]
    pub token: Option<String>,
    #[arg(long, default_value_t = 30.0)]
    pub timeout_s: f64,
    /// Directory crop references resolve against; crops are inlined as base64.
    #[arg(long)]
    pub image_root: Option<PathBuf>,
    /// Predictions output (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RoleModeArg {
    Rematch,
    TimeAligned,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Ground-truth files; the n-th pairs with the n-th --pred.
    #[arg(long, required = true)]
    pub gt: Vec<PathBuf>,
    #[arg(long, required = true)]
    pub pred: Vec<PathBuf>,
    #[arg(long, default_value_t = metrics::DEFAULT_DELTA)]
    pub delta: f64,
    /// Also print the per-role table.
    #[arg(long)]
    pub per_role: bool,
    #[arg(long, value_enum, default_value = "rematch")]
    pub per_role_mode: RoleModeArg,
    /// Write the full report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Print per-recording scores.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, required = true)]
    pub gt: Vec<PathBuf>,
    #[arg(long, required = true)]
    pub pred: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
    pub deltas: Vec<f64>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SuiteArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = metrics::DEFAULT_DELTA)]
    pub delta: f64,
    #[arg(long, default_value_t = 2)]
    pub min_hold: u32,
    #[arg(long, default_value_t = 2)]
    pub in_flight: usize,
    /// Keep every recording's files here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

/// A command failure with its exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration: exit 2.
    Usage(String),
    /// Anything failing at run time: exit 1.
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses `args` (program name first), runs the command, returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            match &e {
                CliError::Usage(msg) => eprintln!("error: {msg}"),
                CliError::Runtime(err) => eprintln!("error: {err:#}"),
            }
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let mut out = String::new();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a, &mut out),
        Command::Scripts(a) => scripts(a, &mut out),
        Command::Run(a) => run(a, &mut out),
        Command::Eval(a) => eval(a, &mut out),
        Command::Ablate(a) => ablate(a, &mut out),
        Command::Suite(a) => suite(a, &mut out),
    };
    emit(&out)?;
    result
}

/// Writes command output; a closed pipe (`| head`) is not an error.
fn emit(text: &str) -> Result<(), CliError> {
    let mut stdout = std::io::stdout().lock();
    match stdout
        .write_all(text.as_bytes())
        .and_then(|()| stdout.flush())
    {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
            Err(anyhow::Error::new(e).context("writing to stdout").into())
        }
        _ => Ok(()),
    }
}

fn simulate(a: SimulateArgs, sink: &mut String) -> Result<(), CliError> {
    let (mut script, stem) = match (&a.builtin, &a.script) {
        (Some(name), _) => {
            let script = simulator::builtin(name).ok_or_else(|| {
                usage(format!(
                    "unknown builtin '{name}'; available: {}",
                    simulator::builtin_names().join(", ")
                ))
            })?;
            (script, name.clone())
        }
        (None, Some(path)) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let script = ScenarioScript::from_json(&text)
                .map_err(|e| usage(format!("{}: {e}", path.display())))?;
            let stem = path
                .file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.strip_suffix(".json").unwrap_or(n).to_string())
                .unwrap_or_else(|| script.name.clone());
            (script, stem)
        }
        (None, None) => return Err(usage("give --builtin or --script")),
    };
    if let Some(seed) = a.seed {
        script.seed = seed;
    }
    let out = generate(&script).map_err(|e| usage(e.to_string()))?;
    let paths = out
        .write_to(&a.out, &stem)
        .with_context(|| format!("writing into {}", a.out.display()))?;
    let _ = writeln!(
        sink,
        "{}: {} events, {} frames, {} objects",
        stem,
        out.ground_truth.tuples.len(),
        out.frames.len(),
        out.registry.objects.len()
    );
    for p in [&paths.events, &paths.frames, &paths.objects, &paths.oracle] {
        let _ = writeln!(sink, "  {}", p.display());
    }
    Ok(())
}

fn scripts(a: ScriptsArgs, sink: &mut String) -> Result<(), CliError> {
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for s in simulator::builtins() {
        let path = a.out.join(format!("{}.json", s.name));
        fs::write(&path, s.to_json() + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        let _ = writeln!(sink, "{}", path.display());
    }
    Ok(())
}

fn read_oracle(path: Option<&Path>) -> Result<OracleScript, CliError> {
    let path = path.ok_or_else(|| usage("the scripted and fault backends need --oracle"))?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn build_backend(a: &RunArgs) -> Result<Box<dyn ReasonerBackend>, CliError> {
    Ok(match a.backend {
        BackendKind::Scripted => Box::new(ScriptedBackend::new(read_oracle(a.oracle.as_deref())?)),
        BackendKind::Fault => {
            let cfg = FaultConfig {
                p_object: a.fault.p_object,
                p_action: a.fault.p_action,
                p_relation: a.fault.p_relation,
                p_flag: a.fault.p_flag,
                p_malformed: a.fault.p_malformed,
                seed: a.seed,
            };
            let inner = ScriptedBackend::new(read_oracle(a.oracle.as_deref())?);
            Box::new(FaultInjector::new(inner, cfg).map_err(|e| usage(e.to_string()))?)
        }
        BackendKind::Remote => {
            let endpoint = a
                .endpoint
                .clone()
                .or_else(|| std::env::var(ENDPOINT_ENV).ok())
                .filter(|s| !s.trim().is_empty())
                .ok_or_else(|| {
                    usage(format!(
                        "the remote backend needs --endpoint or ${ENDPOINT_ENV}"
                    ))
                })?;
            if !(a.timeout_s.is_finite() && a.timeout_s > 0.0) {
                return Err(usage("--timeout-s must be positive"));
            }
            let mut cfg = RemoteConfig::new(endpoint);
            cfg.token = a.token.clone().or_else(|| std::env::var(TOKEN_ENV).ok());
            cfg.timeout = Duration::from_secs_f64(a.timeout_s);
            cfg.image_root = a.image_root.clone();
            Box::new(RemoteBackend::new(cfg).map_err(|e| usage(e.to_string()))?)
        }
    })
}

fn write_file(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>,
) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(
        fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    f(&mut w).with_context(|| format!("writing {}", path.display()))?;
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    write_file(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")
    })
}

fn pipeline_config(min_hold: u32, in_flight: usize) -> Result<PipelineConfig, CliError> {
    let debounce = DebounceConfig::new(min_hold).map_err(|e| usage(e.to_string()))?;
    if in_flight == 0 {
        return Err(usage("--in-flight must be at least 1"));
    }
    Ok(PipelineConfig {
        debounce,
        in_flight,
        ..Default::default()
    })
}

fn stats_line(s: &RunStats) -> String {
    format!(
        "frames {} | triggers {} | calls {} | tuples {} | failures {} | mean call {:.2} ms | wall {:.3} s",
        s.frames, s.triggers, s.calls, s.tuples, s.failures, s.mean_call_ms, s.wall_time_s
    )
}

fn run(a: RunArgs, sink: &mut String) -> Result<(), CliError> {
    let mut cfg = pipeline_config(a.min_hold, a.in_flight)?;
    cfg.scene_input = match a.scene_input {
        SceneArg::Full => SceneInput::Full,
        SceneArg::Cropped => SceneInput::Cropped,
    };
    if a.frame_by_frame {
        cfg.gating = GatingMode::EveryFrame;
    }
    let backend = build_backend(&a)?;
    let registry = {
        let f = fs::File::open(&a.objects)
            .with_context(|| format!("opening {}", a.objects.display()))?;
        parse_registry(BufReader::new(f))
            .with_context(|| format!("parsing {}", a.objects.display()))?
    };
    let frames =
        fs::File::open(&a.frames).with_context(|| format!("opening {}", a.frames.display()))?;
    let out = run_pipeline(
        FrameReader::new(BufReader::new(frames)),
        &registry,
        backend.as_ref(),
        &cfg,
    )
    .with_context(|| format!("processing {}", a.frames.display()))?;

    write_file(&a.out, |w| {
        write_predictions(&out.predictions, w).map(|_| ())
    })?;
    if let Some(path) = &a.diagnostics {
        write_file(path, |w| {
            for d in &out.diagnostics {
                writeln!(w, "{}", d.to_json_line())?;
            }
            Ok(())
        })?;
    }
    if let Some(path) = &a.stats {
        write_json(path, &out.stats)?;
    }
    let _ = writeln!(sink, "{}", stats_line(&out.stats));
    Ok(())
}

fn load_pairs(
    gts: &[PathBuf],
    preds: &[PathBuf],
) -> Result<Vec<(GroundTruthFile, Vec<EventTuple>)>, CliError> {
    if gts.len() != preds.len() {
        return Err(usage(format!(
            "got {} --gt files but {} --pred files; they pair up in order",
            gts.len(),
            preds.len()
        )));
    }
    gts.iter()
        .zip(preds)
        .map(|(g, p)| {
            let gf = fs::File::open(g).with_context(|| format!("opening {}", g.display()))?;
            let gt = parse_ground_truth(BufReader::new(gf))
                .with_context(|| format!("parsing {}", g.display()))?;
            let pf = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
            let pred = parse_events(BufReader::new(pf))
                .with_context(|| format!("parsing {}", p.display()))?;
            Ok((gt, pred))
        })
        .collect()
}

fn match_config(delta: f64) -> Result<MatchConfig, CliError> {
    MatchConfig::new(delta).map_err(|e| usage(e.to_string()))
}

fn eval(a: EvalArgs, sink: &mut String) -> Result<(), CliError> {
    let mut cfg = match_config(a.delta)?;
    cfg.per_role = match a.per_role_mode {
        RoleModeArg::Rematch => PerRoleMode::Rematch,
        RoleModeArg::TimeAligned => PerRoleMode::TimeAligned,
    };
    let pairs = load_pairs(&a.gt, &a.pred)?;
    let report = metrics::score_suite(&pairs, &cfg);
    sink.push_str(&metrics::render_table(&report));
    if a.per_role {
        sink.push('\n');
        sink.push_str(&metrics::render_roles(&report));
    }
    if a.verbose {
        sink.push('\n');
        for (r, g) in report.recordings.iter().zip(&a.gt) {
            let _ = writeln!(
                sink,
                "{}: tp {} fp {} fn {} P {:.3} R {:.3} GS {:.3}",
                g.display(),
                r.overall.counts.tp,
                r.overall.counts.fp,
                r.overall.counts.fn_,
                r.overall.precision,
                r.overall.recall,
                r.overall.gs
            );
        }
    }
    if let Some(path) = &a.json {
        write_json(path, &report)?;
    }
    Ok(())
}

fn ablate(a: AblateArgs, sink: &mut String) -> Result<(), CliError> {
    let pairs = load_pairs(&a.gt, &a.pred)?;
    let table = metrics::ablate_suite(&pairs, &a.deltas).map_err(|e| usage(e.to_string()))?;
    sink.push_str(&metrics::render_ablation(&table));
    if let Some(path) = &a.json {
        write_json(path, &table)?;
    }
    Ok(())
}

/// Generates `script` and runs it through the scripted backend.
pub fn simulate_and_run(
    script: &ScenarioScript,
    cfg: &PipelineConfig,
) -> anyhow::Result<(simulator::SimOutput, RunOutput)> {
    let sim = generate(script)?;
    let backend = ScriptedBackend::new(sim.oracle.clone());
    let out = run_pipeline(
        sim.frames.iter().cloned().map(Ok),
        &sim.registry,
        &backend,
        cfg,
    )?;
    Ok((sim, out))
}

#[derive(Debug, Serialize)]
struct SuiteSummary {
    report: metrics::ScoreReport,
    runs: Vec<(String, RunStats)>,
}

fn suite(a: SuiteArgs, sink: &mut String) -> Result<(), CliError> {
    let cfg = pipeline_config(a.min_hold, a.in_flight)?;
    let mcfg = match_config(a.delta)?;
    let scripts: Vec<ScenarioScript> = simulator::builtin_suite()
        .into_iter()
        .map(|s| s.with_seed(a.seed))
        .collect();
    let results: Vec<(simulator::SimOutput, RunOutput)> = scripts
        .par_iter()
        .map(|s| simulate_and_run(s, &cfg).with_context(|| s.name.clone()))
        .collect::<anyhow::Result<_>>()?;

    if let Some(dir) = &a.out {
        for (s, (sim, out)) in scripts.iter().zip(&results) {
            sim.write_to(dir, &s.name)
                .with_context(|| format!("writing into {}", dir.display()))?;
            write_file(&dir.join(format!("{}.pred.jsonl", s.name)), |w| {
                write_predictions(&out.predictions, w).map(|_| ())
            })?;
        }
    }

    let pairs: Vec<(GroundTruthFile, Vec<EventTuple>)> = results
        .iter()
        .map(|(sim, out)| (sim.ground_truth.clone(), out.predictions.clone()))
        .collect();
    let report = metrics::score_suite(&pairs, &mcfg);
    sink.push_str(&metrics::render_table(&report));
    sink.push('\n');
    sink.push_str(&metrics::render_roles(&report));
    let (frames, calls): (u64, u64) = results.iter().fold((0, 0), |(f, c), (_, o)| {
        (f + o.stats.frames, c + o.stats.calls)
    });
    sink.push('\n');
    let _ = writeln!(
        sink,
        "{} recordings | {frames} frames | {calls} reasoner calls",
        results.len()
    );

    if let Some(path) = &a.json {
        let summary = SuiteSummary {
            report,
            runs: scripts
                .iter()
                .zip(&results)
                .map(|(s, (_, o))| (s.name.clone(), o.stats.clone()))
                .collect(),
        };
        write_json(path, &summary)?;
    }
    Ok(())
}
