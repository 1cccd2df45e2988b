//! Command-line front end: argument parsing, config files, run manifests
//! and dispatch to the library.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use nalgebra::DVector;

use crate::channel::{Fading, SnrRange, MAX_FRAME_LEN};
use crate::constellation::Scheme;
use crate::error::{Error, Result};
use crate::eval::{compare_csv, run_eval, EvalConfig, EvalCurve, Method};
use crate::model::{load_checkpoint, save_checkpoint, ModelConfig, TrainingStage, TransformerParams};
use crate::theory::{thm1_csv, thm1_sweep, thm2_csv, thm2_sweep, BinaryGaussianTask};
use crate::training::{train, Curriculum, LossTrace, Phase, TrainConfig};

const CONFIG_HELP: &str = "\
Config files (--config FILE) hold one `key = value` per line, where key is a
long flag name of the subcommand without the leading dashes (e.g. `snr = 30`,
`mod = 16qam`). Blank lines and lines starting with # are ignored, as are
keys starting with `meta.`, so a run manifest can be passed back as a config.
Flags given on the command line override the file.

DEFINED_THREADS caps the number of worker threads.";

#[derive(Debug, Parser)]
#[command(name = "defined", version, about = "In-context symbol detection with decision feedback", after_help = CONFIG_HELP)]
pub struct Cli {
    /// Read defaults from a flat key=value file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a detector (clean-prompt pre-training and/or feedback fine-tuning).
    Train(TrainArgs),
    /// Symbol error rate versus context length for one detector.
    Eval(EvalArgs),
    /// Monte Carlo checks for the linear-attention model.
    #[command(subcommand)]
    Theory(TheoryCommand),
    /// Print a model configuration and its exact parameter count.
    Describe(DescribeArgs),
    /// Join several curve CSVs into one wide table.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PhaseArg {
    Pretrain,
    Finetune,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Args)]
pub struct SystemArgs {
    /// Modulation: bpsk, qpsk, 16qam or 64qam.
    #[arg(long = "mod", value_name = "SCHEME")]
    pub modulation: Scheme,
    #[arg(long, default_value_t = 1)]
    pub n_t: usize,
    #[arg(long, default_value_t = 1)]
    pub n_r: usize,
    /// rayleigh or rician.
    #[arg(long, default_value = "rayleigh")]
    pub fading: String,
    /// Ricean factor (rician fading only).
    #[arg(long, default_value_t = 4.0)]
    pub kappa: f64,
    /// Frame length in (y, x) pairs.
    #[arg(long = "T", default_value_t = MAX_FRAME_LEN)]
    pub t: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl SystemArgs {
    fn fading(&self) -> Result<Fading> {
        Fading::parse(&self.fading, self.kappa)
    }
}

#[derive(Debug, Clone, Args)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    #[command(flatten)]
    pub system: SystemArgs,
    #[arg(long, value_enum, default_value = "all")]
    pub phase: PhaseArg,
    /// Lower end of the training SNR range in dB (default per modulation).
    #[arg(long)]
    pub snr_lo: Option<f64>,
    #[arg(long)]
    pub snr_hi: Option<f64>,
    #[arg(long, default_value_t = 0.7)]
    pub alpha: f64,
    #[arg(long, default_value_t = 512)]
    pub batch: usize,
    /// Optimizer steps of the selected phase (pre-training when --phase all).
    #[arg(long, default_value_t = 20_000)]
    pub steps: usize,
    /// Fine-tuning steps when --phase all.
    #[arg(long, default_value_t = 5_000)]
    pub finetune_steps: usize,
    #[arg(long, default_value_t = 1000)]
    pub epoch_steps: usize,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 500)]
    pub warmup: usize,
    /// Global gradient-norm clip, 0 disables.
    #[arg(long, default_value_t = 1.0)]
    pub clip: f64,
    #[arg(long, value_enum, default_value = "on")]
    pub curriculum: Switch,
    #[arg(long, default_value_t = 11)]
    pub t_start: usize,
    #[arg(long, default_value_t = 5)]
    pub t_step: usize,
    #[arg(long, default_value_t = 2)]
    pub epochs_per_stage: usize,
    /// Pilot counts drawn for feedback prompts.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    pub k_df: Vec<usize>,
    /// Steps between refreshes of the feedback-generating parameters.
    #[arg(long, default_value_t = 1)]
    pub df_refresh: usize,
    /// Stop pre-training when an epoch improves the loss by less than this fraction; 0 disables.
    #[arg(long, default_value_t = 0.01)]
    pub plateau_tol: f64,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 8)]
    pub layers: usize,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    /// Feed-forward width (default 4 x d_model).
    #[arg(long)]
    pub d_ff: Option<usize>,
    /// Checkpoint to start from (required for --phase finetune).
    #[arg(long, value_name = "PATH")]
    pub init: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long, value_name = "PATH")]
    pub ckpt: PathBuf,
    /// Loss trace CSV (default: <ckpt>.trace.csv).
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    #[command(flatten)]
    pub system: SystemArgs,
    /// mmse-pk, mmse-df, mlsd, icl-icl, icl-df, defined-df or defined-icl.
    #[arg(long)]
    pub method: Method,
    /// Test SNR in dB.
    #[arg(long, default_value_t = 20.0)]
    pub snr: f64,
    #[arg(long, default_value_t = 1)]
    pub pilots: usize,
    #[arg(long, default_value_t = 8000)]
    pub prompts: usize,
    #[arg(long, value_name = "PATH")]
    pub ckpt: Option<PathBuf>,
    /// Longest MLSD block (default 12 for BPSK, 8 otherwise).
    #[arg(long)]
    pub mlsd_cap: Option<usize>,
    /// Curve CSV; printed to stdout when absent.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum TheoryCommand {
    /// Mean squared gap to the Bayes posterior versus k.
    Thm1(Thm1Args),
    /// Agreement with the optimal sign rule under a covariance mismatch.
    Thm2(Thm2Args),
}

#[derive(Debug, Clone, Args)]
#[command(args_override_self = true)]
pub struct Thm1Args {
    #[arg(long, default_value_t = 2)]
    pub d: usize,
    /// Isotropic covariance σ²; means are ±e_1.
    #[arg(long, default_value_t = 0.25)]
    pub sigma2: f64,
    /// Fixed query, comma separated (default σ²·e_1).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub query: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "10,100,1000,10000")]
    pub k_grid: Vec<usize>,
    #[arg(long, default_value_t = 100_000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
#[command(args_override_self = true)]
pub struct Thm2Args {
    #[arg(long, default_value_t = 2)]
    pub d: usize,
    /// Covariance scale the detector was trained for.
    #[arg(long, default_value_t = 1.0)]
    pub xi2: f64,
    /// Covariance scale of the test task.
    #[arg(long, default_value_t = 1.0)]
    pub sigma2: f64,
    #[arg(long, value_delimiter = ',', default_value = "1,10,100,1000,10000")]
    pub k_grid: Vec<usize>,
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
#[command(args_override_self = true)]
pub struct DescribeArgs {
    #[arg(long, value_name = "PATH", conflicts_with = "modulation")]
    pub ckpt: Option<PathBuf>,
    /// Describe the default model for this modulation instead of a checkpoint.
    #[arg(long = "mod", value_name = "SCHEME")]
    pub modulation: Option<Scheme>,
    #[arg(long, default_value_t = 1)]
    pub n_t: usize,
    #[arg(long, default_value_t = 1)]
    pub n_r: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 8)]
    pub layers: usize,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    #[arg(long)]
    pub d_ff: Option<usize>,
    /// Also list every tensor.
    #[arg(long)]
    pub tensors: bool,
}

#[derive(Debug, Clone, Args)]
#[command(args_override_self = true)]
pub struct CompareArgs {
    /// Curve CSVs; column names come from the file stems.
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    pub curves: Vec<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

/// Key/value record of one run, written next to its outputs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunManifest {
    pub entries: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&escape(v));
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(Self {
            entries: parse_key_values(text)?.into_iter().collect(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Sibling manifest path of an output file.
    pub fn path_for(output: &Path) -> PathBuf {
        let mut s = output.as_os_str().to_owned();
        s.push(".manifest");
        PathBuf::from(s)
    }
}

/// Backslash-escapes line breaks, and spaces or tabs at either end that
/// the parser would otherwise trim.
fn escape(v: &str) -> String {
    let body = v.trim_matches(BLANK);
    let lead = &v[..v.len() - v.trim_start_matches(BLANK).len()];
    let trail = if body.is_empty() { "" } else { &v[lead.len() + body.len()..] };
    let edge = |s: &str| s.replace(' ', "\\s").replace('\t', "\\t");
    let mut out = edge(lead);
    for ch in body.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out.push_str(&edge(trail));
    out
}

fn unescape(v: &str) -> String {
    let mut out = String::with_capacity(v.len());
    let mut chars = v.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some('r') => out.push('\r'),
                Some('t') => out.push('\t'),
                Some('s') => out.push(' '),
                Some(other) => out.push(other),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

const BLANK: [char; 2] = [' ', '\t'];

/// Parses `key = value` lines in file order.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_matches(BLANK);
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got '{line}'", n + 1)))?;
        let k = k.trim_matches(BLANK);
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), unescape(v.trim_matches(BLANK))));
    }
    Ok(out)
}

/// Splices `--config FILE` contents in as flags placed before the user's
/// own flags, so explicit flags override the file.
fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut config = None;
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy().into_owned();
        if s == "--config" {
            let path = it.next().ok_or_else(|| Error::Config("--config needs a file".into()))?;
            config = Some(PathBuf::from(path));
        } else if let Some(p) = s.strip_prefix("--config=") {
            config = Some(PathBuf::from(p));
        } else {
            rest.push(a);
        }
    }
    let Some(path) = config else {
        return Ok(rest);
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut injected = Vec::new();
    for (k, v) in parse_key_values(&text)? {
        if k.starts_with("meta.") {
            continue;
        }
        injected.push(OsString::from(format!("--{k}")));
        // list values are comma separated and split by the flag's own delimiter
        injected.push(OsString::from(v));
    }
    // insert after the program name and subcommand path
    let mut depth = 1;
    while depth < rest.len() {
        let s = rest[depth].to_string_lossy();
        if s.starts_with('-') {
            break;
        }
        depth += 1;
        if !matches!(s.as_ref(), "theory") {
            break;
        }
    }
    let mut out: Vec<OsString> = rest[..depth].to_vec();
    out.extend(injected);
    out.extend_from_slice(&rest[depth..]);
    Ok(out)
}

/// Parsed command line plus the resolved value of every flag.
pub struct Invocation {
    pub cli: Cli,
    pub resolved: BTreeMap<String, String>,
    pub subcommand: String,
}

/// Parses arguments (after config-file expansion). Usage errors come
/// back as `clap::Error` so the caller can print help and exit.
pub fn parse_args(argv: Vec<OsString>) -> std::result::Result<Invocation, CliError> {
    let argv = expand_config(argv).map_err(CliError::Run)?;
    let cmd = Cli::command();
    let matches = cmd.clone().try_get_matches_from(argv).map_err(CliError::Usage)?;
    let cli = Cli::from_arg_matches(&matches).map_err(CliError::Usage)?;
    let mut resolved = BTreeMap::new();
    let mut path = Vec::new();
    let mut m: &ArgMatches = &matches;
    let mut sub = &cmd;
    while let Some((name, sm)) = m.subcommand() {
        path.push(name.to_string());
        sub = sub.find_subcommand(name).expect("subcommand exists");
        m = sm;
    }
    for arg in sub.get_arguments() {
        let id = arg.get_id().as_str();
        let Some(long) = arg.get_long() else { continue };
        if long == "config" || long == "help" || long == "version" {
            continue;
        }
        if let Ok(Some(raw)) = m.try_get_raw(id) {
            let vals: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
            if arg.get_action().takes_values() {
                resolved.insert(long.to_string(), vals.join(","));
            } else if m.get_flag(id) {
                resolved.insert(long.to_string(), "true".into());
            }
        }
    }
    Ok(Invocation {
        cli,
        resolved,
        subcommand: path.join(" "),
    })
}

#[derive(Debug)]
pub enum CliError {
    Usage(clap::Error),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

fn unix_time() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

struct ManifestWriter {
    manifest: RunManifest,
}

impl ManifestWriter {
    fn start(inv: &Invocation) -> Self {
        let mut entries = inv.resolved.clone();
        entries.insert("meta.subcommand".into(), inv.subcommand.clone());
        entries.insert("meta.version".into(), env!("CARGO_PKG_VERSION").into());
        entries.insert("meta.started".into(), unix_time().to_string());
        Self {
            manifest: RunManifest { entries },
        }
    }

    fn finish(mut self, outputs: &[&Path]) -> Result<PathBuf> {
        let e = &mut self.manifest.entries;
        e.insert("meta.finished".into(), unix_time().to_string());
        let list: Vec<String> = outputs.iter().map(|p| p.display().to_string()).collect();
        e.insert("meta.output".into(), list.join(","));
        let path = RunManifest::path_for(outputs[0]);
        self.manifest.write(&path)?;
        Ok(path)
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn train_config(args: &TrainArgs, model: ModelConfig) -> Result<TrainConfig> {
    let mut tc = TrainConfig::new(model);
    let def = SnrRange::training_default(model.scheme);
    tc.snr = SnrRange::new(args.snr_lo.unwrap_or(def.lo_db), args.snr_hi.unwrap_or(def.hi_db))?;
    tc.fading = args.system.fading()?;
    tc.alpha = args.alpha;
    tc.batch_size = args.batch;
    tc.t = args.system.t;
    tc.k_df = args.k_df.clone();
    tc.epoch_steps = args.epoch_steps;
    tc.adam.lr = args.lr;
    tc.adam.warmup = args.warmup;
    tc.adam.clip_norm = args.clip;
    tc.curriculum = Curriculum {
        enabled: args.curriculum == Switch::On,
        t_start: args.t_start.min(args.system.t),
        t_step: args.t_step,
        epochs_per_stage: args.epochs_per_stage,
    };
    tc.df_refresh = args.df_refresh;
    tc.plateau_tol = (args.plateau_tol > 0.0).then_some(args.plateau_tol);
    tc.seed = args.system.seed;
    match args.phase {
        PhaseArg::Pretrain => tc.pretrain_steps = args.steps,
        PhaseArg::Finetune => tc.finetune_steps = args.steps,
        PhaseArg::All => {
            tc.pretrain_steps = args.steps;
            tc.finetune_steps = args.finetune_steps;
        }
    }
    tc.validate()?;
    Ok(tc)
}

fn cmd_train(inv: &Invocation, args: &TrainArgs) -> Result<()> {
    let scheme = args.system.modulation;
    let (init, start_stage) = match &args.init {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            (Some(ck.params), ck.stage)
        }
        None => (None, TrainingStage::Initialized),
    };
    if args.phase == PhaseArg::Finetune && init.is_none() {
        return Err(Error::Config("--phase finetune needs --init CHECKPOINT".into()));
    }
    let model = match &init {
        Some(p) => {
            let mc = *p.config();
            if mc.scheme != scheme || mc.n_t != args.system.n_t || mc.n_r != args.system.n_r {
                return Err(Error::Config(format!(
                    "--init checkpoint is for {} {}x{}, not {} {}x{}",
                    mc.scheme, mc.n_r, mc.n_t, scheme, args.system.n_r, args.system.n_t
                )));
            }
            mc
        }
        None => {
            let mut mc = ModelConfig::new(scheme, args.system.n_t, args.system.n_r).with_size(
                args.d_model,
                args.layers,
                args.heads,
            );
            if let Some(f) = args.d_ff {
                mc.d_ff = f;
            }
            mc
        }
    };
    let tc = train_config(args, model)?;
    let trace_path = args.out.clone().unwrap_or_else(|| {
        let mut s = args.ckpt.as_os_str().to_owned();
        s.push(".trace.csv");
        PathBuf::from(s)
    });
    let writer = ManifestWriter::start(inv);
    let mut params = match init {
        Some(p) => p,
        None => TransformerParams::init(model, args.system.seed)?,
    };
    let mut trace = LossTrace::default();
    let mut outputs: Vec<PathBuf> = vec![trace_path.clone(), args.ckpt.clone()];
    let mut stage = start_stage;
    let phases: &[Phase] = match args.phase {
        PhaseArg::Pretrain => &[Phase::Pretrain],
        PhaseArg::Finetune => &[Phase::Finetune],
        PhaseArg::All => &[Phase::Pretrain, Phase::Finetune],
    };
    for &phase in phases {
        let first = trace.rows.last().map_or(0, |r| r.step + 1);
        let out = train(&tc, phase, params, first)?;
        trace.extend(out.trace);
        params = out.params;
        if let crate::training::TrainStatus::Diverged { step, loss } = out.status {
            trace.write_csv(&trace_path)?;
            return Err(Error::Diverged { step, loss });
        }
        stage = match phase {
            Phase::Pretrain => TrainingStage::Icl,
            Phase::Finetune => TrainingStage::Finetuned,
        };
        if phase == Phase::Pretrain && args.phase == PhaseArg::All {
            let mut s = args.ckpt.as_os_str().to_owned();
            s.push(".icl");
            let boundary = PathBuf::from(s);
            save_checkpoint(&boundary, &params, stage)?;
            outputs.push(boundary);
        }
    }
    save_checkpoint(&args.ckpt, &params, stage)?;
    trace.write_csv(&trace_path)?;
    let refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    let manifest = writer.finish(&refs)?;
    eprintln!(
        "saved {} ({} stage), trace {}, manifest {}",
        args.ckpt.display(),
        stage.name(),
        trace_path.display(),
        manifest.display()
    );
    Ok(())
}

/// Builds and validates the evaluation config, loading the checkpoint
/// when the method needs one. Everything is checked before any compute.
pub fn eval_setup(args: &EvalArgs) -> Result<(EvalConfig, Option<TransformerParams>)> {
    let scheme = args.system.modulation;
    let mut cfg = EvalConfig::new(args.method, scheme);
    cfg.n_t = args.system.n_t;
    cfg.n_r = args.system.n_r;
    cfg.fading = args.system.fading()?;
    cfg.snr_db = args.snr;
    cfg.k = args.pilots;
    cfg.t = args.system.t;
    cfg.n_prompts = args.prompts;
    cfg.seed = args.system.seed;
    cfg.mlsd_cap = args.mlsd_cap;
    cfg.validate()?;
    let params = if args.method.needs_model() {
        let path = args
            .ckpt
            .as_ref()
            .ok_or_else(|| Error::Config(format!("method {} needs --ckpt", args.method)))?;
        Some(load_checkpoint(path)?.params)
    } else {
        None
    };
    Ok((cfg, params))
}

fn cmd_eval(inv: &Invocation, args: &EvalArgs) -> Result<()> {
    let (cfg, params) = eval_setup(args)?;
    let writer = ManifestWriter::start(inv);
    let curve = run_eval(&cfg, params.as_ref())?;
    write_or_print(args.out.as_deref(), &curve.to_csv())?;
    if let Some(out) = &args.out {
        writer.finish(&[out])?;
    }
    Ok(())
}

fn cmd_thm1(inv: &Invocation, args: &Thm1Args) -> Result<()> {
    let task = BinaryGaussianTask::symmetric(args.d, args.sigma2)?;
    let query = if args.query.is_empty() {
        let mut q = vec![0.0; args.d];
        q[0] = args.sigma2;
        q
    } else {
        args.query.clone()
    };
    if query.len() != args.d {
        return Err(Error::Config(format!("--query has {} entries, --d is {}", query.len(), args.d)));
    }
    let writer = ManifestWriter::start(inv);
    let rows = thm1_sweep(&task, &DVector::from_vec(query), &args.k_grid, args.trials, args.seed)?;
    write_or_print(args.out.as_deref(), &thm1_csv(&rows))?;
    if let Some(out) = &args.out {
        writer.finish(&[out])?;
    }
    Ok(())
}

fn cmd_thm2(inv: &Invocation, args: &Thm2Args) -> Result<()> {
    let task = BinaryGaussianTask::symmetric(args.d, args.sigma2)?;
    let writer = ManifestWriter::start(inv);
    let rows = thm2_sweep(&task, args.xi2, &args.k_grid, args.trials, args.seed)?;
    write_or_print(args.out.as_deref(), &thm2_csv(&rows))?;
    if let Some(out) = &args.out {
        writer.finish(&[out])?;
    }
    Ok(())
}

/// Human-readable model summary.
pub fn describe_text(params_cfg: &ModelConfig, stage: Option<TrainingStage>, tensors: bool) -> String {
    let c = params_cfg;
    let mut s = String::new();
    s.push_str(&format!("modulation: {}\n", c.scheme));
    s.push_str(&format!("antennas: n_t={} n_r={}\n", c.n_t, c.n_r));
    s.push_str(&format!("classes: {}\n", c.n_classes()));
    s.push_str(&format!("input_dim: {}\n", c.input_dim()));
    s.push_str(&format!("d_model: {}\n", c.d_model));
    s.push_str(&format!("layers: {}\n", c.n_layers));
    s.push_str(&format!("heads: {}\n", c.n_heads));
    s.push_str(&format!("d_ff: {}\n", c.d_ff));
    s.push_str(&format!("max_pairs: {}\n", c.max_pairs));
    if let Some(st) = stage {
        s.push_str(&format!("stage: {}\n", st.name()));
    }
    s.push_str(&format!("parameters: {}\n", c.param_count()));
    if tensors {
        if let Ok(p) = TransformerParams::zeros(*c) {
            for t in p.tensors() {
                s.push_str(&format!("  {} {:?} {}\n", t.name, t.shape, t.len()));
            }
        }
    }
    s
}

fn cmd_describe(args: &DescribeArgs) -> Result<()> {
    let (cfg, stage) = match (&args.ckpt, args.modulation) {
        (Some(p), _) => {
            let ck = load_checkpoint(p)?;
            (*ck.params.config(), Some(ck.stage))
        }
        (None, Some(scheme)) => {
            let mut mc = ModelConfig::new(scheme, args.n_t, args.n_r).with_size(args.d_model, args.layers, args.heads);
            if let Some(f) = args.d_ff {
                mc.d_ff = f;
            }
            mc.validate()?;
            (mc, None)
        }
        (None, None) => return Err(Error::Config("describe needs --ckpt or --mod".into())),
    };
    print!("{}", describe_text(&cfg, stage, args.tensors));
    Ok(())
}

fn cmd_compare(inv: &Invocation, args: &CompareArgs) -> Result<()> {
    let mut curves = Vec::new();
    for p in &args.curves {
        let name = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.display().to_string());
        curves.push((name, EvalCurve::read_csv(p)?));
    }
    let writer = ManifestWriter::start(inv);
    write_or_print(args.out.as_deref(), &compare_csv(&curves))?;
    if let Some(out) = &args.out {
        writer.finish(&[out])?;
    }
    Ok(())
}

pub fn dispatch(inv: &Invocation) -> Result<()> {
    match &inv.cli.command {
        Command::Train(a) => cmd_train(inv, a),
        Command::Eval(a) => cmd_eval(inv, a),
        Command::Theory(TheoryCommand::Thm1(a)) => cmd_thm1(inv, a),
        Command::Theory(TheoryCommand::Thm2(a)) => cmd_thm2(inv, a),
        Command::Describe(a) => cmd_describe(a),
        Command::Compare(a) => cmd_compare(inv, a),
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DEFINED_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("DEFINED_THREADS must be a positive integer, got '{v}'")))?;
        if n == 0 {
            return Err(Error::Config("DEFINED_THREADS must be positive".into()));
        }
        // a pool may already exist when embedded; keep it
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Runs the CLI and returns the process exit status.
pub fn run(argv: Vec<OsString>) -> i32 {
    let inv = match parse_args(argv) {
        Ok(inv) => inv,
        Err(CliError::Usage(e)) => {
            let _ = e.print();
            return e.exit_code();
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    if let Err(e) = configure_threads().and_then(|_| dispatch(&inv)) {
        eprintln!("error: {e}");
        return 1;
    }
    0
}
