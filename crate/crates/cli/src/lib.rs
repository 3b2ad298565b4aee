//! The `dablog` command line: corpus generation, training, detection and evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dablog_core::datagen::{generate_corpus, to_labels, to_records, training_seed, AnomalyOp, GrammarSpec};
use dablog_core::evaluation::{confusion, parse_grid, sweep, sweep_csv, EvalReport};
use dablog_core::keyset::{build_vocabulary, FilepathTable, Granularity, KeyDeriver, KeySet};
use dablog_core::persist::sha256_hex;
use dablog_core::records::{read_jsonl, read_labels, read_records, write_jsonl, write_labels};
use dablog_core::sequencer::{assemble_sessions, Label, Session};
use dablog_core::{CriticConfig, Detector, MergeMode, RunConfig, VerdictLine};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const LABELS_FILE: &str = "labels.jsonl";
pub const SESSIONS_FILE: &str = "sessions.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "dablog", version, about = "Anomaly detection over discrete event logs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled synthetic corpus from a grammar.
    Gen(GenArgs),
    /// Build a key vocabulary from a record file.
    BuildKeys(BuildKeysArgs),
    /// Train a model on normal sessions.
    Train(TrainArgs),
    /// Label every session of a corpus with a trained model.
    Detect(DetectArgs),
    /// Compare verdicts against ground-truth labels.
    Eval(EvalArgs),
    /// Sweep the rank threshold and write one CSV row per grid point.
    Sweep(SweepArgs),
    /// Combine two verdict files by intersection or union.
    Merge(MergeArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub normal: usize,
    #[arg(long, default_value_t = 0)]
    pub abnormal: usize,
    /// Draw from the training stream of the seed; abnormal sessions are not allowed.
    #[arg(long)]
    pub train: bool,
    /// Grammar JSON; the built-in desk grammar when absent.
    #[arg(long)]
    pub grammar: Option<PathBuf>,
    /// Output directory.
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct KeyArgs {
    /// Filepath template table (JSON) used at K2.
    #[arg(long)]
    pub filepaths: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildKeysArgs {
    /// Corpus directory or record file.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value = "K1")]
    pub granularity: Granularity,
    #[command(flatten)]
    pub keys: KeyArgs,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Dablog,
    Baseline,
    Freq,
}

impl ModelKind {
    fn name(self) -> &'static str {
        match self {
            ModelKind::Dablog => "dablog",
            ModelKind::Baseline => "baseline",
            ModelKind::Freq => "freq",
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub kind: ModelKind,
    /// Run configuration (TOML); defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus directory or record file. Abnormal sessions are dropped when labels are present.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Prebuilt vocabulary; otherwise built from the training records.
    #[arg(long = "keys")]
    pub keyset: Option<PathBuf>,
    #[command(flatten)]
    pub keys: KeyArgs,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Rank threshold in percent of the key dimension; overrides the config.
    #[arg(long = "theta-n")]
    pub theta_n: Option<f64>,
    /// Probability threshold; replaces the rank criterion.
    #[arg(long = "theta-p")]
    pub theta_p: Option<f64>,
    #[command(flatten)]
    pub keys: KeyArgs,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub verdicts: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    pub format: ReportFormat,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Text,
    Json,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Label file; `labels.jsonl` next to the records when absent.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `start:stop:step` or a comma list of θ_N values; overrides the config.
    #[arg(long)]
    pub grid: Option<String>,
    #[command(flatten)]
    pub keys: KeyArgs,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MergeArg {
    Intersection,
    Union,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, value_enum)]
    pub mode: MergeArg,
    #[arg(short, long)]
    pub out: PathBuf,
}

/// Failure of one invocation. Validation maps to exit status 1, runtime to 2.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn status(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<dablog_core::Error> for CliError {
    fn from(e: dablog_core::Error) -> Self {
        use dablog_core::Error as E;
        let msg = e.to_string().replace('\n', " ");
        match e {
            E::Io(ref io) if io.kind() != std::io::ErrorKind::NotFound => CliError::Runtime(msg),
            E::Shape(_) | E::NonFinite(_) | E::IdOutOfRange { .. } => CliError::Runtime(msg),
            _ => CliError::Validation(msg),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn validation(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| {
        let msg = format!("{}: {e}", path.display());
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Validation(msg)
        } else {
            CliError::Runtime(msg)
        }
    })
}

fn read_text(path: &Path) -> CliResult<String> {
    String::from_utf8(read_file(path)?).map_err(|_| validation(format!("{}: not UTF-8", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Provenance written next to every output.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub args: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    fn new(command: &str, args: &[String]) -> Self {
        Manifest {
            tool: "dablog",
            version: env!("CARGO_PKG_VERSION"),
            command: command.into(),
            args: args.to_vec(),
            config_hash: None,
            seed: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            notes: BTreeMap::new(),
        }
    }

    fn input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs.insert(path.display().to_string(), sha256_hex(bytes));
    }

    fn output(&mut self, path: &Path, bytes: &[u8]) -> CliResult<()> {
        write_file(path, bytes)?;
        self.outputs.insert(path.display().to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn config(&mut self, cfg: &RunConfig) -> CliResult<()> {
        self.config_hash = Some(cfg.hash()?);
        self.seed = Some(cfg.seed);
        Ok(())
    }

    /// Directory outputs get `manifest.json` inside; file outputs get `<file>.manifest.json`.
    fn write(&self, out: &Path, is_dir: bool) -> CliResult<()> {
        let path = if is_dir {
            out.join(MANIFEST_FILE)
        } else {
            let mut name = out.file_name().unwrap_or_default().to_os_string();
            name.push(".manifest.json");
            out.with_file_name(name)
        };
        let mut text = serde_json::to_string_pretty(self).map_err(dablog_core::Error::from)?;
        text.push('\n');
        write_file(&path, text.as_bytes())
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit status.
/// Diagnostics go to `err` as a single line.
pub fn run<W: Write>(argv: &[String], err: &mut W) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            let _ = writeln!(err, "{line}");
            return 1;
        }
    };
    let args: Vec<String> = argv.iter().skip(1).cloned().collect();
    match dispatch(cli.command, &args) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.status()
        }
    }
}

fn dispatch(cmd: Command, args: &[String]) -> CliResult<()> {
    match cmd {
        Command::Gen(a) => gen(a, args),
        Command::BuildKeys(a) => build_keys(a, args),
        Command::Train(a) => train(a, args),
        Command::Detect(a) => detect(a, args),
        Command::Eval(a) => eval(a, args),
        Command::Sweep(a) => sweep_cmd(a, args),
        Command::Merge(a) => merge(a, args),
    }
}

/// Per-session generation metadata, without the events.
#[derive(Debug, Serialize)]
struct SessionMeta<'a> {
    session_id: &'a str,
    label: Label,
    template: &'a str,
    rare_variant: bool,
    op: Option<AnomalyOp>,
}

fn gen(a: GenArgs, args: &[String]) -> CliResult<()> {
    let mut m = Manifest::new("gen", args);
    let mut g = match &a.grammar {
        Some(p) => {
            let bytes = read_file(p)?;
            m.input(p, &bytes);
            serde_json::from_slice::<GrammarSpec>(&bytes).map_err(|e| validation(format!("{}: {e}", p.display())))?
        }
        None => GrammarSpec::desk(a.seed),
    };
    g.seed = a.seed;
    if a.train {
        if a.abnormal > 0 {
            return Err(validation("--train corpora contain normal sessions only"));
        }
        g.seed = training_seed(a.seed);
    }
    g.validate()?;
    m.seed = Some(g.seed);
    let corpus = generate_corpus(&g, a.normal, a.abnormal)?;

    let mut records = Vec::new();
    write_jsonl(&mut records, &to_records(&corpus))?;
    let mut labels = Vec::new();
    write_labels(&mut labels, &to_labels(&corpus))?;
    let meta: Vec<SessionMeta> = corpus
        .iter()
        .map(|s| SessionMeta {
            session_id: &s.session_id,
            label: s.label,
            template: &s.template,
            rare_variant: s.rare_variant,
            op: s.op,
        })
        .collect();
    let mut sessions = Vec::new();
    write_jsonl(&mut sessions, &meta)?;
    m.output(&a.out.join(RECORDS_FILE), &records)?;
    m.output(&a.out.join(LABELS_FILE), &labels)?;
    m.output(&a.out.join(SESSIONS_FILE), &sessions)?;
    m.write(&a.out, true)
}

/// A directory argument means its `records.jsonl`.
fn records_path(input: &Path) -> PathBuf {
    if input.is_dir() {
        input.join(RECORDS_FILE)
    } else {
        input.to_path_buf()
    }
}

fn sibling_labels(input: &Path) -> PathBuf {
    if input.is_dir() {
        input.join(LABELS_FILE)
    } else {
        input.with_file_name(LABELS_FILE)
    }
}

fn deriver(granularity: Granularity, keys: &KeyArgs, m: &mut Manifest) -> CliResult<KeyDeriver> {
    let mut d = KeyDeriver::new(granularity);
    if let Some(p) = &keys.filepaths {
        let text = read_text(p)?;
        m.input(p, text.as_bytes());
        d = d.with_filepaths(FilepathTable::from_json(&text)?);
    }
    Ok(d)
}

fn load_records(input: &Path, m: &mut Manifest) -> CliResult<Vec<dablog_core::RawEventRecord>> {
    let path = records_path(input);
    let bytes = read_file(&path)?;
    m.input(&path, &bytes);
    Ok(read_records(bytes.as_slice())?)
}

fn load_config(path: Option<&Path>, m: &mut Manifest) -> CliResult<RunConfig> {
    let cfg = match path {
        Some(p) => {
            let text = read_text(p)?;
            m.input(p, text.as_bytes());
            RunConfig::from_toml_str(&text)?
        }
        None => RunConfig::default(),
    };
    m.config(&cfg)?;
    Ok(cfg)
}

fn build_keys(a: BuildKeysArgs, args: &[String]) -> CliResult<()> {
    let mut m = Manifest::new("build-keys", args);
    let records = load_records(&a.input, &mut m)?;
    let d = deriver(a.granularity, &a.keys, &mut m)?;
    let ks = build_vocabulary(&records, &d)?;
    m.notes.insert("v".into(), ks.v().into());
    m.output(&a.out, ks.to_json()?.as_bytes())?;
    m.write(&a.out, false)
}

fn train(a: TrainArgs, args: &[String]) -> CliResult<()> {
    let mut m = Manifest::new("train", args);
    let cfg = load_config(a.config.as_deref(), &mut m)?;
    let mut records = load_records(&a.input, &mut m)?;
    let labels_path = sibling_labels(&a.input);
    if labels_path.is_file() {
        let bytes = read_file(&labels_path)?;
        m.input(&labels_path, &bytes);
        let labels = read_labels(bytes.as_slice())?;
        records.retain(|r| labels.get(&r.session_id) != Some(&Label::Abnormal));
    }
    let ks = match &a.keyset {
        Some(p) => {
            let text = read_text(p)?;
            m.input(p, text.as_bytes());
            KeySet::from_json(&text)?
        }
        None => build_vocabulary(&records, &deriver(cfg.granularity, &a.keys, &mut m)?)?,
    };
    let d = deriver(ks.granularity(), &a.keys, &mut m)?;
    let sessions = assemble_sessions(&records, &ks, &d)?;
    let (det, trace) = Detector::train(a.kind.name(), &cfg, &ks, &sessions)?;
    m.notes.insert("model_kind".into(), a.kind.name().into());
    m.notes.insert("sessions".into(), sessions.len().into());
    if let Some(last) = trace.last() {
        m.notes.insert("final_loss".into(), (*last).into());
    }
    m.output(&a.out, det.to_model_file().to_json()?.as_bytes())?;
    m.write(&a.out, false)
}

fn load_model(path: &Path, m: &mut Manifest) -> CliResult<Detector> {
    let text = read_text(path)?;
    m.input(path, text.as_bytes());
    Ok(Detector::from_model_json(&text)?)
}

fn load_sessions(det: &Detector, input: &Path, keys: &KeyArgs, m: &mut Manifest) -> CliResult<Vec<Session>> {
    let records = load_records(input, m)?;
    let d = deriver(det.keyset().granularity(), keys, m)?;
    Ok(assemble_sessions(&records, det.keyset(), &d)?)
}

fn detect(a: DetectArgs, args: &[String]) -> CliResult<()> {
    let mut m = Manifest::new("detect", args);
    let cfg = load_config(a.config.as_deref(), &mut m)?;
    let det = load_model(&a.model, &mut m)?;
    let sessions = load_sessions(&det, &a.input, &a.keys, &mut m)?;
    let mut critic: CriticConfig = match (a.theta_p, a.theta_n) {
        (Some(p), _) => CriticConfig::threshold(p),
        (None, Some(n)) => CriticConfig::rank(n),
        (None, None) => cfg.critic_config(),
    };
    critic.skip_sentinels = cfg.critic.skip_sentinels;
    critic.validate()?;
    let dim = det.keyset().dim();
    let scores = det.score_sessions(&sessions, critic.skip_sentinels)?;
    let lines: Vec<VerdictLine> =
        scores.iter().map(|s| VerdictLine::new(s, &s.verdict(&critic, dim), det.keyset())).collect();
    let abnormal = lines.iter().filter(|l| l.label == Label::Abnormal).count();
    m.notes.insert("sessions".into(), lines.len().into());
    m.notes.insert("abnormal".into(), abnormal.into());
    let mut out = Vec::new();
    write_jsonl(&mut out, &lines)?;
    m.output(&a.out, &out)?;
    m.write(&a.out, false)
}

fn load_verdicts(path: &Path, m: &mut Manifest) -> CliResult<Vec<VerdictLine>> {
    let bytes = read_file(path)?;
    m.input(path, &bytes);
    Ok(read_jsonl(bytes.as_slice())?)
}

fn eval(a: EvalArgs, args: &[String]) -> CliResult<()> {
    let mut m = Manifest::new("eval", args);
    let verdicts = load_verdicts(&a.verdicts, &mut m)?;
    let mut predicted = BTreeMap::new();
    for v in &verdicts {
        if predicted.insert(v.session_id.clone(), v.label).is_some() {
            return Err(validation(format!("duplicate verdict for session {}", v.session_id)));
        }
    }
    let bytes = read_file(&a.labels)?;
    m.input(&a.labels, &bytes);
    let truth = read_labels(bytes.as_slice())?;
    let report = EvalReport::new(confusion(&predicted, &truth)?);
    let text = match a.format {
        ReportFormat::Text => report.to_table(),
        ReportFormat::Json => {
            let mut t = serde_json::to_string_pretty(&report).map_err(dablog_core::Error::from)?;
            t.push('\n');
            t
        }
    };
    print!("{}", report.to_table());
    m.output(&a.out, text.as_bytes())?;
    m.write(&a.out, false)
}

fn sweep_cmd(a: SweepArgs, args: &[String]) -> CliResult<()> {
    let mut m = Manifest::new("sweep", args);
    let cfg = load_config(a.config.as_deref(), &mut m)?;
    let grid = parse_grid(a.grid.as_deref().unwrap_or(&cfg.critic.grid))?;
    let det = load_model(&a.model, &mut m)?;
    let sessions = load_sessions(&det, &a.input, &a.keys, &mut m)?;
    let labels_path = a.labels.clone().unwrap_or_else(|| sibling_labels(&a.input));
    let bytes = read_file(&labels_path)?;
    m.input(&labels_path, &bytes);
    let truth = read_labels(bytes.as_slice())?;
    let scores = det.score_sessions(&sessions, cfg.critic.skip_sentinels)?;
    let points = sweep(&scores, &truth, &grid, det.keyset().dim())?;
    m.output(&a.out, sweep_csv(&points).as_bytes())?;
    m.write(&a.out, false)
}

fn merge(a: MergeArgs, args: &[String]) -> CliResult<()> {
    let mut m = Manifest::new("merge", args);
    let x = load_verdicts(&a.a, &mut m)?;
    let y = load_verdicts(&a.b, &mut m)?;
    let mode = match a.mode {
        MergeArg::Intersection => MergeMode::Intersection,
        MergeArg::Union => MergeMode::Union,
    };
    let merged = dablog_core::detector::merge_verdicts(&x, &y, mode)?;
    let mut out = Vec::new();
    write_jsonl(&mut out, &merged)?;
    m.output(&a.out, &out)?;
    m.write(&a.out, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(args: &[&str]) -> Vec<String> {
        std::iter::once("dablog").chain(args.iter().copied()).map(String::from).collect()
    }

    #[test]
    fn core_errors_map_to_exit_status() {
        use dablog_core::Error as E;
        assert_eq!(CliError::from(E::InvalidArgument("x".into())).status(), 1);
        assert_eq!(CliError::from(E::Io(std::io::ErrorKind::NotFound.into())).status(), 1);
        assert_eq!(CliError::from(E::Io(std::io::ErrorKind::PermissionDenied.into())).status(), 2);
        assert_eq!(CliError::from(E::NonFinite("loss")).status(), 2);
    }

    #[test]
    fn parse_failures_print_one_line() {
        let mut err = Vec::new();
        assert_eq!(run(&argv(&["detect", "--model"]), &mut err), 1);
        assert_eq!(String::from_utf8(err).unwrap().lines().count(), 1);
    }

    #[test]
    fn file_manifest_sits_next_to_output() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("v.jsonl");
        let mut m = Manifest::new("x", &[]);
        m.output(&out, b"{}\n").unwrap();
        m.write(&out, false).unwrap();
        let text = fs::read_to_string(dir.path().join("v.jsonl.manifest.json")).unwrap();
        assert!(text.contains(&sha256_hex(b"{}\n")));
    }
}
