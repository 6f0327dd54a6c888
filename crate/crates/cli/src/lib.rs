//! Command-line front end. Every subcommand parses its flags, calls into
//! `cbl_core`, and writes the results; nothing here computes anything the
//! library does not.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cbl_core::harness::{
    eval_all, render_ablation_text, render_report_text, run_ablation, run_protocol,
    AblationReport, EvalReport, HarnessError, HarnessOptions, ProtocolRun, Provenance,
};
use cbl_core::memory::{BankError, MemoryBank, ModuleKind, Timestamp};
use cbl_core::par::Execution;
use cbl_core::runtime::{
    BackendPool, FixtureSet, ProviderBackend, ProviderConfig, SharedBackend, TraceClock,
};
use cbl_core::transfer::{export_bundle, import_bundle, read_bundle, TransferError};
use cbl_core::{Strategy, Suite};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INVARIANT: i32 = 2;

/// Agent id of the bank seeded from the suite when `--bank` is not given.
pub const DEFAULT_AGENT: &str = "cbl-agent";

#[derive(Debug, Parser)]
#[command(name = "cbl", version, about = "Case-based learning engine for LLM agents")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a bank file, empty or seeded with the suite's facts.
    Init(InitArgs),
    /// Run the protocol for one strategy.
    Run(RunArgs),
    /// Run the case-based method and all four baselines, then compare.
    EvalAll(EvalArgs),
    /// Run the ablation conditions over a bundle.
    Ablate(AblateArgs),
    /// Export a bank as a bundle.
    Export(ExportArgs),
    /// Import a bundle into a new bank.
    Import(ImportArgs),
    /// Pretty-print a bank or bundle.
    Inspect(InspectArgs),
    /// Check a stored report and render its tables.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long, default_value = DEFAULT_AGENT)]
    pub agent: String,
    /// Seed the bank with this suite's facts.
    #[arg(long)]
    pub suite: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    #[arg(long)]
    pub suite: PathBuf,
    /// `replay=<fixture dir>` or `provider=<config.json>`.
    #[arg(long)]
    pub backend: String,
    /// Output directory; each invocation writes a new `run-NNNN` inside it.
    #[arg(long)]
    pub out: PathBuf,
    /// Context budget in characters (defaults to the suite's).
    #[arg(long)]
    pub budget: Option<usize>,
    /// Run jobs one at a time.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: BackendArgs,
    /// cbl, zero-shot, few-shot[:k], checklist or rule-memory.
    #[arg(long)]
    pub strategy: Strategy,
    /// Initial bank (defaults to the suite's seed facts).
    #[arg(long)]
    pub bank: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: BackendArgs,
    #[arg(long)]
    pub bank: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: BackendArgs,
    #[arg(long)]
    pub bundle: PathBuf,
    /// Diagnostic task; repeatable (defaults to the suite's list).
    #[arg(long = "task")]
    pub tasks: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Export timestamp in ms since the Unix epoch (defaults to now).
    #[arg(long)]
    pub exported_at: Option<Timestamp>,
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    pub bundle: PathBuf,
    #[arg(long)]
    pub agent: String,
    /// Store to leave out; repeatable.
    #[arg(long = "drop")]
    pub drop: Vec<ModuleKind>,
    /// Existing bank to merge into; it is read, not modified.
    #[arg(long)]
    pub merge_into: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// A `report.json` or `ablation.json`.
    pub path: PathBuf,
}

/// Marks errors that mean an invariant check failed (exit 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct InvariantFailure(pub String);

/// Parses `argv` and runs it. Returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(stdout) => {
            print!("{stdout}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

/// Exit code for a failed command.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    for cause in e.chain() {
        if cause.is::<InvariantFailure>() {
            return EXIT_INVARIANT;
        }
        if let Some(h) = cause.downcast_ref::<HarnessError>() {
            if matches!(h, HarnessError::Invariant(_) | HarnessError::SampleCount { .. }) {
                return EXIT_INVARIANT;
            }
        }
        if let Some(TransferError::HashMismatch { .. }) = cause.downcast_ref::<TransferError>() {
            return EXIT_INVARIANT;
        }
    }
    EXIT_USAGE
}

/// Runs one subcommand; the returned text goes to standard output.
pub fn execute(command: Command) -> Result<String> {
    match command {
        Command::Init(a) => init(a),
        Command::Run(a) => run(a),
        Command::EvalAll(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Export(a) => export(a),
        Command::Import(a) => import(a),
        Command::Inspect(a) => inspect(a),
        Command::Report(a) => report(a),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Writes a new file; refuses to replace an existing one.
fn create(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut file = fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .with_context(|| format!("creating {}", path.display()))?;
    std::io::Write::write_all(&mut file, contents.as_bytes())
        .with_context(|| format!("writing {}", path.display()))
}

pub fn load_suite(path: &Path) -> Result<Suite> {
    Suite::load(path).with_context(|| format!("loading suite {}", path.display()))
}

pub fn load_bank(path: &Path) -> Result<MemoryBank> {
    let bank = MemoryBank::deserialize(&read(path)?)
        .with_context(|| format!("loading bank {}", path.display()))?;
    bank.validate().map_err(|e: BankError| {
        anyhow!(InvariantFailure(format!("{}: {e}", path.display())))
    })?;
    Ok(bank)
}

/// A backend selected by `replay=<dir>` or `provider=<config>`.
pub enum BackendChoice {
    Replay(FixtureSet),
    Provider(SharedBackend),
}

impl BackendChoice {
    pub fn parse(spec: &str) -> Result<Self> {
        let (kind, path) = spec
            .split_once('=')
            .ok_or_else(|| anyhow!("--backend must be replay=<dir> or provider=<config>"))?;
        match kind {
            "replay" => Ok(BackendChoice::Replay(
                FixtureSet::load(path).with_context(|| format!("loading fixtures {path}"))?,
            )),
            "provider" => {
                let config = ProviderConfig::load(path)?;
                let fingerprint = config.fingerprint();
                let backend = ProviderBackend::from_env(config)?;
                Ok(BackendChoice::Provider(SharedBackend::new(Arc::new(backend), fingerprint)))
            }
            other => bail!("unknown backend kind `{other}` (expected replay or provider)"),
        }
    }

    pub fn pool(&self) -> &dyn BackendPool {
        match self {
            BackendChoice::Replay(f) => f,
            BackendChoice::Provider(p) => p,
        }
    }

    /// Replay runs use the logical clock so their outputs are reproducible.
    pub fn clock(&self) -> TraceClock {
        match self {
            BackendChoice::Replay(_) => TraceClock::default(),
            BackendChoice::Provider(_) => TraceClock::Wall,
        }
    }
}

struct Setup {
    suite: Suite,
    backend: BackendChoice,
    options: HarnessOptions,
    run_dir: PathBuf,
}

fn setup(common: &BackendArgs) -> Result<Setup> {
    let suite = load_suite(&common.suite)?;
    let backend = BackendChoice::parse(&common.backend)?;
    let mut options = HarnessOptions::for_suite(&suite);
    options.run.clock = backend.clock();
    if let Some(budget) = common.budget {
        options.run.budget_chars = budget;
    }
    if common.sequential {
        options.execution = Execution::Sequential;
    }
    let run_dir = next_run_dir(&common.out)?;
    Ok(Setup {
        suite,
        backend,
        options,
        run_dir,
    })
}

/// Creates the first unused `run-NNNN` directory under `out`.
pub fn next_run_dir(out: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for n in 1..10_000 {
        let dir = out.join(format!("run-{n:04}"));
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    bail!("{} has no free run directory", out.display())
}

fn initial_bank(suite: &Suite, bank: Option<&PathBuf>) -> Result<MemoryBank> {
    match bank {
        Some(path) => load_bank(path),
        None => Ok(suite.seed_bank(DEFAULT_AGENT)),
    }
}

fn write_runs(dir: &Path, runs: &[ProtocolRun]) -> Result<()> {
    for run in runs {
        for task in &run.tasks {
            create(
                &dir.join("banks").join(&run.label).join(format!("{}.json", task.task)),
                &task.final_bank.serialize(),
            )?;
            let samples = serde_json::to_value(&task.samples)?;
            create(
                &dir.join("samples").join(&run.label).join(format!("{}.json", task.task)),
                &cbl_core::memory::canonical_json(&samples),
            )?;
        }
    }
    Ok(())
}

fn finish_eval(dir: &Path, report: &EvalReport, runs: &[ProtocolRun]) -> Result<String> {
    let text = render_report_text(report);
    create(&dir.join("report.json"), &report.to_json())?;
    create(&dir.join("report.txt"), &text)?;
    write_runs(dir, runs)?;
    report
        .check()
        .map_err(|e| anyhow!(InvariantFailure(format!("{}: {e}", dir.display()))))?;
    Ok(format!("{text}\nwrote {}\n", dir.display()))
}

fn init(a: InitArgs) -> Result<String> {
    let bank = match &a.suite {
        Some(path) => load_suite(path)?.seed_bank(&a.agent),
        None => MemoryBank::new(a.agent.clone()),
    };
    create(&a.out, &bank.serialize())?;
    Ok(format!("wrote {} ({} facts)\n", a.out.display(), bank.facts.len()))
}

fn run(a: RunArgs) -> Result<String> {
    let s = setup(&a.common)?;
    let bank0 = initial_bank(&s.suite, a.bank.as_ref())?;
    let pool = s.backend.pool();
    let run = run_protocol(&s.suite, a.strategy, pool, &bank0, &s.options)?;
    let runs = [run];
    let report = EvalReport::from_runs(&runs, Provenance::new(&s.suite, pool, &s.options));
    finish_eval(&s.run_dir, &report, &runs)
}

fn eval(a: EvalArgs) -> Result<String> {
    let s = setup(&a.common)?;
    let bank0 = initial_bank(&s.suite, a.bank.as_ref())?;
    let (report, runs) = eval_all(&s.suite, s.backend.pool(), &bank0, &s.options)?;
    finish_eval(&s.run_dir, &report, &runs)
}

fn ablate(a: AblateArgs) -> Result<String> {
    let s = setup(&a.common)?;
    let bundle = read(&a.bundle)?;
    let tasks = if a.tasks.is_empty() {
        s.suite.diagnostics.clone()
    } else {
        a.tasks.clone()
    };
    let report = run_ablation(&bundle, &s.suite, &tasks, s.backend.pool(), &s.options)?;
    let text = render_ablation_text(&report);
    create(&s.run_dir.join("ablation.json"), &report.to_json())?;
    create(&s.run_dir.join("ablation.txt"), &text)?;
    report
        .check()
        .map_err(|e| anyhow!(InvariantFailure(e.to_string())))?;
    Ok(format!("{text}\nwrote {}\n", s.run_dir.display()))
}

fn now_ms() -> Timestamp {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as Timestamp)
        .unwrap_or(0)
}

fn export(a: ExportArgs) -> Result<String> {
    let bank = load_bank(&a.bank)?;
    let (manifest, document) = export_bundle(&bank, a.exported_at.unwrap_or_else(now_ms));
    create(&a.out, &document)?;
    Ok(format!(
        "wrote {} ({}, hash {})\n",
        a.out.display(),
        counts_line(&manifest.entry_counts),
        manifest.content_hash
    ))
}

fn import(a: ImportArgs) -> Result<String> {
    let document = read(&a.bundle)?;
    let base = a.merge_into.as_deref().map(load_bank).transpose()?;
    let drop: BTreeSet<ModuleKind> = a.drop.iter().copied().collect();
    let bank = import_bundle(&document, &a.agent, &drop, base.as_ref())
        .with_context(|| format!("importing {}", a.bundle.display()))?;
    create(&a.out, &bank.serialize())?;
    Ok(format!("wrote {} ({})\n", a.out.display(), counts_line(&bank_counts(&bank))))
}

fn bank_counts(bank: &MemoryBank) -> std::collections::BTreeMap<ModuleKind, usize> {
    ModuleKind::ALL.iter().map(|k| (*k, bank.len(*k))).collect()
}

fn counts_line(counts: &std::collections::BTreeMap<ModuleKind, usize>) -> String {
    ModuleKind::ALL
        .iter()
        .map(|k| format!("{} {k}", counts.get(k).copied().unwrap_or(0)))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Human-readable listing of a bank.
pub fn render_bank(bank: &MemoryBank) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "agent   {}", bank.agent_id);
    let _ = writeln!(out, "schema  {}", bank.schema_version);
    let _ = writeln!(out, "entries {}", counts_line(&bank_counts(bank)));
    let _ = writeln!(out, "\nfacts");
    for f in &bank.facts {
        let _ = writeln!(out, "  {}  [{}] {}", f.id, f.tags.join(","), f.text);
    }
    let _ = writeln!(out, "\nconstraints");
    for c in &bank.constraints {
        let trigger = c.trigger_failure.as_ref().map(|k| k.slug().to_string());
        let _ = writeln!(
            out,
            "  {}  ({}) {}",
            c.id,
            trigger.as_deref().unwrap_or("-"),
            c.text
        );
    }
    let _ = writeln!(out, "\nskills");
    for s in &bank.skills {
        let _ = writeln!(out, "  {}  {} x{}: {}", s.id, s.name, s.validation_count, s.steps.join(" -> "));
    }
    let _ = writeln!(out, "\ncases");
    for c in &bank.cases {
        let _ = writeln!(
            out,
            "  {}  score {} {} d={:.2} {}",
            c.case_id,
            c.score,
            if c.success { "ok  " } else { "fail" },
            c.difficulty,
            c.summary
        );
    }
    out
}

fn inspect(a: InspectArgs) -> Result<String> {
    let text = read(&a.path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", a.path.display()))?;
    if value.get("manifest").is_some() {
        let (manifest, bank) = read_bundle(&text)?;
        let mut out = String::new();
        let _ = writeln!(out, "bundle from {} at {}", manifest.source_agent, manifest.exported_at);
        let _ = writeln!(out, "hash    {} (verified)", manifest.content_hash);
        out.push_str(&render_bank(&bank));
        return Ok(out);
    }
    let bank = load_bank(&a.path)?;
    Ok(render_bank(&bank))
}

fn report(a: ReportArgs) -> Result<String> {
    let text = read(&a.path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", a.path.display()))?;
    let invariant = |e: HarnessError| anyhow!(InvariantFailure(format!("{}: {e}", a.path.display())));
    if value.get("conditions").is_some() {
        let report: AblationReport = serde_json::from_value(value)
            .with_context(|| format!("parsing {}", a.path.display()))?;
        report.check().map_err(invariant)?;
        return Ok(render_ablation_text(&report));
    }
    let report: EvalReport = serde_json::from_value(value)
        .with_context(|| format!("parsing {}", a.path.display()))?;
    report.check().map_err(invariant)?;
    Ok(render_report_text(&report))
}
