//! The `ema` operator command line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use chrono::{NaiveDate, NaiveTime, TimeZone};
use clap::{Parser, Subcommand, ValueEnum};
use ema_core::fusion::{merge_responses, preference_profiles, MatchStatus, MergeOptions, DEFAULT_PREFERENCE_KEY};
use ema_core::registry::{Answers, EligibilityRule};
use ema_core::time::{DAY_MS, MINUTE_MS};
use ema_core::{ResponsePayload, Survey, SurveyDefinition, Timestamp};
use serde_json::json;

use crate::config::{Config, HashCost};
use crate::export;
use crate::notify::{
    load_rules, LogProvider, ManualClock, MemoryLog, MemoryObservations, Observations, Recipient,
    Scheduler, SystemClock, WebhookProvider,
};
use crate::registry::{Registry, REGISTRY_FILE};
use crate::sensors::{import_readings, parse_csv, SensorError};
use crate::service::{self, AppState};
use crate::store::{Filter, Store, Stream};

pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "ema", version, about = "Comfort-survey platform operator tool")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, env = "EMA_CONFIG")]
    pub config: Option<PathBuf>,
    /// Stream directory; overrides the config file and environment.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    /// Listen address for `serve`.
    #[arg(long, global = true)]
    pub bind: Option<String>,
    #[arg(long, global = true, value_enum, default_value = "text")]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP service and the notification scheduler.
    Serve,
    /// Check survey definition files.
    Validate {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Load logger CSV files (plain or gzip) into the sensor stream.
    ImportSensors {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Parse and report without writing.
        #[arg(long)]
        dry_run: bool,
    },
    /// Join responses with sensor readings and write a CSV dataset.
    Merge {
        #[command(flatten)]
        merge: MergeArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one stream as CSV with flattened body fields.
    Export {
        #[arg(long)]
        stream: Stream,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        from: Option<Timestamp>,
        #[arg(long)]
        to: Option<Timestamp>,
        /// `field.path=value` on record bodies.
        #[arg(long)]
        filter: Option<Filter>,
    },
    /// Compute per-participant thermal-preference profiles as JSON.
    Profile {
        #[command(flatten)]
        merge: MergeArgs,
        #[arg(long, default_value_t = 1.0)]
        bin_width: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the scheduler for one local day on a simulated clock and print
    /// every dispatch.
    SimulateDay {
        #[arg(long)]
        rule: String,
        #[arg(long)]
        date: NaiveDate,
        /// Rules file; defaults to the configured one.
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Participant ids to simulate (repeatable).
        #[arg(long = "participant")]
        participants: Vec<String>,
    },
}

#[derive(Debug, clap::Args)]
pub struct MergeArgs {
    /// Survey definition; defaults to the single configured survey.
    #[arg(long)]
    pub survey: Option<PathBuf>,
    #[arg(long, default_value_t = 15)]
    pub window_minutes: u32,
    #[arg(long)]
    pub from: Option<Timestamp>,
    #[arg(long)]
    pub to: Option<Timestamp>,
    /// Leave out registry onboarding columns.
    #[arg(long)]
    pub no_onboarding: bool,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Validation(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io(_) => EXIT_IO,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Validation(m) | CliError::Io(m) => m,
        }
    }
}

fn io_err(context: impl std::fmt::Display) -> impl FnOnce(std::io::Error) -> CliError {
    move |e| CliError::Io(format!("{context}: {e}"))
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.exit_code()
        }
    }
}

fn config_for(cli: &Cli) -> Result<Config, CliError> {
    let mut cfg = Config::load(cli.config.as_deref()).map_err(|e| match e {
        crate::config::ConfigError::Read { .. } => CliError::Io(e.to_string()),
        _ => CliError::Usage(e.to_string()),
    })?;
    if let Some(d) = &cli.data_dir {
        cfg.data_dir = d.clone();
    }
    if let Some(b) = &cli.bind {
        cfg.bind = b.clone();
    }
    Ok(cfg)
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<i32, CliError> {
    let cfg = config_for(&cli)?;
    let fmt = cli.format;
    let w = |out: &mut dyn Write, s: String| out.write_all(s.as_bytes()).map_err(io_err("stdout"));
    match cli.command {
        Command::Serve => serve(cfg, out),
        Command::Validate { files } => validate(&files, fmt, out),
        Command::ImportSensors { files, dry_run } => import(&cfg, &files, dry_run, fmt, out),
        Command::Merge { merge, out: path } => {
            let (survey, responses, readings, onboarding) = merge_inputs(&cfg, &merge)?;
            let opts = MergeOptions::default().with_window_minutes(merge.window_minutes);
            let merged = merge_responses(&survey, &responses, &readings, &opts)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            let bytes = export::merged_csv(&survey, &merged, &onboarding)
                .map_err(|e| CliError::Io(e.to_string()))?;
            fs::write(&path, bytes).map_err(io_err(path.display()))?;
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for m in &merged {
                *counts.entry(m.status.as_str()).or_default() += 1;
            }
            match fmt {
                Format::Json => w(out, format!("{}\n", json!({"path": path, "rows": merged.len(), "matchStatus": counts})))?,
                Format::Text => {
                    w(out, format!("{}\n", path.display()))?;
                    for s in [MatchStatus::Matched, MatchStatus::NoLoggerForLocation, MatchStatus::NoReadingInWindow] {
                        w(out, format!("{}: {}\n", s.as_str(), counts.get(s.as_str()).unwrap_or(&0)))?;
                    }
                }
            }
            Ok(0)
        }
        Command::Export { stream, out: path, from, to, filter } => {
            let store = open_store(&cfg)?;
            let from = from.unwrap_or(Timestamp::from_millis(i64::MIN / 2));
            let to = to.unwrap_or(Timestamp::from_millis(i64::MAX / 2));
            let records = store
                .query_range(stream, from, to, filter.as_ref())
                .map_err(|e| CliError::Usage(e.to_string()))?;
            let bytes = export::stream_csv(&records).map_err(|e| CliError::Io(e.to_string()))?;
            fs::write(&path, bytes).map_err(io_err(path.display()))?;
            match fmt {
                Format::Json => w(out, format!("{}\n", json!({"path": path, "records": records.len()})))?,
                Format::Text => w(out, format!("{}\n{} records\n", path.display(), records.len()))?,
            }
            Ok(0)
        }
        Command::Profile { merge, bin_width, out: path } => {
            let (survey, responses, readings, _) = merge_inputs(&cfg, &merge)?;
            let opts = MergeOptions::default().with_window_minutes(merge.window_minutes);
            let merged = merge_responses(&survey, &responses, &readings, &opts)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            let profiles = preference_profiles(
                merged.iter().map(|m| m.profile_input(DEFAULT_PREFERENCE_KEY)),
                bin_width,
            )
            .map_err(|e| CliError::Usage(e.to_string()))?;
            let bytes = serde_json::to_vec_pretty(&profiles).expect("profiles serialize");
            fs::write(&path, bytes).map_err(io_err(path.display()))?;
            match fmt {
                Format::Json => w(out, format!("{}\n", json!({"path": path, "participants": profiles.len()})))?,
                Format::Text => w(out, format!("{}\n{} participants\n", path.display(), profiles.len()))?,
            }
            Ok(0)
        }
        Command::SimulateDay { rule, date, rules, participants } => {
            simulate_day(&cfg, &rule, date, rules.as_deref(), participants, fmt, out)
        }
    }
}

fn open_store(cfg: &Config) -> Result<Store, CliError> {
    Store::open(&cfg.data_dir).map_err(|e| CliError::Io(e.to_string()))
}

fn read_definition(path: &Path) -> Result<Result<SurveyDefinition, String>, CliError> {
    let bytes = fs::read(path).map_err(io_err(path.display()))?;
    Ok(serde_json::from_slice(&bytes).map_err(|e| e.to_string()))
}

fn validate(files: &[PathBuf], fmt: Format, out: &mut dyn Write) -> Result<i32, CliError> {
    let mut failed = false;
    let mut docs = Vec::new();
    let mut text = String::new();
    for path in files {
        match read_definition(path)? {
            Err(parse) => {
                failed = true;
                text.push_str(&format!("{}: not a survey definition: {parse}\n", path.display()));
                docs.push(json!({"file": path, "valid": false, "violations": [{"kind": "unparseable", "detail": parse}]}));
            }
            Ok(def) => {
                let report = def.validate();
                if report.is_valid() {
                    let survey = Survey::new(def).expect("valid definition");
                    let paths = survey.path_count();
                    let longest = survey.max_path_len();
                    text.push_str(&format!(
                        "{}: ok ({} v{}, {} questions, {} paths, longest {})\n",
                        path.display(),
                        survey.survey_id(),
                        survey.version(),
                        survey.questions().len(),
                        paths,
                        longest
                    ));
                    docs.push(json!({"file": path, "valid": true, "violations": [], "paths": paths, "maxPathLength": longest}));
                } else {
                    failed = true;
                    text.push_str(&format!("{}: {} violation(s)\n", path.display(), report.violations.len()));
                    for v in &report.violations {
                        let at = v.question.map_or("definition".into(), |q| format!("question {q}"));
                        text.push_str(&format!("  {at}: {}\n", serde_json::to_string(&v.kind).unwrap()));
                    }
                    docs.push(json!({"file": path, "valid": false, "violations": report.violations}));
                }
            }
        }
    }
    let rendered = match fmt {
        Format::Text => text,
        Format::Json => format!("{}\n", json!({"files": docs})),
    };
    out.write_all(rendered.as_bytes()).map_err(io_err("stdout"))?;
    Ok(if failed { EXIT_VALIDATION } else { 0 })
}

fn import(cfg: &Config, files: &[PathBuf], dry_run: bool, fmt: Format, out: &mut dyn Write) -> Result<i32, CliError> {
    let store = if dry_run { None } else { Some(open_store(cfg)?) };
    let mut docs = Vec::new();
    let mut text = String::new();
    for path in files {
        let bytes = fs::read(path).map_err(io_err(path.display()))?;
        let parsed = parse_csv(&bytes).map_err(|e| match e {
            SensorError::Decompress(_) => CliError::Io(format!("{}: {e}", path.display())),
            _ => CliError::Validation(format!("{}: {e}", path.display())),
        })?;
        let summary = match &store {
            Some(s) => import_readings(s, &parsed.readings).map_err(|e| CliError::Io(e.to_string()))?,
            None => Default::default(),
        };
        text.push_str(&format!(
            "{}: imported {}, rejected {}, duplicates {}\n",
            path.display(),
            summary.imported,
            parsed.rejects.len(),
            summary.duplicates
        ));
        for r in &parsed.rejects {
            text.push_str(&format!("  line {}: {}\n", r.line, r.reason));
        }
        docs.push(json!({
            "file": path,
            "parsed": parsed.readings.len(),
            "imported": summary.imported,
            "duplicates": summary.duplicates,
            "rejected": parsed.rejects.len(),
            "rejects": parsed.rejects,
        }));
    }
    let rendered = match fmt {
        Format::Text => text,
        Format::Json => format!("{}\n", json!({"files": docs})),
    };
    out.write_all(rendered.as_bytes()).map_err(io_err("stdout"))?;
    Ok(0)
}

type MergeInputs = (Survey, Vec<ResponsePayload>, Vec<ema_core::fusion::SensorReading>, BTreeMap<String, Answers>);

fn merge_inputs(cfg: &Config, args: &MergeArgs) -> Result<MergeInputs, CliError> {
    let survey_path = match (&args.survey, cfg.surveys.as_slice()) {
        (Some(p), _) => p.clone(),
        (None, [only]) => only.clone(),
        (None, _) => return Err(CliError::Usage("--survey is required unless exactly one survey is configured".into())),
    };
    let def = read_definition(&survey_path)?
        .map_err(|e| CliError::Validation(format!("{}: {e}", survey_path.display())))?;
    let survey = Survey::new(def).map_err(|e| CliError::Validation(format!("{}: {e}", survey_path.display())))?;
    let store = open_store(cfg)?;
    let from = args.from.unwrap_or(Timestamp::from_millis(i64::MIN / 2));
    let to = args.to.unwrap_or(Timestamp::from_millis(i64::MAX / 2));
    let range = |s| store.query_range(s, from, to, None).map_err(|e| CliError::Usage(e.to_string()));
    let responses: Vec<ResponsePayload> = range(Stream::Responses)?
        .into_iter()
        .filter_map(|r| serde_json::from_value::<ResponsePayload>(r.body).ok())
        .filter(|p| p.survey_id == survey.survey_id())
        .collect();
    // Readings just outside the range can still match responses inside it.
    let pad = i64::from(args.window_minutes) * MINUTE_MS;
    let readings = store
        .query_range(Stream::Sensor, from.plus_millis(-pad), to.plus_millis(pad), None)
        .map_err(|e| CliError::Usage(e.to_string()))?
        .into_iter()
        .filter_map(|r| serde_json::from_value(r.body).ok())
        .collect();
    let mut onboarding = BTreeMap::new();
    if !args.no_onboarding && cfg.registry_dir.join(REGISTRY_FILE).exists() {
        let reg = Registry::open(&cfg.registry_dir, EligibilityRule::default(), HashCost::default())
            .map_err(|e| CliError::Io(e.to_string()))?;
        for p in reg.participants() {
            if let Some(a) = p.onboarding {
                onboarding.insert(p.random_id.to_string(), a);
            }
        }
    }
    Ok((survey, responses, readings, onboarding))
}

fn simulate_day(
    cfg: &Config,
    rule_id: &str,
    date: NaiveDate,
    rules_path: Option<&Path>,
    participants: Vec<String>,
    fmt: Format,
    out: &mut dyn Write,
) -> Result<i32, CliError> {
    let rules_path = rules_path
        .map(Path::to_path_buf)
        .or_else(|| cfg.rules.clone())
        .ok_or_else(|| CliError::Usage("no rules file: pass --rules or set `rules` in the config".into()))?;
    let rules = load_rules(&rules_path).map_err(|e| match e {
        crate::notify::RulesError::Io(_) => CliError::Io(format!("{}: {e}", rules_path.display())),
        _ => CliError::Validation(format!("{}: {e}", rules_path.display())),
    })?;
    let chosen = rules
        .into_iter()
        .find(|r| r.rule.rule_id == rule_id)
        .ok_or_else(|| CliError::Usage(format!("no rule {rule_id:?} in {}", rules_path.display())))?;

    // Local midnight to local midnight in the rule's zone; UTC for conditions.
    let (start, end) = match &chosen.tz {
        Some(tz) => {
            let at = |d: NaiveDate| {
                Timestamp::from_datetime(
                    &tz.from_local_datetime(&d.and_time(NaiveTime::MIN)).earliest().expect("midnight exists"),
                )
            };
            (at(date), at(date.succ_opt().expect("date in range")))
        }
        None => {
            let s = Timestamp::from_datetime(&date.and_time(NaiveTime::MIN).and_utc());
            (s, s.plus_millis(DAY_MS))
        }
    };

    let observations = if chosen.tz.is_none() {
        let store = open_store(cfg)?;
        let from = start.plus_millis(-ema_core::schedule::PRESENCE_TTL_MS);
        MemoryObservations {
            readings: store.readings(from, end),
            reports: store.location_reports(from, end),
        }
    } else {
        MemoryObservations::default()
    };
    let participants = if !participants.is_empty() {
        participants
    } else if chosen.tz.is_none() {
        let mut ids: Vec<String> = observations.reports.iter().map(|(_, p, _)| p.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    } else {
        vec!["simulated-participant".into()]
    };
    let roster: Vec<Recipient> = participants
        .into_iter()
        .map(|p| Recipient {
            push_token: Some(format!("sim-token-{p}")),
            participant_id: p,
        })
        .collect();
    let clock = Arc::new(ManualClock::new(start));
    let log = Arc::new(MemoryLog::default());
    let scheduler = Scheduler::new(
        vec![chosen.clone()],
        Arc::new(roster),
        Arc::new(observations),
        log.clone(),
        Arc::new(LogProvider),
        clock.clone(),
    )
    .map_err(CliError::Io)?;
    let mut t = start;
    while t < end {
        clock.set(t);
        for r in scheduler.tick(t) {
            r.map_err(CliError::Io)?;
        }
        t = t.plus_millis(MINUTE_MS);
    }
    let records = log.0.lock().unwrap().clone();
    let rendered = match fmt {
        Format::Json => format!(
            "{}\n",
            json!({"rule": rule_id, "date": date.to_string(), "dispatches": records})
        ),
        Format::Text => {
            let mut s = format!("{rule_id} on {date}: {} dispatches\n", records.len());
            for r in &records {
                let at = r.scheduled_for.unwrap_or(r.triggered_at);
                let local = match &chosen.tz {
                    Some(tz) => format!(
                        "  local {}",
                        tz.from_utc_datetime(&at.to_datetime().expect("in range").naive_utc()).format("%H:%M:%S")
                    ),
                    None => String::new(),
                };
                s.push_str(&format!("{at}  {}  {}{local}\n", r.participant_id, r.provider_status));
            }
            s
        }
    };
    out.write_all(rendered.as_bytes()).map_err(io_err("stdout"))?;
    Ok(0)
}

fn serve(cfg: Config, out: &mut dyn Write) -> Result<i32, CliError> {
    let runtime = tokio::runtime::Runtime::new().map_err(io_err("tokio runtime"))?;
    runtime.block_on(async move {
        let clock: Arc<SystemClock> = Arc::new(SystemClock);
        let state = AppState::from_config(&cfg, clock.clone()).map_err(|e| CliError::Validation(e.to_string()))?;
        let state = Arc::new(state);
        let scheduler = match &cfg.rules {
            Some(path) => {
                let rules = load_rules(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
                let provider: Arc<dyn ema_core::notify::PushProvider + Send + Sync> = match &cfg.webhook_url {
                    Some(url) => Arc::new(WebhookProvider::new(url).map_err(CliError::Usage)?),
                    None => Arc::new(LogProvider),
                };
                let sched = Scheduler::new(
                    rules,
                    state.registry().clone(),
                    state.store().clone(),
                    state.store().clone(),
                    provider,
                    clock,
                )
                .map_err(CliError::Io)?;
                Some(Arc::new(sched))
            }
            None => None,
        };
        let handle = scheduler.clone().map(|s| s.spawn(Duration::from_secs(30)));
        if let (Some(sched), Some(path)) = (scheduler.clone(), cfg.rules.clone()) {
            spawn_reload(sched, path);
        }
        let listener = tokio::net::TcpListener::bind(&cfg.bind)
            .await
            .map_err(io_err(format!("bind {}", cfg.bind)))?;
        let addr = listener.local_addr().map_err(io_err("local addr"))?;
        writeln!(out, "listening on {addr}").map_err(io_err("stdout"))?;
        out.flush().map_err(io_err("stdout"))?;
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        service::serve(state, listener, shutdown).await.map_err(io_err("serve"))?;
        if let Some(h) = handle {
            h.stop();
        }
        Ok(0)
    })
}

#[cfg(unix)]
fn spawn_reload(scheduler: Arc<Scheduler>, path: PathBuf) {
    use tokio::signal::unix::{signal, SignalKind};
    let Ok(mut hup) = signal(SignalKind::hangup()) else {
        return;
    };
    tokio::spawn(async move {
        while hup.recv().await.is_some() {
            match load_rules(&path) {
                Ok(rules) => {
                    scheduler.set_rules(rules);
                    tracing::info!(rules = ?scheduler.rule_ids(), "rules reloaded");
                }
                Err(e) => tracing::error!(error = %e, "rules reload failed; keeping previous rules"),
            }
        }
    });
}

#[cfg(not(unix))]
fn spawn_reload(_: Arc<Scheduler>, _: PathBuf) {}
