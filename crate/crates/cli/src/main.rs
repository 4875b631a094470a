//! `motionauth` command-line driver.
//!
//! Exit status: 0 success, 1 usage, 2 config, 3 data, 4 runtime/numeric.

mod commands;
mod config;
mod error;

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use toml::{Table, Value};

use crate::commands::Run;
use crate::config::{parse_assignment, RunConfig};
use crate::error::CliError;

/// Default output directory when neither `--out` nor `out` is given.
const OUT_ENV: &str = "MOTIONAUTH_OUT";
const DEFAULT_OUT: &str = "motionauth-out";

#[derive(Parser)]
#[command(name = "motionauth", version, about = "Forecast-then-authenticate on VR throwing trajectories")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args)]
struct GlobalArgs {
    /// Flat TOML config file; flags override its keys.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    /// Override any config key, e.g. `--set classifier_epochs=50`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// `paper` (default) or `reduced`.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Dataset root.
    #[arg(long, global = true, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Output directory (default: $MOTIONAUTH_OUT, else ./motionauth-out).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `fcn` or `tf`.
    #[arg(long, global = true)]
    variant: Option<String>,
    /// `no_forecast` or `with_forecast`.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Sweep worker threads; 0 uses every logical core.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Restrict to this user; repeatable.
    #[arg(long = "user", global = true, value_name = "ID")]
    user: Vec<String>,
    #[arg(long, global = true)]
    window_size: Option<usize>,
    #[arg(long, global = true)]
    horizon: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus in the dataset layout.
    Synth {
        /// Number of users.
        #[arg(long)]
        users: Option<usize>,
    },
    /// Check a dataset directory against the session schema.
    ValidateData,
    /// Train per-user (or global) forecasters for one cell.
    TrainForecaster,
    /// Train per-user classifiers for one cell.
    TrainAuth,
    /// Score day-2 windows with trained checkpoints, or recompute EERs from a scores file.
    Eval {
        #[arg(long, value_name = "FILE")]
        scores: Option<PathBuf>,
    },
    /// Run the window/horizon grid and emit the report tables.
    Sweep,
    /// Time forecast + classify for a single window.
    Bench,
    /// Merge `summary.json` files from earlier runs into one report.
    Report {
        #[arg(long = "from", value_name = "DIR", required = true)]
        from: Vec<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::ValidateData => "validate-data",
            Command::TrainForecaster => "train-forecaster",
            Command::TrainAuth => "train-auth",
            Command::Eval { .. } => "eval",
            Command::Sweep => "sweep",
            Command::Bench => "bench",
            Command::Report { .. } => "report",
        }
    }
}

fn int(v: u64) -> Result<Value, CliError> {
    i64::try_from(v).map(Value::Integer).map_err(|_| CliError::Config(format!("{v} does not fit a config integer")))
}

fn overrides(g: &GlobalArgs, command: Option<&Command>) -> Result<Table, CliError> {
    let mut t = Table::new();
    let path = |p: &PathBuf| Value::String(p.display().to_string());
    if let Some(v) = &g.preset {
        t.insert("preset".into(), Value::String(v.clone()));
    }
    if let Some(v) = &g.data {
        t.insert("data".into(), path(v));
    }
    if let Some(v) = &g.out {
        t.insert("out".into(), path(v));
    }
    if let Some(v) = g.seed {
        t.insert("seed".into(), int(v)?);
    }
    if let Some(v) = &g.variant {
        t.insert("variant".into(), Value::String(v.clone()));
    }
    if let Some(v) = &g.mode {
        t.insert("mode".into(), Value::String(v.clone()));
    }
    if let Some(v) = g.workers {
        t.insert("workers".into(), int(v as u64)?);
    }
    if !g.user.is_empty() {
        t.insert("users".into(), Value::Array(g.user.iter().cloned().map(Value::String).collect()));
    }
    if let Some(v) = g.window_size {
        t.insert("window_size".into(), int(v as u64)?);
    }
    if let Some(v) = g.horizon {
        t.insert("horizon".into(), int(v as u64)?);
    }
    if let Some(Command::Synth { users: Some(n) }) = command {
        t.insert("synth_users".into(), int(*n as u64)?);
    }
    for s in &g.set {
        let (k, v) = parse_assignment(s)?;
        t.insert(k, v);
    }
    Ok(t)
}

fn read_config_file(path: &PathBuf) -> Result<Table, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    text.parse::<Table>().map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))
}

/// Log records go to stderr and are appended to `<out>/motionauth.log`.
struct Tee(Option<File>);

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        io::stderr().write_all(buf)?;
        if let Some(f) = &mut self.0 {
            f.write_all(buf)?;
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        if let Some(f) = &mut self.0 {
            f.flush()?;
        }
        io::stderr().flush()
    }
}

fn init_logging(out: &std::path::Path) {
    let file = OpenOptions::new().create(true).append(true).open(out.join("motionauth.log")).ok();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Pipe(Box::new(Tee(file))))
        .init();
}

fn run() -> Result<(), CliError> {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            e.print().map_err(|e| CliError::Usage(e.to_string()))?;
            return Ok(());
        }
        Err(e) => {
            let text = e.render().to_string();
            return Err(CliError::Usage(text.trim_start_matches("error: ").trim_end().to_string()));
        }
    };
    let file = cli.global.config.as_ref().map(read_config_file).transpose()?;
    let mut config = RunConfig::resolve(file, overrides(&cli.global, cli.command.as_ref())?)?;
    if cli.global.print_config {
        print!("{}", config.to_toml()?);
        return Ok(());
    }
    let command = cli.command.ok_or_else(|| CliError::Usage("no command given (see --help)".into()))?;

    let out = config
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    fs::create_dir_all(&out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    config.out = Some(out.clone());
    init_logging(&out);

    let mut run = Run::new(command.name(), std::env::args().collect(), config, out);
    match &command {
        Command::Synth { .. } => commands::synth(&mut run)?,
        Command::ValidateData => commands::validate_data(&mut run)?,
        Command::TrainForecaster => commands::train_forecaster_cmd(&mut run)?,
        Command::TrainAuth => commands::train_auth(&mut run)?,
        Command::Eval { scores } => commands::eval(&mut run, scores.clone())?,
        Command::Sweep => commands::sweep(&mut run)?,
        Command::Bench => commands::bench(&mut run)?,
        Command::Report { from } => commands::report(&mut run, from)?,
    }
    run.finish()
}

fn main() {
    let code = match run() {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("motionauth: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}
