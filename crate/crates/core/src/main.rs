use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use longsel::corpus::Strictness;
use longsel::gateway::server::{serve_mock, Transport};
use longsel::gateway::{CopyLmParams, ScoringBackend};
use longsel::ranker::{self, SelectionManifest};
use longsel::{pipeline, Error, RunConfig, ScoreMode};

#[derive(Parser)]
#[command(name = "longsel", version, about = "Select long-context instruction data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Query the backends and fill the score cache.
    Score(RunArgs),
    /// Rank the cached scores and write the selection manifest.
    Select(RunArgs),
    /// Write the training set for an existing manifest.
    Emit(RunArgs),
    /// Summarize a manifest.
    Report {
        manifest: PathBuf,
    },
    /// Serve the built-in CopyLM backend over stdio or TCP.
    ServeMock(MockArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<ScoreMode>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    cut_ratio: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    segment_length: Option<usize>,
    #[arg(long)]
    no_norm: bool,
    #[arg(long)]
    concurrency: Option<usize>,
    /// Abort on the first malformed corpus line instead of skipping it.
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    allow_non_homologous: bool,
    #[arg(long)]
    dump_profiles: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct MockArgs {
    #[arg(long, default_value = "copylm")]
    name: String,
    #[arg(long, default_value_t = 32)]
    vocab_size: u32,
    #[arg(long, default_value_t = 9.0)]
    copy_bonus: f64,
    /// Visible prefix length; unbounded when omitted.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, default_value_t = 9.0)]
    attention_bonus: f64,
    #[arg(long, default_value_t = 0)]
    attention_shift: u32,
    #[arg(long, default_value_t = 65536)]
    context_window: usize,
    /// `stdio` or a TCP address such as `127.0.0.1:0`.
    #[arg(long, default_value = "stdio")]
    listen: String,
}

fn parse_mode(s: &str) -> Result<ScoreMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown mode `{s}`; expected gateau, hmg_only, cam_only or ppl_guidance"))
}

impl RunArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(c) = self.cut_ratio {
            cfg.cut_ratio = c;
        }
        if let Some(t) = self.temperature {
            cfg.temperature = t;
        }
        if let Some(l) = self.segment_length {
            cfg.segment_length = l;
        }
        if let Some(c) = self.concurrency {
            cfg.concurrency = c;
        }
        cfg.no_norm |= self.no_norm;
        cfg.allow_non_homologous |= self.allow_non_homologous;
        if self.strict {
            cfg.strictness = Strictness::Fail;
        }
        if let Some(p) = &self.dump_profiles {
            cfg.dump_profiles = Some(p.clone());
        }
        if let Some(p) = &self.output {
            cfg.output = Some(p.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Score(args) => {
            let cfg = args.resolve()?;
            let (a, b) = pipeline::connect_all(&cfg)?;
            let a_ref = a.as_deref().map(|a| a as &dyn ScoringBackend);
            let s = pipeline::cmd_score(&cfg, a_ref, b.as_ref())?;
            eprintln!(
                "scored {} samples ({} unscoreable, {} skipped lines), {} backend results computed",
                s.samples, s.unscoreable, s.skipped_lines, s.computed
            );
        }
        Command::Select(args) => {
            let cfg = args.resolve()?;
            let out = pipeline::cmd_select(&cfg)?;
            print!("{}", ranker::report(&out.manifest, &out.timings));
            eprintln!("manifest written to {}", cfg.manifest.display());
        }
        Command::Emit(args) => {
            let cfg = args.resolve()?;
            let s = pipeline::cmd_emit(&cfg)?;
            eprintln!("emitted {} long + {} short samples", s.long, s.short);
        }
        Command::Report { manifest } => {
            let m = SelectionManifest::read(&manifest)?;
            print!("{}", ranker::report(&m, &[]));
        }
        Command::ServeMock(m) => {
            let params = CopyLmParams {
                vocab_size: m.vocab_size,
                copy_bonus: m.copy_bonus,
                window: m.window,
                attention_bonus: m.attention_bonus,
                attention_shift: m.attention_shift,
            };
            let transport = if m.listen == "stdio" {
                Transport::Stdio
            } else {
                let listener =
                    TcpListener::bind(&m.listen).with_context(|| format!("binding {}", m.listen))?;
                eprintln!("listening on {}", listener.local_addr()?);
                Transport::Tcp(listener)
            };
            serve_mock(&m.name, params, m.context_window, transport).map_err(Error::from)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Error>().map(Error::exit_code).unwrap_or(1);
            ExitCode::from(code as u8)
        }
    }
}
