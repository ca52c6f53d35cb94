//! `mvpose` command line: scene generation, fitting, evaluation, reports
//! and manifest replay.
//!
//! Exit status: 0 success, 2 usage, 3 configuration error, 4 input error,
//! 5 partial batch failure, 6 optimizer divergence.

mod commands;
pub mod records;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body::{parse_model, BodyModel};
use crate::fitting::FitConfig;
use crate::io::{hash_json, sha256_hex, write_atomic};
use crate::metrics::EvalConfig;
use crate::synth::{AblationVariant, SceneConfig};
use crate::toy::TOY_MODEL_JSON;
use records::{FitMode, Manifest, ModelRecord, MANIFEST_SCHEMA_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    Usage = 2,
    Config = 3,
    Input = 4,
    Partial = 5,
    Diverged = 6,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn status(&self) -> ExitStatus {
        match self {
            CliError::Config(_) => ExitStatus::Config,
            CliError::Input(_) | CliError::Io { .. } => ExitStatus::Input,
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// All settings, one section per module. Every field has a default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub fit: FitConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn hash(&self) -> String {
        hash_json(self)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.scene
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.fit
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.eval.auc_thresholds_mm.is_empty()
            || self
                .eval
                .auc_thresholds_mm
                .windows(2)
                .any(|w| !(w[0] < w[1]))
        {
            return Err(CliError::Config(
                "eval.auc_thresholds_mm must be non-empty and ascending".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "mvpose",
    version,
    about = "Multi-view body pose fitting in a canonical parameter space"
)]
pub struct Cli {
    /// TOML config with optional [scene], [fit] and [eval] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Body model JSON; defaults to the built-in toy model.
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Worker threads for batch items; 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    /// Overrides scene.seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides fit.lambda.
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Overrides fit.alpha.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Overrides fit.gamma.
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate seeded synthetic scenes.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Keep only the views selected by this ablation variant.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Fit scenes (files or directories of scene files).
    Fit {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = FitMode::Full)]
        mode: FitMode,
        #[arg(required = true)]
        scenes: Vec<PathBuf>,
    },
    /// Evaluate fit results against ground-truth scenes.
    Eval {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        results: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        scenes: Vec<PathBuf>,
    },
    /// Compare metric CSVs in one table.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long, num_args = 1..)]
        labels: Vec<String>,
    },
    /// Re-run the command recorded in a manifest into a new directory.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A command with resolved inputs, independent of the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Invocation {
    Gen {
        count: usize,
        variant: Option<AblationVariant>,
    },
    Fit {
        mode: FitMode,
        scenes: Vec<PathBuf>,
    },
    Eval {
        results: Vec<PathBuf>,
        scenes: Vec<PathBuf>,
    },
    Report {
        inputs: Vec<PathBuf>,
        labels: Vec<String>,
    },
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Invocation::Gen { .. } => "gen",
            Invocation::Fit { .. } => "fit",
            Invocation::Eval { .. } => "eval",
            Invocation::Report { .. } => "report",
        }
    }

    pub fn manifest_name(&self) -> String {
        format!("manifest_{}.json", self.name())
    }
}

pub struct Context {
    pub config: RunConfig,
    pub config_hash: String,
    pub model: BodyModel<f64>,
    pub model_record: ModelRecord,
    pub jobs: usize,
}

/// What a command produced; the manifest is built from it.
#[derive(Default)]
pub struct Outcome {
    pub seeds: Vec<u64>,
    pub inputs: Vec<records::FileRecord>,
    pub outputs: Vec<PathBuf>,
    pub failures: Vec<records::Failure>,
    pub notices: Vec<String>,
    pub status: Option<ExitStatus>,
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn load_model_source(path: Option<&Path>) -> Result<(BodyModel<f64>, ModelRecord), CliError> {
    let (text, source) = match path {
        Some(p) => (
            std::fs::read_to_string(p).map_err(io_err(p))?,
            absolute(p).display().to_string(),
        ),
        None => (TOY_MODEL_JSON.to_string(), "builtin:toy".to_string()),
    };
    let model =
        parse_model(&text).map_err(|e| CliError::Input(format!("body model {source}: {e}")))?;
    Ok((
        model,
        ModelRecord {
            source,
            sha256: sha256_hex(text.as_bytes()),
        },
    ))
}

pub(crate) fn absolute(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| {
        std::env::current_dir()
            .map(|d| d.join(p))
            .unwrap_or_else(|_| p.to_path_buf())
    })
}

fn resolve(cli: &Cli) -> Result<(Context, Invocation, PathBuf), CliError> {
    let mut config = load_config(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        config.scene.seed = s;
    }
    if let Some(l) = cli.lambda {
        config.fit.lambda = l;
    }
    if let Some(a) = cli.alpha {
        config.fit.alpha = a;
    }
    if let Some(g) = cli.gamma {
        config.fit.gamma = g;
    }
    config.validate()?;
    let (invocation, out) = match &cli.command {
        Command::Gen {
            out,
            count,
            variant,
        } => {
            let variant = variant
                .as_deref()
                .map(|v| {
                    v.parse::<AblationVariant>()
                        .map_err(|e| CliError::Config(e.to_string()))
                })
                .transpose()?;
            (
                Invocation::Gen {
                    count: *count,
                    variant,
                },
                out.clone(),
            )
        }
        Command::Fit { out, mode, scenes } => (
            Invocation::Fit {
                mode: *mode,
                scenes: commands::expand_inputs(scenes, "json")?,
            },
            out.clone(),
        ),
        Command::Eval {
            out,
            results,
            scenes,
        } => (
            Invocation::Eval {
                results: commands::expand_inputs(results, "json")?,
                scenes: commands::expand_inputs(scenes, "json")?,
            },
            out.clone(),
        ),
        Command::Report {
            out,
            inputs,
            labels,
        } => {
            if !labels.is_empty() && labels.len() != inputs.len() {
                return Err(CliError::Config(format!(
                    "{} labels for {} inputs",
                    labels.len(),
                    inputs.len()
                )));
            }
            (
                Invocation::Report {
                    inputs: inputs.iter().map(|p| absolute(p)).collect(),
                    labels: labels.clone(),
                },
                out.clone(),
            )
        }
        Command::Replay { .. } => unreachable!("replay is resolved from its manifest"),
    };
    let (model, model_record) = load_model_source(cli.model.as_deref())?;
    let config_hash = config.hash();
    Ok((
        Context {
            config,
            config_hash,
            model,
            model_record,
            jobs: cli.jobs,
        },
        invocation,
        out,
    ))
}

fn resolve_replay(manifest_path: &Path, jobs: usize) -> Result<(Context, Invocation), CliError> {
    let text = std::fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Input(format!("{}: {e}", manifest_path.display())))?;
    if m.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(CliError::Input(format!(
            "unsupported manifest schema version {}",
            m.schema_version
        )));
    }
    m.config.validate()?;
    let model_path = (m.model.source != "builtin:toy").then(|| PathBuf::from(&m.model.source));
    let (model, model_record) = load_model_source(model_path.as_deref())?;
    if model_record.sha256 != m.model.sha256 {
        return Err(CliError::Input(format!(
            "body model {} changed since the manifest was written",
            m.model.source
        )));
    }
    let config_hash = m.config.hash();
    if config_hash != m.config_hash {
        return Err(CliError::Input(
            "manifest config does not match its recorded hash".into(),
        ));
    }
    for input in &m.inputs {
        let bytes = std::fs::read(&input.path).map_err(io_err(Path::new(&input.path)))?;
        if sha256_hex(&bytes) != input.sha256 {
            return Err(CliError::Input(format!(
                "{} changed since the manifest was written",
                input.path
            )));
        }
    }
    let jobs = if jobs == 0 { m.jobs } else { jobs };
    Ok((
        Context {
            config: m.config,
            config_hash,
            model,
            model_record,
            jobs,
        },
        m.invocation,
    ))
}

/// Runs one invocation and writes its manifest last.
pub fn execute(ctx: &Context, invocation: &Invocation, out: &Path) -> Result<ExitStatus, CliError> {
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.jobs)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let outcome = pool.install(|| match invocation {
        Invocation::Gen { count, variant } => commands::gen(ctx, invocation, *count, *variant, out),
        Invocation::Fit { mode, scenes } => commands::fit(ctx, invocation, *mode, scenes, out),
        Invocation::Eval { results, scenes } => {
            commands::eval(ctx, invocation, results, scenes, out)
        }
        Invocation::Report { inputs, labels } => {
            commands::report(ctx, invocation, inputs, labels, out)
        }
    })?;
    let record = |p: &PathBuf| -> Result<records::FileRecord, CliError> {
        let bytes = std::fs::read(p).map_err(io_err(p))?;
        let path = p.strip_prefix(out).unwrap_or(p).display().to_string();
        Ok(records::FileRecord {
            path,
            sha256: sha256_hex(&bytes),
        })
    };
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: invocation.name().to_string(),
        invocation: invocation.clone(),
        config: ctx.config.clone(),
        config_hash: ctx.config_hash.clone(),
        seeds: outcome.seeds.clone(),
        model: ctx.model_record.clone(),
        jobs: ctx.jobs,
        inputs: outcome.inputs.clone(),
        outputs: outcome
            .outputs
            .iter()
            .map(record)
            .collect::<Result<_, _>>()?,
        failures: outcome.failures.clone(),
        notices: outcome.notices.clone(),
        duration_seconds: start.elapsed().as_secs_f64(),
    };
    let path = out.join(invocation.manifest_name());
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_atomic(&path, text.as_bytes()).map_err(io_err(&path))?;
    for n in &outcome.notices {
        eprintln!("notice: {n}");
    }
    for f in &outcome.failures {
        eprintln!("failed: {}: {}: {}", f.input, f.kind, f.message);
    }
    Ok(outcome.status.unwrap_or(ExitStatus::Success))
}

pub fn run(cli: Cli) -> ExitStatus {
    let result = match &cli.command {
        Command::Replay { manifest, out } => {
            resolve_replay(manifest, cli.jobs).and_then(|(ctx, inv)| execute(&ctx, &inv, out))
        }
        _ => resolve(&cli).and_then(|(ctx, inv, out)| execute(&ctx, &inv, &out)),
    };
    match result {
        Ok(status) => status,
        Err(e) => {
            eprintln!("error: {e}");
            e.status()
        }
    }
}

/// Entry point for the binary: parses `args` and returns the exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli) as i32,
        Err(e) => {
            let code = if e.use_stderr() {
                ExitStatus::Usage as i32
            } else {
                0
            };
            let _ = e.print();
            code
        }
    }
}
