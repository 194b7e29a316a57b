//! Argument parsing, configuration merging and command dispatch for the
//! `hipt` binary.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bench::{emit_report, parse_report_csv, run_dir, SEEDS};
use crate::clam::{scores_csv, AdaptationConfig, Protocol};
use crate::error::{Error, Result};
use crate::memory::CheckpointMode;
use crate::model::ModelConfig;
use crate::pipeline;
use crate::synth::write_suite;
use crate::train::CurriculumConfig;
use crate::util::{canonical_json, read_json, with_workers, write_json};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_BUDGET: i32 = 4;
pub const EXIT_VERIFY: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "hipt", version, about = "Hierarchical slide transformer pipeline on synthetic slides")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic dataset suite.
    GenData,
    /// Run the two-stage pretraining curriculum.
    Pretrain,
    /// Write frozen-backbone features for every dataset.
    ExtractFeatures,
    /// Train one head per dataset and write test-split scores.
    Adapt,
    /// Multi-seed benchmark with report files.
    Eval,
    /// Re-summarise an existing report.csv.
    Report,
    /// Run the gradient and invariant self-checks.
    Verify,
}

#[derive(Clone, Debug, Default, Args)]
pub struct Flags {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// FAST-pool budget in bytes (K, M and G suffixes are binary).
    #[arg(long, global = true, value_parser = parse_bytes)]
    pub mem_budget: Option<u64>,
    /// Checkpointing granularity: none, region or stage.
    #[arg(long, global = true)]
    pub checkpoint: Option<CheckpointMode>,
    /// Adaptation protocol: clam or linear.
    #[arg(long, global = true)]
    pub protocol: Option<Protocol>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Print the effective config as canonical JSON and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    /// Dataset suite directory written by gen-data.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Pretraining output or checkpoint directory.
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Feature directory written by extract-features.
    #[arg(long, global = true)]
    pub features: Option<PathBuf>,
    /// Run directory holding a report.csv (for `report`).
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    /// Dataset preset for gen-data: mini, tmb-mini or smoke.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Evaluate against labels shuffled within each split.
    #[arg(long, global = true)]
    pub shuffle_labels: bool,
}

/// Bytes, optionally suffixed with K, M or G (powers of 1024).
pub fn parse_bytes(s: &str) -> std::result::Result<u64, String> {
    let t = s.trim().trim_end_matches(['B', 'b']).trim_end_matches('i');
    let (digits, mult) = match t.chars().last() {
        Some('K' | 'k') => (&t[..t.len() - 1], 1u64 << 10),
        Some('M' | 'm') => (&t[..t.len() - 1], 1 << 20),
        Some('G' | 'g') => (&t[..t.len() - 1], 1 << 30),
        _ => (t, 1),
    };
    digits
        .trim()
        .parse::<u64>()
        .ok()
        .and_then(|v| v.checked_mul(mult))
        .ok_or_else(|| format!("invalid byte count {s:?}"))
}

/// The effective configuration of one invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub command: Option<Command>,
    pub preset: String,
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub workers: usize,
    pub seeds: Vec<u64>,
    pub protocols: Vec<Protocol>,
    pub shuffle_labels: bool,
    pub curriculum: CurriculumConfig,
    pub adaptation: AdaptationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: None,
            preset: "mini".into(),
            data: None,
            model: None,
            features: None,
            input: None,
            out: PathBuf::from("hipt-out"),
            seed: 0,
            workers: 1,
            seeds: SEEDS.to_vec(),
            protocols: vec![Protocol::Clam],
            shuffle_labels: false,
            curriculum: CurriculumConfig::default(),
            adaptation: AdaptationConfig::default(),
        }
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn require_dir(path: &Option<PathBuf>, flag: &str, command: &str) -> Result<PathBuf> {
    let p = path.clone().ok_or_else(|| usage(format!("{command} needs --{flag}")))?;
    if !p.is_dir() {
        return Err(usage(format!("--{flag} {} is not a directory", p.display())));
    }
    Ok(p)
}

impl RunConfig {
    /// Defaults, then the config file, then flags.
    pub fn from_cli(cli: &Cli) -> Result<RunConfig> {
        let f = &cli.flags;
        let mut c: RunConfig = match &f.config {
            Some(path) => {
                if !path.is_file() {
                    return Err(usage(format!("config file {} not found", path.display())));
                }
                read_json(path).map_err(|e| usage(e.to_string()))?
            }
            None => RunConfig::default(),
        };
        c.command = Some(cli.command);
        if let Some(s) = f.seed {
            c.seed = s;
        }
        if let Some(w) = f.workers {
            c.workers = w;
        }
        if let Some(b) = f.mem_budget {
            c.curriculum.policy.fast_budget_bytes = Some(b);
        }
        if let Some(m) = f.checkpoint {
            c.curriculum.policy.mode = m;
        }
        if let Some(p) = f.protocol {
            c.adaptation.protocol = p;
            c.protocols = vec![p];
        }
        if let Some(o) = &f.out {
            c.out = o.clone();
        }
        for (dst, src) in [
            (&mut c.data, &f.data),
            (&mut c.model, &f.model),
            (&mut c.features, &f.features),
            (&mut c.input, &f.input),
        ] {
            if src.is_some() {
                *dst = src.clone();
            }
        }
        if let Some(p) = &f.preset {
            c.preset = p.clone();
        }
        c.shuffle_labels |= f.shuffle_labels;
        c.curriculum.seed = c.seed;
        Ok(c)
    }

    /// Checks everything the command will read before any work starts.
    pub fn validate(&self) -> Result<()> {
        let command = self.command.ok_or_else(|| usage("no command"))?;
        self.curriculum.validate()?;
        self.adaptation.validate()?;
        if self.workers == 0 {
            return Err(usage("--workers must be at least 1"));
        }
        if self.seeds.is_empty() || self.protocols.is_empty() {
            return Err(usage("at least one seed and one protocol are needed"));
        }
        let name = command_name(command);
        match command {
            Command::GenData => {
                crate::synth::preset(&self.preset, self.seed)?;
            }
            Command::Pretrain => {
                require_dir(&self.data, "data", name)?;
            }
            Command::ExtractFeatures => {
                require_dir(&self.data, "data", name)?;
                require_dir(&self.model, "model", name)?;
            }
            Command::Adapt | Command::Eval => {
                require_dir(&self.model, "model", name)?;
                if self.features.is_none() {
                    require_dir(&self.data, "data", name)?;
                } else {
                    require_dir(&self.features, "features", name)?;
                }
            }
            Command::Report => {
                let dir = require_dir(&self.input, "input", name)?;
                if !dir.join("report.csv").is_file() {
                    return Err(usage(format!("{} has no report.csv", dir.display())));
                }
            }
            Command::Verify => {}
        }
        Ok(())
    }

    /// The fields that determine results: paths to outputs and worker
    /// counts are left out, so equal runs share a run directory.
    pub fn identity(&self) -> RunConfig {
        RunConfig {
            out: PathBuf::new(),
            workers: 0,
            ..self.clone()
        }
    }
}

pub fn command_name(c: Command) -> &'static str {
    match c {
        Command::GenData => "gen-data",
        Command::Pretrain => "pretrain",
        Command::ExtractFeatures => "extract-features",
        Command::Adapt => "adapt",
        Command::Eval => "eval",
        Command::Report => "report",
        Command::Verify => "verify",
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Data(_) | Error::Io { .. } | Error::CorruptPayload { .. } | Error::Json(_) | Error::Checkpoint(_) => EXIT_DATA,
        Error::Budget { .. } => EXIT_BUDGET,
        _ => EXIT_FAILURE,
    }
}

fn load_features(cfg: &RunConfig, model: &crate::model::HierarchicalModel<f32>) -> Result<Vec<crate::clam::FeatureSet>> {
    match &cfg.features {
        Some(dir) => pipeline::load_features(dir),
        None => pipeline::extract_suite(model, cfg.data.as_deref().expect("validated"), None),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent() {
        crate::util::create_dir(d)?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs a validated config. Returns the exit status; progress goes to `out`.
pub fn dispatch(cfg: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let command = cfg.command.ok_or_else(|| usage("no command"))?;
    let log = |out: &mut dyn Write, s: String| {
        let _ = writeln!(out, "{s}");
    };
    match command {
        Command::GenData => {
            let suite = with_workers(cfg.workers, || pipeline::gen_data(&cfg.out, &cfg.preset, cfg.seed))??;
            log(out, format!("wrote {} datasets to {}", suite.datasets.len(), cfg.out.display()));
        }
        Command::Pretrain => {
            let data = cfg.data.as_deref().expect("validated");
            let run = with_workers(cfg.workers, || pipeline::pretrain(data, &cfg.out, &cfg.curriculum, ModelConfig::default()))??;
            write_json(&cfg.out.join("config.json"), &cfg.identity())?;
            let last = run.records.last();
            log(
                out,
                format!(
                    "{} steps, final loss {:.4}, checkpoint {}",
                    run.counters.steps,
                    last.map_or(f64::NAN, |r| r.loss_total),
                    crate::train::final_checkpoint(&cfg.out).display()
                ),
            );
        }
        Command::ExtractFeatures => {
            let model = pipeline::load_model(cfg.model.as_deref().expect("validated"))?;
            let data = cfg.data.as_deref().expect("validated");
            let sets = with_workers(cfg.workers, || pipeline::extract_suite(&model, data, Some(&cfg.out)))??;
            write_suite(&cfg.out, &crate::synth::load_suite(data)?)?;
            log(out, format!("wrote features of {} datasets to {}", sets.len(), cfg.out.display()));
        }
        Command::Adapt => {
            let model = pipeline::load_model(cfg.model.as_deref().expect("validated"))?;
            let rows = with_workers(cfg.workers, || -> Result<_> {
                let mut sets = load_features(cfg, &model)?;
                if cfg.shuffle_labels {
                    sets = sets.iter().map(|s| s.shuffled_labels(cfg.seed)).collect();
                }
                pipeline::adapt_suite(&model, &sets, &cfg.adaptation, cfg.seed)
            })??;
            let path = cfg.out.join("scores.csv");
            write_text(&path, &scores_csv(&rows))?;
            log(out, format!("{} scores ({}) written to {}", rows.len(), cfg.adaptation.protocol, path.display()));
        }
        Command::Eval => {
            let model = pipeline::load_model(cfg.model.as_deref().expect("validated"))?;
            let rows = with_workers(cfg.workers, || -> Result<_> {
                let sets = load_features(cfg, &model)?;
                let shuffle = cfg.shuffle_labels.then_some(cfg.seed);
                pipeline::evaluate(&sets, &cfg.adaptation, &cfg.protocols, &cfg.seeds, shuffle)
            })??;
            let dir = run_dir(&cfg.out, &cfg.identity())?;
            let report = emit_report(&rows, &dir)?;
            write_json(&dir.join("config.json"), &cfg.identity())?;
            log(out, format!("run directory {}", dir.display()));
            print_summary(out, &report.summary);
        }
        Command::Report => {
            let input = cfg.input.as_deref().expect("validated");
            let text = std::fs::read_to_string(input.join("report.csv")).map_err(|e| Error::io(input.join("report.csv"), e))?;
            let rows = parse_report_csv(&text)?;
            let report = emit_report(&rows, &cfg.out)?;
            print_summary(out, &report.summary);
        }
        Command::Verify => {
            let results = with_workers(cfg.workers, crate::verify::run_all)?;
            for r in &results {
                log(out, r.line());
            }
            if results.iter().any(|r| !r.passed) {
                return Ok(EXIT_VERIFY);
            }
        }
    }
    Ok(EXIT_OK)
}

fn print_summary(out: &mut dyn Write, s: &crate::bench::Summary) {
    for t in &s.tasks {
        let _ = writeln!(out, "{:<14} {:<7} {:.4} ± {:.4}", t.task_id, t.protocol.to_string(), t.mean, t.std);
    }
    for (p, m) in &s.average {
        let _ = writeln!(out, "average {p} {m:.4}");
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit status.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() { write!(err, "{e}") } else { write!(out, "{e}") };
            return code;
        }
    };
    let result = RunConfig::from_cli(&cli).and_then(|cfg| {
        if cli.flags.print_config {
            write!(out, "{}", canonical_json(&cfg)?).map_err(|e| Error::io("<stdout>", e))?;
            return Ok(EXIT_OK);
        }
        cfg.validate()?;
        dispatch(&cfg, out)
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(std::iter::once("hipt").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn flag_overrides_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 0, "workers": 2}"#).unwrap();
        let p = path.to_str().unwrap();
        let (code, out, _) = run_capture(&["verify", "--config", p, "--seed", "7", "--print-config"]);
        assert_eq!(code, 0);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["seed"], 7);
        assert_eq!(v["workers"], 2);
        assert_eq!(v["curriculum"]["seed"], 7);
    }

    #[test]
    fn print_config_is_stable() {
        let a = run_capture(&["eval", "--protocol", "linear", "--print-config"]);
        let b = run_capture(&["eval", "--protocol", "linear", "--print-config"]);
        assert_eq!(a.0, 0);
        assert_eq!(a.1, b.1);
        assert!(a.1.contains("\"LINEAR\""));
    }

    #[test]
    fn usage_errors() {
        assert_eq!(run_capture(&["pretrain"]).0, EXIT_USAGE);
        assert_eq!(run_capture(&["pretrain", "--data", "/nonexistent/x"]).0, EXIT_USAGE);
        assert_eq!(run_capture(&["frobnicate"]).0, EXIT_USAGE);
        assert_eq!(run_capture(&["verify", "--bogus"]).0, EXIT_USAGE);
        assert_eq!(run_capture(&["eval", "--checkpoint", "sometimes"]).0, EXIT_USAGE);
        assert_eq!(run_capture(&["gen-data", "--preset", "huge", "--out", "/tmp/x"]).0, EXIT_USAGE);
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.json");
        assert_eq!(run_capture(&["verify", "--config", missing.to_str().unwrap()]).0, EXIT_USAGE);
    }

    #[test]
    fn byte_suffixes() {
        assert_eq!(parse_bytes("4096"), Ok(4096));
        assert_eq!(parse_bytes("64M"), Ok(64 << 20));
        assert_eq!(parse_bytes("2GiB"), Ok(2 << 30));
        assert!(parse_bytes("lots").is_err());
    }
}
