//! Command-line scenario runner.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use pairsync::scenario::{run_scenario, RunOptions, RunOutput, ScenarioConfig, ScenarioError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_ABORT: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "pairsync", version, about = "Entangled-pair clock synchronization scenarios")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one scenario, or a grid of them with --sweep.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        emit_histograms: bool,
        /// `dotted.key=v1,v2,...`; one output subdirectory per value.
        #[arg(long)]
        sweep: Option<String>,
    },
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match cli.command {
        Command::Run { config, out, seed, emit_histograms, sweep } => {
            let opts = RunOptions { emit_histograms };
            match run_command(&config, &out, seed, opts, sweep.as_deref()) {
                Ok(code) => code,
                Err(e) => {
                    eprintln!("error: {e:#}");
                    EXIT_IO
                }
            }
        }
    }
}

fn run_command(config: &Path, out: &Path, seed: Option<u64>, opts: RunOptions, sweep: Option<&str>) -> Result<i32> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let mut table: toml::Table = match text.parse() {
        Ok(t) => t,
        Err(e) => return Ok(config_failure(&ScenarioError::Config { path: "<document>".into(), reason: format!("{e}") })),
    };
    if let Some(s) = seed {
        if s > i64::MAX as u64 {
            return Ok(config_failure(&ScenarioError::Config { path: "seed".into(), reason: "must fit in a signed 64-bit integer".into() }));
        }
        table.insert("seed".into(), toml::Value::Integer(s as i64));
    }
    let Some(spec) = sweep else {
        return run_one(table, out, opts);
    };
    let (key, values) = match parse_sweep(spec) {
        Ok(kv) => kv,
        Err(e) => return Ok(config_failure(&ScenarioError::Config { path: "--sweep".into(), reason: e.to_string() })),
    };
    let codes: Vec<Result<i32>> = std::thread::scope(|s| {
        let handles: Vec<_> = values
            .iter()
            .map(|(label, value)| {
                let mut t = table.clone();
                let dir = out.join(format!("{key}={label}"));
                let key = key.clone();
                let value = value.clone();
                s.spawn(move || match set_dotted(&mut t, &key, value) {
                    Ok(()) => run_one(t, &dir, opts),
                    Err(e) => Ok(config_failure(&ScenarioError::Config { path: key, reason: e.to_string() })),
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    let mut worst = EXIT_OK;
    for c in codes {
        worst = match (worst, c?) {
            (EXIT_CONFIG, _) | (_, EXIT_CONFIG) => EXIT_CONFIG,
            (EXIT_ABORT, _) | (_, EXIT_ABORT) => EXIT_ABORT,
            (w, _) => w,
        };
    }
    Ok(worst)
}

fn run_one(table: toml::Table, out: &Path, opts: RunOptions) -> Result<i32> {
    let cfg = match ScenarioConfig::from_table(table) {
        Ok(c) => c,
        Err(e) => return Ok(config_failure(&e)),
    };
    let output = match run_scenario(&cfg, opts) {
        Ok(o) => o,
        Err(e) => return Ok(config_failure(&e)),
    };
    write_output(out, &output)?;
    let m = &output.metrics;
    if output.aborted() {
        eprintln!("{}: aborted: {}", out.display(), m.abort_reason.as_deref().unwrap_or("unknown"));
        return Ok(EXIT_ABORT);
    }
    println!("{}: {} ok ({} files)", out.display(), m.experiment, output.files.len());
    Ok(EXIT_OK)
}

fn config_failure(e: &ScenarioError) -> i32 {
    eprintln!("error: {e}");
    EXIT_CONFIG
}

pub fn write_output(dir: &Path, output: &RunOutput) -> Result<()> {
    for (name, bytes) in &output.files {
        let path = dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

/// Splits `key=v1,v2` into the key and `(label, value)` pairs. Values are
/// read as TOML scalars, falling back to strings.
pub fn parse_sweep(spec: &str) -> Result<(String, Vec<(String, toml::Value)>)> {
    let Some((key, vals)) = spec.split_once('=') else {
        bail!("expected key=v1,v2,...");
    };
    if key.is_empty() || vals.is_empty() {
        bail!("expected key=v1,v2,...");
    }
    let values = vals
        .split(',')
        .map(|v| {
            let v = v.trim();
            let parsed = format!("x = {v}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("x"))
                .unwrap_or_else(|| toml::Value::String(v.to_string()));
            (v.to_string(), parsed)
        })
        .collect();
    Ok((key.to_string(), values))
}

/// Sets `a.b.c` in a table, creating intermediate tables.
pub fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).context("empty key")?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("`{p}` is not a table"),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_values_are_typed() {
        let (k, v) = parse_sweep("channel.sb.delay_ps=1000.0,2000.5").unwrap();
        assert_eq!(k, "channel.sb.delay_ps");
        assert_eq!(v[0], ("1000.0".to_string(), toml::Value::Float(1000.0)));
        let (_, v) = parse_sweep("qkd.settings=chsh").unwrap();
        assert_eq!(v[0].1, toml::Value::String("chsh".into()));
        assert!(parse_sweep("novalue").is_err());
    }

    #[test]
    fn dotted_insert_creates_tables() {
        let mut t = toml::Table::new();
        set_dotted(&mut t, "clock.b.skew", toml::Value::Float(1e-5)).unwrap();
        assert_eq!(t["clock"]["b"]["skew"].as_float(), Some(1e-5));
        t.insert("seed".into(), toml::Value::Integer(1));
        assert!(set_dotted(&mut t, "seed.x", toml::Value::Integer(2)).is_err());
    }
}
