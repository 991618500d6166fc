use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use kbsim::config::{ConfigError, ExperimentConfig};
use kbsim::experiment::{self, Axis, RunError, RunOutput};

/// Deterministic node simulator comparing kernel and poll-mode network stacks.
#[derive(Parser)]
#[command(name = "kbsim", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// Config file (`key = value` lines) or a report.json to re-run.
    config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the configured experiment and write report.json.
    Run(Common),
    /// Search for the maximum sustainable bandwidth.
    Search(Common),
    /// Search every point of a grid and write sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `nics`, `stack`, `knobs`, or `key=v1,v2`; repeat for a grid.
        #[arg(long, required = true)]
        axis: Vec<String>,
    },
    /// Per-burst-size writeback series for a back-to-back packet burst.
    BurstStudy {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "32,1024")]
        bursts: Vec<u32>,
    },
    /// Check a config and print the fully resolved settings.
    Validate {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

enum Failure {
    Config(String),
    Sim(String),
    Io(anyhow::Error),
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(m) => Failure::Config(m),
            RunError::Sim(m) => Failure::Sim(m),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Io(e)
    }
}

fn load(path: &Path, set: &[String]) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let anchored = |e: ConfigError| Failure::Config(format!("{}: {e}", path.display()));
    let mut cfg = if text.trim_start().starts_with('{') {
        ExperimentConfig::from_report_json(&text).map_err(anchored)?
    } else {
        let mut c = ExperimentConfig::default();
        c.apply_text(&text).map_err(anchored)?;
        c
    };
    for kv in set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure::Config(format!("--set `{kv}`: expected KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim()).map_err(|e| Failure::Config(format!("--set: {e}")))?;
    }
    if let Ok(seed) = std::env::var("KBSIM_SEED") {
        cfg.set("seed", &seed).map_err(|e| Failure::Config(format!("KBSIM_SEED: {e}")))?;
    }
    cfg.validate().map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig, out: &Option<PathBuf>) -> Result<PathBuf, Failure> {
    let dir = out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write(path: PathBuf, contents: &str) -> Result<(), Failure> {
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_run(dir: &Path, cfg: &ExperimentConfig, out: &RunOutput) -> Result<(), Failure> {
    write(dir.join("report.json"), &out.report.to_json())?;
    write(dir.join("config.resolved"), &cfg.to_text())?;
    if let Some(s) = &out.samples_csv {
        write(dir.join("samples.csv"), s)?;
    }
    Ok(())
}

fn summarize(out: &RunOutput) {
    let t = &out.report.totals;
    println!("tx {} rx {} drops {} drop_pct {:.4}", t.tx, t.rx, t.drops, t.drop_pct);
    if let Some(g) = out.report.max_sustainable_gbps {
        println!("max_sustainable_gbps {g}");
    }
    if let Some(d) = &out.report.search_diagnostic {
        println!("diagnostic: {d}");
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Run(c) => {
            let cfg = load(&c.config, &c.set)?;
            let dir = out_dir(&cfg, &c.out)?;
            let out = experiment::run(&cfg)?;
            write_run(&dir, &cfg, &out)?;
            summarize(&out);
        }
        Cmd::Search(c) => {
            let cfg = load(&c.config, &c.set)?;
            let dir = out_dir(&cfg, &c.out)?;
            let out = experiment::search(&cfg)?;
            write_run(&dir, &cfg, &out)?;
            summarize(&out);
        }
        Cmd::Sweep { common: c, axis } => {
            let cfg = load(&c.config, &c.set)?;
            let axes = axis
                .iter()
                .map(|a| a.parse::<Axis>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(Failure::Config)?;
            let dir = out_dir(&cfg, &c.out)?;
            let rows = experiment::sweep(&experiment::sweep_points(&cfg, &axes));
            write(dir.join("sweep.csv"), &experiment::sweep_csv(&rows))?;
            write(dir.join("sweep.json"), &serde_json::to_string_pretty(&rows).context("serializing sweep")?)?;
            for r in &rows {
                match (&r.max_sustainable_gbps, &r.error) {
                    (Some(g), _) => println!("{} {g}", r.axis_point),
                    (None, Some(e)) => println!("{} failed: {e}", r.axis_point),
                    (None, None) => println!("{} -", r.axis_point),
                }
            }
        }
        Cmd::BurstStudy { common: c, bursts } => {
            let cfg = load(&c.config, &c.set)?;
            let dir = out_dir(&cfg, &c.out)?;
            let res = experiment::burst_study(&cfg, &bursts)?;
            for o in &res {
                write(dir.join(format!("writebacks_{}.csv", o.burst_size)), &o.csv())?;
                println!(
                    "burst {} packets {}/{} llc_writebacks {} peak {}",
                    o.burst_size, o.returned, o.sent, o.total_llc, o.peak_llc
                );
            }
            write(dir.join("burst_study.json"), &serde_json::to_string_pretty(&res).context("serializing burst study")?)?;
        }
        Cmd::Validate { config, set } => {
            let cfg = load(&config, &set)?;
            print!("{}", cfg.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Sim(m)) => {
            eprintln!("{m}");
            ExitCode::from(3)
        }
        Err(Failure::Io(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
