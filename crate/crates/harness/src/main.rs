use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use zo_core::param_store::write_params;
use zo_core::{seedlog, ParamSet, Selection};
use zo_harness::compare::write_csv;
use zo_harness::config::ExperimentKind;
use zo_harness::run::load_params;
use zo_harness::{compare, run_experiment, ExperimentConfig, UsageError};

/// Zeroth-order optimization experiments.
///
/// Experiment verbs read a TOML config. Command-line flags override the
/// corresponding config fields; everything else comes from the file.
/// `ZO_RESULTS_DIR` sets the default results root (default `results`) and
/// never affects numbers.
#[derive(Parser)]
#[command(name = "zo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a `kind = "train"` experiment.
    Train(ExperimentArgs),
    /// Run a `kind = "tta"` experiment.
    Tta(ExperimentArgs),
    /// Run the full sweep grid of any experiment.
    Sweep(SweepArgs),
    /// Rebuild parameters from initial parameters and a seed log.
    Replay(ReplayArgs),
    /// Undo a seed log on the parameters it produced.
    Revert(RevertArgs),
    /// Print a seed log's header and statistics.
    Inspect {
        log: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Tabulate a metric across result directories.
    Compare(CompareArgs),
}

#[derive(Args)]
struct ExperimentArgs {
    config: PathBuf,
    /// Output directory (default: config `output_dir`, then `$ZO_RESULTS_DIR/<name>`).
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Replicate seeds, replacing `seeds`/`replicates`.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Replaces `name`.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Replaces `sweep.q`.
    #[arg(long, value_delimiter = ',')]
    q: Vec<usize>,
    /// Replaces `sweep.sigma`.
    #[arg(long, value_delimiter = ',')]
    sigma: Vec<f64>,
    /// Replaces `sweep.lr`.
    #[arg(long, value_delimiter = ',')]
    lr: Vec<f64>,
    /// Replaces `sweep.forward_budget`.
    #[arg(long)]
    forward_budget: Option<u64>,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    log: PathBuf,
    /// Parameters the logged run started from (`.zops`).
    #[arg(long)]
    init: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    /// Parameter-name patterns the log was scoped to (default: all).
    #[arg(long, value_delimiter = ',')]
    mask: Vec<String>,
}

#[derive(Args)]
struct RevertArgs {
    #[arg(long)]
    log: PathBuf,
    /// Parameters the logged run ended at (`.zops`).
    #[arg(long)]
    params: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    mask: Vec<String>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
    /// Summary metric, e.g. `final_train_loss` or `adapted_error`.
    #[arg(long)]
    metric: String,
    /// Label of the reference group (`experiment` or `experiment/grid_label`).
    #[arg(long)]
    baseline: String,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn load_experiment(a: &ExperimentArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(n) = &a.name {
        cfg.name = n.clone();
    }
    if !a.seeds.is_empty() {
        cfg.seeds = a.seeds.clone();
        cfg.replicates = None;
    }
    let out = match (&a.out, &cfg.output_dir) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => o.clone(),
        (None, None) => {
            let root = std::env::var_os("ZO_RESULTS_DIR").map_or_else(|| PathBuf::from("results"), PathBuf::from);
            root.join(&cfg.name)
        }
    };
    Ok((cfg, out))
}

fn execute(cfg: ExperimentConfig, out: &Path, expect: Option<ExperimentKind>) -> Result<()> {
    if let Some(k) = expect {
        if cfg.kind != k {
            bail!(UsageError(format!("config has kind {:?}; use the matching verb or `sweep`", cfg.kind)));
        }
    }
    cfg.validate()?;
    let report = run_experiment(&cfg, out)?;
    for s in &report.summaries {
        let headline: Vec<String> = s.metrics.iter().map(|(k, v)| format!("{k}={v:.6}")).collect();
        eprintln!("{:<28} {:?} forwards={} {}", s.run_id, s.status, s.forwards, headline.join(" "));
    }
    let failed: Vec<&str> = report.failures().map(|s| s.run_id.as_str()).collect();
    eprintln!("results in {}", out.display());
    if !failed.is_empty() {
        bail!("{} run(s) failed: {}", failed.len(), failed.join(", "));
    }
    Ok(())
}

fn selection_for(params: &ParamSet, mask: &[String]) -> Result<Selection> {
    Ok(if mask.is_empty() { Selection::all(params) } else { Selection::from_patterns(params, mask)? })
}

fn save(params: &ParamSet, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_params(params, BufWriter::new(f))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = (|| -> Result<()> {
        match cli.command {
            Command::Train(a) => {
                let (cfg, out) = load_experiment(&a)?;
                execute(cfg, &out, Some(ExperimentKind::Train))
            }
            Command::Tta(a) => {
                let (cfg, out) = load_experiment(&a)?;
                execute(cfg, &out, Some(ExperimentKind::Tta))
            }
            Command::Sweep(a) => {
                let (mut cfg, out) = load_experiment(&a.exp)?;
                if !a.q.is_empty() {
                    cfg.sweep.q = a.q;
                }
                if !a.sigma.is_empty() {
                    cfg.sweep.sigma = a.sigma;
                }
                if !a.lr.is_empty() {
                    cfg.sweep.lr = a.lr;
                }
                if a.forward_budget.is_some() {
                    cfg.sweep.forward_budget = a.forward_budget;
                }
                execute(cfg, &out, None)
            }
            Command::Replay(a) => {
                let log = seedlog::load(&a.log)?;
                let mut params = load_params(&a.init)?;
                let sel = selection_for(&params, &a.mask)?;
                log.replay(&mut params, &sel).context("replay (pass --mask if the log covers a subset)")?;
                save(&params, &a.out)
            }
            Command::Revert(a) => {
                let log = seedlog::load(&a.log)?;
                let mut params = load_params(&a.params)?;
                let sel = selection_for(&params, &a.mask)?;
                log.revert(&mut params, &sel).context("revert (pass --mask if the log covers a subset)")?;
                save(&params, &a.out)
            }
            Command::Inspect { log, json } => {
                let summary = seedlog::load(&log)?.inspect();
                if json {
                    println!("{}", serde_json::to_string_pretty(&summary)?);
                } else {
                    print!("{summary}");
                }
                Ok(())
            }
            Command::Compare(a) => {
                let table = compare(&a.dirs, &a.metric, &a.baseline)?;
                print!("{table}");
                if let Some(p) = a.csv {
                    write_csv(&table, &p)?;
                }
                Ok(())
            }
        }
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
