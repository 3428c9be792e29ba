use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use wdlab::harness::checkpoint::Checkpoint;
use wdlab::harness::config::ExperimentConfig;
use wdlab::harness::replicate::{self, ReplicateConfig};
use wdlab::harness::{grid, train};
use wdlab::{verify, Error, Result};

#[derive(Parser)]
#[command(name = "wdlab", version, about = "Weight decay mechanisms laboratory")]
struct Cli {
    /// TOML configuration (experiment config; replicate config for `replicate`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for grid cells, experiment arms and oracle checks.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write metrics.csv, checkpoint.bin, summary.json.
    Train,
    /// Grid search over the config's `[grid]` table, then retrain the winner.
    Grid,
    /// Run the randomized oracle checks.
    Verify {
        #[arg(long)]
        only: Option<String>,
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long, default_value_t = verify::DEFAULT_TRIALS)]
        trials: usize,
    },
    /// Run the three mechanism experiments.
    Replicate,
    /// Measure a saved checkpoint and print the diagnostics as JSON.
    Diag {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn experiment(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<bool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.max(1))
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    match &cli.command {
        Command::Train => {
            let cfg = experiment(cli)?;
            let run = train::run_to_dir(&cfg, &cfg.out_dir)?;
            let r = run.final_record();
            println!(
                "{}: epoch {} train acc {:.4} test acc {:.4} ({:.1}s) -> {}",
                cfg.name,
                r.epoch,
                r.train_acc,
                r.test_acc,
                run.elapsed_secs,
                cfg.out_dir.display()
            );
            Ok(true)
        }
        Command::Grid => {
            let cfg = experiment(cli)?;
            let spec = cfg
                .grid
                .clone()
                .ok_or_else(|| Error::Config("the config has no [grid] table".into()))?;
            let data = cfg.load_data()?;
            let report = grid::run_grid(&cfg, &spec, &data, cli.jobs, Some(&cfg.out_dir))?;
            for c in &report.cells {
                match (c.val_acc, &c.error) {
                    (Some(a), _) => println!("lr {:<8} beta {:<8} val acc {a:.4}", c.lr, c.beta),
                    (None, e) => println!("lr {:<8} beta {:<8} rejected: {}", c.lr, c.beta, e.as_deref().unwrap_or("?")),
                }
            }
            println!(
                "best lr {} beta {} (val {:.4}); retrained on train+val: test acc {:.4}",
                report.best_lr, report.best_beta, report.best_val_acc, report.final_test_acc
            );
            Ok(true)
        }
        Command::Verify { only, json, trials } => {
            let reports = verify::run_all(cli.seed.unwrap_or(0), *trials, only.as_deref())?;
            for r in &reports {
                println!(
                    "{} {:<24} max rel err {:.3e} (tol {:.0e}, {} trials)",
                    if r.pass { "PASS" } else { "FAIL" },
                    r.name,
                    r.max_rel_error,
                    r.tolerance,
                    r.trials
                );
            }
            if let Some(p) = json {
                std::fs::write(p, serde_json::to_string_pretty(&reports)?)?;
            }
            Ok(reports.iter().all(|r| r.pass))
        }
        Command::Replicate => {
            let mut rc = match &cli.config {
                Some(p) => ReplicateConfig::load(p)?,
                None => ReplicateConfig::default(),
            };
            if let Some(s) = cli.seed {
                rc.seeds = (s..s + rc.seeds.len() as u64).collect();
                rc.m3_seeds = (s..s + rc.m3_seeds.len() as u64).collect();
            }
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs/replicate"));
            let r = replicate::replicate(&rc, cli.jobs, Some(&out))?;
            let line = |ok: bool, what: String| println!("{} {what}", if ok { "PASS" } else { "FAIL" });
            line(r.m1.pass_norms, "M1 decayed norms below baseline".into());
            line(
                r.m1.pass_transfer,
                format!("M1 norm transfer within {:.2} pp of wd-hidden, above baseline", r.m1.transfer_gap_pp),
            );
            line(
                r.m2.pass_ratio_order,
                format!("M2 Jacobian ratio kfac-g {:.2} > sgd {:.2}", r.m2.kfac_g_jacobian_ratio, r.m2.sgd_jacobian_ratio),
            );
            line(
                r.m2.pass_correlation,
                format!("M2 correlation r = {:.3} over {} fitted nets", r.m2.correlation, r.m2.fitted_nets),
            );
            line(r.m3.pass_traces, format!("M3 fisher decay {:?}, gn change {:?}", r.m3.fisher_decay, r.m3.gn_change));
            line(r.m3.pass_damping, "M3 effective damping larger without decay".into());
            println!("summary: {}", out.join("summary.json").display());
            Ok(r.m1.pass_norms
                && r.m1.pass_transfer
                && r.m2.pass_ratio_order
                && r.m2.pass_correlation
                && r.m3.pass_traces
                && r.m3.pass_damping)
        }
        Command::Diag { checkpoint } => {
            // without --config, use the config the run wrote next to its checkpoint
            let beside = Path::new(checkpoint).with_file_name("config.toml");
            let cfg = match (&cli.config, beside.exists()) {
                (None, true) => ExperimentConfig::load(&beside)?,
                _ => experiment(cli)?,
            };
            let ckpt = Checkpoint::load(Path::new(checkpoint))?;
            let data = cfg.load_data()?;
            let rec = train::diagnose(&cfg, &data, &ckpt)?;
            println!("{}", serde_json::to_string_pretty(&rec)?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
