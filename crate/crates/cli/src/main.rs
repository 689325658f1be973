use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dpsynth::accountant::{compose_and_convert, AccountantLedger};
use dpsynth::audits::run_audits;
use dpsynth::pipeline::{
    emit_report, eval_stage, prepare, pretrain_stage, run_experiment, synth_stage, train_stage, with_marker, Epsilon,
    ExperimentConfig, Metrics, RunDir, METRICS_FILE,
};
use dpsynth::{Error, Result};

#[derive(Parser)]
#[command(name = "dpsynth", version, about = "Differentially private image synthesis benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "exp")]
    exp_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Create the run directory and check the data.
    Prepare(RunArgs),
    /// Non-private warm starts on public data (cached).
    Pretrain(RunArgs),
    /// Private training; writes the model and ledger.
    Train(RunArgs),
    /// Generate synthetic data from the trained model.
    Synth(RunArgs),
    /// Fidelity and utility metrics.
    Eval(RunArgs),
    /// All stages.
    Run(RunArgs),
    /// Comparison table over finished runs.
    Report {
        #[arg(long, default_value = "exp")]
        exp_dir: PathBuf,
        /// Output directory; defaults to the experiment directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Epsilon of a run's ledger, or of a ledger file.
    Account {
        #[arg(long, conflicts_with = "ledger")]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "exp")]
        exp_dir: PathBuf,
        #[arg(long, requires = "delta")]
        ledger: Option<PathBuf>,
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Run a config over several ε values and seeds, then report.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated; `inf` for no privacy.
        #[arg(long, value_delimiter = ',', default_value = "1,10,inf")]
        epsilons: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Check the analytical claims; prints JSON reports.
    Audit {
        #[arg(long)]
        only: Option<String>,
    },
}

fn load(args: &RunArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let base = args.config.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, base))
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn parse_epsilon(s: &str) -> Result<Epsilon> {
    serde_json::from_str::<Epsilon>(&format!("\"{s}\""))
        .or_else(|_| s.parse::<f64>().map(Epsilon))
        .map_err(|_| Error::Validation(format!("bad epsilon {s:?}")))
}

fn collect_metrics(exp_dir: &Path) -> Result<Vec<Metrics>> {
    let mut out = Vec::new();
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(exp_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(METRICS_FILE).exists())
        .collect();
    dirs.sort();
    for d in dirs {
        out.push(Metrics::parse(&std::fs::read_to_string(d.join(METRICS_FILE))?)?);
    }
    Ok(out)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(a) => {
            let (cfg, base) = load(&a)?;
            let dir = with_marker(&cfg, &a.exp_dir, "prepare", || prepare(&cfg, &base, &a.exp_dir))?;
            println!("{}", dir.root.display());
        }
        Command::Pretrain(a) => {
            let (cfg, base) = load(&a)?;
            with_marker(&cfg, &a.exp_dir, "pretrain", || pretrain_stage(&cfg, &base, &a.exp_dir))?;
        }
        Command::Train(a) => {
            let (cfg, base) = load(&a)?;
            let ledger = with_marker(&cfg, &a.exp_dir, "train", || train_stage(&cfg, &base, &a.exp_dir))?;
            print_json(&ledger)?;
        }
        Command::Synth(a) => {
            let (cfg, base) = load(&a)?;
            let syn = with_marker(&cfg, &a.exp_dir, "synth", || synth_stage(&cfg, &base, &a.exp_dir))?;
            println!("{} samples", syn.len());
        }
        Command::Eval(a) => {
            let (cfg, base) = load(&a)?;
            print_json(&with_marker(&cfg, &a.exp_dir, "eval", || eval_stage(&cfg, &base, &a.exp_dir))?)?;
        }
        Command::Run(a) => {
            let (cfg, base) = load(&a)?;
            let rec = run_experiment(&cfg, &base, &a.exp_dir)?;
            eprintln!("{} finished in {:.1}s", rec.dir.root.display(), rec.wall_clock_secs);
            print_json(&rec.metrics)?;
        }
        Command::Report { exp_dir, out } => {
            let metrics = collect_metrics(&exp_dir)?;
            let (csv, md) = emit_report(&metrics, out.unwrap_or(exp_dir))?;
            println!("{}\n{}", csv.display(), md.display());
        }
        Command::Account {
            config,
            seed,
            exp_dir,
            ledger,
            delta,
        } => {
            let (ledger, delta) = match (config, ledger) {
                (Some(c), _) => {
                    let mut cfg = ExperimentConfig::load(&c)?;
                    if let Some(s) = seed {
                        cfg.seed = s;
                    }
                    let dir = RunDir::new(&exp_dir, &cfg)?;
                    let delta = match (delta, cfg.privacy.delta) {
                        (Some(d), _) => d,
                        (None, dpsynth::pipeline::Delta::Value(d)) => d,
                        (None, dpsynth::pipeline::Delta::Auto) => dir.read_metrics()?.delta,
                    };
                    (dir.read_ledger()?, delta)
                }
                (None, Some(path)) => (
                    AccountantLedger::from_json(&std::fs::read_to_string(path)?)?,
                    delta.expect("clap requires delta"),
                ),
                (None, None) => return Err(Error::Validation("account needs --config or --ledger".into())),
            };
            let eps = compose_and_convert(&ledger, delta)?;
            print_json(&serde_json::json!({
                "epsilon": Epsilon(eps),
                "delta": delta,
                "events": ledger.events(),
            }))?;
        }
        Command::Sweep { run, epsilons, seeds } => {
            let (cfg, base) = load(&run)?;
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
            let mut all = Vec::new();
            for e in &epsilons {
                let eps = parse_epsilon(e)?;
                for &s in &seeds {
                    let mut c = cfg.clone();
                    c.privacy.epsilon = eps;
                    c.seed = s;
                    let rec = run_experiment(&c, &base, &run.exp_dir)?;
                    eprintln!("{} eps={e} seed={s} fid={:.4}", rec.run_id, rec.metrics.fid);
                    all.push(rec.metrics);
                }
            }
            let (csv, md) = emit_report(&all, &run.exp_dir)?;
            println!("{}\n{}", csv.display(), md.display());
        }
        Command::Audit { only } => {
            let reports = run_audits(only.as_deref())?;
            let failed = reports.iter().filter(|r| !r.passed).count();
            print_json(&reports)?;
            if failed > 0 {
                return Err(Error::Validation(format!("{failed} audit(s) failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
