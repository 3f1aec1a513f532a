use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use fragshuffle::accounting::AccountingMode;
use fragshuffle::experiment::{self, ExperimentConfig, Mechanism, RowSpec};

#[derive(Parser)]
#[command(
    name = "fragshuffle",
    version,
    about = "Shuffle-model histogram experiments and privacy accounting"
)]
struct Cli {
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `out_dir`, then `./out`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate every row of an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Resolve privacy columns for one setting without simulating.
    Account {
        #[arg(
            long,
            conflicts_with = "epsilon_central",
            required_unless_present = "epsilon_central"
        )]
        epsilon_local: Option<f64>,
        #[arg(long)]
        epsilon_central: Option<f64>,
        /// Number of respondents.
        #[arg(long)]
        n: u64,
        #[arg(long)]
        delta: f64,
        #[arg(long, value_enum, default_value_t = Mode::BinaryExact)]
        mode: Mode,
        /// Report fragments per attribute; when set, the local budget is the
        /// backstop budget.
        #[arg(long)]
        tau: Option<u32>,
        #[arg(long, requires = "tau")]
        epsilon_fragment: Option<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    BinaryExact,
    BinarySimple,
    Generic,
}

impl From<Mode> for AccountingMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::BinaryExact => AccountingMode::BinaryExact,
            Mode::BinarySimple => AccountingMode::BinarySimple,
            Mode::Generic => AccountingMode::Generic,
        }
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_else(|| "none".into())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { config } => {
            let mut cfg =
                ExperimentConfig::from_file(&config).with_context(|| format!("loading {}", config.display()))?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let out = cli
                .out_dir
                .or_else(|| cfg.out_dir.clone())
                .unwrap_or_else(|| PathBuf::from("out"));
            cfg.out_dir = Some(out.clone());
            let rows = experiment::run_experiment(&cfg, &out, cli.threads)?;
            for r in &rows {
                match &r.infeasible {
                    Some(why) => println!("row {} {}: infeasible ({why})", r.row, r.mechanism.name()),
                    None => println!(
                        "row {} {}: eps_c={} rmse={} linf={}",
                        r.row,
                        r.mechanism.name(),
                        opt(r.privacy.and_then(|p| p.epsilon_c)),
                        opt(r.rmse.map(|m| m.0)),
                        opt(r.linf.map(|m| m.0)),
                    ),
                }
            }
            println!("wrote {}", out.join("results.csv").display());
        }
        Command::Account {
            epsilon_local,
            epsilon_central,
            n,
            delta,
            mode,
            tau,
            epsilon_fragment,
        } => {
            let row = RowSpec {
                mechanism: if tau.is_some() {
                    Mechanism::AttrAndReportFrag
                } else {
                    Mechanism::AttrFrag
                },
                epsilon_central,
                epsilon_local,
                epsilon_fragment,
                tau,
                delta,
                accounting: mode.into(),
            };
            if let Err(e) = row.validate() {
                bail!(e);
            }
            let p = experiment::report_privacy(&row, n)?;
            println!("epsilon_c = {}", opt(p.epsilon_c));
            println!("delta = {}", p.delta);
            println!("epsilon_l_inf = {}", p.epsilon_l_inf);
            println!("epsilon_l1 = {}", p.epsilon_l1);
            if tau.is_some() {
                println!("epsilon_b = {}", opt(p.epsilon_b));
                println!("epsilon_f = {}", opt(p.epsilon_f));
                println!("tau = {}", p.tau);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
