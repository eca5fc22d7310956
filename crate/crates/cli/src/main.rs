use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use diffnet::Precision;
use stcm_cli::checkpoint::Checkpoint;
use stcm_cli::commands::{self, load_intentions};
use stcm_cli::config::RunConfig;
use stcm_cli::dataset::Dataset;
use stcm_cli::{CliError, Result};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Parser, Debug)]
#[command(name = "stcm", version, about = "Learned spatio-temporal cost maps for motion planning")]
struct Cli {
    /// Run configuration (TOML). Without it `--seed` is required.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, value_enum, default_value = "f32")]
    precision: PrecisionArg,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate scenarios and write `dataset.gcds` plus a seed manifest.
    Synth {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Cluster expert futures into an intention set (`intentions.toml`).
    Cluster {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        min_pts: Option<usize>,
    },
    /// Train a cost-map estimator.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        intentions: Option<PathBuf>,
        /// Overrides the auxiliary loss weight; 0 disables the imitation loss.
        #[arg(long)]
        aux_weight: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate RuleCM and/or checkpoints under every selection setting.
    Eval {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        rule_cm: bool,
        #[arg(long)]
        intentions: Option<PathBuf>,
    },
    /// Plan one scenario and render its grids.
    Plan {
        /// Scenario seed to generate.
        #[arg(long)]
        scenario: u64,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        intentions: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive and loss term.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        probes: usize,
        /// Corrupt convolution kernel gradients; the check must then fail.
        #[arg(long)]
        corrupt: bool,
    },
}

fn config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, cli.seed) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(s)) => RunConfig::with_seed(s),
        (None, None) => return Err(CliError::Input("a seed is required: pass --seed or --config".into())),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.resolve();
    }
    Ok(cfg)
}

fn pick(flag: &Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| configured.clone())
        .ok_or_else(|| CliError::Input(format!("no {what} given (flag or [paths] in the config)")))
}

fn run(cli: &Cli) -> Result<()> {
    let precision = match cli.precision {
        PrecisionArg::F32 => Precision::Single,
        PrecisionArg::F64 => Precision::Double,
    };
    if let Cmd::Gradcheck { probes, corrupt } = &cli.cmd {
        let text = commands::cmd_gradcheck(cli.seed.unwrap_or(0), *probes, *corrupt)?;
        print!("{text}");
        return Ok(());
    }
    let mut cfg = config(cli)?;
    let intentions = |flag: &Option<PathBuf>, cfg: &RunConfig| {
        flag.clone().or_else(|| cfg.paths.intentions.clone()).map(|p| load_intentions(&p)).transpose()
    };
    match &cli.cmd {
        Cmd::Synth { count } => {
            cfg.validate()?;
            let n = count.unwrap_or(cfg.data.count);
            let path = cli.out.join("dataset.gcds");
            let m = commands::cmd_synth(&cfg, n, &path)?;
            println!("wrote {} examples to {}", m.count, path.display());
        }
        Cmd::Cluster { dataset, eps, min_pts } => {
            if let Some(e) = eps {
                cfg.cluster.eps = *e;
            }
            if let Some(m) = min_pts {
                cfg.cluster.min_pts = *m;
            }
            cfg.validate()?;
            let ds = Dataset::load(&pick(dataset, &cfg.paths.dataset, "dataset")?)?;
            let path = cli.out.join("intentions.toml");
            let set = commands::cmd_cluster(&cfg, &ds, &path)?;
            cfg.write_resolved(&cli.out)?;
            println!("{} intentions, sizes {:?}, written to {}", set.len(), set.member_counts, path.display());
        }
        Cmd::Train { dataset, intentions: ip, aux_weight, epochs } => {
            if let Some(b) = aux_weight {
                cfg.loss.beta = *b;
            }
            if let Some(e) = epochs {
                cfg.train.params.epochs = *e;
            }
            cfg.validate()?;
            let ds = Dataset::load(&pick(dataset, &cfg.paths.dataset, "dataset")?)?;
            let set = intentions(ip, &cfg)?;
            let log = commands::cmd_train(&cfg, &ds, set.as_ref(), &cli.out, precision)?;
            if let Some(l) = log.last() {
                println!("epoch {} total {:.5}; model written to {}", l.epoch, l.terms.total, cli.out.join("model.cmec").display());
            }
        }
        Cmd::Eval { dataset, checkpoint, rule_cm, intentions: ip } => {
            cfg.validate()?;
            let ds = Dataset::load(&pick(dataset, &cfg.paths.dataset, "dataset")?)?;
            let mut paths = checkpoint.clone();
            if paths.is_empty() {
                paths.extend(cfg.paths.checkpoint.clone());
            }
            let cks = paths.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
            let set = intentions(ip, &cfg)?;
            let report = commands::cmd_eval(&cfg, &ds, &cks, *rule_cm, set.as_ref(), &cli.out, precision)?;
            print!("{}", report.table());
        }
        Cmd::Plan { scenario, checkpoint, intentions: ip } => {
            cfg.validate()?;
            let ck = checkpoint.clone().or_else(|| cfg.paths.checkpoint.clone()).map(|p| Checkpoint::load(&p)).transpose()?;
            let set = intentions(ip, &cfg)?;
            let out = commands::cmd_plan(&cfg, ck.as_ref(), *scenario, set.as_ref(), &cli.out)?;
            println!(
                "{} candidates, chosen #{}; {} images in {}",
                out.candidates,
                out.chosen,
                out.images.len(),
                cli.out.display()
            );
        }
        Cmd::Gradcheck { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
