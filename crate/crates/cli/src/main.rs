use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use mlplatt::bench::{
    run_ablation, run_benchmark, run_rcr_comparison, run_theta_sweep, DatasetSource, ExperimentConfig,
    RunOutput,
};
use mlplatt::datagen::GeneratorConfig;
use mlplatt::dataio::AliExpressColumns;
use mlplatt::Error;

/// Calibration experiments for learning-to-rank scores.
#[derive(Debug, Parser)]
#[command(name = "mlplatt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Every calibrator of the roster on a LambdaLoss ranker.
    Bench(RunArgs),
    /// Misordered listing fraction of MLPlatt across penalty weights.
    ThetaSweep(RunArgs),
    /// MLPlatt with its context network or hidden head removed.
    Ablation(RunArgs),
    /// RCR-trained rankers against LambdaLoss followed by MLPlatt.
    Rcr(RunArgs),
    /// Print the default configuration as TOML.
    DefaultConfig,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML experiment configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; a run-<hash> directory is created inside it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `synthetic`, a dataset file, or an AliExpress `.csv` export.
    #[arg(long)]
    dataset: Option<String>,
    /// Number of ECE bins [default: 20, or the config value].
    #[arg(long)]
    bins: Option<usize>,
}

fn dataset_source(arg: &str, current: &DatasetSource) -> DatasetSource {
    if arg == "synthetic" {
        return match current {
            DatasetSource::Synthetic(_) => current.clone(),
            _ => DatasetSource::Synthetic(GeneratorConfig::default()),
        };
    }
    let path = PathBuf::from(arg);
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        let columns = match current {
            DatasetSource::Aliexpress { columns, .. } => columns.clone(),
            _ => AliExpressColumns::default(),
        };
        DatasetSource::Aliexpress { path, columns }
    } else {
        DatasetSource::File { path }
    }
}

fn load_config(args: &RunArgs) -> anyhow::Result<ExperimentConfig> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seeds = vec![seed];
    }
    if let Some(out) = &args.out {
        config.out_dir = out.clone();
    }
    if let Some(d) = &args.dataset {
        config.dataset = dataset_source(d, &config.dataset);
    }
    if let Some(bins) = args.bins {
        config.bins = bins;
    }
    config.validate()?;
    Ok(config)
}

fn run(command: Command) -> anyhow::Result<()> {
    let (args, runner): (RunArgs, fn(&ExperimentConfig) -> mlplatt::Result<RunOutput>) = match command {
        Command::Bench(a) => (a, run_benchmark),
        Command::ThetaSweep(a) => (a, run_theta_sweep),
        Command::Ablation(a) => (a, run_ablation),
        Command::Rcr(a) => (a, run_rcr_comparison),
        Command::DefaultConfig => {
            print!("{}", ExperimentConfig::default().to_toml()?);
            return Ok(());
        }
    };
    let config = load_config(&args)?;
    info!("run directory {}", config.run_dir()?.display());
    let out = runner(&config)?;
    print!("{}", out.markdown);
    info!("wrote {}", out.dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = match e.downcast_ref::<Error>() {
                Some(Error::Config(_)) => 2,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(dataset: Option<&str>) -> RunArgs {
        RunArgs {
            config: None,
            seed: Some(4),
            out: Some("o".into()),
            dataset: dataset.map(String::from),
            bins: Some(10),
        }
    }

    #[test]
    fn flags_override_config() {
        let c = load_config(&args(None)).unwrap();
        assert_eq!(c.seeds, vec![4]);
        assert_eq!(c.out_dir, PathBuf::from("o"));
        assert_eq!(c.bins, 10);
        assert_eq!(c.dataset, DatasetSource::default());
    }

    #[test]
    fn dataset_flag_picks_source_kind() {
        let c = load_config(&args(Some("data/listings.tsv"))).unwrap();
        assert_eq!(c.dataset, DatasetSource::File { path: "data/listings.tsv".into() });
        let c = load_config(&args(Some("export.CSV"))).unwrap();
        assert!(matches!(c.dataset, DatasetSource::Aliexpress { .. }));
        let keep = DatasetSource::Synthetic(GeneratorConfig {
            listings: 7,
            ..GeneratorConfig::default()
        });
        assert_eq!(dataset_source("synthetic", &keep), keep);
    }

    #[test]
    fn zero_bins_is_a_config_error() {
        let mut a = args(None);
        a.bins = Some(0);
        let err = load_config(&a).unwrap_err();
        assert!(matches!(err.downcast_ref::<Error>(), Some(Error::Config(_))));
    }

    #[test]
    fn missing_config_file_is_reported() {
        let mut a = args(None);
        a.config = Some("no/such/config.toml".into());
        let err = load_config(&a).unwrap_err();
        assert!(err.to_string().contains("no/such/config.toml"), "{err}");
    }
}

