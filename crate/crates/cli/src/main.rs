//! Command-line entry point: one subcommand per pipeline stage.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing upstream artifact,
//! 4 numerical failure, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use imvae::config::PipelineConfig;
use imvae::error::{Error, Result};
use imvae::model::ColdStartRoute;
use imvae::pipeline::Pipeline;
use imvae::trainer::Ablation;
use imvae::varinf::CrossMode;

#[derive(Parser, Debug)]
#[command(name = "imvae", version, about = "Cross-domain sequential recommendation pipeline")]
struct Cli {
    /// Pipeline configuration (TOML); `IMVAE_<SECTION>__<KEY>` variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Training seed(s); a list replaces `eval.seeds` for `ablate` and `sweep`.
    #[arg(long, global = true, value_delimiter = ',')]
    seed: Vec<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Rerun stages even when their outputs are up to date.
    #[arg(long, global = true)]
    force: bool,

    /// Share of interaction records kept, as a fraction or a percentage
    /// (`0.5` or `50`). A list sets the density sweep.
    #[arg(long, global = true, value_delimiter = ',')]
    density: Vec<f64>,

    /// Share of overlapping training users keeping both domains, as a
    /// fraction or a percentage. A list sets the overlap sweep.
    #[arg(long, global = true, value_delimiter = ',')]
    overlap_ratio: Vec<f64>,

    /// Ablation variant: no_psg, no_if_ds or no_dn (comma-separated to combine).
    #[arg(long, global = true)]
    ablation: Option<String>,

    /// Cross-domain encoder of the inference network.
    #[arg(long, global = true, value_enum)]
    cross_encoder: Option<CrossArg>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split users, simulate cold-start users and build examples.
    Prepare,
    /// Train the graph recall model that generates pseudo-sequences.
    TrainPsg,
    /// Fill every example's pseudo-sequences from the recall embeddings.
    Pseudo,
    /// Train the model for the configured seed and variant.
    Train,
    /// Evaluate the trained model on the test users.
    Evaluate {
        /// Cold-start route; defaults to the variant's route.
        #[arg(long, value_enum)]
        route: Option<RouteArg>,
    },
    /// Full model and the three single-module ablations over every seed.
    Ablate,
    /// Sweep density, overlap ratio, window length and loss weights.
    Sweep,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CrossArg {
    Attention,
    Mlp,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RouteArg {
    Auxiliary,
    CrossEncoder,
    PriorMean,
}

impl From<RouteArg> for ColdStartRoute {
    fn from(r: RouteArg) -> Self {
        match r {
            RouteArg::Auxiliary => ColdStartRoute::Auxiliary,
            RouteArg::CrossEncoder => ColdStartRoute::CrossEncoder,
            RouteArg::PriorMean => ColdStartRoute::PriorMean,
        }
    }
}

/// Accept `0.25` as well as `25` (percent).
fn fraction(v: f64, flag: &str) -> Result<f64> {
    let f = if v > 1.0 { v / 100.0 } else { v };
    if f > 0.0 && f <= 1.0 {
        Ok(f)
    } else {
        Err(Error::Config(format!("--{flag} {v} is not a share in (0, 100%]")))
    }
}

fn resolve(cli: &Cli) -> Result<PipelineConfig> {
    let mut c = PipelineConfig::load(cli.config.as_deref())?;
    let sweeping = matches!(cli.command, Command::Sweep);
    let multi_seed = matches!(cli.command, Command::Ablate | Command::Sweep);
    if let Some(out) = &cli.out {
        c.out = out.clone();
    }
    match cli.seed.as_slice() {
        [] => {}
        [s] if !multi_seed => c.model.seed = *s,
        seeds if multi_seed => c.eval.seeds = seeds.to_vec(),
        _ => {
            return Err(Error::Config(
                "a seed list is only accepted by `ablate` and `sweep`".into(),
            ))
        }
    }
    let density: Vec<f64> = cli
        .density
        .iter()
        .map(|&v| fraction(v, "density"))
        .collect::<Result<_>>()?;
    let overlap: Vec<f64> = cli
        .overlap_ratio
        .iter()
        .map(|&v| fraction(v, "overlap-ratio"))
        .collect::<Result<_>>()?;
    for (values, single, sweep, flag) in [
        (density, &mut c.corpus.density, &mut c.sweep.density, "density"),
        (overlap, &mut c.corpus.k_o, &mut c.sweep.k_o, "overlap-ratio"),
    ] {
        match values.as_slice() {
            [] => {}
            _ if sweeping => *sweep = values,
            [v] => *single = *v,
            _ => return Err(Error::Config(format!("a --{flag} list is only accepted by `sweep`"))),
        }
    }
    if let Some(a) = &cli.ablation {
        c.model.ablation = Ablation::parse(a)?;
    }
    if let Some(m) = cli.cross_encoder {
        c.model.cross_encoder = match m {
            CrossArg::Attention => CrossMode::Attention,
            CrossArg::Mlp => CrossMode::Mlp,
        };
    }
    c.validate()?;
    Ok(c)
}

fn run(cli: Cli) -> Result<()> {
    let config = resolve(&cli)?;
    let pipeline = Pipeline::new(config, cli.force);
    pipeline.write_resolved_config()?;
    match cli.command {
        Command::Prepare => {
            pipeline.prepare()?;
        }
        Command::TrainPsg => {
            pipeline.train_psg()?;
        }
        Command::Pseudo => {
            pipeline.pseudo()?;
        }
        Command::Train => {
            pipeline.train()?;
        }
        Command::Evaluate { route } => {
            let (_, report) = pipeline.evaluate(route.map(Into::into))?;
            print!("{}", report.to_table());
        }
        Command::Ablate => print!("{}", pipeline.ablate()?.to_table()),
        Command::Sweep => print!("{}", pipeline.sweep()?.to_table()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
