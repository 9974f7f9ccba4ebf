use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use layerscope::pipeline::{
    self, emit_reports, resolve_output_dir, synth_sphere, verify_mnist_idx, write_csv, write_text,
    ConfigMap, ExperimentConfig,
};
use layerscope::theory::{
    asymptotic_check, equilibrium_layer, info_loss_curves, propagate, EquilibriumMode,
    DEFAULT_EPSILON,
};
use layerscope::Result;

#[derive(Parser)]
#[command(
    name = "layerscope",
    version,
    about = "Layerwise tangent-kernel alignment toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Infinite-width correlation propagation.
    Theory {
        #[command(subcommand)]
        command: TheoryCommand,
    },
    /// Dataset utilities.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// Train with layerwise alignment probes.
    Train(RunArgs),
    /// Peak-layer depth sweep.
    Sweep(RunArgs),
    /// Train only the last layer of a frozen network.
    Frozen(RunArgs),
    /// Greedy layerwise kernel training.
    Lfm(RunArgs),
    /// Hessian probes at a training snapshot.
    Hessian(RunArgs),
    /// Summarize a finished run directory into report.txt.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Closed,
    Numeric,
}

#[derive(Subcommand)]
enum TheoryCommand {
    /// Correlations, derivatives and zeta products for one input pair.
    Propagate {
        #[arg(long, allow_negative_numbers = true)]
        c0: f64,
        #[arg(long)]
        depth: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forward and backward information-loss curves.
    Curves {
        #[arg(long)]
        depth: usize,
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
        #[arg(long, default_value_t = 64)]
        grid: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Equilibrium layer for a depth.
    Equilibrium {
        #[arg(long)]
        depth: usize,
        #[arg(long, value_enum, default_value_t = Mode::Closed)]
        mode: Mode,
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
        #[arg(long, default_value_t = 64)]
        grid: usize,
    },
    /// Numeric check of the telescoped product expansion.
    LemmaCheck {
        #[arg(long)]
        a: u32,
        #[arg(long)]
        kappa: f64,
        #[arg(long, default_value_t = 100_000)]
        l_max: usize,
    },
    /// Run a theory config and write its artifacts.
    Run(RunArgs),
}

#[derive(Subcommand)]
enum DataCommand {
    /// Write a synthetic sphere dataset as CSV.
    Generate {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 3.0)]
        margin: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check IDX magics and counts.
    Verify {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Config file with `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random stream of the run.
    #[arg(long)]
    seed: u64,
    /// Output directory (overrides the config and the environment).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `section.key=value` settings, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn load_config(args: &RunArgs, kind: &str) -> Result<ExperimentConfig> {
    let (mut map, base) = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| layerscope::Error::Io {
                path: p.clone(),
                source: e,
            })?;
            (ConfigMap::parse(&text)?, p.parent().map(Path::to_path_buf))
        }
        None => (ConfigMap::default(), None),
    };
    for kv in &args.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| {
            layerscope::Error::Config(format!("--set expects KEY=VALUE, got {kv:?}"))
        })?;
        map.set(k.trim(), v.trim());
    }
    if let Some(existing) = map.raw("experiment.kind") {
        let existing = pipeline::ExperimentKind::parse(existing)?;
        if existing.name() != pipeline::ExperimentKind::parse(kind)?.name() {
            return Err(layerscope::Error::Config(format!(
                "config is for {}, command runs {kind}",
                existing.name()
            )));
        }
    }
    map.set("experiment.kind", kind);
    map.set("experiment.seed", args.seed);
    ExperimentConfig::from_map(&map, base.as_deref())
}

fn run(args: &RunArgs, kind: &str) -> Result<()> {
    let cfg = load_config(args, kind)?;
    let out = resolve_output_dir(&cfg, args.out.as_deref());
    std::fs::create_dir_all(&out).map_err(|e| layerscope::Error::Io {
        path: out.clone(),
        source: e,
    })?;
    for line in pipeline::run_experiment(&cfg, &out)? {
        println!("{line}");
    }
    println!("output: {}", out.display());
    Ok(())
}

fn emit(out: Option<&Path>, header: &str, rows: &[String]) -> Result<()> {
    match out {
        Some(p) => write_csv(p, header, rows),
        None => {
            println!("{header}");
            for r in rows {
                println!("{r}");
            }
            Ok(())
        }
    }
}

fn theory(cmd: &TheoryCommand) -> Result<()> {
    match cmd {
        TheoryCommand::Propagate { c0, depth, out } => {
            let p = propagate(*c0, *depth)?;
            let rows: Vec<String> = (1..=*depth)
                .map(|l| {
                    let gp = p
                        .gprime
                        .get(l - 1)
                        .map_or(String::new(), |g| format!("{g:.15e}"));
                    format!("{l},{:.15e},{gp},{:.15e}", p.c(l), p.zeta_at(l))
                })
                .collect();
            emit(out.as_deref(), "layer,corr,gprime,zeta", &rows)
        }
        TheoryCommand::Curves {
            depth,
            epsilon,
            grid,
            out,
        } => {
            let c = info_loss_curves(*epsilon, *grid, *depth)?;
            let rows: Vec<String> = (1..=*depth)
                .map(|l| format!("{l},{:.15e},{:.15e}", c.forward_at(l), c.backward_at(l)))
                .collect();
            emit(out.as_deref(), "layer,forward,backward", &rows)
        }
        TheoryCommand::Equilibrium {
            depth,
            mode,
            epsilon,
            grid,
        } => {
            let v = match mode {
                Mode::Closed => equilibrium_layer(*depth, EquilibriumMode::Closed, None)?,
                Mode::Numeric => {
                    let c = info_loss_curves(*epsilon, *grid, *depth)?;
                    equilibrium_layer(*depth, EquilibriumMode::Numeric, Some(&c))?
                }
            };
            println!("{v}");
            Ok(())
        }
        TheoryCommand::LemmaCheck { a, kappa, l_max } => {
            let c = asymptotic_check(*a, *kappa, *l_max)?;
            println!("start = {}", c.start);
            println!("limit = {:.15e}", c.limit);
            println!("tail_sup = {:.6e}", c.tail_sup);
            let mut points = vec![c.start.max(100), *l_max / 10, *l_max];
            points.dedup();
            for l in points {
                if l >= c.start && l <= *l_max {
                    println!(
                        "l = {l}: r = {:.15e}, l*|r - limit| = {:.6e}",
                        c.r_at(l),
                        c.scaled_error(l)
                    );
                }
            }
            Ok(())
        }
        TheoryCommand::Run(args) => run(args, "theory"),
    }
}

fn data(cmd: &DataCommand) -> Result<()> {
    match cmd {
        DataCommand::Generate {
            n,
            d,
            k,
            margin,
            seed,
            out,
        } => {
            let ds = synth_sphere(*n, *d, *k, *margin, *seed)?;
            write_text(out, &ds.to_csv())?;
            println!(
                "wrote {} samples to {} (sha256 {})",
                ds.len(),
                out.display(),
                ds.content_hash()
            );
            Ok(())
        }
        DataCommand::Verify { images, labels } => {
            let (n, r, c) = verify_mnist_idx(images, labels)?;
            println!("ok: {n} images of {r}x{c} with matching labels");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Theory { command } => theory(command),
        Command::Data { command } => data(command),
        Command::Train(a) => run(a, "align_train"),
        Command::Sweep(a) => run(a, "depth_sweep"),
        Command::Frozen(a) => run(a, "frozen"),
        Command::Lfm(a) => run(a, "lfm"),
        Command::Hessian(a) => run(a, "hessian"),
        Command::Report { run } => emit_reports(run).map(|p| println!("{}", p.display())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
