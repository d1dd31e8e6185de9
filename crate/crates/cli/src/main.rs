use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use appo_core::analyze::analyze_file;
use appo_core::env::{generate, write_dataset};
use appo_core::frame_select::Strategy;
use appo_core::objective::Algorithm;
use appo_core::reweight::{Faults, SlotReduction, WeightAveraging};
use appo_core::selftest::{run_selftest, SelftestOptions};
use appo_core::train::{train, RunConfig, SplitSource, METRICS_FILE};
use appo_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "appo", version, about = "Attention-guided policy optimization on a synthetic video task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and write metrics.jsonl and checkpoint.json.
    Train(TrainArgs),
    /// Recompute frame selection and token weights for a trace.
    Analyze(AnalyzeArgs),
    /// Run the built-in invariant suites.
    Selftest(SelftestArgs),
    /// Write synthetic task instances as JSON lines.
    GenData(GenDataArgs),
}

/// Flags shared by `train` and `analyze`. Each one overrides the matching
/// key of `--config`.
#[derive(Args, Default)]
struct RunFlags {
    /// TOML file with any run setting; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    k1: Option<usize>,
    #[arg(long)]
    k2: Option<usize>,
    #[arg(long)]
    k3: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_parser = parse_from_str::<Strategy>)]
    strategy: Option<Strategy>,
    #[arg(long)]
    attn_layers: Option<usize>,
    #[arg(long, value_parser = parse_from_str::<SplitSource>)]
    split_source: Option<SplitSource>,
    #[arg(long, value_parser = parse_from_str::<SlotReduction>)]
    slot_reduction: Option<SlotReduction>,
    #[arg(long, value_parser = parse_from_str::<WeightAveraging>)]
    weight_averaging: Option<WeightAveraging>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunFlags,
    #[arg(long, value_parser = parse_from_str::<Algorithm>)]
    algo: Option<Algorithm>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    clip_low: Option<f64>,
    #[arg(long)]
    clip_high: Option<f64>,
    #[arg(long)]
    kl_coeff: Option<f64>,
    #[arg(long)]
    inner_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Record per-step wall time (makes metrics run-dependent).
    #[arg(long)]
    wall_time: bool,
    /// Also write every step's rollout groups to trace.jsonl.
    #[arg(long)]
    dump_trace: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Trace file (JSON lines).
    trace: PathBuf,
    #[command(flatten)]
    run: RunFlags,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    MinmaxDegenerate,
    KlSign,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Multiplies the number of cases per suite.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Break part of the implementation to confirm the suites catch it.
    #[arg(long, value_enum)]
    inject_fault: Vec<Fault>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// TOML file; only its [generator] table is used.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse_from_str<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Param(_) => 2,
        Error::Numeric(_) | Error::NonFiniteLoss { .. } | Error::Shape(_) | Error::Length { .. } => 3,
        Error::Io { .. } | Error::Stream(_) | Error::Parse { .. } | Error::Version { .. } | Error::Invalid { .. } => 4,
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })?;
            RunConfig::from_toml(&text)
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl RunFlags {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = load_config(self.config.as_deref())?;
        set(&mut cfg.tau, self.tau);
        set(&mut cfg.k1, self.k1);
        set(&mut cfg.k2, self.k2);
        set(&mut cfg.k3, self.k3);
        set(&mut cfg.alpha, self.alpha);
        set(&mut cfg.strategy, self.strategy);
        set(&mut cfg.attention_layers, self.attn_layers);
        set(&mut cfg.split_source, self.split_source);
        set(&mut cfg.slot_reduction, self.slot_reduction);
        set(&mut cfg.weight_averaging, self.weight_averaging);
        Ok(cfg)
    }
}

fn run_train(args: TrainArgs) -> Result<(), Error> {
    let mut cfg = args.run.resolve()?;
    set(&mut cfg.algorithm, args.algo);
    set(&mut cfg.seed, args.seed);
    set(&mut cfg.steps, args.steps);
    set(&mut cfg.group_size, args.group_size);
    set(&mut cfg.batch_size, args.batch_size);
    set(&mut cfg.clip_low, args.clip_low);
    set(&mut cfg.clip_high, args.clip_high);
    set(&mut cfg.kl_coeff, args.kl_coeff);
    set(&mut cfg.inner_epochs, args.inner_epochs);
    set(&mut cfg.lr, args.lr);
    set(&mut cfg.temperature, args.temperature);
    set(&mut cfg.out, args.out);
    cfg.wall_time |= args.wall_time;
    cfg.dump_trace |= args.dump_trace;
    cfg.validate()?;
    let out = train(&cfg)?;
    if let Some(last) = out.metrics.last() {
        eprintln!(
            "{} steps: reward {:.3}, accuracy {:.3}, perception hit rate {:.3}",
            out.metrics.len(),
            last.mean_reward,
            last.mean_accuracy,
            last.perception_hit_rate
        );
    }
    eprintln!("wrote {} and {}", cfg.out.join(METRICS_FILE).display(), out.checkpoint_path.display());
    Ok(())
}

fn write_output(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Error::Io { path: p.to_path_buf(), source: e }),
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn run_analyze(args: AnalyzeArgs) -> Result<(), Error> {
    let cfg = args.run.resolve()?;
    cfg.validate()?;
    let report = analyze_file(&args.trace, &cfg)?;
    write_output(args.out.as_deref(), &report.to_json()?)
}

fn run_selftest_cmd(args: SelftestArgs) -> Result<bool, Error> {
    if !(args.scale > 0.0 && args.scale.is_finite()) {
        return Err(Error::Config(format!("scale must be positive, got {}", args.scale)));
    }
    let mut faults = Faults::NONE;
    for f in args.inject_fault {
        match f {
            Fault::MinmaxDegenerate => faults.minmax_divide_degenerate = true,
            Fault::KlSign => faults.kl_negate = true,
        }
    }
    let report = run_selftest(&SelftestOptions { seed: args.seed, scale: args.scale, faults });
    println!("{report}");
    Ok(report.passed())
}

fn run_gen_data(args: GenDataArgs) -> Result<(), Error> {
    if args.count == 0 {
        return Err(Error::Config("count must be at least 1".into()));
    }
    let mut gen = load_config(args.config.as_deref())?.generator;
    set(&mut gen.seed, args.seed);
    gen.validate()?;
    let instances = (0..args.count as u64).map(|i| generate(&gen, i)).collect::<Result<Vec<_>, _>>()?;
    let file = fs::File::create(&args.out).map_err(|e| Error::Io { path: args.out.clone(), source: e })?;
    write_dataset(&instances, io::BufWriter::new(file)).map_err(|e| match e {
        Error::Stream(source) => Error::Io { path: args.out.clone(), source },
        other => other,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => run_train(a).map(|()| true),
        Command::Analyze(a) => run_analyze(a).map(|()| true),
        Command::Selftest(a) => run_selftest_cmd(a),
        Command::GenData(a) => run_gen_data(a).map(|()| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
