use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kan_core::Aggregator;
use kan_harness::report::{adherence_summary, comparison_summary, sweep_summary, write_outputs};
use kan_harness::runner::load_manifest_dataset;
use kan_harness::{run_adherence, run_comparison, run_sweep, ExperimentConfig, Mode, SyntheticSpec, Variant};

#[derive(Parser)]
#[command(name = "kan-exp", version, about = "Train and compare KANs with different node aggregators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Every (hidden, output) aggregator pair on every dataset, ranked by test accuracy.
    Sweep(ExperimentArgs),
    /// Repeated seeded runs of each variant with paired significance tests.
    Compare(ExperimentArgs),
    /// Fraction of hidden-node outputs that stay inside the spline grid range.
    Adherence(ExperimentArgs),
    /// Load, encode, split and scale a dataset, then write it as JSON.
    Preprocess(PreprocessArgs),
}

#[derive(Args)]
struct ExperimentArgs {
    /// TOML experiment config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest (repeatable).
    #[arg(long = "dataset", num_args = 1..)]
    datasets: Vec<PathBuf>,
    /// Generated dataset as kind:features:instances, e.g. xor:30:1000 (repeatable).
    #[arg(long)]
    synthetic: Vec<SyntheticSpec>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    variants: Vec<Variant>,
    #[arg(long, value_delimiter = ',')]
    aggregators: Vec<Aggregator>,
    /// Single regression output on the class index, as in the original setup.
    #[arg(long)]
    strict_replication: bool,
    #[arg(long, env = "KAN_OUT_DIR")]
    out: Option<PathBuf>,
    #[arg(long)]
    parallelism: Option<usize>,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long = "dataset", required = true, num_args = 1..)]
    datasets: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_scale: bool,
    #[arg(long, env = "KAN_OUT_DIR")]
    out: Option<PathBuf>,
}

impl ExperimentArgs {
    fn into_config(self, mode: Mode) -> kan_harness::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::new(mode),
        };
        cfg.mode = mode;
        if !self.datasets.is_empty() || !self.synthetic.is_empty() {
            cfg.datasets = self.datasets;
            cfg.synthetic = self.synthetic;
        }
        if !self.variants.is_empty() {
            cfg.variants = self.variants;
        }
        if !self.aggregators.is_empty() {
            cfg.aggregators = self.aggregators;
        }
        cfg.runs = self.runs.or(cfg.runs);
        cfg.train.iterations = self.iterations.or(cfg.train.iterations);
        cfg.seed = self.seed.unwrap_or(cfg.seed);
        cfg.strict_replication |= self.strict_replication;
        cfg.out_dir = self.out.or(cfg.out_dir);
        cfg.parallelism = self.parallelism.or(cfg.parallelism);
        Ok(cfg)
    }
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("results"))
        .join(cfg.mode.to_string())
}

fn experiment(mode: Mode, args: ExperimentArgs) -> kan_harness::Result<bool> {
    let cfg = args.into_config(mode)?;
    let dir = out_dir(&cfg);
    let (summary, ok) = match mode {
        Mode::Sweep => {
            let o = run_sweep(&cfg)?;
            let s = sweep_summary(&o.report);
            write_outputs(&dir, &o.report, &o.records, &s, &[])?;
            (s, o.all_completed())
        }
        Mode::Compare => {
            let o = run_comparison(&cfg)?;
            let s = comparison_summary(&o.report);
            write_outputs(&dir, &o.report, &o.records, &s, &[])?;
            (s, o.all_completed())
        }
        Mode::Adherence => {
            let o = run_adherence(&cfg)?;
            let s = adherence_summary(&o.report);
            write_outputs(&dir, &o.report, &o.records, &s, &[("adherence.csv", o.report.to_csv())])?;
            (s, o.all_completed())
        }
    };
    print!("{summary}");
    println!("\nwrote {}", dir.display());
    Ok(ok)
}

fn preprocess(args: PreprocessArgs) -> kan_harness::Result<bool> {
    let dir = args.out.unwrap_or_else(|| PathBuf::from("results")).join("preprocess");
    std::fs::create_dir_all(&dir)?;
    for path in &args.datasets {
        let d = load_manifest_dataset(path, args.seed, !args.no_scale)?;
        let info = d.info();
        let target = dir.join(format!("{}.json", d.name));
        d.data.save(&target)?;
        println!(
            "{}: {} instances, {} features, {} classes; split {}/{}/{} -> {}",
            info.name,
            info.instances,
            info.features,
            info.classes,
            info.train,
            info.val,
            info.test,
            target.display()
        );
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Sweep(a) => experiment(Mode::Sweep, a),
        Command::Compare(a) => experiment(Mode::Compare, a),
        Command::Adherence(a) => experiment(Mode::Adherence, a),
        Command::Preprocess(a) => preprocess(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("some runs failed; see the report");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
