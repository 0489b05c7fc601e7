use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ipsinet::data::{
    generate_synthetic, load_manifest, write_dataset, LoadOptions, Split, SynthSpec, ViewRoles,
};
use ipsinet::experiment::{
    self, evaluate_checkpoint, prepare_output_dir, prepare_splits, run_matrix, run_single,
    DataSource, ExperimentConfig, MatrixAxes, ResultsTable, CONFIG_LOCK, RESULTS_CSV,
};
use ipsinet::gradcheck::{self, Scope};
use ipsinet::{AggregationKind, Depth, Error, FusionType, Result, SkipFlags, TrainConfig};

/// Two-view fusion networks: training, evaluation, experiment matrices,
/// gradient checks and synthetic data.
#[derive(Parser)]
#[command(name = "ipsinet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration (one run per replicate seed).
    Train(TrainArgs),
    /// Evaluate a saved checkpoint.
    Eval(EvalArgs),
    /// Run a configuration matrix and write a results table.
    Matrix(MatrixArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Write the synthetic two-view dataset as a manifest and PNG images.
    Synth(SynthArgs),
    /// Print the default experiment configuration as JSON.
    Defaults {
        #[arg(long, default_value = "desk")]
        preset: String,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON experiment configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training preset used when no configuration file is given.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    fusion_type: Option<FusionType>,
    #[arg(long)]
    aggregation: Option<AggregationKind>,
    /// none, examined, auxiliary or both.
    #[arg(long)]
    skip: Option<SkipFlags>,
    #[arg(long)]
    depth: Option<Depth>,
    /// Divide every backbone width by this factor.
    #[arg(long)]
    width_divisor: Option<usize>,
    /// Replace the auxiliary view by zeros (single-view ablation).
    #[arg(long)]
    zero_auxiliary: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    batch_cases: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Replicate seeds, comma separated.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Train on a CSV manifest instead of synthetic data.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Number of synthetic cases.
    #[arg(long)]
    synth_cases: Option<usize>,
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Use the MLO view as the examined view.
    #[arg(long)]
    mlo_examined: bool,
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Reuse a non-empty output directory.
    #[arg(long)]
    force: bool,
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        let mut resize = false;
        if let Some(p) = &self.preset {
            cfg.train = TrainConfig::preset(p)?;
            resize = true;
        }
        let f = &mut cfg.fusion;
        f.fusion_type = self.fusion_type.unwrap_or(f.fusion_type);
        f.aggregation = self.aggregation.unwrap_or(f.aggregation);
        f.skip = self.skip.unwrap_or(f.skip);
        f.depth = self.depth.unwrap_or(f.depth);
        f.width_divisor = self.width_divisor.unwrap_or(f.width_divisor);
        f.zero_auxiliary |= self.zero_auxiliary;
        let t = &mut cfg.train;
        t.epochs = self.epochs.unwrap_or(t.epochs);
        t.lr0 = self.lr0.unwrap_or(t.lr0);
        t.batch_cases = self.batch_cases.unwrap_or(t.batch_cases);
        t.loss.gamma = self.gamma.unwrap_or(t.loss.gamma);
        if let Some(size) = self.image_size {
            t.image_size = size;
            resize = true;
        }
        if let Some(seeds) = &self.seeds {
            cfg.seeds = seeds.clone();
        }
        if let Some(path) = &self.manifest {
            cfg.data = DataSource::Manifest(path.clone());
        }
        if let DataSource::Synthetic(spec) = &mut cfg.data {
            spec.n_cases = self.synth_cases.unwrap_or(spec.n_cases);
            if resize {
                spec.image_size = cfg.train.image_size;
            }
        }
        cfg.train_fraction = self.train_fraction.unwrap_or(cfg.train_fraction);
        if self.mlo_examined {
            cfg.roles = ViewRoles::MloExamined;
        }
        if let Some(out) = &self.output {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluate on the test split of this experiment configuration.
    #[arg(long, conflicts_with = "manifest")]
    config: Option<PathBuf>,
    /// Evaluate on the cases of this manifest (its test split if it has one).
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    mlo_examined: bool,
    #[arg(long, default_value_t = 16)]
    batch_cases: usize,
}

#[derive(Args)]
struct MatrixArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Axis preset: table1, table2 or none. Explicit axis flags replace
    /// the preset's value for that axis.
    #[arg(long, default_value = "none")]
    axes: String,
    #[arg(long, value_delimiter = ',')]
    fusion_types: Option<Vec<FusionType>>,
    #[arg(long, value_delimiter = ',')]
    aggregations: Option<Vec<AggregationKind>>,
    #[arg(long, value_delimiter = ',')]
    skips: Option<Vec<SkipFlags>>,
    #[arg(long, value_delimiter = ',')]
    depths: Option<Vec<Depth>>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// loss, fusion or end_to_end_toy.
    #[arg(long)]
    scope: Scope,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long)]
    n_cases: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    positive_rate: Option<f64>,
    #[arg(long)]
    noise_level: Option<f64>,
    #[arg(long)]
    view_scramble_seed: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    force: bool,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = args.experiment.resolve()?;
    let out = cfg.output_dir.clone();
    prepare_output_dir(&out, args.experiment.force)?;
    write_text(&out.join(CONFIG_LOCK), &cfg.to_json()?)?;
    let splits = prepare_splits(&cfg)?;
    eprintln!(
        "{} training cases, {} test cases, {} px",
        splits.train.len(),
        splits.test.len(),
        splits.train.image_size
    );
    let mut table = ResultsTable::default();
    for &seed in &cfg.seeds {
        let dir = if cfg.seeds.len() == 1 {
            out.clone()
        } else {
            out.join(format!("seed{seed}"))
        };
        let run = run_single(&cfg.fusion, &cfg.train, seed, &splits, Some(&dir))?;
        eprintln!(
            "seed {seed}: best macro-F1 {:.4} at epoch {}, AUC-ROC {}",
            run.outcome.best_report.macro_f1,
            run.outcome.best_epoch,
            run.outcome
                .best_report
                .auc_roc
                .map_or("-".into(), |a| format!("{a:.4}"))
        );
        table.push(run.row);
    }
    table.write(&out.join(RESULTS_CSV))?;
    print!("{}", table.render());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (_, meta) = experiment::load_model(&args.checkpoint)?;
    let cases = match (&args.config, &args.manifest) {
        (Some(path), _) => {
            let mut cfg = ExperimentConfig::load(path)?;
            cfg.train.image_size = meta.image_size;
            prepare_splits(&cfg)?.test.cases
        }
        (None, Some(path)) => {
            let roles = if args.mlo_examined {
                ViewRoles::MloExamined
            } else {
                ViewRoles::CcExamined
            };
            let cases = load_manifest(
                path,
                &LoadOptions {
                    image_size: meta.image_size,
                    roles,
                },
            )?;
            if cases.iter().any(|c| c.split.is_some()) {
                cases
                    .into_iter()
                    .filter(|c| c.split == Some(Split::Test))
                    .collect()
            } else {
                cases
            }
        }
        (None, None) => return Err(Error::Usage("eval needs --config or --manifest".into())),
    };
    let report = evaluate_checkpoint(&args.checkpoint, cases, args.batch_cases)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

/// Returns whether every run succeeded.
fn cmd_matrix(args: MatrixArgs) -> Result<bool> {
    let cfg = args.experiment.resolve()?;
    let mut axes = MatrixAxes::preset(&args.axes)?;
    if let Some(v) = args.fusion_types {
        axes.fusion_types = v;
    }
    if let Some(v) = args.aggregations {
        axes.aggregations = v;
    }
    if let Some(v) = args.skips {
        axes.skips = v;
    }
    if let Some(v) = args.depths {
        axes.depths = v;
    }
    axes.validate()?;
    let out = cfg.output_dir.clone();
    prepare_output_dir(&out, args.experiment.force)?;
    write_text(&out.join(CONFIG_LOCK), &cfg.to_json()?)?;
    write_text(
        &out.join("axes.json"),
        &serde_json::to_string_pretty(&axes)?,
    )?;
    let table = run_matrix(&cfg, &axes, args.workers, Some(&out), |row| {
        eprintln!(
            "{} {} skip={} r{} seed {}: {}",
            row.fusion_type.code(),
            row.aggregation,
            row.skip().label(),
            row.depth,
            row.seed,
            match row.macro_f1 {
                Some(f1) if row.is_ok() => format!("macro-F1 {f1:.4}"),
                _ => row.status.clone(),
            }
        )
    })?;
    table.write(&out.join(RESULTS_CSV))?;
    let rendered = table.render();
    write_text(&out.join("summary.txt"), &rendered)?;
    print!("{rendered}");
    let failed = table.rows().iter().filter(|r| !r.is_ok()).count();
    if failed > 0 {
        eprintln!(
            "{failed} run(s) failed; see {}",
            out.join(RESULTS_CSV).display()
        );
    }
    Ok(failed == 0)
}

/// Returns whether the check passed.
fn cmd_gradcheck(args: GradcheckArgs) -> Result<bool> {
    let start = std::time::Instant::now();
    let report = gradcheck::run(args.scope, args.seed)?;
    println!("{report}");
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(report.passed())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let d = SynthSpec::default();
    let spec = SynthSpec {
        n_cases: args.n_cases.unwrap_or(d.n_cases),
        image_size: args.image_size.unwrap_or(d.image_size),
        positive_rate: args.positive_rate.unwrap_or(d.positive_rate),
        noise_level: args.noise_level.unwrap_or(d.noise_level),
        view_scramble_seed: args.view_scramble_seed.unwrap_or(d.view_scramble_seed),
        seed: args.seed.unwrap_or(d.seed),
    };
    spec.validate()?;
    prepare_output_dir(&args.output, args.force)?;
    let cases = generate_synthetic(&spec)?;
    let manifest = write_dataset(&cases, &args.output)?;
    write_text(
        &args.output.join("synth.json"),
        &serde_json::to_string_pretty(&spec)?,
    )?;
    println!("{}", manifest.display());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Usage(_) | Error::Json(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a).map(|()| true),
        Command::Eval(a) => cmd_eval(a).map(|()| true),
        Command::Matrix(a) => cmd_matrix(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a).map(|()| true),
        Command::Defaults { preset } => TrainConfig::preset(&preset).and_then(|train| {
            let mut cfg = ExperimentConfig {
                train,
                ..ExperimentConfig::default()
            };
            if let DataSource::Synthetic(spec) = &mut cfg.data {
                spec.image_size = cfg.train.image_size;
            }
            println!("{}", cfg.to_json()?);
            Ok(true)
        }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
