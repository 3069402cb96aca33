use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use inputguard::harness::config::DataPaths;
use inputguard::harness::idx::load_idx_images;
use inputguard::harness::{load_idx, run_pipeline, run_single_stage, Guard, RunConfig, Split, Stage};
use inputguard::transforms::TransformKind;
use inputguard::Error;

#[derive(Parser)]
#[command(name = "inputguard", version, about = "Runtime input guard for image classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the subject classifier.
    TrainSubject(RunArgs),
    /// Generate deviated and extreme corpora with the subject classifier.
    GenCorpora(RunArgs),
    /// Train the distribution embedding and build its reference set.
    TrainSiamese(RunArgs),
    /// Train the reflection embedding and build its index.
    TrainQuadruplet(RunArgs),
    /// Choose the verdict thresholds on validation data.
    Calibrate(RunArgs),
    /// Evaluate the guard on the test corpora and write the report.
    Evaluate(RunArgs),
    /// Run every stage in order.
    Run(RunArgs),
    /// Check images from an IDX file against a trained artifacts directory.
    Guard(GuardArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Directory holding the in-distribution IDX files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Directory holding the out-of-distribution IDX files.
    #[arg(long)]
    ood_dir: Option<PathBuf>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    validation_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    #[arg(long)]
    ood_size: Option<usize>,
    #[arg(long)]
    subject_epochs: Option<usize>,
    #[arg(long)]
    siamese_epochs: Option<usize>,
    #[arg(long)]
    quadruplet_epochs: Option<usize>,
    /// Train the whole embedding network instead of only its head.
    #[arg(long)]
    unfreeze_trunk: bool,
    #[arg(long)]
    classes_per_batch: Option<usize>,
    #[arg(long)]
    samples_per_class: Option<usize>,
    #[arg(long)]
    calibration_kind: Option<TransformKind>,
    #[arg(long)]
    target_tpr: Option<f64>,
}

impl RunArgs {
    fn resolve(&self) -> inputguard::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if self.data_dir.is_some() || self.ood_dir.is_some() {
            let standard = DataPaths::default();
            let in_dir = self.data_dir.clone().unwrap_or_else(|| parent(&standard.train_images));
            let ood_dir = self.ood_dir.clone().unwrap_or_else(|| parent(&standard.ood_images));
            cfg.data = DataPaths::standard(&in_dir, &ood_dir);
        }
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { cfg.$($field).+ = v; })*
            };
        }
        set!(
            seed => seed,
            output_dir => output_dir,
            train_size => sizes.train,
            validation_size => sizes.validation,
            test_size => sizes.test,
            ood_size => sizes.ood,
            subject_epochs => subject.epochs,
            siamese_epochs => siamese.epochs,
            quadruplet_epochs => quadruplet.epochs,
            classes_per_batch => batch.classes_per_batch,
            samples_per_class => batch.samples_per_class,
            calibration_kind => calibration_kind,
            target_tpr => target_tpr,
        );
        if self.unfreeze_trunk {
            cfg.siamese.freeze_trunk = false;
            cfg.quadruplet.freeze_trunk = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parent(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_default()
}

#[derive(Args)]
struct GuardArgs {
    /// Output directory of a completed run.
    #[arg(long, default_value = "artifacts")]
    artifacts: PathBuf,
    /// IDX image file to check.
    #[arg(long)]
    images: PathBuf,
    /// Matching IDX label file, reported next to each outcome.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Check only this image.
    #[arg(long)]
    index: Option<usize>,
}

fn guard(args: &GuardArgs) -> anyhow::Result<()> {
    let guard = Guard::load(&args.artifacts)?;
    let (images, labels) = match &args.labels {
        Some(l) => {
            let ds = load_idx(&args.images, l, Split::Test)?;
            (ds.images, Some(ds.labels))
        }
        None => (load_idx_images(&args.images)?, None),
    };
    let rows: Vec<usize> = match args.index {
        Some(i) if i < images.len() => vec![i],
        Some(i) => anyhow::bail!(Error::Input(format!("index {i} out of range for {} images", images.len()))),
        None => (0..images.len()).collect(),
    };
    let selected: Vec<_> = rows.iter().map(|&i| images[i].clone()).collect();
    let outcomes = guard.check_batch(&selected)?;
    for (&i, o) in rows.iter().zip(&outcomes) {
        let mut line = serde_json::json!({ "index": i, "outcome": o });
        if let Some(l) = &labels {
            line["true_label"] = l[i].into();
        }
        println!("{line}");
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (args, stage) = match &cli.command {
        Command::Guard(g) => return guard(g),
        Command::Run(a) => {
            let cfg = a.resolve()?;
            let report = run_pipeline(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report.aggregates)?);
            return Ok(());
        }
        Command::TrainSubject(a) => (a, Stage::TrainSubject),
        Command::GenCorpora(a) => (a, Stage::GenCorpora),
        Command::TrainSiamese(a) => (a, Stage::TrainSiamese),
        Command::TrainQuadruplet(a) => (a, Stage::TrainQuadruplet),
        Command::Calibrate(a) => (a, Stage::Calibrate),
        Command::Evaluate(a) => (a, Stage::Evaluate),
    };
    let cfg = args.resolve()?;
    run_single_stage(&cfg, stage).with_context(|| format!("stage {} failed", stage.name()))?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>().map(Error::root) {
        Some(Error::Format { .. }) => 2,
        Some(Error::Calibration { .. }) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
