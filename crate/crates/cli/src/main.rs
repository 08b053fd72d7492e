use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use dae_progression::cohort::{
    generate_cohort, read_cohort, read_volume, write_cohort, write_volume, Cohort, CohortConfig, CohortSubject, Split, Volume,
};
use dae_progression::eval::{
    augmentation_study, evaluate_split, item_seed, ClassifierConfig, EvalOptions, LabeledImage, StudyRow, STUDY_RATIOS,
};
use dae_progression::imaging::{save_png, Image};
use dae_progression::latent::{age_band, cohort_latents, project_latents, run_swap_experiment, save_scatter, silhouette, write_projection_csv, ProjectedPoint, Subspace};
use dae_progression::progression::{encode_attributes, AttributeVector, Diagnosis, AGE_BINS, MAX_AGE_GAP};
use dae_progression::rng::SeededRng;
use dae_progression::train::{generate_followups, infer_followup, load_trained, run_training, RunOptions, TrainConfig, TrainState, TrainingExample};
use dae_progression::Error;

const RUN_FILE: &str = "run.toml";
/// Version requirement of the torch bindings this binary is built against.
const TCH_REQUIREMENT: &str = "0.26";

#[derive(Parser)]
#[command(name = "daeprog", version, about = "Diffusion auto-encoder disease progression toolkit")]
struct Cli {
    /// Seed for every random choice made by the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic longitudinal phantom cohort.
    GenData {
        /// Cohort config (TOML); defaults to the full-size split.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use the small CPU-scale cohort instead of the full-size split.
        #[arg(long, conflicts_with = "config")]
        toy: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the model on the training split of a dataset.
    Train {
        /// Training config (TOML); defaults to the full-size model.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use the narrow CPU-scale model instead of the full-size one.
        #[arg(long, conflicts_with = "config")]
        toy: bool,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = PhaseArg::Both)]
        phase: PhaseArg,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict a follow-up image from a baseline volume, slice by slice.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Baseline volume in the flat `.f32` format.
        #[arg(long)]
        image: PathBuf,
        /// Cognitive status: CN, MCI or AD.
        #[arg(long)]
        status: String,
        /// Years between baseline and the predicted follow-up, in (0, 5].
        #[arg(long)]
        gap: f64,
        /// Output volume (`.f32`).
        #[arg(long)]
        out: PathBuf,
        /// Also write the first output slice as PNG.
        #[arg(long)]
        png: Option<PathBuf>,
    },
    /// Score generated follow-ups of the test split.
    Eval {
        #[command(flatten)]
        common: ReportArgs,
        #[arg(long)]
        max_subjects: Option<usize>,
        /// Write per-subject error panels under OUT/error_maps.
        #[arg(long)]
        error_maps: bool,
    },
    /// Exchange progression codes between paired CN and AD subjects.
    Swap {
        #[command(flatten)]
        common: ReportArgs,
    },
    /// Project latent codes to 2-D and summarise per-class clusters.
    Project {
        #[command(flatten)]
        common: ReportArgs,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Classifier accuracy for mixtures of real and generated images.
    AugmentStudy {
        #[command(flatten)]
        common: ReportArgs,
        /// Number of repeated runs per ratio.
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        epochs: Option<usize>,
        /// Training images per run; defaults to the real pool size.
        #[arg(long)]
        budget: Option<usize>,
    },
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Both,
    AutoencodeOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Failure kinds mapped onto exit codes.
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CmdResult = std::result::Result<(), Failure>;

#[derive(Serialize)]
struct RunMetadata<'a> {
    command: &'a str,
    seed: u64,
    config_hash: Option<String>,
    package_version: &'a str,
    libtorch: String,
    arguments: Vec<String>,
}

fn write_run_metadata(path: &Path, command: &str, seed: u64, config_hash: Option<String>) -> anyhow::Result<()> {
    let meta = RunMetadata {
        command,
        seed,
        config_hash,
        package_version: env!("CARGO_PKG_VERSION"),
        libtorch: format!("tch {TCH_REQUIREMENT}"),
        arguments: std::env::args().collect(),
    };
    fs::write(path, toml::to_string(&meta)?).with_context(|| format!("writing {}", path.display()))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn parse_status(s: &str) -> std::result::Result<Diagnosis, Failure> {
    s.parse::<Diagnosis>()
        .map_err(|_| Failure::Usage(format!("unknown status '{s}'; expected CN, MCI or AD")))
}

fn gen_data(config: Option<PathBuf>, toy: bool, out: &Path, seed: u64) -> CmdResult {
    let cfg = match config {
        Some(path) => {
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str::<CohortConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None if toy => CohortConfig::toy(),
        None => CohortConfig::default(),
    };
    cfg.validate()?;
    let cohort = generate_cohort(&cfg, seed)?;
    write_cohort(&cohort, out)?;
    let manifest = fs::read(out.join(dae_progression::cohort::MANIFEST_FILE)).context("reading manifest back")?;
    let hash = sha256_hex(toml::to_string(&cfg).context("serialising config")?.as_bytes());
    write_run_metadata(&out.join(RUN_FILE), "gen-data", seed, Some(hash))?;
    let count = |split| cohort.split(split).count();
    println!(
        "wrote {} train and {} test subjects, {} swap pairs to {}",
        count(Split::Train),
        count(Split::Test),
        cohort.swap_pairs.len(),
        out.display()
    );
    println!("manifest sha256 {}", sha256_hex(&manifest));
    Ok(())
}

fn train(config: Option<PathBuf>, toy: bool, data: &Path, out: &Path, phase: PhaseArg, resume: Option<PathBuf>, seed: u64) -> CmdResult {
    let mut cfg = match config {
        Some(path) => TrainConfig::load(&path)?,
        None if toy => TrainConfig::toy(),
        None => TrainConfig::default(),
    };
    cfg.seed = seed;
    cfg.validate()?;
    let cohort = read_cohort(data)?;
    let examples = TrainingExample::from_cohort(&cohort, Split::Train)?;
    create_dir(out)?;
    fs::write(out.join("train_config.toml"), cfg.to_toml()).context("writing config copy")?;
    write_run_metadata(&out.join(RUN_FILE), "train", seed, Some(cfg.hash()))?;
    let options = RunOptions {
        autoencode_only: matches!(phase, PhaseArg::AutoencodeOnly),
        resume,
        stop_after_epoch: None,
    };
    let summary = run_training(&cfg, &examples, out, &options)?;
    println!(
        "{} epochs, {} steps; checkpoint {}; metrics {}",
        summary.epochs_completed,
        summary.steps,
        summary.final_checkpoint.display(),
        summary.metrics_path.display()
    );
    Ok(())
}

fn infer(checkpoint: &Path, image: &Path, status: &str, gap: f64, out: &Path, png: Option<PathBuf>, seed: u64) -> CmdResult {
    let status = parse_status(status)?;
    if let Err(e) = encode_attributes(status, gap) {
        return Err(Failure::Usage(format!("--gap: {e}; valid range is (0, {MAX_AGE_GAP}] years")));
    }
    let state = load_trained(checkpoint)?;
    let input = read_volume(image)?;
    let expected = state.config.model.image_shape();
    if (input.height, input.width) != expected {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "image is {}x{}, model expects {}x{}",
            input.height,
            input.width,
            expected.0,
            expected.1
        )));
    }
    // Slices are predicted independently and stacked.
    let slices = (0..input.depth)
        .map(|d| infer_followup(&state, &input.slice(d)?, status, gap, item_seed(seed, d)))
        .collect::<dae_progression::Result<Vec<Image>>>()?;
    let refs: Vec<&Image> = slices.iter().collect();
    write_volume(out, &Volume::from_slices(&refs)?)?;
    if let Some(png) = png {
        save_png(&slices[0], &png, 0.0, 1.0)?;
    }
    let mut meta = out.as_os_str().to_owned();
    meta.push(".run.toml");
    write_run_metadata(Path::new(&meta), "infer", seed, Some(state.config.hash()))?;
    println!("wrote {} ({} slice(s), {status}, gap {gap} y)", out.display(), input.depth);
    Ok(())
}

fn load_report_inputs(common: &ReportArgs) -> anyhow::Result<(TrainState, Cohort)> {
    let state = load_trained(&common.checkpoint)?;
    let cohort = read_cohort(&common.data)?;
    create_dir(&common.out)?;
    Ok((state, cohort))
}

fn eval(common: &ReportArgs, max_subjects: Option<usize>, error_maps: bool, seed: u64) -> CmdResult {
    let (state, cohort) = load_report_inputs(common)?;
    let options = EvalOptions {
        seed,
        max_subjects,
        error_maps: error_maps.then(|| common.out.join("error_maps")),
        ..EvalOptions::default()
    };
    let report = evaluate_split(&state, &cohort, Split::Test, &options)?;
    report.write_csv(&common.out.join("metrics.csv"))?;
    let table = report.summary_table();
    fs::write(common.out.join("summary.txt"), &table).context("writing summary")?;
    write_run_metadata(&common.out.join(RUN_FILE), "eval", seed, Some(state.config.hash()))?;
    print!("{table}");
    Ok(())
}

fn swap(common: &ReportArgs, seed: u64) -> CmdResult {
    let (state, cohort) = load_report_inputs(common)?;
    let report = run_swap_experiment(&state, &cohort, seed)?;
    report.write_csv(&common.out.join("swap.csv"))?;
    let summary = report.summary();
    fs::write(common.out.join("swap_summary.txt"), &summary).context("writing summary")?;
    write_run_metadata(&common.out.join(RUN_FILE), "swap", seed, Some(state.config.hash()))?;
    print!("{summary}");
    Ok(())
}

fn class_label(s: &CohortSubject) -> String {
    format!("{} {}", s.subject.diagnosis, age_band(s.baseline.age))
}

fn project(common: &ReportArgs, split: SplitArg, seed: u64) -> CmdResult {
    let (state, cohort) = load_report_inputs(common)?;
    let latents = cohort_latents(&state, &cohort, split.into())?;
    let labels: Vec<String> = latents.iter().map(|(s, _)| class_label(s)).collect();
    let diagnosis_labels: Vec<String> = latents.iter().map(|(s, _)| s.subject.diagnosis.to_string()).collect();
    let z: Vec<_> = latents.iter().map(|(_, z)| z.clone()).collect();
    let m = state.config.model.progression_dim;
    let mut summary = String::from("axes are the top two principal components of the centred codes\n");
    for (name, subspace) in [("full", Subspace::Full), ("first_m", Subspace::FirstM(m))] {
        let projection = project_latents(&z, &labels, subspace)?;
        let points: Vec<ProjectedPoint> = latents
            .iter()
            .zip(&projection.coords)
            .map(|((s, _), c)| ProjectedPoint {
                subject_id: s.subject.subject_id.clone(),
                diagnosis: s.subject.diagnosis,
                age: s.baseline.age,
                x: c[0],
                y: c[1],
            })
            .collect();
        write_projection_csv(&points, &common.out.join(format!("projection_{name}.csv")))?;
        save_scatter(&points, &common.out.join(format!("projection_{name}.png")), 320)?;
        let mut w = csv::Writer::from_path(common.out.join(format!("ellipses_{name}.csv"))).context("opening ellipse table")?;
        w.write_record(["label", "count", "mean_x", "mean_y", "cov_xx", "cov_xy", "cov_yy"])
            .context("writing ellipse")?;
        for e in &projection.ellipses {
            let c = e.covariance;
            let row = [e.mean[0], e.mean[1], c[0], c[1], c[3]].map(|v| v.to_string());
            w.write_record([e.label.clone(), e.count.to_string()].into_iter().chain(row))
                .context("writing ellipse")?;
        }
        w.flush().context("writing ellipse table")?;
        let score = silhouette(&projection.coords, &diagnosis_labels)?;
        summary.push_str(&format!(
            "{name}: PC variances {:.4} / {:.4}, diagnosis silhouette {score:.4}\n",
            projection.variances[0], projection.variances[1]
        ));
    }
    fs::write(common.out.join("projection_summary.txt"), &summary).context("writing summary")?;
    write_run_metadata(&common.out.join(RUN_FILE), "project", seed, Some(state.config.hash()))?;
    print!("{summary}");
    Ok(())
}

fn augment_study(common: &ReportArgs, repeats: usize, epochs: Option<usize>, budget: Option<usize>, seed: u64) -> CmdResult {
    if repeats == 0 {
        return Err(Failure::Usage("--repeats must be at least 1".into()));
    }
    let (state, cohort) = load_report_inputs(common)?;
    let labeled = |split: Split| -> Vec<LabeledImage> {
        cohort
            .split(split)
            .map(|s| LabeledImage {
                image: s.baseline.image.clone(),
                label: s.subject.diagnosis,
            })
            .collect()
    };
    let real = labeled(Split::Train);
    let held_out = labeled(Split::Test);
    // One generated follow-up per training baseline, own diagnosis, random gap bin.
    let train_subjects: Vec<&CohortSubject> = cohort.split(Split::Train).collect();
    let mut rng = SeededRng::substream(seed, 0xa0);
    let attrs = train_subjects
        .iter()
        .map(|s| AttributeVector::from_bin(s.subject.diagnosis, rng.int_inclusive(1, AGE_BINS)))
        .collect::<dae_progression::Result<Vec<_>>>()?;
    let subseq = state.config.subsequence()?;
    let mut generated = Vec::with_capacity(train_subjects.len());
    for (k, chunk) in train_subjects.chunks(16).enumerate() {
        let images: Vec<&Image> = chunk.iter().map(|s| &s.baseline.image).collect();
        let seeds: Vec<u64> = (0..chunk.len()).map(|i| item_seed(seed, k * 16 + i)).collect();
        let out = generate_followups(&state.nets, state.schedule(), &subseq, &images, &attrs[k * 16..k * 16 + chunk.len()], &seeds)?;
        generated.extend(out.into_iter().zip(chunk).map(|(image, s)| LabeledImage {
            image,
            label: s.subject.diagnosis,
        }));
    }
    let mut config = ClassifierConfig {
        budget,
        ..ClassifierConfig::default()
    };
    if let Some(e) = epochs {
        config.epochs = e;
    }
    let seeds: Vec<u64> = (0..repeats).map(|i| item_seed(seed, 1000 + i)).collect();
    let rows = augmentation_study(&real, &generated, &held_out, &STUDY_RATIOS, &config, &seeds)?;
    let mut w = csv::Writer::from_path(common.out.join("augmentation.csv")).context("opening study table")?;
    for row in &rows {
        w.serialize(row).context("writing study row")?;
    }
    w.flush().context("writing study table")?;
    write_run_metadata(&common.out.join(RUN_FILE), "augment-study", seed, Some(state.config.hash()))?;
    print!("{}", study_table(&rows));
    Ok(())
}

fn study_table(rows: &[StudyRow]) -> String {
    let mut out = format!("{:<12} {:>6} {:>6} {:>10} {:>8}\n", "training", "real", "gen", "accuracy", "std");
    for r in rows {
        out.push_str(&format!(
            "{:<12} {:>6} {:>6} {:>10.4} {:>8.4}\n",
            r.label, r.real_count, r.generated_count, r.accuracy_mean, r.accuracy_std
        ));
    }
    out
}

fn run(cli: Cli) -> CmdResult {
    let seed = cli.seed;
    match cli.command {
        Command::GenData { config, toy, out } => gen_data(config, toy, &out, seed),
        Command::Train {
            config,
            toy,
            data,
            out,
            phase,
            resume,
        } => train(config, toy, &data, &out, phase, resume, seed),
        Command::Infer {
            checkpoint,
            image,
            status,
            gap,
            out,
            png,
        } => infer(&checkpoint, &image, &status, gap, &out, png, seed),
        Command::Eval {
            common,
            max_subjects,
            error_maps,
        } => eval(&common, max_subjects, error_maps, seed),
        Command::Swap { common } => swap(&common, seed),
        Command::Project { common, split } => project(&common, split, seed),
        Command::AugmentStudy {
            common,
            repeats,
            epochs,
            budget,
        } => augment_study(&common, repeats, epochs, budget, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
