//! `occnl` — drives the label-noise laboratory from config files: scene
//! generation, noise injection, refinement, training, evaluation, reporting,
//! and ablation sweeps.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use occnl::config::{load_config, ExperimentConfig, NoiseConfig};
use occnl::learner::{history_to_csv, train, write_checkpoint_file};
use occnl::metrics::{
    confusion_counts, emit_report, emit_report_file, iou_scores, parse_report_csv,
    AbsentClassConvention, ReportFormat, ReportRow,
};
use occnl::noise::{inject_asymmetric, refine_ground_truth, AsymNoiseSpec, TrailingLevel};
use occnl::ocv1;
use occnl::pipeline::{build_dataset, run_pipeline, run_sweep};
use occnl::scene::generate_scene;
use occnl::voxel::{ClassId, LabelSpace};

#[derive(Parser)]
#[command(
    name = "occnl",
    version,
    about = "Desk-scale laboratory for 3D semantic-occupancy label noise"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Output root; falls back to the config's out_dir, then $OCCNL_OUT,
    /// then ./runs.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Override the noise block with asymmetric noise at this rate.
    #[arg(long, global = true, value_name = "F")]
    eta: Option<f64>,

    /// Override the noise block with trailing noise at this level.
    #[arg(long, global = true, value_name = "LEVEL")]
    trailing: Option<TrailingLevel>,

    /// Worker threads for per-voxel math. Values above 1 void the
    /// bit-determinism contract.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scene sequences and serialize them as OCV1 frames + masks.
    GenScenes,
    /// Inject occupancy-asymmetric noise into one grid file.
    InjectNoise {
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        #[arg(long, value_name = "PATH")]
        output: PathBuf,
        /// Semantic class count of the grid's label space.
        #[arg(long, default_value_t = 19)]
        classes: ClassId,
    },
    /// Zero out dynamic-class voxels lying outside an instance mask.
    Refine {
        #[arg(long, value_name = "PATH")]
        grid: PathBuf,
        #[arg(long, value_name = "PATH")]
        mask: PathBuf,
        #[arg(long, value_name = "PATH")]
        output: PathBuf,
        #[arg(long, default_value_t = 19)]
        classes: ClassId,
        /// Dynamic class ids, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = [6u16, 7, 8, 9, 10, 14, 15, 16])]
        dynamic: Vec<ClassId>,
    },
    /// Train on the config's synthetic dataset; writes history and a
    /// checkpoint.
    Train,
    /// Score a prediction grid against refined ground truth.
    Evaluate {
        #[arg(long, value_name = "PATH")]
        pred: PathBuf,
        #[arg(long, value_name = "PATH")]
        gt: PathBuf,
        #[arg(long, default_value_t = 19)]
        classes: ClassId,
        #[arg(long, value_enum, default_value_t = ConventionArg::Exclude)]
        convention: ConventionArg,
        /// Write a one-row CSV here instead of printing only.
        #[arg(long, value_name = "PATH")]
        output: Option<PathBuf>,
    },
    /// Merge per-run metrics files into one table.
    Report {
        /// Run directories containing metrics.csv.
        #[arg(long, value_name = "DIR", num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
        format: FormatArg,
        #[arg(long, value_name = "PATH")]
        output: Option<PathBuf>,
    },
    /// Run the full pipeline for one config.
    Run,
    /// Expand the config's sweep axes into independent runs.
    Sweep,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConventionArg {
    Exclude,
    Zero,
}

impl From<ConventionArg> for AbsentClassConvention {
    fn from(c: ConventionArg) -> Self {
        match c {
            ConventionArg::Exclude => AbsentClassConvention::Exclude,
            ConventionArg::Zero => AbsentClassConvention::CountAsZero,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Json => ReportFormat::Json,
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring the thread pool")?;
        if threads > 1 {
            eprintln!(
                "note: --threads {threads} voids the bit-determinism contract; \
                 rerun single-threaded for byte-identical artifacts"
            );
        }
    }

    match &cli.command {
        Command::GenScenes => gen_scenes(&cli),
        Command::InjectNoise { input, output, classes } => {
            inject_noise(&cli, input, output, *classes)
        }
        Command::Refine { grid, mask, output, classes, dynamic } => {
            refine(grid, mask, output, *classes, dynamic)
        }
        Command::Train => train_only(&cli),
        Command::Evaluate { pred, gt, classes, convention, output } => {
            evaluate(pred, gt, *classes, (*convention).into(), output.as_deref())
        }
        Command::Report { runs, format, output } => {
            report(runs, (*format).into(), output.as_deref())
        }
        Command::Run => run(&cli),
        Command::Sweep => sweep(&cli),
    }
}

/// Loads the config and applies the global flag overrides.
fn resolved_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_deref()
        .context("this subcommand needs --config PATH")?;
    let mut cfg = load_config(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match (cli.eta, cli.trailing) {
        (Some(_), Some(_)) => bail!("--eta and --trailing are mutually exclusive"),
        (Some(eta), None) => cfg.noise = NoiseConfig::Asymmetric { eta },
        (None, Some(level)) => {
            let window = cfg.trailing_window();
            cfg.noise = NoiseConfig::Trailing {
                level,
                future: window.future,
                historical: window.historical,
                dilation_iterations: window.dilation_iterations,
            };
        }
        (None, None) => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Output root: --out, then the config, then $OCCNL_OUT, then ./runs.
fn out_root(cli: &Cli, cfg: Option<&ExperimentConfig>) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.and_then(|c| c.out_dir.clone()))
        .or_else(|| std::env::var_os("OCCNL_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn gen_scenes(cli: &Cli) -> Result<()> {
    let cfg = resolved_config(cli)?;
    let root = out_root(cli, Some(&cfg)).join(cfg.resolved_run_id()).join("scenes");
    let spec = cfg.scene_spec()?;
    let write = |name: String, seed: u64| -> Result<()> {
        let seq = generate_scene(&spec, seed)?;
        let dir = root.join(&name);
        std::fs::create_dir_all(&dir)?;
        for (t, frame) in seq.frames.iter().enumerate() {
            ocv1::write_grid_file(frame, dir.join(format!("frame_{t:03}.ocv1")))?;
            ocv1::write_mask_file(&seq.instance_masks[t], dir.join(format!("mask_{t:03}.ocv1")))?;
        }
        ocv1::write_grid_file(&seq.clean_gt, dir.join("clean_gt.ocv1"))?;
        println!(
            "{name}: {} frames, dynamic fraction {:.4}",
            seq.num_frames(),
            seq.dynamic_fraction
        );
        Ok(())
    };
    for i in 0..cfg.dataset.train_scenes {
        write(
            format!("train_{i}"),
            occnl::rng::stage_seed(cfg.seed, &format!("scene.train.{i}")),
        )?;
    }
    for j in 0..cfg.dataset.eval_scenes {
        write(
            format!("eval_{j}"),
            occnl::rng::stage_seed(cfg.seed, &format!("scene.eval.{j}")),
        )?;
    }
    println!("scenes written to {}", root.display());
    Ok(())
}

fn inject_noise(cli: &Cli, input: &Path, output: &Path, classes: ClassId) -> Result<()> {
    let eta = cli.eta.context("inject-noise needs --eta F")?;
    let seed = cli.seed.context("inject-noise needs --seed N")?;
    let space = LabelSpace::new(classes, [])?;
    let grid = ocv1::read_grid_file(input)?;
    let spec = AsymNoiseSpec::new(eta, seed)?;
    let noisy = inject_asymmetric(&grid, &spec, &space)?;
    if let Some(parent) = output.parent() {
        std::fs::create_dir_all(parent)?;
    }
    ocv1::write_grid_file(&noisy, output)?;
    let report = occnl::noise::noise_statistics(&grid, &noisy, &space)?;
    println!(
        "occupied flip {:.4}, empty flip {:.6}, entropy {:.4} -> {}",
        report.realized_occupied_flip,
        report.realized_empty_flip,
        report.normalized_entropy,
        output.display()
    );
    Ok(())
}

fn refine(
    grid: &Path,
    mask: &Path,
    output: &Path,
    classes: ClassId,
    dynamic: &[ClassId],
) -> Result<()> {
    let space = LabelSpace::new(classes, dynamic.iter().copied())?;
    let grid = ocv1::read_grid_file(grid)?;
    let mask = ocv1::read_mask_file(mask)?;
    let refined = refine_ground_truth(&grid, &mask, &space)?;
    if let Some(parent) = output.parent() {
        std::fs::create_dir_all(parent)?;
    }
    ocv1::write_grid_file(&refined, output)?;
    let removed = grid
        .labels()
        .iter()
        .zip(refined.labels())
        .filter(|(a, b)| a != b)
        .count();
    println!("{removed} trailing voxels removed -> {}", output.display());
    Ok(())
}

fn train_only(cli: &Cli) -> Result<()> {
    let cfg = resolved_config(cli)?;
    let dir = out_root(cli, Some(&cfg)).join(cfg.resolved_run_id());
    std::fs::create_dir_all(&dir)?;
    let built = build_dataset(&cfg)?;
    let outcome = train(&built.dataset, &cfg.train_config()?)?;
    std::fs::write(dir.join("history.csv"), history_to_csv(&outcome.history))?;
    write_checkpoint_file(
        &outcome.student,
        &outcome.teacher,
        &outcome.prototypes,
        dir.join("checkpoint.dprc"),
    )?;
    let last = outcome.history.last().expect("at least one epoch");
    println!(
        "trained {} epochs; final IoU {:.2}, mIoU {:.2} -> {}",
        outcome.history.len(),
        last.iou,
        last.miou,
        dir.display()
    );
    Ok(())
}

fn evaluate(
    pred: &Path,
    gt: &Path,
    classes: ClassId,
    convention: AbsentClassConvention,
    output: Option<&Path>,
) -> Result<()> {
    let space = LabelSpace::new(classes, [])?;
    let pred_grid = ocv1::read_grid_file(pred)?;
    let gt_grid = ocv1::read_grid_file(gt)?;
    let counts = confusion_counts(&pred_grid, &gt_grid, &space)?;
    let scores = iou_scores(&counts, convention);
    println!("IoU {:.2}, mIoU {:.2}", scores.geometric_iou, scores.miou);
    for (c, iou) in scores.per_class.iter().enumerate() {
        println!("  {}: {iou:.2}", space.name((c + 1) as ClassId));
    }
    if let Some(path) = output {
        let row = ReportRow::from_scores("evaluate", "none", "none", &scores);
        emit_report_file(&[row], classes as usize, ReportFormat::Csv, path)?;
        println!("written to {}", path.display());
    }
    Ok(())
}

fn report(runs: &[PathBuf], format: ReportFormat, output: Option<&Path>) -> Result<()> {
    if runs.is_empty() {
        bail!("report needs at least one --runs DIR");
    }
    let mut rows = Vec::new();
    let mut num_semantic = 0usize;
    for dir in runs {
        let path = dir.join("metrics.csv");
        let file = std::fs::File::open(&path)
            .with_context(|| format!("opening {}", path.display()))?;
        let parsed = parse_report_csv(file)?;
        for row in parsed {
            num_semantic = num_semantic.max(row.per_class.len());
            rows.push(row);
        }
    }
    match output {
        Some(path) => {
            emit_report_file(&rows, num_semantic, format, path)?;
            println!("{} rows -> {}", rows.len(), path.display());
        }
        None => {
            let stdout = std::io::stdout();
            emit_report(&rows, num_semantic, format, stdout.lock())?;
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolved_config(cli)?;
    let root = out_root(cli, Some(&cfg));
    let artifacts = run_pipeline(&cfg, &root)?;
    println!(
        "run {} complete: IoU {:.2}, mIoU {:.2}",
        artifacts.report_row.run_id, artifacts.final_iou, artifacts.final_miou
    );
    println!("artifacts in {}", artifacts.run_dir.display());
    Ok(())
}

fn sweep(cli: &Cli) -> Result<()> {
    let cfg = resolved_config(cli)?;
    let root = out_root(cli, Some(&cfg));
    let artifacts = run_sweep(&cfg, &root)?;
    for a in &artifacts {
        println!(
            "{}: IoU {:.2}, mIoU {:.2}",
            a.report_row.run_id, a.final_iou, a.final_miou
        );
    }
    println!("{} runs; combined table at {}", artifacts.len(), root.join("metrics.csv").display());
    Ok(())
}
