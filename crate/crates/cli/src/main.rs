use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use deblurlab::colorspace::{oracle_bounds, YcbcrRange};
use deblurlab::config::{FlowSource, RunConfig};
use deblurlab::datapipe::synth::{generate, SynthConfig, TrajectoryScript};
use deblurlab::datapipe::{scan_dataset, ClipSource};
use deblurlab::evaluator::{ablation_report, evaluate, gradient_statistics, MetricReport};
use deblurlab::flowwarp::AssemblyMode;
use deblurlab::trainer::{self, Checkpoint, DataSplit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DATA_ENV: &str = "DEBLURLAB_DATA";

#[derive(Parser)]
#[command(name = "deblurlab", version, about = "Train, evaluate and analyze video deblurring ablations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML run config.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Input PSNR and the ground-truth-luma oracle bound of a dataset split.
    Oracle(OracleArgs),
    /// Gradient histograms of sharp and blurry crops.
    Analyze(AnalyzeArgs),
    /// Generate a synthetic dataset with ground-truth flow.
    Synth(SynthArgs),
    /// Collect evaluation reports into an ablation table.
    Report(ReportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run config (TOML).
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset root; defaults to data.root, then $DEBLURLAB_DATA.
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Override output.dir.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Assembly {
    None,
    Rep,
    Cat,
}

impl From<Assembly> for AssemblyMode {
    fn from(a: Assembly) -> Self {
        match a {
            Assembly::None => AssemblyMode::None,
            Assembly::Rep => AssemblyMode::Rep,
            Assembly::Cat => AssemblyMode::Cat,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Format {
    Csv,
    Text,
    Both,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    checkpoint: PathBuf,
    /// Dataset root holding the split; defaults to $DEBLURLAB_DATA, then
    /// the data the checkpoint was trained on.
    dataset_root: Option<PathBuf>,
    /// Split to score; defaults to the config's test split.
    #[arg(long)]
    split: Option<String>,
    /// Input assembly; must match the checkpoint's channel count.
    #[arg(long, value_enum)]
    assembly: Option<Assembly>,
    /// Report files to write: report.csv, report.json, or both.
    #[arg(long, value_enum, default_value = "both")]
    format: Format,
    /// Report directory; defaults to `eval/` next to the checkpoint.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Range {
    Full,
    Studio,
    Both,
}

#[derive(Args)]
struct OracleArgs {
    /// Dataset root, or a split directory.
    dataset_root: PathBuf,
    /// Split below the root; ignored when the root is a split directory.
    #[arg(long, default_value = "test")]
    split: String,
    /// YCbCr variant.
    #[arg(long, value_enum, default_value = "full")]
    range: Range,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Dataset root, or a split directory.
    dataset_root: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    /// Area-downscaling factor in (0, 1].
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long, default_value_t = 101)]
    bins: usize,
    /// Number of random crops per population.
    #[arg(long, default_value_t = 300)]
    crops: usize,
    /// Crop edge in pixels; clipped to the frame size.
    #[arg(long, default_value_t = 128)]
    crop_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for gradients.csv and gradients.png.
    #[arg(long, default_value = ".")]
    output: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Dataset root to create.
    output_root: PathBuf,
    /// Split directory below the root.
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long, default_value_t = 4)]
    sequences: usize,
    #[arg(long, default_value_t = 20)]
    frames: usize,
    /// `static`, `linear:DX,DY` or `random:MAX_SPEED`.
    #[arg(long, default_value = "random:3")]
    trajectory: TrajectoryScript,
    #[arg(long, default_value_t = 192)]
    height: usize,
    #[arg(long, default_value_t = 192)]
    width: usize,
    /// Largest neighbor offset with a flow file.
    #[arg(long, default_value_t = 3)]
    flow_radius: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum TableFormat {
    Markdown,
    Csv,
}

#[derive(Args)]
struct ReportArgs {
    /// report.json files, one per run, in row order.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "markdown")]
    format: TableFormat,
    /// Write the table here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Missing input files or directories; exits with status 2.
#[derive(Debug)]
struct MissingInput(String);

impl std::fmt::Display for MissingInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for MissingInput {}

fn require(path: &Path, what: &str) -> anyhow::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(MissingInput(format!("{what} {} does not exist", path.display())).into())
    }
}

fn env_root() -> Option<PathBuf> {
    std::env::var_os(DATA_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

/// `root/split` when it exists, otherwise `root` itself.
fn split_dir(root: &Path, split: &str) -> PathBuf {
    let dir = root.join(split);
    if dir.is_dir() {
        dir
    } else {
        root.to_path_buf()
    }
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    require(&args.config, "config")?;
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(dir) = args.output {
        config.output.dir = dir;
    }
    // A manifest fed back as a config describes a finished run; start over.
    config.run = None;
    let root = args.data_root.or_else(env_root);
    if let Some(r) = config.data_root(root.as_deref()) {
        if config.data.synthetic.is_none() {
            require(&r, "dataset root")?;
        }
    }
    let summary = match args.resume {
        Some(path) => {
            require(&path, "checkpoint")?;
            let ckpt = Checkpoint::load(&path)?;
            let train = DataSplit::from_config(&config, &config.data.train_split, root.as_deref())?;
            let val = match &config.data.val_split {
                Some(split) if config.eval.every_epochs > 0 => {
                    Some(DataSplit::from_config(&config, split, root.as_deref())?)
                }
                _ => None,
            };
            let mut t = trainer::Trainer::resume(ckpt, Some(config.clone()), train, val)?;
            t.set_output(&config.output.dir);
            t.run()?
        }
        None => trainer::train(&config, root.as_deref())?,
    };
    println!(
        "{}: {} epochs, {} iterations, final loss {}{}",
        summary.run_id,
        summary.epochs_completed,
        summary.iterations,
        summary.final_loss.map_or("n/a".into(), |l| format!("{l:.5}")),
        summary
            .best_val_psnr
            .map(|p| format!(", best val {p:.2} dB"))
            .unwrap_or_default()
    );
    println!("outputs in {}", config.output.dir.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    require(&args.checkpoint, "checkpoint")?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut config = ckpt.config.clone();
    if let Some(a) = args.assembly {
        config.flow.assembly = a.into();
    }
    match args.dataset_root.or_else(env_root) {
        Some(root) => {
            require(&root, "dataset root")?;
            config.data.synthetic = None;
            config.data.root = Some(root);
            config.flow.source = FlowSource::Files;
        }
        None if config.data.synthetic.is_some() => {}
        None => match &config.data.root {
            Some(root) => require(root, "dataset root")?,
            None => {
                return Err(MissingInput(format!(
                    "no dataset root given (argument, ${DATA_ENV}, or data.root in the checkpoint config)"
                ))
                .into())
            }
        },
    }
    let split = args.split.unwrap_or_else(|| config.data.test_split.clone());
    if let (None, Some(root)) = (&config.data.synthetic, &config.data.root) {
        require(&root.join(&split), "split directory")?;
    }
    let data = DataSplit::from_config(&config, &split, None)?;
    let report = evaluate(&ckpt.state.model, &config.input_spec(), data.source.as_ref(), data.provider.as_ref())?
        .labelled(config.run_id(), config.fingerprint(), config.axes());

    let out = args.output.unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("eval")
    });
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    if args.format != Format::Text {
        let path = out.join("report.csv");
        fs::write(&path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    if args.format != Format::Csv {
        let path = out.join("report.json");
        fs::write(&path, report.to_json()?).with_context(|| format!("writing {}", path.display()))?;
    }
    if report.skipped_frames > 0 {
        println!("skipped {} boundary frames", report.skipped_frames);
    }
    println!("{} [{}] {}", report.run_id, split, report.summary_line());
    Ok(())
}

fn cmd_oracle(args: OracleArgs) -> anyhow::Result<()> {
    require(&args.dataset_root, "dataset root")?;
    let index = scan_dataset(&split_dir(&args.dataset_root, &args.split))?;
    let ranges: &[YcbcrRange] = match args.range {
        Range::Full => &[YcbcrRange::Full],
        Range::Studio => &[YcbcrRange::Studio],
        Range::Both => &[YcbcrRange::Full, YcbcrRange::Studio],
    };
    for &range in ranges {
        let pairs = index.sequences().into_iter().enumerate().flat_map(|(s, (_, n))| {
            let index = &index;
            (0..n).map(move |f| Ok((index.blurry_frame(s, f)?, index.sharp_frame(s, f)?)))
        });
        let b = oracle_bounds(pairs, range)?;
        println!(
            "{range:?} range over {} frames: input_psnr {:.2} dB, y_oracle_psnr {:.2} dB",
            b.pairs, b.input_psnr, b.y_oracle_psnr
        );
    }
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> anyhow::Result<()> {
    require(&args.dataset_root, "dataset root")?;
    if args.crops == 0 || args.crop_size == 0 {
        bail!("--crops and --crop-size must be positive");
    }
    let index = scan_dataset(&split_dir(&args.dataset_root, &args.split))?;
    let seqs = index.sequences();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let (mut sharp, mut blurry) = (Vec::new(), Vec::new());
    for _ in 0..args.crops {
        let s = rng.gen_range(0..seqs.len());
        let f = rng.gen_range(0..seqs[s].1);
        let (b, sh) = (index.blurry_frame(s, f)?, index.sharp_frame(s, f)?);
        let (h, w) = (sh.height(), sh.width());
        let (ch, cw) = (args.crop_size.min(h), args.crop_size.min(w));
        let (y0, x0) = (rng.gen_range(0..=h - ch), rng.gen_range(0..=w - cw));
        sharp.push(sh.crop(y0, x0, ch, cw)?);
        blurry.push(b.crop(y0, x0, ch, cw)?);
    }
    let hist = gradient_statistics(&sharp, &blurry, args.scale, args.bins)?;
    fs::create_dir_all(&args.output).with_context(|| format!("creating {}", args.output.display()))?;
    let (csv, png) = (args.output.join("gradients.csv"), args.output.join("gradients.png"));
    hist.write(&csv, &png)?;
    println!(
        "scale {}: tail mass (|g| > {}) sharp {:.5}, blurry {:.5}, ratio {:.3}",
        args.scale,
        hist.tail_threshold,
        hist.sharp_tail_fraction(),
        hist.blurry_tail_fraction(),
        hist.tail_ratio()
    );
    println!("wrote {} and {}", csv.display(), png.display());
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    let config = SynthConfig {
        sequences: args.sequences,
        frames: args.frames,
        height: args.height,
        width: args.width,
        trajectory: args.trajectory,
        flow_radius: args.flow_radius,
        seed: args.seed,
        ..SynthConfig::default()
    };
    let data = generate(&config)?;
    let dir = args.output_root.join(&args.split);
    data.write(&dir)?;
    println!(
        "wrote {} sequences of {} frames ({}x{}) to {}",
        args.sequences,
        args.frames,
        args.height,
        args.width,
        dir.display()
    );
    Ok(())
}

fn cmd_report(args: ReportArgs) -> anyhow::Result<()> {
    let mut reports = Vec::new();
    for path in &args.reports {
        require(path, "report")?;
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        reports.push(MetricReport::from_json(&text).with_context(|| format!("parsing {}", path.display()))?);
    }
    let table = ablation_report(&reports)?;
    let text = match args.format {
        TableFormat::Markdown => table.to_markdown(),
        TableFormat::Csv => table.to_csv(),
    };
    match args.output {
        Some(path) => fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<MissingInput>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
