use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use forgemask::alignment::{
    align_pair, AlignConfig, DetectorConfig, RansacConfig, DEFAULT_RANSAC_ITERATIONS,
    DEFAULT_RATIO, DEFAULT_REPROJ_THRESHOLD, DEFAULT_SEED,
};
use forgemask::evalmetrics::{
    aggregate, default_grid, robustness_sweep, score_at_truth_resolution, write_sweep_csv,
    AggregateMode, CommandPredictor, MaskPredictor, PredictionRequest, SweepItem,
};
use forgemask::imagecore::{crop, read_image, write_png, ImageBuffer};
use forgemask::losses::{
    contrastive_loss, dice_loss, focal_loss, sample_pixels, total_loss, LossWeights, MaskPair,
    DEFAULT_FOCAL_ALPHA, DEFAULT_FOCAL_GAMMA, DEFAULT_SAMPLE_CAP, DEFAULT_TAU,
};
use forgemask::pipeline::{
    build_dataset, profile_run, read_manifest, BuildConfig, FeatureSpec, PipelineConfig,
    QualityGateConfig, Split, Verdict,
};
use forgemask::semanticmask::{
    annotate_masks, load_feature_file, resize_mask, EditMask, FeatureSource, MaskConfig,
    DEFAULT_PATCH_SIZE,
};
use forgemask::synth::{synthetic_edit_pair, EditSpec};
use forgemask::{Error, Result};

#[derive(Parser)]
#[command(
    name = "forgemask",
    version,
    about = "Edited-region mask annotation for image edit pairs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register an original image onto its edited version and crop both.
    Align(AlignArgs),
    /// Derive an edit mask from an already aligned pair.
    Annotate(AnnotateArgs),
    /// Evaluate the training losses on a feature map and mask.
    Loss(LossArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Score a predictor under JPEG and crop perturbations.
    Sweep(SweepArgs),
    /// Annotate a listing of pairs into a dataset.
    Build(BuildArgs),
    /// Per-stage time breakdown of a finished build.
    Profile(ProfileArgs),
    /// Write synthetic edit pairs and a listing for them.
    Synth(SynthArgs),
}

#[derive(Args)]
struct AlignOpts {
    /// Lowe ratio for descriptor matching.
    #[arg(long, default_value_t = DEFAULT_RATIO)]
    ratio: f64,
    #[arg(long, default_value_t = DEFAULT_RANSAC_ITERATIONS)]
    ransac_iters: usize,
    /// RANSAC inlier threshold in pixels.
    #[arg(long, default_value_t = DEFAULT_REPROJ_THRESHOLD)]
    reproj_px: f64,
    /// RANSAC seed.
    #[arg(long = "ransac-seed", default_value_t = DEFAULT_SEED)]
    ransac_seed: u64,
}

impl AlignOpts {
    fn config(&self) -> AlignConfig {
        AlignConfig {
            detector: DetectorConfig::default(),
            ratio: self.ratio,
            ransac: RansacConfig {
                iterations: self.ransac_iters,
                reproj_threshold: self.reproj_px,
                seed: self.ransac_seed,
            },
        }
    }
}

#[derive(Args)]
struct AlignArgs {
    #[arg(long)]
    original: PathBuf,
    #[arg(long)]
    edited: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    opts: AlignOpts,
    /// Alias for --ransac-seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AnnotateArgs {
    #[arg(long)]
    original: PathBuf,
    #[arg(long)]
    edited: PathBuf,
    /// FMAP features of the original image.
    #[arg(long, requires = "features_b", conflicts_with = "builtin_features")]
    features_a: Option<PathBuf>,
    /// FMAP features of the edited image.
    #[arg(long, requires = "features_a")]
    features_b: Option<PathBuf>,
    /// Use the built-in patch descriptors (the default without FMAP files).
    #[arg(long)]
    builtin_features: bool,
    #[arg(long, default_value_t = DEFAULT_PATCH_SIZE)]
    patch: usize,
    #[arg(long)]
    mask_out: PathBuf,
}

#[derive(Args)]
struct LossArgs {
    /// FMAP feature grid of the image.
    #[arg(long)]
    features: PathBuf,
    /// Ground-truth mask PNG; resampled to the feature grid for the
    /// contrastive term.
    #[arg(long)]
    mask: PathBuf,
    /// Predicted probability map as a grayscale PNG (value / 255). Enables
    /// the Dice, Focal and total terms.
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    #[arg(long, default_value_t = DEFAULT_SAMPLE_CAP)]
    cap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_FOCAL_GAMMA)]
    gamma: f64,
    #[arg(long, default_value_t = DEFAULT_FOCAL_ALPHA)]
    alpha: f64,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted mask PNGs, named like the truth masks.
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long)]
    truth_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = AggregateMode::Macro)]
    aggregate: AggregateMode,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitFilter {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum GridName {
    Default,
}

#[derive(Args)]
struct SweepArgs {
    /// manifest.jsonl of a finished build.
    #[arg(long)]
    manifest: PathBuf,
    /// Shell command run per image; `{input}` and `{output}` are replaced by
    /// the image path and the path to write the predicted mask to.
    #[arg(long, required_unless_present = "oracle")]
    pred_cmd: Option<String>,
    /// Predict the ground truth itself, to check the harness.
    #[arg(long, conflicts_with = "pred_cmd")]
    oracle: bool,
    #[arg(long, value_enum, default_value_t = GridName::Default)]
    grid: GridName,
    #[arg(long, value_enum, default_value_t = SplitFilter::Test)]
    split: SplitFilter,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    listing: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fraction of accepted pairs assigned to train.
    #[arg(long, default_value_t = forgemask::pipeline::DEFAULT_SPLIT_RATIO)]
    split: f64,
    /// Split shuffle seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    gate_keypoints: usize,
    #[arg(long, default_value_t = 10)]
    gate_matches: usize,
    #[arg(long, default_value_t = 0.60)]
    gate_inliers: f64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// `builtin`, `builtin:<patch>` or `fmap-dir:PATH`.
    #[arg(long, default_value = "builtin")]
    features: String,
    /// Continue an interrupted run from its partial manifest.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    opts: AlignOpts,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 384)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| Error::Manifest(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn run_align(a: AlignArgs) -> Result<()> {
    let mut cfg = a.opts.config();
    if let Some(seed) = a.seed {
        cfg.ransac.seed = seed;
    }
    let (original, edited) = (read_image(&a.original)?, read_image(&a.edited)?);
    let aligned = align_pair(&original, &edited, &cfg).inspect_err(|f| {
        let _ = print_json(&json!({ "stage": f.stage, "reason": f.reason, "stats": f.stats }));
    })?;
    create_dir(&a.out_dir)?;
    write_png(&aligned.original, &a.out_dir.join("original_aligned.png"))?;
    write_png(&aligned.edited, &a.out_dir.join("edited_aligned.png"))?;
    let stats =
        serde_json::to_string_pretty(&aligned.stats).map_err(|e| Error::Manifest(e.to_string()))?;
    let path = a.out_dir.join("alignment.json");
    std::fs::write(&path, &stats).map_err(|e| Error::Io { path, source: e })?;
    println!("{stats}");
    Ok(())
}

fn run_annotate(a: AnnotateArgs) -> Result<()> {
    let (original, edited) = (read_image(&a.original)?, read_image(&a.edited)?);
    let source = match (&a.features_a, &a.features_b) {
        (Some(fa), Some(fb)) => FeatureSource::Precomputed {
            id: format!("fmap:{}", fa.display()),
            original: load_feature_file(fa)?,
            edited: load_feature_file(fb)?,
        },
        _ => FeatureSource::Builtin {
            patch_size: a.patch,
        },
    };
    let (mask, stats) = annotate_masks(&original, &edited, &source, &MaskConfig::default())?;
    mask.write_png(&a.mask_out)?;
    print_json(&stats)
}

/// Nearest-neighbour resampling of a probability map, using the same
/// sample positions as mask resizing.
fn resample_probs(p: &[f64], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let src = |o: usize, len: usize, out: usize| ((2 * o + 1) * len / (2 * out)).min(len - 1);
    (0..out_h)
        .flat_map(|y| (0..out_w).map(move |x| (x, y)))
        .map(|(x, y)| p[src(y, h, out_h) * w + src(x, w, out_w)])
        .collect()
}

fn run_loss(a: LossArgs) -> Result<()> {
    let features = load_feature_file(&a.features)?;
    let truth = EditMask::from_image(&read_image(&a.mask)?);
    let grid_mask = resize_mask(&truth, features.grid_w(), features.grid_h())?;
    let set = sample_pixels(&features, &grid_mask, a.cap, a.seed, a.tau)?;
    let contrastive = contrastive_loss(&set)?;

    let (mut dice, mut focal, mut total) = (None, None, None);
    if let Some(pred) = &a.pred {
        let img = read_image(pred)?;
        let gray = forgemask::imagecore::to_grayscale(&img);
        let probs: Vec<f64> = gray.data().iter().map(|&v| f64::from(v) / 255.0).collect();
        let probs = resample_probs(
            &probs,
            gray.width(),
            gray.height(),
            truth.width(),
            truth.height(),
        );
        let pair = MaskPair::new(probs, truth.bits().to_vec())?;
        let d = dice_loss(&pair);
        let f = focal_loss(&pair, a.gamma, a.alpha)?;
        dice = Some(d);
        focal = Some(f);
        total = Some(total_loss(contrastive, d, f, &LossWeights::default()));
    }
    print_json(&json!({
        "contrastive": contrastive,
        "dice": dice,
        "focal": focal,
        "total": total,
        "weights": LossWeights::default(),
        "n_forged": set.forged.len(),
        "n_real": set.real.len(),
        "tau": a.tau,
    }))
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let read_dir = |dir: &Path| {
        std::fs::read_dir(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    };
    let mut names: Vec<String> = read_dir(&a.truth_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    let mut reports = Vec::new();
    let mut missing = Vec::new();
    for name in &names {
        let pred_path = a.pred_dir.join(name);
        if !pred_path.exists() {
            missing.push(name.clone());
            continue;
        }
        let truth = EditMask::read_png(&a.truth_dir.join(name))?;
        let pred = EditMask::from_image(&read_image(&pred_path)?);
        reports.push(score_at_truth_resolution(&pred, &truth)?);
    }
    let agg = aggregate(&reports, a.aggregate)?;
    print_json(&json!({ "aggregate": agg, "missing_predictions": missing }))
}

fn sweep_items(manifest: &Path, split: SplitFilter) -> Result<Vec<SweepItem>> {
    let root = manifest.parent().unwrap_or(Path::new(""));
    let mut items = Vec::new();
    for r in read_manifest(manifest)? {
        let wanted = match split {
            SplitFilter::All => r.split != Split::None,
            SplitFilter::Train => r.split == Split::Train,
            SplitFilter::Test => r.split == Split::Test,
        };
        if !wanted || r.verdict != Verdict::Accepted {
            continue;
        }
        let (Some(rect), Some(mask_path)) =
            (r.alignment.as_ref().and_then(|s| s.crop), &r.mask_path)
        else {
            return Err(Error::Manifest(format!(
                "accepted record {} lacks crop or mask",
                r.pair_id
            )));
        };
        let edited: ImageBuffer = crop(&read_image(&r.edited_path)?, rect)?;
        items.push(SweepItem {
            id: r.pair_id.clone(),
            image: edited,
            truth: EditMask::read_png(&root.join(mask_path))?,
        });
    }
    Ok(items)
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    let items = sweep_items(&a.manifest, a.split)?;
    if items.is_empty() {
        return Err(Error::Manifest(
            "no accepted records in the selected split".into(),
        ));
    }
    let grid = match a.grid {
        GridName::Default => default_grid(),
    };
    let scratch = tempfile::tempdir().map_err(|e| Error::Io {
        path: std::env::temp_dir(),
        source: e,
    })?;
    let oracle = |r: &PredictionRequest<'_>| Ok(r.truth.clone());
    let command;
    let predictor: &dyn MaskPredictor = match &a.pred_cmd {
        Some(template) => {
            command = CommandPredictor {
                template: template.clone(),
                scratch_dir: scratch.path().to_path_buf(),
            };
            &command
        }
        None => &oracle,
    };
    let rows = robustness_sweep(&items, predictor, &grid, a.seed);
    for row in rows.iter().filter(|r| !r.complete) {
        eprintln!(
            "setting {} incomplete: {}",
            row.setting,
            row.failures.join("; ")
        );
    }
    match &a.out {
        Some(path) => {
            let f = File::create(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            write_sweep_csv(&rows, BufWriter::new(f))
        }
        None => write_sweep_csv(&rows, std::io::stdout().lock()),
    }
}

fn run_build(a: BuildArgs) -> Result<()> {
    let cfg = BuildConfig {
        pipeline: PipelineConfig {
            align: a.opts.config(),
            gate: QualityGateConfig {
                min_keypoints: a.gate_keypoints,
                min_matches: a.gate_matches,
                min_inlier_ratio: a.gate_inliers,
            },
            mask: MaskConfig::default(),
            features: a.features.parse::<FeatureSpec>()?,
        },
        split_ratio: a.split,
        seed: a.seed,
        workers: a.workers,
        resume: a.resume,
    };
    let manifest = build_dataset(&a.listing, &a.out, &cfg)?;
    let s = &manifest.summary;
    println!(
        "{} pairs: {} accepted ({} train, {} test), {} rejected, {} failed",
        s.total, s.accepted, s.train, s.test, s.rejected, s.failed
    );
    for (key, n) in &s.by_verdict {
        println!("  {key:<28} {n}");
    }
    for (task, c) in &s.by_task {
        println!(
            "  task {task:<23} {} / {} / {}",
            c.accepted, c.rejected, c.failed
        );
    }
    Ok(())
}

fn run_profile(a: ProfileArgs) -> Result<()> {
    let report = profile_run(&read_manifest(&a.manifest)?);
    for s in &report.stages {
        println!("{:<12} {:>10.3}s {:>6.1}%", s.stage, s.seconds, s.percent);
    }
    if report.partial {
        println!(
            "partial report: {} records without timings, {:.3}s timed",
            report.records_without_timing, report.total_seconds
        );
    }
    Ok(())
}

fn run_synth(a: SynthArgs) -> Result<()> {
    create_dir(&a.out)?;
    let mut listing = String::from("pair_id,original_path,edited_path,editing_task\n");
    for i in 0..a.count {
        let seed = a.seed.wrapping_add(i as u64);
        let pair = synthetic_edit_pair(a.size, a.size, seed, &EditSpec::default())?;
        let id = format!("synth{i:05}");
        write_png(&pair.original, &a.out.join(format!("{id}_original.png")))?;
        write_png(&pair.edited, &a.out.join(format!("{id}_edited.png")))?;
        listing.push_str(&format!(
            "{id},{id}_original.png,{id}_edited.png,patch_replace\n"
        ));
    }
    let path = a.out.join("listing.csv");
    std::fs::write(&path, listing).map_err(|e| Error::Io { path, source: e })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Align(a) => run_align(a),
        Command::Annotate(a) => run_annotate(a),
        Command::Loss(a) => run_loss(a),
        Command::Eval(a) => run_eval(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Build(a) => run_build(a),
        Command::Profile(a) => run_profile(a),
        Command::Synth(a) => run_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("forgemask: {e}");
            ExitCode::FAILURE
        }
    }
}
