use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use ndarray::{concatenate, Array2, Axis};
use rayon::prelude::*;

use nbnlkit::data::{fit_standardizer, Dataset, FeatureBag, NormMode, StandardizationStats};
use nbnlkit::eval::{
    da_run, nbnn_from_dataset, preprocess, split_dataset, train_model, Classifier, Hyperparams, Method, TrainedModel,
};
use nbnlkit::io::{self, BagFormat, ModelKind};
use nbnlkit::ml3::SmoothnessQ;
use nbnlkit::patchgrid::{
    extract_raw, finish_bag, DescriptorExtractor, DownsampleExtractor, Image, PatchPlanConfig, PatchSpec,
    RandProjExtractor,
};
use nbnlkit::stoml3::{train, TrainConfig, TrainerState, DEFAULT_INIT_SCALE};
use nbnlkit::synth::{run_xor_benchmark, SyntheticStream, XorBenchmark};

#[derive(Parser)]
#[command(name = "nbnlkit", version, about = "NBNN / NBNL image classification over bags of patch descriptors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn images (or precomputed descriptors) into a bag file.
    Extract(ExtractArgs),
    /// Fit a model on a bag file.
    Train(TrainArgs),
    /// Score a model on a labeled bag file.
    Eval(EvalArgs),
    /// Source-only domain adaptation run.
    Da(DaArgs),
    /// Per-class seeded train/test split of a bag file.
    Split(SplitArgs),
    /// XOR benchmark and trainer throughput on synthetic data.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ExtractorKind {
    Downsample,
    Randproj,
    Precomputed,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Bin,
    Jsonl,
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictorArg {
    Nbnl,
    Nbnn,
}

fn parse_min_patch(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v @ (16 | 32 | 64)) => Ok(v),
        _ => Err(format!("expected 16, 32 or 64, got '{s}'")),
    }
}

fn output_format(flag: Option<FormatArg>, path: &Path) -> BagFormat {
    match flag {
        Some(FormatArg::Bin) => BagFormat::Bin,
        Some(FormatArg::Jsonl) => BagFormat::Jsonl,
        None => BagFormat::from_path(path),
    }
}

#[derive(Args)]
struct ExtractArgs {
    /// Directory with one subdirectory per class, a manifest file
    /// (`<path> <label|->` per line), or a bag file for `--extractor precomputed`.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "downsample")]
    extractor: ExtractorKind,
    /// Output dimension of the random-projection extractor.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Seed of the random-projection matrix.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32, value_parser = parse_min_patch)]
    min_patch: usize,
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[arg(long, default_value_t = 100)]
    target_patches: usize,
    /// Leave out the whole-image patch.
    #[arg(long)]
    no_level0: bool,
    #[arg(long, default_value_t = 1.0)]
    position_weight: f64,
    /// Scale every descriptor to unit norm instead of capping at one.
    #[arg(long)]
    unit_norm: bool,
    /// Fit standardization on these descriptors and write it next to the output.
    #[arg(long, conflicts_with = "stats")]
    standardize: bool,
    /// Apply previously fitted standardization.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Where `--standardize` writes its statistics [default: <out>.stats.json].
    #[arg(long)]
    stats_out: Option<PathBuf>,
    /// Number of classes when reading a manifest [default: largest label].
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value = "stoml3")]
    method: Method,
    /// Prototypes per class.
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Smoothness used while training.
    #[arg(long, default_value = "2")]
    q: SmoothnessQ,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 2500)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_INIT_SCALE)]
    init_scale: f64,
    /// Fit per-dimension standardization on the training bags.
    #[arg(long)]
    standardize: bool,
}

impl ModelArgs {
    fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            k: self.k,
            lambda: self.lambda,
            q_train: self.q,
            q_predict: SmoothnessQ::INFINITY,
            epochs: self.epochs,
            batch: self.batch,
            init_scale: self.init_scale,
            standardize: self.standardize,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// `.ml3w` for prototype methods; a bag file of class supports for nbnn.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    /// Defaults to nbnl for `.ml3w` models and nbnn for support files.
    #[arg(long, value_enum)]
    predictor: Option<PredictorArg>,
    /// Smoothness of the NBNL predictor.
    #[arg(long, default_value = "inf")]
    q: SmoothnessQ,
}

#[derive(Args)]
struct DaArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Labeled target bags per class moved into the training set.
    #[arg(long, default_value_t = 0)]
    labeled_target: usize,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    per_class_train: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    train_out: PathBuf,
    #[arg(long)]
    test_out: PathBuf,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Examples streamed in the throughput run.
    #[arg(long, default_value_t = 1_000_000)]
    examples: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 2500)]
    batch: usize,
    /// Skip the throughput run.
    #[arg(long)]
    xor_only: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    let result = match cli.command {
        Command::Extract(a) => extract(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Da(a) => da_cmd(a),
        Command::Split(a) => split_cmd(a),
        Command::Bench(a) => bench_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let threads = match std::env::var("NBNLKIT_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| anyhow!("NBNLKIT_THREADS must be a positive integer, got '{v}'"))?,
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    Ok(())
}

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "pgm", "ppm", "pnm", "pbm"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()?;
    entries.sort();
    Ok(entries)
}

/// Image paths with 0-based labels, the class count and the ids to store.
struct ImageList {
    items: Vec<(PathBuf, String, Option<usize>)>,
    classes: usize,
}

fn list_images(input: &Path, classes: Option<usize>) -> anyhow::Result<ImageList> {
    if input.is_dir() {
        let class_dirs: Vec<PathBuf> = sorted_entries(input)?.into_iter().filter(|p| p.is_dir()).collect();
        if class_dirs.is_empty() {
            bail!("{} has no class subdirectories", input.display());
        }
        let mut items = Vec::new();
        for (y, dir) in class_dirs.iter().enumerate() {
            let class_name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
            info!("class {} = {class_name}", y + 1);
            for path in sorted_entries(dir)?.into_iter().filter(|p| is_image(p)) {
                let id = format!("{class_name}/{}", path.file_name().unwrap_or_default().to_string_lossy());
                items.push((path, id, Some(y)));
            }
        }
        return Ok(ImageList { items, classes: class_dirs.len() });
    }
    let text = fs::read_to_string(input).with_context(|| format!("reading manifest {}", input.display()))?;
    let base = input.parent().unwrap_or(Path::new("."));
    let mut items = Vec::new();
    let mut max_label = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (path, label) = line
            .rsplit_once(char::is_whitespace)
            .ok_or_else(|| anyhow!("manifest line {}: expected '<path> <label>'", lineno + 1))?;
        let label = match label {
            "-" => None,
            l => {
                let y: usize = l.parse().with_context(|| format!("manifest line {}: bad label '{l}'", lineno + 1))?;
                if y == 0 {
                    bail!("manifest line {}: labels are 1-based", lineno + 1);
                }
                max_label = max_label.max(y);
                Some(y - 1)
            }
        };
        let path = path.trim();
        items.push((base.join(path), path.to_string(), label));
    }
    let classes = classes.unwrap_or(max_label);
    if max_label > classes {
        bail!("manifest uses label {max_label} but --classes is {classes}");
    }
    Ok(ImageList { items, classes })
}

fn write_stats_if(stats: Option<&StandardizationStats>, args: &ExtractArgs) -> anyhow::Result<()> {
    if let (true, Some(stats)) = (args.standardize, stats) {
        let path = args.stats_out.clone().unwrap_or_else(|| sidecar(&args.out));
        io::write_stats(&path, stats)?;
        info!("wrote standardization to {}", path.display());
    }
    Ok(())
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".stats.json");
    PathBuf::from(s)
}

fn fit_raw(raws: &[Array2<f64>], dim: usize) -> anyhow::Result<StandardizationStats> {
    let bags = raws
        .iter()
        .enumerate()
        .map(|(i, r)| FeatureBag::new(i.to_string(), None, r.clone(), None))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(fit_standardizer(&Dataset::new(dim, 0, bags)?)?)
}

fn extract(args: ExtractArgs) -> anyhow::Result<()> {
    let config = PatchPlanConfig {
        min_patch: args.min_patch,
        levels: args.levels,
        target_patches: args.target_patches,
        include_level0: !args.no_level0,
        position_weight: args.position_weight,
        norm: if args.unit_norm { NormMode::Unit } else { NormMode::Cap },
    };
    if !(config.position_weight >= 0.0 && config.position_weight.is_finite()) {
        bail!("--position-weight must be a finite value >= 0");
    }
    let given_stats = args.stats.as_deref().map(io::read_stats).transpose()?;
    let dataset = match args.extractor {
        ExtractorKind::Precomputed => extract_precomputed(&args, &config, given_stats)?,
        kind => {
            let extractor: Box<dyn DescriptorExtractor> = match kind {
                ExtractorKind::Randproj => Box::new(RandProjExtractor::new(args.dim, args.seed)?),
                _ => Box::new(DownsampleExtractor),
            };
            let list = list_images(&args.input, args.classes)?;
            if list.items.is_empty() {
                bail!("no images found under {}", args.input.display());
            }
            let started = Instant::now();
            let raws = list
                .items
                .par_iter()
                .map(|(path, _, _)| -> anyhow::Result<(Vec<PatchSpec>, Array2<f64>)> {
                    let image = Image::open(path)?;
                    extract_raw(&image, &config, extractor.as_ref()).with_context(|| format!("{}", path.display()))
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            let stats = match given_stats {
                Some(s) => Some(s),
                None if args.standardize => {
                    Some(fit_raw(&raws.iter().map(|r| r.1.clone()).collect::<Vec<_>>(), extractor.dim())?)
                }
                None => None,
            };
            if let Some(s) = &stats {
                if s.dim() != extractor.dim() {
                    bail!("standardization has dimension {}, extractor produces {}", s.dim(), extractor.dim());
                }
            }
            let bags = raws
                .into_par_iter()
                .zip(list.items.par_iter())
                .map(|((specs, raw), (_, id, label))| {
                    let mut bag = finish_bag(&specs, raw, stats.as_ref(), &config)?;
                    bag.image_id = id.clone();
                    bag.label = *label;
                    Ok(bag)
                })
                .collect::<nbnlkit::Result<Vec<_>>>()?;
            info!("extracted {} images in {:.2}s", bags.len(), started.elapsed().as_secs_f64());
            write_stats_if(stats.as_ref(), &args)?;
            let dim = nbnlkit::patchgrid::bag_dim(extractor.dim(), &config);
            Dataset::new(dim, list.classes, bags)?
        }
    };
    info!("{} bags, {} patches, dimension {}", dataset.len(), dataset.patch_count(), dataset.dim());
    io::write_dataset(&args.out, &dataset, output_format(args.format, &args.out))?;
    Ok(())
}

/// Standardize, normalize and append stored positions to descriptors that
/// were computed elsewhere.
fn extract_precomputed(
    args: &ExtractArgs,
    config: &PatchPlanConfig,
    given_stats: Option<StandardizationStats>,
) -> anyhow::Result<Dataset> {
    let raw = io::read_dataset(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let stats = match given_stats {
        Some(s) => Some(s),
        None if args.standardize => Some(fit_standardizer(&raw)?),
        None => None,
    };
    write_stats_if(stats.as_ref(), args)?;
    let append = config.position_weight > 0.0 && raw.bags().iter().all(|b| b.positions.is_some());
    if config.position_weight > 0.0 && !append {
        warn!("not every bag carries positions; positions are not appended");
    }
    let dim = if append { raw.dim() + 2 } else { raw.dim() };
    Ok(raw.try_map_bags(dim, |bag| {
        let mut patches = match &stats {
            Some(s) => nbnlkit::data::apply_standardizer(s, bag)?.patches,
            None => bag.patches.clone(),
        };
        config.norm.apply_rows(&mut patches)?;
        if append {
            let pos = bag.positions.as_ref().expect("checked").mapv(|v| v * config.position_weight);
            patches = concatenate![Axis(1), patches, pos];
        }
        FeatureBag::new(bag.image_id.clone(), bag.label, patches, bag.positions.clone())
    })?)
}

fn read_input(path: &Path) -> anyhow::Result<Dataset> {
    io::read_dataset(path).with_context(|| format!("reading {}", path.display()))
}

fn train_cmd(args: TrainArgs) -> anyhow::Result<()> {
    let train_set = read_input(&args.input)?;
    let hp = args.model.hyperparams();
    let started = Instant::now();
    if args.model.method == Method::Nbnn {
        // supports are the preprocessed training descriptors, one bag per class
        let stats = if hp.standardize { Some(fit_standardizer(&train_set)?) } else { None };
        let prepared = preprocess(&train_set, stats.as_ref())?;
        let model = nbnlkit::i2c::build_support(&prepared)?;
        let bags = (0..model.classes())
            .map(|y| FeatureBag::new(format!("class-{}", y + 1), Some(y), model.support(y).to_owned(), None))
            .collect::<Result<Vec<_>, _>>()?;
        let supports = Dataset::new(model.dim(), model.classes(), bags)?;
        io::write_dataset(&args.out, &supports, output_format(args.format, &args.out))?;
        if let Some(s) = &stats {
            io::write_stats(&sidecar(&args.out), s)?;
        }
    } else {
        let model = train_model(&train_set, args.model.method, &hp, args.model.seed)?;
        let Classifier::Nbnl { weights, .. } = &model.classifier else {
            unreachable!("prototype methods yield prototype models")
        };
        io::write_model(&args.out, weights, model.stats.as_ref())?;
    }
    info!("trained {} in {:.2}s, wrote {}", args.model.method, started.elapsed().as_secs_f64(), args.out.display());
    Ok(())
}

fn load_model(path: &Path, predictor: Option<PredictorArg>, q: SmoothnessQ) -> anyhow::Result<TrainedModel> {
    let kind = io::sniff_model(path).with_context(|| format!("reading {}", path.display()))?;
    match (kind, predictor) {
        (ModelKind::Prototypes, None | Some(PredictorArg::Nbnl)) => {
            let file = io::read_model(path).with_context(|| format!("reading {}", path.display()))?;
            Ok(TrainedModel {
                classifier: Classifier::Nbnl { weights: file.weights, q },
                stats: file.stats,
            })
        }
        (ModelKind::Supports, None | Some(PredictorArg::Nbnn)) => {
            let supports = read_input(path)?;
            let stats_path = sidecar(path);
            let stats = if stats_path.exists() { Some(io::read_stats(&stats_path)?) } else { None };
            Ok(TrainedModel {
                classifier: Classifier::Nbnn(nbnn_from_dataset(&supports)?),
                stats,
            })
        }
        (ModelKind::Prototypes, Some(PredictorArg::Nbnn)) => {
            bail!("{} holds prototypes; the nbnn predictor needs a support file", path.display())
        }
        (ModelKind::Supports, Some(PredictorArg::Nbnl)) => {
            bail!("{} holds class supports; the nbnl predictor needs an .ml3w model", path.display())
        }
    }
}

fn eval_cmd(args: EvalArgs) -> anyhow::Result<()> {
    let model = load_model(&args.model, args.predictor, args.q)?;
    let test = read_input(&args.input)?;
    let report = model.evaluate(&test)?;
    println!("{report}");
    Ok(())
}

fn da_cmd(args: DaArgs) -> anyhow::Result<()> {
    let source = read_input(&args.source)?;
    let target = read_input(&args.target)?;
    let hp = args.model.hyperparams();
    let out = da_run(&source, &target, args.labeled_target, args.model.method, &hp, args.model.seed)?;
    println!("train_bags={} test_bags={}", out.train_bags, out.test_bags);
    println!("{}", out.report);
    Ok(())
}

fn split_cmd(args: SplitArgs) -> anyhow::Result<()> {
    let ds = read_input(&args.input)?;
    let (train_set, test_set) = split_dataset(&ds, args.per_class_train, args.seed)?;
    io::write_dataset(&args.train_out, &train_set, output_format(args.format, &args.train_out))?;
    io::write_dataset(&args.test_out, &test_set, output_format(args.format, &args.test_out))?;
    println!("train_bags={} test_bags={}", train_set.len(), test_set.len());
    Ok(())
}

fn bench_cmd(args: BenchArgs) -> anyhow::Result<()> {
    for k in [1, 4] {
        let started = Instant::now();
        let out = run_xor_benchmark(&XorBenchmark { k, seed: args.seed, ..Default::default() })?;
        println!(
            "xor k={k} train_accuracy={:.4} heldout_accuracy={:.4} seconds={:.2}",
            out.train_accuracy,
            out.heldout_accuracy,
            started.elapsed().as_secs_f64()
        );
    }
    if args.xor_only {
        return Ok(());
    }
    let stream = SyntheticStream::new(args.dim, args.classes, args.examples, args.seed)?;
    let mut state = TrainerState::new(
        args.dim,
        args.k,
        args.classes,
        1.0,
        SmoothnessQ::default(),
        DEFAULT_INIT_SCALE,
        args.seed,
    )?;
    let config = TrainConfig {
        epochs: 1,
        batch_size: args.batch,
        shuffle_seed: args.seed,
        shuffle: false,
    };
    let started = Instant::now();
    let report = train(&stream, &config, &mut state)?;
    let secs = started.elapsed().as_secs_f64();
    println!(
        "throughput examples={} d={} k={} c={} updates={} seconds={secs:.2} seconds_per_update={:.6} examples_per_second={:.0}",
        args.examples,
        args.dim,
        args.k,
        args.classes,
        report.updates,
        report.seconds_per_update,
        args.examples as f64 / secs
    );
    Ok(())
}
