use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use qqnet::benchmark::BenchmarkSpec;
use qqnet::classify::{
    index_dataset, predict, read_model, run_protocol, train, write_model, ClassifierKind, DatasetIndex,
    DescriptorSource, ImageDescriptors, Layout, MatchFactor, Protocol, SvmParams,
};
use qqnet::covariance::{
    check_derivative_equality, check_rotation_covariance, check_scale_covariance, ripple_constant,
    selection_grid, sweep_scale_selection, DERIVATIVE_TOLERANCE, ROTATION_TOLERANCE, SCALE_TOLERANCE,
};
use qqnet::descriptor::{assemble_descriptor, write_descriptor, ChannelMode};
use qqnet::image_io::{load_image, save_png, save_png_normalized, to_grey};
use qqnet::network::{build_network, NetConfig};
use qqnet::scale_space::{discrete_gaussian_kernel, DEFAULT_EPS};
use qqnet::synthetic::{make_texture, TextureKind, TextureParams};
use qqnet::{Error, Image, Result};

#[derive(Parser)]
#[command(name = "qqnet", version, about = "Quasi quadrature networks: features, descriptors, classification and covariance checks")]
#[command(subcommand_required = true, arg_required_else_help = true)]
struct Cli {
    /// JSON file overriding network configuration defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every randomized step
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: hardware parallelism)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dump every feature map of the network at one initial scale
    Features {
        image: PathBuf,
        /// Initial scale (variance)
        #[arg(long, default_value_t = 1.0)]
        s0: f64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compute a mean-reduced descriptor file
    Descriptor {
        image: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Grey)]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train, evaluate or run a benchmark protocol
    Classify {
        #[command(subcommand)]
        action: ClassifyAction,
    },
    /// Run a covariance or closed-form check and report it as JSON
    Verify(VerifyArgs),
    /// Write numeric tables as CSV
    Analyze {
        #[command(subcommand)]
        what: AnalyzeWhat,
    },
    /// Render a procedural texture to PNG
    Synth {
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 8.0)]
        wavelength: f64,
        #[arg(long)]
        orientation: Option<f64>,
        #[arg(long)]
        phase: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Index a dataset directory
    Dataset {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Grey,
    Luv,
}

impl From<Mode> for ChannelMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Grey => ChannelMode::Grey,
            Mode::Luv => ChannelMode::Luv,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Classifier {
    Nn,
    Svm,
}

impl From<Classifier> for ClassifierKind {
    fn from(c: Classifier) -> Self {
        match c {
            Classifier::Nn => ClassifierKind::Nn,
            Classifier::Svm => ClassifierKind::LinearSvm,
        }
    }
}

#[derive(Args)]
struct DataArgs {
    /// Dataset root with one directory per class
    #[arg(long)]
    root: PathBuf,
    /// kthtips2, curet, umd or flat
    #[arg(long, default_value = "flat")]
    layout: String,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, value_enum, default_value_t = Classifier::Nn)]
    classifier: Classifier,
    #[arg(long, value_enum, default_value_t = Mode::Grey)]
    mode: Mode,
    #[arg(long, default_value_t = 1e-4)]
    lambda: f64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolKind {
    Standard,
    ScaleMatched,
    ScaleAggregated,
    RandomSplit,
}

#[derive(Subcommand)]
enum ClassifyAction {
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Grey)]
        mode: Mode,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    Protocol {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum)]
        protocol: ProtocolKind,
        /// Scale factor for scale-matched splits: sqrt2, 2, 2sqrt2 or 4
        #[arg(long, default_value = "4")]
        factor: String,
        /// Multiply the test σ0 grid by the factor
        #[arg(long)]
        covariant: bool,
        /// Train over the five scaled σ0 grids
        #[arg(long)]
        aggregated: bool,
        #[arg(long, default_value = "2")]
        train_size: String,
        #[arg(long, value_delimiter = ',', default_value = "3,4,5,6,7,8,9,10")]
        test_sizes: Vec<String>,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Synthetic scale-matching benchmark
    Benchmark {
        /// JSON benchmark specification (defaults when absent)
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "2,4")]
        covariant_factors: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1.4142135623730951,2,2.8284271247461903,4")]
        aggregated_factors: Vec<f64>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Scale,
    Rotation,
    Gamma1,
    Selection,
    Ripple,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_enum)]
    suite: Suite,
    #[arg(long, conflicts_with = "synthetic")]
    image: Option<PathBuf>,
    /// Texture kind used when no image is given
    #[arg(long, default_value = "blob_noise")]
    synthetic: String,
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long, default_value_t = 16.0)]
    wavelength: f64,
    /// Initial scale for network checks, derivative scale for gamma1
    #[arg(long, default_value_t = 1.0)]
    s0: f64,
    #[arg(long, default_value_t = 2.0)]
    factor: f64,
    #[arg(long, default_value_t = 1)]
    quarter_turns: u32,
    /// Derivative order for gamma1
    #[arg(long, default_value_t = 1)]
    order: u32,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    /// Blob variance for the selection suite
    #[arg(long, default_value_t = 16.0)]
    blob_s0: f64,
    #[arg(long, default_value_t = 8)]
    steps_per_octave: u32,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Subcommand)]
enum AnalyzeWhat {
    /// Discrete Gaussian kernel coefficients
    Kernel {
        #[arg(long)]
        s: f64,
        #[arg(long, default_value_t = DEFAULT_EPS)]
        eps: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Centre response of a Gaussian derivative blob over scale
    ScaleSelection {
        #[arg(long, default_value_t = 0)]
        order: u32,
        #[arg(long, default_value_t = 16.0)]
        blob_s0: f64,
        #[arg(long, default_value_t = 8)]
        steps_per_octave: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    command: &'a str,
    config_hash: String,
    seed: u64,
    result: T,
}

struct Ctx {
    cfg: NetConfig,
    seed: u64,
}

impl Ctx {
    fn emit<T: Serialize>(&self, command: &str, result: T, path: Option<&Path>) -> Result<()> {
        let env = Envelope {
            command,
            config_hash: self.cfg.hash(),
            seed: self.seed,
            result,
        };
        let mut text = serde_json::to_string_pretty(&env)?;
        text.push('\n');
        write_text(path, &text)
    }

    fn csv_header(&self) -> String {
        format!("# config_hash={}\n", self.cfg.hash())
    }
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<NetConfig> {
    let cfg: NetConfig = match path {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => NetConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_index(data: &DataArgs) -> Result<DatasetIndex> {
    index_dataset(&data.root, data.layout.parse::<Layout>()?)
}

fn svm_params(m: &ModelArgs, seed: u64) -> SvmParams {
    SvmParams {
        lambda: m.lambda,
        epochs: m.epochs,
        seed,
    }
}

fn file_safe(path: &str) -> String {
    path.replace('*', "p")
}

#[derive(Serialize)]
struct MapRecord {
    layer: usize,
    path: String,
    scale_s: f64,
    width: usize,
    height: usize,
    raw: String,
    png: String,
}

fn features(ctx: &Ctx, image: &Path, s0: f64, out_dir: &Path) -> Result<()> {
    let img = to_grey(&load_image(image)?);
    let layers = build_network(&img, &ctx.cfg, s0)?;
    fs::create_dir_all(out_dir)?;
    let mut records = Vec::new();
    for layer in &layers {
        for (path, map) in &layer.maps {
            let stem = format!("L{}_{}", layer.layer_index, file_safe(&path.to_string()));
            let raw: Vec<u8> = map.data().iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
            fs::write(out_dir.join(format!("{stem}.f32")), raw)?;
            save_png_normalized(map, out_dir.join(format!("{stem}.png")))?;
            records.push(MapRecord {
                layer: layer.layer_index,
                path: path.to_string(),
                scale_s: layer.scale_s,
                width: map.width(),
                height: map.height(),
                raw: format!("{stem}.f32"),
                png: format!("{stem}.png"),
            });
        }
    }
    #[derive(Serialize)]
    struct Index {
        s0: f64,
        config: NetConfig,
        maps: Vec<MapRecord>,
    }
    let index = Index {
        s0,
        config: ctx.cfg.clone(),
        maps: records,
    };
    ctx.emit("features", index, Some(&out_dir.join("features.json")))
}

#[derive(Serialize)]
struct Prediction {
    path: PathBuf,
    truth: String,
    predicted: String,
    score: f64,
}

#[derive(Serialize)]
struct EvalReport {
    accuracy: f64,
    labels: Vec<String>,
    confusion: Vec<Vec<usize>>,
    predictions: Vec<Prediction>,
}

fn classify(ctx: &Ctx, action: ClassifyAction) -> Result<()> {
    match action {
        ClassifyAction::Train { data, model, out } => {
            let index = load_index(&data)?;
            let source = ImageDescriptors::new(ctx.cfg.clone(), model.mode.into());
            let xs = descriptors_for(&index, &source, &ctx.cfg)?;
            let ys: Vec<String> = index.entries.iter().map(|e| e.label.clone()).collect();
            let mut trained = train(&xs, &ys, model.classifier.into(), &svm_params(&model, ctx.seed))?;
            trained.config_hash = ctx.cfg.hash();
            write_model(&out, &trained)
        }
        ClassifyAction::Eval { data, model, mode, json } => {
            let trained = read_model(&model)?;
            if trained.config_hash != ctx.cfg.hash() {
                return Err(Error::Domain(format!(
                    "model was trained with config {} but the current config is {}",
                    trained.config_hash,
                    ctx.cfg.hash()
                )));
            }
            let index = load_index(&data)?;
            let source = ImageDescriptors::new(ctx.cfg.clone(), mode.into());
            let xs = descriptors_for(&index, &source, &ctx.cfg)?;
            let labels = trained.labels.clone();
            let mut confusion = vec![vec![0usize; labels.len()]; labels.len()];
            let mut predictions = Vec::new();
            let mut correct = 0;
            for (entry, x) in index.entries.iter().zip(&xs) {
                let (predicted, score) = predict(&trained, x)?;
                if let (Ok(r), Ok(c)) = (labels.binary_search(&entry.label), labels.binary_search(&predicted)) {
                    confusion[r][c] += 1;
                }
                correct += usize::from(predicted == entry.label);
                predictions.push(Prediction {
                    path: entry.path.clone(),
                    truth: entry.label.clone(),
                    predicted,
                    score,
                });
            }
            let report = EvalReport {
                accuracy: correct as f64 / predictions.len() as f64,
                labels,
                confusion,
                predictions,
            };
            ctx.emit("classify eval", report, json.as_deref())
        }
        ClassifyAction::Protocol {
            data,
            model,
            protocol,
            factor,
            covariant,
            aggregated,
            train_size,
            test_sizes,
            repeats,
            json,
        } => {
            let index = load_index(&data)?;
            let protocol = match protocol {
                ProtocolKind::Standard => Protocol::LeaveOneSampleOut,
                ProtocolKind::ScaleMatched => Protocol::ScaleMatched {
                    factor: factor.parse::<MatchFactor>()?,
                    covariant,
                },
                ProtocolKind::ScaleAggregated => Protocol::ScaleAggregated {
                    train_size,
                    test_sizes,
                    aggregated,
                },
                ProtocolKind::RandomSplit => Protocol::RandomSplit { repeats },
            };
            let source = ImageDescriptors::new(ctx.cfg.clone(), model.mode.into());
            let report = run_protocol(
                &index,
                &protocol,
                &ctx.cfg,
                &source,
                model.classifier.into(),
                &svm_params(&model, ctx.seed),
                ctx.seed,
            )?;
            ctx.emit("classify protocol", report, json.as_deref())
        }
        ClassifyAction::Benchmark {
            spec,
            covariant_factors,
            aggregated_factors,
            json,
        } => {
            let mut spec: BenchmarkSpec = match spec {
                Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
                None => BenchmarkSpec::default(),
            };
            spec.seed = ctx.seed;
            let report = spec.run(&covariant_factors, &aggregated_factors)?;
            ctx.emit("classify benchmark", report, json.as_deref())
        }
    }
}

fn descriptors_for(index: &DatasetIndex, source: &ImageDescriptors, cfg: &NetConfig) -> Result<Vec<Vec<f64>>> {
    use rayon::prelude::*;
    index
        .entries
        .par_iter()
        .map(|e| Ok(source.descriptor(e, &cfg.s0_list)?.as_ref().clone()))
        .collect()
}

fn verify_input(args: &VerifyArgs, seed: u64) -> Result<Image> {
    match &args.image {
        Some(p) => Ok(to_grey(&load_image(p)?)),
        None => {
            let params = TextureParams {
                wavelength: args.wavelength,
                ..TextureParams::default()
            };
            make_texture(args.synthetic.parse::<TextureKind>()?, &params, seed, args.size)
        }
    }
}

fn verify(ctx: &Ctx, args: VerifyArgs) -> Result<()> {
    let out = args.json.as_deref();
    match args.suite {
        Suite::Scale => {
            let img = verify_input(&args, ctx.seed)?;
            let tol = args.tolerance.unwrap_or(SCALE_TOLERANCE);
            let r = check_scale_covariance(&img, &ctx.cfg, args.s0, args.factor, tol)?;
            ctx.emit("verify scale", r, out)
        }
        Suite::Rotation => {
            let img = verify_input(&args, ctx.seed)?;
            let tol = args.tolerance.unwrap_or(ROTATION_TOLERANCE);
            let r = check_rotation_covariance(&img, &ctx.cfg, args.s0, args.quarter_turns, tol)?;
            ctx.emit("verify rotation", r, out)
        }
        Suite::Gamma1 => {
            let img = verify_input(&args, ctx.seed)?;
            let tol = args.tolerance.unwrap_or(DERIVATIVE_TOLERANCE);
            let r = check_derivative_equality(&img, args.s0, args.factor, args.order, args.gamma, tol)?;
            ctx.emit("verify gamma1", r, out)
        }
        Suite::Selection => {
            let grid = selection_grid(args.blob_s0, args.steps_per_octave);
            let rows = (0..3)
                .map(|n| sweep_scale_selection(args.blob_s0, ctx.cfg.big_gamma, n, &grid))
                .collect::<Result<Vec<_>>>()?;
            ctx.emit("verify selection", rows, out)
        }
        Suite::Ripple => {
            let r = ripple_constant(args.s0, args.blob_s0)?;
            ctx.emit("verify ripple", r, out)
        }
    }
}

fn analyze(ctx: &Ctx, what: AnalyzeWhat) -> Result<()> {
    match what {
        AnalyzeWhat::Kernel { s, eps, out } => {
            let k = discrete_gaussian_kernel(s, eps)?;
            let mut text = ctx.csv_header();
            text.push_str("n,weight\n");
            for n in -(k.radius as isize)..=k.radius as isize {
                text.push_str(&format!("{n},{:e}\n", k.at(n)));
            }
            write_text(out.as_deref(), &text)
        }
        AnalyzeWhat::ScaleSelection {
            order,
            blob_s0,
            steps_per_octave,
            out,
        } => {
            let grid = selection_grid(blob_s0, steps_per_octave);
            let r = sweep_scale_selection(blob_s0, ctx.cfg.big_gamma, order, &grid)?;
            let mut text = ctx.csv_header();
            text.push_str(&format!("# argmax_s={} predicted_s={}\n", r.argmax_s, r.predicted_s));
            text.push_str("s,q\n");
            for (s, q) in &r.responses {
                text.push_str(&format!("{s},{q:e}\n"));
            }
            write_text(out.as_deref(), &text)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Domain(format!("thread pool: {e}")))?;
    }
    let ctx = Ctx {
        cfg: load_config(cli.config.as_deref())?,
        seed: cli.seed,
    };
    match cli.command {
        Command::Features { image, s0, out_dir } => features(&ctx, &image, s0, &out_dir),
        Command::Descriptor { image, mode, out } => {
            let img = load_image(&image)?;
            let d = assemble_descriptor(&img, &ctx.cfg, mode.into())?;
            write_descriptor(&out, &d, &ctx.cfg, mode.into())
        }
        Command::Classify { action } => classify(&ctx, action),
        Command::Verify(args) => verify(&ctx, args),
        Command::Analyze { what } => analyze(&ctx, what),
        Command::Synth {
            kind,
            size,
            wavelength,
            orientation,
            phase,
            out,
        } => {
            let params = TextureParams {
                wavelength,
                orientation,
                phase,
            };
            let kind: TextureKind = kind.parse()?;
            let img = make_texture(kind, &params, ctx.seed, size)?;
            save_png(&img, &out)?;
            #[derive(Serialize)]
            struct Sidecar {
                kind: TextureKind,
                size: usize,
                params: TextureParams,
            }
            let mut sidecar = out.clone().into_os_string();
            sidecar.push(".json");
            ctx.emit("synth", Sidecar { kind, size, params }, Some(Path::new(&sidecar)))
        }
        Command::Dataset { data, json } => {
            let index = load_index(&data)?;
            ctx.emit("dataset", index, json.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
