//! Command-line entry point: scene synthesis, training, evaluation,
//! prediction, the random-forest baseline, and the self-verification
//! suite. Exit codes: 0 success, 1 usage, 2 data error, 3 numerical
//! failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use fusionseg::data::{
    load_scene, nn_resample, normalize_patches, sample_patches, save_scene, synth_scene,
    NormStats, SynthConfig,
};
use fusionseg::error::{Error, Result};
use fusionseg::infer::{eval_scene, predict_scene};
use fusionseg::metrics::ConfusionMatrix;
use fusionseg::models::{build_network, load_checkpoint, NetworkGraph};
use fusionseg::optim::{cross_entropy_loss, Reduction};
use fusionseg::rf::{scene_pixels, train_forest, ForestModel, RfConfig};
use fusionseg::rng::CounterRng;
use fusionseg::tensor::{Labels, Tensor, IGNORE_LABEL};
use fusionseg::train::{train_network, RunConfig};

#[derive(Parser)]
#[command(name = "fusionseg", version, about = "Multiresolution cloud/snow segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossReduction {
    Sum,
    Mean,
}

impl From<LossReduction> for Reduction {
    fn from(r: LossReduction) -> Reduction {
        match r {
            LossReduction::Sum => Reduction::Sum,
            LossReduction::Mean => Reduction::Mean,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file with a full run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    network: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// SWIR-side patch size M (the VNIR/label window is 4M).
    #[arg(long)]
    patch_m: Option<usize>,
    /// Number of training patches sampled per run.
    #[arg(long = "patches")]
    train_patches: Option<usize>,
    #[arg(long)]
    val_patches: Option<usize>,
    #[arg(long)]
    eta_start: Option<f64>,
    #[arg(long)]
    eta_end: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    loss_reduction: Option<LossReduction>,
    #[arg(long)]
    train_scene: Option<PathBuf>,
    #[arg(long)]
    val_scene: Option<PathBuf>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Also append JSON log lines to this file.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Print the effective configuration as JSON and exit.
    #[arg(long)]
    dump_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network on a scene, logging one JSON line per epoch.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a scene and print a metrics report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Normalization statistics JSON; defaults to <checkpoint>/stats.json
        /// when present, otherwise computed from the scene itself.
        #[arg(long)]
        stats: Option<PathBuf>,
        /// SWIR-side inference window size.
        #[arg(long, default_value_t = 50)]
        window: usize,
        /// Write the full report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict a label raster for a scene.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        window: usize,
        /// Output base path (writes <out>.bin and <out>.meta.json).
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic VNIR/SWIR scene directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// VNIR-side square scene size (multiple of 4).
        #[arg(long, default_value_t = 256)]
        size: usize,
        /// 0 = cloud/snow separable in VNIR, 1 = identical VNIR spectra.
        #[arg(long, default_value_t = 0.0)]
        confusability: f64,
        /// 0 = shadows/rest separable in SWIR, 1 = identical SWIR spectra.
        #[arg(long, default_value_t = 0.0)]
        swir_ambiguity: f64,
        /// Box-blur radius of the latent geometry; larger = bigger blobs.
        #[arg(long, default_value_t = 12)]
        smoothness: usize,
    },
    /// Nearest-neighbor resample one raster of a scene to a new pixel size.
    Resample {
        #[arg(long)]
        scene: PathBuf,
        /// Which raster to resample.
        #[arg(long, value_parser = ["vnir", "swir"])]
        band: String,
        #[arg(long)]
        pixel_size: f64,
        /// Output base path (writes <out>.bin and <out>.meta.json).
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute per-band normalization statistics for a scene.
    Stats {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the pixel-based random-forest baseline.
    RfTrain {
        /// Training scene directories (repeatable).
        #[arg(long, required = true)]
        scene: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        batches: usize,
        #[arg(long, default_value_t = 400)]
        trees_per_batch: usize,
        #[arg(long, default_value_t = 20)]
        max_depth: usize,
        #[arg(long, default_value_t = 5)]
        min_leaf: usize,
        #[arg(long, default_value_t = 2)]
        features_per_split: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Cap on training pixels (seeded uniform subsample).
        #[arg(long)]
        max_pixels: Option<usize>,
    },
    /// Predict a label raster with a trained forest.
    RfPredict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Output base path (writes <out>.bin and <out>.meta.json).
        #[arg(long)]
        out: PathBuf,
        /// Also score against the scene's reference labels.
        #[arg(long)]
        report: bool,
    },
    /// Reconstruct the published confusion matrices and run gradient
    /// spot-checks; exits nonzero on any tolerance miss.
    Verify,
}

fn env_seed() -> Option<u64> {
    std::env::var("FUSIONSEG_SEED").ok().and_then(|s| s.parse().ok())
}

fn load_stats(
    flag: &Option<PathBuf>,
    checkpoint: &Path,
    scene: &fusionseg::data::ScenePair<f32>,
) -> Result<NormStats> {
    if let Some(p) = flag {
        return NormStats::load(p);
    }
    let beside = checkpoint.join("stats.json");
    if beside.exists() {
        return NormStats::load(&beside);
    }
    NormStats::compute(scene)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (mut cfg, had_seed) = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let value: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
            let had_seed = value.get("seed").is_some();
            let cfg: RunConfig =
                serde_json::from_value(value).map_err(|e| Error::json(path, e))?;
            (cfg, had_seed)
        }
        None => (RunConfig::default(), false),
    };

    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(v) = args.$field { cfg.$field = v; })*
        };
    }
    set!(epochs, batch_size, patch_m, train_patches, val_patches, eta_start, eta_end, momentum, weight_decay);
    if let Some(n) = args.network {
        cfg.network = n;
    }
    if let Some(r) = args.loss_reduction {
        cfg.reduction = r.into();
    }
    if let Some(p) = args.train_scene {
        cfg.train_scene = Some(p);
    }
    if let Some(p) = args.val_scene {
        cfg.val_scene = Some(p);
    }
    if let Some(p) = args.checkpoint_dir {
        cfg.checkpoint_dir = Some(p);
    }
    // seed precedence: flag, then config file, then FUSIONSEG_SEED.
    if let Some(s) = args.seed {
        cfg.seed = s;
    } else if !had_seed {
        if let Some(s) = env_seed() {
            cfg.seed = s;
        }
    }
    cfg.validate()?;

    if args.dump_config {
        println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
        return Ok(());
    }

    let train_path = cfg
        .train_scene
        .clone()
        .ok_or_else(|| Error::MissingInput("--train-scene (or config train_scene)".into()))?;
    let scene = load_scene::<f32>(&train_path)?;
    let stats = NormStats::compute(&scene)?;

    let rng = CounterRng::new(cfg.seed);
    let mut train = sample_patches(&scene, cfg.train_patches, cfg.patch_m, &mut rng.split(1))?;
    normalize_patches(&mut train, &stats)?;
    let val = match &cfg.val_scene {
        Some(p) => {
            let vscene = load_scene::<f32>(p)?;
            let mut v = sample_patches(&vscene, cfg.val_patches, cfg.patch_m, &mut rng.split(2))?;
            normalize_patches(&mut v, &stats)?;
            Some(v)
        }
        None => None,
    };

    let mut net: NetworkGraph<f32> = build_network(&cfg.network, &mut rng.split(3))?;
    eprintln!(
        "training {} ({} parameters) on {} patches",
        cfg.network,
        net.param_count(),
        train.count()
    );

    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        stats.save(&dir.join("stats.json"))?;
    }

    let mut log_file = match &args.log {
        Some(p) => Some(std::fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let outcome = train_network(&mut net, &train, val.as_ref(), &cfg, |line| {
        let text = serde_json::to_string(line).expect("log line serializes");
        println!("{text}");
        if let Some(f) = &mut log_file {
            use std::io::Write;
            let _ = writeln!(f, "{text}");
        }
    })?;
    eprintln!(
        "done: final train loss {:.6}, best val loss {:.6} at epoch {}",
        outcome.final_train_loss, outcome.best_val_loss, outcome.best_epoch
    );
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    scene_dir: &Path,
    stats_flag: &Option<PathBuf>,
    window: usize,
    out: &Option<PathBuf>,
) -> Result<()> {
    let net: NetworkGraph<f32> = load_checkpoint(checkpoint, None)?;
    let scene = load_scene::<f32>(scene_dir)?;
    let stats = load_stats(stats_flag, checkpoint, &scene)?;
    let (_, cm) = eval_scene(&net, &scene, &stats, window)?;
    let report = cm.report();
    print!("{}", report.render());
    if let Some(p) = out {
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(args) => cmd_train(args),
        Command::Eval { checkpoint, scene, stats, window, out } => {
            cmd_eval(&checkpoint, &scene, &stats, window, &out)
        }
        Command::Predict { checkpoint, scene, stats, window, out } => {
            let net: NetworkGraph<f32> = load_checkpoint(&checkpoint, None)?;
            let sc = load_scene::<f32>(&scene)?;
            let st = load_stats(&stats, &checkpoint, &sc)?;
            let labels = predict_scene(&net, &sc, &st, window)?;
            labels.save(&out)?;
            eprintln!("wrote {}x{} label raster", labels.h, labels.w);
            Ok(())
        }
        Command::Synth { out, seed, size, confusability, swir_ambiguity, smoothness } => {
            let seed = seed.or_else(env_seed).unwrap_or(0);
            let cfg = SynthConfig {
                vnir_size: size,
                confusability,
                swir_ambiguity,
                smoothness,
                ..Default::default()
            };
            let mut rng = CounterRng::new(seed);
            let scene = synth_scene::<f32>(&cfg, &mut rng)?;
            save_scene(&scene, &out)?;
            eprintln!("wrote scene to {}", out.display());
            Ok(())
        }
        Command::Resample { scene, band, pixel_size, out } => {
            let sc = load_scene::<f32>(&scene)?;
            let src = if band == "vnir" { &sc.vnir } else { &sc.swir };
            let resampled = nn_resample(src, pixel_size)?;
            resampled.bands.save(&out)?;
            eprintln!(
                "{band}: {}x{} at {} -> {}x{} at {pixel_size}",
                src.height(),
                src.width(),
                src.pixel_size,
                resampled.height(),
                resampled.width()
            );
            Ok(())
        }
        Command::Stats { scene, out } => {
            let sc = load_scene::<f32>(&scene)?;
            let stats = NormStats::compute(&sc)?;
            stats.save(&out)?;
            println!("{}", serde_json::to_string_pretty(&stats).expect("stats serialize"));
            Ok(())
        }
        Command::RfTrain {
            scene,
            out,
            batches,
            trees_per_batch,
            max_depth,
            min_leaf,
            features_per_split,
            seed,
            max_pixels,
        } => {
            let seed = seed.or_else(env_seed).unwrap_or(0);
            let cfg = RfConfig { batches, trees_per_batch, max_depth, min_leaf, features_per_split, seed };
            let rng = CounterRng::new(seed ^ 0x70697865); // pixel-sampling stream
            let mut features = Vec::new();
            let mut labels = Vec::new();
            for (i, dir) in scene.iter().enumerate() {
                let sc = load_scene::<f32>(dir)?;
                let (mut f, mut l) = scene_pixels(&sc, max_pixels, &mut rng.split(i as u64 + 1))?;
                features.append(&mut f);
                labels.append(&mut l);
            }
            let model = train_forest(&features, &labels, &cfg)?;
            if model.degenerate {
                eprintln!("warning: training data held a single class; forest is constant");
            }
            model.save(&out)?;
            eprintln!("trained {} trees on {} pixels", model.trees.len(), features.len());
            Ok(())
        }
        Command::RfPredict { model, scene, out, report } => {
            let forest = ForestModel::load(&model)?;
            let sc = load_scene::<f32>(&scene)?;
            let labels = forest.predict_pixels(&sc.vnir)?;
            labels.save(&out)?;
            if report {
                let mut cm = ConfusionMatrix::new(&fusionseg::data::CLASS_NAMES);
                cm.accumulate(&labels, &sc.labels)?;
                print!("{}", cm.report().render());
            }
            Ok(())
        }
        Command::Verify => cmd_verify(),
    }
}

// ---------------------------------------------------------------------------
// verify: published-table reconstruction + gradient spot-checks

#[derive(Deserialize)]
struct Prf {
    precision: f64,
    recall: f64,
    f1: f64,
}

#[derive(Deserialize)]
struct FixtureExpected {
    clouds: Prf,
    snow: Prf,
    shadows: Prf,
    rest: Prf,
    micro_precision: f64,
    micro_recall: f64,
    avg_f1: f64,
    overall_accuracy: f64,
}

#[derive(Deserialize)]
struct Fixture {
    model: String,
    class_order: Vec<String>,
    column_percent: [[f64; 4]; 4],
    column_totals: [u64; 4],
    expected: FixtureExpected,
}

const FIXTURES: [&str; 4] = [
    include_str!("../fixtures/table5.json"),
    include_str!("../fixtures/table6.json"),
    include_str!("../fixtures/table7.json"),
    include_str!("../fixtures/table8.json"),
];

/// Tolerance for reconstructed metrics, in percentage points.
const METRIC_TOL_PP: f64 = 0.05;

fn check_metric(failures: &mut Vec<String>, model: &str, what: &str, got: Option<f64>, want: f64) {
    match got {
        Some(g) if (100.0 * g - want).abs() <= METRIC_TOL_PP => {}
        Some(g) => failures.push(format!(
            "{model} {what}: reconstructed {:.3}%, published {want:.2}%",
            100.0 * g
        )),
        None => failures.push(format!("{model} {what}: undefined")),
    }
}

fn verify_fixture(text: &str, failures: &mut Vec<String>) {
    let fx: Fixture = serde_json::from_str(text).expect("fixture parses");
    let names: Vec<&str> = fx.class_order.iter().map(|s| s.as_str()).collect();
    let cm = ConfusionMatrix::from_column_percent(&names, &fx.column_percent, &fx.column_totals);
    let report = cm.report();
    let expected = [
        (&fx.expected.clouds, 0usize),
        (&fx.expected.snow, 1),
        (&fx.expected.shadows, 2),
        (&fx.expected.rest, 3),
    ];
    for (want, i) in expected {
        let got = &report.per_class[i];
        check_metric(failures, &fx.model, &format!("{} precision", names[i]), got.precision, want.precision);
        check_metric(failures, &fx.model, &format!("{} recall", names[i]), got.recall, want.recall);
        check_metric(failures, &fx.model, &format!("{} f1", names[i]), got.f1, want.f1);
    }
    check_metric(failures, &fx.model, "micro precision", report.micro_precision, fx.expected.micro_precision);
    check_metric(failures, &fx.model, "micro recall", report.micro_recall, fx.expected.micro_recall);
    check_metric(failures, &fx.model, "avg f1", report.avg_f1, fx.expected.avg_f1);
    check_metric(failures, &fx.model, "overall accuracy", report.overall_accuracy, fx.expected.overall_accuracy);
}

/// Spot-check analytic gradients of a miniature dual-input network against
/// Richardson-extrapolated central differences in f64.
fn verify_gradients(failures: &mut Vec<String>) {
    let step = 1e-6;
    let mut rng = CounterRng::new(97);
    let mut net: NetworkGraph<f64> = build_network("cloudsnet", &mut rng).unwrap();
    let mut vnir = Tensor::zeros(1, 3, 16, 16);
    let mut swir = Tensor::zeros(1, 1, 4, 4);
    for v in vnir.data_mut() {
        *v = rng.uniform(-1.0, 1.0);
    }
    for v in swir.data_mut() {
        *v = rng.uniform(-1.0, 1.0);
    }
    let mut label_data = vec![0u8; 256];
    for l in label_data.iter_mut() {
        *l = rng.below(4) as u8;
    }
    let labels = Labels::new(1, 16, 16, label_data).unwrap();

    let (logits, cache) = net.forward_train(Some(&vnir), Some(&swir)).unwrap();
    let (_, grad_logits) = cross_entropy_loss(&logits, &labels, IGNORE_LABEL, Reduction::Sum).unwrap();
    let grads = net.backward(&cache, &grad_logits).unwrap();

    let mut checked = 0usize;
    let names: Vec<String> = net.params().iter().map(|(n, _, _)| n.clone()).collect();
    for name in names {
        let len = net.params().iter().find(|(n, _, _)| *n == name).unwrap().1.len();
        let idx = 7 % len;
        let eval = |delta: f64| {
            let mut n2 = net.clone();
            for (pname, p) in n2.params_mut() {
                if pname == name {
                    p.data_mut()[idx] += delta;
                }
            }
            let (lg, _) = n2.forward_train(Some(&vnir), Some(&swir)).unwrap();
            let (loss, _) = cross_entropy_loss(&lg, &labels, IGNORE_LABEL, Reduction::Sum).unwrap();
            loss
        };
        let central = |h: f64| (eval(h) - eval(-h)) / (2.0 * h);
        let richardson = |h: f64| (4.0 * central(h) - central(2.0 * h)) / 3.0;
        let coarse = richardson(step);
        let numeric = richardson(step / 2.0);
        let analytic = grads[&name].data()[idx];
        let scale = analytic.abs().max(numeric.abs()).max(1.0);
        // Two disagreeing Richardson estimates mean the stencil straddles a
        // leaky-ReLU kink; such entries are skipped rather than judged.
        if (coarse - numeric).abs() > 1e-5 * scale {
            continue;
        }
        checked += 1;
        if (analytic - numeric).abs() > 1e-4 * scale {
            failures.push(format!("gradient {name}[{idx}]: analytic {analytic:.9}, numeric {numeric:.9}"));
        }
    }
    if checked < 10 {
        failures.push(format!("gradient check: only {checked} smooth entries found"));
    }
}

fn cmd_verify() -> Result<()> {
    let mut failures = Vec::new();
    for text in FIXTURES {
        let before = failures.len();
        verify_fixture(text, &mut failures);
        let fx: Fixture = serde_json::from_str(text).expect("fixture parses");
        println!(
            "confusion-matrix reconstruction [{}]: {}",
            fx.model,
            if failures.len() == before { "pass" } else { "FAIL" }
        );
    }
    let before = failures.len();
    verify_gradients(&mut failures);
    println!(
        "gradient spot-check: {}",
        if failures.len() == before { "pass" } else { "FAIL" }
    );
    if failures.is_empty() {
        println!("verify: all checks passed");
        Ok(())
    } else {
        for f in &failures {
            eprintln!("  {f}");
        }
        Err(Error::NonFinite(format!("{} verification check(s) failed", failures.len())))
    }
}
