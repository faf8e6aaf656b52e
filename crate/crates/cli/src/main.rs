//! Command-line front end: data generation, training, evaluation, inference,
//! analyses and benchmarking.
//!
//! Exit codes: 0 success, 1 invalid input (flags, configs, manifests, file
//! contents), 2 runtime failure.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use segmenter::eval::{
    attention_distance, benchmark, class_embedding_projection, evaluate, multiscale_predict,
    predict_sliding, InferenceConfig, SizeBand, SizeBands,
};
use segmenter::image::Sample;
use segmenter::io::checkpoint::{
    load_checkpoint, load_trainer, save_checkpoint, save_trainer, state_path, Archive,
};
use segmenter::io::config::{model_config_text, parse_config, train_config_text};
use segmenter::io::manifest::DatasetManifest;
use segmenter::io::netpbm::{read_image_ppm, write_labels_pgm};
use segmenter::io::synthetic::{generate_synthetic, SyntheticSpec};
use segmenter::train::Trainer;
use segmenter::{Error, SegmenterModel};

#[derive(Parser, Debug)]
#[command(
    name = "segmenter",
    version,
    about = "Transformer semantic segmentation on small images"
)]
struct Cli {
    /// Seed for every random stream; overrides seeds in config and spec files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Dataset for periodic evaluation (defaults to the training data).
        #[arg(long)]
        val: Option<PathBuf>,
        /// Append metric lines to this file.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Stop after this iteration; the checkpoint can be resumed later.
        #[arg(long)]
        until: Option<usize>,
    },
    /// Compute mIoU of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Average over scales 0.5 to 1.75 and horizontal flips.
        #[arg(long)]
        multiscale: bool,
        /// Also report IoU by object size (small < 32², medium < 96² pixels).
        #[arg(long)]
        size_bands: bool,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Predict a label map for one image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        multiscale: bool,
    },
    /// Attention distances or class-embedding projection, as tab-separated text.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        what: Analysis,
        /// Images for the attention analysis.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Use at most this many images.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Forward-pass throughput at a fixed resolution.
    Bench {
        /// Checkpoint to time; alternatively --config builds an untrained model.
        #[arg(long, conflicts_with = "config", required_unless_present = "config")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// `HxW` or a single side length.
        #[arg(long, value_parser = parse_resolution)]
        resolution: (usize, usize),
        #[arg(long, default_value_t = 10)]
        repeat: usize,
    },
    /// Print a checkpoint's configuration and tensors.
    CheckpointInspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Analysis {
    Attention,
    Classemb,
}

fn parse_resolution(s: &str) -> std::result::Result<(usize, usize), String> {
    let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    let (h, w) = match s.split_once(['x', 'X']) {
        Some((h, w)) => (num(h)?, num(w)?),
        None => (num(s)?, num(s)?),
    };
    if h == 0 || w == 0 {
        return Err("resolution must be positive".into());
    }
    Ok((h, w))
}

/// Bad user input detected by the front end itself.
#[derive(Debug)]
struct Invalid(String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Invalid>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return if e.is_validation() { 1 } else { 2 };
        }
    }
    2
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
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData { spec, out } => gen_data(spec, out, cli.seed),
        Command::Train {
            config,
            data,
            out,
            resume,
            val,
            log,
            until,
        } => train(
            TrainArgs {
                config,
                data,
                out,
                resume: resume.as_deref(),
                val: val.as_deref(),
                log: log.as_deref(),
                until: *until,
            },
            cli.seed,
        ),
        Command::Eval {
            ckpt,
            data,
            multiscale,
            size_bands,
            log,
        } => eval(ckpt, data, *multiscale, *size_bands, log.as_deref()),
        Command::Infer {
            ckpt,
            image,
            out,
            multiscale,
        } => infer(ckpt, image, out, *multiscale),
        Command::Analyze {
            ckpt,
            what,
            data,
            limit,
        } => analyze(ckpt, *what, data.as_deref(), *limit),
        Command::Bench {
            ckpt,
            config,
            resolution,
            repeat,
        } => bench(
            ckpt.as_deref(),
            config.as_deref(),
            *resolution,
            *repeat,
            cli.seed,
        ),
        Command::CheckpointInspect { ckpt } => inspect(ckpt),
    }
}

fn print_block(title: &str, text: &str) {
    println!("# {title}");
    for line in text.lines() {
        println!("#   {line}");
    }
}

fn spec_text(spec: &SyntheticSpec) -> String {
    let shapes: Vec<String> = spec.shapes.iter().map(ToString::to_string).collect();
    format!(
        "n_images = {}\nheight = {}\nwidth = {}\nnum_classes = {}\nshapes = {}\nnoise_std = {}\nmin_size = {}\n\
         max_size = {}\nmin_objects = {}\nmax_objects = {}\nstripe_width = {}\nsnap = {}\nseed = {}\n",
        spec.n_images,
        spec.height,
        spec.width,
        spec.num_classes,
        shapes.join(", "),
        spec.noise_std,
        spec.min_size,
        spec.max_size,
        spec.min_objects,
        spec.max_objects,
        spec.stripe_width,
        spec.snap,
        spec.seed
    )
}

fn gen_data(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec = SyntheticSpec::read(spec_path)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    print_block("synthetic spec", &spec_text(&spec));
    let manifest = generate_synthetic(&spec, out)?;
    println!(
        "wrote {} image/label pairs and {}",
        manifest.len(),
        out.join("manifest.txt").display()
    );
    Ok(())
}

fn load_dataset(path: &Path, num_classes: usize) -> Result<Vec<Sample>> {
    let manifest = DatasetManifest::read(path)?;
    if manifest.num_classes != num_classes {
        return Err(invalid(format!(
            "{} has {} classes but the model predicts {num_classes}",
            path.display(),
            manifest.num_classes
        )));
    }
    let samples = manifest.load_all()?;
    info!("loaded {} samples from {}", samples.len(), path.display());
    Ok(samples)
}

struct MetricsLog(Option<File>);

impl MetricsLog {
    fn open(path: Option<&Path>) -> Result<Self> {
        let file = path
            .map(|p| {
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .with_context(|| format!("opening log {}", p.display()))
            })
            .transpose()?;
        Ok(MetricsLog(file))
    }

    fn line(&mut self, text: &str) -> Result<()> {
        println!("{text}");
        if let Some(f) = &mut self.0 {
            writeln!(f, "{text}").context("writing metrics log")?;
        }
        Ok(())
    }
}

struct TrainArgs<'a> {
    config: &'a Path,
    data: &'a Path,
    out: &'a Path,
    resume: Option<&'a Path>,
    val: Option<&'a Path>,
    log: Option<&'a Path>,
    until: Option<usize>,
}

fn train(args: TrainArgs<'_>, seed: Option<u64>) -> Result<()> {
    let TrainArgs {
        config,
        data,
        out,
        resume,
        val,
        log,
        until,
    } = args;
    let (model_cfg, mut train_cfg) = parse_config(config)?;
    if let Some(s) = seed {
        train_cfg.seed = s;
    }
    print_block("model", &model_config_text(&model_cfg));
    print_block("training", &train_config_text(&train_cfg));
    let samples = load_dataset(data, model_cfg.num_classes())?;
    let val_samples = match val {
        Some(v) => Some(load_dataset(v, model_cfg.num_classes())?),
        None => None,
    };
    let mut trainer = match resume {
        Some(path) => {
            let mut t = load_trainer(path)?;
            if t.model.config != model_cfg {
                return Err(invalid(format!(
                    "{} was trained with a different model configuration than {}",
                    path.display(),
                    config.display()
                )));
            }
            if t.iteration > train_cfg.iterations {
                return Err(invalid(format!(
                    "{} is at iteration {}, past the configured {} iterations",
                    path.display(),
                    t.iteration,
                    train_cfg.iterations
                )));
            }
            t.optimizer.momentum = train_cfg.momentum;
            t.config = train_cfg.clone();
            println!(
                "# resuming from {} at iteration {}",
                path.display(),
                t.iteration
            );
            t
        }
        None => Trainer::new(
            SegmenterModel::new(model_cfg, train_cfg.seed)?,
            train_cfg.clone(),
        )?,
    };
    let mut metrics = MetricsLog::open(log)?;
    let eval_set = val_samples.as_deref().unwrap_or(&samples);
    let every = train_cfg.eval_every;
    let total = train_cfg.iterations;
    let stop = until.unwrap_or(total).min(total);
    while trainer.iteration < stop {
        let mut line = match trainer.step(&samples) {
            Ok(line) => line,
            Err(e) => {
                if let Error::NonFiniteLoss { .. } = e {
                    // The failing step made no update, so these are the last finite parameters.
                    let diag = out.with_extension("nan.ckpt");
                    save_checkpoint(&trainer.model, &diag)?;
                    eprintln!("diagnostic snapshot: {}", diag.display());
                }
                return Err(e.into());
            }
        };
        if every > 0 && (line.iteration % every == 0 || line.iteration == total) {
            let (cm, _) = evaluate(
                &trainer.model,
                eval_set,
                &InferenceConfig::single_scale(),
                None,
            )?;
            line.miou = Some(cm.iou().miou);
        }
        metrics.line(&line.to_string())?;
    }
    save_trainer(&trainer, out)?;
    println!(
        "wrote {} (training state in {})",
        out.display(),
        state_path(out).display()
    );
    Ok(())
}

fn inference_config(multiscale: bool) -> InferenceConfig {
    if multiscale {
        InferenceConfig::multi_scale()
    } else {
        InferenceConfig::single_scale()
    }
}

fn print_inference(cfg: &InferenceConfig) {
    let scales: Vec<String> = cfg.scales.iter().map(ToString::to_string).collect();
    print_block(
        "inference",
        &format!(
            "scales = {}\nflip = {}\nstride = half window\naveraging = {:?}\n",
            scales.join(", "),
            cfg.flip,
            cfg.averaging
        ),
    );
}

fn fmt_iou(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.4}"))
}

fn eval(
    ckpt: &Path,
    data: &Path,
    multiscale: bool,
    size_bands: bool,
    log: Option<&Path>,
) -> Result<()> {
    let model = load_checkpoint(ckpt)?;
    print_block("model", &model_config_text(&model.config));
    let cfg = inference_config(multiscale);
    print_inference(&cfg);
    let manifest = DatasetManifest::read(data)?;
    let samples = load_dataset(data, model.config.num_classes())?;
    let bands = SizeBands::default();
    let (cm, banded) = evaluate(&model, &samples, &cfg, size_bands.then_some(&bands))?;
    let report = cm.iou();
    let mut out = MetricsLog::open(log)?;
    out.line(&format!("miou\t{:.4}", report.miou))?;
    out.line("class\tname\tiou")?;
    for (k, (iou, name)) in report
        .per_class
        .iter()
        .zip(&manifest.class_names)
        .enumerate()
    {
        out.line(&format!("{k}\t{name}\t{}", fmt_iou(*iou)))?;
    }
    if let Some(banded) = banded {
        out.line("band\tpixels\tmiou")?;
        for (band, cm) in SizeBand::ALL.iter().zip(&banded) {
            let m = (cm.total() > 0).then(|| cm.iou().miou);
            out.line(&format!("{}\t{}\t{}", band.name(), cm.total(), fmt_iou(m)))?;
        }
    }
    Ok(())
}

fn infer(ckpt: &Path, image: &Path, out: &Path, multiscale: bool) -> Result<()> {
    let model = load_checkpoint(ckpt)?;
    print_block("model", &model_config_text(&model.config));
    let cfg = inference_config(multiscale);
    print_inference(&cfg);
    let input = model.normalize(&read_image_ppm(image)?);
    let labels = if multiscale {
        multiscale_predict(&model, &input, &cfg)?
    } else {
        predict_sliding(&model, &input)?
    };
    write_labels_pgm(out, &labels)?;
    println!(
        "wrote {}x{} label map to {}",
        labels.width,
        labels.height,
        out.display()
    );
    Ok(())
}

fn analyze(ckpt: &Path, what: Analysis, data: Option<&Path>, limit: Option<usize>) -> Result<()> {
    let model = load_checkpoint(ckpt)?;
    print_block("model", &model_config_text(&model.config));
    match what {
        Analysis::Attention => {
            let data = data.ok_or_else(|| invalid("analyze attention needs --data"))?;
            let mut samples = load_dataset(data, model.config.num_classes())?;
            if let Some(n) = limit {
                samples.truncate(n);
            }
            if samples.is_empty() {
                return Err(invalid("no images to analyze"));
            }
            // Images of other sizes go through a copy with resampled position embeddings.
            let cfg = &model.config.encoder;
            let mut sums = vec![vec![0.0; cfg.heads]; cfg.depth];
            for s in &samples {
                let size = (s.image.height, s.image.width);
                let sized = if size == model.config.crop_size() {
                    model.clone()
                } else {
                    model.resized(size)?
                };
                let dist = attention_distance(&sized, &[sized.normalize(&s.image)])?;
                for (acc, layer) in sums.iter_mut().zip(dist) {
                    for (a, v) in acc.iter_mut().zip(layer) {
                        *a += v;
                    }
                }
            }
            println!("layer\thead\tmean_distance_px");
            for (l, heads) in sums.iter().enumerate() {
                for (h, v) in heads.iter().enumerate() {
                    println!("{l}\t{h}\t{:.4}", v / samples.len() as f64);
                }
            }
        }
        Analysis::Classemb => {
            let p = class_embedding_projection(&model)?;
            let names = match data {
                Some(d) => DatasetManifest::read(d)?.class_names,
                None => (0..model.config.num_classes())
                    .map(|k| format!("class{k}"))
                    .collect(),
            };
            println!(
                "# singular values {:.6} {:.6}",
                p.singular_values[0], p.singular_values[1]
            );
            println!("class\tname\tx\ty");
            for (k, (c, name)) in p.coords.iter().zip(&names).enumerate() {
                println!("{k}\t{name}\t{:.6}\t{:.6}", c[0], c[1]);
            }
        }
    }
    Ok(())
}

fn bench(
    ckpt: Option<&Path>,
    config: Option<&Path>,
    resolution: (usize, usize),
    repeat: usize,
    seed: Option<u64>,
) -> Result<()> {
    let model: SegmenterModel<f32> = match (ckpt, config) {
        (Some(c), _) => load_checkpoint(c)?,
        (None, Some(cfg)) => {
            let (m, t) = parse_config(cfg)?;
            SegmenterModel::new(m, seed.unwrap_or(t.seed))?
        }
        (None, None) => return Err(invalid("bench needs --ckpt or --config")),
    };
    print_block("model", &model_config_text(&model.config));
    let parallel = std::thread::available_parallelism().map_or(1, |n| n.get());
    println!("mode\tworkers\tresolution\trepeat\timages_per_sec");
    for (mode, workers) in [("reference", 1), ("max-parallel", parallel)] {
        let t = benchmark(&model, resolution, repeat, workers)?;
        println!(
            "{mode}\t{workers}\t{}x{}\t{repeat}\t{:.3}",
            resolution.0, resolution.1, t.images_per_sec
        );
    }
    Ok(())
}

fn inspect(ckpt: &Path) -> Result<()> {
    let archive = Archive::read(ckpt)?;
    let model = load_checkpoint(ckpt)?;
    print_block("model", &archive.config_text);
    println!("name\tshape\telements");
    for (name, t) in &archive.tensors {
        let shape: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
        println!("{name}\t{}\t{}", shape.join("x"), t.numel());
    }
    println!(
        "# {} tensors, {} parameters",
        archive.tensors.len(),
        model.num_params()
    );
    let state = state_path(ckpt);
    if state.exists() {
        let s = Archive::read(&state)?;
        print_block("training state", &s.config_text);
    }
    Ok(())
}
