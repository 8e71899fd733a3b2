use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use fsrcnn::data::{self, ImageY, TilingOptions, TrainingSet};
use fsrcnn::eval::{self, EvalOptions, ScatterPoint, Upscaler};
use fsrcnn::model::{self, ArchKind, ArchitectureSpec, InitPolicy, Model};
use fsrcnn::training::{self, TrainConfig, TrainReport};

#[derive(Parser)]
#[command(name = "fsrcnn", version, about = "Fast super-resolution CNN: training, inference, evaluation")]
struct Cli {
    /// Seed for every source of randomness.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "FSRCNN_THREADS")]
    threads: Option<usize>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter count and cost of an architecture.
    Params {
        /// fsrcnn:d,s,m | srcnn:915 | srcnn:955 | transition:1 | transition:2
        arch: String,
        #[arg(long, default_value_t = 3)]
        scale: usize,
    },
    /// Cut training pairs from a directory of images and write the index.
    Prepare {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        scale: usize,
        #[command(flatten)]
        tiling: TilingArgs,
        /// Where to write the pair index.
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train a network from scratch.
    Train {
        #[arg(long)]
        arch: String,
        #[arg(long)]
        scale: usize,
        #[arg(long)]
        images: PathBuf,
        /// Extra images added once validation PSNR saturates.
        #[arg(long)]
        extra: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        #[command(flatten)]
        tiling: TilingArgs,
        #[command(flatten)]
        opt: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reuse the convolution layers of an FSRCNN model at another scale and
    /// train only the deconvolution layer.
    Finetune {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        scale: usize,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[command(flatten)]
        tiling: TilingArgs,
        #[command(flatten)]
        opt: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Upscale one image.
    Upscale {
        /// Weight file, or `bicubic`.
        #[arg(long)]
        model: String,
        /// Needed with `--model bicubic`.
        #[arg(long)]
        scale: Option<usize>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Mean luminance PSNR over a directory of ground-truth images.
    Eval {
        /// Weight files and/or `bicubic` (repeatable).
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        #[arg(long)]
        scale: Option<usize>,
        #[arg(long)]
        images: PathBuf,
        /// Score the unrounded output instead of 8-bit levels.
        #[arg(long)]
        no_quantize: bool,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Parameters / time / PSNR per model.
        #[arg(long)]
        scatter: Option<PathBuf>,
    },
    /// Time full-image inference on random inputs.
    Bench {
        /// Architectures (randomly initialised) to time (repeatable).
        #[arg(long = "arch")]
        archs: Vec<String>,
        /// Weight files to time (repeatable).
        #[arg(long = "model")]
        models: Vec<PathBuf>,
        #[arg(long, default_value_t = 3)]
        scale: usize,
        /// LR sizes as HxW, comma separated.
        #[arg(long, default_value = "64x64,128x128,192x192,256x256")]
        sizes: String,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Args, Clone, Copy)]
struct TilingArgs {
    /// Cropping stride on the LR image (default: the sub-image size).
    #[arg(long)]
    stride: Option<usize>,
    /// Add 0.9..0.6 downscaled and rotated copies of every image.
    #[arg(long)]
    augment: bool,
}

#[derive(Args, Clone, Copy)]
struct TrainArgs {
    #[arg(long, default_value_t = 10_000)]
    iterations: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Default: the standard 1e-3 rescaled to the per-pixel mean loss.
    #[arg(long)]
    lr_conv: Option<f32>,
    /// Default: the standard 1e-4 rescaled to the per-pixel mean loss.
    #[arg(long)]
    lr_deconv: Option<f32>,
    #[arg(long, default_value_t = 0.9)]
    momentum: f32,
    #[arg(long, default_value_t = 500)]
    eval_every: usize,
    /// Evaluations in the saturation window.
    #[arg(long, default_value_t = 5)]
    window: usize,
    /// Keep learning rates when fine-tuning instead of halving them.
    #[arg(long)]
    no_halving: bool,
}

impl TrainArgs {
    fn config(&self, scale: usize, seed: u64) -> TrainConfig {
        let base = TrainConfig::pixel_mean_equivalent(scale);
        TrainConfig {
            lr_conv: self.lr_conv.unwrap_or(base.lr_conv),
            lr_deconv: self.lr_deconv.unwrap_or(base.lr_deconv),
            momentum: self.momentum,
            batch_size: self.batch,
            max_iterations: self.iterations,
            eval_every: self.eval_every,
            rng_seed: seed,
            saturation_window: self.window,
            finetune_halving: !self.no_halving,
            ..base
        }
    }
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<fsrcnn::Error>() {
            Some(e) if e.is_environmental() => 1,
            Some(fsrcnn::Error::Format { .. } | fsrcnn::Error::Diverged { .. }) => 1,
            Some(_) => 2,
            None if error.downcast_ref::<std::io::Error>().is_some() => 1,
            None => 2,
        };
        Failure { code, error }
    }
}

impl From<fsrcnn::Error> for Failure {
    fn from(e: fsrcnn::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn usage(msg: String) -> Failure {
    Failure {
        code: 2,
        error: anyhow::anyhow!(msg),
    }
}

fn require_dir(path: &Path) -> Result<(), Failure> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            error: anyhow::anyhow!("{}: no such directory", path.display()),
        })
    }
}

fn load_images(dir: &Path) -> Result<Vec<ImageY>, Failure> {
    require_dir(dir)?;
    let images = data::load_dir(dir)?;
    if images.is_empty() {
        return Err(Failure {
            code: 1,
            error: anyhow::anyhow!("{}: no images found", dir.display()),
        });
    }
    log::info!("{}: {} images", dir.display(), images.len());
    Ok(images)
}

fn pairs(
    dir: &Path,
    scale: usize,
    tiling: &TilingArgs,
    interpolated: bool,
) -> Result<TrainingSet, Failure> {
    let images = load_images(dir)?;
    let opts = TilingOptions {
        stride: tiling.stride,
        augment: tiling.augment,
        interpolated_input: interpolated,
    };
    let set = data::make_training_set(&images, scale, &opts)?;
    if set.is_empty() {
        return Err(usage(format!(
            "{}: no image is large enough for x{scale} training pairs",
            dir.display()
        )));
    }
    log::info!("{} training pairs at x{scale}", set.len());
    Ok(set)
}

fn optional_images(dir: &Option<PathBuf>) -> Result<Vec<ImageY>, Failure> {
    dir.as_deref().map_or(Ok(Vec::new()), load_images)
}

fn save_outputs(model: &Model, report: &TrainReport, out: &Path) -> Result<(), Failure> {
    model.save(out)?;
    let mut csv = out.as_os_str().to_owned();
    csv.push(".csv");
    report.write_csv(PathBuf::from(csv))?;
    println!(
        "{}: {} after {} iterations, best validation {} at iteration {}, crc {:08x}",
        out.display(),
        model.spec(),
        report.iterations(),
        report
            .best_psnr
            .map_or("n/a".to_string(), |p| format!("{p:.3} dB")),
        report.best_iteration,
        report.checksum
    );
    Ok(())
}

enum Loaded {
    Bicubic(usize),
    Net(Model),
}

fn load_upscaler(name: &str, scale: Option<usize>) -> Result<Loaded, Failure> {
    if name.eq_ignore_ascii_case("bicubic") {
        let n = scale.ok_or_else(|| usage("--scale is required for bicubic".into()))?;
        if !(2..=4).contains(&n) {
            return Err(usage(format!("unsupported scale {n}")));
        }
        return Ok(Loaded::Bicubic(n));
    }
    let m = Model::load(name).with_context(|| format!("loading {name}"))?;
    if let Some(n) = scale {
        if n != m.scale() {
            return Err(usage(format!("{name} is a x{} model, --scale {n} given", m.scale())));
        }
    }
    Ok(Loaded::Net(m))
}

impl Loaded {
    fn upscaler(&self) -> Upscaler<'_> {
        match self {
            Loaded::Bicubic(n) => Upscaler::Bicubic { scale: *n },
            Loaded::Net(m) => Upscaler::Model(m),
        }
    }
}

fn parse_sizes(s: &str) -> Result<Vec<(usize, usize)>, Failure> {
    s.split(',')
        .map(|p| {
            let (h, w) = p
                .trim()
                .split_once(['x', 'X'])
                .ok_or_else(|| usage(format!("bad size `{p}`, expected HxW")))?;
            let parse = |v: &str| {
                v.parse::<usize>()
                    .ok()
                    .filter(|&v| v > 0)
                    .ok_or_else(|| usage(format!("bad size `{p}`")))
            };
            Ok((parse(h)?, parse(w)?))
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), Failure> {
    let seed = cli.seed;
    match cli.command {
        Command::Params { arch, scale } => {
            let spec = ArchitectureSpec::parse(&arch, scale)?;
            let ex = ArchitectureSpec::named(ArchKind::SrcnnEx955, scale)?;
            println!("architecture: {spec} (x{scale})");
            println!("parameters (weights only): {}", model::count_parameters(&spec, false));
            println!("parameters (with biases and PReLU): {}", model::count_parameters(&spec, true));
            println!("multiply-adds per LR pixel: {}", model::estimate_cost(&spec, 1));
            println!("speedup over srcnn:955: {:.1}x", model::speedup(&ex, &spec));
        }
        Command::Prepare {
            images,
            scale,
            tiling,
            manifest,
        } => {
            let set = pairs(&images, scale, &tiling, false)?;
            set.write_manifest(&manifest)?;
            let p = &set.pairs[0];
            println!(
                "{} pairs (LR {}x{}, HR {}x{}) written to {}",
                set.len(),
                p.lr.height(),
                p.lr.width(),
                p.hr.height(),
                p.hr.width(),
                manifest.display()
            );
        }
        Command::Train {
            arch,
            scale,
            images,
            extra,
            val,
            tiling,
            opt,
            out,
        } => {
            let spec = ArchitectureSpec::parse(&arch, scale)?;
            let interpolated = !spec.upsamples_in_network();
            let base = pairs(&images, scale, &tiling, interpolated)?;
            let val = optional_images(&val)?;
            let cfg = opt.config(scale, seed);
            let model = Model::build(spec, &InitPolicy::default(), seed)?;
            let (model, report) = match extra {
                Some(dir) => {
                    let extra = pairs(&dir, scale, &tiling, interpolated)?;
                    training::two_step_schedule(model, &base, &extra, &val, &cfg)?
                }
                None => training::train(model, &base, &val, &cfg)?,
            };
            save_outputs(&model, &report, &out)?;
        }
        Command::Finetune {
            src,
            scale,
            images,
            val,
            tiling,
            opt,
            out,
        } => {
            let src_model = Model::load(&src)?;
            if src_model.spec().kind != ArchKind::Fsrcnn {
                return Err(usage(format!(
                    "{}: only FSRCNN models can be fine-tuned across scales, found {}",
                    src.display(),
                    src_model.spec()
                )));
            }
            let set = pairs(&images, scale, &tiling, false)?;
            let val = optional_images(&val)?;
            let cfg = opt.config(scale, seed);
            let (model, report) = training::finetune_for_scale(&src_model, scale, &set, &val, &cfg)?;
            save_outputs(&model, &report, &out)?;
        }
        Command::Upscale {
            model,
            scale,
            input,
            output,
        } => {
            let up = load_upscaler(&model, scale)?;
            let img = data::load_image(&input)?;
            let result = up.upscaler().upscale(&img)?;
            data::save_image(&result, &output)?;
            println!(
                "{} ({}x{}) -> {} ({}x{})",
                input.display(),
                img.height(),
                img.width(),
                output.display(),
                result.height(),
                result.width()
            );
        }
        Command::Eval {
            models,
            scale,
            images,
            no_quantize,
            csv,
            scatter,
        } => {
            let gt = load_images(&images)?;
            let opts = EvalOptions {
                quantize: !no_quantize,
            };
            let mut results = Vec::new();
            let mut points = Vec::new();
            for name in &models {
                let up = load_upscaler(name, scale)?;
                let r = eval::evaluate(&up.upscaler(), &gt, &opts)?;
                println!("{name}: x{} mean PSNR {:.4} dB over {} images", r.scale, r.mean_psnr, r.images.len());
                if let Loaded::Net(m) = &up {
                    points.push(ScatterPoint::new(m, &r));
                }
                results.push(r);
            }
            if let Some(path) = csv {
                eval::write_text(path, &eval::eval_csv(&results))?;
            }
            if let Some(path) = scatter {
                eval::write_text(path, &eval::scatter_csv(&points))?;
            }
        }
        Command::Bench {
            archs,
            models,
            scale,
            sizes,
            repeats,
            csv,
        } => {
            if archs.is_empty() && models.is_empty() {
                return Err(usage("give at least one --arch or --model".into()));
            }
            let sizes = parse_sizes(&sizes)?;
            let mut nets = Vec::new();
            for a in &archs {
                let spec = ArchitectureSpec::parse(a, scale)?;
                nets.push(Model::build(spec, &InitPolicy::default(), seed)?);
            }
            for m in &models {
                nets.push(Model::load(m)?);
            }
            let mut results = Vec::new();
            for net in &nets {
                for &(h, w) in &sizes {
                    let r = eval::bench(net, h, w, repeats, seed)?;
                    println!(
                        "{} x{} {h}x{w}: {:.3} ms, {:.2} fps, {:.2} GMAC/s",
                        r.model,
                        r.scale,
                        r.median_seconds * 1e3,
                        r.fps,
                        r.gmacs_per_second
                    );
                    results.push(r);
                }
            }
            if let Some(path) = csv {
                eval::write_text(path, &eval::bench_csv(&results))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
