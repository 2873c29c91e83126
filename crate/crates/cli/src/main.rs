//! `imgt`: train, evaluate, sample and inspect image transformers.
//!
//! Exit codes: 0 ok, 2 usage, 3 I/O, 4 format or config/checkpoint
//! mismatch, 5 failed numeric check.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use imgt::blocks::build_mask;
use imgt::generate::{complete, generate, superres, SamplerConfig};
use imgt::io::{load_checkpoint, load_dataset, pack_dir, parse_config, read_ppm, save_checkpoint, write_dataset, write_pgm, write_ppm};
use imgt::model::Mode;
use imgt::train::{check_model_gradients, evaluate, train, Sample};
use imgt::{Error, Example, Image, Model32, Model64, ModelConfig, Rng};

#[derive(Parser)]
#[command(name = "imgt", version, about = "Autoregressive image transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config on a packed dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print mean bits/dim of a checkpoint on a packed dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Write `n` sampled images as PPMs into a directory.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep the first `prefix` generation ranks of an image, sample the rest.
    Complete {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        prefix: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample a high-resolution image conditioned on a low-resolution one.
    Superres {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        low: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one block's decoder mask as a graymap: one row per query,
    /// the start slot as the leftmost column, white where permitted.
    InspectMask {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        block: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the training loss of a randomly
    /// initialised 64-bit model.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 200)]
        coords: usize,
    },
    /// Pack a directory of same-sized PPMs into a dataset file.
    Pack {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

const GRADCHECK_TOLERANCE: f64 = 1e-4;

enum Failure {
    Usage(String),
    Lib(Error),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Numeric(_) => 5,
            Failure::Lib(e) => match e {
                Error::Io(_) => 3,
                Error::Config(_)
                | Error::UnknownKey(_)
                | Error::Format(_)
                | Error::CheckpointMismatch { .. }
                | Error::ShapeMismatch { .. }
                | Error::InvalidShape { .. } => 4,
                Error::NonFinite(_) | Error::NonScalarLoss(_) => 5,
                Error::InvalidArgument(_) | Error::IndexOutOfRange { .. } => 2,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) | Failure::Numeric(m) => m.clone(),
            Failure::Lib(e) => e.to_string(),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("imgt: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Train { config, data, out, steps, seed } => {
            let mut run = parse_config(&read_text(&config)?)?;
            if let Some(s) = steps {
                run.train.steps = s;
            }
            if let Some(s) = seed {
                run.train.seed = s;
            }
            let samples = samples_for(&run.model, load_dataset(&data)?)?;
            let mut model = Model32::build(run.model, &mut Rng::new(run.train.seed))?;
            train(&mut model, &samples, &run.train, |m| println!("{m}"))?;
            save_checkpoint(&out, &model)?;
        }
        Command::Eval { ckpt, data } => {
            let model: Model32 = load_checkpoint(&ckpt)?;
            let samples = samples_for(model.config(), load_dataset(&data)?)?;
            println!("{:.4}", evaluate(&model, &samples)?);
        }
        Command::Sample { ckpt, n, temperature, seed, class, out } => {
            let model: Model32 = load_checkpoint(&ckpt)?;
            if model.config().mode == Mode::EncoderDecoder {
                return Err(Failure::Usage("encoder-decoder checkpoints sample through `superres`".into()));
            }
            fs::create_dir_all(&out).map_err(Error::from)?;
            for i in 0..n {
                let cfg = SamplerConfig::new(temperature, Rng::new(seed).split(i as u64).next_u64());
                let img = generate(&model, &cfg, class, None)?;
                write_ppm(out.join(format!("sample_{i:04}.ppm")), &img)?;
            }
        }
        Command::Complete { ckpt, image, prefix, temperature, seed, class, out } => {
            let model: Model32 = load_checkpoint(&ckpt)?;
            let partial = read_ppm(&image)?;
            check_dims(model.config(), &partial)?;
            let img = complete(&model, &partial, prefix, &SamplerConfig::new(temperature, seed), class, None)?;
            write_ppm(&out, &img)?;
        }
        Command::Superres { ckpt, low, temperature, seed, out } => {
            let model: Model32 = load_checkpoint(&ckpt)?;
            let low = read_ppm(&low)?;
            let c = model.config();
            if low.dims() != (c.source_height, c.source_width) {
                return Err(mismatch(&low, c.source_height, c.source_width));
            }
            write_ppm(&out, &superres(&model, &low, &SamplerConfig::new(temperature, seed))?)?;
        }
        Command::InspectMask { config, block, out } => {
            let cfg = parse_config(&read_text(&config)?)?.model;
            let plan = cfg.plan()?;
            let mask = build_mask(&plan, block, false)?;
            let rows = plan.blocks[block].query.len();
            let width = mask.cols + 1;
            let mut pixels = Vec::with_capacity(rows * width);
            for i in 0..rows {
                pixels.push(shade(mask.start[i]));
                pixels.extend((0..mask.cols).map(|j| shade(mask.get(i, j))));
            }
            write_pgm(&out, width, rows, &pixels)?;
        }
        Command::Gradcheck { config, coords } => {
            let run = parse_config(&read_text(&config)?)?;
            let mut rng = Rng::new(run.train.seed);
            let model = Model64::build(run.model, &mut rng)?;
            let c = model.config();
            let image = Image::random(c.height, c.width, &mut rng);
            let source = Image::random(c.source_height, c.source_width, &mut rng);
            let example = Example {
                image: &image,
                class: c.n_classes.map(|n| rng.below(n as u64) as usize),
                source: (c.mode == Mode::EncoderDecoder).then_some(&source),
            };
            let (report, names) = check_model_gradients(&model, &[example], coords, &mut rng)?;
            let worst = report.worst().ok_or_else(|| Failure::Numeric("no coordinates were checked".into()))?;
            println!(
                "max_rel_error={:.3e} coords={} kink_rejected={} worst={}[{}]",
                report.max_rel_error(),
                report.checks.len(),
                report.rejected,
                names[worst.tensor],
                worst.index
            );
            if report.max_rel_error() >= GRADCHECK_TOLERANCE {
                return Err(Failure::Numeric(format!("relative error above {GRADCHECK_TOLERANCE:e}")));
            }
        }
        Command::Pack { dir, out } => {
            let images = pack_dir(&dir)?;
            write_dataset(&out, &images)?;
            println!("packed {} images", images.len());
        }
    }
    Ok(())
}

fn shade(permitted: bool) -> u8 {
    if permitted {
        255
    } else {
        0
    }
}

fn read_text(path: &Path) -> std::result::Result<String, Failure> {
    Ok(fs::read_to_string(path).map_err(Error::from)?)
}

fn mismatch(img: &Image, h: usize, w: usize) -> Failure {
    Failure::Lib(Error::Format(format!(
        "image is {}x{}, model expects {h}x{w}",
        img.height(),
        img.width()
    )))
}

fn check_dims(cfg: &ModelConfig, img: &Image) -> Outcome {
    if img.dims() != (cfg.height, cfg.width) {
        return Err(mismatch(img, cfg.height, cfg.width));
    }
    Ok(())
}

/// Training samples for `cfg`. Encoder-decoder models get their source by
/// box-downsampling each target to the configured source size.
fn samples_for(cfg: &ModelConfig, images: Vec<Image>) -> std::result::Result<Vec<Sample>, Failure> {
    let factor = cfg.height / cfg.source_height.max(1);
    images
        .into_iter()
        .map(|img| {
            check_dims(cfg, &img)?;
            let mut s = Sample::new(img);
            if cfg.mode == Mode::EncoderDecoder {
                if factor * cfg.source_height != cfg.height || factor * cfg.source_width != cfg.width {
                    return Err(Failure::Lib(Error::Config(
                        "target size must be an integer multiple of the source size".into(),
                    )));
                }
                s.source = Some(s.image.downsample_box(factor)?);
            }
            Ok(s)
        })
        .collect()
}
