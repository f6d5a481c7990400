//! Command-line front end: config-file parsing with overrides, subcommands
//! and the exit-code contract (0 ok, 1 usage or bad input, 2 runtime failure).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data_io::{self, bit_accuracy, load_image_dir, random_message, Dataset, ImageBuffer, Message};
use crate::error::Error;
use crate::robustness::{self, EditKind, SweepTable, DEFAULT_LEVELS};
use crate::trainer::{self, TrainConfig};

/// File written next to every command's outputs; feeding it back through
/// `--config` reproduces the run.
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.txt";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Input(Error),
    #[error(transparent)]
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Input(_) => 1,
            Self::Runtime(_) => 2,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn input<T>(r: crate::Result<T>) -> CliResult<T> {
    r.map_err(CliError::Input)
}

fn runtime<T>(r: crate::Result<T>) -> CliResult<T> {
    r.map_err(CliError::Runtime)
}

/// Evaluation settings shared by `sweep` and `crop-experiment`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub seed: u64,
    pub levels: Vec<f64>,
    pub widths: Vec<usize>,
    pub data_dir: Option<PathBuf>,
    pub max_images: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            levels: DEFAULT_LEVELS.to_vec(),
            widths: vec![0, 2, 4, 6, 8, 10, 12],
            data_dir: None,
            max_images: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// `toy` or `full`; selects the defaults the other keys override.
    pub preset: String,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset("toy").expect("built-in preset")
    }
}

fn bad(key: &str, value: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Usage(format!("bad value `{value}` for `{key}`: {e}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> CliResult<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| bad(key, value, e))
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> CliResult<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn opt_num<T: std::str::FromStr>(key: &str, value: &str) -> CliResult<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if value.is_empty() {
        Ok(None)
    } else {
        num(key, value).map(Some)
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn show_opt<T: ToString>(x: &Option<T>) -> String {
    x.as_ref().map(T::to_string).unwrap_or_default()
}

impl RunConfig {
    pub fn preset(name: &str) -> CliResult<Self> {
        let train = match name {
            "toy" => TrainConfig::toy(),
            "full" => TrainConfig::default(),
            other => return Err(CliError::Usage(format!("unknown preset `{other}` (toy, full)"))),
        };
        Ok(Self {
            preset: name.to_string(),
            train,
            eval: EvalConfig::default(),
        })
    }

    /// Parse `key = value` lines; `#` starts a comment. A `preset` line, if
    /// present, is applied before everything else.
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let preset = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "preset")
            .map(|(_, v)| v.as_str())
            .unwrap_or("toy");
        let mut cfg = Self::preset(preset)?;
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Apply one `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> CliResult<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override `{pair}` is not key=value")))?;
        let (k, v) = (k.trim(), v.trim());
        if k == "preset" {
            return Err(CliError::Usage("preset can only be chosen in the config file".into()));
        }
        self.set(k, v)
    }

    pub fn set(&mut self, key: &str, v: &str) -> CliResult<()> {
        let t = &mut self.train;
        let m = &mut t.model;
        let p = &mut t.perturb;
        match key {
            "model.image_size" => m.image_size = num(key, v)?,
            "model.n_bits" => m.n_bits = num(key, v)?,
            "model.unet_base" => m.unet_base = num(key, v)?,
            "model.decoder_base" => m.decoder_base = num(key, v)?,
            "model.norm" => m.norm.mode = num(key, v)?,
            "model.norm_eps" => m.norm.eps = num(key, v)?,
            "model.norm_affine" => m.norm.affine = num(key, v)?,
            "model.norm_before_decoder_sigmoid" => m.norm.before_decoder_sigmoid = num(key, v)?,
            "model.output_mode" => m.output_mode = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.total_steps" => t.total_steps = num(key, v)?,
            "train.learning_rate" => t.learning_rate = num(key, v)?,
            "train.seed" => t.seed = num(key, v)?,
            "train.grad_clip" => t.grad_clip = num(key, v)?,
            "train.log_every" => t.log_every = num(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = num(key, v)?,
            "train.data_dir" => t.data_dir = opt_path(v),
            "train.max_images" => t.max_images = opt_num(key, v)?,
            "loss.mode" => t.loss_mode = num(key, v)?,
            "loss.perceptual" => t.perceptual = num(key, v)?,
            "loss.lambda_r_max" => t.fixed_weights.lambda_r_max = num(key, v)?,
            "loss.lambda_p_max" => t.fixed_weights.lambda_p_max = num(key, v)?,
            "loss.lambda_m" => t.fixed_weights.lambda_m = num(key, v)?,
            "loss.ramp_start" => t.fixed_weights.ramp_start = num(key, v)?,
            "loss.ramp_end" => t.fixed_weights.ramp_end = num(key, v)?,
            "loss.log_sigma_r" => t.adaptive_init.log_sigma_r = num(key, v)?,
            "loss.log_sigma_p" => t.adaptive_init.log_sigma_p = num(key, v)?,
            "loss.log_sigma_m" => t.adaptive_init.log_sigma_m = num(key, v)?,
            "perturb.enabled" => p.enabled = num(key, v)?,
            "perturb.max_corner_shift" => p.max_corner_shift = num(key, v)?,
            "perturb.blur_kernel" => p.blur_kernel = num(key, v)?,
            "perturb.defocus_sigma_max" => p.defocus_sigma_max = num(key, v)?,
            "perturb.brightness_delta" => p.brightness_delta = num(key, v)?,
            "perturb.contrast_delta" => p.contrast_delta = num(key, v)?,
            "perturb.saturation_delta" => p.saturation_delta = num(key, v)?,
            "perturb.rgb_offset_max" => p.rgb_offset_max = num(key, v)?,
            "perturb.noise_sigma_max" => p.noise_sigma_max = num(key, v)?,
            "perturb.crop_enabled" => p.crop_enabled = num(key, v)?,
            "perturb.crop_area_min" => p.crop_area_range.0 = num(key, v)?,
            "perturb.crop_area_max" => p.crop_area_range.1 = num(key, v)?,
            "perturb.crop_ratio_min" => p.crop_ratio_range.0 = num(key, v)?,
            "perturb.crop_ratio_max" => p.crop_ratio_range.1 = num(key, v)?,
            "perturb.ramp_steps" => p.ramp_steps = num(key, v)?,
            "eval.seed" => self.eval.seed = num(key, v)?,
            "eval.levels" => self.eval.levels = list(key, v)?,
            "eval.widths" => self.eval.widths = list(key, v)?,
            "eval.data_dir" => self.eval.data_dir = opt_path(v),
            "eval.max_images" => self.eval.max_images = opt_num(key, v)?,
            other => return Err(CliError::Usage(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in the order [`Self::set`] lists them.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let m = &t.model;
        let p = &t.perturb;
        let f = &t.fixed_weights;
        let a = &t.adaptive_init;
        vec![
            ("preset", self.preset.clone()),
            ("model.image_size", m.image_size.to_string()),
            ("model.n_bits", m.n_bits.to_string()),
            ("model.unet_base", m.unet_base.to_string()),
            ("model.decoder_base", m.decoder_base.to_string()),
            ("model.norm", m.norm.mode.to_string()),
            ("model.norm_eps", m.norm.eps.to_string()),
            ("model.norm_affine", m.norm.affine.to_string()),
            ("model.norm_before_decoder_sigmoid", m.norm.before_decoder_sigmoid.to_string()),
            ("model.output_mode", m.output_mode.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.total_steps", t.total_steps.to_string()),
            ("train.learning_rate", t.learning_rate.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.grad_clip", t.grad_clip.to_string()),
            ("train.log_every", t.log_every.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("train.data_dir", show_opt(&t.data_dir.as_ref().map(|d| d.display().to_string()))),
            ("train.max_images", show_opt(&t.max_images)),
            ("loss.mode", t.loss_mode.to_string()),
            ("loss.perceptual", t.perceptual.to_string()),
            ("loss.lambda_r_max", f.lambda_r_max.to_string()),
            ("loss.lambda_p_max", f.lambda_p_max.to_string()),
            ("loss.lambda_m", f.lambda_m.to_string()),
            ("loss.ramp_start", f.ramp_start.to_string()),
            ("loss.ramp_end", f.ramp_end.to_string()),
            ("loss.log_sigma_r", a.log_sigma_r.to_string()),
            ("loss.log_sigma_p", a.log_sigma_p.to_string()),
            ("loss.log_sigma_m", a.log_sigma_m.to_string()),
            ("perturb.enabled", p.enabled.to_string()),
            ("perturb.max_corner_shift", p.max_corner_shift.to_string()),
            ("perturb.blur_kernel", p.blur_kernel.to_string()),
            ("perturb.defocus_sigma_max", p.defocus_sigma_max.to_string()),
            ("perturb.brightness_delta", p.brightness_delta.to_string()),
            ("perturb.contrast_delta", p.contrast_delta.to_string()),
            ("perturb.saturation_delta", p.saturation_delta.to_string()),
            ("perturb.rgb_offset_max", p.rgb_offset_max.to_string()),
            ("perturb.noise_sigma_max", p.noise_sigma_max.to_string()),
            ("perturb.crop_enabled", p.crop_enabled.to_string()),
            ("perturb.crop_area_min", p.crop_area_range.0.to_string()),
            ("perturb.crop_area_max", p.crop_area_range.1.to_string()),
            ("perturb.crop_ratio_min", p.crop_ratio_range.0.to_string()),
            ("perturb.crop_ratio_max", p.crop_ratio_range.1.to_string()),
            ("perturb.ramp_steps", p.ramp_steps.to_string()),
            ("eval.seed", self.eval.seed.to_string()),
            ("eval.levels", join(&self.eval.levels)),
            ("eval.widths", join(&self.eval.widths)),
            ("eval.data_dir", show_opt(&self.eval.data_dir.as_ref().map(|d| d.display().to_string()))),
            ("eval.max_images", show_opt(&self.eval.max_images)),
        ]
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn write_resolved(&self, dir: &Path) -> crate::Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.render())?;
        Ok(path)
    }
}

#[derive(Debug, Parser)]
#[command(name = "stegamark", version, about = "Train and evaluate a learned image watermark")]
pub struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for training and evaluation; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from scratch, or continue from a checkpoint.
    Train {
        #[arg(long)]
        total_steps: Option<u64>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Watermark one image.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Bits as a string of 0s and 1s.
        #[arg(long, conflicts_with = "random", required_unless_present = "random")]
        message: Option<String>,
        #[arg(long)]
        random: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Read the bits from one image.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Expected bits; prints the bit accuracy when given.
        #[arg(long)]
        truth: Option<String>,
    },
    /// Accuracy of a dataset under one edit across levels.
    Sweep {
        #[command(flatten)]
        eval: EvalArgs,
        /// Edit name, or `external_dir:<path>`.
        #[arg(long)]
        kind: String,
        /// Comma-separated levels; defaults to `eval.levels`.
        #[arg(long)]
        levels: Option<String>,
    },
    /// Centre crop against black frame over the same widths.
    CropExperiment {
        #[command(flatten)]
        eval: EvalArgs,
        /// Comma-separated pixel widths; defaults to `eval.widths`.
        #[arg(long)]
        widths: Option<String>,
    },
    /// Re-plot existing sweep CSVs.
    Report {
        #[arg(required = true)]
        tables: Vec<PathBuf>,
    },
    /// Write the watermarked dataset and its messages for external editing.
    Export {
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Generate a synthetic image folder.
    SynthData {
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to `eval.data_dir`.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.set_pair(o)?;
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.eval.seed = seed;
    }
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    let mut cfg = resolve(cli)?;
    let out = &cli.out_dir;
    match &cli.command {
        Command::Train {
            total_steps,
            data_dir,
            resume,
        } => {
            if let Some(n) = total_steps {
                cfg.train.total_steps = *n;
            }
            if let Some(d) = data_dir {
                cfg.train.data_dir = Some(d.clone());
            }
            cmd_train(&cfg, resume.as_deref(), out)
        }
        Command::Encode {
            checkpoint,
            image,
            message,
            random,
            out: target,
        } => cmd_encode(&cfg, checkpoint, image, message.as_deref(), *random, target),
        Command::Decode {
            checkpoint,
            image,
            truth,
        } => cmd_decode(checkpoint, image, truth.as_deref()),
        Command::Sweep { eval, kind, levels } => {
            if let Some(l) = levels {
                cfg.eval.levels = list("--levels", l)?;
            }
            let kind: EditKind = kind.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
            cmd_sweep(&cfg, eval, &kind, out)
        }
        Command::CropExperiment { eval, widths } => {
            if let Some(w) = widths {
                cfg.eval.widths = list("--widths", w)?;
            }
            cmd_crop_experiment(&cfg, eval, out)
        }
        Command::Report { tables } => cmd_report(tables, out),
        Command::Export { eval } => cmd_export(&cfg, eval, out),
        Command::SynthData { count, size, out: dir } => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            runtime(data_io::write_synthetic_dataset(dir, *count, (*size, *size), &mut rng))?;
            println!("wrote {count} images to {}", dir.display());
            Ok(())
        }
    }
}

fn load_dataset(dir: Option<&Path>, size: usize, max_images: Option<usize>) -> CliResult<Dataset> {
    let dir = dir.ok_or_else(|| CliError::Usage("no data directory given".into()))?;
    let ds = input(load_image_dir(dir, (size, size)))?;
    Ok(match max_images {
        Some(n) => ds.truncated(n),
        None => ds,
    })
}

fn cmd_train(cfg: &RunConfig, resume: Option<&Path>, out: &Path) -> CliResult<()> {
    input(cfg.train.validate())?;
    let size = cfg.train.model.image_size;
    let ds = load_dataset(cfg.train.data_dir.as_deref(), size, cfg.train.max_images)?;
    runtime(cfg.write_resolved(out))?;
    let state = match resume {
        Some(ckpt) => {
            // Surface unreadable checkpoints as bad input before training starts.
            input(trainer::load_checkpoint(ckpt))?;
            runtime(trainer::resume(ckpt, &ds, out, Some(cfg.train.total_steps)))?
        }
        None => runtime(trainer::train(&cfg.train, &ds, out))?,
    };
    println!(
        "trained {} steps; checkpoint {}",
        state.step,
        out.join(trainer::CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn load_model(checkpoint: &Path) -> CliResult<crate::Model> {
    Ok(input(trainer::load_checkpoint(checkpoint))?.model)
}

fn load_for_model(model: &crate::Model, path: &Path) -> CliResult<ImageBuffer> {
    let size = model.config.image_size;
    let img = input(ImageBuffer::load(path, None))?;
    if (img.height(), img.width()) != (size, size) {
        warn!(
            "{} is {}x{}; resizing to {size}x{size}",
            path.display(),
            img.height(),
            img.width()
        );
        return input(ImageBuffer::load(path, Some((size, size))));
    }
    Ok(img)
}

fn parse_message(bits: &str, n_bits: usize, what: &str) -> CliResult<Message> {
    let msg: Message = bits.parse().map_err(|e: Error| CliError::Usage(format!("{what}: {e}")))?;
    if msg.len() != n_bits {
        return Err(CliError::Usage(format!(
            "{what} has {} bits but the model carries {n_bits}",
            msg.len()
        )));
    }
    Ok(msg)
}

fn cmd_encode(cfg: &RunConfig, checkpoint: &Path, image: &Path, message: Option<&str>, random: bool, target: &Path) -> CliResult<()> {
    let model = load_model(checkpoint)?;
    let n_bits = model.config.n_bits;
    let msg = match (message, random) {
        (Some(bits), false) => parse_message(bits, n_bits, "message")?,
        (None, true) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed);
            runtime(random_message(n_bits, &mut rng))?
        }
        _ => return Err(CliError::Usage("give exactly one of --message or --random".into())),
    };
    let img = load_for_model(&model, image)?;
    let (encoded, _) = runtime(model.encode(&img, &msg))?;
    if let Some(parent) = target.parent().filter(|p| !p.as_os_str().is_empty()) {
        runtime(std::fs::create_dir_all(parent).map_err(Error::from))?;
    }
    runtime(encoded.save_png(target))?;
    println!("{msg}");
    Ok(())
}

fn cmd_decode(checkpoint: &Path, image: &Path, truth: Option<&str>) -> CliResult<()> {
    let model = load_model(checkpoint)?;
    let truth = truth
        .map(|t| parse_message(t, model.config.n_bits, "truth"))
        .transpose()?;
    let img = load_for_model(&model, image)?;
    let decoded = runtime(model.decode(&img))?;
    println!("{decoded}");
    if let Some(t) = truth {
        println!("bit accuracy {:.6}", runtime(bit_accuracy(&decoded, &t))?);
    }
    Ok(())
}

fn eval_inputs(cfg: &RunConfig, args: &EvalArgs) -> CliResult<(crate::Model, Dataset)> {
    let model = load_model(&args.checkpoint)?;
    let dir = args.data_dir.as_deref().or(cfg.eval.data_dir.as_deref());
    let ds = load_dataset(dir, model.config.image_size, cfg.eval.max_images)?;
    Ok((model, ds))
}

fn finish_report(cfg: &RunConfig, tables: &[SweepTable], out: &Path) -> CliResult<()> {
    runtime(cfg.write_resolved(out))?;
    for path in runtime(robustness::emit_report(tables, out))? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig, args: &EvalArgs, kind: &EditKind, out: &Path) -> CliResult<()> {
    let (model, ds) = eval_inputs(cfg, args)?;
    let table = input(robustness::evaluate_sweep(&model, &ds, kind, &cfg.eval.levels, cfg.eval.seed))?;
    finish_report(cfg, &[table], out)
}

fn cmd_crop_experiment(cfg: &RunConfig, args: &EvalArgs, out: &Path) -> CliResult<()> {
    let (model, ds) = eval_inputs(cfg, args)?;
    let table = input(robustness::crop_frame_experiment(&model, &ds, &cfg.eval.widths, cfg.eval.seed))?;
    finish_report(cfg, &[table], out)
}

fn cmd_report(tables: &[PathBuf], out: &Path) -> CliResult<()> {
    let tables = tables
        .iter()
        .map(|p| input(robustness::read_table(p)))
        .collect::<CliResult<Vec<_>>>()?;
    if let Some(t) = tables.iter().find(|t| t.rows.is_empty()) {
        return Err(CliError::Usage(format!("table `{}` has no rows", t.name)));
    }
    for path in runtime(robustness::emit_report(&tables, out))? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_export(cfg: &RunConfig, args: &EvalArgs, out: &Path) -> CliResult<()> {
    let (model, ds) = eval_inputs(cfg, args)?;
    runtime(robustness::export_encoded(&model, &ds, cfg.eval.seed, out))?;
    runtime(cfg.write_resolved(out))?;
    println!("exported {} images to {}", ds.len(), out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_applies_preset_then_keys() {
        let cfg = RunConfig::parse(
            "# comment\ntrain.total_steps = 7\npreset = full\nmodel.norm = none  # trailing\neval.levels = 0, 0.5,1\n",
        )
        .unwrap();
        assert_eq!(cfg.preset, "full");
        assert_eq!(cfg.train.total_steps, 7);
        assert_eq!(cfg.train.model.image_size, 400);
        assert_eq!(cfg.train.model.norm.mode, crate::nn::NormMode::None);
        assert_eq!(cfg.eval.levels, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("train.total_stepz = 5\n").unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("train.total_stepz"));
        assert!(RunConfig::parse("just words\n").is_err());
        assert!(RunConfig::parse("train.batch_size = many\n").is_err());
        assert!(RunConfig::parse("preset = huge\n").is_err());
    }

    #[test]
    fn rendered_config_parses_back_identically() {
        let mut cfg = RunConfig::default();
        cfg.set_pair("train.learning_rate=0.00037").unwrap();
        cfg.set_pair("train.data_dir=/tmp/some dir").unwrap();
        cfg.set_pair("eval.widths=0,3").unwrap();
        cfg.set_pair("loss.mode=fixed").unwrap();
        cfg.set_pair("model.output_mode=additive").unwrap();
        cfg.train.adaptive_init.log_sigma_r = std::f64::consts::LN_10 / 2.0;
        assert_eq!(RunConfig::parse(&cfg.render()).unwrap(), cfg);
        let full = RunConfig::preset("full").unwrap();
        assert_eq!(RunConfig::parse(&full.render()).unwrap(), full);
    }

    #[test]
    fn every_entry_key_is_settable() {
        let cfg = RunConfig::default();
        let mut copy = RunConfig::default();
        for (k, v) in cfg.entries().into_iter().filter(|(k, _)| *k != "preset") {
            copy.set(k, &v).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
        assert_eq!(copy, cfg);
    }

    #[test]
    fn flag_errors_exit_one() {
        assert_eq!(run(["stegamark", "frobnicate"]), 1);
        assert_eq!(run(["stegamark", "decode"]), 1);
        assert_eq!(run(["stegamark", "--help"]), 0);
    }
}
