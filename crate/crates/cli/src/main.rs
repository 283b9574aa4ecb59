mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Args, Command, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use normgen::dataset::shapes::{random_specs, read_specs, PrimitiveFamily};
use normgen::dataset::{build_dataset, BuildOptions, DatasetManifest, Split};
use normgen::evaluation::{evaluate_run, MethodDir};
use normgen::geometry::{
    decode_normals, estimate_curvature, load_gray, sample_hints_with, save_gray, threshold_band, BinaryMask,
    NormalMapImage, DEFAULT_KEEP_PROB, DEFAULT_T_HI, DEFAULT_T_LO,
};
use normgen::model::checkpoint::load_generator;
use normgen::model::Generator;
use normgen::training::{train, CONFIG_KEYS};
use normgen::Error;

use config::{keys_help, RunConfig, EFFECTIVE_CONFIG_FILE, SEED_ENV};

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 3;
const EXIT_INPUT: u8 = 4;
const EXIT_DATA: u8 = 5;
const EXIT_CHECKPOINT: u8 = 6;
const EXIT_NONFINITE: u8 = 7;
const EXIT_EVAL: u8 = 8;

const EXIT_CODES_HELP: &str = "Exit codes:
  0  success
  1  other failure (e.g. writing outputs)
  2  bad command line
  3  invalid configuration or config file
  4  missing or unreadable input file
  5  invalid shape spec, image content or sampling parameter
  6  bad or incompatible checkpoint
  7  training aborted on a non-finite loss
  8  evaluation failed (missing generated images, empty foreground)";

#[derive(Parser, Debug)]
#[command(name = "normgen", version, about = "Sketch-to-normal-map generation with curvature point hints")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Render synthetic shapes into sketch/normal/mask pairs.
    Dataset(DatasetArgs),
    /// Sample curvature-band point hints for one normal map.
    Mask(MaskArgs),
    /// Train the generator and critic on a dataset.
    Train(TrainArgs),
    /// Generate normal maps from sketches.
    Infer(InferArgs),
    /// Score generated normal maps against ground truth.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Family {
    Sphere,
    Torus,
    Capsule,
    Union,
}

impl From<Family> for PrimitiveFamily {
    fn from(f: Family) -> Self {
        match f {
            Family::Sphere => PrimitiveFamily::Sphere,
            Family::Torus => PrimitiveFamily::Torus,
            Family::Capsule => PrimitiveFamily::Capsule,
            Family::Union => PrimitiveFamily::SphereUnion,
        }
    }
}

#[derive(Args, Debug)]
struct DatasetArgs {
    /// Shape spec file, one shape per line.
    #[arg(long, conflicts_with = "random", required_unless_present = "random")]
    specs: Option<PathBuf>,
    /// Draw this many random shapes instead of reading a spec file.
    #[arg(long)]
    random: Option<usize>,
    /// Families cycled through by --random.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "sphere,torus,capsule,union")]
    families: Vec<Family>,
    /// Image side for specs that do not set one.
    #[arg(long, default_value_t = 64)]
    size: u32,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_KEEP_PROB)]
    keep_prob: f64,
    /// Every N-th pair goes to the validation split (0 = none).
    #[arg(long, default_value_t = 4)]
    val_every: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MaskArgs {
    /// Ground-truth normal map PNG.
    #[arg(long)]
    normal: PathBuf,
    /// Hint mask PNG to write (a `.txt` sidecar is written beside it).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_KEEP_PROB)]
    keep_prob: f64,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_T_HI)]
    t_hi: u8,
    #[arg(long, default_value_t = DEFAULT_T_LO)]
    t_lo: u8,
    /// Also write the curvature image.
    #[arg(long)]
    curvature: Option<PathBuf>,
    /// Also write the band before dropout.
    #[arg(long)]
    band: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset manifest or its directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for losses, checkpoints and the effective config.
    #[arg(long)]
    run: PathBuf,
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print losses every N iterations (0 = quiet).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Checkpoint directory or generator `.nck` file.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Single sketch PNG.
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest", requires = "out")]
    sketch: Option<PathBuf>,
    /// Hint mask PNG for --sketch.
    #[arg(long, conflicts_with_all = ["no_mask", "manifest"])]
    mask: Option<PathBuf>,
    /// Feed an all-zero hint channel.
    #[arg(long)]
    no_mask: bool,
    /// Output PNG for --sketch.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run on every pair of a dataset, using its masks unless --no-mask.
    #[arg(long, requires = "out_dir")]
    manifest: Option<PathBuf>,
    /// train | validation | all
    #[arg(long, default_value = "all")]
    split: String,
    /// Output directory for --manifest; files are named `<id>.png`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Dataset manifest or its directory.
    #[arg(long)]
    manifest: PathBuf,
    /// `NAME=DIR` holding `<id>.png` outputs; repeat to compare methods.
    #[arg(long = "method", required = true)]
    methods: Vec<String>,
    /// train | validation | all
    #[arg(long, default_value = "all")]
    split: String,
    /// Directory for report.tsv and report.txt.
    #[arg(long)]
    out: PathBuf,
    /// Write per-pixel error maps under DIR/<method>/<id>.png.
    #[arg(long)]
    error_maps: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Parse { .. } => EXIT_CONFIG,
            Error::Io { .. } | Error::Image { .. } | Error::MalformedImage(_) | Error::Load { .. } => EXIT_INPUT,
            Error::InvalidShape(_)
            | Error::OutOfFrame { .. }
            | Error::EmptySpecList
            | Error::EmptySketch
            | Error::EmptyForeground
            | Error::InvalidThreshold { .. }
            | Error::InvalidProbability(_)
            | Error::ShapeMismatch(_) => EXIT_DATA,
            Error::Checkpoint { .. } => EXIT_CHECKPOINT,
            Error::NonFinite { .. } => EXIT_NONFINITE,
            Error::MissingGenerated { .. } | Error::UndefinedMetric(_) => EXIT_EVAL,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

type CmdResult = Result<(), Failure>;

fn parse_split(s: &str) -> Result<Option<Split>, Failure> {
    if s == "all" {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|e: String| fail(EXIT_CONFIG, e))
}

fn cmd_dataset(a: &DatasetArgs) -> CmdResult {
    let specs = match (&a.specs, a.random) {
        (Some(path), _) => read_specs(path, a.size)?,
        (None, Some(n)) => {
            let families: Vec<PrimitiveFamily> = a.families.iter().map(|&f| f.into()).collect();
            if families.is_empty() {
                return Err(fail(EXIT_CONFIG, "--families is empty"));
            }
            random_specs(n, a.size, a.seed, &families)
        }
        (None, None) => unreachable!("clap requires one of --specs/--random"),
    };
    let opts = BuildOptions {
        seed: a.seed,
        keep_prob: a.keep_prob,
        validation_every: a.val_every,
    };
    let manifest = build_dataset(&specs, &a.out, &opts)?;
    let val = manifest.ids(Some(Split::Validation)).len();
    println!(
        "wrote {} pairs ({} train, {val} validation) to {}",
        manifest.entries.len(),
        manifest.entries.len() - val,
        manifest.path().display()
    );
    Ok(())
}

fn cmd_mask(a: &MaskArgs) -> CmdResult {
    let nmap = NormalMapImage::load(&a.normal)?;
    let hints = sample_hints_with(&nmap, a.keep_prob, a.seed, a.t_hi, a.t_lo)?;
    let field = decode_normals(&nmap);
    let (band, cmap) = match estimate_curvature(&field) {
        Ok(cmap) => (threshold_band(&cmap, a.t_hi, a.t_lo)?, Some(cmap)),
        Err(Error::EmptyForeground) => (BinaryMask::empty(field.width, field.height), None),
        Err(e) => return Err(e.into()),
    };
    hints.save(&a.out)?;
    if let Some(path) = &a.curvature {
        let img = cmap.map(|c| c.to_image()).unwrap_or_else(|| BinaryMask::empty(field.width, field.height).to_image());
        save_gray(&img, path)?;
    }
    if let Some(path) = &a.band {
        save_gray(&band.to_image(), path)?;
    }
    println!(
        "band {} px, kept {} hints -> {}",
        band.count(),
        hints.count(),
        a.out.display()
    );
    Ok(())
}

/// Flag overrides present on the command line, in `CONFIG_KEYS` order.
fn config_flags(m: &ArgMatches) -> Vec<(&'static str, String)> {
    CONFIG_KEYS
        .iter()
        .filter_map(|(key, _)| m.get_one::<String>(key).map(|v| (*key, v.clone())))
        .collect()
}

fn cmd_train(a: &TrainArgs, m: &ArgMatches) -> CmdResult {
    let env_seed = std::env::var(SEED_ENV).ok();
    let rc = RunConfig::resolve(
        a.data.clone(),
        a.run.clone(),
        a.resume.clone(),
        env_seed.as_deref(),
        a.config.as_deref(),
        &config_flags(m),
    )?;
    let manifest = DatasetManifest::load(&rc.data)?;
    let (w, h) = manifest.validate()?;
    if w != h {
        return Err(fail(EXIT_DATA, format!("images must be square, got {w}x{h}")));
    }
    let gcfg = rc.train.generator_config(w as usize)?;
    fs::create_dir_all(&rc.run_dir).map_err(|e| fail(EXIT_OTHER, format!("{}: {e}", rc.run_dir.display())))?;
    let cfg_path = rc.run_dir.join(EFFECTIVE_CONFIG_FILE);
    fs::write(&cfg_path, rc.render()).map_err(|e| fail(EXIT_OTHER, format!("{}: {e}", cfg_path.display())))?;
    eprintln!(
        "training depth {} base {} on {} pairs at {w}x{h}",
        gcfg.depth,
        gcfg.base_channels,
        manifest.ids(Some(Split::Train)).len()
    );
    let log_every = a.log_every;
    let mut progress = |r: &normgen::training::LossRecord| {
        if log_every > 0 && r.iter % log_every == 0 {
            eprintln!(
                "iter {:>6}  critic {:>10.5}  adv {:>10.5}  l1 {:>8.4}  mask {:>8.4}",
                r.iter, r.critic, r.adv, r.l1, r.mask
            );
        }
    };
    let state = train(&manifest, &gcfg, &rc.train, &rc.run_dir, rc.resume.as_deref(), &mut progress)?;
    println!(
        "finished {} iterations; checkpoint {}",
        state.iteration,
        normgen::training::checkpoint_dir(&rc.run_dir, state.iteration).display()
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Generator<f32>, Failure> {
    let file = if path.is_dir() {
        path.join("generator.nck")
    } else {
        path.to_path_buf()
    };
    if !file.exists() {
        return Err(fail(EXIT_INPUT, format!("{}: no such checkpoint", file.display())));
    }
    Ok(load_generator(&file)?)
}

fn cmd_infer(a: &InferArgs) -> CmdResult {
    if a.sketch.is_some() && a.mask.is_none() && !a.no_mask {
        return Err(fail(EXIT_CONFIG, "pass --mask FILE or --no-mask"));
    }
    let g = load_checkpoint(&a.checkpoint)?;
    if let Some(sketch_path) = &a.sketch {
        let sketch = load_gray(sketch_path)?;
        let mask = match &a.mask {
            Some(p) => Some(BinaryMask::from_image(&load_gray(p)?)),
            None => None,
        };
        let out = a.out.as_ref().expect("clap requires --out");
        g.generate(&sketch, mask.as_ref())?.save(out)?;
        println!("wrote {}", out.display());
        return Ok(());
    }
    let manifest = DatasetManifest::load(a.manifest.as_ref().expect("clap requires --sketch or --manifest"))?;
    let out_dir = a.out_dir.as_ref().expect("clap requires --out-dir");
    fs::create_dir_all(out_dir).map_err(|e| fail(EXIT_OTHER, format!("{}: {e}", out_dir.display())))?;
    let ids = manifest.ids(parse_split(&a.split)?);
    for id in &ids {
        let entry = manifest.entry(id).expect("id from manifest");
        let sketch = load_gray(&manifest.resolve(&entry.sketch))?;
        let mask = if a.no_mask {
            None
        } else {
            Some(BinaryMask::from_image(&load_gray(&manifest.resolve(&entry.mask))?))
        };
        g.generate(&sketch, mask.as_ref())?.save(&out_dir.join(format!("{id}.png")))?;
    }
    println!("wrote {} maps to {}", ids.len(), out_dir.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> CmdResult {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let methods = a
        .methods
        .iter()
        .map(|s| match s.split_once('=') {
            Some((name, dir)) if !name.is_empty() && !dir.is_empty() => Ok(MethodDir {
                name: name.to_string(),
                dir: dir.into(),
            }),
            _ => Err(fail(EXIT_CONFIG, format!("--method expects NAME=DIR, got `{s}`"))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let report = evaluate_run(&manifest, &methods, parse_split(&a.split)?, a.error_maps.as_deref())?;
    report.write(&a.out)?;
    print!("{}", report.to_table());
    Ok(())
}

/// The derived command plus one `--key-name VALUE` flag per config key on `train`.
fn command() -> Command {
    let defaults = normgen::training::TrainConfig::default();
    Cli::command()
        .after_help(format!("{}\n\n{EXIT_CODES_HELP}", keys_help()))
        .mut_subcommand("train", |mut c| {
            for (key, desc) in CONFIG_KEYS {
                c = c.arg(
                    Arg::new(*key)
                        .long(key.replace('_', "-"))
                        .value_name("VALUE")
                        .action(ArgAction::Set)
                        .help(format!("{desc} [default: {}]", defaults.get(key).expect("listed key")))
                        .help_heading("Config overrides"),
                );
            }
            c.after_help(format!("{}\n\n{EXIT_CODES_HELP}", keys_help()))
        })
}

fn run() -> CmdResult {
    let matches = command().get_matches();
    let cli = Cli::from_arg_matches(&matches).map_err(|e| fail(2, e.to_string()))?;
    match &cli.command {
        Cmd::Dataset(a) => cmd_dataset(a),
        Cmd::Mask(a) => cmd_mask(a),
        Cmd::Train(a) => cmd_train(a, matches.subcommand_matches("train").expect("train matches")),
        Cmd::Infer(a) => cmd_infer(a),
        Cmd::Eval(a) => cmd_eval(a),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
