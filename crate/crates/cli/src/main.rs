//! `wavediff` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wavediff::bench::{bench_sampling, BENCH_HEADER};
use wavediff::diffusion::{make_schedule, sample_many, GeneratorDenoiser};
use wavediff::gradcheck::{model_cases, op_cases, run_case, GradcheckOptions};
use wavediff::io::checkpoint::{read_checkpoint, read_tensor, write_tensor, DType};
use wavediff::io::config::{RunConfig, SEED_ENV};
use wavediff::io::dataset::{Dataset, DatasetKind, SyntheticDatasetSpec};
use wavediff::io::pnm::{self, Image};
use wavediff::networks::{preset, Generator};
use wavediff::nn::ParamStore;
use wavediff::rng::RngStream;
use wavediff::training::{fit, FitOptions, TrainState};
use wavediff::{wavelet, Error, Result};

#[derive(Parser)]
#[command(name = "wavediff", version, about = "Wavelet-domain diffusion GAN")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a run configuration.
    Train(TrainArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Time sampling and report cost accounting as CSV.
    Bench(BenchArgs),
    /// Haar-transform an image into a packed subband tensor file.
    Dwt(DwtArgs),
    /// Invert a packed subband tensor file back to an image.
    Idwt(IdwtArgs),
    /// Check analytic gradients of every op and of the full networks.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic image corpus.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory for checkpoints and metrics.csv.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Seed used when the config does not set train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many total steps.
    #[arg(long)]
    stop_at: Option<u64>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 16)]
    num: usize,
    /// Denoising steps (defaults to the checkpoint's config).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Use the raw generator weights instead of the EMA copy.
    #[arg(long)]
    raw: bool,
    #[arg(long, default_value_t = 32)]
    batch: usize,
}

#[derive(Args)]
struct BenchArgs {
    /// Benchmark a trained checkpoint.
    #[arg(long, conflicts_with = "preset")]
    checkpoint: Option<PathBuf>,
    /// Benchmark a freshly initialized preset.
    #[arg(long)]
    preset: Option<String>,
    /// Override the preset's base width.
    #[arg(long, requires = "preset")]
    base_channels: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Write CSV here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DwtArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IdwtArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Coordinates sampled per tensor.
    #[arg(long, default_value_t = 16)]
    coords: usize,
    /// Skip the full generator/discriminator checks.
    #[arg(long)]
    ops_only: bool,
}

#[derive(Args)]
struct GenDataArgs {
    /// two-mode-gaussian-images, shapes or checkerboard.
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 32)]
    res: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// `--seed`, else `$WAVEDIFF_SEED`, else 0.
fn resolve_seed(flag: Option<u64>) -> std::result::Result<u64, Failure> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn train(a: TrainArgs) -> CmdResult {
    let text = read_text(&a.config)?;
    let resume = a.resume.as_deref().map(read_checkpoint).transpose()?;
    // A resumed run keeps the seed it was started with.
    let fallback = match &resume {
        Some(ck) => wavediff::training::checkpoint_seed(ck)?,
        None => resolve_seed(a.seed)?,
    };
    let cfg = RunConfig::parse_with_seed_fallback(&text, Some(fallback))?;
    let data = cfg.dataset()?;
    let sched = cfg.schedule()?;
    let (models, mut state) = match &resume {
        Some(ck) => TrainState::from_checkpoint(&cfg.model, &cfg.train, ck)?,
        None => TrainState::init(&cfg.model, &cfg.train)?,
    };
    if resume.is_some() && cfg.train.seed != state.seed {
        return Err(Failure::Usage(format!(
            "config seed {} differs from the checkpoint seed {}",
            cfg.train.seed, state.seed
        )));
    }
    let start = state.step;
    let opts = FitOptions {
        out_dir: a.out.clone(),
        config_text: text,
        stop_at: a.stop_at,
    };
    let summary = fit(&models, &mut state, &data, &sched, &cfg.train, &opts)?;
    eprintln!(
        "trained steps {start}..{} ({} evaluations, {} checkpoints) into {}",
        state.step,
        summary.evals.len(),
        summary.checkpoints.len(),
        a.out.display()
    );
    Ok(())
}

fn load_generator(path: &Path, use_ema: bool) -> Result<(RunConfig, Generator, ParamStore)> {
    let ck = read_checkpoint(path)?;
    let cfg = RunConfig::parse_with_seed_fallback(&ck.config, Some(0))?;
    let (models, state) = TrainState::from_checkpoint(&cfg.model, &cfg.train, &ck)?;
    let params = if use_ema { state.ema } else { state.g };
    Ok((cfg, models.generator, params))
}

fn sample(a: SampleArgs) -> CmdResult {
    if a.num == 0 || a.batch == 0 {
        return Err(Failure::Usage("--num and --batch must be positive".into()));
    }
    let seed = resolve_seed(a.seed)?;
    let (cfg, gen, params) = load_generator(&a.checkpoint, !a.raw)?;
    let sched = make_schedule(a.steps.unwrap_or(cfg.steps), cfg.schedule)?;
    let den = GeneratorDenoiser {
        generator: &gen,
        params: &params,
    };
    let r = gen.spec.resolution();
    let x = sample_many(&den, &sched, a.num, a.batch, &[gen.spec.in_channels(), r, r], seed)?;
    let files = pnm::save_images(&x, &a.out)?;
    eprintln!("wrote {} images to {}", files.len(), a.out.display());
    Ok(())
}

fn bench(a: BenchArgs) -> CmdResult {
    let seed = resolve_seed(a.seed)?;
    let (name, gen, params, steps, kind) = match (&a.checkpoint, &a.preset) {
        (Some(path), None) => {
            let (cfg, gen, params) = load_generator(path, true)?;
            (path.display().to_string(), gen, params, cfg.steps, cfg.schedule)
        }
        (None, Some(p)) => {
            let pr = preset(p)?;
            let spec = match a.base_channels {
                Some(b) => pr.spec.with_base_channels(b),
                None => pr.spec,
            };
            let mut params = ParamStore::new();
            let gen = Generator::new(&spec, &mut params, &mut RngStream::new(seed, "init"))?;
            let name = match a.base_channels {
                Some(b) => format!("{p}@base{b}"),
                None => p.clone(),
            };
            (
                name,
                gen,
                params,
                pr.steps,
                wavediff::diffusion::ScheduleKind::default_geometric(),
            )
        }
        _ => {
            return Err(Failure::Usage(
                "bench needs exactly one of --checkpoint or --preset".into(),
            ))
        }
    };
    let sched = make_schedule(a.steps.unwrap_or(steps), kind)?;
    let res = bench_sampling(&name, &gen, &params, &sched, a.batch, a.trials, seed)?;
    let csv = format!("{BENCH_HEADER}\n{}\n", res.csv_row());
    match &a.out {
        Some(p) => fs::write(p, csv).map_err(|e| Error::io(p, e))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn dwt(a: DwtArgs) -> CmdResult {
    let img = pnm::read_image(&a.input)?;
    let x = img.to_tensor().reshape(&[1, img.channels, img.height, img.width])?;
    let y = wavelet::dwt_packed(&x)?;
    write_tensor(&a.out, &y, DType::F64)?;
    Ok(())
}

fn idwt(a: IdwtArgs) -> CmdResult {
    let y = read_tensor(&a.input)?;
    let x = wavelet::idwt_packed(&y)?;
    let img = Image::from_tensor(&x)?;
    pnm::write_image(&a.out, &img)?;
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let seed = resolve_seed(a.seed)?;
    let opts = GradcheckOptions {
        coords_per_tensor: a.coords,
        seed,
        ..GradcheckOptions::default()
    };
    let mut cases = op_cases(seed);
    if !a.ops_only {
        cases.extend(model_cases(seed)?);
    }
    let mut failed = 0;
    for case in &cases {
        let rep = run_case(case, &opts)?;
        let status = if rep.passed() { "ok" } else { "FAIL" };
        println!(
            "{status:<4} {:<28} coords {:>5}  max rel err {:.3e}",
            case.name,
            rep.coords(),
            rep.max_rel_err()
        );
        failed += usize::from(!rep.passed());
    }
    if failed > 0 {
        return Err(Failure::Runtime(Error::InvalidArgument(format!(
            "{failed} of {} gradient checks exceeded {:e}",
            cases.len(),
            opts.tolerance
        ))));
    }
    Ok(())
}

fn gen_data(a: GenDataArgs) -> CmdResult {
    let kind: DatasetKind = a.kind.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
    let spec = SyntheticDatasetSpec {
        kind,
        resolution: a.res,
        channels: a.channels,
        count: a.count,
        seed: resolve_seed(a.seed)?,
    };
    Dataset::generate(&spec)?.write(&a.out)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.cmd {
        Cmd::Train(a) => train(a),
        Cmd::Sample(a) => sample(a),
        Cmd::Bench(a) => bench(a),
        Cmd::Dwt(a) => dwt(a),
        Cmd::Idwt(a) => idwt(a),
        Cmd::Gradcheck(a) => gradcheck(a),
        Cmd::GenData(a) => gen_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun `wavediff --help` for usage.");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
