use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::NamedTempFile;
use tridentse::config::RunConfig;
use tridentse::data::{read_wav, write_corpus, write_wav, MixSpec, NoiseKind, SnrMode};
use tridentse::gradsuite;
use tridentse::model::{cost_breakdown, frames_for_seconds, model_forward, Checkpoint, Mode, ModelConfig, TridentNet};
use tridentse::signal::{Waveform, SAMPLE_RATE};
use tridentse::train::{load_generator, train_from_config};

/// Trident speech enhancement: training, inference and verification.
#[derive(Parser)]
#[command(name = "tridentse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML run configuration.
    Train(TrainArgs),
    /// Enhance a 16 kHz mono WAV file with a trained checkpoint.
    Enhance(EnhanceArgs),
    /// Print parameter counts, FLOPs for a 3 s input and measured RTF.
    Report(ReportArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic corpus: manifest.txt plus clean/ and noisy/ WAVs.
    GenCorpus(CorpusArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Continue from this checkpoint up to `train.steps`.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print a progress line every this many steps (0 = quiet).
    #[arg(long, default_value_t = 50)]
    print_every: u64,
}

#[derive(Args)]
struct EnhanceArgs {
    checkpoint: PathBuf,
    input: PathBuf,
    output: PathBuf,
    /// Write In-CA attention maps (CSV and PGM) per block, branch and token.
    #[arg(long, value_name = "DIR")]
    export_attention: Option<PathBuf>,
    /// Check the checkpoint against this run configuration's model.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Normalize with the utterance's own batch statistics instead of the
    /// running statistics stored in the checkpoint.
    #[arg(long)]
    batch_stats: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Model presets to report (S, M, L, G1, tiny).
    #[arg(long = "preset", value_name = "NAME")]
    presets: Vec<String>,
    /// Run configurations whose models are reported.
    #[arg(long = "config", value_name = "PATH")]
    configs: Vec<PathBuf>,
    /// Timed forward passes per model; the median is reported.
    #[arg(long, default_value_t = 5)]
    runs: usize,
    /// Input length in seconds.
    #[arg(long, default_value_t = 3.0)]
    seconds: f64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CorpusArgs {
    /// Output directory; must not exist or be empty.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pairs: usize,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    /// Seconds per utterance.
    #[arg(long, default_value_t = 1.0)]
    duration: f64,
    /// Comma-separated SNR levels in dB, drawn uniformly.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, conflicts_with = "snr_range")]
    snr_levels: Vec<f64>,
    /// Continuous SNR range `LO,HI` in dB.
    #[arg(long, value_delimiter = ',', num_args = 2, allow_negative_numbers = true)]
    snr_range: Vec<f64>,
    /// Comma-separated noise kinds (white, pink, babble).
    #[arg(long, value_delimiter = ',', default_value = "white,pink,babble")]
    kinds: Vec<NoiseKind>,
}

/// Input that fails validation; exits with status 2.
#[derive(Debug)]
struct InvalidInput(String);

impl fmt::Display for InvalidInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InvalidInput {}

fn invalid(e: impl fmt::Display) -> anyhow::Error {
    InvalidInput(e.to_string()).into()
}

fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    RunConfig::load(path).map_err(invalid)
}

/// Writes through a temporary file in the destination directory.
fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> anyhow::Result<()>) -> anyhow::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let tmp = NamedTempFile::new_in(dir).with_context(|| format!("cannot write into {}", dir.display()))?;
    write(tmp.path())?;
    tmp.persist(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(())
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let cfg = load_config(&args.config)?;
    if let Some(r) = &args.resume {
        if !r.is_file() {
            return Err(invalid(format!("checkpoint {} not found", r.display())));
        }
    }
    let start = Instant::now();
    let every = args.print_every;
    let session = train_from_config(&cfg, args.resume.as_deref(), |r| {
        if every > 0 && (r.step % every == 0 || r.step == cfg.train.steps) {
            eprintln!("step {:>6}  lr {:.2e}  L {:.4e}  L_D {:.4e}", r.step, r.lr, r.losses.total, r.losses.l_d.unwrap_or(f64::NAN));
        }
    })?;
    println!("trained {} steps in {:.1} s", session.trainer.step(), start.elapsed().as_secs_f64());
    println!("checkpoint {}", cfg.output.checkpoint().display());
    println!("log {}", cfg.output.log().display());
    Ok(())
}

fn enhance(args: EnhanceArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&args.checkpoint).map_err(invalid)?;
    let model = match &args.config {
        Some(p) => Some(load_config(p)?.model),
        None => None,
    };
    let (cfg, store) = load_generator(&ck, model.as_ref()).map_err(invalid)?;
    let noisy = read_wav(&args.input).map_err(invalid)?;
    let mode = if args.batch_stats { Mode::Train } else { Mode::Eval };
    let out = model_forward(&noisy, &cfg, &store, mode, args.export_attention.is_some())?;
    if out.enhanced.len() != noisy.len() {
        return Err(anyhow!("enhanced length {} differs from input length {}", out.enhanced.len(), noisy.len()));
    }

    let mut written = Vec::new();
    let exported = (|| -> anyhow::Result<()> {
        let (Some(dir), Some(cap)) = (&args.export_attention, &out.attention) else {
            return Ok(());
        };
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        for map in cap.in_ca_maps(0)? {
            let stem = dir.join(map.file_stem());
            for (ext, bytes) in [("csv", map.to_csv().into_bytes()), ("pgm", map.to_pgm())] {
                let path = stem.with_extension(ext);
                write_atomic(&path, |p| std::fs::write(p, &bytes).map_err(Into::into))?;
                written.push(path);
            }
        }
        Ok(())
    })()
    .and_then(|()| write_atomic(&args.output, |p| write_wav(p, &out.enhanced).map_err(Into::into)));
    if let Err(e) = exported {
        for p in written {
            let _ = std::fs::remove_file(p);
        }
        return Err(e);
    }
    println!("wrote {} ({} samples)", args.output.display(), out.enhanced.len());
    if let Some(dir) = &args.export_attention {
        println!("wrote {} attention maps to {}", written.len() / 2, dir.display());
    }
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median wall time of a forward pass over `seconds` of noise, divided by `seconds`.
fn measure_rtf(cfg: &ModelConfig, seconds: f64, runs: usize) -> anyhow::Result<f64> {
    let (_, store) = TridentNet::init(cfg, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = (seconds * SAMPLE_RATE as f64).round() as usize;
    let noisy = Waveform::from_samples((0..n).map(|_| rng.random_range(-0.1..0.1)).collect())?;
    let times = (0..runs)
        .map(|_| {
            let start = Instant::now();
            // fresh parameters carry no running statistics, so batch
            // statistics are used; the cost is the same
            model_forward(&noisy, cfg, &store, Mode::Train, false)?;
            Ok(start.elapsed().as_secs_f64())
        })
        .collect::<anyhow::Result<Vec<f64>>>()?;
    Ok(median(times) / seconds)
}

fn report(args: ReportArgs) -> anyhow::Result<()> {
    if args.runs == 0 || !(args.seconds > 0.0) {
        return Err(invalid("--runs and --seconds must be positive"));
    }
    let mut models: Vec<(String, ModelConfig)> = Vec::new();
    for name in &args.presets {
        models.push((name.clone(), ModelConfig::preset(name).map_err(invalid)?));
    }
    for path in &args.configs {
        models.push((path.display().to_string(), load_config(path)?.model));
    }
    if models.is_empty() {
        for name in ["S", "M", "L", "G1"] {
            models.push((name.to_string(), ModelConfig::preset(name)?));
        }
    }
    println!("input {:.1} s, {} runs, single thread; FLOPs count one MAC as one operation, full counts 2 per MAC plus attention and element-wise", args.seconds, args.runs);
    println!("{:<24} {:>12} {:>12} {:>12} {:>10}", "model", "params", "FLOPs", "full FLOPs", "RTF");
    for (name, cfg) in &models {
        let k = cost_breakdown(cfg, frames_for_seconds(cfg, args.seconds), cfg.stft.bins());
        let rtf = measure_rtf(cfg, args.seconds, args.runs)?;
        println!(
            "{:<24} {:>11.3}M {:>11.2}G {:>11.2}G {:>10.3}",
            name,
            k.params as f64 / 1e6,
            k.reported_flops() as f64 / 1e9,
            k.full_flops() as f64 / 1e9,
            rtf
        );
    }
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> anyhow::Result<bool> {
    println!("{:<28} {:>8} {:>8} {:>12} {:>9}  result", "case", "checked", "kinks", "max rel err", "time");
    let mut ok = true;
    for r in gradsuite::run_suite(args.seed)? {
        ok &= r.passed();
        println!(
            "{:<28} {:>8} {:>8} {:>12.3e} {:>8.2}s  {}",
            r.name,
            r.report.checked,
            r.report.excluded.len(),
            r.report.max_rel_err,
            r.elapsed.as_secs_f64(),
            if r.passed() { "PASS" } else { "FAIL" }
        );
    }
    println!("tolerance: rel err < {:e}, step {:e}", gradsuite::REL_TOL, gradsuite::STEP);
    Ok(ok)
}

fn gen_corpus(args: CorpusArgs) -> anyhow::Result<()> {
    let mode = match (&args.snr_levels[..], &args.snr_range[..]) {
        ([], []) => SnrMode::voicebank(),
        ([], &[lo, hi]) => SnrMode::Uniform { lo, hi },
        (levels, _) => SnrMode::Discrete { levels: levels.to_vec() },
    };
    if args.pairs == 0 {
        return Err(invalid("--pairs must be positive"));
    }
    let specs = MixSpec::draw_many(args.seed, args.pairs, &mode, &args.kinds, args.duration).map_err(invalid)?;
    let out = &args.out;
    if out.exists() && std::fs::read_dir(out).map(|mut d| d.next().is_some()).unwrap_or(true) {
        return Err(invalid(format!("{} exists and is not an empty directory", out.display())));
    }
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
    let tmp = tempfile::Builder::new().prefix(".corpus").tempdir_in(parent)?;
    write_corpus(tmp.path(), &specs)?;
    if out.exists() {
        std::fs::remove_dir(out)?;
    }
    std::fs::rename(tmp.path(), out).with_context(|| format!("cannot move corpus into {}", out.display()))?;
    println!("wrote {} pairs and {}", specs.len(), out.join("manifest.txt").display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a).map(|()| true),
        Command::Enhance(a) => enhance(a).map(|()| true),
        Command::Report(a) => report(a).map(|()| true),
        Command::Gradcheck(a) => gradcheck(a),
        Command::GenCorpus(a) => gen_corpus(a).map(|()| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<InvalidInput>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
