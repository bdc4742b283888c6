//! The `restore` command line.
//!
//! Exit codes: 0 success, 1 failed check or other error, 2 unreadable or corrupt
//! input (or bad usage), 3 unsupported audio (channels, sample rate),
//! 4 missing prerequisite checkpoint. Errors print one line on stderr:
//! `error[<code>]: <reason>`.

pub mod checkpoint;
pub mod config;
pub mod verify;
pub mod wav;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::Error;
use crate::pipeline::{enhance, harmonic_utterance, load_denoise, load_repair, run_phase, Dataset, Phase, TOY_UTTERANCES};
use crate::repairnet::{build_repair, RepairConfig};
use crate::denoisenet::build_denoise;
use crate::spectral::Waveform;
use checkpoint::Checkpoint;
use config::RunConfig;
use verify::{run_suite, Suite};
use wav::{read_wav, write_wav, WavError, WavFormat};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_UNREADABLE: i32 = 2;
pub const EXIT_UNSUPPORTED: i32 = 3;
pub const EXIT_MISSING: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "restore", version, about = "Causal two-stage speech restoration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EnhanceStage {
    /// Repair network only.
    Repair,
    /// Repair then denoise.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PhaseArg {
    Teacher,
    StudentPretrain,
    Distill,
    DenoisePretrain,
    DenoiseFinetune,
}

impl From<PhaseArg> for Phase {
    fn from(p: PhaseArg) -> Phase {
        match p {
            PhaseArg::Teacher => Phase::Teacher,
            PhaseArg::StudentPretrain => Phase::StudentPretrain,
            PhaseArg::Distill => Phase::Distill,
            PhaseArg::DenoisePretrain => Phase::DenoisePretrain,
            PhaseArg::DenoiseFinetune => Phase::DenoiseFinetune,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Restore a mono WAV file.
    Enhance {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Preset name (paper, toy) or TOML path.
        #[arg(long, default_value = "toy")]
        config: String,
        #[arg(long, value_enum, default_value = "full")]
        stage: EnhanceStage,
    },
    /// Run one training phase; checkpoints of earlier phases are read from --out.
    Train {
        #[arg(long, default_value = "toy")]
        config: String,
        #[arg(long, value_enum)]
        phase: PhaseArg,
        /// Manifest of `clean.wav seed` lines, or `toy` for the built-in fixture.
        #[arg(long, default_value = "toy")]
        data: String,
        /// Run directory holding `<phase>.ckpt` and `<phase>.log`.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured step count.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run a property suite and print per-check margins.
    Verify {
        /// causality, gradients, stft, shapes or attention.
        #[arg(long)]
        suite: String,
        #[arg(long, default_value = "toy")]
        config: String,
    },
    /// Print parameter counts of a checkpoint, or of freshly built networks for a config.
    Info {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<String>,
    },
    /// Write the seeded toy utterances and a manifest.
    Fixture {
        #[arg(long, default_value = "toy")]
        config: String,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A reason to exit with a nonzero code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn new(code: i32, message: impl ToString) -> Self {
        Failure { code, message: message.to_string() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::MissingPrerequisite(_) => EXIT_MISSING,
            Error::Config(_) | Error::Checkpoint(_) | Error::Io { .. } | Error::Wav(_) => EXIT_UNREADABLE,
            _ => EXIT_FAILURE,
        };
        Failure::new(code, e)
    }
}

impl From<WavError> for Failure {
    fn from(e: WavError) -> Self {
        match e {
            WavError::Unreadable(m) => Failure::new(EXIT_UNREADABLE, m),
            WavError::Unsupported(m) => Failure::new(EXIT_UNSUPPORTED, m),
        }
    }
}

type CmdResult = Result<(), Failure>;

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return EXIT_OK;
            }
            let first = e.to_string().lines().next().unwrap_or("usage error").trim_start_matches("error: ").to_string();
            let _ = writeln!(err, "error[{EXIT_UNREADABLE}]: {first}");
            return EXIT_UNREADABLE;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let msg = f.message.replace(['\n', '\r'], " ");
            let _ = writeln!(err, "error[{}]: {msg}", f.code);
            f.code
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> CmdResult {
    match cmd {
        Command::Enhance { input, output, checkpoint, config, stage } => cmd_enhance(&input, &output, &checkpoint, &config, stage, out),
        Command::Train { config, phase, data, out: dir, steps } => cmd_train(&config, phase.into(), &data, &dir, steps, out),
        Command::Verify { suite, config } => cmd_verify(&suite, &config, out),
        Command::Info { checkpoint, config } => cmd_info(checkpoint.as_deref(), config.as_deref(), out),
        Command::Fixture { config, out: dir } => cmd_fixture(&config, &dir, out),
    }
}

fn say(out: &mut dyn Write, line: impl AsRef<str>) -> CmdResult {
    writeln!(out, "{}", line.as_ref()).map_err(|e| Failure::new(EXIT_FAILURE, e))
}

pub fn cmd_enhance(
    input: &Path,
    output: &Path,
    checkpoint: &Path,
    config: &str,
    stage: EnhanceStage,
    out: &mut dyn Write,
) -> CmdResult {
    let cfg = RunConfig::resolve(config)?;
    let (wave, format) = read_wav(input)?;
    if wave.sample_rate != cfg.stft.sample_rate {
        return Err(Failure::new(
            EXIT_UNSUPPORTED,
            format!("{}: sample rate {} Hz, preset '{}' expects {} Hz", input.display(), wave.sample_rate, cfg.preset, cfg.stft.sample_rate),
        ));
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let repair = load_repair(&ckpt, &cfg)?;
    let denoise = match stage {
        EnhanceStage::Repair => None,
        EnhanceStage::Full => Some(load_denoise(&ckpt, &cfg)?),
    };
    let y = enhance(&wave, &cfg.stft, &repair, denoise.as_ref())?;
    write_wav(output, &y, format)?;
    say(out, format!("wrote {} ({} samples)", output.display(), y.len()))
}

/// `clean.wav seed` lines, relative to the manifest; `#` starts a comment.
pub fn read_manifest(path: &Path, cfg: &RunConfig) -> Result<Dataset, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::new(EXIT_UNREADABLE, format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut clean = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = || Failure::new(EXIT_UNREADABLE, format!("{}:{}: expected '<clean.wav> <seed>'", path.display(), n + 1));
        let (file, seed) = line.rsplit_once(char::is_whitespace).ok_or_else(bad)?;
        let seed: u64 = seed.parse().map_err(|_| bad())?;
        let (wave, _) = read_wav(&base.join(file.trim()))?;
        if wave.sample_rate != cfg.stft.sample_rate {
            return Err(Failure::new(
                EXIT_UNSUPPORTED,
                format!("{file}: sample rate {} Hz, preset expects {} Hz", wave.sample_rate, cfg.stft.sample_rate),
            ));
        }
        clean.push((wave, seed));
    }
    if clean.is_empty() {
        return Err(Failure::new(EXIT_UNREADABLE, format!("{}: no utterances", path.display())));
    }
    Ok(Dataset::from_clean(clean, &cfg.degradation)?)
}

pub fn checkpoint_path(dir: &Path, phase: Phase) -> PathBuf {
    dir.join(format!("{phase}.ckpt"))
}

pub fn cmd_train(config: &str, phase: Phase, data: &str, dir: &Path, steps: Option<usize>, out: &mut dyn Write) -> CmdResult {
    let mut cfg = RunConfig::resolve(config)?;
    if let Some(s) = steps {
        cfg.train.steps.set(phase, s);
    }
    let mut prior = BTreeMap::new();
    for &p in phase.prerequisites() {
        let path = checkpoint_path(dir, p);
        if !path.exists() {
            return Err(Failure::new(EXIT_MISSING, format!("{phase} needs the {p} checkpoint at {}", path.display())));
        }
        prior.insert(p, Checkpoint::load(&path)?);
    }
    let dataset = if data == "toy" {
        Dataset::toy(&cfg)?
    } else {
        read_manifest(Path::new(data), &cfg)?
    };
    let result = run_phase(phase, &cfg, &dataset, &prior)?;
    std::fs::create_dir_all(dir).map_err(|e| Failure::new(EXIT_FAILURE, format!("{}: {e}", dir.display())))?;
    let log = dir.join(format!("{phase}.log"));
    checkpoint::write_atomic(&log, result.run.log_tsv().as_bytes())?;
    for f in &result.run.frozen {
        if !f.held() {
            return Err(Failure::new(EXIT_FAILURE, format!("{} parameters changed during {phase}", f.name)));
        }
    }
    let path = checkpoint_path(dir, phase);
    result.checkpoint.save(&path)?;
    let last = result.run.history.last().map(|r| r.to_string()).unwrap_or_default();
    say(out, format!("{phase}: {} steps, last [{last}]", result.run.steps))?;
    say(out, format!("{phase}: before [{}] after [{}]", result.run.before, result.run.after))?;
    for f in &result.run.frozen {
        say(out, format!("{phase}: {} frozen, hash {}", f.name, f.after))?;
    }
    say(out, format!("wrote {}", path.display()))
}

pub fn cmd_verify(suite: &str, config: &str, out: &mut dyn Write) -> CmdResult {
    let s = Suite::parse(suite).ok_or_else(|| {
        let names: Vec<&str> = Suite::ALL.iter().map(|s| s.name()).collect();
        Failure::new(EXIT_UNREADABLE, format!("unknown suite '{suite}' (expected one of {})", names.join(", ")))
    })?;
    let cfg = RunConfig::resolve(config)?;
    let checks = run_suite(s, &cfg)?;
    for c in &checks {
        say(out, c.to_string())?;
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    say(out, format!("{}: {} checks, {failed} failed", s.name(), checks.len()))?;
    if failed > 0 {
        return Err(Failure::new(EXIT_FAILURE, format!("{failed} {} checks failed", s.name())));
    }
    Ok(())
}

pub fn cmd_info(checkpoint: Option<&Path>, config: Option<&str>, out: &mut dyn Write) -> CmdResult {
    if let Some(path) = checkpoint {
        let ckpt = Checkpoint::load(path)?;
        say(out, format!("preset\t{}", ckpt.preset))?;
        for (k, v) in &ckpt.meta {
            say(out, format!("meta\t{k}\t{v}"))?;
        }
        for (module, n) in ckpt.counts_by_module() {
            say(out, format!("params\t{module}\t{n}"))?;
        }
        return say(out, format!("params\ttotal\t{}", ckpt.param_count()));
    }
    let cfg = RunConfig::resolve(config.unwrap_or("toy"))?;
    let repair = build_repair(&cfg.repair, 0)?.param_count();
    let denoise = build_denoise(&cfg.denoise, 0)?.param_count();
    say(out, format!("preset\t{}", cfg.preset))?;
    say(out, format!("params\trepair\t{repair}"))?;
    if cfg.preset == "paper" {
        let large = build_repair(&RepairConfig::paper_large(), 0)?.param_count();
        say(out, format!("params\trepair_large\t{large}"))?;
    }
    say(out, format!("params\tdenoise\t{denoise}"))?;
    say(out, format!("params\ttotal\t{}", repair + denoise))
}

pub fn cmd_fixture(config: &str, dir: &Path, out: &mut dyn Write) -> CmdResult {
    let cfg = RunConfig::resolve(config)?;
    std::fs::create_dir_all(dir).map_err(|e| Failure::new(EXIT_FAILURE, format!("{}: {e}", dir.display())))?;
    let sr = cfg.stft.sample_rate;
    let mut manifest = String::new();
    for i in 0..TOY_UTTERANCES as u64 {
        let seed = cfg.seed.wrapping_mul(1000).wrapping_add(i);
        let wave: Waveform = harmonic_utterance(sr, sr as usize, seed)?;
        let name = format!("clean_{i:02}.wav");
        write_wav(&dir.join(&name), &wave, WavFormat::Float32)?;
        manifest.push_str(&format!("{name} {seed}\n"));
    }
    let path = dir.join("manifest.txt");
    checkpoint::write_atomic(&path, manifest.as_bytes())?;
    say(out, format!("wrote {} utterances and {}", TOY_UTTERANCES, path.display()))
}
