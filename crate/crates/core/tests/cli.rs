use std::path::{Path, PathBuf};
use std::process::Command;

use hound::{SampleFormat, WavSpec, WavWriter};
use restore_core::cli::checkpoint::Checkpoint;
use restore_core::cli::config::RunConfig;
use restore_core::cli::wav::{read_wav, write_wav, WavFormat};
use restore_core::objectives::{sc_loss, MagnitudeSpectrum};
use restore_core::pipeline::harmonic_utterance;
use restore_core::spectral::{analyze, Waveform};

struct Outcome {
    code: i32,
    stdout: String,
    stderr: String,
}

fn restore(args: &[&str]) -> Outcome {
    let out = Command::new(env!("CARGO_BIN_EXE_restore")).args(args).output().unwrap();
    Outcome {
        code: out.status.code().unwrap(),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_raw(path: &Path, channels: u16, rate: u32, frames: usize) {
    let spec = WavSpec { channels, sample_rate: rate, bits_per_sample: 16, sample_format: SampleFormat::Int };
    let mut w = WavWriter::create(path, spec).unwrap();
    for i in 0..frames * channels as usize {
        w.write_sample(((i % 100) as i16 - 50) * 100).unwrap();
    }
    w.finalize().unwrap();
}

fn toy_rate() -> u32 {
    RunConfig::toy().stft.sample_rate
}

/// Trains every phase for zero steps; with zero-initialized heads the chain is the identity.
fn identity_run(dir: &Path) -> PathBuf {
    for phase in ["teacher", "student-pretrain", "distill", "denoise-pretrain", "denoise-finetune"] {
        let o = restore(&["train", "--phase", phase, "--out", s(dir), "--steps", "0"]);
        assert_eq!(o.code, 0, "{phase}: {}", o.stderr);
    }
    dir.join("denoise_finetune.ckpt")
}

#[test]
fn stereo_input_is_unsupported_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("stereo.wav");
    let output = dir.path().join("out.wav");
    write_raw(&input, 2, toy_rate(), 4000);
    let ckpt = dir.path().join("none.ckpt");
    let o = restore(&["enhance", "--input", s(&input), "--output", s(&output), "--checkpoint", s(&ckpt)]);
    assert_eq!(o.code, 3, "{}", o.stderr);
    assert!(o.stderr.starts_with("error[3]:"), "{}", o.stderr);
    assert_eq!(o.stderr.trim_end().lines().count(), 1);
    assert!(!output.exists());
}

#[test]
fn unreadable_input_and_wrong_rate() {
    let dir = tempfile::tempdir().unwrap();
    let garbage = dir.path().join("garbage.wav");
    std::fs::write(&garbage, b"definitely not a wav file").unwrap();
    let output = dir.path().join("out.wav");
    let ckpt = dir.path().join("none.ckpt");
    let o = restore(&["enhance", "--input", s(&garbage), "--output", s(&output), "--checkpoint", s(&ckpt)]);
    assert_eq!(o.code, 2, "{}", o.stderr);
    let missing = dir.path().join("missing.wav");
    let o = restore(&["enhance", "--input", s(&missing), "--output", s(&output), "--checkpoint", s(&ckpt)]);
    assert_eq!(o.code, 2, "{}", o.stderr);
    let slow = dir.path().join("slow.wav");
    write_raw(&slow, 1, toy_rate() / 2, 4000);
    let o = restore(&["enhance", "--input", s(&slow), "--output", s(&output), "--checkpoint", s(&ckpt)]);
    assert_eq!(o.code, 3, "{}", o.stderr);
    assert!(!output.exists());
}

#[test]
fn usage_errors() {
    assert_eq!(restore(&[]).code, 2);
    assert_eq!(restore(&["train", "--phase", "warmup", "--out", "x"]).code, 2);
    let o = restore(&["verify", "--suite", "nonsense"]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("causality"), "{}", o.stderr);
    assert_eq!(restore(&["info", "--config", "/nonexistent/preset.toml"]).code, 2);
    assert_eq!(restore(&["--help"]).code, 0);
}

#[test]
fn training_out_of_order_reports_missing_prerequisite() {
    let dir = tempfile::tempdir().unwrap();
    let o = restore(&["train", "--phase", "denoise-finetune", "--out", s(dir.path())]);
    assert_eq!(o.code, 4, "{}", o.stderr);
    assert!(o.stderr.contains("distill"), "{}", o.stderr);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn info_on_empty_and_corrupt_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.ckpt");
    Checkpoint::new("toy").save(&empty).unwrap();
    let o = restore(&["info", "--checkpoint", s(&empty)]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert!(o.stdout.lines().any(|l| l == "params\ttotal\t0"), "{}", o.stdout);

    let corrupt = dir.path().join("corrupt.ckpt");
    let mut bytes = std::fs::read(&empty).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&corrupt, &bytes).unwrap();
    assert_eq!(restore(&["info", "--checkpoint", s(&corrupt)]).code, 2);
    std::fs::write(&corrupt, b"").unwrap();
    assert_eq!(restore(&["info", "--checkpoint", s(&corrupt)]).code, 2);
}

#[test]
fn info_reports_configured_sizes() {
    let o = restore(&["info", "--config", "toy"]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let total: usize = o.stdout.lines().find_map(|l| l.strip_prefix("params\ttotal\t")).unwrap().parse().unwrap();
    assert!(total > 0);
}

#[test]
fn untrained_chain_passes_audio_through() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = identity_run(dir.path());
    let rate = toy_rate();
    let clean = harmonic_utterance(rate, rate as usize, 5).unwrap();
    let input = dir.path().join("in.wav");
    write_wav(&input, &clean, WavFormat::Float32).unwrap();
    for stage in ["repair", "full"] {
        let output = dir.path().join(format!("{stage}.wav"));
        let o = restore(&[
            "enhance", "--input", s(&input), "--output", s(&output), "--checkpoint", s(&ckpt), "--stage", stage,
        ]);
        assert_eq!(o.code, 0, "{}", o.stderr);
        let (y, fmt) = read_wav(&output).unwrap();
        assert_eq!((y.len(), y.sample_rate, fmt), (clean.len(), rate, WavFormat::Float32));
        let cfg = RunConfig::toy();
        let a = MagnitudeSpectrum::from_spectrum(&analyze(&clean, &cfg.stft).unwrap());
        let b = MagnitudeSpectrum::from_spectrum(&analyze(&y, &cfg.stft).unwrap());
        let sc = sc_loss(&a, &b).unwrap();
        assert!(sc < 0.05, "{stage}: {sc}");
    }

    let silence = dir.path().join("silence.wav");
    write_wav(&silence, &Waveform::new(vec![0.0; rate as usize / 2], rate).unwrap(), WavFormat::Pcm16).unwrap();
    let output = dir.path().join("quiet.wav");
    let o = restore(&["enhance", "--input", s(&silence), "--output", s(&output), "--checkpoint", s(&ckpt)]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let (y, fmt) = read_wav(&output).unwrap();
    assert_eq!(fmt, WavFormat::Pcm16);
    assert!(y.samples.iter().all(|x| x.abs() < 1e-4));

    // A repair-only checkpoint cannot run the full chain.
    let distilled = dir.path().join("distill.ckpt");
    let o = restore(&["enhance", "--input", s(&input), "--output", s(&output), "--checkpoint", s(&distilled)]);
    assert_ne!(o.code, 0);
}

#[test]
fn short_training_is_reproducible_and_loadable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        let o = restore(&["train", "--phase", "teacher", "--out", s(dir), "--steps", "2"]);
        assert_eq!(o.code, 0, "{}", o.stderr);
        assert!(o.stdout.contains("wrote"), "{}", o.stdout);
    }
    let bytes = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(bytes(a.path(), "teacher.ckpt"), bytes(b.path(), "teacher.ckpt"));
    assert_eq!(bytes(a.path(), "teacher.log"), bytes(b.path(), "teacher.log"));
    let log = String::from_utf8(bytes(a.path(), "teacher.log")).unwrap();
    assert!(log.starts_with("step\t"));
    assert_eq!(log.lines().count(), 3);
    let ckpt = Checkpoint::load(&a.path().join("teacher.ckpt")).unwrap();
    assert_eq!(ckpt.meta("phase"), Some("teacher"));
    let o = restore(&["info", "--checkpoint", s(&a.path().join("teacher.ckpt"))]);
    assert!(o.stdout.contains("meta\tcausality\tnoncausal"), "{}", o.stdout);
}

#[test]
fn fixture_manifest_feeds_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = restore(&["fixture", "--out", s(&data)]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let manifest = data.join("manifest.txt");
    assert_eq!(std::fs::read_to_string(&manifest).unwrap().lines().count(), 8);
    let run = dir.path().join("run");
    let o = restore(&["train", "--phase", "teacher", "--data", s(&manifest), "--out", s(&run), "--steps", "1"]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert!(run.join("teacher.ckpt").exists());

    std::fs::write(&manifest, "clean_00.wav notanumber\n").unwrap();
    let o = restore(&["train", "--phase", "teacher", "--data", s(&manifest), "--out", s(&run), "--steps", "1"]);
    assert_eq!(o.code, 2, "{}", o.stderr);
    let slow = data.join("slow.wav");
    write_raw(&slow, 1, toy_rate() / 2, 4000);
    std::fs::write(&manifest, "slow.wav 1\n").unwrap();
    let o = restore(&["train", "--phase", "teacher", "--data", s(&manifest), "--out", s(&run), "--steps", "1"]);
    assert_eq!(o.code, 3, "{}", o.stderr);
}

mod round_trips {
    use proptest::prelude::*;
    use restore_core::cli::checkpoint::Checkpoint;
    use restore_core::cli::wav::{read_wav, write_wav, WavFormat};
    use restore_core::nn::ParamStore;
    use restore_core::numcore::Tensor;
    use restore_core::spectral::Waveform;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn pcm16_is_sample_exact(codes in prop::collection::vec(-32768i32..32768, 0..400), rate in 4000u32..48000) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("x.wav");
            let w = Waveform::new(codes.iter().map(|&c| c as f64 / 32768.0).collect(), rate).unwrap();
            write_wav(&path, &w, WavFormat::Pcm16).unwrap();
            let (back, fmt) = read_wav(&path).unwrap();
            prop_assert_eq!(fmt, WavFormat::Pcm16);
            prop_assert_eq!(back, w);
        }

        #[test]
        fn float32_is_sample_exact(v in prop::collection::vec(-4.0f32..4.0, 0..400), rate in 4000u32..48000) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("x.wav");
            let w = Waveform::new(v.iter().map(|&x| x as f64).collect(), rate).unwrap();
            write_wav(&path, &w, WavFormat::Float32).unwrap();
            let (back, fmt) = read_wav(&path).unwrap();
            prop_assert_eq!(fmt, WavFormat::Float32);
            prop_assert_eq!(back, w);
        }

        #[test]
        fn checkpoint_save_load_save_is_byte_identical(
            tensors in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 1..20), 0..6),
            meta in prop::collection::btree_map("[a-z]{1,8}", "[a-z0-9_]{1,8}", 0..4),
        ) {
            let mut store = ParamStore::new();
            for (i, t) in tensors.iter().enumerate() {
                store.add(&format!("layer{i}.weight"), Tensor::new([t.len()], t.clone()).unwrap()).unwrap();
            }
            let mut c = Checkpoint::new("toy");
            for (k, v) in &meta {
                c = c.with_meta(k, v);
            }
            c.insert_store("repair", &store).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
            c.save(&a).unwrap();
            Checkpoint::load(&a).unwrap().save(&b).unwrap();
            prop_assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        }
    }
}
