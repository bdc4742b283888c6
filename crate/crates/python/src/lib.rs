//! Python bindings: presets, spectral analysis, losses, degradation, checkpoints,
//! inference and the training/verification commands.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use restore_core::cli::checkpoint::Checkpoint as CoreCheckpoint;
use restore_core::cli::config::RunConfig;
use restore_core::cli::verify::{run_suite, Suite};
use restore_core::cli::{cmd_train, Failure};
use restore_core::denoisenet::{build_denoise, DenoiseModel};
use restore_core::numcore::{ComplexTensor, Tensor};
use restore_core::objectives::{self, LossReport, MagnitudeSpectrum, Stage};
use restore_core::pipeline::{
    enhance, harmonic_utterance, load_denoise, load_repair, synthesize_degraded_with_report, DegradationSpec,
    DropoutSpec, Phase,
};
use restore_core::repairnet::{build_repair, RepairConfig, RepairModel};
use restore_core::spectral::{analyze as core_analyze, synthesize_len, ComplexSpectrum, Waveform};
use restore_core::Error;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyFileNotFoundError::new_err(e.to_string()),
        Error::Diverged { .. } | Error::Backward(_) | Error::MissingPrerequisite(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn failure(f: Failure) -> PyErr {
    PyRuntimeError::new_err(format!("exit code {}: {}", f.code, f.message))
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Tensor::new([r, c], rows.into_iter().flatten().collect()).map_err(err)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let c = t.shape()[1];
    t.data().chunks(c.max(1)).map(<[f64]>::to_vec).collect()
}

fn magnitudes(rows: Vec<Vec<f64>>) -> PyResult<MagnitudeSpectrum> {
    MagnitudeSpectrum::new(matrix(rows)?).map_err(err)
}

fn config(name: &str) -> PyResult<RunConfig> {
    RunConfig::resolve(name).map_err(err)
}

/// A run configuration: a preset name (`paper`, `toy`) or a TOML path.
#[pyclass(name = "Config", module = "restore", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (name = "toy"))]
    fn new(name: &str) -> PyResult<Self> {
        Ok(PyConfig { inner: config(name)? })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(PyConfig { inner: RunConfig::parse(text).map_err(err)? })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(err)
    }

    #[getter]
    fn preset(&self) -> String {
        self.inner.preset.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn sample_rate(&self) -> u32 {
        self.inner.stft.sample_rate
    }

    #[getter]
    fn fft_len(&self) -> usize {
        self.inner.stft.fft_len
    }

    #[getter]
    fn bins(&self) -> usize {
        self.inner.stft.bins()
    }

    /// Parameter counts of freshly built networks.
    fn param_counts(&self) -> PyResult<BTreeMap<String, usize>> {
        let repair = build_repair(&self.inner.repair, 0).map_err(err)?.param_count();
        let denoise = build_denoise(&self.inner.denoise, 0).map_err(err)?.param_count();
        let mut out = BTreeMap::from([
            ("repair".to_string(), repair),
            ("denoise".to_string(), denoise),
            ("total".to_string(), repair + denoise),
        ]);
        if self.inner.preset == "paper" {
            out.insert("repair_large".into(), build_repair(&RepairConfig::paper_large(), 0).map_err(err)?.param_count());
        }
        Ok(out)
    }

    fn __repr__(&self) -> String {
        format!("Config(preset={:?}, sample_rate={})", self.inner.preset, self.inner.stft.sample_rate)
    }
}

/// Complex STFT of mono samples as `(re, im)`, each `[bins][frames]`.
#[pyfunction]
#[pyo3(signature = (samples, config = "toy"))]
fn stft(samples: Vec<f64>, config: &str) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let cfg = self::config(config)?;
    let w = Waveform::new(samples, cfg.stft.sample_rate).map_err(err)?;
    let s = core_analyze(&w, &cfg.stft).map_err(err)?;
    Ok((rows(&s.re), rows(&s.im)))
}

/// Inverse of [`stft`], trimmed or padded to `length` samples.
#[pyfunction]
#[pyo3(signature = (re, im, length, config = "toy"))]
fn istft(re: Vec<Vec<f64>>, im: Vec<Vec<f64>>, length: usize, config: &str) -> PyResult<Vec<f64>> {
    let cfg = self::config(config)?;
    let s = ComplexSpectrum::new(matrix(re)?, matrix(im)?, cfg.stft.clone()).map_err(err)?;
    Ok(synthesize_len(&s, length).map_err(err)?.samples)
}

#[pyfunction]
fn sc_loss(x: Vec<Vec<f64>>, x_hat: Vec<Vec<f64>>) -> PyResult<f64> {
    objectives::sc_loss(&magnitudes(x)?, &magnitudes(x_hat)?).map_err(err)
}

#[pyfunction]
fn log_mag_loss(x: Vec<Vec<f64>>, x_hat: Vec<Vec<f64>>) -> PyResult<f64> {
    objectives::log_mag_loss(&magnitudes(x)?, &magnitudes(x_hat)?).map_err(err)
}

#[pyfunction]
fn asym_loss(x: Vec<Vec<f64>>, x_hat: Vec<Vec<f64>>) -> PyResult<f64> {
    objectives::asym_loss(&magnitudes(x)?, &magnitudes(x_hat)?).map_err(err)
}

/// Power-law compressed loss between two complex spectra given as `(re, im)` pairs.
#[pyfunction]
fn plc_loss(s: (Vec<Vec<f64>>, Vec<Vec<f64>>), s_hat: (Vec<Vec<f64>>, Vec<Vec<f64>>)) -> PyResult<f64> {
    let a = ComplexTensor::new(matrix(s.0)?, matrix(s.1)?).map_err(err)?;
    let b = ComplexTensor::new(matrix(s_hat.0)?, matrix(s_hat.1)?).map_err(err)?;
    objectives::plc_loss_complex(&a, &b).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (s, s_hat, zero_mean = true))]
fn si_snr_loss(s: Vec<f64>, s_hat: Vec<f64>, zero_mean: bool) -> PyResult<f64> {
    objectives::si_snr_loss_with(&s, &s_hat, zero_mean).map_err(err)
}

/// Weighted total of named loss parts for `stage1`, `stage2_pre` or `stage2`.
#[pyfunction]
fn total_losses(parts: BTreeMap<String, f64>, stage: &str) -> PyResult<f64> {
    let stage = match stage {
        "stage1" => Stage::Stage1,
        "stage2_pre" => Stage::Stage2Pre,
        "stage2" => Stage::Stage2,
        other => return Err(PyValueError::new_err(format!("unknown stage '{other}'"))),
    };
    let report = parts.iter().fold(LossReport::new(), |r, (k, v)| r.with(k, *v));
    objectives::total_losses(&report, stage).map_err(err)
}

/// The seeded harmonic test utterance used by the toy fixture.
#[pyfunction]
fn test_utterance(sample_rate: u32, length: usize, seed: u64) -> PyResult<Vec<f64>> {
    Ok(harmonic_utterance(sample_rate, length, seed).map_err(err)?.samples)
}

/// Applies seeded degradations. With `config` its ranges are used, otherwise the keyword ranges;
/// returns the degraded samples and the drawn values.
#[pyfunction]
#[pyo3(signature = (
    samples, sample_rate, seed, config = None, noise_snr_db = None, lowpass_hz = None,
    dropout_segments = None, dropout_ms = None, gain_db = None, clip = None,
))]
#[allow(clippy::too_many_arguments)]
fn degrade<'py>(
    py: Python<'py>,
    samples: Vec<f64>,
    sample_rate: u32,
    seed: u64,
    config: Option<&str>,
    noise_snr_db: Option<[f64; 2]>,
    lowpass_hz: Option<[f64; 2]>,
    dropout_segments: Option<[usize; 2]>,
    dropout_ms: Option<[f64; 2]>,
    gain_db: Option<[f64; 2]>,
    clip: Option<f64>,
) -> PyResult<(Vec<f64>, Bound<'py, pyo3::types::PyDict>)> {
    let spec = match config {
        Some(name) => self::config(name)?.degradation,
        None => DegradationSpec {
            noise_snr_db,
            lowpass_hz,
            dropout: match (dropout_segments, dropout_ms) {
                (Some(segments), Some(length_ms)) => Some(DropoutSpec { segments, length_ms }),
                (None, None) => None,
                _ => return Err(PyValueError::new_err("dropout_segments and dropout_ms go together")),
            },
            gain_db,
            clip,
        },
    };
    spec.validate(sample_rate).map_err(err)?;
    let clean = Waveform::new(samples, sample_rate).map_err(err)?;
    let (y, report) = synthesize_degraded_with_report(&clean, &spec, seed).map_err(err)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("snr_db", report.snr_db)?;
    d.set_item("cutoff_hz", report.cutoff_hz)?;
    d.set_item("segments", report.segments)?;
    d.set_item("gain_db", report.gain_db)?;
    Ok((y.samples, d))
}

/// A saved set of named tensors with metadata.
#[pyclass(name = "Checkpoint", module = "restore")]
struct PyCheckpoint {
    inner: CoreCheckpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCheckpoint { inner: CoreCheckpoint::load(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn preset(&self) -> String {
        self.inner.preset.clone()
    }

    #[getter]
    fn meta(&self) -> BTreeMap<String, String> {
        self.inner.meta.clone()
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn counts_by_module(&self) -> BTreeMap<String, usize> {
        self.inner.counts_by_module()
    }

    fn file_hash(&self) -> PyResult<String> {
        self.inner.file_hash().map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Checkpoint(preset={:?}, params={})", self.inner.preset, self.inner.param_count())
    }
}

/// Trained networks ready for inference.
#[pyclass(name = "Restorer", module = "restore")]
struct PyRestorer {
    cfg: RunConfig,
    repair: RepairModel,
    denoise: Option<DenoiseModel>,
}

#[pymethods]
impl PyRestorer {
    /// `stage` is `full` (repair then denoise) or `repair`.
    #[new]
    #[pyo3(signature = (checkpoint, config = "toy", stage = "full"))]
    fn new(checkpoint: PathBuf, config: &str, stage: &str) -> PyResult<Self> {
        let cfg = self::config(config)?;
        let ckpt = CoreCheckpoint::load(&checkpoint).map_err(err)?;
        let repair = load_repair(&ckpt, &cfg).map_err(err)?;
        let denoise = match stage {
            "full" => Some(load_denoise(&ckpt, &cfg).map_err(err)?),
            "repair" => None,
            other => return Err(PyValueError::new_err(format!("unknown stage '{other}'"))),
        };
        Ok(PyRestorer { cfg, repair, denoise })
    }

    #[getter]
    fn sample_rate(&self) -> u32 {
        self.cfg.stft.sample_rate
    }

    fn enhance(&self, py: Python<'_>, samples: Vec<f64>) -> PyResult<Vec<f64>> {
        let w = Waveform::new(samples, self.cfg.stft.sample_rate).map_err(err)?;
        py.detach(|| enhance(&w, &self.cfg.stft, &self.repair, self.denoise.as_ref()))
            .map(|y| y.samples)
            .map_err(err)
    }
}

/// Runs one training phase into `out_dir` (earlier phases are read from it) and returns the summary lines.
#[pyfunction]
#[pyo3(signature = (phase, out_dir, config = "toy", data = "toy", steps = None))]
fn train(py: Python<'_>, phase: &str, out_dir: PathBuf, config: &str, data: &str, steps: Option<usize>) -> PyResult<Vec<String>> {
    let phase: Phase = phase.parse().map_err(err)?;
    let mut out = Vec::new();
    py.detach(|| cmd_train(config, phase, data, &out_dir, steps, &mut out)).map_err(failure)?;
    Ok(String::from_utf8_lossy(&out).lines().map(str::to_string).collect())
}

/// Runs a property suite; returns `(name, value, passed)` per check.
#[pyfunction]
#[pyo3(signature = (suite, config = "toy"))]
fn verify(py: Python<'_>, suite: &str, config: &str) -> PyResult<Vec<(String, f64, bool)>> {
    let s = Suite::parse(suite).ok_or_else(|| PyValueError::new_err(format!("unknown suite '{suite}'")))?;
    let cfg = self::config(config)?;
    let checks = py.detach(|| run_suite(s, &cfg)).map_err(err)?;
    Ok(checks.into_iter().map(|c| (c.name.clone(), c.value, c.passed())).collect())
}

#[pyfunction]
fn phases() -> Vec<String> {
    Phase::ALL.iter().map(|p| p.to_string()).collect()
}

#[pymodule]
fn restore(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_class::<PyRestorer>()?;
    m.add_function(wrap_pyfunction!(stft, m)?)?;
    m.add_function(wrap_pyfunction!(istft, m)?)?;
    m.add_function(wrap_pyfunction!(sc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(log_mag_loss, m)?)?;
    m.add_function(wrap_pyfunction!(asym_loss, m)?)?;
    m.add_function(wrap_pyfunction!(plc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(si_snr_loss, m)?)?;
    m.add_function(wrap_pyfunction!(total_losses, m)?)?;
    m.add_function(wrap_pyfunction!(test_utterance, m)?)?;
    m.add_function(wrap_pyfunction!(degrade, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(phases, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
