//! Degradation synthesis, the optimizer, the five training phases and the causality probe.
//!
//! Phases run in a fixed order: teacher, student pretraining, distillation,
//! denoiser pretraining, denoiser finetuning. Each one emits a checkpoint the
//! later phases load. Frozen networks have their outputs cached once and their
//! parameter hashes compared before and after the phase.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cli::checkpoint::Checkpoint;
use crate::cli::config::RunConfig;
use crate::denoisenet::{build_denoise, DenoiseModel};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore};
use crate::numcore::{CVar, ComplexTensor, Tape, Tensor, Var};
use crate::objectives::{
    asym_loss_var, build_discriminators, discriminator_loss_var, generator_losses_var, log_mag_loss_var, plc_loss_var,
    sc_loss_var, si_snr_loss_var, total_losses_var, DiscriminatorBank, LossReport, Stage,
};
use crate::repairnet::{build_repair, Causality, RepairModel};
use crate::spectral::{analyze, istft_var, synthesize_len, ComplexSpectrum, StftConfig, Waveform};

// ---------------------------------------------------------------- degradation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutSpec {
    /// Inclusive range of the number of zeroed segments.
    pub segments: [usize; 2],
    pub length_ms: [f64; 2],
}

/// Which degradations to apply and their parameter ranges. Absent entries are skipped.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_snr_db: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lowpass_hz: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout: Option<DropoutSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain_db: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<f64>,
}

fn ordered(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
        return Err(Error::Config(format!("degradation {name} range {r:?} is not ordered")));
    }
    Ok(())
}

impl DegradationSpec {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if let Some(r) = self.noise_snr_db {
            ordered("noise_snr_db", r)?;
        }
        if let Some(r) = self.lowpass_hz {
            ordered("lowpass_hz", r)?;
            if r[0] <= 0.0 || r[1] >= sample_rate as f64 / 2.0 {
                return Err(Error::Config(format!("lowpass cutoff {r:?} must lie inside (0, nyquist)")));
            }
        }
        if let Some(d) = &self.dropout {
            ordered("dropout.length_ms", d.length_ms)?;
            if d.segments[0] > d.segments[1] || d.length_ms[0] < 0.0 {
                return Err(Error::Config("dropout ranges are not ordered".into()));
            }
        }
        if let Some(r) = self.gain_db {
            ordered("gain_db", r)?;
        }
        if let Some(c) = self.clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("clip threshold {c} must be > 0")));
            }
        }
        Ok(())
    }
}

/// The parameters drawn for one degraded utterance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DegradationReport {
    pub snr_db: Option<f64>,
    pub cutoff_hz: Option<f64>,
    /// Zeroed sample ranges `[start, end)`.
    pub segments: Vec<(usize, usize)>,
    pub gain_db: Option<f64>,
}

fn draw(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Second-order Butterworth lowpass (Q = 1/√2), run forwards once.
pub fn lowpass(x: &[f64], cutoff_hz: f64, sample_rate: u32) -> Vec<f64> {
    let w0 = 2.0 * std::f64::consts::PI * cutoff_hz / sample_rate as f64;
    let alpha = w0.sin() / std::f64::consts::SQRT_2;
    let c = w0.cos();
    let a0 = 1.0 + alpha;
    let (b0, b1, b2) = ((1.0 - c) / 2.0 / a0, (1.0 - c) / a0, (1.0 - c) / 2.0 / a0);
    let (a1, a2) = (-2.0 * c / a0, (1.0 - alpha) / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    x.iter()
        .map(|&v| {
            let y = b0 * v + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
            (x2, x1, y2, y1) = (x1, v, y1, y);
            y
        })
        .collect()
}

pub fn apply_dropout(x: &mut [f64], segments: &[(usize, usize)]) {
    for &(a, b) in segments {
        let b = b.min(x.len());
        if a < b {
            x[a..b].fill(0.0);
        }
    }
}

/// Applies the enabled degradations in the order noise, lowpass, dropout, gain, clip.
pub fn synthesize_degraded(clean: &Waveform, spec: &DegradationSpec, seed: u64) -> Result<Waveform> {
    Ok(synthesize_degraded_with_report(clean, spec, seed)?.0)
}

pub fn synthesize_degraded_with_report(
    clean: &Waveform,
    spec: &DegradationSpec,
    seed: u64,
) -> Result<(Waveform, DegradationReport)> {
    if clean.is_empty() {
        return Err(Error::invalid("synthesize_degraded", "clean waveform is empty"));
    }
    spec.validate(clean.sample_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = DegradationReport::default();
    let mut x = clean.samples.clone();
    if let Some(r) = spec.noise_snr_db {
        let snr = draw(&mut rng, r);
        let noise: Vec<f64> = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
        let en: f64 = noise.iter().map(|v| v * v).sum();
        let target = clean.energy() / 10f64.powf(snr / 10.0);
        let k = if en > 0.0 { (target / en).sqrt() } else { 0.0 };
        x.iter_mut().zip(&noise).for_each(|(s, n)| *s += k * n);
        report.snr_db = Some(snr);
    }
    if let Some(r) = spec.lowpass_hz {
        let fc = draw(&mut rng, r);
        x = lowpass(&x, fc, clean.sample_rate);
        report.cutoff_hz = Some(fc);
    }
    if let Some(d) = &spec.dropout {
        let n = rng.random_range(d.segments[0]..=d.segments[1]);
        for _ in 0..n {
            let len = (draw(&mut rng, d.length_ms) * 1e-3 * clean.sample_rate as f64).round() as usize;
            let len = len.min(x.len());
            let start = rng.random_range(0..=x.len() - len);
            report.segments.push((start, start + len));
        }
        apply_dropout(&mut x, &report.segments);
    }
    if let Some(r) = spec.gain_db {
        let g = draw(&mut rng, r);
        let k = 10f64.powf(g / 20.0);
        x.iter_mut().for_each(|v| *v *= k);
        report.gain_db = Some(g);
    }
    if let Some(c) = spec.clip {
        x.iter_mut().for_each(|v| *v = v.clamp(-c, c));
    }
    Ok((Waveform::new(x, clean.sample_rate)?, report))
}

// ---------------------------------------------------------------- toy fixture

/// A voiced, harmonic utterance with a gliding pitch, syllable-rate envelope
/// and a faint noise floor, peak-normalised to 0.5.
pub fn harmonic_utterance(sample_rate: u32, len: usize, seed: u64) -> Result<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = sample_rate as f64;
    let f0_start = rng.random_range(100.0..200.0);
    let f0_end = f0_start * rng.random_range(0.8..1.25);
    let syllable_hz = rng.random_range(2.5..4.5);
    let formants = [rng.random_range(400.0..800.0), rng.random_range(1000.0..2200.0)];
    let nyquist = fs / 2.0;
    let mut phase = 0.0f64;
    let mut x = Vec::with_capacity(len);
    for n in 0..len {
        let t = n as f64 / fs;
        let progress = n as f64 / len.max(1) as f64;
        let f0 = f0_start + (f0_end - f0_start) * progress;
        phase += 2.0 * std::f64::consts::PI * f0 / fs;
        let mut v = 0.0;
        let mut k = 1.0;
        while k * f0 < 0.9 * nyquist {
            let f = k * f0;
            let env: f64 = formants.iter().map(|&fm| (-((f - fm) / 300.0).powi(2)).exp()).sum::<f64>() + 0.1;
            v += env / k * (k * phase).sin();
            k += 1.0;
        }
        let syll = (std::f64::consts::PI * syllable_hz * t).sin().abs().powf(0.7);
        let floor: f64 = rng.sample::<f64, _>(StandardNormal) * 1e-3;
        x.push(v * syll + floor);
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    Waveform::new(x, sample_rate)
}

/// One fixture entry: the clean utterance, its degraded copy and the seed that made it.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub clean: Waveform,
    pub degraded: Waveform,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub items: Vec<Utterance>,
}

pub const TOY_UTTERANCES: usize = 8;

impl Dataset {
    /// Degrades each `(clean, seed)` pair with its own seed.
    pub fn from_clean(clean: Vec<(Waveform, u64)>, spec: &DegradationSpec) -> Result<Self> {
        let items = clean
            .into_iter()
            .map(|(c, seed)| {
                let degraded = synthesize_degraded(&c, spec, seed)?;
                Ok(Utterance { clean: c, degraded, seed })
            })
            .collect::<Result<Vec<_>>>()?;
        if items.is_empty() {
            return Err(Error::invalid("dataset", "no utterances"));
        }
        Ok(Dataset { items })
    }

    /// The seeded fixture: [`TOY_UTTERANCES`] one-second utterances.
    pub fn toy(cfg: &RunConfig) -> Result<Self> {
        let sr = cfg.stft.sample_rate;
        let clean = (0..TOY_UTTERANCES as u64)
            .map(|i| {
                let seed = cfg.seed.wrapping_mul(1000).wrapping_add(i);
                Ok((harmonic_utterance(sr, sr as usize, seed)?, seed))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_clean(clean, &cfg.degradation)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

// ---------------------------------------------------------------- optimizer

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSteps {
    pub teacher: usize,
    pub student_pretrain: usize,
    pub distill: usize,
    pub denoise_pretrain: usize,
    pub denoise_finetune: usize,
}

impl PhaseSteps {
    pub fn get(&self, phase: Phase) -> usize {
        match phase {
            Phase::Teacher => self.teacher,
            Phase::StudentPretrain => self.student_pretrain,
            Phase::Distill => self.distill,
            Phase::DenoisePretrain => self.denoise_pretrain,
            Phase::DenoiseFinetune => self.denoise_finetune,
        }
    }

    pub fn set(&mut self, phase: Phase, steps: usize) {
        *match phase {
            Phase::Teacher => &mut self.teacher,
            Phase::StudentPretrain => &mut self.student_pretrain,
            Phase::Distill => &mut self.distill,
            Phase::DenoisePretrain => &mut self.denoise_pretrain,
            Phase::DenoiseFinetune => &mut self.denoise_finetune,
        } = steps;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplies the learning rate once per pass over the data.
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub disc_lr: f64,
    pub batch: usize,
    pub steps: PhaseSteps,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !(self.lr >= 0.0 && self.disc_lr >= 0.0 && self.eps > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rates, eps and weight decay must be non-negative".into()));
        }
        if !(unit(self.beta1) && unit(self.beta2) && self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("betas must lie in [0, 1) and lr_decay in (0, 1]".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be > 0".into()));
        }
        Ok(())
    }
}

/// Adaptive moments with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, cfg: &TrainConfig) -> Self {
        AdamW {
            lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// `grads[i]` belongs to the i-th tensor of `params`. A non-finite gradient aborts before any update.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape("optimizer_step", "gradient count", params.len(), grads.len()));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            let name = params.names().nth(i).unwrap_or("?").to_string();
            return Err(Error::Diverged {
                step: self.t as usize,
                detail: format!("non-finite gradient for {name}"),
            });
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (((p, g), m), v) in params.tensors_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.numel() != g.numel() {
                return Err(Error::shape("optimizer_step", "gradient size", p.numel(), g.numel()));
            }
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w = *w * decay - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- phases

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Teacher,
    StudentPretrain,
    Distill,
    DenoisePretrain,
    DenoiseFinetune,
}

impl Phase {
    pub const ALL: [Phase; 5] = [
        Phase::Teacher,
        Phase::StudentPretrain,
        Phase::Distill,
        Phase::DenoisePretrain,
        Phase::DenoiseFinetune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Teacher => "teacher",
            Phase::StudentPretrain => "student_pretrain",
            Phase::Distill => "distill",
            Phase::DenoisePretrain => "denoise_pretrain",
            Phase::DenoiseFinetune => "denoise_finetune",
        }
    }

    fn index(self) -> u64 {
        Phase::ALL.iter().position(|&p| p == self).unwrap() as u64
    }

    /// Checkpoints that must exist before this phase may run.
    pub fn prerequisites(self) -> &'static [Phase] {
        match self {
            Phase::Teacher => &[],
            Phase::StudentPretrain => &[Phase::Teacher],
            Phase::Distill => &[Phase::Teacher, Phase::StudentPretrain],
            Phase::DenoisePretrain => &[Phase::Distill],
            Phase::DenoiseFinetune => &[Phase::Distill, Phase::DenoisePretrain],
        }
    }

    pub fn stage(self) -> Stage {
        match self {
            Phase::Teacher | Phase::StudentPretrain | Phase::Distill => Stage::Stage1,
            Phase::DenoisePretrain => Stage::Stage2Pre,
            Phase::DenoiseFinetune => Stage::Stage2,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown phase '{s}'")))
    }
}

/// Parameter hash of a network that must not change during a phase.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrozenCheck {
    pub name: String,
    pub before: String,
    pub after: String,
}

impl FrozenCheck {
    pub fn held(&self) -> bool {
        self.before == self.after
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub phase: Phase,
    pub seed: u64,
    pub steps: usize,
    /// Learning rate after the last decay.
    pub lr: f64,
    /// One report per step: the stage parts, `total`, and `disc` in adversarial phases.
    pub history: Vec<LossReport>,
    /// Non-adversarial parts averaged over the whole fixture before the first step and after the last.
    pub before: LossReport,
    pub after: LossReport,
    pub frozen: Vec<FrozenCheck>,
}

impl TrainRun {
    /// Tab-separated loss log with a header line.
    pub fn log_tsv(&self) -> String {
        let keys: Vec<&str> = self.history.first().map(|r| r.iter().map(|(k, _)| k).collect()).unwrap_or_default();
        let mut out = format!("step\t{}\n", keys.join("\t"));
        for (i, r) in self.history.iter().enumerate() {
            let vals: Vec<String> = keys.iter().map(|k| format!("{:.9e}", r.get(k).unwrap_or(f64::NAN))).collect();
            out.push_str(&format!("{i}\t{}\n", vals.join("\t")));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct PhaseOutput {
    pub checkpoint: Checkpoint,
    pub run: TrainRun,
}

/// A network trained on complex spectra `[1, F, T]`.
trait Generator {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn spectrum_forward(&self, tape: &mut Tape, p: &Bound, z: CVar) -> Result<CVar>;
}

impl Generator for RepairModel {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn spectrum_forward(&self, tape: &mut Tape, p: &Bound, z: CVar) -> Result<CVar> {
        let x = tape.concat(&[z.re, z.im], 0)?;
        let y = self.forward(tape, p, x)?;
        Ok(CVar::new(tape.narrow(y, 0, 0, 1)?, tape.narrow(y, 0, 1, 1)?))
    }
}

impl Generator for DenoiseModel {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn spectrum_forward(&self, tape: &mut Tape, p: &Bound, z: CVar) -> Result<CVar> {
        self.forward(tape, p, z)
    }
}

/// Network input and training targets for one utterance.
struct Sample {
    input: ComplexTensor,
    spec: ComplexTensor,
    mag: Tensor,
    wave: Tensor,
}

impl Sample {
    fn new(input: &ComplexSpectrum, target: &ComplexSpectrum, wave: &[f64]) -> Result<Self> {
        let spec = target.to_complex_tensor();
        Ok(Sample {
            input: input.to_complex_tensor(),
            mag: spec.abs(),
            spec,
            wave: Tensor::new([wave.len()], wave.to_vec())?,
        })
    }
}

struct Env<'a> {
    stft: &'a StftConfig,
    stage: Stage,
    adversarial: bool,
}

/// Differentiable loss parts of one utterance, plus the estimated waveform when one is needed.
fn generator_parts(
    tape: &mut Tape,
    env: &Env,
    out: CVar,
    sample: &Sample,
    need_wave: bool,
) -> Result<(BTreeMap<&'static str, Var>, Option<Var>)> {
    let mut parts = BTreeMap::new();
    let xh = out.abs(tape)?;
    let x = tape.constant(sample.mag.clone());
    match env.stage {
        Stage::Stage1 => {
            parts.insert("sc", sc_loss_var(tape, x, xh)?);
            parts.insert("log_mag", log_mag_loss_var(tape, x, xh)?);
            parts.insert("asym", asym_loss_var(tape, x, xh)?);
        }
        Stage::Stage2Pre | Stage::Stage2 => {
            let s = CVar::constant(tape, &sample.spec);
            parts.insert("plc", plc_loss_var(tape, s, out)?);
            parts.insert("asym", asym_loss_var(tape, x, xh)?);
        }
    }
    let wants_wave = need_wave || env.stage != Stage::Stage1;
    let sh = if wants_wave {
        let s = tape.shape(out.re).to_vec();
        let z = out.reshape(tape, &[s[1], s[2]])?;
        Some(istft_var(tape, z, env.stft, sample.wave.numel())?)
    } else {
        None
    };
    if env.stage != Stage::Stage1 {
        let s = tape.constant(sample.wave.clone());
        parts.insert("si_snr", si_snr_loss_var(tape, s, sh.expect("waveform built"), true)?);
    }
    Ok((parts, sh))
}

fn finite_report(report: &LossReport, step: usize) -> Result<()> {
    if !report.is_finite() {
        return Err(Error::Diverged {
            step,
            detail: format!("non-finite loss: {report}"),
        });
    }
    Ok(())
}

/// Mean non-adversarial parts over every sample, without gradients.
fn evaluate<G: Generator>(net: &G, samples: &[Sample], env: &Env) -> Result<LossReport> {
    let mut sums: BTreeMap<&str, f64> = BTreeMap::new();
    for sample in samples {
        let mut tape = Tape::new();
        let p = net.params().bind(&mut tape, false);
        let z = CVar::constant(&mut tape, &sample.input);
        let out = net.spectrum_forward(&mut tape, &p, z)?;
        let (parts, _) = generator_parts(&mut tape, env, out, sample, false)?;
        for (k, v) in parts {
            *sums.entry(k).or_insert(0.0) += tape.value(v).item();
        }
    }
    let n = samples.len() as f64;
    Ok(sums.into_iter().fold(LossReport::new(), |r, (k, v)| r.with(k, v / n)))
}

fn accumulate(acc: &mut [Tensor], grads: &crate::numcore::Gradients, vars: &[Var], scale: f64) {
    for (a, &v) in acc.iter_mut().zip(vars) {
        if let Some(g) = grads.get(v) {
            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                *x += scale * y;
            }
        }
    }
}

fn zero_grads(params: &ParamStore) -> Vec<Tensor> {
    params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect()
}

/// The optimisation loop shared by every phase.
fn train_loop<G: Generator>(
    net: &mut G,
    samples: &[Sample],
    env: &Env,
    cfg: &RunConfig,
    phase: Phase,
    steps: usize,
) -> Result<TrainRun> {
    let tc = &cfg.train;
    let seed = cfg.seed.wrapping_add(101 * (phase.index() + 1));
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bank: Option<(DiscriminatorBank, AdamW)> = if env.adversarial {
        let bank = build_discriminators(&cfg.discriminator, cfg.stft.sample_rate, seed ^ 0xD15C)?;
        Some((bank, AdamW::new(tc.disc_lr, tc)))
    } else {
        None
    };
    let mut opt = AdamW::new(tc.lr, tc);
    let before = evaluate(net, samples, env)?;
    let n = samples.len();
    let batch = tc.batch.min(n);
    let mut queue: Vec<usize> = Vec::new();
    let mut consumed = 0usize;
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut picks = Vec::with_capacity(batch);
        while picks.len() < batch {
            if queue.is_empty() {
                queue = (0..n).collect();
                queue.shuffle(&mut order_rng);
                queue.reverse();
            }
            picks.push(queue.pop().expect("refilled"));
        }
        let epoch = (consumed / n) as u32;
        consumed += batch;
        opt.lr = tc.lr * tc.lr_decay.powi(epoch as i32);

        // Generator forward for the whole batch.
        let mut tapes = Vec::with_capacity(batch);
        for &i in &picks {
            let mut tape = Tape::new();
            let p = net.params().bind(&mut tape, true);
            let z = CVar::constant(&mut tape, &samples[i].input);
            let out = net.spectrum_forward(&mut tape, &p, z)?;
            let (parts, sh) = generator_parts(&mut tape, env, out, &samples[i], env.adversarial)?;
            tapes.push((tape, p, parts, sh));
        }

        let mut report_sums: BTreeMap<String, f64> = BTreeMap::new();
        let scale = 1.0 / batch as f64;

        // Discriminator update on the current estimates.
        if let Some((bank, dopt)) = bank.as_mut() {
            dopt.lr = tc.disc_lr * tc.lr_decay.powi(epoch as i32);
            let mut dgrads = zero_grads(&bank.params);
            for (k, &i) in picks.iter().enumerate() {
                let (tape, _, _, sh) = &tapes[k];
                let est = tape.value(sh.expect("adversarial phases build waveforms")).clone();
                let mut dt = Tape::new();
                let dp = bank.params.bind(&mut dt, true);
                let s = dt.constant(samples[i].wave.clone());
                let e = dt.constant(est);
                let l = discriminator_loss_var(&mut dt, bank, &dp, s, e)?;
                *report_sums.entry("disc".into()).or_insert(0.0) += scale * dt.value(l).item();
                let g = dt.backward(l)?;
                accumulate(&mut dgrads, &g, dp.vars(), scale);
            }
            dopt.step(&mut bank.params, &dgrads)?;
        }

        // Generator update.
        let mut grads = zero_grads(net.params());
        for ((mut tape, p, mut parts, sh), &i) in tapes.into_iter().zip(&picks) {
            if let Some((bank, _)) = bank.as_ref() {
                let dp = bank.params.bind(&mut tape, false);
                let s = tape.constant(samples[i].wave.clone());
                let (gen, fm) = generator_losses_var(&mut tape, bank, &dp, s, sh.expect("adversarial phases build waveforms"))?;
                parts.insert("gen_adv", gen);
                parts.insert("fm", fm);
            }
            let total = total_losses_var(&mut tape, &parts, env.stage)?;
            for (k, v) in &parts {
                *report_sums.entry(k.to_string()).or_insert(0.0) += scale * tape.value(*v).item();
            }
            *report_sums.entry("total".into()).or_insert(0.0) += scale * tape.value(total).item();
            let g = tape.backward(total)?;
            accumulate(&mut grads, &g, p.vars(), scale);
        }
        let report = report_sums.into_iter().fold(LossReport::new(), |r, (k, v)| r.with(&k, v));
        finite_report(&report, step)?;
        opt.step(net.params_mut(), &grads).map_err(|e| match e {
            Error::Diverged { detail, .. } => Error::Diverged { step, detail },
            other => other,
        })?;
        history.push(report);
    }
    let after = evaluate(net, samples, env)?;
    Ok(TrainRun {
        phase,
        seed,
        steps,
        lr: opt.lr,
        history,
        before,
        after,
        frozen: Vec::new(),
    })
}

/// Weighted sum of the non-adversarial parts of `stage` found in `report`.
pub fn reconstruction_total(report: &LossReport, stage: Stage) -> f64 {
    stage
        .weights()
        .iter()
        .filter_map(|&(name, w)| report.get(name).map(|v| w * v))
        .sum()
}

fn causality_name(c: Causality) -> &'static str {
    match c {
        Causality::Causal => "causal",
        Causality::NonCausal => "noncausal",
    }
}

fn require<'a>(prior: &'a BTreeMap<Phase, Checkpoint>, phase: Phase, cfg: &RunConfig) -> Result<&'a Checkpoint> {
    let ckpt = prior
        .get(&phase)
        .ok_or_else(|| Error::MissingPrerequisite(format!("{phase} checkpoint")))?;
    if ckpt.preset != cfg.preset {
        return Err(Error::Checkpoint(format!(
            "{phase} checkpoint was trained with preset '{}', config is '{}'",
            ckpt.preset, cfg.preset
        )));
    }
    if ckpt.meta("phase") != Some(phase.name()) {
        return Err(Error::Checkpoint(format!("checkpoint labelled {:?} given as {phase}", ckpt.meta("phase"))));
    }
    Ok(ckpt)
}

/// Rebuilds the repair network stored in `ckpt`, with the causality recorded there.
pub fn load_repair(ckpt: &Checkpoint, cfg: &RunConfig) -> Result<RepairModel> {
    let causality = match ckpt.meta("causality") {
        Some("causal") => Causality::Causal,
        Some("noncausal") => Causality::NonCausal,
        other => return Err(Error::Checkpoint(format!("repair causality {other:?} is not recorded"))),
    };
    let mut model = build_repair(&cfg.repair.with_causality(causality), 0)?;
    ckpt.load_into("repair", &mut model.params)?;
    Ok(model)
}

pub fn load_denoise(ckpt: &Checkpoint, cfg: &RunConfig) -> Result<DenoiseModel> {
    let mut model = build_denoise(&cfg.denoise, 0)?;
    ckpt.load_into("denoise", &mut model.params)?;
    Ok(model)
}

fn check_dataset(data: &Dataset, cfg: &RunConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid("train", "dataset is empty"));
    }
    for u in &data.items {
        if u.clean.sample_rate != cfg.stft.sample_rate || u.degraded.sample_rate != cfg.stft.sample_rate {
            return Err(Error::Config(format!(
                "utterance sample rate {} does not match the configured {}",
                u.clean.sample_rate, cfg.stft.sample_rate
            )));
        }
        if u.clean.len() != u.degraded.len() {
            return Err(Error::shape("train", "waveform length", u.clean.len(), u.degraded.len()));
        }
    }
    Ok(())
}

fn clean_samples(data: &Dataset, cfg: &RunConfig, inputs: &[ComplexSpectrum]) -> Result<Vec<Sample>> {
    data.items
        .iter()
        .zip(inputs)
        .map(|(u, x)| Sample::new(x, &analyze(&u.clean, &cfg.stft)?, &u.clean.samples))
        .collect()
}

fn degraded_spectra(data: &Dataset, cfg: &RunConfig) -> Result<Vec<ComplexSpectrum>> {
    data.items.iter().map(|u| analyze(&u.degraded, &cfg.stft)).collect()
}

fn base_checkpoint(cfg: &RunConfig, phase: Phase, seed: u64) -> Checkpoint {
    Checkpoint::new(&cfg.preset).with_meta("phase", phase).with_meta("seed", seed)
}

/// Runs one phase. `prior` holds the checkpoints of earlier phases; the ones
/// listed in [`Phase::prerequisites`] must be present.
pub fn run_phase(phase: Phase, cfg: &RunConfig, data: &Dataset, prior: &BTreeMap<Phase, Checkpoint>) -> Result<PhaseOutput> {
    cfg.validate()?;
    let deps = phase
        .prerequisites()
        .iter()
        .map(|&p| require(prior, p, cfg))
        .collect::<Result<Vec<_>>>()?;
    check_dataset(data, cfg)?;
    let steps = cfg.train.steps.get(phase);
    let stage = phase.stage();
    let env = Env {
        stft: &cfg.stft,
        stage,
        adversarial: stage.adversarial(),
    };
    let init_seed = cfg.seed.wrapping_add(phase.index() + 1);
    let degraded = degraded_spectra(data, cfg)?;
    match phase {
        Phase::Teacher | Phase::StudentPretrain => {
            let causality = if phase == Phase::Teacher {
                Causality::NonCausal
            } else {
                Causality::Causal
            };
            let mut net = build_repair(&cfg.repair.with_causality(causality), init_seed)?;
            let samples = clean_samples(data, cfg, &degraded)?;
            let run = train_loop(&mut net, &samples, &env, cfg, phase, steps)?;
            let mut ckpt = base_checkpoint(cfg, phase, cfg.seed).with_meta("causality", causality_name(causality));
            ckpt.insert_store("repair", &net.params)?;
            Ok(PhaseOutput { checkpoint: ckpt, run })
        }
        Phase::Distill => {
            let teacher = load_repair(deps[0], cfg)?;
            let mut student = load_repair(deps[1], cfg)?;
            if student.config.causality != Causality::Causal {
                return Err(Error::Checkpoint("the distilled student must be causal".into()));
            }
            let before = teacher.params.content_hash();
            let samples = degraded
                .iter()
                .zip(&data.items)
                .map(|(x, u)| {
                    let target = teacher.run(x)?;
                    let wave = synthesize_len(&target, u.clean.len())?;
                    Sample::new(x, &target, &wave.samples)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut run = train_loop(&mut student, &samples, &env, cfg, phase, steps)?;
            run.frozen.push(FrozenCheck {
                name: "teacher".into(),
                before,
                after: teacher.params.content_hash(),
            });
            let mut ckpt = base_checkpoint(cfg, phase, cfg.seed).with_meta("causality", "causal");
            ckpt.insert_store("repair", &student.params)?;
            Ok(PhaseOutput { checkpoint: ckpt, run })
        }
        Phase::DenoisePretrain | Phase::DenoiseFinetune => {
            let repair_ckpt = deps[0];
            let repair = load_repair(repair_ckpt, cfg)?;
            if repair.config.causality != Causality::Causal {
                return Err(Error::Checkpoint("the denoiser follows the causal student".into()));
            }
            let before = repair.params.content_hash();
            let mut denoiser = if phase == Phase::DenoisePretrain {
                build_denoise(&cfg.denoise, init_seed)?
            } else {
                let pre = deps[1];
                if load_repair(pre, cfg)?.params.content_hash() != before {
                    return Err(Error::Checkpoint("denoise_pretrain was trained on a different repair network".into()));
                }
                load_denoise(pre, cfg)?
            };
            let repaired = degraded.iter().map(|x| repair.run(x)).collect::<Result<Vec<_>>>()?;
            let samples = clean_samples(data, cfg, &repaired)?;
            let mut run = train_loop(&mut denoiser, &samples, &env, cfg, phase, steps)?;
            run.frozen.push(FrozenCheck {
                name: "repair".into(),
                before,
                after: repair.params.content_hash(),
            });
            let mut ckpt = base_checkpoint(cfg, phase, cfg.seed).with_meta("causality", "causal");
            ckpt.insert_store("repair", &repair.params)?;
            ckpt.insert_store("denoise", &denoiser.params)?;
            Ok(PhaseOutput { checkpoint: ckpt, run })
        }
    }
}

pub fn train_teacher(data: &Dataset, cfg: &RunConfig) -> Result<PhaseOutput> {
    run_phase(Phase::Teacher, cfg, data, &BTreeMap::new())
}

pub fn distill(teacher: &Checkpoint, student: &Checkpoint, data: &Dataset, cfg: &RunConfig) -> Result<PhaseOutput> {
    let prior = BTreeMap::from([(Phase::Teacher, teacher.clone()), (Phase::StudentPretrain, student.clone())]);
    run_phase(Phase::Distill, cfg, data, &prior)
}

/// `pretrained` is required for [`Phase::DenoiseFinetune`] and ignored otherwise.
pub fn train_denoiser(
    repair: &Checkpoint,
    pretrained: Option<&Checkpoint>,
    data: &Dataset,
    cfg: &RunConfig,
    phase: Phase,
) -> Result<PhaseOutput> {
    if !matches!(phase, Phase::DenoisePretrain | Phase::DenoiseFinetune) {
        return Err(Error::invalid("train_denoiser", format!("{phase} is not a denoiser phase")));
    }
    let mut prior = BTreeMap::from([(Phase::Distill, repair.clone())]);
    if let Some(p) = pretrained {
        prior.insert(Phase::DenoisePretrain, p.clone());
    }
    run_phase(phase, cfg, data, &prior)
}

/// Every phase in order; returns each phase's output.
pub fn run_all(cfg: &RunConfig, data: &Dataset) -> Result<Vec<PhaseOutput>> {
    let mut prior = BTreeMap::new();
    let mut out = Vec::new();
    for phase in Phase::ALL {
        let o = run_phase(phase, cfg, data, &prior)?;
        prior.insert(phase, o.checkpoint.clone());
        out.push(o);
    }
    Ok(out)
}

// ---------------------------------------------------------------- inference

/// Repair, then optionally denoise, then resynthesize at the input length.
pub fn enhance(wave: &Waveform, stft: &StftConfig, repair: &RepairModel, denoise: Option<&DenoiseModel>) -> Result<Waveform> {
    if wave.sample_rate != stft.sample_rate {
        return Err(Error::Config(format!(
            "input sample rate {} does not match the configured {}",
            wave.sample_rate, stft.sample_rate
        )));
    }
    let mut spec = repair.run(&analyze(wave, stft)?)?;
    if let Some(d) = denoise {
        spec = d.run(&spec)?;
    }
    synthesize_len(&spec, wave.len())
}

// ---------------------------------------------------------------- causality probe

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub trials: usize,
    /// Largest output change on frames more than `budget` before a perturbation.
    pub max_past_deviation: f64,
    /// Largest distance back from a perturbed frame at which any output bit changed.
    /// Influence decays fast with distance (about 1e-16 at the edge of a 42-frame
    /// window), so the support is measured exactly rather than against a threshold.
    pub horizon: usize,
    pub budget: usize,
}

impl ProbeReport {
    pub fn causal_within_budget(&self) -> bool {
        self.max_past_deviation < PROBE_THRESHOLD && self.horizon <= self.budget
    }
}

pub const PROBE_THRESHOLD: f64 = 1e-9;

/// Perturbs single frames of random `[1, bins, frames]` inputs and watches earlier output frames.
///
/// `model` maps a complex spectrum to one with the same frame axis last.
pub fn causality_probe(
    model: &dyn Fn(&ComplexTensor) -> Result<ComplexTensor>,
    bins: usize,
    frames: usize,
    budget: usize,
    trials: usize,
    seed: u64,
) -> Result<ProbeReport> {
    if frames <= budget + 1 {
        return Err(Error::invalid("causality_probe", format!("{frames} frames leave no room past a budget of {budget}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
    let n = bins * frames;
    let mut report = ProbeReport {
        trials,
        max_past_deviation: 0.0,
        horizon: 0,
        budget,
    };
    for _ in 0..trials {
        let base = ComplexTensor::new(Tensor::new([1, bins, frames], gauss(n, &mut rng))?, Tensor::new([1, bins, frames], gauss(n, &mut rng))?)?;
        let lo = (budget + 8).min(frames - 1);
        let p = rng.random_range(lo..frames);
        let mut moved = base.clone();
        for f in 0..bins {
            moved.re.data_mut()[f * frames + p] += 4.0 * rng.sample::<f64, _>(StandardNormal);
            moved.im.data_mut()[f * frames + p] += 4.0 * rng.sample::<f64, _>(StandardNormal);
        }
        let (y0, y1) = (model(&base)?, model(&moved)?);
        if y0.shape() != y1.shape() || *y0.shape().last().unwrap_or(&0) != frames {
            return Err(Error::shape("causality_probe", "output shape", [bins, frames], y0.shape()));
        }
        let rows = y0.re.numel() / frames;
        let dev = |t: usize| -> f64 {
            (0..rows)
                .map(|r| {
                    let i = r * frames + t;
                    (y1.re.data()[i] - y0.re.data()[i]).abs().max((y1.im.data()[i] - y0.im.data()[i]).abs())
                })
                .fold(0.0, f64::max)
        };
        if let Some(first) = (0..p).find(|&t| dev(t) > 0.0) {
            report.horizon = report.horizon.max(p - first);
        }
        for t in 0..p.saturating_sub(budget) {
            report.max_past_deviation = report.max_past_deviation.max(dev(t));
        }
    }
    Ok(report)
}

/// Spectrum-level view of a repair network for the probe.
pub fn repair_probe_fn(model: &RepairModel) -> impl Fn(&ComplexTensor) -> Result<ComplexTensor> + '_ {
    move |z| {
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, false);
        let z = CVar::constant(&mut tape, z);
        let y = model.spectrum_forward(&mut tape, &p, z)?;
        Ok(y.value(&tape))
    }
}

pub fn denoise_probe_fn(model: &DenoiseModel) -> impl Fn(&ComplexTensor) -> Result<ComplexTensor> + '_ {
    move |z| {
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, false);
        let z = CVar::constant(&mut tape, z);
        Ok(model.forward(&mut tape, &p, z)?.value(&tape))
    }
}

/// Repair followed by denoise.
pub fn chain_probe_fn<'a>(repair: &'a RepairModel, denoise: &'a DenoiseModel) -> impl Fn(&ComplexTensor) -> Result<ComplexTensor> + 'a {
    move |z| {
        let mut tape = Tape::new();
        let rp = repair.params.bind(&mut tape, false);
        let dp = denoise.params.bind(&mut tape, false);
        let z = CVar::constant(&mut tape, z);
        let y = repair.spectrum_forward(&mut tape, &rp, z)?;
        Ok(denoise.forward(&mut tape, &dp, y)?.value(&tape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(len: usize, sr: u32) -> Waveform {
        Waveform::new((0..len).map(|n| (n as f64 * 0.05).sin() * 0.5).collect(), sr).unwrap()
    }

    fn train_cfg() -> TrainConfig {
        RunConfig::toy().train
    }

    #[test]
    fn identity_spec_is_bit_exact() {
        let x = tone(1000, 8000);
        let y = synthesize_degraded(&x, &DegradationSpec::identity(), 3).unwrap();
        assert_eq!(x.samples, y.samples);
    }

    #[test]
    fn zero_db_noise_matches_clean_energy() {
        let x = tone(8000, 8000);
        let spec = DegradationSpec { noise_snr_db: Some([0.0, 0.0]), ..Default::default() };
        for seed in 0..5 {
            let y = synthesize_degraded(&x, &spec, seed).unwrap();
            let noise: f64 = y.samples.iter().zip(&x.samples).map(|(a, b)| (a - b).powi(2)).sum();
            let db = 10.0 * (noise / x.energy()).log10();
            assert!(db.abs() < 0.5, "{db}");
        }
    }

    #[test]
    fn dropout_zeros_exactly_its_segments() {
        let x = tone(500, 8000);
        let mut y = x.samples.clone();
        apply_dropout(&mut y, &[(100, 180), (400, 900)]);
        for (i, (a, b)) in x.samples.iter().zip(&y).enumerate() {
            if (100..180).contains(&i) || i >= 400 {
                assert_eq!(*b, 0.0);
            } else {
                assert_eq!(a, b);
            }
        }
        let spec = DegradationSpec {
            dropout: Some(DropoutSpec { segments: [2, 2], length_ms: [5.0, 5.0] }),
            ..Default::default()
        };
        let (y, report) = synthesize_degraded_with_report(&x, &spec, 1).unwrap();
        assert_eq!(report.segments.len(), 2);
        for &(a, b) in &report.segments {
            assert_eq!(b - a, 40);
            assert!(y.samples[a..b].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn degradation_is_seeded_and_validated() {
        let x = tone(4000, 8000);
        let spec = RunConfig::toy().degradation;
        let a = synthesize_degraded(&x, &spec, 9).unwrap();
        assert_eq!(a, synthesize_degraded(&x, &spec, 9).unwrap());
        assert_ne!(a, synthesize_degraded(&x, &spec, 10).unwrap());
        assert!(a.samples.iter().all(|v| v.abs() <= 0.8));
        let bad = DegradationSpec { gain_db: Some([3.0, -3.0]), ..Default::default() };
        assert!(synthesize_degraded(&x, &bad, 0).is_err());
        let bad = DegradationSpec { lowpass_hz: Some([100.0, 5000.0]), ..Default::default() };
        assert!(synthesize_degraded(&x, &bad, 0).is_err());
        let empty = Waveform { samples: vec![], sample_rate: 8000 };
        assert!(synthesize_degraded(&empty, &DegradationSpec::identity(), 0).is_err());
    }

    #[test]
    fn lowpass_passes_dc_and_stops_nyquist() {
        let dc = lowpass(&vec![1.0; 400], 1000.0, 8000);
        assert!((dc[399] - 1.0).abs() < 1e-9);
        let alt: Vec<f64> = (0..400).map(|n| if n % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let y = lowpass(&alt, 1000.0, 8000);
        assert!(y[350..].iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn adamw_examples() {
        let mut cfg = train_cfg();
        cfg.weight_decay = 0.0;
        let mut p = ParamStore::new();
        p.add("w", Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
        let before = p.clone();
        let mut opt = AdamW::new(1e-3, &cfg);
        opt.step(&mut p, &[Tensor::zeros([3])]).unwrap();
        assert_eq!(p, before);

        let mut p = ParamStore::new();
        p.add("w", Tensor::new([1], vec![0.3]).unwrap()).unwrap();
        let mut opt = AdamW::new(1e-3, &cfg);
        opt.step(&mut p, &[Tensor::new([1], vec![1.0]).unwrap()]).unwrap();
        let moved = 0.3 - p.by_name("w").unwrap().item();
        assert!((moved - 1e-3).abs() < 1e-10, "{moved}");

        let mut cfg = train_cfg();
        cfg.weight_decay = 0.1;
        let mut p = before.clone();
        let mut opt = AdamW::new(0.1, &cfg);
        let mut last = p.by_name("w").unwrap().norm();
        for _ in 0..5 {
            opt.step(&mut p, &[Tensor::zeros([3])]).unwrap();
            let n = p.by_name("w").unwrap().norm();
            assert!(n < last);
            last = n;
        }
    }

    #[test]
    fn adamw_rejects_nan() {
        let mut p = ParamStore::new();
        p.add("w", Tensor::new([2], vec![1.0, 2.0]).unwrap()).unwrap();
        let before = p.clone();
        let mut opt = AdamW::new(1e-3, &train_cfg());
        let err = opt.step(&mut p, &[Tensor::new([2], vec![0.0, f64::NAN]).unwrap()]).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
        assert_eq!(p, before);
    }

    #[test]
    fn phase_order_and_names() {
        for (i, p) in Phase::ALL.iter().enumerate() {
            assert_eq!(p.name().parse::<Phase>().unwrap(), *p);
            assert!(p.prerequisites().iter().all(|q| Phase::ALL[..i].contains(q)));
        }
        assert!("finetune".parse::<Phase>().is_err());
        assert_eq!(Phase::DenoisePretrain.stage(), Stage::Stage2Pre);
    }

    #[test]
    fn missing_prerequisite_is_reported() {
        let cfg = RunConfig::toy();
        let data = Dataset::from_clean(vec![(tone(2000, 8000), 1)], &cfg.degradation).unwrap();
        let err = run_phase(Phase::DenoiseFinetune, &cfg, &data, &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, Error::MissingPrerequisite(_)), "{err}");
    }

    #[test]
    fn identity_model_has_zero_deviation() {
        let r = causality_probe(&|z: &ComplexTensor| Ok(z.clone()), 5, 20, 0, 10, 1).unwrap();
        assert_eq!((r.max_past_deviation, r.horizon), (0.0, 0));
        let shift = |z: &ComplexTensor| {
            let f = |t: &Tensor| Tensor::from_fn(t.shape().to_vec(), |i| if i % 20 < 17 { t.data()[i + 3] } else { 0.0 });
            ComplexTensor::new(f(&z.re), f(&z.im))
        };
        let r = causality_probe(&shift, 5, 20, 3, 10, 2).unwrap();
        assert_eq!(r.horizon, 3);
        assert!(r.causal_within_budget());
    }

    #[test]
    fn fixture_is_deterministic() {
        let cfg = RunConfig::toy();
        let a = Dataset::toy(&cfg).unwrap();
        assert_eq!(a.len(), TOY_UTTERANCES);
        assert_eq!(a, Dataset::toy(&cfg).unwrap());
        for u in &a.items {
            assert_eq!(u.clean.len(), 8000);
            let peak = u.clean.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!((peak - 0.5).abs() < 1e-12);
            assert_ne!(u.clean.samples, u.degraded.samples);
        }
    }
}
