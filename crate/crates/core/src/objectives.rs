//! Spectral, waveform and adversarial training losses, and the two
//! spectrogram discriminator families.
//!
//! Every loss has a tape form (`*_var`) used for training and a plain form
//! evaluated on a throwaway tape. Reductions are means over elements.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Builder, ParamStore, WnConv};
use crate::numcore::{CVar, ComplexTensor, Conv2dSpec, PaddingMode, Tape, Tensor, Var};
use crate::spectral::{stft_var, ComplexSpectrum, StftConfig, Waveform, MAG_FLOOR};

/// SI-SNR losses are clamped to `[-SI_SNR_CLAMP, SI_SNR_CLAMP]` dB.
pub const SI_SNR_CLAMP: f64 = 60.0;
/// Energies below this count as silence.
pub const SILENCE: f64 = 1e-20;
pub const LEAKY_SLOPE: f64 = 0.1;

/// Non-negative magnitudes `[bins, frames]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MagnitudeSpectrum {
    values: Tensor,
}

impl MagnitudeSpectrum {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.ndim() != 2 {
            return Err(Error::shape("magnitude_spectrum", "rank", 2, values.ndim()));
        }
        if values.data().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("magnitude_spectrum", "values must be finite and non-negative"));
        }
        Ok(MagnitudeSpectrum { values })
    }

    pub fn from_spectrum(spec: &ComplexSpectrum) -> Self {
        MagnitudeSpectrum { values: spec.magnitude() }
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }
}

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(op, "operands", tape.shape(a), tape.shape(b)));
    }
    Ok(())
}

fn sum_sq(tape: &mut Tape, x: Var) -> Var {
    let sq = tape.square(x);
    tape.sum(sq)
}

/// `||X - X̂||_F / ||X̂||_F`, the denominator floored.
pub fn sc_loss_var(tape: &mut Tape, x: Var, xh: Var) -> Result<Var> {
    same_shape(tape, "sc_loss", x, xh)?;
    let d = tape.sub(x, xh)?;
    let num = sum_sq(tape, d);
    let num = tape.sqrt(num);
    let den = sum_sq(tape, xh);
    let den = tape.sqrt(den);
    let den = tape.clamp_min(den, MAG_FLOOR);
    tape.div(num, den)
}

/// Mean `|ln X - ln X̂|` over floored magnitudes.
pub fn log_mag_loss_var(tape: &mut Tape, x: Var, xh: Var) -> Result<Var> {
    same_shape(tape, "log_mag_loss", x, xh)?;
    let a = tape.clamp_min(x, MAG_FLOOR);
    let a = tape.log(a);
    let b = tape.clamp_min(xh, MAG_FLOOR);
    let b = tape.log(b);
    let d = tape.sub(a, b)?;
    let d = tape.abs(d);
    Ok(tape.mean(d))
}

/// Mean of `relu(X^0.5 - X̂^0.5)^2`: only under-estimates cost anything.
pub fn asym_loss_var(tape: &mut Tape, x: Var, xh: Var) -> Result<Var> {
    same_shape(tape, "asym_loss", x, xh)?;
    let a = tape.clamp_min(x, MAG_FLOOR);
    let a = tape.sqrt(a);
    let b = tape.clamp_min(xh, MAG_FLOOR);
    let b = tape.sqrt(b);
    let d = tape.sub(a, b)?;
    let d = tape.relu(d);
    let d = tape.square(d);
    Ok(tape.mean(d))
}

/// `|S|^0.5 e^{j arg S}` and `|S|^0.5` with the magnitude floored.
fn compress(tape: &mut Tape, s: CVar) -> Result<(CVar, Var)> {
    let mag = s.abs(tape)?;
    let mag = tape.clamp_min(mag, MAG_FLOOR);
    let k = tape.powf(mag, -0.5);
    let c = CVar::new(tape.mul(s.re, k)?, tape.mul(s.im, k)?);
    Ok((c, tape.sqrt(mag)))
}

/// Power-law compressed loss: complex term plus magnitude term, each a mean over bins.
pub fn plc_loss_var(tape: &mut Tape, s: CVar, sh: CVar) -> Result<Var> {
    same_shape(tape, "plc_loss", s.re, sh.re)?;
    same_shape(tape, "plc_loss", s.im, sh.im)?;
    let (cs, ms) = compress(tape, s)?;
    let (ch, mh) = compress(tape, sh)?;
    let dr = tape.sub(cs.re, ch.re)?;
    let di = tape.sub(cs.im, ch.im)?;
    let dr = tape.square(dr);
    let di = tape.square(di);
    let complex = tape.add(dr, di)?;
    let complex = tape.mean(complex);
    let dm = tape.sub(ms, mh)?;
    let dm = tape.square(dm);
    let mag = tape.mean(dm);
    tape.add(complex, mag)
}

fn dot(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let p = tape.mul(a, b)?;
    Ok(tape.sum(p))
}

fn center(tape: &mut Tape, x: Var) -> Result<Var> {
    let m = tape.mean(x);
    tape.sub(x, m)
}

/// Negative scale-invariant SNR in dB, clamped to ±[`SI_SNR_CLAMP`].
/// The target projection is `<ŝ,s>/||s||² · s`. `zero_mean` removes the means first.
pub fn si_snr_loss_var(tape: &mut Tape, s: Var, sh: Var, zero_mean: bool) -> Result<Var> {
    same_shape(tape, "si_snr_loss", s, sh)?;
    let (s, sh) = if zero_mean { (center(tape, s)?, center(tape, sh)?) } else { (s, sh) };
    let ss = dot(tape, s, s)?;
    if tape.value(ss).item() < SILENCE {
        return Err(Error::invalid("si_snr_loss", "target is silent"));
    }
    let proj = dot(tape, sh, s)?;
    let alpha = tape.div(proj, ss)?;
    let target = tape.mul(s, alpha)?;
    let err = tape.sub(sh, target)?;
    let pt = sum_sq(tape, target);
    let pt = tape.clamp_min(pt, SILENCE);
    let pe = sum_sq(tape, err);
    let pe = tape.clamp_min(pe, SILENCE);
    let ratio = tape.div(pe, pt)?;
    let db = tape.log(ratio);
    let db = tape.scale(db, 10.0 / std::f64::consts::LN_10);
    Ok(tape.clamp(db, -SI_SNR_CLAMP, SI_SNR_CLAMP))
}

fn eval2(a: &Tensor, b: &Tensor, f: impl FnOnce(&mut Tape, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let l = f(&mut tape, a, b)?;
    Ok(tape.value(l).item())
}

pub fn sc_loss(x: &MagnitudeSpectrum, xh: &MagnitudeSpectrum) -> Result<f64> {
    eval2(&x.values, &xh.values, sc_loss_var)
}

pub fn log_mag_loss(x: &MagnitudeSpectrum, xh: &MagnitudeSpectrum) -> Result<f64> {
    eval2(&x.values, &xh.values, log_mag_loss_var)
}

pub fn asym_loss(x: &MagnitudeSpectrum, xh: &MagnitudeSpectrum) -> Result<f64> {
    eval2(&x.values, &xh.values, asym_loss_var)
}

pub fn plc_loss(s: &ComplexSpectrum, sh: &ComplexSpectrum) -> Result<f64> {
    plc_loss_complex(&s.to_complex_tensor(), &sh.to_complex_tensor())
}

/// [`plc_loss`] on bare complex arrays of any matching shape.
pub fn plc_loss_complex(s: &ComplexTensor, sh: &ComplexTensor) -> Result<f64> {
    let mut tape = Tape::new();
    let a = CVar::constant(&mut tape, s);
    let b = CVar::constant(&mut tape, sh);
    let l = plc_loss_var(&mut tape, a, b)?;
    Ok(tape.value(l).item())
}

pub fn si_snr_loss(s: &Waveform, sh: &Waveform) -> Result<f64> {
    si_snr_loss_with(&s.samples, &sh.samples, true)
}

pub fn si_snr_loss_with(s: &[f64], sh: &[f64], zero_mean: bool) -> Result<f64> {
    let a = Tensor::new([s.len()], s.to_vec())?;
    let b = Tensor::new([sh.len()], sh.to_vec())?;
    eval2(&a, &b, |t, a, b| si_snr_loss_var(t, a, b, zero_mean))
}

/// Which weighted sum of loss parts a training phase minimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2Pre,
    Stage2,
}

impl Stage {
    /// `(part, weight)` in summation order.
    pub fn weights(self) -> &'static [(&'static str, f64)] {
        match self {
            Stage::Stage1 => &[("sc", 1.0), ("log_mag", 1.0), ("asym", 0.5), ("gen_adv", 1.0), ("fm", 2.0)],
            Stage::Stage2Pre => &[("si_snr", 1.0), ("plc", 1.0), ("asym", 1.0)],
            Stage::Stage2 => &[("si_snr", 1.0), ("plc", 1.0), ("asym", 1.0), ("gen_adv", 1.0), ("fm", 2.0)],
        }
    }

    pub fn adversarial(self) -> bool {
        self != Stage::Stage2Pre
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2Pre => "stage2_pre",
            Stage::Stage2 => "stage2",
        }
    }
}

/// Named scalar loss parts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    parts: BTreeMap<String, f64>,
}

impl LossReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.insert(name, value);
        self
    }

    pub fn insert(&mut self, name: &str, value: f64) {
        self.parts.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.parts.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.parts.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn is_finite(&self) -> bool {
        self.parts.values().all(|v| v.is_finite())
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.iter().map(|(k, v)| format!("{k}={v:.6}")).collect();
        f.write_str(&parts.join(" "))
    }
}

/// Weighted sum of the parts `stage` needs.
pub fn total_losses(parts: &LossReport, stage: Stage) -> Result<f64> {
    let mut total = 0.0;
    for (i, &(name, w)) in stage.weights().iter().enumerate() {
        let v = parts
            .get(name)
            .ok_or_else(|| Error::invalid("total_losses", format!("{} needs part '{name}'", stage.name())))?;
        total = if i == 0 { w * v } else { total + w * v };
    }
    Ok(total)
}

/// Tape form of [`total_losses`]; the value matches it bit for bit.
pub fn total_losses_var(tape: &mut Tape, parts: &BTreeMap<&str, Var>, stage: Stage) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(name, w) in stage.weights() {
        let v = *parts
            .get(name)
            .ok_or_else(|| Error::invalid("total_losses", format!("{} needs part '{name}'", stage.name())))?;
        let term = tape.scale(v, w);
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    total.ok_or_else(|| Error::invalid("total_losses", "empty stage"))
}

/// Sizes of both discriminator families.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    /// FFT sizes of the magnitude sub-discriminators; hop is a quarter.
    pub mrd_ffts: Vec<usize>,
    /// FFT sizes of the multi-band sub-discriminators.
    pub mbd_ffts: Vec<usize>,
    pub mbd_bands: usize,
    pub channels: usize,
    /// `[freq, time]` kernel of the hidden convolutions.
    pub kernel: [usize; 2],
}

impl DiscriminatorConfig {
    pub fn paper() -> Self {
        DiscriminatorConfig {
            mrd_ffts: vec![128, 256, 512, 1024, 2048, 4096],
            mbd_ffts: vec![512, 1024, 2048],
            mbd_bands: 5,
            channels: 32,
            kernel: [9, 3],
        }
    }

    pub fn toy() -> Self {
        DiscriminatorConfig {
            mrd_ffts: vec![64, 128, 256],
            mbd_ffts: vec![256],
            mbd_bands: 5,
            channels: 4,
            kernel: [9, 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mrd_ffts.is_empty() && self.mbd_ffts.is_empty() {
            return Err(Error::Config("at least one sub-discriminator is required".into()));
        }
        if self.channels == 0 || self.mbd_bands == 0 || self.kernel.contains(&0) {
            return Err(Error::Config("discriminator sizes must be > 0".into()));
        }
        for &n in self.mrd_ffts.iter().chain(&self.mbd_ffts) {
            if n < 4 {
                return Err(Error::Config(format!("discriminator fft size {n} is too small")));
            }
            if self.mbd_ffts.contains(&n) && n / 2 + 1 < self.mbd_bands {
                return Err(Error::Config(format!("fft size {n} has fewer bins than bands")));
            }
        }
        Ok(())
    }
}

/// Band edges splitting `bins` into `n` contiguous parts whose widths differ by at most one.
pub fn band_edges(bins: usize, n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .map(|i| {
            let (a, b) = (i * bins / n, (i + 1) * bins / n);
            (a, b - a)
        })
        .collect()
}

/// Score map and every intermediate activation of one sub-discriminator.
#[derive(Clone, Debug)]
pub struct DiscOutput {
    pub score: Var,
    pub features: Vec<Var>,
}

fn hidden_spec(kernel: [usize; 2], stride: usize) -> Conv2dSpec {
    Conv2dSpec::new()
        .stride(stride, 1)
        .pad_freq(kernel[0] / 2, kernel[0] / 2)
        .time_padding(PaddingMode::NonCausalTime, kernel[1])
}

/// Weight-normalized conv stack; LeakyReLU after every layer but the last.
/// Layers 1 to 4 halve the frequency axis; the last one emits a single channel.
#[derive(Clone, Debug)]
struct ConvStack {
    layers: Vec<WnConv>,
}

impl ConvStack {
    fn new(b: &mut Builder, name: &str, cin: usize, depth: usize, cfg: &DiscriminatorConfig) -> Result<Self> {
        let c = cfg.channels;
        b.scoped(name, |b| {
            let mut layers = Vec::new();
            for i in 0..depth {
                let last = i + 1 == depth;
                let (kernel, stride) = match i {
                    _ if last => ([3, 3], 1),
                    0 => (cfg.kernel, 1),
                    1..=4 => (cfg.kernel, 2),
                    _ => ([3, 3], 1),
                };
                let cin = if i == 0 { cin } else { c };
                let cout = if last { 1 } else { c };
                layers.push(WnConv::new(b, &format!("conv{i}"), cin, cout, kernel, hidden_spec(kernel, stride))?);
            }
            Ok(ConvStack { layers })
        })
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, features: &mut Vec<Var>) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(tape, p, h)?;
            if i + 1 < self.layers.len() {
                h = tape.leaky_relu(h, LEAKY_SLOPE);
            }
            features.push(h);
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
enum SubDisc {
    /// Magnitude spectrogram through one stack.
    Resolution { stft: StftConfig, stack: ConvStack },
    /// Real and imaginary parts split into bands, one stack per band.
    Bands { stft: StftConfig, edges: Vec<(usize, usize)>, stacks: Vec<ConvStack> },
}

/// Magnitude sub-discriminators followed by multi-band sub-discriminators.
#[derive(Clone, Debug)]
pub struct DiscriminatorBank {
    pub config: DiscriminatorConfig,
    pub params: ParamStore,
    subs: Vec<SubDisc>,
}

pub const MRD_DEPTH: usize = 7;
pub const MBD_DEPTH: usize = 5;

pub fn build_discriminators(cfg: &DiscriminatorConfig, sample_rate: u32, seed: u64) -> Result<DiscriminatorBank> {
    cfg.validate()?;
    let mut b = Builder::new(seed);
    let mut subs = Vec::new();
    let base = StftConfig::toy();
    let stft = |n: usize| StftConfig { sample_rate, ..base.with_fft(n) };
    for (k, &n) in cfg.mrd_ffts.iter().enumerate() {
        let stack = ConvStack::new(&mut b, &format!("mrd{k}"), 1, MRD_DEPTH, cfg)?;
        subs.push(SubDisc::Resolution { stft: stft(n), stack });
    }
    for (k, &n) in cfg.mbd_ffts.iter().enumerate() {
        let edges = band_edges(n / 2 + 1, cfg.mbd_bands);
        let stacks = (0..cfg.mbd_bands)
            .map(|j| ConvStack::new(&mut b, &format!("mbd{k}.band{j}"), 2, MBD_DEPTH, cfg))
            .collect::<Result<Vec<_>>>()?;
        subs.push(SubDisc::Bands { stft: stft(n), edges, stacks });
    }
    Ok(DiscriminatorBank {
        config: cfg.clone(),
        params: b.finish(),
        subs,
    })
}

impl DiscriminatorBank {
    pub fn len(&self) -> usize {
        self.subs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subs.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Shortest waveform every sub-discriminator accepts.
    pub fn min_len(&self) -> usize {
        self.subs
            .iter()
            .map(|s| match s {
                SubDisc::Resolution { stft, .. } | SubDisc::Bands { stft, .. } => stft.fft_len / 2 + 1,
            })
            .max()
            .unwrap_or(0)
    }

    /// One output per sub-discriminator for a waveform `[len]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, wave: Var) -> Result<Vec<DiscOutput>> {
        let len = tape.shape(wave).iter().product::<usize>();
        if len < self.min_len() {
            return Err(Error::shape("discriminator", "waveform length (minimum)", self.min_len(), len));
        }
        let mut outs = Vec::with_capacity(self.subs.len());
        for sub in &self.subs {
            let mut features = Vec::new();
            let score = match sub {
                SubDisc::Resolution { stft, stack } => {
                    let z = stft_var(tape, wave, stft)?;
                    let mag = z.abs(tape)?;
                    let s = tape.shape(mag).to_vec();
                    let x = tape.reshape(mag, &[1, s[0], s[1]])?;
                    stack.forward(tape, p, x, &mut features)?
                }
                SubDisc::Bands { stft, edges, stacks } => {
                    let z = stft_var(tape, wave, stft)?;
                    let s = tape.shape(z.re).to_vec();
                    let re = tape.reshape(z.re, &[1, s[0], s[1]])?;
                    let im = tape.reshape(z.im, &[1, s[0], s[1]])?;
                    let x = tape.concat(&[re, im], 0)?;
                    let mut scores = Vec::new();
                    for (&(start, width), stack) in edges.iter().zip(stacks) {
                        let band = tape.narrow(x, 1, start, width)?;
                        scores.push(stack.forward(tape, p, band, &mut features)?);
                    }
                    tape.concat(&scores, 1)?
                }
            };
            outs.push(DiscOutput { score, features });
        }
        Ok(outs)
    }
}

fn mean_sq_offset(tape: &mut Tape, x: Var, target: f64) -> Var {
    let d = tape.offset(x, -target);
    let d = tape.square(d);
    tape.mean(d)
}

fn average(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let (first, rest) = terms
        .split_first()
        .ok_or_else(|| Error::invalid("adversarial_losses", "no sub-discriminators"))?;
    let mut acc = *first;
    for &t in rest {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / terms.len() as f64))
}

/// Least-squares discriminator objective `(D(s)-1)² + D(ŝ)²`, averaged over sub-discriminators.
pub fn discriminator_loss_from_scores(tape: &mut Tape, real: &[Var], fake: &[Var]) -> Result<Var> {
    if real.len() != fake.len() {
        return Err(Error::shape("adversarial_losses", "sub-discriminator count", real.len(), fake.len()));
    }
    let mut terms = Vec::new();
    for (&r, &f) in real.iter().zip(fake) {
        let a = mean_sq_offset(tape, r, 1.0);
        let b = mean_sq_offset(tape, f, 0.0);
        terms.push(tape.add(a, b)?);
    }
    average(tape, &terms)
}

/// Generator objective `(D(ŝ)-1)²`, averaged over sub-discriminators.
pub fn generator_loss_from_scores(tape: &mut Tape, fake: &[Var]) -> Result<Var> {
    let terms: Vec<Var> = fake.iter().map(|&f| mean_sq_offset(tape, f, 1.0)).collect();
    average(tape, &terms)
}

/// Mean over layers of the per-layer mean absolute feature difference, averaged over sub-discriminators.
pub fn feature_matching_loss(tape: &mut Tape, real: &[Vec<Var>], fake: &[Vec<Var>]) -> Result<Var> {
    if real.len() != fake.len() {
        return Err(Error::shape("feature_matching", "sub-discriminator count", real.len(), fake.len()));
    }
    let mut terms = Vec::new();
    for (r, f) in real.iter().zip(fake) {
        if r.len() != f.len() {
            return Err(Error::shape("feature_matching", "layer count", r.len(), f.len()));
        }
        let mut layers = Vec::new();
        for (&a, &b) in r.iter().zip(f) {
            let d = tape.sub(a, b)?;
            let d = tape.abs(d);
            layers.push(tape.mean(d));
        }
        terms.push(average(tape, &layers)?);
    }
    average(tape, &terms)
}

/// `(gen, fm, disc)` on the tape.
#[derive(Clone, Copy, Debug)]
pub struct AdversarialVars {
    pub gen: Var,
    pub fm: Var,
    pub disc: Var,
}

fn check_lengths(tape: &Tape, s: Var, sh: Var) -> Result<()> {
    if tape.shape(s) != tape.shape(sh) {
        return Err(Error::shape("adversarial_losses", "waveform length", tape.shape(s), tape.shape(sh)));
    }
    Ok(())
}

/// Generator and feature-matching terms from one pass over `s` and `ŝ`.
pub fn generator_losses_var(tape: &mut Tape, bank: &DiscriminatorBank, p: &Bound, s: Var, sh: Var) -> Result<(Var, Var)> {
    check_lengths(tape, s, sh)?;
    let real = bank.forward(tape, p, s)?;
    let fake = bank.forward(tape, p, sh)?;
    let scores: Vec<Var> = fake.iter().map(|o| o.score).collect();
    let gen = generator_loss_from_scores(tape, &scores)?;
    let rf: Vec<Vec<Var>> = real.into_iter().map(|o| o.features).collect();
    let ff: Vec<Vec<Var>> = fake.into_iter().map(|o| o.features).collect();
    let fm = feature_matching_loss(tape, &rf, &ff)?;
    Ok((gen, fm))
}

pub fn discriminator_loss_var(tape: &mut Tape, bank: &DiscriminatorBank, p: &Bound, s: Var, sh: Var) -> Result<Var> {
    check_lengths(tape, s, sh)?;
    let real: Vec<Var> = bank.forward(tape, p, s)?.iter().map(|o| o.score).collect();
    let fake: Vec<Var> = bank.forward(tape, p, sh)?.iter().map(|o| o.score).collect();
    discriminator_loss_from_scores(tape, &real, &fake)
}

pub fn adversarial_losses_var(tape: &mut Tape, bank: &DiscriminatorBank, p: &Bound, s: Var, sh: Var) -> Result<AdversarialVars> {
    check_lengths(tape, s, sh)?;
    let real = bank.forward(tape, p, s)?;
    let fake = bank.forward(tape, p, sh)?;
    let rs: Vec<Var> = real.iter().map(|o| o.score).collect();
    let fs: Vec<Var> = fake.iter().map(|o| o.score).collect();
    let gen = generator_loss_from_scores(tape, &fs)?;
    let disc = discriminator_loss_from_scores(tape, &rs, &fs)?;
    let rf: Vec<Vec<Var>> = real.into_iter().map(|o| o.features).collect();
    let ff: Vec<Vec<Var>> = fake.into_iter().map(|o| o.features).collect();
    let fm = feature_matching_loss(tape, &rf, &ff)?;
    Ok(AdversarialVars { gen, fm, disc })
}

/// Adversarial loss values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdversarialLosses {
    pub gen: f64,
    pub fm: f64,
    pub disc: f64,
}

pub fn adversarial_losses(bank: &DiscriminatorBank, s: &Waveform, sh: &Waveform) -> Result<AdversarialLosses> {
    if s.len() != sh.len() {
        return Err(Error::shape("adversarial_losses", "waveform length", s.len(), sh.len()));
    }
    let mut tape = Tape::new();
    let p = bank.params.bind(&mut tape, false);
    let a = tape.constant(Tensor::new([s.len()], s.samples.clone())?);
    let b = tape.constant(Tensor::new([sh.len()], sh.samples.clone())?);
    let v = adversarial_losses_var(&mut tape, bank, &p, a, b)?;
    Ok(AdversarialLosses {
        gen: tape.value(v.gen).item(),
        fm: tape.value(v.fm).item(),
        disc: tape.value(v.disc).item(),
    })
}
