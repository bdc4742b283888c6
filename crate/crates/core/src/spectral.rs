//! STFT analysis and overlap-add synthesis.
//!
//! Frames are centered: the signal is reflect-padded by `fft_len / 2` on both
//! sides so frame `t` is centered on sample `t * hop`. The analysis window is a
//! periodic Hann of `frame_len` samples placed in the middle of the FFT
//! buffer; synthesis multiplies by the same window and divides by the
//! accumulated squared window.
//!
//! Both transforms are linear, and their adjoints are exposed as tape
//! operations so losses can differentiate through them.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{CVar, ComplexTensor, CustomOp, Tape, Tensor, Var};

/// Floor applied to magnitudes before logarithms or fractional powers.
pub const MAG_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    #[default]
    Hann,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub frame_len: usize,
    pub hop: usize,
    pub fft_len: usize,
    #[serde(default)]
    pub window: Window,
}

impl StftConfig {
    /// 48 kHz, 20 ms Hann frames, 10 ms hop, 960-point FFT (481 bins).
    pub fn paper() -> Self {
        StftConfig {
            sample_rate: 48_000,
            frame_len: 960,
            hop: 480,
            fft_len: 960,
            window: Window::Hann,
        }
    }

    /// 8 kHz, 256-point frames at 50% overlap (129 bins).
    pub fn toy() -> Self {
        StftConfig {
            sample_rate: 8_000,
            frame_len: 256,
            hop: 128,
            fft_len: 256,
            window: Window::Hann,
        }
    }

    /// A configuration at another resolution sharing this sample rate, with 25% hop.
    pub fn with_fft(&self, fft_len: usize) -> Self {
        StftConfig {
            sample_rate: self.sample_rate,
            frame_len: fft_len,
            hop: (fft_len / 4).max(1),
            fft_len,
            window: self.window,
        }
    }

    pub fn bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Config("stft.sample_rate must be > 0".into()));
        }
        if self.hop == 0 || self.frame_len == 0 || self.hop > self.frame_len {
            return Err(Error::Config(format!(
                "stft hop {} must be in 1..=frame_len {}",
                self.hop, self.frame_len
            )));
        }
        if self.fft_len < self.frame_len || self.fft_len % 2 != 0 {
            return Err(Error::Config(format!(
                "stft fft_len {} must be even and >= frame_len {}",
                self.fft_len, self.frame_len
            )));
        }
        Ok(())
    }

    pub fn frames_for(&self, len: usize) -> usize {
        let pad = self.fft_len / 2;
        1 + (len + 2 * pad - self.fft_len) / self.hop
    }

    /// Window of `fft_len` samples: periodic Hann of `frame_len`, centered, zeros outside.
    pub fn window(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.fft_len];
        let off = (self.fft_len - self.frame_len) / 2;
        let n = self.frame_len as f64;
        for i in 0..self.frame_len {
            w[off + i] = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n).cos();
        }
        w
    }
}

/// Mono samples at a sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("waveform", "sample rate must be > 0"));
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("waveform", "non-finite sample"));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|x| x * x).sum()
    }
}

/// One-sided complex spectrum, `re`/`im` shaped `[bins, frames]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum {
    pub re: Tensor,
    pub im: Tensor,
    pub config: StftConfig,
}

impl ComplexSpectrum {
    pub fn new(re: Tensor, im: Tensor, config: StftConfig) -> Result<Self> {
        if re.shape() != im.shape() || re.ndim() != 2 {
            return Err(Error::shape("spectrum", "re/im", re.shape(), im.shape()));
        }
        if re.dim(0) != config.bins() {
            return Err(Error::shape("spectrum", "bins", config.bins(), re.dim(0)));
        }
        Ok(ComplexSpectrum { re, im, config })
    }

    pub fn zeros(config: StftConfig, frames: usize) -> Self {
        let bins = config.bins();
        ComplexSpectrum {
            re: Tensor::zeros([bins, frames]),
            im: Tensor::zeros([bins, frames]),
            config,
        }
    }

    pub fn bins(&self) -> usize {
        self.re.dim(0)
    }

    pub fn frames(&self) -> usize {
        self.re.dim(1)
    }

    pub fn magnitude(&self) -> Tensor {
        self.re.zip_map(&self.im, f64::hypot).expect("shape checked")
    }

    pub fn phase(&self) -> Tensor {
        self.im.zip_map(&self.re, f64::atan2).expect("shape checked")
    }

    /// `[1, bins, frames]` complex view used as network input.
    pub fn to_complex_tensor(&self) -> ComplexTensor {
        let shape = [1, self.bins(), self.frames()];
        ComplexTensor {
            re: self.re.clone().reshape(shape).expect("same numel"),
            im: self.im.clone().reshape(shape).expect("same numel"),
        }
    }

    pub fn from_complex_tensor(z: &ComplexTensor, config: StftConfig) -> Result<Self> {
        let s = z.shape();
        if s.len() != 3 || s[0] != 1 {
            return Err(Error::shape("spectrum", "channel axis", 1, s));
        }
        ComplexSpectrum::new(
            z.re.clone().reshape([s[1], s[2]])?,
            z.im.clone().reshape([s[1], s[2]])?,
            config,
        )
    }

    pub fn scale(&self, alpha: f64) -> Self {
        ComplexSpectrum {
            re: self.re.map(|v| v * alpha),
            im: self.im.map(|v| v * alpha),
            config: self.config.clone(),
        }
    }
}

fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= len as isize {
        m = period - m;
    }
    m as usize
}

struct Plans {
    fwd: Arc<dyn rustfft::Fft<f64>>,
    inv: Arc<dyn rustfft::Fft<f64>>,
}

fn plans(n: usize) -> Plans {
    let mut planner = FftPlanner::new();
    Plans {
        fwd: planner.plan_fft_forward(n),
        inv: planner.plan_fft_inverse(n),
    }
}

/// Raw STFT of `x`; output rows are bins, columns frames.
fn stft_raw(x: &[f64], cfg: &StftConfig) -> (Vec<f64>, Vec<f64>, usize) {
    let n = cfg.fft_len;
    let pad = (n / 2) as isize;
    let frames = cfg.frames_for(x.len());
    let bins = cfg.bins();
    let win = cfg.window();
    let p = plans(n);
    let mut re = vec![0.0; bins * frames];
    let mut im = vec![0.0; bins * frames];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for t in 0..frames {
        let start = (t * cfg.hop) as isize - pad;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(x[reflect(start + i as isize, x.len())] * win[i], 0.0);
        }
        p.fwd.process(&mut buf);
        for k in 0..bins {
            re[k * frames + t] = buf[k].re;
            im[k * frames + t] = buf[k].im;
        }
    }
    (re, im, frames)
}

/// Adjoint of `stft_raw` for a signal of `len` samples.
fn stft_adjoint(g_re: &[f64], g_im: &[f64], frames: usize, len: usize, cfg: &StftConfig) -> Vec<f64> {
    let n = cfg.fft_len;
    let pad = (n / 2) as isize;
    let bins = cfg.bins();
    let win = cfg.window();
    let p = plans(n);
    let mut gx = vec![0.0; len];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for t in 0..frames {
        buf.fill(Complex::new(0.0, 0.0));
        for k in 0..bins {
            buf[k] = Complex::new(g_re[k * frames + t], g_im[k * frames + t]);
        }
        p.inv.process(&mut buf);
        let start = (t * cfg.hop) as isize - pad;
        for (i, b) in buf.iter().enumerate() {
            gx[reflect(start + i as isize, len)] += b.re * win[i];
        }
    }
    gx
}

/// Per-bin weight of the one-sided inverse: DC and Nyquist once, the rest twice.
fn onesided_weight(k: usize, n: usize) -> f64 {
    if k == 0 || 2 * k == n {
        1.0
    } else {
        2.0
    }
}

fn ola_denominator(frames: usize, cfg: &StftConfig) -> (Vec<f64>, Vec<f64>) {
    let n = cfg.fft_len;
    let win = cfg.window();
    let total = (frames - 1) * cfg.hop + n;
    let mut den = vec![0.0; total];
    for t in 0..frames {
        for i in 0..n {
            den[t * cfg.hop + i] += win[i] * win[i];
        }
    }
    (win, den)
}

/// Overlap-add inverse producing `len` samples.
fn istft_raw(re: &[f64], im: &[f64], frames: usize, len: usize, cfg: &StftConfig) -> Vec<f64> {
    let n = cfg.fft_len;
    let pad = n / 2;
    let bins = cfg.bins();
    let (win, den) = ola_denominator(frames, cfg);
    let p = plans(n);
    let mut acc = vec![0.0; den.len()];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for t in 0..frames {
        buf.fill(Complex::new(0.0, 0.0));
        for k in 0..bins {
            let mut z = Complex::new(re[k * frames + t], im[k * frames + t]);
            if k == 0 || 2 * k == n {
                z.im = 0.0;
            }
            buf[k] = z;
            if k > 0 && 2 * k < n {
                buf[n - k] = z.conj();
            }
        }
        p.inv.process(&mut buf);
        for i in 0..n {
            acc[t * cfg.hop + i] += buf[i].re / n as f64 * win[i];
        }
    }
    (0..len)
        .map(|i| {
            let j = i + pad;
            if j < den.len() && den[j] > 1e-10 {
                acc[j] / den[j]
            } else {
                0.0
            }
        })
        .collect()
}

/// Adjoint of `istft_raw`.
fn istft_adjoint(g: &[f64], frames: usize, cfg: &StftConfig) -> (Vec<f64>, Vec<f64>) {
    let n = cfg.fft_len;
    let pad = n / 2;
    let bins = cfg.bins();
    let (win, den) = ola_denominator(frames, cfg);
    let p = plans(n);
    let mut gacc = vec![0.0; den.len()];
    for (i, &gi) in g.iter().enumerate() {
        let j = i + pad;
        if j < den.len() && den[j] > 1e-10 {
            gacc[j] = gi / den[j];
        }
    }
    let mut g_re = vec![0.0; bins * frames];
    let mut g_im = vec![0.0; bins * frames];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for t in 0..frames {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(gacc[t * cfg.hop + i] * win[i] / n as f64, 0.0);
        }
        p.fwd.process(&mut buf);
        for k in 0..bins {
            let c = onesided_weight(k, n);
            g_re[k * frames + t] = c * buf[k].re;
            g_im[k * frames + t] = if k == 0 || 2 * k == n { 0.0 } else { c * buf[k].im };
        }
    }
    (g_re, g_im)
}

/// STFT of a waveform.
pub fn analyze(w: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrum> {
    cfg.validate()?;
    if w.is_empty() {
        return Err(Error::invalid("analyze", "empty waveform"));
    }
    let (re, im, frames) = stft_raw(&w.samples, cfg);
    ComplexSpectrum::new(
        Tensor::new([cfg.bins(), frames], re)?,
        Tensor::new([cfg.bins(), frames], im)?,
        cfg.clone(),
    )
}

/// Inverse STFT with the default length `(frames - 1) * hop`.
pub fn synthesize(spec: &ComplexSpectrum) -> Result<Waveform> {
    let frames = spec.frames();
    if frames == 0 {
        return Err(Error::invalid("synthesize", "spectrum has no frames"));
    }
    synthesize_len(spec, (frames - 1) * spec.config.hop)
}

/// Inverse STFT trimmed or zero-extended to `len` samples.
pub fn synthesize_len(spec: &ComplexSpectrum, len: usize) -> Result<Waveform> {
    spec.config.validate()?;
    let frames = spec.frames();
    if frames == 0 {
        return Err(Error::invalid("synthesize", "spectrum has no frames"));
    }
    let samples = istft_raw(spec.re.data(), spec.im.data(), frames, len, &spec.config);
    Waveform::new(samples, spec.config.sample_rate)
}

/// Tape op: waveform `[len]` to stacked spectrum `[2, bins, frames]`.
#[derive(Debug)]
pub struct StftOp {
    pub config: StftConfig,
}

impl CustomOp for StftOp {
    fn name(&self) -> &'static str {
        "stft"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        if x.ndim() != 1 || x.numel() == 0 {
            return Err(Error::shape("stft", "waveform", "[len > 0]", x.shape()));
        }
        let (re, im, frames) = stft_raw(x.data(), &self.config);
        let mut data = re;
        data.extend_from_slice(&im);
        Tensor::new([2, self.config.bins(), frames], data)
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let frames = output.dim(2);
        let half = grad.numel() / 2;
        let g = stft_adjoint(&grad.data()[..half], &grad.data()[half..], frames, inputs[0].numel(), &self.config);
        vec![Some(Tensor::new([g.len()], g).expect("length matches input"))]
    }
}

/// Tape op: stacked spectrum `[2, bins, frames]` to waveform `[len]`.
#[derive(Debug)]
pub struct IstftOp {
    pub config: StftConfig,
    pub len: usize,
}

impl CustomOp for IstftOp {
    fn name(&self) -> &'static str {
        "istft"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let s = inputs[0];
        if s.ndim() != 3 || s.dim(0) != 2 || s.dim(1) != self.config.bins() || s.dim(2) == 0 {
            return Err(Error::shape("istft", "spectrum", [2, self.config.bins()], s.shape()));
        }
        let half = s.numel() / 2;
        let y = istft_raw(&s.data()[..half], &s.data()[half..], s.dim(2), self.len, &self.config);
        Tensor::new([self.len], y)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let s = inputs[0];
        let (mut re, im) = istft_adjoint(grad.data(), s.dim(2), &self.config);
        re.extend_from_slice(&im);
        vec![Some(Tensor::new(s.shape().to_vec(), re).expect("shape matches input"))]
    }
}

/// Differentiable STFT; returns the spectrum as `[bins, frames]` real/imaginary nodes.
pub fn stft_var(tape: &mut Tape, x: Var, cfg: &StftConfig) -> Result<CVar> {
    let s = tape.custom(&[x], Arc::new(StftOp { config: cfg.clone() }))?;
    let (bins, frames) = (tape.shape(s)[1], tape.shape(s)[2]);
    let re = tape.narrow(s, 0, 0, 1)?;
    let im = tape.narrow(s, 0, 1, 1)?;
    Ok(CVar::new(tape.reshape(re, &[bins, frames])?, tape.reshape(im, &[bins, frames])?))
}

/// Differentiable inverse STFT of `[bins, frames]` (or `[1, bins, frames]`) nodes.
pub fn istft_var(tape: &mut Tape, z: CVar, cfg: &StftConfig, len: usize) -> Result<Var> {
    let shape = tape.shape(z.re).to_vec();
    let (bins, frames) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let re = tape.reshape(z.re, &[1, bins, frames])?;
    let im = tape.reshape(z.im, &[1, bins, frames])?;
    let s = tape.concat(&[re, im], 0)?;
    tape.custom(&[s], Arc::new(IstftOp { config: cfg.clone(), len }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        let v: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(v, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect(-4, 1), 0);
    }

    #[test]
    fn preset_bins() {
        assert_eq!(StftConfig::paper().bins(), 481);
        assert_eq!(StftConfig::toy().bins(), 129);
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = StftConfig::toy();
        c.hop = 300;
        assert!(c.validate().is_err());
        let mut c = StftConfig::toy();
        c.fft_len = 128;
        assert!(c.validate().is_err());
    }

    #[test]
    fn empty_input_and_zero_frames_error() {
        let w = Waveform::new(vec![], 8000).unwrap();
        assert!(analyze(&w, &StftConfig::toy()).is_err());
        let s = ComplexSpectrum::zeros(StftConfig::toy(), 0);
        assert!(synthesize(&s).is_err());
    }
}
