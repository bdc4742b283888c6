//! Stage-2 denoiser: complex feature encoder, sub-band then full-band
//! encoder/decoder modules, complex feature decoder, complex ratio mask.
//!
//! Every time-axis convolution is causal, the norms are cumulative and the
//! attention is per frame, so the whole network is causal.

use serde::{Deserialize, Serialize};

use crate::complexasa::{AsaConfig, ComplexAsa};
use crate::error::{Error, Result};
use crate::nn::{ceil_pad_hi, Bound, Builder, ComplexConv, ComplexConvT, CumLayerNorm, ParamStore, Prelu};
use crate::numcore::{CVar, Conv2dSpec, PaddingMode, Tape};
use crate::repairnet::Gtcm;
use crate::spectral::ComplexSpectrum;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiseConfig {
    pub bins: usize,
    pub cfe_channels: usize,
    /// `[freq, time]` of the input and output convolutions.
    pub cfe_kernel: [usize; 2],
    pub denseblock_depth: usize,
    /// `[freq, time]`.
    pub dense_kernel: [usize; 2],
    pub band_channels: Vec<usize>,
    /// `[freq, time]`.
    pub band_kernel: [usize; 2],
    /// `[freq, time]`; the time stride must be 1.
    pub band_stride: [usize; 2],
    #[serde(default = "yes")]
    pub band_separable: bool,
    pub stcm_hidden: usize,
    pub stcm_kernel: usize,
    pub stcm_dilations: Vec<usize>,
    pub asa_hidden: usize,
    pub n_subbands: usize,
    pub mask_cap: f64,
    /// Zero the output convolution so the untrained mask is exactly 1.
    #[serde(default = "yes")]
    pub zero_init_head: bool,
}

fn yes() -> bool {
    true
}

impl DenoiseConfig {
    pub fn paper() -> Self {
        DenoiseConfig {
            bins: 481,
            cfe_channels: 32,
            cfe_kernel: [3, 2],
            denseblock_depth: 5,
            dense_kernel: [5, 2],
            band_channels: vec![16, 32, 32, 32, 64, 64],
            band_kernel: [5, 2],
            band_stride: [2, 1],
            band_separable: true,
            stcm_hidden: 64,
            stcm_kernel: 5,
            stcm_dilations: vec![1, 2, 5, 9],
            asa_hidden: 16,
            n_subbands: 4,
            mask_cap: 2.0,
            zero_init_head: true,
        }
    }

    pub fn toy() -> Self {
        DenoiseConfig {
            bins: 129,
            cfe_channels: 4,
            band_channels: vec![4, 8, 8, 8, 16, 16],
            stcm_hidden: 16,
            asa_hidden: 4,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("denoise: {m}")));
        if self.bins == 0 || self.cfe_channels == 0 || self.stcm_hidden == 0 {
            return bad("bins, cfe_channels and stcm_hidden must be > 0");
        }
        if self.band_channels.is_empty() || self.band_channels.contains(&0) {
            return bad("band_channels must be a non-empty list of positive counts");
        }
        if self.band_stride[1] != 1 || self.band_stride[0] == 0 {
            return bad("band_stride must be [freq >= 1, 1]");
        }
        if self.band_kernel[0] < self.band_stride[0] || self.band_kernel.contains(&0) {
            return bad("band_kernel must be non-empty and cover the stride");
        }
        if self.cfe_kernel.contains(&0) || self.dense_kernel.contains(&0) || self.stcm_kernel == 0 {
            return bad("kernels must be non-empty");
        }
        if self.stcm_dilations.contains(&0) {
            return bad("stcm_dilations must be >= 1");
        }
        if !(self.mask_cap > 0.0) {
            return bad("mask_cap must be > 0");
        }
        self.subbands().map(|_| ())
    }

    /// Contiguous `(start, len)` groups of bins for the sub-band module.
    pub fn subbands(&self) -> Result<Vec<(usize, usize)>> {
        let n = self.n_subbands;
        if n == 0 || n > self.bins {
            return Err(Error::Config(format!(
                "denoise: n_subbands {n} must be in 1..={}",
                self.bins
            )));
        }
        let width = self.bins.div_ceil(n);
        let mut bands = Vec::new();
        let mut start = 0;
        while start < self.bins {
            let len = width.min(self.bins - start);
            bands.push((start, len));
            start += len;
        }
        if bands.len() != n {
            return Err(Error::Config(format!(
                "denoise: {} bins do not split into {n} bands of width {width}",
                self.bins
            )));
        }
        let low = self.band_ladder(bands[0].1);
        for &(_, len) in &bands[1..] {
            if self.band_ladder(len).last() != low.last() {
                return Err(Error::Config(format!(
                    "denoise: sub-bands of {} and {len} bins reach different bottleneck sizes",
                    bands[0].1
                )));
            }
        }
        Ok(bands)
    }

    /// Bin counts through a band encoder starting from `bins`.
    pub fn band_ladder(&self, bins: usize) -> Vec<usize> {
        let mut v = vec![bins];
        for _ in &self.band_channels {
            let f = *v.last().unwrap();
            v.push(f.div_ceil(self.band_stride[0]));
        }
        v
    }
}

fn causal_spec(kernel: [usize; 2], time_dilation: usize) -> Conv2dSpec {
    Conv2dSpec::new()
        .dilation(1, time_dilation)
        .freq_padding(PaddingMode::SameFreq, kernel[0])
        .time_padding(PaddingMode::CausalTime, kernel[1])
}

#[derive(Clone, Debug)]
struct DenseLayer {
    conv: ComplexConv,
    norm: CumLayerNorm,
    act: Prelu,
}

/// Causal complex convolutions, each fed the concatenation of the block input
/// and every earlier layer output.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    layers: Vec<DenseLayer>,
}

impl DenseBlock {
    pub fn new(b: &mut Builder, name: &str, channels: usize, depth: usize, kernel: [usize; 2]) -> Result<Self> {
        b.scoped(name, |b| {
            let mut layers = Vec::new();
            for i in 0..depth {
                layers.push(b.scoped(format!("{i}"), |b| {
                    Ok(DenseLayer {
                        conv: ComplexConv::new(b, "conv", channels * (i + 1), channels, kernel, causal_spec(kernel, 1 << i))?,
                        norm: CumLayerNorm::new(b, "norm", channels)?,
                        act: Prelu::new(b, "act", channels)?,
                    })
                })?);
            }
            Ok(DenseBlock { layers })
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, z: CVar) -> Result<CVar> {
        let mut feats = vec![z];
        let mut out = z;
        for l in &self.layers {
            let input = if feats.len() == 1 { feats[0] } else { CVar::concat(tape, &feats, 0)? };
            let h = l.conv.forward(tape, p, input)?;
            let h = l.norm.forward_complex(tape, p, h)?;
            out = l.act.forward_complex(tape, p, h)?;
            feats.push(out);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
struct EncLayer {
    dw: Option<ComplexConv>,
    pw: ComplexConv,
    norm: CumLayerNorm,
    act: Prelu,
}

#[derive(Clone, Debug)]
struct DecLayer {
    pw: Option<ComplexConv>,
    up: ComplexConvT,
    norm: CumLayerNorm,
    act: Prelu,
}

/// Frequency encoder, temporal bottleneck, frequency decoder with concatenated skips.
#[derive(Clone, Debug)]
pub struct BandModule {
    encoder: Vec<EncLayer>,
    stcm: Vec<Gtcm>,
    decoder: Vec<DecLayer>,
    ladder: Vec<usize>,
    kernel: [usize; 2],
    stride: usize,
}

impl BandModule {
    pub fn new(b: &mut Builder, name: &str, cfg: &DenoiseConfig, bins: usize) -> Result<Self> {
        let chans = &cfg.band_channels;
        let ladder = cfg.band_ladder(bins);
        let [kf, kt] = cfg.band_kernel;
        let sf = cfg.band_stride[0];
        b.scoped(name, |b| {
            let mut encoder = Vec::new();
            let mut cin = cfg.cfe_channels;
            for (i, &c) in chans.iter().enumerate() {
                let f = ladder[i];
                let spec = Conv2dSpec::new()
                    .stride(sf, 1)
                    .pad_freq(kf / 2, ceil_pad_hi(f, kf, sf, kf / 2))
                    .time_padding(PaddingMode::CausalTime, kt);
                encoder.push(b.scoped(format!("enc{i}"), |b| {
                    let (dw, pw) = if cfg.band_separable {
                        (
                            Some(ComplexConv::new(b, "dw", cin, cin, [kf, kt], spec.groups(cin))?),
                            ComplexConv::new(b, "pw", cin, c, [1, 1], Conv2dSpec::new())?,
                        )
                    } else {
                        (None, ComplexConv::new(b, "conv", cin, c, [kf, kt], spec)?)
                    };
                    Ok(EncLayer {
                        dw,
                        pw,
                        norm: CumLayerNorm::new(b, "norm", c)?,
                        act: Prelu::new(b, "act", c)?,
                    })
                })?);
                cin = c;
            }
            let dim = 2 * cin * ladder[chans.len()];
            let mut stcm = Vec::new();
            for (j, &d) in cfg.stcm_dilations.iter().enumerate() {
                stcm.push(Gtcm::new(b, &format!("stcm{j}"), dim, cfg.stcm_hidden, cfg.stcm_kernel, d)?);
            }
            let mut decoder = Vec::new();
            for j in (0..chans.len()).rev() {
                let cin = 2 * chans[j];
                let cout = if j == 0 { cfg.cfe_channels } else { chans[j - 1] };
                let spec = Conv2dSpec::new().stride(sf, 1);
                decoder.push(b.scoped(format!("dec{j}"), |b| {
                    let (pw, up) = if cfg.band_separable {
                        (
                            Some(ComplexConv::new(b, "pw", cin, cout, [1, 1], Conv2dSpec::new())?),
                            ComplexConvT::new(b, "up", cout, cout, [kf, kt], spec.groups(cout))?,
                        )
                    } else {
                        (None, ComplexConvT::new(b, "up", cin, cout, [kf, kt], spec)?)
                    };
                    Ok(DecLayer {
                        pw,
                        up,
                        norm: CumLayerNorm::new(b, "norm", cout)?,
                        act: Prelu::new(b, "act", cout)?,
                    })
                })?);
            }
            Ok(BandModule {
                encoder,
                stcm,
                decoder,
                ladder,
                kernel: cfg.band_kernel,
                stride: sf,
            })
        })
    }

    /// `[C, F, T]` to `[C, F, T]` for the bin count the module was built for,
    /// or any count that reaches the same bottleneck.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, z: CVar) -> Result<CVar> {
        let shape = tape.shape(z.re).to_vec();
        let frames = shape[2];
        let mut sizes = vec![shape[1]];
        let mut skips = Vec::new();
        let mut h = z;
        let [kf, sf] = [self.kernel[0], self.stride];
        for l in &self.encoder {
            let f = *sizes.last().unwrap();
            let (strided, spec) = match &l.dw {
                Some(dw) => (dw, &dw.re.spec),
                None => (&l.pw, &l.pw.re.spec),
            };
            let spec = spec.clone().pad_freq(kf / 2, ceil_pad_hi(f, kf, sf, kf / 2));
            h = strided.forward_with(tape, p, h, &spec)?;
            if l.dw.is_some() {
                h = l.pw.forward(tape, p, h)?;
            }
            h = l.norm.forward_complex(tape, p, h)?;
            h = l.act.forward_complex(tape, p, h)?;
            sizes.push(tape.shape(h.re)[1]);
            skips.push(h);
        }
        let s = tape.shape(h.re).to_vec();
        if s[1] != *self.ladder.last().unwrap() {
            return Err(Error::shape("band_module", "freq axis (bottleneck)", self.ladder.last(), s[1]));
        }
        let flat = tape.concat(&[h.re, h.im], 0)?;
        let mut x = tape.reshape(flat, &[2 * s[0] * s[1], 1, frames])?;
        for g in &self.stcm {
            x = g.forward(tape, p, x)?;
        }
        let x = tape.reshape(x, &[2 * s[0], s[1], frames])?;
        h = CVar::new(tape.narrow(x, 0, 0, s[0])?, tape.narrow(x, 0, s[0], s[0])?);
        let off = self.kernel[0] / 2;
        for (l, depth) in self.decoder.iter().zip((0..sizes.len() - 1).rev()) {
            let skip = skips.pop().expect("one skip per layer");
            let mut y = CVar::concat(tape, &[h, skip], 0)?;
            if let Some(pw) = &l.pw {
                y = pw.forward(tape, p, y)?;
            }
            y = l.up.forward(tape, p, y, off, sizes[depth], frames)?;
            y = l.norm.forward_complex(tape, p, y)?;
            h = l.act.forward_complex(tape, p, y)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct DenoiseModel {
    pub config: DenoiseConfig,
    pub params: ParamStore,
    cfe_in: ComplexConv,
    cfe_act: Prelu,
    cfe_dense: DenseBlock,
    cfe_asa: ComplexAsa,
    subband: BandModule,
    fullband: BandModule,
    cfd_asa: ComplexAsa,
    cfd_dense: DenseBlock,
    cfd_out: ComplexConv,
    bands: Vec<(usize, usize)>,
}

pub fn build_denoise(cfg: &DenoiseConfig, seed: u64) -> Result<DenoiseModel> {
    cfg.validate()?;
    let bands = cfg.subbands()?;
    let c = cfg.cfe_channels;
    let asa = AsaConfig {
        in_channels: c,
        hidden_channels: cfg.asa_hidden,
    };
    let mut b = Builder::new(seed);
    let (cfe_in, cfe_act, cfe_dense, cfe_asa) = b.scoped("cfe", |b| {
        Ok((
            ComplexConv::new(b, "in", 1, c, cfg.cfe_kernel, causal_spec(cfg.cfe_kernel, 1))?,
            Prelu::new(b, "act", c)?,
            DenseBlock::new(b, "dense", c, cfg.denseblock_depth, cfg.dense_kernel)?,
            ComplexAsa::new(b, "asa", &asa)?,
        ))
    })?;
    let subband = BandModule::new(&mut b, "subband", cfg, bands[0].1)?;
    let fullband = BandModule::new(&mut b, "fullband", cfg, cfg.bins)?;
    let (cfd_asa, cfd_dense, cfd_out) = b.scoped("cfd", |b| {
        let asa = ComplexAsa::new(b, "asa", &asa)?;
        let dense = DenseBlock::new(b, "dense", c, cfg.denseblock_depth, cfg.dense_kernel)?;
        let spec = causal_spec(cfg.cfe_kernel, 1);
        let out = if cfg.zero_init_head {
            ComplexConv::zeros(b, "out", c, 1, cfg.cfe_kernel, spec)?
        } else {
            ComplexConv::new(b, "out", c, 1, cfg.cfe_kernel, spec)?
        };
        Ok((asa, dense, out))
    })?;
    Ok(DenoiseModel {
        config: cfg.clone(),
        params: b.finish(),
        cfe_in,
        cfe_act,
        cfe_dense,
        cfe_asa,
        subband,
        fullband,
        cfd_asa,
        cfd_dense,
        cfd_out,
        bands,
    })
}

impl DenoiseModel {
    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn bands(&self) -> &[(usize, usize)] {
        &self.bands
    }

    /// Complex feature encoder on `[1, F, T]`; output `[cfe_channels, F, T]`.
    pub fn cfe_forward(&self, tape: &mut Tape, p: &Bound, z: CVar) -> Result<CVar> {
        self.cfe(tape, p, z, true)
    }

    fn cfe(&self, tape: &mut Tape, p: &Bound, z: CVar, with_asa: bool) -> Result<CVar> {
        let s = tape.shape(z.re).to_vec();
        if s.len() != 3 || s[0] != 1 {
            return Err(Error::shape("cfe_forward", "channel axis", 1, s));
        }
        let h = self.cfe_in.forward(tape, p, z)?;
        let h = self.cfe_act.forward_complex(tape, p, h)?;
        let h = self.cfe_dense.forward(tape, p, h)?;
        if with_asa {
            self.cfe_asa.forward(tape, p, h)
        } else {
            Ok(h)
        }
    }

    /// The encoder with its attention block bypassed.
    pub fn cfe_forward_without_asa(&self, tape: &mut Tape, p: &Bound, z: CVar) -> Result<CVar> {
        self.cfe(tape, p, z, false)
    }

    /// Mask `[1, F, T]` before the magnitude cap.
    fn raw_mask(&self, tape: &mut Tape, p: &Bound, z: CVar) -> Result<CVar> {
        let h = self.cfe_forward(tape, p, z)?;
        let mut parts = Vec::new();
        for &(start, len) in &self.bands {
            let band = h.narrow(tape, 1, start, len)?;
            parts.push(self.subband.forward(tape, p, band)?);
        }
        let h = CVar::concat(tape, &parts, 1)?;
        let h = self.fullband.forward(tape, p, h)?;
        let h = self.cfd_asa.forward(tape, p, h)?;
        let h = self.cfd_dense.forward(tape, p, h)?;
        let d = self.cfd_out.forward(tape, p, h)?;
        Ok(CVar::new(tape.offset(d.re, 1.0), d.im))
    }

    /// Capped complex mask `[1, F, T]`.
    pub fn mask(&self, tape: &mut Tape, p: &Bound, z: CVar) -> Result<CVar> {
        let m = self.raw_mask(tape, p, z)?;
        let mag = m.abs(tape)?;
        let den = tape.clamp_min(mag, self.config.mask_cap);
        let inv = tape.powf(den, -1.0);
        let k = tape.scale(inv, self.config.mask_cap);
        Ok(CVar::new(tape.mul(m.re, k)?, tape.mul(m.im, k)?))
    }

    /// `mask(z) * z` on a `[1, F, T]` complex input.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, z: CVar) -> Result<CVar> {
        let s = tape.shape(z.re).to_vec();
        if s.len() != 3 || s[0] != 1 || s[1] != self.config.bins {
            return Err(Error::shape("denoise_forward", "freq axis", [1, self.config.bins], s));
        }
        let m = self.mask(tape, p, z)?;
        m.mul(tape, z)
    }

    /// Inference on a spectrum with frozen parameters.
    pub fn run(&self, spec: &ComplexSpectrum) -> Result<ComplexSpectrum> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let z = CVar::constant(&mut tape, &spec.to_complex_tensor());
        let y = self.forward(&mut tape, &p, z)?;
        ComplexSpectrum::from_complex_tensor(&y.value(&tape), spec.config.clone())
    }

    /// Makes the decoder emit the constant mask `re + j im` regardless of input.
    pub fn set_constant_mask(&mut self, re: f64, im: f64) {
        let (dr, di) = (re - 1.0, im);
        let head = &self.cfd_out;
        for id in [head.re.w, head.im.w] {
            self.params.get_mut(id).data_mut().fill(0.0);
        }
        // (b_R - b_I) + j (b_R + b_I) = dr + j di
        let br = (dr + di) / 2.0;
        let bi = (di - dr) / 2.0;
        self.params.get_mut(head.re.b.expect("head has bias")).data_mut().fill(br);
        self.params.get_mut(head.im.b.expect("head has bias")).data_mut().fill(bi);
    }
}
