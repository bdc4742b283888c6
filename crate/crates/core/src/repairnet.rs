//! Stage-1 repair network: gated-conv frequency encoder, gated temporal
//! convolution bottleneck, gated transposed-conv decoder.
//!
//! The network maps a complex spectrum `[2, bins, frames]` (real, imaginary as
//! channels) to a spectrum of the same shape. The decoder predicts a residual
//! that is added to the input, so a zero final layer yields the identity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ceil_pad_hi, Bound, Builder, Conv, ConvT, CumLayerNorm, ParamStore, Prelu};
use crate::numcore::{Conv2dSpec, PaddingMode, Tape, Tensor, Var};
use crate::spectral::ComplexSpectrum;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Causality {
    Causal,
    NonCausal,
}

impl Causality {
    fn padding(self) -> PaddingMode {
        match self {
            Causality::Causal => PaddingMode::CausalTime,
            Causality::NonCausal => PaddingMode::NonCausalTime,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepairConfig {
    pub bins: usize,
    pub channels: usize,
    pub fd_layers: usize,
    pub fu_layers: usize,
    pub fd_kernel_freq: usize,
    pub fd_stride_freq: usize,
    pub tfcm_depth: usize,
    pub tfcm_dilations: Vec<usize>,
    /// `[time, freq]`.
    pub tfcm_kernel: [usize; 2],
    pub sgtcm_blocks: usize,
    pub gtcm_layers_per_block: usize,
    pub gtcm_kernel: usize,
    pub gtcm_dilations: Vec<usize>,
    pub causality: Causality,
    /// Zero the last decoder convolution so the untrained network is the identity.
    #[serde(default = "yes")]
    pub zero_init_head: bool,
}

fn yes() -> bool {
    true
}

impl RepairConfig {
    pub fn paper() -> Self {
        RepairConfig {
            bins: 481,
            channels: 64,
            fd_layers: 3,
            fu_layers: 3,
            fd_kernel_freq: 5,
            fd_stride_freq: 4,
            tfcm_depth: 3,
            tfcm_dilations: vec![1, 2, 4],
            tfcm_kernel: [3, 5],
            sgtcm_blocks: 4,
            gtcm_layers_per_block: 4,
            gtcm_kernel: 5,
            gtcm_dilations: vec![1, 2, 5, 9],
            causality: Causality::Causal,
            zero_init_head: true,
        }
    }

    pub fn paper_large() -> Self {
        RepairConfig {
            channels: 80,
            tfcm_depth: 4,
            tfcm_dilations: vec![1, 2, 4, 8],
            ..Self::paper()
        }
    }

    pub fn toy() -> Self {
        RepairConfig {
            bins: 129,
            channels: 16,
            ..Self::paper()
        }
    }

    pub fn with_causality(&self, causality: Causality) -> Self {
        RepairConfig {
            causality,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.bins == 0 {
            return bad("repair.channels and repair.bins must be > 0".into());
        }
        if self.fd_layers == 0 || self.fd_layers != self.fu_layers {
            return bad(format!(
                "repair.fd_layers ({}) and fu_layers ({}) must be equal and > 0",
                self.fd_layers, self.fu_layers
            ));
        }
        if self.tfcm_dilations.len() != self.tfcm_depth {
            return bad(format!(
                "repair.tfcm_dilations has {} entries, tfcm_depth is {}",
                self.tfcm_dilations.len(),
                self.tfcm_depth
            ));
        }
        if self.gtcm_dilations.len() != self.gtcm_layers_per_block {
            return bad(format!(
                "repair.gtcm_dilations has {} entries, gtcm_layers_per_block is {}",
                self.gtcm_dilations.len(),
                self.gtcm_layers_per_block
            ));
        }
        if self.tfcm_dilations.iter().chain(&self.gtcm_dilations).any(|&d| d == 0) {
            return bad("repair dilations must be >= 1".into());
        }
        let [kt, kf] = self.tfcm_kernel;
        if kt == 0 || kf % 2 == 0 || self.gtcm_kernel == 0 {
            return bad("repair kernels must be non-empty and the TFCM frequency kernel odd".into());
        }
        if self.fd_stride_freq == 0 || self.fd_kernel_freq < self.fd_stride_freq {
            return bad("repair.fd_kernel_freq must be >= fd_stride_freq >= 1".into());
        }
        Ok(())
    }

    /// Bin counts through the encoder: `[bins, ceil(bins/s), ...]`.
    pub fn ladder(&self) -> Vec<usize> {
        let mut v = vec![self.bins];
        for _ in 0..self.fd_layers {
            let f = *v.last().unwrap();
            v.push(f.div_ceil(self.fd_stride_freq));
        }
        v
    }

    /// Future frames one TFCM can see.
    pub fn tfcm_lookahead(&self) -> usize {
        match self.causality {
            Causality::Causal => 0,
            Causality::NonCausal => {
                let kt = self.tfcm_kernel[0];
                self.tfcm_dilations.iter().map(|d| (kt - 1) * d - (kt - 1) * d / 2).sum()
            }
        }
    }

    /// Future frames the whole network can see.
    pub fn lookahead(&self) -> usize {
        (self.fd_layers + self.fu_layers) * self.tfcm_lookahead()
    }

    /// Past frames one TFCM can see.
    pub fn tfcm_receptive_past(&self) -> usize {
        let kt = self.tfcm_kernel[0];
        let span: usize = self.tfcm_dilations.iter().map(|d| (kt - 1) * d).sum();
        span - self.tfcm_lookahead()
    }
}

/// Depthwise dilated temporal convolutions between pointwise projections, with residual.
#[derive(Clone, Debug)]
pub struct Tfcm {
    layers: Vec<TfcmLayer>,
}

#[derive(Clone, Debug)]
struct TfcmLayer {
    pw_in: Conv,
    act_in: Prelu,
    dw: Conv,
    act_dw: Prelu,
    pw_out: Conv,
}

impl Tfcm {
    pub fn new(b: &mut Builder, name: &str, channels: usize, cfg: &RepairConfig) -> Result<Self> {
        let [kt, kf] = cfg.tfcm_kernel;
        b.scoped(name, |b| {
            let mut layers = Vec::new();
            for (i, &d) in cfg.tfcm_dilations.iter().enumerate() {
                layers.push(b.scoped(format!("{i}"), |b| {
                    let dw_spec = Conv2dSpec::new()
                        .dilation(1, d)
                        .groups(channels)
                        .freq_padding(PaddingMode::SameFreq, kf)
                        .time_padding(cfg.causality.padding(), kt);
                    Ok(TfcmLayer {
                        pw_in: Conv::new(b, "pw_in", channels, channels, [1, 1], Conv2dSpec::new(), true)?,
                        act_in: Prelu::new(b, "act_in", channels)?,
                        dw: Conv::new(b, "dw", channels, channels, [kf, kt], dw_spec, true)?,
                        act_dw: Prelu::new(b, "act_dw", channels)?,
                        pw_out: Conv::new(b, "pw_out", channels, channels, [1, 1], Conv2dSpec::new(), true)?,
                    })
                })?);
            }
            Ok(Tfcm { layers })
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, mut x: Var) -> Result<Var> {
        for l in &self.layers {
            let h = l.pw_in.forward(tape, p, x)?;
            let h = l.act_in.forward(tape, p, h)?;
            let h = l.dw.forward(tape, p, h)?;
            let h = l.act_dw.forward(tape, p, h)?;
            let h = l.pw_out.forward(tape, p, h)?;
            x = tape.add(x, h)?;
        }
        Ok(x)
    }
}

/// Gated temporal convolution over a `[dim, 1, T]` sequence, with residual.
#[derive(Clone, Debug)]
pub struct Gtcm {
    pw_in: Conv,
    act_in: Prelu,
    dw: Conv,
    act_dw: Prelu,
    out: Conv,
    gate: Conv,
}

impl Gtcm {
    pub fn new(b: &mut Builder, name: &str, dim: usize, hidden: usize, kernel: usize, dilation: usize) -> Result<Self> {
        b.scoped(name, |b| {
            let dw_spec = Conv2dSpec::new()
                .dilation(1, dilation)
                .groups(hidden)
                .time_padding(PaddingMode::CausalTime, kernel);
            Ok(Gtcm {
                pw_in: Conv::new(b, "pw_in", dim, hidden, [1, 1], Conv2dSpec::new(), true)?,
                act_in: Prelu::new(b, "act_in", hidden)?,
                dw: Conv::new(b, "dw", hidden, hidden, [1, kernel], dw_spec, true)?,
                act_dw: Prelu::new(b, "act_dw", hidden)?,
                out: Conv::new(b, "out", hidden, dim, [1, 1], Conv2dSpec::new(), true)?,
                gate: Conv::new(b, "gate", hidden, dim, [1, 1], Conv2dSpec::new(), true)?,
            })
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.pw_in.forward(tape, p, x)?;
        let h = self.act_in.forward(tape, p, h)?;
        let h = self.dw.forward(tape, p, h)?;
        let h = self.act_dw.forward(tape, p, h)?;
        let o = self.out.forward(tape, p, h)?;
        let g = self.gate.forward(tape, p, h)?;
        let g = tape.sigmoid(g);
        let y = tape.mul(o, g)?;
        tape.add(x, y)
    }
}

/// `features * sigmoid(gate)` over the two channel halves.
fn split_gate(tape: &mut Tape, y: Var) -> Result<Var> {
    let c = tape.shape(y)[0] / 2;
    let f = tape.narrow(y, 0, 0, c)?;
    let g = tape.narrow(y, 0, c, c)?;
    let g = tape.sigmoid(g);
    tape.mul(f, g)
}

#[derive(Clone, Debug)]
struct FdLayer {
    gate_conv: Conv,
    norm: CumLayerNorm,
    act: Prelu,
    tfcm: Tfcm,
}

#[derive(Clone, Debug)]
struct FuLayer {
    tfcm: Tfcm,
    gate_conv: ConvT,
    post: Option<(CumLayerNorm, Prelu)>,
    bins_out: usize,
}

#[derive(Clone, Debug)]
pub struct RepairModel {
    pub config: RepairConfig,
    pub params: ParamStore,
    encoder: Vec<FdLayer>,
    bottleneck: Vec<Gtcm>,
    decoder: Vec<FuLayer>,
    ladder: Vec<usize>,
}

pub fn build_repair(cfg: &RepairConfig, seed: u64) -> Result<RepairModel> {
    cfg.validate()?;
    let c = cfg.channels;
    let ladder = cfg.ladder();
    let (kf, s) = (cfg.fd_kernel_freq, cfg.fd_stride_freq);
    let mut b = Builder::new(seed);
    let mut encoder = Vec::new();
    for i in 0..cfg.fd_layers {
        let f = ladder[i];
        let cin = if i == 0 { 2 } else { c };
        let spec = Conv2dSpec::new().stride(s, 1).pad_freq(kf / 2, ceil_pad_hi(f, kf, s, kf / 2));
        let got = spec.output_size([f, 1], [kf, 1])?[0];
        if got != ladder[i + 1] {
            return Err(Error::shape("build_repair", "freq axis", ladder[i + 1], got));
        }
        encoder.push(b.scoped(format!("fd{i}"), |b| {
            Ok(FdLayer {
                gate_conv: Conv::new(b, "gate_conv", cin, 2 * c, [kf, 1], spec, true)?,
                norm: CumLayerNorm::new(b, "norm", c)?,
                act: Prelu::new(b, "act", c)?,
                tfcm: Tfcm::new(b, "tfcm", c, cfg)?,
            })
        })?);
    }
    let dim = c * ladder[cfg.fd_layers];
    let mut bottleneck = Vec::new();
    for blk in 0..cfg.sgtcm_blocks {
        for (j, &d) in cfg.gtcm_dilations.iter().enumerate() {
            bottleneck.push(Gtcm::new(&mut b, &format!("sgtcm{blk}.{j}"), dim, c, cfg.gtcm_kernel, d)?);
        }
    }
    let mut decoder = Vec::new();
    for i in 0..cfg.fu_layers {
        let last = i + 1 == cfg.fu_layers;
        let cout = if last { 2 } else { c };
        let bins_out = ladder[cfg.fd_layers - 1 - i];
        let bins_in = ladder[cfg.fd_layers - i];
        let full = (bins_in - 1) * s + kf;
        if full < kf / 2 + bins_out {
            return Err(Error::shape("build_repair", "freq axis", bins_out, full - kf / 2));
        }
        decoder.push(b.scoped(format!("fu{i}"), |b| {
            let tfcm = Tfcm::new(b, "tfcm", c, cfg)?;
            let spec = Conv2dSpec::new().stride(s, 1);
            let gate_conv = ConvT::new(b, "gate_conv", 2 * c, 2 * cout, [kf, 1], spec)?;
            let post = if last {
                None
            } else {
                Some((CumLayerNorm::new(b, "norm", c)?, Prelu::new(b, "act", c)?))
            };
            Ok(FuLayer {
                tfcm,
                gate_conv,
                post,
                bins_out,
            })
        })?);
    }
    let mut params = b.finish();
    if cfg.zero_init_head {
        let head = &decoder.last().expect("fu_layers > 0").gate_conv;
        params.get_mut(head.w).data_mut().fill(0.0);
        params.get_mut(head.b).data_mut().fill(0.0);
    }
    Ok(RepairModel {
        config: cfg.clone(),
        params,
        encoder,
        bottleneck,
        decoder,
        ladder,
    })
}

impl RepairModel {
    pub fn ladder(&self) -> &[usize] {
        &self.ladder
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Maps `[2, bins, frames]` to a spectrum of the same shape.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[0] != 2 {
            return Err(Error::shape("repair_forward", "channel axis", "[2, bins, frames]", shape));
        }
        if shape[1] != self.config.bins {
            return Err(Error::shape("repair_forward", "freq axis", self.config.bins, shape[1]));
        }
        let frames = shape[2];
        let mut h = x;
        let mut skips = Vec::new();
        for l in &self.encoder {
            let y = l.gate_conv.forward(tape, p, h)?;
            let y = split_gate(tape, y)?;
            let y = l.norm.forward(tape, p, y)?;
            let y = l.act.forward(tape, p, y)?;
            h = l.tfcm.forward(tape, p, y)?;
            skips.push(h);
        }
        let c = self.config.channels;
        let f_low = self.ladder[self.config.fd_layers];
        let mut z = tape.reshape(h, &[c * f_low, 1, frames])?;
        for g in &self.bottleneck {
            z = g.forward(tape, p, z)?;
        }
        h = tape.reshape(z, &[c, f_low, frames])?;
        let off = self.config.fd_kernel_freq / 2;
        for l in &self.decoder {
            let y = l.tfcm.forward(tape, p, h)?;
            let skip = skips.pop().expect("one skip per layer");
            let y = tape.concat(&[y, skip], 0)?;
            let y = l.gate_conv.forward(tape, p, y, off, l.bins_out, frames)?;
            let y = split_gate(tape, y)?;
            h = match &l.post {
                Some((norm, act)) => {
                    let y = norm.forward(tape, p, y)?;
                    act.forward(tape, p, y)?
                }
                None => y,
            };
        }
        tape.add(x, h)
    }

    /// Inference on a spectrum with frozen parameters.
    pub fn run(&self, spec: &ComplexSpectrum) -> Result<ComplexSpectrum> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(stack_spectrum(spec)?);
        let y = self.forward(&mut tape, &p, x)?;
        unstack_spectrum(tape.value(y), spec)
    }
}

/// `[2, bins, frames]` from a spectrum.
pub fn stack_spectrum(spec: &ComplexSpectrum) -> Result<Tensor> {
    let mut data = spec.re.data().to_vec();
    data.extend_from_slice(spec.im.data());
    Tensor::new([2, spec.bins(), spec.frames()], data)
}

/// Inverse of [`stack_spectrum`], taking the configuration from `like`.
pub fn unstack_spectrum(t: &Tensor, like: &ComplexSpectrum) -> Result<ComplexSpectrum> {
    let (f, n) = (t.dim(1), t.dim(2));
    ComplexSpectrum::new(t.narrow(0, 0, 1)?.reshape([f, n])?, t.narrow(0, 1, 1)?.reshape([f, n])?, like.config.clone())
}
