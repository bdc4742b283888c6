//! Complex axial self-attention over the frequency axis.
//!
//! Queries, keys and values come from bias-free complex 1x1 convolutions. For every
//! frame independently, the attention map is the softmax over key positions of
//! `|Q K^T| / sqrt(d_q)`; the real map mixes the real and imaginary parts of V
//! alike. A complex 1x1 output projection and a residual wrap the block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Builder, ComplexConv};
use crate::numcore::{complex_matmul_var, CVar, Conv2dSpec, Tape, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsaConfig {
    pub in_channels: usize,
    pub hidden_channels: usize,
}

impl AsaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("asa channels must be > 0".into()));
        }
        Ok(())
    }
}

/// Query, key and value projections.
#[derive(Clone, Debug)]
pub struct AsaWeights {
    pub q: ComplexConv,
    pub k: ComplexConv,
    pub v: ComplexConv,
}

#[derive(Clone, Debug)]
pub struct ComplexAsa {
    pub config: AsaConfig,
    pub weights: AsaWeights,
    pub out: ComplexConv,
}

impl ComplexAsa {
    pub fn new(b: &mut Builder, name: &str, cfg: &AsaConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, h) = (cfg.in_channels, cfg.hidden_channels);
        let pw = Conv2dSpec::new();
        b.scoped(name, |b| {
            Ok(ComplexAsa {
                config: cfg.clone(),
                weights: AsaWeights {
                    q: ComplexConv::linear(b, "q", c, h, [1, 1], pw.clone())?,
                    k: ComplexConv::linear(b, "k", c, h, [1, 1], pw.clone())?,
                    v: ComplexConv::linear(b, "v", c, h, [1, 1], pw.clone())?,
                },
                out: ComplexConv::new(b, "out", h, c, [1, 1], pw)?,
            })
        })
    }

    /// `z + out(asa(q(z), k(z), v(z)))` on `[C, F, T]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, z: CVar) -> Result<CVar> {
        let c = tape.shape(z.re)[0];
        if c != self.config.in_channels {
            return Err(Error::shape("complex_asa", "channel axis", self.config.in_channels, c));
        }
        let (q, k, v) = complex_qkv(tape, p, z, &self.weights)?;
        let a = complex_asa(tape, q, k, v)?;
        let o = self.out.forward(tape, p, a)?;
        z.add(tape, o)
    }
}

pub fn complex_qkv(tape: &mut Tape, p: &Bound, z: CVar, w: &AsaWeights) -> Result<(CVar, CVar, CVar)> {
    Ok((w.q.forward(tape, p, z)?, w.k.forward(tape, p, z)?, w.v.forward(tape, p, z)?))
}

/// Per-frame attention maps `[T, F, F]` from `Q, K: [d_q, F, T]`.
pub fn attention_map(tape: &mut Tape, q: CVar, k: CVar) -> Result<Var> {
    let (qs, ks) = (tape.shape(q.re).to_vec(), tape.shape(k.re).to_vec());
    if qs.len() != 3 || ks.len() != 3 {
        return Err(Error::shape("complex_asa", "rank", 3, qs.len().min(ks.len())));
    }
    if qs[0] != ks[0] {
        return Err(Error::shape("complex_asa", "hidden axis", qs[0], ks[0]));
    }
    if qs[2] != ks[2] {
        return Err(Error::shape("complex_asa", "time axis", qs[2], ks[2]));
    }
    let qt = q.permute(tape, &[2, 1, 0])?;
    let kt = k.permute(tape, &[2, 0, 1])?;
    let s = complex_matmul_var(tape, qt, kt)?;
    let mag = s.abs(tape)?;
    let logits = tape.scale(mag, 1.0 / (qs[0] as f64).sqrt());
    tape.softmax(logits)
}

/// Attention output with the shape of `v`.
pub fn complex_asa(tape: &mut Tape, q: CVar, k: CVar, v: CVar) -> Result<CVar> {
    let (ks, vs) = (tape.shape(k.re).to_vec(), tape.shape(v.re).to_vec());
    if vs.len() != 3 || ks[1] != vs[1] || ks[2] != vs[2] {
        return Err(Error::shape("complex_asa", "freq/time axes of keys and values", &ks[1..], vs.get(1..)));
    }
    let a = attention_map(tape, q, k)?;
    let vt = v.permute(tape, &[2, 1, 0])?;
    let re = tape.matmul(a, vt.re)?;
    let im = tape.matmul(a, vt.im)?;
    CVar::new(re, im).permute(tape, &[2, 1, 0])
}
