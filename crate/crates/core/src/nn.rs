//! Named parameters and the small set of layers the networks are assembled from.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::{CVar, Conv2dSpec, Tape, Tensor, Var};

/// Epsilon of the cumulative layer norm.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered name → tensor map.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid("params", format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Replaces every value from `other`, which must have the same names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.len(),
                other.len()
            )));
        }
        for (name, t) in self.entries.iter_mut() {
            let src = other
                .by_name(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: expected shape {:?}, found {:?}",
                    t.shape(),
                    src.shape()
                )));
            }
            *t = src.clone();
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            h.update([0]);
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Places every parameter on the tape, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Bound { vars }
    }
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps handles created elsewhere, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Seeded initializer that names parameters by a scope path.
pub struct Builder {
    store: ParamStore,
    rng: ChaCha8Rng,
    scope: Vec<String>,
}

impl Builder {
    pub fn new(seed: u64) -> Self {
        Builder {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            scope: Vec::new(),
        }
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }

    pub fn scoped<T>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Builder) -> Result<T>) -> Result<T> {
        self.scope.push(name.into());
        let out = f(self);
        self.scope.pop();
        out
    }

    fn full_name(&self, leaf: &str) -> String {
        let mut s = self.scope.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(leaf);
        s
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn uniform(&mut self, leaf: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        let name = self.full_name(leaf);
        self.store.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn full(&mut self, leaf: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let name = self.full_name(leaf);
        self.store.add(name, Tensor::full(shape.to_vec(), value))
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }
}

/// 2-D convolution with optional bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: Conv2dSpec,
}

impl Conv {
    pub fn new(
        b: &mut Builder,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 2],
        spec: Conv2dSpec,
        bias: bool,
    ) -> Result<Self> {
        if spec.groups == 0 || cin % spec.groups != 0 || cout % spec.groups != 0 {
            return Err(Error::Config(format!(
                "{name}: groups {} must divide {cin} and {cout}",
                spec.groups
            )));
        }
        let cin_g = cin / spec.groups;
        let fan_in = cin_g * kernel[0] * kernel[1];
        b.scoped(name, |b| {
            let w = b.uniform("weight", &[cout, cin_g, kernel[0], kernel[1]], fan_in)?;
            let bias = if bias { Some(b.uniform("bias", &[cout], fan_in)?) } else { None };
            Ok(Conv { w, b: bias, spec })
        })
    }

    /// Same as [`Conv::new`] with all weights and bias zero.
    pub fn zeros(
        b: &mut Builder,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 2],
        spec: Conv2dSpec,
    ) -> Result<Self> {
        let cin_g = cin / spec.groups.max(1);
        b.scoped(name, |b| {
            let w = b.full("weight", &[cout, cin_g, kernel[0], kernel[1]], 0.0)?;
            let bias = Some(b.full("bias", &[cout], 0.0)?);
            Ok(Conv { w, b: bias, spec })
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        self.forward_with(tape, p, x, &self.spec)
    }

    /// Same weights under a different geometry (used when padding depends on the input size).
    pub fn forward_with(&self, tape: &mut Tape, p: &Bound, x: Var, spec: &Conv2dSpec) -> Result<Var> {
        let y = tape.conv2d(x, p.var(self.w), spec)?;
        match self.b {
            Some(b) => tape.add_channel(y, p.var(b)),
            None => Ok(y),
        }
    }
}

/// Transposed convolution (stride and dilation from `spec`, no padding),
/// trimmed to a requested window afterwards.
#[derive(Clone, Debug)]
pub struct ConvT {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: Conv2dSpec,
}

impl ConvT {
    pub fn new(
        b: &mut Builder,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 2],
        spec: Conv2dSpec,
    ) -> Result<Self> {
        let g = spec.groups;
        if g == 0 || cin % g != 0 || cout % g != 0 {
            return Err(Error::Config(format!("{name}: groups {g} must divide {cin} and {cout}")));
        }
        let fan_in = (cout / g) * kernel[0] * kernel[1];
        b.scoped(name, |b| {
            let w = b.uniform("weight", &[cin, cout / g, kernel[0], kernel[1]], fan_in)?;
            let bias = b.uniform("bias", &[cout], fan_in)?;
            Ok(ConvT { w, b: bias, spec })
        })
    }

    /// Runs the transposed convolution and keeps bins `f_off..f_off+f_len`
    /// and the first `t_len` frames.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, f_off: usize, f_len: usize, t_len: usize) -> Result<Var> {
        let y = tape.conv_transpose2d(x, p.var(self.w), &self.spec)?;
        let y = tape.narrow(y, 1, f_off, f_len)?;
        let y = tape.narrow(y, 2, 0, t_len)?;
        tape.add_channel(y, p.var(self.b))
    }
}

/// PReLU with one slope per channel, initialized to 0.25.
#[derive(Clone, Debug)]
pub struct Prelu {
    pub slope: ParamId,
}

impl Prelu {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Result<Self> {
        b.scoped(name, |b| Ok(Prelu { slope: b.full("slope", &[channels], 0.25)? }))
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.prelu(x, p.var(self.slope))
    }

    /// Same slopes on both parts.
    pub fn forward_complex(&self, tape: &mut Tape, p: &Bound, z: CVar) -> Result<CVar> {
        Ok(CVar::new(self.forward(tape, p, z.re)?, self.forward(tape, p, z.im)?))
    }
}

/// Cumulative layer norm with per-channel gain and bias.
#[derive(Clone, Debug)]
pub struct CumLayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl CumLayerNorm {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(CumLayerNorm {
                gain: b.full("gain", &[channels], 1.0)?,
                bias: b.full("bias", &[channels], 0.0)?,
            })
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.cum_norm(x, NORM_EPS)?;
        let y = tape.mul_channel(y, p.var(self.gain))?;
        tape.add_channel(y, p.var(self.bias))
    }

    /// Normalizes real and imaginary parts separately with shared affine terms.
    pub fn forward_complex(&self, tape: &mut Tape, p: &Bound, z: CVar) -> Result<CVar> {
        Ok(CVar::new(self.forward(tape, p, z.re)?, self.forward(tape, p, z.im)?))
    }
}

/// Complex convolution from a real/imaginary kernel pair:
/// `(W_R * Z_R - W_I * Z_I) + j (W_R * Z_I + W_I * Z_R)`.
#[derive(Clone, Debug)]
pub struct ComplexConv {
    pub re: Conv,
    pub im: Conv,
}

impl ComplexConv {
    pub fn new(
        b: &mut Builder,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 2],
        spec: Conv2dSpec,
    ) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(ComplexConv {
                re: Conv::new(b, "re", cin, cout, kernel, spec.clone(), true)?,
                im: Conv::new(b, "im", cin, cout, kernel, spec, true)?,
            })
        })
    }

    /// Bias-free variant: a pure complex-linear map.
    pub fn linear(
        b: &mut Builder,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 2],
        spec: Conv2dSpec,
    ) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(ComplexConv {
                re: Conv::new(b, "re", cin, cout, kernel, spec.clone(), false)?,
                im: Conv::new(b, "im", cin, cout, kernel, spec, false)?,
            })
        })
    }

    pub fn zeros(
        b: &mut Builder,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 2],
        spec: Conv2dSpec,
    ) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(ComplexConv {
                re: Conv::zeros(b, "re", cin, cout, kernel, spec.clone())?,
                im: Conv::zeros(b, "im", cin, cout, kernel, spec)?,
            })
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, z: CVar) -> Result<CVar> {
        self.forward_with(tape, p, z, &self.re.spec)
    }

    pub fn forward_with(&self, tape: &mut Tape, p: &Bound, z: CVar, spec: &Conv2dSpec) -> Result<CVar> {
        let rr = self.re.forward_with(tape, p, z.re, spec)?;
        let ii = self.im.forward_with(tape, p, z.im, spec)?;
        let ri = self.re.forward_with(tape, p, z.im, spec)?;
        let ir = self.im.forward_with(tape, p, z.re, spec)?;
        Ok(CVar::new(tape.sub(rr, ii)?, tape.add(ri, ir)?))
    }
}

/// Complex transposed convolution, same pairing as [`ComplexConv`].
#[derive(Clone, Debug)]
pub struct ComplexConvT {
    pub re: ConvT,
    pub im: ConvT,
}

impl ComplexConvT {
    pub fn new(
        b: &mut Builder,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 2],
        spec: Conv2dSpec,
    ) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(ComplexConvT {
                re: ConvT::new(b, "re", cin, cout, kernel, spec.clone())?,
                im: ConvT::new(b, "im", cin, cout, kernel, spec)?,
            })
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, z: CVar, f_off: usize, f_len: usize, t_len: usize) -> Result<CVar> {
        let rr = self.re.forward(tape, p, z.re, f_off, f_len, t_len)?;
        let ii = self.im.forward(tape, p, z.im, f_off, f_len, t_len)?;
        let ri = self.re.forward(tape, p, z.im, f_off, f_len, t_len)?;
        let ir = self.im.forward(tape, p, z.re, f_off, f_len, t_len)?;
        Ok(CVar::new(tape.sub(rr, ii)?, tape.add(ri, ir)?))
    }
}

/// Convolution whose weight is reparametrized as `g * v / ||v||` per output channel.
#[derive(Clone, Debug)]
pub struct WnConv {
    pub v: ParamId,
    pub g: ParamId,
    pub b: ParamId,
    pub spec: Conv2dSpec,
}

impl WnConv {
    pub fn new(
        b: &mut Builder,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 2],
        spec: Conv2dSpec,
    ) -> Result<Self> {
        let fan_in = cin * kernel[0] * kernel[1];
        b.scoped(name, |b| {
            let v = b.uniform("v", &[cout, cin, kernel[0], kernel[1]], fan_in)?;
            let vt = b.store().get(v).clone();
            let inner = vt.numel() / cout;
            let norms: Vec<f64> = vt
                .data()
                .chunks(inner)
                .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect();
            let name = b.full_name("g");
            let g = b.store.add(name, Tensor::new([cout], norms)?)?;
            let bias = b.uniform("bias", &[cout], fan_in)?;
            Ok(WnConv { v, g, b: bias, spec })
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let w = tape.weight_norm(p.var(self.v), p.var(self.g))?;
        let y = tape.conv2d(x, w, &self.spec)?;
        tape.add_channel(y, p.var(self.b))
    }
}

/// Right padding that, with `lo` left padding, makes a stride-`s` kernel-`k`
/// convolution emit exactly `ceil(f / s)` outputs.
pub fn ceil_pad_hi(f: usize, k: usize, s: usize, lo: usize) -> usize {
    let need = s * f.div_ceil(s) + k;
    need.saturating_sub(s + f + lo)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceil_padding_gives_ceil_division() {
        for f in 1..200 {
            for (k, s) in [(5, 4), (5, 2)] {
                let spec = Conv2dSpec::new().stride(s, 1).pad_freq(2, ceil_pad_hi(f, k, s, 2));
                if f + 2 + ceil_pad_hi(f, k, s, 2) < k {
                    continue;
                }
                let out = spec.output_size([f, 1], [k, 1]).unwrap();
                assert_eq!(out[0], f.div_ceil(s), "f={f} k={k} s={s}");
            }
        }
    }

    #[test]
    fn builder_is_deterministic_and_named() {
        let make = || {
            let mut b = Builder::new(7);
            Conv::new(&mut b, "c", 4, 6, [3, 2], Conv2dSpec::new(), true).unwrap();
            b.finish()
        };
        let (a, c) = (make(), make());
        assert_eq!(a.content_hash(), c.content_hash());
        assert_eq!(a.names().collect::<Vec<_>>(), vec!["c.weight", "c.bias"]);
        assert_eq!(a.count(), 6 * 4 * 6 + 6);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros([1])).unwrap();
        assert!(s.add("a", Tensor::zeros([1])).is_err());
    }

    #[test]
    fn hash_sees_single_bit() {
        let mut s = ParamStore::new();
        let id = s.add("a", Tensor::zeros([3])).unwrap();
        let h = s.content_hash();
        s.get_mut(id).data_mut()[1] = f64::from_bits(1);
        assert_ne!(h, s.content_hash());
    }
}
