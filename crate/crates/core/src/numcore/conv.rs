//! Direct 2-D convolution over `[channels, freq, time]` arrays.
//!
//! The forward kernel, its input-gradient and its weight-gradient share the
//! same index arithmetic. Transposed convolution is the input-gradient kernel
//! run forwards.

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// How an axis is padded before convolving.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PaddingMode {
    /// `(k-1)*d` zeros before the time axis only.
    CausalTime,
    /// `(k-1)*d/2` zeros on each side of the time axis (extra zero on the right when odd).
    NonCausalTime,
    /// Centered padding on the frequency axis; output keeps the bin count at stride 1.
    SameFreq,
    /// No padding.
    Valid,
}

/// Geometry of a convolution. Pairs are ordered `[freq, time]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: [usize; 2],
    pub dilation: [usize; 2],
    pub pad_freq: [usize; 2],
    pub pad_time: [usize; 2],
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: [1, 1],
            dilation: [1, 1],
            pad_freq: [0, 0],
            pad_time: [0, 0],
            groups: 1,
        }
    }
}

impl Conv2dSpec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stride(mut self, freq: usize, time: usize) -> Self {
        self.stride = [freq, time];
        self
    }

    pub fn dilation(mut self, freq: usize, time: usize) -> Self {
        self.dilation = [freq, time];
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn pad_freq(mut self, lo: usize, hi: usize) -> Self {
        self.pad_freq = [lo, hi];
        self
    }

    pub fn pad_time(mut self, lo: usize, hi: usize) -> Self {
        self.pad_time = [lo, hi];
        self
    }

    /// Time padding for a kernel of `k` taps; uses the time dilation already set.
    pub fn time_padding(mut self, mode: PaddingMode, k: usize) -> Self {
        let span = (k - 1) * self.dilation[1];
        self.pad_time = match mode {
            PaddingMode::CausalTime => [span, 0],
            PaddingMode::NonCausalTime | PaddingMode::SameFreq => [span / 2, span - span / 2],
            PaddingMode::Valid => [0, 0],
        };
        self
    }

    /// Frequency padding for a kernel of `k` taps; uses the frequency dilation already set.
    pub fn freq_padding(mut self, mode: PaddingMode, k: usize) -> Self {
        let span = (k - 1) * self.dilation[0];
        self.pad_freq = match mode {
            PaddingMode::CausalTime => [span, 0],
            PaddingMode::NonCausalTime | PaddingMode::SameFreq => [span / 2, span - span / 2],
            PaddingMode::Valid => [0, 0],
        };
        self
    }

    /// Output `[freq, time]` extent for an input extent and kernel extent.
    pub fn output_size(&self, input: [usize; 2], kernel: [usize; 2]) -> Result<[usize; 2]> {
        let mut out = [0; 2];
        for (a, name) in [(0, "freq"), (1, "time")] {
            let pad = if a == 0 { self.pad_freq } else { self.pad_time };
            if self.dilation[a] == 0 || self.stride[a] == 0 {
                return Err(Error::invalid("conv2d", format!("{name} stride/dilation must be >= 1")));
            }
            let padded = input[a] + pad[0] + pad[1];
            let span = self.dilation[a] * (kernel[a] - 1) + 1;
            if padded < span {
                return Err(Error::shape("conv2d", format!("{name} axis (padded input vs kernel span)"), span, padded));
            }
            out[a] = (padded - span) / self.stride[a] + 1;
        }
        Ok(out)
    }
}

/// Output indices `[lo, hi)` whose input index `o*stride + offset` falls in `[0, n_in)`.
fn valid_range(n_out: usize, n_in: usize, offset: isize, stride: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let last = n_in as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last / s + 1).min(n_out as isize);
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

struct Geometry {
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    f_in: usize,
    t_in: usize,
    f_out: usize,
    t_out: usize,
    kf: usize,
    kt: usize,
}

fn geometry(in_shape: &[usize], w_shape: &[usize], spec: &Conv2dSpec) -> Result<Geometry> {
    if in_shape.len() != 3 {
        return Err(Error::shape("conv2d", "input rank", 3, in_shape.len()));
    }
    if w_shape.len() != 4 {
        return Err(Error::shape("conv2d", "weight rank", 4, w_shape.len()));
    }
    let g = spec.groups;
    if g == 0 || in_shape[0] % g != 0 || w_shape[0] % g != 0 {
        return Err(Error::invalid("conv2d", format!("groups {g} do not divide channels")));
    }
    let cin_g = in_shape[0] / g;
    if w_shape[1] != cin_g {
        return Err(Error::shape("conv2d", "channel axis (input channels per group)", w_shape[1], cin_g));
    }
    let [f_out, t_out] = spec.output_size([in_shape[1], in_shape[2]], [w_shape[2], w_shape[3]])?;
    Ok(Geometry {
        cout: w_shape[0],
        cin_g,
        cout_g: w_shape[0] / g,
        f_in: in_shape[1],
        t_in: in_shape[2],
        f_out,
        t_out,
        kf: w_shape[2],
        kt: w_shape[3],
    })
}

/// Visits every (output row, input row, weight index, time range) quadruple.
fn for_each_tap(g: &Geometry, spec: &Conv2dSpec, mut f: impl FnMut(usize, usize, usize, usize, usize, isize)) {
    let [sf, st] = spec.stride;
    let [df, dt] = spec.dilation;
    for co in 0..g.cout {
        let grp = co / g.cout_g;
        for cil in 0..g.cin_g {
            let ci = grp * g.cin_g + cil;
            for kf in 0..g.kf {
                let foff = (kf * df) as isize - spec.pad_freq[0] as isize;
                let (f_lo, f_hi) = valid_range(g.f_out, g.f_in, foff, sf);
                for kt in 0..g.kt {
                    let toff = (kt * dt) as isize - spec.pad_time[0] as isize;
                    let (t_lo, t_hi) = valid_range(g.t_out, g.t_in, toff, st);
                    if t_lo == t_hi {
                        continue;
                    }
                    let widx = ((co * g.cin_g + cil) * g.kf + kf) * g.kt + kt;
                    for of in f_lo..f_hi {
                        let fi = (of as isize * sf as isize + foff) as usize;
                        let out_row = co * g.f_out + of;
                        let in_row = ci * g.f_in + fi;
                        f(out_row, in_row, widx, t_lo, t_hi, toff);
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(x: &Tensor, w: &Tensor, spec: &Conv2dSpec) -> Result<Tensor> {
    let g = geometry(x.shape(), w.shape(), spec)?;
    if use_gemm(&g) {
        return Ok(gemm_forward(&g, x, w, spec));
    }
    forward_direct(&g, x, w, spec)
}

fn forward_direct(g: &Geometry, x: &Tensor, w: &Tensor, spec: &Conv2dSpec) -> Result<Tensor> {
    let st = spec.stride[1];
    let mut y = Tensor::zeros([g.cout, g.f_out, g.t_out]);
    let (xd, wd) = (x.data(), w.data());
    let yd = y.data_mut();
    for_each_tap(g, spec, |orow, irow, widx, lo, hi, toff| {
        let wv = wd[widx];
        let yrow = &mut yd[orow * g.t_out..(orow + 1) * g.t_out];
        let xrow = &xd[irow * g.t_in..(irow + 1) * g.t_in];
        if st == 1 {
            let base = (lo as isize + toff) as usize;
            for (yo, xi) in yrow[lo..hi].iter_mut().zip(&xrow[base..base + hi - lo]) {
                *yo += wv * xi;
            }
        } else {
            for (ot, yo) in yrow.iter_mut().enumerate().take(hi).skip(lo) {
                *yo += wv * xrow[(ot as isize * st as isize + toff) as usize];
            }
        }
    });
    Ok(y)
}

/// Gradient w.r.t. the input of `forward`, given the output gradient `gy`.
pub(crate) fn input_grad(gy: &Tensor, w: &Tensor, in_shape: &[usize], spec: &Conv2dSpec) -> Result<Tensor> {
    let g = geometry(in_shape, w.shape(), spec)?;
    if gy.shape() != [g.cout, g.f_out, g.t_out] {
        return Err(Error::shape("conv2d_input_grad", "output gradient", [g.cout, g.f_out, g.t_out], gy.shape()));
    }
    if use_gemm(&g) {
        return Ok(gemm_input_grad(&g, gy, w, in_shape, spec));
    }
    Ok(input_grad_direct(&g, gy, w, in_shape, spec))
}

fn input_grad_direct(g: &Geometry, gy: &Tensor, w: &Tensor, in_shape: &[usize], spec: &Conv2dSpec) -> Tensor {
    let st = spec.stride[1];
    let mut gx = Tensor::zeros(in_shape.to_vec());
    let (gyd, wd) = (gy.data(), w.data());
    let gxd = gx.data_mut();
    for_each_tap(g, spec, |orow, irow, widx, lo, hi, toff| {
        let wv = wd[widx];
        let grow = &gyd[orow * g.t_out..(orow + 1) * g.t_out];
        let xrow = &mut gxd[irow * g.t_in..(irow + 1) * g.t_in];
        if st == 1 {
            let base = (lo as isize + toff) as usize;
            for (xi, go) in xrow[base..base + hi - lo].iter_mut().zip(&grow[lo..hi]) {
                *xi += wv * go;
            }
        } else {
            for (ot, go) in grow.iter().enumerate().take(hi).skip(lo) {
                xrow[(ot as isize * st as isize + toff) as usize] += wv * go;
            }
        }
    });
    gx
}

/// Gradient w.r.t. the weights of `forward`.
pub(crate) fn weight_grad(x: &Tensor, gy: &Tensor, w_shape: &[usize], spec: &Conv2dSpec) -> Result<Tensor> {
    let g = geometry(x.shape(), w_shape, spec)?;
    if gy.shape() != [g.cout, g.f_out, g.t_out] {
        return Err(Error::shape("conv2d_weight_grad", "output gradient", [g.cout, g.f_out, g.t_out], gy.shape()));
    }
    if use_gemm(&g) {
        return Ok(gemm_weight_grad(&g, x, gy, w_shape, spec));
    }
    Ok(weight_grad_direct(&g, x, gy, w_shape, spec))
}

fn weight_grad_direct(g: &Geometry, x: &Tensor, gy: &Tensor, w_shape: &[usize], spec: &Conv2dSpec) -> Tensor {
    let st = spec.stride[1];
    let mut gw = Tensor::zeros(w_shape.to_vec());
    let (gyd, xd) = (gy.data(), x.data());
    let gwd = gw.data_mut();
    for_each_tap(g, spec, |orow, irow, widx, lo, hi, toff| {
        let grow = &gyd[orow * g.t_out..(orow + 1) * g.t_out];
        let xrow = &xd[irow * g.t_in..(irow + 1) * g.t_in];
        let acc: f64 = if st == 1 {
            let base = (lo as isize + toff) as usize;
            grow[lo..hi].iter().zip(&xrow[base..base + hi - lo]).map(|(a, b)| a * b).sum()
        } else {
            (lo..hi)
                .map(|ot| grow[ot] * xrow[(ot as isize * st as isize + toff) as usize])
                .sum()
        };
        gwd[widx] += acc;
    });
    gw
}

/// Dense per-group convolutions go through im2col and a blocked GEMM; thin
/// ones (depthwise, 1-channel) stay on the direct loops.
fn use_gemm(g: &Geometry) -> bool {
    g.cin_g * g.kf * g.kt >= 8 && g.cout_g >= 2 && g.f_out * g.t_out >= 16
}

/// `c[m x n] (+)= a[m x k] * b[k x n]`, with optional transposes given as strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices hold at least m*k, k*n and m*n elements laid out with
    // the strides above, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), rsa, csa,
            b.as_ptr(), rsb, csb,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Rows `(ci_local, kf, kt)`, columns `(f_out, t_out)` for the channels of group `grp`.
fn im2col(g: &Geometry, spec: &Conv2dSpec, x: &[f64], grp: usize, col: &mut [f64]) {
    let [sf, st] = spec.stride;
    let [df, dt] = spec.dilation;
    let n = g.f_out * g.t_out;
    col.fill(0.0);
    for cil in 0..g.cin_g {
        let ci = grp * g.cin_g + cil;
        for a in 0..g.kf {
            let foff = (a * df) as isize - spec.pad_freq[0] as isize;
            let (f_lo, f_hi) = valid_range(g.f_out, g.f_in, foff, sf);
            for b in 0..g.kt {
                let toff = (b * dt) as isize - spec.pad_time[0] as isize;
                let (t_lo, t_hi) = valid_range(g.t_out, g.t_in, toff, st);
                let row = &mut col[((cil * g.kf + a) * g.kt + b) * n..][..n];
                for of in f_lo..f_hi {
                    let fi = (of as isize * sf as isize + foff) as usize;
                    let xrow = &x[(ci * g.f_in + fi) * g.t_in..][..g.t_in];
                    let dst = &mut row[of * g.t_out..][..g.t_out];
                    for ot in t_lo..t_hi {
                        dst[ot] = xrow[(ot as isize * st as isize + toff) as usize];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto the input of group `grp`.
fn col2im(g: &Geometry, spec: &Conv2dSpec, col: &[f64], grp: usize, x: &mut [f64]) {
    let [sf, st] = spec.stride;
    let [df, dt] = spec.dilation;
    let n = g.f_out * g.t_out;
    for cil in 0..g.cin_g {
        let ci = grp * g.cin_g + cil;
        for a in 0..g.kf {
            let foff = (a * df) as isize - spec.pad_freq[0] as isize;
            let (f_lo, f_hi) = valid_range(g.f_out, g.f_in, foff, sf);
            for b in 0..g.kt {
                let toff = (b * dt) as isize - spec.pad_time[0] as isize;
                let (t_lo, t_hi) = valid_range(g.t_out, g.t_in, toff, st);
                let row = &col[((cil * g.kf + a) * g.kt + b) * n..][..n];
                for of in f_lo..f_hi {
                    let fi = (of as isize * sf as isize + foff) as usize;
                    let xrow = &mut x[(ci * g.f_in + fi) * g.t_in..][..g.t_in];
                    let src = &row[of * g.t_out..][..g.t_out];
                    for ot in t_lo..t_hi {
                        xrow[(ot as isize * st as isize + toff) as usize] += src[ot];
                    }
                }
            }
        }
    }
}

fn gemm_forward(g: &Geometry, x: &Tensor, w: &Tensor, spec: &Conv2dSpec) -> Tensor {
    let (k, n) = (g.cin_g * g.kf * g.kt, g.f_out * g.t_out);
    let mut y = Tensor::zeros([g.cout, g.f_out, g.t_out]);
    let mut col = vec![0.0; k * n];
    for grp in 0..spec.groups {
        im2col(g, spec, x.data(), grp, &mut col);
        let wg = &w.data()[grp * g.cout_g * k..][..g.cout_g * k];
        let yg = &mut y.data_mut()[grp * g.cout_g * n..][..g.cout_g * n];
        gemm(g.cout_g, k, n, wg, false, &col, false, yg, 0.0);
    }
    y
}

fn gemm_input_grad(g: &Geometry, gy: &Tensor, w: &Tensor, in_shape: &[usize], spec: &Conv2dSpec) -> Tensor {
    let (k, n) = (g.cin_g * g.kf * g.kt, g.f_out * g.t_out);
    let mut gx = Tensor::zeros(in_shape.to_vec());
    let mut col = vec![0.0; k * n];
    for grp in 0..spec.groups {
        let wg = &w.data()[grp * g.cout_g * k..][..g.cout_g * k];
        let gyg = &gy.data()[grp * g.cout_g * n..][..g.cout_g * n];
        gemm(k, g.cout_g, n, wg, true, gyg, false, &mut col, 0.0);
        col2im(g, spec, &col, grp, gx.data_mut());
    }
    gx
}

fn gemm_weight_grad(g: &Geometry, x: &Tensor, gy: &Tensor, w_shape: &[usize], spec: &Conv2dSpec) -> Tensor {
    let (k, n) = (g.cin_g * g.kf * g.kt, g.f_out * g.t_out);
    let mut gw = Tensor::zeros(w_shape.to_vec());
    let mut col = vec![0.0; k * n];
    for grp in 0..spec.groups {
        im2col(g, spec, x.data(), grp, &mut col);
        let gyg = &gy.data()[grp * g.cout_g * n..][..g.cout_g * n];
        let gwg = &mut gw.data_mut()[grp * g.cout_g * k..][..g.cout_g * k];
        gemm(g.cout_g, n, k, gyg, false, &col, true, gwg, 0.0);
    }
    gw
}

/// Shape of the full (untrimmed) transposed-convolution output.
///
/// Weight layout is `[in_channels, out_channels / groups, kf, kt]`, i.e. the
/// weight of the forward convolution whose input-gradient this is.
pub(crate) fn transpose_output_shape(x_shape: &[usize], w_shape: &[usize], spec: &Conv2dSpec) -> Result<[usize; 3]> {
    if x_shape.len() != 3 || w_shape.len() != 4 {
        return Err(Error::shape("conv_transpose2d", "rank", (3, 4), (x_shape.len(), w_shape.len())));
    }
    if spec.pad_freq != [0, 0] || spec.pad_time != [0, 0] {
        return Err(Error::invalid("conv_transpose2d", "padding is expressed by trimming the output"));
    }
    if x_shape[0] != w_shape[0] {
        return Err(Error::shape("conv_transpose2d", "channel axis", w_shape[0], x_shape[0]));
    }
    let c_out = w_shape[1] * spec.groups;
    let f = (x_shape[1] - 1) * spec.stride[0] + spec.dilation[0] * (w_shape[2] - 1) + 1;
    let t = (x_shape[2] - 1) * spec.stride[1] + spec.dilation[1] * (w_shape[3] - 1) + 1;
    Ok([c_out, f, t])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &Tensor, w: &Tensor, spec: &Conv2dSpec) -> Tensor {
        let [fi, ti] = [x.dim(1), x.dim(2)];
        let [cout, cin_g, kf, kt] = [w.dim(0), w.dim(1), w.dim(2), w.dim(3)];
        let [fo, to] = spec.output_size([fi, ti], [kf, kt]).unwrap();
        let cout_g = cout / spec.groups;
        let mut y = Tensor::zeros([cout, fo, to]);
        for co in 0..cout {
            for of in 0..fo {
                for ot in 0..to {
                    let mut acc = 0.0;
                    for cil in 0..cin_g {
                        let ci = (co / cout_g) * cin_g + cil;
                        for a in 0..kf {
                            for b in 0..kt {
                                let f = (of * spec.stride[0] + a * spec.dilation[0]) as isize - spec.pad_freq[0] as isize;
                                let t = (ot * spec.stride[1] + b * spec.dilation[1]) as isize - spec.pad_time[0] as isize;
                                if f >= 0 && t >= 0 && (f as usize) < fi && (t as usize) < ti {
                                    acc += w.data()[((co * cin_g + cil) * kf + a) * kt + b]
                                        * x.data()[(ci * fi + f as usize) * ti + t as usize];
                                }
                            }
                        }
                    }
                    y.data_mut()[(co * fo + of) * to + ot] = acc;
                }
            }
        }
        y
    }

    fn lcg(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn matches_naive_loops() {
        let specs = [
            Conv2dSpec::new().pad_freq(2, 2).time_padding(PaddingMode::CausalTime, 3),
            Conv2dSpec::new().stride(4, 1).pad_freq(2, 2),
            Conv2dSpec::new().dilation(1, 2).time_padding(PaddingMode::NonCausalTime, 3).groups(2),
            Conv2dSpec::new().stride(2, 2).pad_time(1, 0),
        ];
        for (i, spec) in specs.iter().enumerate() {
            let x = Tensor::new([4, 9, 7], lcg(4 * 9 * 7, i as u64)).unwrap();
            let cin_g = 4 / spec.groups;
            let w = Tensor::new([6, cin_g, 5, 3], lcg(6 * cin_g * 15, 100 + i as u64)).unwrap();
            let fast = forward(&x, &w, spec).unwrap();
            let slow = naive(&x, &w, spec);
            assert!(fast.max_abs_diff(&slow) < 1e-12, "spec {i}");
        }
    }

    #[test]
    fn gemm_and_direct_paths_agree() {
        let specs = [
            Conv2dSpec::new().pad_freq(2, 2).time_padding(PaddingMode::CausalTime, 3),
            Conv2dSpec::new().stride(4, 1).pad_freq(2, 1),
            Conv2dSpec::new().dilation(2, 2).time_padding(PaddingMode::NonCausalTime, 3).groups(2),
            Conv2dSpec::new().stride(2, 3).pad_time(1, 0),
        ];
        for (i, spec) in specs.iter().enumerate() {
            let x = Tensor::new([4, 11, 13], lcg(4 * 11 * 13, i as u64)).unwrap();
            let cin_g = 4 / spec.groups;
            let w = Tensor::new([6, cin_g, 3, 3], lcg(6 * cin_g * 9, 50 + i as u64)).unwrap();
            let g = geometry(x.shape(), w.shape(), spec).unwrap();
            assert!(use_gemm(&g), "spec {i} should take the gemm path");
            let y = gemm_forward(&g, &x, &w, spec);
            assert!(y.max_abs_diff(&forward_direct(&g, &x, &w, spec).unwrap()) < 1e-12);
            let gy = Tensor::new(y.shape().to_vec(), lcg(y.numel(), 70 + i as u64)).unwrap();
            let a = gemm_input_grad(&g, &gy, &w, x.shape(), spec);
            let b = input_grad_direct(&g, &gy, &w, x.shape(), spec);
            assert!(a.max_abs_diff(&b) < 1e-12);
            let a = gemm_weight_grad(&g, &x, &gy, w.shape(), spec);
            let b = weight_grad_direct(&g, &x, &gy, w.shape(), spec);
            assert!(a.max_abs_diff(&b) < 1e-12);
        }
    }

    #[test]
    fn causal_time_hand_values() {
        // [1,1,1] time kernel, two leading zeros: [1,2,3] -> [1,3,6]
        let x = Tensor::new([1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let w = Tensor::new([1, 1, 1, 3], vec![1.0; 3]).unwrap();
        let spec = Conv2dSpec::new().time_padding(PaddingMode::CausalTime, 3);
        assert_eq!(forward(&x, &w, &spec).unwrap().data(), &[1.0, 3.0, 6.0]);
    }

    #[test]
    fn shape_error_names_axis() {
        let x = Tensor::zeros([2, 3, 3]);
        let w = Tensor::zeros([1, 2, 5, 1]);
        match forward(&x, &w, &Conv2dSpec::new()) {
            Err(Error::Shape { axis, .. }) => assert!(axis.contains("freq")),
            other => panic!("unexpected {other:?}"),
        }
        let w = Tensor::zeros([1, 3, 1, 1]);
        match forward(&x, &w, &Conv2dSpec::new()) {
            Err(Error::Shape { axis, .. }) => assert!(axis.contains("channel")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
