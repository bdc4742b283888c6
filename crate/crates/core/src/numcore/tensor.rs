use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", "data length", numel, data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Tensor::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("reshape", "numel", self.data.len(), numel));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape("zip", "shape", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Copy of `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.ndim() {
            return Err(Error::shape("narrow", "axis", self.ndim(), axis));
        }
        if start + len > self.shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis}"),
                self.shape[axis],
                start + len,
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let n = self.shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner;
            out.extend_from_slice(&self.data[base + start * inner..base + (start + len) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor::new(shape, out)
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", "perm", nd, perm));
        }
        let in_strides = self.strides();
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let mut out = vec![0.0; self.numel()];
        let mut idx = vec![0usize; nd];
        for v in out.iter_mut() {
            let src: usize = (0..nd).map(|k| idx[k] * in_strides[perm[k]]).sum();
            *v = self.data[src];
            for k in (0..nd).rev() {
                idx[k] += 1;
                if idx[k] < out_shape[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        Tensor::new(out_shape, out)
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let nd = first.ndim();
        if axis >= nd {
            return Err(Error::shape("concat", "axis", nd, axis));
        }
        for p in parts {
            if p.ndim() != nd
                || p.shape[..axis] != first.shape[..axis]
                || p.shape[axis + 1..] != first.shape[axis + 1..]
            {
                return Err(Error::shape("concat", "non-concat axes", &first.shape, &p.shape));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                out.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Tensor::new(shape, out)
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        s[k] = s[k + 1] * shape[k + 1];
    }
    s
}

/// Real and imaginary parts of a complex array.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor {
    pub re: Tensor,
    pub im: Tensor,
}

impl ComplexTensor {
    pub fn new(re: Tensor, im: Tensor) -> Result<Self> {
        if re.shape() != im.shape() {
            return Err(Error::shape("complex", "re/im", re.shape(), im.shape()));
        }
        Ok(ComplexTensor { re, im })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        ComplexTensor {
            re: Tensor::zeros(shape.clone()),
            im: Tensor::zeros(shape),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }

    pub fn abs(&self) -> Tensor {
        self.re.zip_map(&self.im, f64::hypot).expect("shapes checked at construction")
    }
}

/// Plain complex matrix product `A·B` on `[M, K] x [K, N]` operands.
pub fn complex_matmul(a: &ComplexTensor, b: &ComplexTensor) -> Result<ComplexTensor> {
    if a.re.ndim() != 2 || b.re.ndim() != 2 {
        return Err(Error::shape("complex_matmul", "rank", 2, (a.re.ndim(), b.re.ndim())));
    }
    let (m, k) = (a.re.dim(0), a.re.dim(1));
    let (k2, n) = (b.re.dim(0), b.re.dim(1));
    if k != k2 {
        return Err(Error::shape("complex_matmul", "inner dimension", k, k2));
    }
    let (ar, ai, br, bi) = (a.re.data(), a.im.data(), b.re.data(), b.im.data());
    let mut re = vec![0.0; m * n];
    let mut im = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let (xr, xi) = (ar[i * k + p], ai[i * k + p]);
            for j in 0..n {
                let (yr, yi) = (br[p * n + j], bi[p * n + j]);
                re[i * n + j] += xr * yr - xi * yi;
                im[i * n + j] += xr * yi + xi * yr;
            }
        }
    }
    ComplexTensor::new(Tensor::new([m, n], re)?, Tensor::new([m, n], im)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_length() {
        assert!(Tensor::new([2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn permute_round_trip() {
        let t = Tensor::from_fn([2, 3, 4], |i| i as f64);
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        // element [c=1, f=2, t=3] lands at [3, 1, 2]
        assert_eq!(p.data()[3 * 6 + 1 * 3 + 2], t.data()[1 * 12 + 2 * 4 + 3]);
        assert_eq!(p.permute(&[1, 2, 0]).unwrap(), t);
    }

    #[test]
    fn narrow_and_concat_invert() {
        let t = Tensor::from_fn([3, 5, 2], |i| i as f64 * 0.5);
        let a = t.narrow(1, 0, 2).unwrap();
        let b = t.narrow(1, 2, 3).unwrap();
        assert_eq!(Tensor::concat(&[&a, &b], 1).unwrap(), t);
    }

    #[test]
    fn complex_matmul_hand_values() {
        let a = ComplexTensor::new(Tensor::new([1, 1], vec![1.0]).unwrap(), Tensor::new([1, 1], vec![1.0]).unwrap()).unwrap();
        let b = ComplexTensor::new(Tensor::new([1, 1], vec![1.0]).unwrap(), Tensor::new([1, 1], vec![-1.0]).unwrap()).unwrap();
        let c = complex_matmul(&a, &b).unwrap();
        assert_eq!(c.re.data(), &[2.0]);
        assert_eq!(c.im.data(), &[0.0]);
    }

    #[test]
    fn complex_matmul_dimension_mismatch() {
        let a = ComplexTensor::zeros([2, 3]);
        let b = ComplexTensor::zeros([2, 3]);
        assert!(matches!(complex_matmul(&a, &b), Err(Error::Shape { .. })));
    }
}
