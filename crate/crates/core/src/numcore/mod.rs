//! Real/complex arrays and the reverse-mode tape the networks are built on.

pub mod conv;
pub mod gradcheck;
mod tape;
mod tensor;

pub use conv::{Conv2dSpec, PaddingMode};
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::{complex_matmul, ComplexTensor, Tensor};

use crate::error::Result;

/// A complex value on the tape, carried as two real nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CVar {
    pub re: Var,
    pub im: Var,
}

impl CVar {
    pub fn new(re: Var, im: Var) -> Self {
        CVar { re, im }
    }

    pub fn leaf(tape: &mut Tape, z: &ComplexTensor) -> Self {
        CVar::new(tape.leaf(z.re.clone()), tape.leaf(z.im.clone()))
    }

    pub fn constant(tape: &mut Tape, z: &ComplexTensor) -> Self {
        CVar::new(tape.constant(z.re.clone()), tape.constant(z.im.clone()))
    }

    pub fn value(self, tape: &Tape) -> ComplexTensor {
        ComplexTensor {
            re: tape.value(self.re).clone(),
            im: tape.value(self.im).clone(),
        }
    }

    pub fn add(self, tape: &mut Tape, other: CVar) -> Result<CVar> {
        Ok(CVar::new(tape.add(self.re, other.re)?, tape.add(self.im, other.im)?))
    }

    /// Elementwise complex product.
    pub fn mul(self, tape: &mut Tape, other: CVar) -> Result<CVar> {
        let rr = tape.mul(self.re, other.re)?;
        let ii = tape.mul(self.im, other.im)?;
        let ri = tape.mul(self.re, other.im)?;
        let ir = tape.mul(self.im, other.re)?;
        Ok(CVar::new(tape.sub(rr, ii)?, tape.add(ri, ir)?))
    }

    pub fn abs(self, tape: &mut Tape) -> Result<Var> {
        tape.complex_abs(self.re, self.im)
    }

    pub fn narrow(self, tape: &mut Tape, axis: usize, start: usize, len: usize) -> Result<CVar> {
        Ok(CVar::new(
            tape.narrow(self.re, axis, start, len)?,
            tape.narrow(self.im, axis, start, len)?,
        ))
    }

    pub fn concat(tape: &mut Tape, parts: &[CVar], axis: usize) -> Result<CVar> {
        let re: Vec<Var> = parts.iter().map(|p| p.re).collect();
        let im: Vec<Var> = parts.iter().map(|p| p.im).collect();
        Ok(CVar::new(tape.concat(&re, axis)?, tape.concat(&im, axis)?))
    }

    pub fn permute(self, tape: &mut Tape, perm: &[usize]) -> Result<CVar> {
        Ok(CVar::new(tape.permute(self.re, perm)?, tape.permute(self.im, perm)?))
    }

    pub fn reshape(self, tape: &mut Tape, shape: &[usize]) -> Result<CVar> {
        Ok(CVar::new(tape.reshape(self.re, shape)?, tape.reshape(self.im, shape)?))
    }
}

/// Batched complex product `A·B`: `re = Ar·Br − Ai·Bi`, `im = Ar·Bi + Ai·Br`.
/// A transpose, when wanted, is applied by the caller.
pub fn complex_matmul_var(tape: &mut Tape, a: CVar, b: CVar) -> Result<CVar> {
    let rr = tape.matmul(a.re, b.re)?;
    let ii = tape.matmul(a.im, b.im)?;
    let ri = tape.matmul(a.re, b.im)?;
    let ir = tape.matmul(a.im, b.re)?;
    Ok(CVar::new(tape.sub(rr, ii)?, tape.add(ri, ir)?))
}
