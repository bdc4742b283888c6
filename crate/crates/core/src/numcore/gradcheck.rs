//! Central finite differences against tape gradients.

use crate::error::Result;
use crate::numcore::{Tape, Tensor, Var};

/// Gradient norm treated as zero; central-difference round-off at h = 1e-5 is ~1e-11.
pub const ZERO_GRAD: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Worst norm-wise relative error over the checked inputs.
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

/// Compares tape gradients of `f` with central differences of step `h`.
///
/// `f` builds a scalar loss from one leaf per entry of `inputs`. At most
/// `max_coords` coordinates per input are probed (evenly spaced). The
/// reported error for an input is `|g_tape - g_fd| / max(|g_tape|, |g_fd|, 1e-12)`
/// over the probed coordinates. An input whose tape and finite-difference
/// gradients both have norm below [`ZERO_GRAD`] counts as an exact match
/// (e.g. a bias cancelled by a following normalization); the relative error
/// of two round-off-sized vectors carries no information.
pub fn check<F>(inputs: &[Tensor], h: f64, max_coords: usize, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]);
        let n = input.numel();
        let step = (n / max_coords.max(1)).max(1);
        let (mut diff2, mut a2, mut b2) = (0.0, 0.0, 0.0);
        let mut work: Vec<Tensor> = inputs.to_vec();
        for i in (0..n).step_by(step).take(max_coords) {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic.data()[i];
            diff2 += (fd - an) * (fd - an);
            a2 += an * an;
            b2 += fd * fd;
            checked += 1;
        }
        let scale = a2.sqrt().max(b2.sqrt());
        let rel = if scale < ZERO_GRAD { 0.0 } else { diff2.sqrt() / scale };
        worst = worst.max(rel);
    }
    Ok(GradCheck {
        max_rel_error: worst,
        coords_checked: checked,
    })
}
