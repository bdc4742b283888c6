use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use restore_core::numcore::{
    complex_matmul, gradcheck, ComplexTensor, Conv2dSpec, PaddingMode, Tape, Tensor, Var,
};
use restore_core::Error;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn assert_grad<F>(name: &str, inputs: &[Tensor], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> restore_core::Result<Var>,
{
    let report = gradcheck::check(inputs, 1e-5, 64, f).unwrap();
    assert!(
        report.max_rel_error < 1e-4,
        "{name}: relative error {:.3e}",
        report.max_rel_error
    );
}

/// Weighted sum with fixed pseudo-random weights so every output element matters.
fn probe_loss(tape: &mut Tape, y: Var) -> restore_core::Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = Tensor::from_fn(shape, |i| ((i * 7919 % 113) as f64 / 113.0) - 0.4);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new([2], vec![1.0, 2.0]).unwrap());
    let unused = tape.leaf(Tensor::new([3], vec![5.0, 6.0, 7.0]).unwrap());
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(x).data(), &[1.0, 1.0]);
    assert_eq!(g.wrt(unused).data(), &[0.0, 0.0, 0.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new([2], vec![1.0, 2.0]).unwrap());
    let sq = tape.square(x);
    let s = tape.sum(sq);
    assert_eq!(tape.backward(s).unwrap().wrt(x).data(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_and_detached() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros([3]));
    assert!(matches!(tape.backward(x), Err(Error::Backward(_))));
    let c = tape.constant(Tensor::zeros([3]));
    let s = tape.sum(c);
    assert!(matches!(tape.backward(s), Err(Error::Backward(_))));
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&[3, 4], &mut rng);
    let b = rand_tensor(&[3, 4], &mut rng).map(|v| v + 2.5);
    let pos = a.map(|v| v.abs() + 0.3);
    assert_grad("add/sub/mul/div", &[a.clone(), b.clone()], |t, v| {
        let s = t.add(v[0], v[1])?;
        let d = t.sub(s, v[1])?;
        let m = t.mul(d, v[1])?;
        let q = t.div(m, v[1])?;
        let q = t.mul(q, v[0])?;
        probe_loss(t, q)
    });
    assert_grad("scalar broadcast", &[a.clone(), Tensor::scalar(1.7)], |t, v| {
        let m = t.mul(v[0], v[1])?;
        let d = t.div(m, v[1])?;
        let d = t.mul(d, v[1])?;
        probe_loss(t, d)
    });
    assert_grad("sqrt/log/pow", &[pos], |t, v| {
        let s = t.sqrt(v[0]);
        let l = t.log(v[0]);
        let p = t.powf(v[0], 0.5);
        let a = t.add(s, l)?;
        let a = t.add(a, p)?;
        probe_loss(t, a)
    });
    assert_grad("sigmoid/tanh/leaky/abs/square", &[a.clone()], |t, v| {
        let s = t.sigmoid(v[0]);
        let h = t.tanh(v[0]);
        let l = t.leaky_relu(v[0], 0.1);
        let ab = t.abs(v[0]);
        let sq = t.square(v[0]);
        let x = t.add(s, h)?;
        let x = t.add(x, l)?;
        let x = t.add(x, ab)?;
        let x = t.add(x, sq)?;
        probe_loss(t, x)
    });
    assert_grad("mean/scale/offset", &[a], |t, v| {
        let s = t.scale(v[0], -3.0);
        let o = t.offset(s, 0.25);
        let q = t.square(o);
        Ok(t.mean(q))
    });
}

#[test]
fn channel_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&[3, 4, 5], &mut rng);
    let c = rand_tensor(&[3], &mut rng);
    assert_grad("prelu/add/mul channel", &[x.clone(), c.clone(), c.map(|v| v + 1.0)], |t, v| {
        let p = t.prelu(v[0], v[1])?;
        let a = t.add_channel(p, v[1])?;
        let m = t.mul_channel(a, v[2])?;
        probe_loss(t, m)
    });
    assert_grad("weight_norm", &[rand_tensor(&[3, 2, 2, 2], &mut rng), c.map(|v| v + 1.5)], |t, v| {
        let w = t.weight_norm(v[0], v[1])?;
        probe_loss(t, w)
    });
    assert_grad("cum_norm", &[x], |t, v| {
        let y = t.cum_norm(v[0], 1e-5)?;
        probe_loss(t, y)
    });
}

#[test]
fn shape_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[2, 3, 4], &mut rng);
    let y = rand_tensor(&[2, 1, 4], &mut rng);
    assert_grad("permute/narrow/concat/reshape", &[x, y], |t, v| {
        let p = t.permute(v[0], &[2, 0, 1])?;
        let p = t.permute(p, &[1, 2, 0])?;
        let n = t.narrow(p, 1, 1, 2)?;
        let c = t.concat(&[n, v[1], v[1]], 1)?;
        let r = t.reshape(c, &[8, 4])?;
        let sq = t.square(r);
        probe_loss(t, sq)
    });
}

#[test]
fn matmul_softmax_abs_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_tensor(&[2, 3, 4], &mut rng);
    let b = rand_tensor(&[2, 4, 5], &mut rng);
    assert_grad("matmul/softmax", &[a.clone(), b], |t, v| {
        let m = t.matmul(v[0], v[1])?;
        let s = t.softmax(m)?;
        probe_loss(t, s)
    });
    assert_grad("complex_abs", &[a.clone(), a.map(|v| v * 0.5 - 0.1)], |t, v| {
        let m = t.complex_abs(v[0], v[1])?;
        probe_loss(t, m)
    });
}

#[test]
fn conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let specs = [
        Conv2dSpec::new().pad_freq(2, 2).time_padding(PaddingMode::CausalTime, 3),
        Conv2dSpec::new()
            .dilation(1, 2)
            .time_padding(PaddingMode::NonCausalTime, 3)
            .freq_padding(PaddingMode::SameFreq, 5)
            .groups(4),
        Conv2dSpec::new().stride(4, 1).pad_freq(2, 2),
    ];
    for (i, spec) in specs.iter().enumerate() {
        let w_in = 4 / spec.groups;
        let x = rand_tensor(&[4, 9, 6], &mut rng);
        let w = rand_tensor(&[4, w_in, 5, 3], &mut rng);
        assert_grad(&format!("conv2d #{i}"), &[x, w], |t, v| {
            let y = t.conv2d(v[0], v[1], spec)?;
            probe_loss(t, y)
        });
    }
    let x = rand_tensor(&[3, 4, 5], &mut rng);
    let w = rand_tensor(&[3, 2, 5, 2], &mut rng);
    let spec = Conv2dSpec::new().stride(4, 1);
    assert_grad("conv_transpose2d", &[x, w], |t, v| {
        let y = t.conv_transpose2d(v[0], v[1], &spec)?;
        let y = t.narrow(y, 1, 2, 13)?;
        probe_loss(t, y)
    });
}

#[test]
fn transpose_conv_is_adjoint_of_conv() {
    // <conv(x), y> == <x, conv_transpose(y)>
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let spec = Conv2dSpec::new().stride(2, 1).dilation(1, 2);
    let x = rand_tensor(&[2, 11, 7], &mut rng);
    let w = rand_tensor(&[3, 2, 5, 2], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w);
    let y = tape.conv2d(xv, wv, &spec).unwrap();
    let probe = rand_tensor(tape.shape(y), &mut rng);
    let pv = tape.constant(probe.clone());
    let back = tape.conv_transpose2d(pv, wv, &spec).unwrap();
    let back = tape.value(back).narrow(1, 0, 11).unwrap().narrow(2, 0, 7).unwrap();
    let lhs: f64 = tape.value(y).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
}

#[test]
fn unit_impulse_identity_kernel() {
    let mut tape = Tape::new();
    let mut x = Tensor::zeros([1, 3, 4]);
    x.data_mut()[5] = 1.0;
    let xv = tape.constant(x.clone());
    let w = tape.constant(Tensor::new([1, 1, 1, 1], vec![1.0]).unwrap());
    let y = tape.conv2d(xv, w, &Conv2dSpec::new()).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn causal_padding_ignores_future_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec = Conv2dSpec::new().dilation(1, 2).time_padding(PaddingMode::CausalTime, 3).pad_freq(1, 1);
    let w = rand_tensor(&[2, 2, 3, 3], &mut rng);
    let base = rand_tensor(&[2, 5, 12], &mut rng);
    let run = |x: &Tensor| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let y = tape.conv2d(xv, wv, &spec).unwrap();
        tape.value(y).clone()
    };
    let y0 = run(&base);
    for t in 0..11 {
        let mut x = base.clone();
        for c in 0..2 {
            for f in 0..5 {
                for tt in t + 1..12 {
                    x.data_mut()[(c * 5 + f) * 12 + tt] += rng.random_range(-5.0..5.0);
                }
            }
        }
        let y1 = run(&x);
        for c in 0..2 {
            for f in 0..5 {
                for tt in 0..=t {
                    let i = (c * 5 + f) * 12 + tt;
                    assert_eq!(y0.data()[i].to_bits(), y1.data()[i].to_bits());
                }
            }
        }
    }
}

fn naive_complex(a: &ComplexTensor, b: &ComplexTensor) -> ComplexTensor {
    let n = a.re.dim(0);
    let mut out = ComplexTensor::zeros([n, n]);
    for i in 0..n {
        for j in 0..n {
            let (mut re, mut im) = (0.0, 0.0);
            for k in 0..n {
                let (ar, ai) = (a.re.data()[i * n + k], a.im.data()[i * n + k]);
                let (br, bi) = (b.re.data()[k * n + j], b.im.data()[k * n + j]);
                re += ar * br - ai * bi;
                im += ar * bi + ai * br;
            }
            out.re.data_mut()[i * n + j] = re;
            out.im.data_mut()[i * n + j] = im;
        }
    }
    out
}

#[test]
fn complex_matmul_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let a = ComplexTensor::new(rand_tensor(&[4, 4], &mut rng), rand_tensor(&[4, 4], &mut rng)).unwrap();
        let b = ComplexTensor::new(rand_tensor(&[4, 4], &mut rng), rand_tensor(&[4, 4], &mut rng)).unwrap();
        let fast = complex_matmul(&a, &b).unwrap();
        let slow = naive_complex(&a, &b);
        assert!(fast.re.max_abs_diff(&slow.re) < 1e-12);
        assert!(fast.im.max_abs_diff(&slow.im) < 1e-12);
    }
}

#[test]
fn complex_matmul_degenerate_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = ComplexTensor::new(rand_tensor(&[3, 3], &mut rng), rand_tensor(&[3, 3], &mut rng)).unwrap();
    let eye = ComplexTensor::new(Tensor::from_fn([3, 3], |i| (i % 4 == 0) as u8 as f64), Tensor::zeros([3, 3])).unwrap();
    let c = complex_matmul(&a, &eye).unwrap();
    assert!(c.re.max_abs_diff(&a.re) < 1e-15 && c.im.max_abs_diff(&a.im) < 1e-15);

    let ar = ComplexTensor::new(a.re.clone(), Tensor::zeros([3, 3])).unwrap();
    let br = ComplexTensor::new(rand_tensor(&[3, 3], &mut rng), Tensor::zeros([3, 3])).unwrap();
    let c = complex_matmul(&ar, &br).unwrap();
    assert!(c.im.data().iter().all(|&v| v == 0.0));
    let mut tape = Tape::new();
    let (x, y) = (tape.constant(ar.re.clone()), tape.constant(br.re.clone()));
    let m = tape.matmul(x, y).unwrap();
    assert!(tape.value(m).max_abs_diff(&c.re) < 1e-15);
}

fn softmax_of(v: &[f64]) -> Vec<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new([v.len()], v.to_vec()).unwrap());
    let s = tape.softmax(x).unwrap();
    tape.value(s).data().to_vec()
}

#[test]
fn softmax_examples() {
    assert_eq!(softmax_of(&[1.0, 1.0]), vec![0.5, 0.5]);
    let s = softmax_of(&[0.0, 3f64.ln()]);
    assert!((s[0] - 0.25).abs() < 1e-15 && (s[1] - 0.75).abs() < 1e-15);
    assert_eq!(softmax_of(&[1000.0, 1000.0]), vec![0.5, 0.5]);
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(
        v in prop::collection::vec(-50.0f64..50.0, 1..16),
        shift in -100.0f64..100.0,
    ) {
        let s = softmax_of(&v);
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(s.iter().all(|&p| p > 0.0 && p <= 1.0));
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        let s2 = softmax_of(&shifted);
        for (a, b) in s.iter().zip(&s2) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_ops_stay_finite(v in prop::collection::vec(-1e3f64..1e3, 1..32)) {
        let n = v.len();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new([1, 1, n], v).unwrap());
        let s = tape.sigmoid(x);
        let h = tape.tanh(x);
        let a = tape.abs(x);
        let f = tape.clamp_min(a, 1e-8);
        let l = tape.log(f);
        let sum = tape.add(s, h).unwrap();
        let sum = tape.add(sum, l).unwrap();
        let n1 = tape.cum_norm(sum, 1e-5).unwrap();
        prop_assert!(tape.value(n1).is_finite());
    }
}

#[derive(Debug)]
struct HalfGradSquare;

impl restore_core::numcore::CustomOp for HalfGradSquare {
    fn name(&self) -> &'static str {
        "half_grad_square"
    }
    fn forward(&self, inputs: &[&Tensor]) -> restore_core::Result<Tensor> {
        Ok(inputs[0].map(|v| v * v))
    }
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(inputs[0].zip_map(grad, |x, g| x * g).unwrap())]
    }
}

#[test]
fn gradcheck_flags_wrong_backward() {
    let x = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
    let r = gradcheck::check(&[x], 1e-5, 3, |tape, v| {
        let y = tape.custom(&[v[0]], std::sync::Arc::new(HalfGradSquare))?;
        Ok(tape.sum(y))
    })
    .unwrap();
    assert!(r.max_rel_error > 0.4, "{}", r.max_rel_error);
}
