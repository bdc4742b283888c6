use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use restore_core::denoisenet::{build_denoise, DenoiseConfig, DenoiseModel};
use restore_core::nn::Bound;
use restore_core::numcore::gradcheck;
use restore_core::numcore::{CVar, ComplexTensor, Tape, Tensor};
use restore_core::repairnet::{build_repair, RepairConfig};

fn crandom(shape: &[usize], seed: u64) -> ComplexTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = || Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0));
    ComplexTensor::new(r(), r()).unwrap()
}

fn tiny() -> DenoiseConfig {
    DenoiseConfig {
        bins: 12,
        cfe_channels: 2,
        denseblock_depth: 2,
        band_channels: vec![2, 2],
        stcm_hidden: 2,
        stcm_dilations: vec![1, 2],
        asa_hidden: 2,
        n_subbands: 2,
        zero_init_head: false,
        ..DenoiseConfig::toy()
    }
}

fn active_toy() -> DenoiseConfig {
    DenoiseConfig { zero_init_head: false, ..DenoiseConfig::toy() }
}

fn run(m: &DenoiseModel, z: &ComplexTensor) -> ComplexTensor {
    let mut tape = Tape::new();
    let p = m.params.bind(&mut tape, false);
    let v = CVar::constant(&mut tape, z);
    m.forward(&mut tape, &p, v).unwrap().value(&tape)
}

#[test]
fn paper_system_parameter_count() {
    let repair = build_repair(&RepairConfig::paper(), 0).unwrap();
    let den = build_denoise(&DenoiseConfig::paper(), 0).unwrap();
    let total = (repair.param_count() + den.param_count()) as f64;
    assert!((total - 3.97e6).abs() / 3.97e6 <= 0.10, "{total}");
}

#[test]
fn separable_convolutions_use_fewer_parameters() {
    let sep = build_denoise(&DenoiseConfig::toy(), 0).unwrap();
    let dense = build_denoise(&DenoiseConfig { band_separable: false, ..DenoiseConfig::toy() }, 0).unwrap();
    assert!(sep.param_count() < dense.param_count());
}

#[test]
fn deterministic_build() {
    let a = build_denoise(&DenoiseConfig::toy(), 4).unwrap();
    let b = build_denoise(&DenoiseConfig::toy(), 4).unwrap();
    assert_eq!(a.params, b.params);
}

#[test]
fn band_split_checks() {
    let bad = DenoiseConfig { n_subbands: 0, ..DenoiseConfig::toy() };
    assert!(build_denoise(&bad, 0).is_err());
    let bad = DenoiseConfig { bins: 130, band_channels: vec![4], ..DenoiseConfig::toy() };
    let err = build_denoise(&bad, 0).unwrap_err().to_string();
    assert!(err.contains("bottleneck"), "{err}");
    assert_eq!(build_denoise(&DenoiseConfig::paper(), 0).unwrap().bands(), &[(0, 121), (121, 121), (242, 121), (363, 118)]);
}

#[test]
fn untrained_mask_is_identity() {
    let m = build_denoise(&DenoiseConfig::toy(), 1).unwrap();
    let z = crandom(&[1, 129, 10], 2);
    let y = run(&m, &z);
    assert!(y.re.max_abs_diff(&z.re) < 1e-12);
    assert!(y.im.max_abs_diff(&z.im) < 1e-12);
}

#[test]
fn forced_masks() {
    let mut m = build_denoise(&active_toy(), 1).unwrap();
    let z = crandom(&[1, 129, 6], 3);
    m.set_constant_mask(1.0, 0.0);
    let y = run(&m, &z);
    assert!(y.re.max_abs_diff(&z.re) < 1e-12 && y.im.max_abs_diff(&z.im) < 1e-12);
    m.set_constant_mask(0.0, 0.0);
    let y = run(&m, &z);
    assert!(y.re.data().iter().chain(y.im.data()).all(|v| v.abs() < 1e-15));
}

#[test]
fn mask_applies_per_bin_and_is_capped() {
    let m = build_denoise(&active_toy(), 5).unwrap();
    let z = crandom(&[1, 129, 7], 6);
    let mut tape = Tape::new();
    let p = m.params.bind(&mut tape, false);
    let v = CVar::constant(&mut tape, &z);
    let mask = m.mask(&mut tape, &p, v).unwrap().value(&tape);
    let y = run(&m, &z);
    for i in 0..z.re.numel() {
        let (a, b) = (mask.re.data()[i], mask.im.data()[i]);
        let (c, d) = (z.re.data()[i], z.im.data()[i]);
        assert!((y.re.data()[i] - (a * c - b * d)).abs() < 1e-12);
        assert!((y.im.data()[i] - (a * d + b * c)).abs() < 1e-12);
        assert!(a.hypot(b) <= 2.0 + 1e-12);
    }
}

#[test]
fn denoiser_is_causal() {
    let m = build_denoise(&active_toy(), 7).unwrap();
    let z = crandom(&[1, 129, 16], 8);
    let base = run(&m, &z);
    for t in [0usize, 5, 14] {
        let mut z2 = z.clone();
        let pert = crandom(&[1, 129, 16], 9 + t as u64);
        for f in 0..129 {
            for tt in t + 1..16 {
                let i = f * 16 + tt;
                z2.re.data_mut()[i] += pert.re.data()[i];
                z2.im.data_mut()[i] += pert.im.data()[i];
            }
        }
        let y = run(&m, &z2);
        assert_eq!(base.re.narrow(2, 0, t + 1).unwrap(), y.re.narrow(2, 0, t + 1).unwrap());
        assert_eq!(base.im.narrow(2, 0, t + 1).unwrap(), y.im.narrow(2, 0, t + 1).unwrap());
    }
}

#[test]
fn encoder_shape_and_active_attention() {
    let m = build_denoise(&DenoiseConfig::toy(), 3).unwrap();
    let z = crandom(&[1, 129, 9], 4);
    let mut tape = Tape::new();
    let p = m.params.bind(&mut tape, false);
    let v = CVar::constant(&mut tape, &z);
    let with = m.cfe_forward(&mut tape, &p, v).unwrap();
    let without = m.cfe_forward_without_asa(&mut tape, &p, v).unwrap();
    assert_eq!(tape.shape(with.re), &[4, 129, 9]);
    assert!(tape.value(with.re).max_abs_diff(tape.value(without.re)) > 0.0);
    let y = run(&m, &z);
    assert_eq!(y.shape(), &[1, 129, 9]);
}

#[test]
fn shape_mismatch_rejected() {
    let m = build_denoise(&DenoiseConfig::toy(), 3).unwrap();
    let mut tape = Tape::new();
    let p = m.params.bind(&mut tape, false);
    let v = CVar::constant(&mut tape, &crandom(&[1, 128, 4], 1));
    assert!(m.forward(&mut tape, &p, v).is_err());
}

#[test]
fn network_passes_gradcheck() {
    let m = build_denoise(&tiny(), 2).unwrap();
    let mut inputs: Vec<Tensor> = m.params.iter().map(|(_, t)| t.clone()).collect();
    let n = inputs.len();
    let z = crandom(&[1, 12, 4], 3);
    inputs.push(z.re);
    inputs.push(z.im);
    let w = crandom(&[1, 12, 4], 4);
    let r = gradcheck::check(&inputs, 1e-5, 8, |tape, v| {
        let p = Bound::from_vars(v[..n].to_vec());
        let y = m.forward(tape, &p, CVar::new(v[n], v[n + 1]))?;
        let (a, b) = (tape.constant(w.re.clone()), tape.constant(w.im.clone()));
        let pr = tape.mul(y.re, a)?;
        let pi = tape.mul(y.im, b)?;
        let s = tape.add(pr, pi)?;
        Ok(tape.sum(s))
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
}
