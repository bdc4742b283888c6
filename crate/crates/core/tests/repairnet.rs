use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use restore_core::nn::{Bound, Builder};
use restore_core::numcore::gradcheck;
use restore_core::numcore::{Tape, Tensor, Var};
use restore_core::repairnet::{build_repair, Causality, Gtcm, RepairConfig, RepairModel, Tfcm};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn tiny(causality: Causality) -> RepairConfig {
    RepairConfig {
        bins: 17,
        channels: 2,
        fd_layers: 2,
        fu_layers: 2,
        tfcm_depth: 2,
        tfcm_dilations: vec![1, 2],
        sgtcm_blocks: 1,
        gtcm_layers_per_block: 2,
        gtcm_dilations: vec![1, 3],
        causality,
        zero_init_head: false,
        ..RepairConfig::toy()
    }
}

fn run(m: &RepairModel, x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let p = m.params.bind(&mut tape, false);
    let v = tape.constant(x.clone());
    let y = m.forward(&mut tape, &p, v).unwrap();
    tape.value(y).clone()
}

fn within(count: usize, target: f64) -> bool {
    (count as f64 - target).abs() / target <= 0.10
}

#[test]
fn paper_parameter_counts() {
    let causal = build_repair(&RepairConfig::paper(), 0).unwrap();
    assert!(within(causal.param_count(), 2.21e6), "{}", causal.param_count());
    let large = build_repair(&RepairConfig::paper_large(), 0).unwrap();
    assert!(within(large.param_count(), 3.54e6), "{}", large.param_count());
    assert_eq!(causal.ladder(), &[481, 121, 31, 8]);
}

#[test]
fn teacher_and_student_share_names() {
    let s = build_repair(&RepairConfig::toy(), 3).unwrap();
    let t = build_repair(&RepairConfig::toy().with_causality(Causality::NonCausal), 3).unwrap();
    assert_eq!(s.param_count(), t.param_count());
    assert!(s.params.names().eq(t.params.names()));
    assert_eq!(s.params.content_hash(), t.params.content_hash());
}

#[test]
fn same_seed_same_parameters() {
    let a = build_repair(&RepairConfig::toy(), 11).unwrap();
    let b = build_repair(&RepairConfig::toy(), 11).unwrap();
    let c = build_repair(&RepairConfig::toy(), 12).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.params.content_hash(), c.params.content_hash());
}

#[test]
fn zero_head_is_identity_and_zero_maps_to_zero() {
    let m = build_repair(&RepairConfig::toy(), 5).unwrap();
    let x = random(&[2, 129, 12], 1);
    assert_eq!(run(&m, &x), x);
    let z = Tensor::zeros([2, 129, 12]);
    assert_eq!(run(&m, &z), z);
}

#[test]
fn output_shape_and_bin_check() {
    let m = build_repair(&tiny(Causality::Causal), 5).unwrap();
    let y = run(&m, &random(&[2, 17, 9], 2));
    assert_eq!(y.shape(), &[2, 17, 9]);
    assert!(y.is_finite());
    let mut tape = Tape::new();
    let p = m.params.bind(&mut tape, false);
    let v = tape.constant(Tensor::zeros([2, 16, 9]));
    let err = m.forward(&mut tape, &p, v).unwrap_err().to_string();
    assert!(err.contains("freq axis"), "{err}");
}

#[test]
fn student_ignores_future_frames() {
    let m = build_repair(&RepairConfig { zero_init_head: false, ..RepairConfig::toy() }, 9).unwrap();
    let x = random(&[2, 129, 20], 3);
    let base = run(&m, &x);
    for t in [0usize, 7, 18] {
        let mut x2 = x.clone();
        for c in 0..2 {
            for f in 0..129 {
                for tt in t + 1..20 {
                    x2.data_mut()[(c * 129 + f) * 20 + tt] += 3.0;
                }
            }
        }
        let y = run(&m, &x2);
        let past = |v: &Tensor| v.narrow(2, 0, t + 1).unwrap();
        assert_eq!(past(&base), past(&y), "t={t}");
    }
}

fn tfcm_response(causality: Causality) -> Vec<bool> {
    let cfg = RepairConfig { causality, ..RepairConfig::paper() };
    let mut b = Builder::new(4);
    let block = Tfcm::new(&mut b, "tfcm", 3, &cfg).unwrap();
    let params = b.finish();
    let frames = 40;
    let at = 20;
    let go = |x: Tensor| {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let v = tape.constant(x);
        let y = block.forward(&mut tape, &p, v).unwrap();
        tape.value(y).clone()
    };
    let x = random(&[3, 5, frames], 6);
    let base = go(x.clone());
    let mut x2 = x;
    x2.data_mut()[(5 + 2) * frames + at] += 1.0;
    let y = go(x2);
    (0..frames)
        .map(|t| {
            let a = base.narrow(2, t, 1).unwrap();
            let b = y.narrow(2, t, 1).unwrap();
            a.max_abs_diff(&b) > 0.0
        })
        .collect()
}

#[test]
fn tfcm_receptive_field_matches_arithmetic() {
    let at = 20;
    let causal = tfcm_response(Causality::Causal);
    let first = causal.iter().position(|&c| c).unwrap();
    let last = causal.iter().rposition(|&c| c).unwrap();
    assert_eq!((first, last), (at, at + 14));
    let non = tfcm_response(Causality::NonCausal);
    let first = non.iter().position(|&c| c).unwrap();
    let last = non.iter().rposition(|&c| c).unwrap();
    assert_eq!((first, last), (at - 7, at + 7));
}

#[test]
fn tfcm_with_silent_branch_is_identity() {
    let cfg = RepairConfig::toy();
    let mut b = Builder::new(1);
    let block = Tfcm::new(&mut b, "tfcm", 4, &cfg).unwrap();
    let mut params = b.finish();
    let names: Vec<String> = params.names().filter(|n| n.contains(".dw.") || n.ends_with("pw_out.bias")).map(String::from).collect();
    for n in names {
        let id = params.id(&n).unwrap();
        params.get_mut(id).data_mut().fill(0.0);
    }
    let x = random(&[4, 6, 8], 2);
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let v = tape.constant(x.clone());
    let y = block.forward(&mut tape, &p, v).unwrap();
    assert_eq!(tape.value(y), &x);
}

fn check_params<F>(params: &restore_core::nn::ParamStore, input: Tensor, f: F) -> f64
where
    F: Fn(&mut Tape, &Bound, Var) -> restore_core::Result<Var>,
{
    let mut inputs: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    inputs.push(input);
    let n = params.len();
    let out_probe = std::cell::RefCell::new(None::<Tensor>);
    let r = gradcheck::check(&inputs, 1e-5, 12, |tape, vars| {
        let p = Bound::from_vars(vars[..n].to_vec());
        let y = f(tape, &p, vars[n])?;
        let w = out_probe
            .borrow_mut()
            .get_or_insert_with(|| random(tape.shape(y), 99))
            .clone();
        let w = tape.constant(w);
        let prod = tape.mul(y, w)?;
        Ok(tape.sum(prod))
    })
    .unwrap();
    r.max_rel_error
}

#[test]
fn blocks_pass_gradcheck() {
    let cfg = tiny(Causality::NonCausal);
    let mut b = Builder::new(2);
    let block = Tfcm::new(&mut b, "t", 2, &cfg).unwrap();
    let e = check_params(&b.finish(), random(&[2, 4, 6], 1), |t, p, x| block.forward(t, p, x));
    assert!(e < 1e-4, "tfcm {e}");

    let mut b = Builder::new(3);
    let block = Gtcm::new(&mut b, "g", 4, 3, 5, 2).unwrap();
    let e = check_params(&b.finish(), random(&[4, 1, 7], 2), |t, p, x| block.forward(t, p, x));
    assert!(e < 1e-4, "gtcm {e}");

    for c in [Causality::Causal, Causality::NonCausal] {
        let m = build_repair(&tiny(c), 4).unwrap();
        let e = check_params(&m.params, random(&[2, 17, 5], 3), |t, p, x| m.forward(t, p, x));
        assert!(e < 1e-4, "repair {c:?} {e}");
    }
}

mod causality {
    use super::{random, run, tiny};
    use proptest::prelude::*;
    use restore_core::repairnet::{build_repair, Causality};

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn student_past_ignores_any_future_change(seed in 0u64..1000, t in 0usize..15, bump in -5.0f64..5.0) {
            let m = build_repair(&tiny(Causality::Causal), seed).unwrap();
            let x = random(&[2, 17, 16], seed + 1);
            let mut moved = x.clone();
            for (i, v) in moved.data_mut().iter_mut().enumerate() {
                if i % 16 > t {
                    *v += bump * (1.0 + (i % 7) as f64);
                }
            }
            let (a, b) = (run(&m, &x), run(&m, &moved));
            prop_assert_eq!(a.narrow(2, 0, t + 1).unwrap(), b.narrow(2, 0, t + 1).unwrap());
        }
    }
}
