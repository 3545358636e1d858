use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mat(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_rows(rows).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Random values bounded away from zero, for kinked primitives.
fn random_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..2.0);
            if rng.gen_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn matmul_examples() {
    let m = mat(&[vec![1.5, -2.0], vec![0.25, 4.0]]);
    let mut tape = Tape::new();
    let i = tape.constant(mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
    let z = tape.constant(Tensor::zeros(&[2, 2]));
    let mm = tape.constant(m.clone());
    let im = tape.matmul(i, mm).unwrap();
    let zm = tape.matmul(z, mm).unwrap();
    assert_eq!(tape.value(im), m.data());
    assert_eq!(tape.value(zm), &[0.0; 4]);

    let a = tape.constant(mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let b = tape.constant(mat(&[vec![5.0, 6.0], vec![7.0, 8.0]]));
    let ab = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(ab), &[19.0, 22.0, 43.0, 50.0]);
    assert_eq!(tape.shape(ab), &[2, 2]);
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(Error::Dimension { .. })));
}

#[test]
fn sigmoid_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(vec![4], vec![0.0, 40.0, 3f64.ln(), -800.0]).unwrap());
    let s = tape.sigmoid(x);
    let v = tape.value(s);
    assert_eq!(v[0], 0.5);
    assert!((v[1] - 1.0).abs() < 1e-12);
    assert!((v[2] - 0.75).abs() < 1e-15);
    assert!(v[3].is_finite() && v[3] >= 0.0);
}

#[test]
fn softmax_cross_entropy_examples() {
    let mut tape = Tape::<f64>::new();
    let uniform = tape.constant(Tensor::zeros(&[2, 3]));
    let l = tape.softmax_cross_entropy(uniform, &[1., 0., 0., 0., 0., 1.]).unwrap();
    assert!((tape.scalar_value(l) - 3f64.ln()).abs() < 1e-15);

    let sat = tape.constant(mat(&[vec![50.0, 0.0, 0.0]]));
    let l = tape.softmax_cross_entropy(sat, &[1., 0., 0.]).unwrap();
    assert!(tape.scalar_value(l) < 1e-12);

    let z = tape.constant(mat(&[vec![1.0, 0.0]]));
    let l = tape.softmax_cross_entropy(z, &[1., 0.]).unwrap();
    // ln(1 + e^-1)
    assert!((tape.scalar_value(l) - 0.313_261_687_518_222_9).abs() < 1e-12);
}

#[test]
fn softmax_cross_entropy_rejects_non_one_hot() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::zeros(&[1, 2]));
    assert!(matches!(tape.softmax_cross_entropy(z, &[1., 1.]), Err(Error::Contract { .. })));
    assert!(matches!(tape.softmax_cross_entropy(z, &[0.5, 0.5]), Err(Error::Contract { .. })));
}

#[test]
fn binary_cross_entropy_examples() {
    let mut tape = Tape::<f64>::new();
    let half = tape.constant(Tensor::scalar(0.5));
    let l = tape.binary_cross_entropy(half, &[1.0]).unwrap();
    assert!((tape.scalar_value(l) - 2f64.ln()).abs() < 1e-15);

    let near_one = tape.constant(Tensor::scalar(1.0 - BCE_EPS));
    let l = tape.binary_cross_entropy(near_one, &[1.0]).unwrap();
    assert!(tape.scalar_value(l) < 2e-7);

    let q = tape.constant(Tensor::scalar(0.25));
    let l = tape.binary_cross_entropy(q, &[0.0]).unwrap();
    assert!((tape.scalar_value(l) - 0.287_682_072_451_780_9).abs() < 1e-12);

    // Saturated inputs stay finite thanks to the clamp.
    let zero = tape.constant(Tensor::scalar(0.0));
    let l = tape.binary_cross_entropy(zero, &[1.0]).unwrap();
    assert!((tape.scalar_value(l) - -(BCE_EPS.ln())).abs() < 1e-9);
}

#[test]
fn binary_cross_entropy_rejects_soft_targets() {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(Tensor::scalar(0.5));
    assert!(matches!(tape.binary_cross_entropy(p, &[0.3]), Err(Error::Contract { .. })));
}

#[test]
fn min_const_examples() {
    for (a, expect, grad) in [(0.3, 0.3, 1.0), (0.8, 0.5, 0.0), (0.5, 0.5, 0.0)] {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(a));
        let m = tape.min_const(x, 0.5).unwrap();
        assert_eq!(tape.scalar_value(m), expect);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad_or_zero(x), vec![grad], "a = {a}");
    }
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f64>::new();
    let w = tape.param(Tensor::scalar(3.0));
    let sq = tape.mul(w, w).unwrap();
    tape.backward(sq).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[6.0]);

    let mut tape = Tape::<f64>::new();
    let w = tape.param(Tensor::scalar(3.0));
    let c = tape.constant(Tensor::scalar(7.0));
    let _unused = tape.scale(w, 2.0);
    tape.backward(c).unwrap();
    assert_eq!(tape.grad_or_zero(w), vec![0.0]);

    let mut tape = Tape::<f64>::new();
    let w = tape.param(Tensor::scalar(0.0));
    let s = tape.sigmoid(w);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[0.25]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::<f64>::new();
    let w = tape.param(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(w), Err(Error::Contract { .. })));
}

#[test]
fn repeated_backward_accumulates_and_zeroing_resets() {
    let mut tape = Tape::<f64>::new();
    let w = tape.param(Tensor::scalar(3.0));
    let sq = tape.mul(w, w).unwrap();
    tape.backward(sq).unwrap();
    tape.backward(sq).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[12.0]);
    tape.zero_grads();
    tape.backward(sq).unwrap();
    let first = tape.grad(w).unwrap().to_vec();
    tape.zero_grads();
    tape.backward(sq).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &first[..]);
}

#[test]
fn mix_rejects_weights_outside_unit_interval() {
    let mut tape = Tape::<f64>::new();
    let w = tape.constant(Tensor::filled(&[1, 1], 1.5));
    let p = tape.constant(Tensor::zeros(&[1, 2]));
    let q = tape.constant(Tensor::zeros(&[1, 2]));
    assert!(matches!(tape.mix(w, p, q), Err(Error::Contract { .. })));
}

#[test]
fn tensor_readback_carries_grad_and_node() {
    let mut tape = Tape::<f64>::new();
    let w = tape.param(Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
    let m = tape.mean(w);
    tape.backward(m).unwrap();
    let t = tape.tensor(w);
    assert_eq!(t.grad().unwrap(), &[0.5, 0.5]);
    assert_eq!(t.node(), Some(w));
    assert_eq!(t.grad().unwrap().len(), t.data().len());
}

#[test]
fn gradcheck_examples() {
    let sq = |t: &mut Tape<f64>, ids: &[NodeId]| t.mul(ids[0], ids[0]);
    let r = finite_diff_check(sq, &[Tensor::scalar(3.0)], 1e-5).unwrap();
    assert!(r.max_rel_error < 1e-8, "{r:?}");

    let constant = |t: &mut Tape<f64>, _: &[NodeId]| Ok(t.constant(Tensor::scalar(4.0)));
    let r = finite_diff_check(constant, &[Tensor::scalar(3.0)], 1e-5).unwrap();
    assert_eq!(r.max_rel_error, 0.0);
}

/// Reduce any node to a scalar through a fixed random projection so every
/// output coordinate contributes a distinct weight.
fn project(t: &mut Tape<f64>, x: NodeId, seed: u64) -> Result<NodeId> {
    let n = t.value(x).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::new(vec![n], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let w = t.constant(w);
    let flat = t.reshape(x, &[n])?;
    let prod = t.mul(flat, w)?;
    Ok(t.mean(prod))
}

fn check_primitive<F>(name: &str, gen: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>, f: F)
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId> + Copy,
{
    for trial in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let params = gen(&mut rng);
        let g = move |t: &mut Tape<f64>, ids: &[NodeId]| {
            let out = f(t, ids)?;
            project(t, out, trial)
        };
        let r = finite_diff_check(g, &params, 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-4, "{name} trial {trial}: {r:?}");
    }
}

#[test]
fn every_primitive_passes_gradcheck() {
    check_primitive(
        "matmul",
        |r| vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[4, 2], -1.0, 1.0)],
        |t, ids| t.matmul(ids[0], ids[1]),
    );
    check_primitive(
        "add_bias",
        |r| vec![random(r, &[3, 4], -1.0, 1.0), random(r, &[4], -1.0, 1.0)],
        |t, ids| t.add_bias(ids[0], ids[1]),
    );
    check_primitive(
        "add",
        |r| vec![random(r, &[2, 3], -1.0, 1.0), random(r, &[2, 3], -1.0, 1.0)],
        |t, ids| t.add(ids[0], ids[1]),
    );
    check_primitive(
        "sub",
        |r| vec![random(r, &[2, 3], -1.0, 1.0), random(r, &[2, 3], -1.0, 1.0)],
        |t, ids| t.sub(ids[0], ids[1]),
    );
    check_primitive(
        "mul",
        |r| vec![random(r, &[2, 3], -1.0, 1.0), random(r, &[2, 3], -1.0, 1.0)],
        |t, ids| t.mul(ids[0], ids[1]),
    );
    check_primitive("scale", |r| vec![random(r, &[5], -1.0, 1.0)], |t, ids| Ok(t.scale(ids[0], -2.5)));
    check_primitive("relu", |r| vec![random_off_zero(r, &[3, 3])], |t, ids| Ok(t.relu(ids[0])));
    check_primitive("sigmoid", |r| vec![random(r, &[3, 3], -4.0, 4.0)], |t, ids| Ok(t.sigmoid(ids[0])));
    check_primitive("mean_axis0", |r| vec![random(r, &[3, 4], -1.0, 1.0)], |t, ids| t.mean_axis(ids[0], 0));
    check_primitive("mean_axis1", |r| vec![random(r, &[3, 4], -1.0, 1.0)], |t, ids| t.mean_axis(ids[0], 1));
    check_primitive("mean", |r| vec![random(r, &[3, 4], -1.0, 1.0)], |t, ids| Ok(t.mean(ids[0])));
    check_primitive(
        "concat",
        |r| vec![random(r, &[2, 3], -1.0, 1.0), random(r, &[2, 1], -1.0, 1.0), random(r, &[2, 2], -1.0, 1.0)],
        |t, ids| t.concat(ids),
    );
    check_primitive("slice", |r| vec![random(r, &[3, 6], -1.0, 1.0)], |t, ids| t.slice_last(ids[0], 2, 5));
    check_primitive(
        "reshape",
        |r| vec![random(r, &[3, 4], -1.0, 1.0)],
        |t, ids| t.reshape(ids[0], &[6, 2]),
    );
    check_primitive(
        "mix",
        |r| {
            vec![
                random(r, &[2, 3], 0.05, 0.95),
                random(r, &[2, 3, 2], -1.0, 1.0),
                random(r, &[2, 3, 2], -1.0, 1.0),
            ]
        },
        |t, ids| t.mix(ids[0], ids[1], ids[2]),
    );
    check_primitive(
        "softmax_cross_entropy",
        |r| vec![random(r, &[3, 4], -3.0, 3.0)],
        |t, ids| t.softmax_cross_entropy(ids[0], &[1., 0., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1.]),
    );
    check_primitive(
        "binary_cross_entropy",
        |r| vec![random(r, &[2, 3], 0.05, 0.95)],
        |t, ids| t.binary_cross_entropy(ids[0], &[1., 0., 0., 1., 1., 0.]),
    );
    check_primitive(
        "min_const_pass",
        |r| vec![random(r, &[1], -1.0, 0.4)],
        |t, ids| t.min_const(ids[0], 0.5),
    );
    check_primitive(
        "min_const_capped",
        |r| vec![random(r, &[1], 0.6, 2.0)],
        |t, ids| t.min_const(ids[0], 0.5),
    );
}

#[test]
fn f32_tape_runs() {
    let mut tape = Tape::<f32>::new();
    let w = tape.param(Tensor::scalar(0.0f32));
    let s = tape.sigmoid(w);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[0.25f32]);
}

#[test]
fn first_non_finite_names_op() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::scalar(f64::MAX));
    let b = tape.scale(a, 10.0);
    let _ = tape.sigmoid(b);
    assert_eq!(tape.first_non_finite(), Some((b, "scale")));
}

proptest! {
    #[test]
    fn min_const_bounded(a in -10.0f64..10.0, tau in 0.01f64..5.0) {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(a));
        let m = tape.min_const(x, tau).unwrap();
        let v = tape.scalar_value(m);
        prop_assert!(v <= tau && v <= a);
    }

    #[test]
    fn cross_entropies_non_negative(
        logits in proptest::collection::vec(-20.0f64..20.0, 6),
        ps in proptest::collection::vec(0.0f64..1.0, 6),
        cls in 0usize..3,
        bits in proptest::collection::vec(0u8..2, 6),
    ) {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::new(vec![2, 3], logits).unwrap());
        let mut target = vec![0.0; 6];
        target[cls] = 1.0;
        target[3 + (cls + 1) % 3] = 1.0;
        let ce = tape.softmax_cross_entropy(z, &target).unwrap();
        prop_assert!(tape.scalar_value(ce) >= 0.0);
        let p = tape.constant(Tensor::new(vec![6], ps).unwrap());
        let t: Vec<f64> = bits.iter().map(|&b| b as f64).collect();
        let bce = tape.binary_cross_entropy(p, &t).unwrap();
        prop_assert!(tape.scalar_value(bce) >= 0.0);
    }
}
