use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap().with_grad()
}

/// Central-difference oracle: evaluates `f` on perturbed copies of the
/// inputs and compares against the tape gradient.
fn check_grad(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Var, rel: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval = |ins: &[Tensor]| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let n = tape.value(out).numel();
        let mut wrng = ChaCha8Rng::seed_from_u64(7);
        let w: Vec<f64> = (0..n).map(|_| wrng.gen_range(-1.0..1.0)).collect();
        let loss = tape.weighted_sum(out, w).unwrap();
        let val = tape.scalar_value(loss);
        tape.backward(loss).unwrap();
        let grads = vars
            .iter()
            .map(|&v| tape.grad(v).map(|g| g.to_vec()).unwrap_or_default())
            .collect();
        (val, grads)
    };
    let (_, grads) = eval(&inputs);
    let h = 1e-5;
    for (ti, t) in inputs.iter().enumerate() {
        if !t.requires_grad() {
            continue;
        }
        let coords: Vec<usize> = if t.numel() <= 40 {
            (0..t.numel()).collect()
        } else {
            (0..40).map(|_| rng.gen_range(0..t.numel())).collect()
        };
        for i in coords {
            let mut plus = inputs.clone();
            plus[ti].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[ti].data_mut()[i] -= h;
            let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
            let an = grads[ti][i];
            let err = (fd - an).abs();
            assert!(
                err <= rel * fd.abs().max(an.abs()) || err < 1e-7,
                "input {ti} coord {i}: analytic {an} vs fd {fd}"
            );
        }
    }
}

#[test]
fn matmul_identity() {
    let mut tape = Tape::new();
    let i2 = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let m = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let c = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.data(c), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_row_by_column() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
    let b = tape.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.data(c), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![2, 3]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
}

#[test]
fn matmul_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, vec![3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, vec![4, 2], -1.0, 1.0);
    // gradient of sum(output)
    let run = |a: &Tensor, b: &Tensor| {
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        let s = tape.sum(c);
        let val = tape.scalar_value(s);
        tape.backward(s).unwrap();
        (val, tape.grad(va).unwrap().to_vec(), tape.grad(vb).unwrap().to_vec())
    };
    let (_, ga, gb) = run(&a, &b);
    let h = 1e-5;
    for i in 0..12 {
        let (mut ap, mut am) = (a.clone(), a.clone());
        ap.data_mut()[i] += h;
        am.data_mut()[i] -= h;
        let fd = (run(&ap, &b).0 - run(&am, &b).0) / (2.0 * h);
        assert!((fd - ga[i]).abs() <= 1e-6 * fd.abs().max(1e-12) + 1e-9);
    }
    for i in 0..8 {
        let (mut bp, mut bm) = (b.clone(), b.clone());
        bp.data_mut()[i] += h;
        bm.data_mut()[i] -= h;
        let fd = (run(&a, &bp).0 - run(&a, &bm).0) / (2.0 * h);
        assert!((fd - gb[i]).abs() <= 1e-6 * fd.abs().max(1e-12) + 1e-9);
    }
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = tape.constant(Tensor::vector(vec![3.0, 4.0]));
    let c = tape.elementwise(Elementwise::Add, &[a, b]).unwrap();
    assert_eq!(tape.data(c), &[4.0, 6.0]);
    let z = tape.constant(Tensor::scalar(0.0));
    let g = tape.elementwise(Elementwise::Gelu, &[z]).unwrap();
    assert_eq!(tape.data(g), &[0.0]);
    assert!(tape.elementwise(Elementwise::Add, &[a]).is_err());
}

#[test]
fn exp_log_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f64> = (0..32).map(|_| rng.gen_range(0.01..20.0)).collect();
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::vector(x.clone()));
    let l = tape.log(v).unwrap();
    let e = tape.exp(l);
    for (a, b) in tape.data(e).iter().zip(&x) {
        assert!((a - b).abs() <= 1e-12 * b.abs());
    }
}

#[test]
fn log_of_non_positive_is_domain_error() {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::vector(vec![1.0, 0.0]));
    assert!(matches!(tape.log(v), Err(Error::Domain { .. })));
}

#[test]
fn scalar_broadcast_only() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let s = tape.constant(Tensor::scalar(2.0));
    let m = tape.mul(a, s).unwrap();
    assert_eq!(tape.data(m), &[2.0, 4.0, 6.0]);
    let b = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
}

#[test]
fn log_softmax_uniform_and_stable() {
    let mut tape = Tape::new();
    let u = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
    let lu = tape.log_softmax(u).unwrap();
    for &v in tape.data(lu) {
        assert!((v + 3f64.ln()).abs() < 1e-15);
    }
    let big = tape.constant(Tensor::vector(vec![1000.0, 0.0]));
    let lb = tape.log_softmax(big).unwrap();
    let d = tape.data(lb);
    assert!(d[0].abs() < 1e-300 || d[0] == 0.0);
    assert!((d[1] + 1000.0).abs() < 1e-9);
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(vec![2, 3]).with_grad());
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_of_sum_of_squares() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn repeated_backward_accumulates() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[4.0, 8.0]);
    tape.zero_grads();
    assert!(tape.grad(x).is_none());
}

#[test]
fn backward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor(&mut rng, vec![5, 6], -1.0, 1.0);
    let run = || {
        let mut tape = Tape::new();
        let v = tape.leaf(a.clone());
        let g = tape.gelu(v);
        let l = tape.log_softmax(g).unwrap();
        let s = tape.sum(l);
        tape.backward(s).unwrap();
        tape.grad(v).unwrap().to_vec()
    };
    let (g1, g2) = (run(), run());
    assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn gradients_of_every_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_tensor(&mut rng, vec![3, 4], -1.5, 1.5);
    let b = rand_tensor(&mut rng, vec![3, 4], -1.5, 1.5);
    let s = rand_tensor(&mut rng, vec![], -1.0, 1.0);
    let pos = rand_tensor(&mut rng, vec![3, 4], 0.2, 3.0);
    let bias = rand_tensor(&mut rng, vec![4], -1.0, 1.0);
    let gamma = rand_tensor(&mut rng, vec![4], 0.5, 1.5);

    check_grad(vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]).unwrap(), 1e-5);
    check_grad(vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]).unwrap(), 1e-5);
    check_grad(vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]).unwrap(), 1e-5);
    check_grad(vec![a.clone(), s.clone()], |t, v| t.mul(v[0], v[1]).unwrap(), 1e-5);
    check_grad(vec![s.clone(), a.clone()], |t, v| t.add(v[0], v[1]).unwrap(), 1e-5);
    check_grad(vec![a.clone()], |t, v| t.scale(v[0], -0.3), 1e-5);
    check_grad(vec![a.clone()], |t, v| t.gelu(v[0]), 1e-5);
    check_grad(vec![a.clone()], |t, v| t.exp(v[0]), 1e-5);
    check_grad(vec![pos.clone()], |t, v| t.log(v[0]).unwrap(), 1e-5);
    check_grad(vec![a.clone(), bias.clone()], |t, v| t.add_row(v[0], v[1]).unwrap(), 1e-5);
    check_grad(vec![a.clone()], |t, v| t.log_softmax(v[0]).unwrap(), 1e-5);
    check_grad(
        vec![a.clone(), gamma.clone(), bias.clone()],
        |t, v| t.layer_norm(v[0], v[1], v[2]).unwrap(),
        1e-5,
    );
    check_grad(vec![a.clone()], |t, v| t.gather_rows(v[0], &[2, 0, 2]).unwrap(), 1e-5);
    check_grad(
        vec![a.clone(), b.clone()],
        |t, v| t.assemble_rows(&[v[0], v[1]], &[(1, 2), (0, 0), (0, 0), (1, 1)]).unwrap(),
        1e-5,
    );
    check_grad(vec![a.clone()], |t, v| t.pick(v[0], &[0, 5, 5, 11]).unwrap(), 1e-5);
    check_grad(vec![a.clone()], |t, v| t.mean(v[0]), 1e-5);
}

#[test]
fn attention_gradient_with_shared_prefix() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let rows = 9;
    let q = rand_tensor(&mut rng, vec![rows, 6], -1.0, 1.0);
    let k = rand_tensor(&mut rng, vec![rows, 6], -1.0, 1.0);
    let v = rand_tensor(&mut rng, vec![rows, 6], -1.0, 1.0);
    let mut layout = AttentionLayout::default();
    let p = layout.push(0, 4, None);
    layout.push(4, 3, Some(p));
    layout.push(7, 2, Some(p));
    let layout = Rc::new(layout);
    check_grad(
        vec![q, k, v],
        move |t, vs| t.attention(vs[0], vs[1], vs[2], layout.clone(), 2).unwrap(),
        1e-5,
    );
}

#[test]
fn attention_first_row_copies_value() {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let v = tape.constant(Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap());
    let mut layout = AttentionLayout::default();
    layout.push(0, 2, None);
    let o = tape.attention(q, q, v, Rc::new(layout), 1).unwrap();
    assert_eq!(&tape.data(o)[..2], &[5.0, 6.0]);
}

#[test]
fn custom_op_backward_is_used() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![3.0]).with_grad());
    let val = Tensor::vector(vec![27.0]);
    let y = tape.custom(&[x], val, |ins, _, g| {
        let x = ins[0].data()[0];
        vec![Some(vec![3.0 * x * x * g[0]])]
    });
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[27.0]);
}

proptest! {
    #[test]
    fn log_softmax_normalises(row in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
        let n = row.len();
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::matrix(1, n, row).unwrap());
        let l = tape.log_softmax(v).unwrap();
        let total: f64 = tape.data(l).iter().map(|x| x.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forward_stays_finite(row in proptest::collection::vec(-30.0f64..30.0, 4)) {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::matrix(2, 2, row).unwrap());
        let g = tape.gelu(v);
        let m = tape.matmul(g, g).unwrap();
        let l = tape.log_softmax(m).unwrap();
        prop_assert!(tape.data(l).iter().all(|x| x.is_finite()));
    }
}
