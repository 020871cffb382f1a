mod common;

use common::gradcheck;

#[test]
fn every_primitive_matches_finite_differences() {
    let outcomes = gradcheck::suite(100, 2024);
    let failed: Vec<_> = outcomes.iter().filter(|o| !o.pass()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
    assert_eq!(outcomes.len(), gradcheck::NAMES.len());
}

#[test]
fn linearity_of_backward() {
    use glab::tensor::{Tape, Tensor};
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
    let (a, b) = (0.7, -2.5);
    let grad = |wa: f64, wb: f64| {
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let s = t.silu(v).unwrap();
        let l1 = t.sum(s).unwrap();
        let l2 = t.frobenius_norm(v).unwrap();
        let l1 = t.scale(l1, wa).unwrap();
        let l2 = t.scale(l2, wb).unwrap();
        let l = t.add(l1, l2).unwrap();
        t.backward(l).unwrap().wrt(v)
    };
    let combined = grad(a, b);
    let split = grad(1.0, 0.0).scale(a).add(&grad(0.0, 1.0).scale(b)).unwrap();
    assert!(combined.max_abs_diff(&split).unwrap() < 1e-12);
}
