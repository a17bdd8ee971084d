mod common;

use kacl_core::tensor::{grad_check, GradCheckFailure, Graph, Tensor};

#[test]
fn every_op_and_the_encoder_composite_match_finite_differences() {
    common::checks::autodiff(100).assert();
}

#[test]
fn grad_check_rejects_out_of_range_steps() {
    let x = Tensor::vector(vec![1.0, 2.0]);
    let f = |g: &mut Graph, v| Ok(g.sum(v));
    assert!(matches!(grad_check(f, &x, 1e-8), Err(GradCheckFailure::BadStep(_))));
    assert!(matches!(grad_check(f, &x, 1e-2), Err(GradCheckFailure::BadStep(_))));
    assert!(grad_check(f, &x, 1e-5).unwrap() < 1e-8);
}

#[test]
fn grad_check_flags_non_scalar_outputs() {
    let x = Tensor::vector(vec![1.0, 2.0]);
    let r = grad_check(|g: &mut Graph, v| Ok(g.exp(v)), &x, 1e-5);
    assert!(matches!(r, Err(GradCheckFailure::NotScalar(_))));
}

mod linearity {
    use kacl_core::tensor::{Graph, Tensor};
    use proptest::prelude::*;

    fn grad_of(x: &[f64], build: impl Fn(&mut Graph, kacl_core::tensor::Var) -> kacl_core::tensor::Var) -> Vec<f64> {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::vector(x.to_vec()).with_grad());
        let out = build(&mut g, v);
        g.backward(out).unwrap();
        g.grad(v).unwrap().to_vec()
    }

    fn f(g: &mut Graph, v: kacl_core::tensor::Var) -> kacl_core::tensor::Var {
        let s = g.sigmoid(v);
        g.sum(s)
    }

    fn h(g: &mut Graph, v: kacl_core::tensor::Var) -> kacl_core::tensor::Var {
        let e = g.exp(v);
        let sq = g.mul(e, v).unwrap();
        g.mean(sq)
    }

    proptest! {
        #[test]
        fn backward_is_linear_in_the_loss(
            x in prop::collection::vec(-2.0f64..2.0, 1..8), a in -3.0f64..3.0, b in -3.0f64..3.0,
        ) {
            let combined = grad_of(&x, |g, v| {
                let (fv, hv) = (f(g, v), h(g, v));
                let (fa, hb) = (g.scale(fv, a), g.scale(hv, b));
                g.add(fa, hb).unwrap()
            });
            let (gf, gh) = (grad_of(&x, f), grad_of(&x, h));
            for i in 0..x.len() {
                prop_assert!((combined[i] - (a * gf[i] + b * gh[i])).abs() <= 1e-12);
            }
        }

        #[test]
        fn backward_twice_accumulates(x in prop::collection::vec(-2.0f64..2.0, 1..8)) {
            let mut g = Graph::new();
            let v = g.leaf(Tensor::vector(x.clone()).with_grad());
            let out = f(&mut g, v);
            g.backward(out).unwrap();
            let once = g.grad(v).unwrap().to_vec();
            g.backward(out).unwrap();
            for (t, o) in g.grad(v).unwrap().iter().zip(&once) {
                prop_assert_eq!(*t, 2.0 * o);
            }
        }
    }
}
