//! Properties of the differentiation engine: chain-rule correctness at many
//! random points, linearity of the backward pass, and determinism.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regtrack::harness::check_primitive;
use regtrack::numerics::ops::{layer_norm, softmax_last};
use regtrack::numerics::{DiffArray, Primitive, Tape, Var};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> DiffArray<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    DiffArray::from_f64(shape, &v).unwrap()
}

#[test]
fn every_primitive_passes_at_ten_random_points() {
    for prim in Primitive::ALL {
        for seed in 0..10 {
            let c = check_primitive(prim, seed);
            assert!(
                c.passed,
                "{prim} at seed {seed}: {:e} ({:?})",
                c.max_relative_error, c.error
            );
        }
    }
}

fn f<'t>(x: Var<'t, f64>, g: Var<'t, f64>, b: Var<'t, f64>) -> Var<'t, f64> {
    layer_norm(x, g, b, 1e-5).silu().sum()
}

fn h<'t>(x: Var<'t, f64>) -> Var<'t, f64> {
    (softmax_last(x) * x.exp()).sum() + x.square().sum_last().sqrt().sum()
}

#[test]
fn backward_is_linear_in_the_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[3, 5]);
    let g = random(&mut rng, &[5]);
    let b = random(&mut rng, &[5]);
    let (a, c) = (1.7, -0.4);
    let grads = |which: u8| {
        let tape = Tape::new();
        let (xv, gv, bv) = (tape.leaf(&x), tape.leaf(&g), tape.leaf(&b));
        let out = match which {
            0 => f(xv, gv, bv),
            1 => h(xv),
            _ => f(xv, gv, bv).scale(a) + h(xv).scale(c),
        };
        let gr = tape.backward(out);
        gr.get_or_zeros(xv)
    };
    let (gf, gh, gc) = (grads(0), grads(1), grads(2));
    for i in 0..gf.len() {
        let want = a * gf[i] + c * gh[i];
        assert!((gc[i] - want).abs() < 1e-12, "coordinate {i}: {} vs {want}", gc[i]);
    }
}

#[test]
fn forward_and_backward_are_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, &[4, 6]);
    let w = random(&mut rng, &[6, 3]);
    let run = || {
        let tape = Tape::new();
        let (xv, wv) = (tape.leaf(&x), tape.leaf(&w));
        let out = softmax_last(xv.matmul(wv)).ln().sum();
        let g = tape.backward(out);
        (out.item().to_bits(), g.get_or_zeros(xv), g.get_or_zeros(wv))
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert!(a.1.iter().zip(&b.1).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(a.2.iter().zip(&b.2).all(|(p, q)| p.to_bits() == q.to_bits()));
}
