//! Symmetries and monotonicity of the register diversify loss terms.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regtrack::numerics::Tape;
use regtrack::rdloss::{diversify_term, variance_term, DiversifyPooling, RdLossConfig};

fn values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn var_term(data: &[f64], shape: &[usize]) -> f64 {
    let tape = Tape::<f64>::new();
    variance_term(tape.constant(shape, data.to_vec()), &RdLossConfig::default())
        .unwrap()
        .item()
}

fn div_term(data: &[f64], shape: &[usize], pooling: DiversifyPooling) -> f64 {
    let tape = Tape::<f64>::new();
    diversify_term(tape.constant(shape, data.to_vec()), pooling).unwrap().item()
}

/// Reorders rows of a row-major [rows, width] buffer.
fn permute_rows(data: &[f64], width: usize, perm: &[usize]) -> Vec<f64> {
    perm.iter().flat_map(|&r| data[r * width..(r + 1) * width].iter().copied()).collect()
}

#[test]
fn variance_term_is_invariant_to_token_and_dimension_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (k, d) = (6, 5);
    let r = values(&mut rng, k * d);
    let base = var_term(&r, &[k, d]);
    let mut perm: Vec<usize> = (0..k).collect();
    perm.shuffle(&mut rng);
    assert!((var_term(&permute_rows(&r, d, &perm), &[k, d]) - base).abs() < 1e-12);
    let mut dims: Vec<usize> = (0..d).collect();
    dims.shuffle(&mut rng);
    let swapped: Vec<f64> = (0..k).flat_map(|i| dims.iter().map(move |&j| (i, j))).map(|(i, j)| r[i * d + j]).collect();
    assert!((var_term(&swapped, &[k, d]) - base).abs() < 1e-12);
}

#[test]
fn scaling_registers_up_never_increases_variance_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let r = values(&mut rng, 4 * 3);
        let base = var_term(&r, &[4, 3]);
        for c in [2.0, 10.0] {
            let scaled: Vec<f64> = r.iter().map(|v| v * c).collect();
            assert!(var_term(&scaled, &[4, 3]) <= base);
        }
    }
}

#[test]
fn diversify_term_is_invariant_to_entry_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (l, k, d) = (7, 3, 4);
    let b = values(&mut rng, l * k * d);
    let mut perm: Vec<usize> = (0..l).collect();
    perm.shuffle(&mut rng);
    for pooling in [DiversifyPooling::Mean, DiversifyPooling::Flatten] {
        let base = div_term(&b, &[l, k, d], pooling);
        let p = div_term(&permute_rows(&b, k * d, &perm), &[l, k, d], pooling);
        assert!((p - base).abs() < 1e-12 * base.abs().max(1.0));
    }
}

#[test]
fn diversify_term_grows_from_zero_with_spread() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (l, k, d) = (5, 2, 3);
    let centre = values(&mut rng, k * d);
    let noise = values(&mut rng, l * k * d);
    let at = |scale: f64| {
        let b: Vec<f64> = (0..l * k * d).map(|i| centre[i % (k * d)] + scale * noise[i]).collect();
        div_term(&b, &[l, k, d], DiversifyPooling::Mean)
    };
    // Zero up to roundoff in the centring mean.
    assert!(at(0.0) < 1e-30);
    let mut prev = 0.0;
    for scale in [1e-3, 1e-2, 1e-1, 0.5, 1.0] {
        let v = at(scale);
        assert!(v > prev, "not increasing at scale {scale}: {v} <= {prev}");
        prev = v;
    }
}
