//! Register properties: interleave bijection, bank vs a FIFO oracle,
//! positional grouping in retrieval, and gradient flow into the register.

use std::collections::VecDeque;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regtrack::numerics::{DiffArray, ParamStore, Tape};
use regtrack::registers::{
    build_layout, deinterleave, extract, interleave_grouped, retrieve, InsertMode, RegisterBank,
    RegisterTemplate,
};
use regtrack::ssm::{BlockConfig, MambaBlockParams};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn layout_is_a_bijection(
        image in 1usize..40,
        groups in 1usize..8,
        group_size in 1usize..4,
        before in any::<bool>(),
    ) {
        let mode = if before { InsertMode::Before } else { InsertMode::Behind };
        prop_assume!(groups <= image);
        let layout = build_layout(image, groups, group_size, 1, mode).unwrap();
        let mut seen = vec![false; layout.total];
        for &p in layout.image_positions.iter().chain(&layout.extra_positions) {
            prop_assert!(!seen[p]);
            seen[p] = true;
        }
        prop_assert!(seen.iter().all(|&s| s));
        prop_assert_eq!(layout.total, image + groups * group_size);
    }

    #[test]
    fn interleave_round_trip_is_exact(
        image in 1usize..30,
        groups in 1usize..6,
        group_size in 1usize..3,
        width in 1usize..4,
        before in any::<bool>(),
        seed in any::<u64>(),
    ) {
        prop_assume!(groups <= image);
        let mode = if before { InsertMode::Before } else { InsertMode::Behind };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::<f64>::new();
        let x = tape.leaf(&random(&mut rng, &[image, width]));
        let e = tape.leaf(&random(&mut rng, &[groups * group_size, width]));
        let (fused, layout) = interleave_grouped(x, e, groups, mode).unwrap();
        let (xi, ei) = deinterleave(fused, &layout).unwrap();
        prop_assert_eq!(xi.value(), x.value());
        prop_assert_eq!(ei.value(), e.value());
    }

    #[test]
    fn bank_matches_fifo_oracle(
        capacity in proptest::option::of(1usize..12),
        pushes in proptest::collection::vec(any::<i16>(), 0..60),
    ) {
        let mut bank = RegisterBank::new(capacity, &[1, 1]).unwrap();
        let mut oracle: VecDeque<f64> = VecDeque::new();
        for v in pushes {
            let v = f64::from(v);
            bank.push(DiffArray::from_f64(&[1, 1], &[v]).unwrap()).unwrap();
            oracle.push_back(v);
            if capacity.is_some_and(|c| oracle.len() > c) {
                oracle.pop_front();
            }
            let got: Vec<f64> = bank.iter().map(|e| e.data()[0]).collect();
            let want: Vec<f64> = oracle.iter().rev().copied().collect();
            prop_assert_eq!(got, want);
        }
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> DiffArray<f64> {
    use rand::Rng;
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    DiffArray::from_f64(shape, &v).unwrap()
}

fn setup(width: usize, k: usize) -> (ParamStore<f64>, Vec<MambaBlockParams>, Vec<MambaBlockParams>, RegisterTemplate) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let cfg = BlockConfig::default();
    let ext = vec![MambaBlockParams::new(&mut store, "ext", width, cfg, &mut rng)];
    let ret = vec![MambaBlockParams::new(&mut store, "ret", width, cfg, &mut rng)];
    let reg = RegisterTemplate::new(&mut store, "register", k, width, &mut rng);
    (store, ext, ret, reg)
}

#[test]
fn identical_entries_group_by_position_only() {
    let (store, _, ret, reg) = setup(4, 2);
    let tape = Tape::<f64>::new();
    let p = store.bind_frozen(&tape);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = tape.leaf(&random(&mut rng, &[9, 4]));
    let r = p.get(reg.r);
    // Three copies of reg.r as a bank ...
    let banked = retrieve(z, &[r, r, r], &ret, &p).unwrap();
    // ... equal the same register spliced three times by hand.
    let extra = tape.concat(&[r, r, r]);
    let (fused, layout) = interleave_grouped(z, extra, 3, InsertMode::Before).unwrap();
    let by_hand = deinterleave(regtrack::ssm::mamba_stack(fused, &ret, &p).unwrap(), &layout)
        .unwrap()
        .0;
    assert_eq!(banked.value(), by_hand.value());
}

#[test]
fn tracking_gradient_reaches_the_register_through_both_paths() {
    let (store, ext, ret, reg) = setup(4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, &[12, 4]);
    let z = random(&mut rng, &[4, 4]);
    let target = random(&mut rng, &[4, 4]);
    let grad_of = |use_retrieve_only: Option<bool>| {
        let tape = Tape::<f64>::new();
        let p = store.bind(&tape);
        let (xh, r_t) = extract(tape.constant_array(&x), &reg, &ext, &p).unwrap();
        let zh = retrieve(tape.constant_array(&z), &[r_t], &ret, &p).unwrap();
        let loss = match use_retrieve_only {
            // Extract path only: the loss reads x̂, which depends on reg.r.
            Some(false) => xh.square().sum(),
            // Retrieve path: ẑ depends on r_t, which depends on reg.r.
            Some(true) => (zh - tape.constant_array(&target)).square().sum(),
            None => xh.square().sum() + (zh - tape.constant_array(&target)).square().sum(),
        };
        let g = tape.backward(loss);
        g.get_or_zeros(p.get(reg.r))
    };
    for path in [Some(false), Some(true), None] {
        let g = grad_of(path);
        let norm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 1e-8, "no gradient into reg.r via {path:?}");
    }
}
