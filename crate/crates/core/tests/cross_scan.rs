use std::sync::Arc;

use mamba_unet::cross_scan::{expand, merge, ss2d, Direction, Ss2dParams};
use mamba_unet::params::ParamLayout;
use mamba_unet::ssm::selective_scan;
use mamba_unet::{Array, Eager, Graph};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Array {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Array::from_fn(shape, |_| r.gen_range(-1.0..1.0)).unwrap()
}

fn constant(a: Array) -> Arc<Array> {
    Eager.constant(a)
}

#[test]
fn identity_scans_merge_to_four_times_input() {
    let f = constant(random(&[3, 4, 2], 1));
    let mut g = Eager;
    let seqs = expand(&mut g, &f).unwrap();
    let out = merge(&mut g, &seqs, 3, 4).unwrap();
    let four: Vec<f64> = f.data().iter().map(|v| 4.0 * v).collect();
    assert_eq!(out.data(), four.as_slice());
}

#[test]
fn single_live_direction_recovers_input() {
    let f = constant(random(&[2, 5, 3], 2));
    let mut g = Eager;
    for live in 0..4 {
        let mut seqs = expand(&mut g, &f).unwrap();
        for (d, s) in seqs.iter_mut().enumerate() {
            if d != live {
                *s = constant(Array::zeros(&[10, 3]));
            }
        }
        assert_eq!(merge(&mut g, &seqs, 2, 5).unwrap().data(), f.data());
    }
}

#[test]
fn merge_matches_hand_permutation() {
    let (h, w, c) = (3, 5, 2);
    let hw = h * w;
    let seqs: Vec<Arc<Array>> = (0..4).map(|d| constant(random(&[hw, c], 10 + d))).collect();
    let mut g = Eager;
    let out = merge(&mut g, &seqs, h, w).unwrap();
    for i in 0..h {
        for j in 0..w {
            let positions = [i * w + j, hw - 1 - (i * w + j), j * h + i, hw - 1 - (j * h + i)];
            for ch in 0..c {
                let expect: f64 = positions.iter().enumerate().map(|(d, &p)| seqs[d].get(&[p, ch])).sum();
                assert!((out.get(&[i, j, ch]) - expect).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn rotation_maps_row_forward_to_reversed() {
    let (h, w, c) = (4, 3, 2);
    let f = random(&[h, w, c], 3);
    let rot = Array::from_fn(&[h, w, c], |k| {
        let (i, j, ch) = (k / (w * c), (k / c) % w, k % c);
        f.get(&[h - 1 - i, w - 1 - j, ch])
    })
    .unwrap();
    let mut g = Eager;
    let a = expand(&mut g, &constant(f)).unwrap();
    let b = expand(&mut g, &constant(rot)).unwrap();
    let reversed: Vec<f64> = a[0].data().chunks(c).rev().flatten().copied().collect();
    assert_eq!(b[0].data(), reversed.as_slice());
    assert_eq!(b[0].data(), a[1].data());
}

#[test]
fn single_row_branch_is_plain_scan() {
    let (w, c, n) = (6, 3, 2);
    let mut layout = ParamLayout::new();
    let params = Ss2dParams::register(&mut layout, "s", c, n, 1, false);
    let store = layout.initialize(4).unwrap();
    let mut g = Eager;
    let p = store.bind(&mut g);
    let f = random(&[1, w, c], 5);
    let seqs = expand(&mut g, &constant(f.clone())).unwrap();
    let branch = selective_scan(&mut g, &p, params.for_direction(0), &seqs[0]).unwrap();
    let row = constant(f.reshape(&[w, c]).unwrap());
    let plain = selective_scan(&mut g, &p, params.for_direction(0), &row).unwrap();
    assert_eq!(branch.data(), plain.data());
}

#[test]
fn direction_parameters_are_independent_by_default() {
    let mut layout = ParamLayout::new();
    let p = Ss2dParams::register(&mut layout, "s", 4, 2, 1, false);
    assert_eq!(p.directions.len(), 4);
    let names: Vec<_> = layout.specs().iter().map(|s| s.name.clone()).collect();
    for d in Direction::ALL {
        assert!(names.iter().any(|n| n.contains(d.name())));
    }
    let mut shared = ParamLayout::new();
    Ss2dParams::register(&mut shared, "s", 4, 2, 1, true);
    assert_eq!(4 * shared.total_numel(), layout.total_numel());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ss2d_preserves_shape(h in 1usize..7, w in 1usize..7, c in 1usize..5, seed in any::<u64>()) {
        let mut layout = ParamLayout::new();
        let params = Ss2dParams::register(&mut layout, "s", c, 2, 1, false);
        let store = layout.initialize(seed).unwrap();
        let mut g = Eager;
        let p = store.bind(&mut g);
        let f = constant(random(&[h, w, c], seed));
        let y = ss2d(&mut g, &p, &params, &f).unwrap();
        prop_assert_eq!(y.shape(), f.shape());
    }

    #[test]
    fn expand_then_merge_is_four_fold(h in 1usize..9, w in 1usize..9, c in 1usize..4, seed in any::<u64>()) {
        let f = constant(random(&[h, w, c], seed));
        let mut g = Eager;
        let seqs = expand(&mut g, &f).unwrap();
        let out = merge(&mut g, &seqs, h, w).unwrap();
        for (o, v) in out.data().iter().zip(f.data()) {
            prop_assert_eq!(*o, 4.0 * v);
        }
    }
}
