use mamba_unet::gradcheck::{check_gradients, relative_error, GradCheckOptions};
use mamba_unet::{ops, Array, Graph, Tape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Array {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Array::from_fn(shape, |_| r.gen_range(-1.0..1.0)).unwrap()
}

fn close(a: &[f64], b: &[f64], rel: f64) -> bool {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= rel * scale)
}

#[test]
fn matmul_matches_triple_loop() {
    let (m, k, n) = (5, 4, 3);
    let a = random(&[m, k], 1);
    let b = random(&[k, n], 2);
    let got = ops::matmul(&a, &b).unwrap();
    let mut expect = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                expect[i * n + j] += a.get(&[i, p]) * b.get(&[p, j]);
            }
        }
    }
    assert!(close(got.data(), &expect, 1e-12));
    let id = ops::matmul(&Array::identity(3), &random(&[3, 6], 3)).unwrap();
    assert_eq!(id.data(), random(&[3, 6], 3).data());
}

fn conv_reference(x: &Array, k: &Array) -> Vec<f64> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ks = k.shape()[0] as isize;
    let r = ks / 2;
    let mut out = vec![0.0; h * w * c];
    for i in 0..h as isize {
        for j in 0..w as isize {
            for ch in 0..c {
                let mut acc = 0.0;
                for di in 0..ks {
                    for dj in 0..ks {
                        let (y, xx) = (i + di - r, j + dj - r);
                        if y >= 0 && y < h as isize && xx >= 0 && xx < w as isize {
                            acc += x.get(&[y as usize, xx as usize, ch]) * k.get(&[di as usize, dj as usize, ch]);
                        }
                    }
                }
                out[(i as usize * w + j as usize) * c + ch] = acc;
            }
        }
    }
    out
}

#[test]
fn depthwise_conv_matches_loops() {
    for (ks, seed) in [(3, 1), (5, 2), (1, 3)] {
        let x = random(&[6, 7, 3], seed);
        let k = random(&[ks, ks, 3], seed + 10);
        let got = ops::depthwise_conv2d(&x, &k).unwrap();
        assert!(close(got.data(), &conv_reference(&x, &k), 1e-12));
    }
}

#[test]
fn depthwise_delta_kernel_is_identity() {
    let x = random(&[5, 4, 2], 4);
    let mut k = Array::zeros(&[3, 3, 2]);
    k.data_mut()[(3 + 1) * 2] = 1.0;
    k.data_mut()[(3 + 1) * 2 + 1] = 1.0;
    assert_eq!(ops::depthwise_conv2d(&x, &k).unwrap().data(), x.data());
}

#[test]
fn silu_large_input_and_gradient_at_point_seven() {
    let y = ops::silu(&Array::new(vec![1], vec![40.0]).unwrap()).unwrap();
    assert!((y.data()[0] - 40.0).abs() < 1e-12);

    let x = Array::new(vec![1], vec![0.7]).unwrap();
    let analytic = ops::silu_backward(&x, &[1.0])[0];
    let h = 1e-5;
    let f = |v: f64| v / (1.0 + (-v).exp());
    let numeric = (f(0.7 + h) - f(0.7 - h)) / (2.0 * h);
    assert!(relative_error(analytic, numeric, 1e-12) < 1e-6);
}

#[test]
fn layer_norm_gradient_tight() {
    let opts = GradCheckOptions::default();
    for seed in 0..20 {
        let x = random(&[3, 6], seed);
        let g = random(&[6], seed + 1);
        let b = random(&[6], seed + 2);
        let r = check_gradients(
            &[x, g, b],
            |t, v| {
                let y = t.layer_norm(&v[0], &v[1], &v[2], 1e-5)?;
                let w = t.constant(random(&[3, 6], 99));
                let p = t.mul(&y, &w)?;
                t.sum(&p)
            },
            &opts,
        )
        .unwrap();
        assert!(r.passes(1e-5), "{r:?}");
    }
}

#[test]
fn composite_chain_gradient() {
    let x = random(&[4, 3], 1);
    let w = random(&[3, 5], 2);
    let b = random(&[5], 3);
    let g = random(&[5], 4);
    let beta = random(&[5], 5);
    let r = check_gradients(
        &[x, w, b, g, beta],
        |t, v| {
            let l = t.linear(&v[0], &v[1], Some(&v[2]))?;
            let s = t.silu(&l)?;
            let n = t.layer_norm(&s, &v[3], &v[4], 1e-5)?;
            let sq = t.mul(&n, &n)?;
            t.sum(&sq)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(r.passes(1e-4), "{r:?}");
}

#[test]
fn structural_ops_gradients() {
    for seed in 0..20 {
        let a = random(&[3, 4], seed);
        let b = random(&[4, 2], seed + 1);
        let c = random(&[3, 3], seed + 2);
        let r = check_gradients(
            &[a, b, c],
            |t, v| {
                let m = t.matmul(&v[0], &v[1])?;
                let cat = t.concat_last(&m, &v[2])?;
                let s = t.slice_last(&cat, 1, 3)?;
                let r = t.reshape(&s, &[9])?;
                let idx: std::sync::Arc<[usize]> = vec![8, 0, 3, 3, 5].into();
                let gth = t.gather(&r, &[5], idx)?;
                let sc = t.scale(&gth, 1.7)?;
                let sh = t.add_scalar(&sc, 0.3)?;
                let e = t.exp(&sh)?;
                let lead = t.sum_leading(&cat)?;
                let l1 = t.sum(&e)?;
                let sq = t.mul(&lead, &lead)?;
                let l2 = t.sum(&sq)?;
                t.add(&l1, &l2)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.passes(1e-4), "seed {seed}: {r:?}");
    }
}

#[test]
fn softmax_examples() {
    let u = ops::softmax(&Array::zeros(&[3])).unwrap();
    for v in u.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn tape_rejects_non_finite_results() {
    let mut t = Tape::new();
    let x = t.var(Array::new(vec![1], vec![800.0]).unwrap());
    assert!(t.exp(&x).is_err());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(v in proptest::collection::vec(-700.0f64..700.0, 1..40)) {
        let n = v.len();
        let y = ops::softmax(&Array::new(vec![n], v).unwrap()).unwrap();
        prop_assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(y.data().iter().all(|p| *p >= 0.0));
    }

    #[test]
    fn softmax_shift_invariant(v in proptest::collection::vec(-50.0f64..50.0, 1..20), shift in -100.0f64..100.0) {
        let n = v.len();
        let a = ops::softmax(&Array::new(vec![n], v.clone()).unwrap()).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        let b = ops::softmax(&Array::new(vec![n], shifted).unwrap()).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes(v in proptest::collection::vec(-10.0f64..10.0, 2..30)) {
        let n = v.len();
        let spread = v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 1e-2);
        let y = ops::layer_norm(
            &Array::new(vec![n], v).unwrap(),
            &Array::full(&[n], 1.0).unwrap(),
            &Array::zeros(&[n]),
            0.0,
        ).unwrap();
        let mean = y.data().iter().sum::<f64>() / n as f64;
        let var = y.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        prop_assert!(mean.abs() < 1e-10);
        prop_assert!((var - 1.0).abs() < 1e-10);
    }

    #[test]
    fn non_finite_data_is_rejected(i in 0usize..5, bad in prop_oneof![Just(f64::NAN), Just(f64::INFINITY), Just(f64::NEG_INFINITY)]) {
        let mut v = vec![0.0; 5];
        v[i] = bad;
        prop_assert!(Array::new(vec![5], v).is_err());
    }
}
