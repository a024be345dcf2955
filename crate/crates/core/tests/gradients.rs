//! Finite-difference checks of the tape against every differentiable
//! component, from single ops up to a full VSS block.

use mamba_unet::cross_scan::{ss2d, Ss2dParams};
use mamba_unet::gradcheck::{check_gradients, project_to_scalar, GradCheckOptions};
use mamba_unet::params::ParamLayout;
use mamba_unet::ssm::selective::SsmProjection;
use mamba_unet::vss::{vss_forward, VssBlockParams, VssOptions};
use mamba_unet::{Array, Graph, Result, Tape, Var};
use rand::Rng;

const TOL: f64 = 1e-4;

fn random_array(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Array {
    let mut r = mamba_unet::rng::stream(seed, "test/grad");
    Array::from_fn(shape, |_| r.gen_range(lo..hi)).unwrap()
}

fn check(inputs: &[Array], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let r = check_gradients(inputs, f, &GradCheckOptions::default()).unwrap();
    assert!(r.passes(TOL), "{r:?}");
}

#[test]
fn elementwise_and_linear_ops() {
    for seed in 0..20 {
        let x = random_array(&[3, 4], -2.0, 2.0, seed);
        let y = random_array(&[3, 4], 0.5, 2.0, seed + 100);
        let w = random_array(&[4, 5], -1.0, 1.0, seed + 200);
        let b = random_array(&[5], -1.0, 1.0, seed + 300);
        let gain = random_array(&[4], 0.5, 1.5, seed + 400);
        let bias = random_array(&[4], -0.5, 0.5, seed + 500);
        check(&[x.clone(), y.clone()], |t, v| {
            let a = t.mul(&v[0], &v[1])?;
            let d = t.div(&a, &v[1])?;
            let e = t.exp(&d)?;
            let s = t.add(&e, &v[0])?;
            project_to_scalar(t, &s, seed)
        });
        check(&[x.clone(), w, b], |t, v| {
            let l = t.linear(&v[0], &v[1], Some(&v[2]))?;
            let s = t.silu(&l)?;
            let p = t.softplus(&s)?;
            project_to_scalar(t, &p, seed)
        });
        check(&[x.clone(), gain, bias], |t, v| {
            let n = t.layer_norm(&v[0], &v[1], &v[2], 1e-5)?;
            project_to_scalar(t, &n, seed)
        });
        check(std::slice::from_ref(&x), |t, v| {
            let s = t.softmax(&v[0])?;
            let l = t.log_softmax(&v[0])?;
            let m = t.add(&s, &l)?;
            project_to_scalar(t, &m, seed)
        });
    }
}

#[test]
fn depthwise_conv() {
    for seed in 0..20 {
        let x = random_array(&[4, 5, 3], -1.0, 1.0, seed);
        let k = random_array(&[3, 3, 3], -1.0, 1.0, seed + 50);
        check(&[x, k], |t, v| {
            let y = t.depthwise_conv2d(&v[0], &v[1])?;
            project_to_scalar(t, &y, seed)
        });
    }
}

#[test]
fn selective_scan_kernel() {
    for seed in 0..20 {
        let (l, e, n) = (6, 3, 2);
        let x = random_array(&[l, e], -1.0, 1.0, seed);
        let delta = random_array(&[l, e], 0.05, 0.8, seed + 1);
        let a = random_array(&[e, n], -2.0, -0.2, seed + 2);
        let b = random_array(&[l, n], -1.0, 1.0, seed + 3);
        let c = random_array(&[l, n], -1.0, 1.0, seed + 4);
        let d = random_array(&[e], -1.0, 1.0, seed + 5);
        check(&[x, delta, a, b, c, d], |t, v| {
            let y = t.selective_scan(&v[0], &v[1], &v[2], &v[3], &v[4], &v[5])?;
            project_to_scalar(t, &y, seed)
        });
    }
}

#[test]
fn selective_scan_with_projections() {
    let (l, e, n, r) = (5, 4, 2, 1);
    let mut layout = ParamLayout::new();
    let w = SsmProjection::register(&mut layout, "s", e, n, r);
    let store = layout.initialize(3).unwrap();
    let mut inputs: Vec<Array> = store.iter().cloned().collect();
    inputs.push(random_array(&[l, e], -1.0, 1.0, 9));
    let np = store.len();
    check(&inputs, |t, v| {
        let y = mamba_unet::ssm::selective_scan(t, &v[..np], &w, &v[np])?;
        project_to_scalar(t, &y, 4)
    });
}

#[test]
fn ss2d_three_by_three() {
    let (h, w, c, n) = (3, 3, 2, 2);
    let mut layout = ParamLayout::new();
    let params = Ss2dParams::register(&mut layout, "ss2d", c, n, 1, false);
    let store = layout.initialize(7).unwrap();
    let mut inputs: Vec<Array> = store.iter().cloned().collect();
    inputs.push(random_array(&[h, w, c], -1.0, 1.0, 8));
    let np = store.len();
    check(&inputs, |t, v| {
        let y = ss2d(t, &v[..np], &params, &v[np])?;
        project_to_scalar(t, &y, 5)
    });
}

#[test]
fn vss_block_four_by_four() {
    let opts = VssOptions {
        expansion_ratio: 2,
        state_size: 2,
        ..VssOptions::default()
    };
    let mut layout = ParamLayout::new();
    let block = VssBlockParams::register(&mut layout, "b", 4, &opts);
    assert_eq!(block.expanded, 8);
    let store = layout.initialize(2).unwrap();
    let mut inputs: Vec<Array> = store.iter().cloned().collect();
    inputs.push(random_array(&[4, 4, 4], -1.0, 1.0, 3));
    let np = store.len();
    check(&inputs, |t, v| {
        let y = vss_forward(t, &v[..np], &block, &v[np])?;
        project_to_scalar(t, &y, 6)
    });
}
