use mamba_unet::model::{MambaUnet, ModelConfig};
use mamba_unet::params::ParamLayout;
use mamba_unet::vss::*;
use mamba_unet::{Array, Eager, Graph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Array {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Array::from_fn(shape, |_| r.gen_range(-1.0..1.0)).unwrap()
}

fn block(dim: usize, opts: &VssOptions, seed: u64) -> (VssBlockParams, mamba_unet::params::ParamStore) {
    let mut layout = ParamLayout::new();
    let b = VssBlockParams::register(&mut layout, "b", dim, opts);
    (b, layout.initialize(seed).unwrap())
}

#[test]
fn zero_output_projection_is_identity() {
    for opts in [
        VssOptions::default(),
        VssOptions {
            gate: GateMode::Add,
            post_norm: PostNormPlacement::AfterMerge,
            share_directions: true,
            ..VssOptions::default()
        },
    ] {
        let (b, mut store) = block(6, &opts, 1);
        *store.get_mut(b.out_proj.0) = Array::zeros(&[12, 6]);
        *store.get_mut(b.out_proj.1) = Array::zeros(&[6]);
        let mut g = Eager;
        let p = store.bind(&mut g);
        let x = g.constant(random(&[5, 4, 6], 2));
        let y = vss_forward(&mut g, &p, &b, &x).unwrap();
        assert_eq!(y.data(), x.data());
    }
}

#[test]
fn output_shape_equals_input_shape() {
    for (h, w, d) in [(7, 7, 8), (14, 14, 4), (56, 56, 96)] {
        let (b, store) = block(d, &VssOptions::default(), 3);
        let mut g = Eager;
        let p = store.bind(&mut g);
        let x = g.constant(random(&[h, w, d], 4));
        assert_eq!(vss_forward(&mut g, &p, &b, &x).unwrap().shape(), &[h, w, d]);
    }
}

#[test]
fn channel_mismatch_is_an_error() {
    let (b, store) = block(4, &VssOptions::default(), 0);
    let mut g = Eager;
    let p = store.bind(&mut g);
    let x = g.constant(Array::zeros(&[3, 3, 5]));
    assert!(vss_forward(&mut g, &p, &b, &x).is_err());
}

#[test]
fn golden_parameter_counts_per_stage() {
    let opts = VssOptions::default();
    for (d, expect) in [(96, 105_696), (192, 340_416), (384, 1_196_928), (768, 4_458_240)] {
        let mut layout = ParamLayout::new();
        VssBlockParams::register(&mut layout, "b", d, &opts);
        assert_eq!(layout.total_numel(), expect, "D={d}");
    }
    let small = VssOptions {
        state_size: 2,
        ..VssOptions::default()
    };
    let mut layout = ParamLayout::new();
    VssBlockParams::register(&mut layout, "b", 4, &small);
    assert_eq!(layout.total_numel(), 532);
}

#[test]
fn no_positional_parameters_anywhere() {
    let allowed = [
        "pre_norm",
        "in_proj_a",
        "in_proj_b",
        "dw_conv",
        "ss2d",
        "post_norm",
        "out_proj",
    ];
    let mut layout = ParamLayout::new();
    VssBlockParams::register(&mut layout, "b", 8, &VssOptions::default());
    for spec in layout.specs() {
        let part = spec.name.split('.').nth(1).unwrap();
        assert!(allowed.contains(&part), "unexpected parameter {}", spec.name);
    }
    let model = MambaUnet::new(ModelConfig::default()).unwrap();
    for spec in model.layout().specs() {
        let lower = spec.name.to_lowercase();
        for banned in ["pos_embed", "position", "absolute", "relative_bias"] {
            assert!(!lower.contains(banned), "{}", spec.name);
        }
    }
}

#[test]
fn gate_modes_differ() {
    let mul = VssOptions::default();
    let add = VssOptions {
        gate: GateMode::Add,
        ..VssOptions::default()
    };
    let (b1, s1) = block(4, &mul, 5);
    let (b2, s2) = block(4, &add, 5);
    assert_eq!(s1, s2);
    let mut g = Eager;
    let x = g.constant(random(&[3, 3, 4], 6));
    let p1 = s1.bind(&mut g);
    let p2 = s2.bind(&mut g);
    let y1 = vss_forward(&mut g, &p1, &b1, &x).unwrap();
    let y2 = vss_forward(&mut g, &p2, &b2, &x).unwrap();
    assert!(y1.max_abs_diff(&y2) > 1e-6);
}
