use mamba_unet::gradcheck::{check_gradients, GradCheckOptions};
use mamba_unet::metrics::{LabelMap, UNIT_SPACING};
use mamba_unet::model::{load_weights, MambaUnet};
use mamba_unet::train::*;
use mamba_unet::{Array, Graph};
use rand::Rng;

fn short_run(iterations: usize, eval_every: usize) -> RunConfig {
    let mut cfg = RunConfig::tiny();
    cfg.data.samples = 40;
    cfg.train.iterations = iterations;
    cfg.train.eval_every = eval_every;
    cfg.train.batch_size = 2;
    cfg
}

fn setup(cfg: &RunConfig) -> (MambaUnet, Dataset) {
    (MambaUnet::new(cfg.model.clone()).unwrap(), Dataset::generate(&cfg.data).unwrap())
}

#[test]
fn loss_gradient_four_by_four_three_classes() {
    let mut r = mamba_unet::rng::stream(3, "test/loss");
    let logits = Array::from_fn(&[4, 4, 3], |_| r.gen_range(-2.0..2.0)).unwrap();
    let labels: Vec<u8> = (0..16).map(|_| r.gen_range(0..3u8)).collect();
    let report = check_gradients(
        &[logits],
        |t, v| segmentation_loss(t, &v[0], &labels, 1.0, 1.0),
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passes(1e-6), "{report:?}");
}

#[test]
fn zero_learning_rate_keeps_validation_constant() {
    let mut cfg = short_run(6, 2);
    cfg.train.lr = 0.0;
    let (model, data) = setup(&cfg);
    let out = train(&model, &cfg.train, &data, None).unwrap();
    assert_eq!(out.log.len(), 3);
    assert!(out.log.iter().all(|r| r.val_dice == out.log[0].val_dice));
    assert_eq!(out.final_weights, model.init_weights(cfg.train.seed).unwrap());
}

#[test]
fn fixed_seed_runs_are_bit_identical() {
    let cfg = short_run(12, 4);
    let (model, data) = setup(&cfg);
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = train(&model, &cfg.train, &data, Some(d1.path())).unwrap();
    let b = train(&model, &cfg.train, &data, Some(d2.path())).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.final_weights, b.final_weights);
    for f in [CHECKPOINT_NAME, LOG_NAME] {
        assert_eq!(std::fs::read(d1.path().join(f)).unwrap(), std::fs::read(d2.path().join(f)).unwrap());
    }

    let other = train(&model, &RunConfig { ..cfg.clone().with_seed(1) }.train, &data, None).unwrap();
    assert_ne!(other.final_weights, a.final_weights);
}

const CHECKPOINT_NAME: &str = mamba_unet::train::trainer::CHECKPOINT_FILE;
const LOG_NAME: &str = mamba_unet::train::trainer::LOG_FILE;

#[test]
fn checkpoints_strictly_improve_and_hold_best_weights() {
    let mut cfg = short_run(40, 4);
    cfg.train.lr = 0.05;
    let (model, data) = setup(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let out = train(&model, &cfg.train, &data, Some(dir.path())).unwrap();
    let saved: Vec<f64> = out.log.iter().filter(|r| r.checkpoint).map(|r| r.val_dice).collect();
    assert!(!saved.is_empty());
    assert!(saved.windows(2).all(|w| w[1] > w[0]), "{saved:?}");
    assert_eq!(*saved.last().unwrap(), out.best_val_dice);
    let (_, loaded) = load_weights(&checkpoint_path(dir.path())).unwrap();
    assert_eq!(loaded, out.best_weights);

    let log_text = std::fs::read_to_string(dir.path().join(LOG_NAME)).unwrap();
    let parsed: Vec<LogRecord> = log_text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(parsed, out.log);
}

#[test]
fn weight_decay_only_changes_the_decay_term_of_the_first_step() {
    let cfg = short_run(1, 1);
    let (model, data) = setup(&cfg);
    let w0 = model.init_weights(0).unwrap();
    let train_set = data.split(Split::Train);
    let (_, grads) = batch_gradients(&model, &w0, &train_set[..2], &cfg.train).unwrap();
    let step = |wd: f64| {
        let mut w = w0.clone();
        let mut s = SgdState::zeros(&w);
        let p = SgdParams { lr: 0.01, momentum: 0.9, weight_decay: wd };
        sgd_step(&mut w, &grads, &mut s, model.layout(), p).unwrap();
        w
    };
    let (plain, decayed) = (step(0.0), step(1e-2));
    for ((a, b), w) in plain.iter().zip(decayed.iter()).zip(w0.iter()) {
        for ((x, y), z) in a.data().iter().zip(b.data()).zip(w.data()) {
            assert!((x - y - 0.01 * 1e-2 * z).abs() < 1e-15);
        }
    }
}

#[test]
fn batch_gradients_do_not_depend_on_thread_count() {
    let cfg = short_run(1, 1);
    let (model, data) = setup(&cfg);
    let w = model.init_weights(4).unwrap();
    let batch = data.split(Split::Train)[..4].to_vec();
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| batch_gradients(&model, &w, &batch, &cfg.train).unwrap())
    };
    let (l1, g1) = run(1);
    let (l4, g4) = run(4);
    assert_eq!(l1, l4);
    assert_eq!(g1, g4);
}

#[test]
fn batch_gradient_is_mean_of_item_gradients() {
    let cfg = short_run(1, 1);
    let (model, data) = setup(&cfg);
    let w = model.init_weights(4).unwrap();
    let batch = data.split(Split::Train)[..2].to_vec();
    let (l, g) = batch_gradients(&model, &w, &batch, &cfg.train).unwrap();
    let (la, ga) = batch_gradients(&model, &w, &batch[..1], &cfg.train).unwrap();
    let (lb, gb) = batch_gradients(&model, &w, &batch[1..], &cfg.train).unwrap();
    assert!((l - (la + lb) / 2.0).abs() < 1e-15);
    for ((x, a), b) in g.iter().zip(&ga).zip(&gb) {
        for ((x, a), b) in x.data().iter().zip(a.data()).zip(b.data()) {
            assert!((x - (a + b) / 2.0).abs() < 1e-15);
        }
    }
}

#[test]
fn ground_truth_as_prediction_scores_perfectly() {
    let cfg = short_run(1, 1);
    let data = Dataset::generate(&cfg.data).unwrap();
    let pairs: Vec<(LabelMap, LabelMap)> = data.samples.iter().map(|s| (s.labels.clone(), s.labels.clone())).collect();
    let r = mamba_unet::metrics::evaluate(&pairs, 2, UNIT_SPACING).unwrap();
    assert_eq!(r.mean_over_classes.dice, 1.0);
    assert_eq!(r.mean_over_classes.hd95, Some(0.0));
    assert!(r.per_image_dice.iter().all(|&d| d == 1.0));

    let background: Vec<(LabelMap, LabelMap)> = data
        .samples
        .iter()
        .map(|s| (LabelMap::new(32, 32, vec![0; 1024]).unwrap(), s.labels.clone()))
        .collect();
    let r = mamba_unet::metrics::evaluate(&background, 2, UNIT_SPACING).unwrap();
    assert_eq!(r.mean_over_classes.dice, 0.0);
    assert_eq!(r.mean_over_classes.hd95, None);
}

#[test]
fn evaluation_matches_pixel_count_oracle() {
    let cfg = short_run(1, 1);
    let (model, data) = setup(&cfg);
    let w = model.init_weights(11).unwrap();
    let val = data.split(Split::Val);
    let report = evaluate_samples(&model, &w, &val, UNIT_SPACING).unwrap();
    for (s, &d) in val.iter().zip(&report.per_image_dice) {
        let logits = model.logits(&w, &s.image).unwrap();
        let (mut inter, mut pred, mut truth) = (0.0, 0.0, 0.0);
        for (p, &g) in logits.data().chunks(2).zip(&s.labels.labels) {
            let fg = p[1] > p[0];
            inter += (fg && g == 1) as u8 as f64;
            pred += fg as u8 as f64;
            truth += (g == 1) as u8 as f64;
        }
        let oracle = if pred + truth == 0.0 { 1.0 } else { 2.0 * inter / (pred + truth) };
        assert_eq!(d, oracle);
    }
}

#[test]
fn loss_on_perfect_model_output_is_near_zero() {
    let labels = vec![0u8, 1, 1, 0];
    let mut g = mamba_unet::Eager;
    let x = g.constant(Array::from_fn(&[2, 2, 2], |i| if (i % 2) as u8 == labels[i / 2] { 30.0 } else { -30.0 }).unwrap());
    let l = segmentation_loss(&mut g, &x, &labels, 1.0, 1.0).unwrap();
    assert!(g.value(&l).item().unwrap() < 1e-12);
}
