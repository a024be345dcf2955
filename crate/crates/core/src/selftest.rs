//! Fast invariant suite bundled into the library so a built binary can check
//! itself.

use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::bench::random_scan_case;
use crate::cross_scan::{ss2d, Ss2dParams};
use crate::error::Result;
use crate::gradcheck::{check_gradients, project_to_scalar, GradCheckOptions};
use crate::graph::Graph;
use crate::metrics::{class_scores, LabelMap, UNIT_SPACING};
use crate::model::io::{decode_weights, encode_weights};
use crate::model::{load_weights, MambaUnet, ModelConfig};
use crate::params::ParamLayout;
use crate::rng;
use crate::ssm::{max_relative_deviation, scan_parallel, scan_sequential, Discretization, ScanParams, SelectiveScanInput};
use crate::tape::{Tape, Var};
use crate::train::segmentation_loss;
use crate::vss::{vss_forward, VssBlockParams, VssOptions};

const GOLDEN_SCAN: &str = include_str!("../tests/data/scan_golden.json");

#[derive(Clone, Debug, Default)]
pub struct SelftestOptions {
    /// Weight file that must load cleanly.
    pub weights: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: usize,
    pub total: usize,
    pub failures: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelftestSummary {
    pub suites: Vec<SuiteResult>,
}

impl SelftestSummary {
    pub fn all_passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed == s.total)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for suite in &self.suites {
            let status = if suite.passed == suite.total { "ok" } else { "FAILED" };
            s.push_str(&format!("{:<14} {}/{} {status}\n", suite.name, suite.passed, suite.total));
            for f in &suite.failures {
                s.push_str(&format!("  - {f}\n"));
            }
        }
        let (p, t) = self.suites.iter().fold((0, 0), |(p, t), s| (p + s.passed, t + s.total));
        s.push_str(&format!("total          {p}/{t}\n"));
        s
    }
}

type Case = (String, Box<dyn FnOnce() -> Result<(), String>>);

fn run_suite(name: &str, cases: Vec<Case>) -> SuiteResult {
    let total = cases.len();
    let mut failures = Vec::new();
    for (case, f) in cases {
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
            .unwrap_or_else(|_| Err("panicked".into()));
        if let Err(e) = outcome {
            failures.push(format!("{case}: {e}"));
        }
    }
    SuiteResult {
        name: name.into(),
        passed: total - failures.len(),
        total,
        failures,
    }
}

fn case(name: impl Into<String>, f: impl FnOnce() -> Result<(), String> + 'static) -> Case {
    (name.into(), Box::new(f))
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Array {
    let mut r = rng::stream(seed, "selftest/array");
    Array::from_fn(shape, |_| r.gen_range(lo..hi)).expect("finite")
}

fn grad_case(name: &str, inputs: Vec<Array>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Case {
    case(name, move || {
        let opts = GradCheckOptions {
            step: 1e-4,
            fourth_order: true,
            ..GradCheckOptions::default()
        };
        let r = check_gradients(&inputs, f, &opts).map_err(|e| e.to_string())?;
        ensure(r.passes(1e-4), || format!("max relative error {:.2e}", r.max_rel_err))
    })
}

fn gradient_cases() -> Vec<Case> {
    let x = random(&[3, 4], -2.0, 2.0, 1);
    let w = random(&[4, 3], -1.0, 1.0, 2);
    let b = random(&[3], -1.0, 1.0, 3);
    let gain = random(&[4], 0.5, 1.5, 4);
    let bias = random(&[4], -0.5, 0.5, 5);
    let mut cases = vec![
        grad_case("linear+silu+softplus", vec![x.clone(), w, b], |t, v| {
            let l = t.linear(&v[0], &v[1], Some(&v[2]))?;
            let s = t.silu(&l)?;
            let s = t.softplus(&s)?;
            project_to_scalar(t, &s, 1)
        }),
        grad_case("layer_norm", vec![x.clone(), gain, bias], |t, v| {
            let n = t.layer_norm(&v[0], &v[1], &v[2], 1e-5)?;
            project_to_scalar(t, &n, 2)
        }),
        grad_case("softmax", vec![x], |t, v| {
            let s = t.softmax(&v[0])?;
            project_to_scalar(t, &s, 3)
        }),
        grad_case(
            "depthwise_conv2d",
            vec![random(&[4, 4, 2], -1.0, 1.0, 6), random(&[3, 3, 2], -1.0, 1.0, 7)],
            |t, v| {
                let y = t.depthwise_conv2d(&v[0], &v[1])?;
                project_to_scalar(t, &y, 4)
            },
        ),
        grad_case(
            "selective_scan",
            vec![
                random(&[5, 2], -1.0, 1.0, 8),
                random(&[5, 2], 0.05, 0.8, 9),
                random(&[2, 3], -2.0, -0.2, 10),
                random(&[5, 3], -1.0, 1.0, 11),
                random(&[5, 3], -1.0, 1.0, 12),
                random(&[2], -1.0, 1.0, 13),
            ],
            |t, v| {
                let y = t.selective_scan(&v[0], &v[1], &v[2], &v[3], &v[4], &v[5])?;
                project_to_scalar(t, &y, 5)
            },
        ),
    ];
    {
        let labels: Vec<u8> = (0..16).map(|i| (i * 7 % 3) as u8).collect();
        cases.push(grad_case("segmentation_loss", vec![random(&[4, 4, 3], -2.0, 2.0, 14)], move |t, v| {
            segmentation_loss(t, &v[0], &labels, 1.0, 1.0)
        }));
    }
    {
        let mut layout = ParamLayout::new();
        let params = Ss2dParams::register(&mut layout, "ss2d", 2, 2, 1, false);
        let mut inputs: Vec<Array> = layout.initialize(15).expect("init").iter().cloned().collect();
        let np = inputs.len();
        inputs.push(random(&[3, 3, 2], -1.0, 1.0, 16));
        cases.push(grad_case("ss2d", inputs, move |t, v| {
            let y = ss2d(t, &v[..np], &params, &v[np])?;
            project_to_scalar(t, &y, 6)
        }));
    }
    {
        let opts = VssOptions {
            state_size: 2,
            ..VssOptions::default()
        };
        let mut layout = ParamLayout::new();
        let block = VssBlockParams::register(&mut layout, "b", 4, &opts);
        let mut inputs: Vec<Array> = layout.initialize(17).expect("init").iter().cloned().collect();
        let np = inputs.len();
        inputs.push(random(&[3, 3, 4], -1.0, 1.0, 18));
        cases.push(grad_case("vss_block", inputs, move |t, v| {
            let y = vss_forward(t, &v[..np], &block, &v[np])?;
            project_to_scalar(t, &y, 7)
        }));
    }
    cases
}

#[derive(Deserialize)]
struct Golden {
    len: usize,
    channels: usize,
    state: usize,
    x: Vec<f64>,
    delta: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    a: Vec<f64>,
    d: Vec<f64>,
    y: Vec<f64>,
}

fn scan_cases() -> Vec<Case> {
    let mut cases = vec![case("golden L=64 N=8", || {
        let g: Golden = serde_json::from_str(GOLDEN_SCAN).map_err(|e| e.to_string())?;
        let inp = SelectiveScanInput::new(g.len, g.channels, g.state, g.x, g.delta, g.b, g.c).map_err(|e| e.to_string())?;
        let params = ScanParams { a: g.a, d: g.d };
        for (name, y) in [
            ("sequential", scan_sequential(&inp, &params, Discretization::Taylor)),
            ("parallel", scan_parallel(&inp, &params, Discretization::Taylor, 16)),
        ] {
            let dev = max_relative_deviation(&y.map_err(|e| e.to_string())?, &g.y);
            ensure(dev < 1e-12, || format!("{name} deviates by {dev:e}"))?;
        }
        Ok(())
    })];
    for (seed, len, st) in [(1u64, 1000usize, 4usize), (2, 4096, 16), (3, 777, 32), (4, 1, 8)] {
        cases.push(case(format!("parallel == sequential L={len} N={st}"), move || {
            let (inp, params) = random_scan_case(seed, len, 3, st).map_err(|e| e.to_string())?;
            let s = scan_sequential(&inp, &params, Discretization::Zoh).map_err(|e| e.to_string())?;
            let p = scan_parallel(&inp, &params, Discretization::Zoh, 64).map_err(|e| e.to_string())?;
            let dev = max_relative_deviation(&p, &s);
            ensure(dev < 1e-10, || format!("deviation {dev:e}"))
        }));
    }
    cases
}

fn brute_surface(m: &[bool], h: usize, w: usize) -> Vec<(f64, f64)> {
    let on = |i: isize, j: isize| i >= 0 && j >= 0 && i < h as isize && j < w as isize && m[i as usize * w + j as usize];
    (0..h * w)
        .filter(|&k| {
            let (i, j) = ((k / w) as isize, (k % w) as isize);
            m[k] && !(on(i - 1, j) && on(i + 1, j) && on(i, j - 1) && on(i, j + 1))
        })
        .map(|k| ((k / w) as f64, (k % w) as f64))
        .collect()
}

fn brute_directed(a: &[(f64, f64)], b: &[(f64, f64)]) -> Vec<f64> {
    let mut d: Vec<f64> = a
        .iter()
        .map(|p| b.iter().map(|q| (p.0 - q.0).hypot(p.1 - q.1)).fold(f64::INFINITY, f64::min))
        .collect();
    d.sort_by(f64::total_cmp);
    d
}

fn metric_cases() -> Vec<Case> {
    (0..20u64)
        .map(|seed| {
            case(format!("random 12x12 pair {seed}"), move || {
                let (h, w) = (12, 12);
                let mut r = rng::stream(seed, "selftest/masks");
                let p: Vec<u8> = (0..h * w).map(|_| r.gen_bool(0.4) as u8).collect();
                let g: Vec<u8> = (0..h * w).map(|_| r.gen_bool(0.4) as u8).collect();
                let pm = LabelMap::new(h, w, p.clone()).map_err(|e| e.to_string())?;
                let gm = LabelMap::new(h, w, g.clone()).map_err(|e| e.to_string())?;
                let s = class_scores(&pm, &gm, 1, 2, UNIT_SPACING).map_err(|e| e.to_string())?;
                let tp = p.iter().zip(&g).filter(|(a, b)| **a == 1 && **b == 1).count() as f64;
                let np = p.iter().filter(|v| **v == 1).count() as f64;
                let ng = g.iter().filter(|v| **v == 1).count() as f64;
                ensure(s.dice == 2.0 * tp / (np + ng), || "dice".into())?;
                ensure(s.iou == tp / (np + ng - tp), || "iou".into())?;

                let (bp, bg) = (brute_surface(&pm.mask(1), h, w), brute_surface(&gm.mask(1), h, w));
                let (d1, d2) = (brute_directed(&bp, &bg), brute_directed(&bg, &bp));
                let rank = |n: usize| (95 * n).div_ceil(100).max(1) - 1;
                let hd95 = d1[rank(d1.len())].max(d2[rank(d2.len())]);
                let asd = (d1.iter().sum::<f64>() + d2.iter().sum::<f64>()) / (d1.len() + d2.len()) as f64;
                ensure((s.hd95.unwrap_or(f64::NAN) - hd95).abs() < 1e-9, || "hd95".into())?;
                ensure((s.asd.unwrap_or(f64::NAN) - asd).abs() < 1e-9, || "asd".into())
            })
        })
        .collect()
}

fn shape_cases() -> Vec<Case> {
    let configs = [
        ModelConfig::tiny(2),
        ModelConfig {
            input_h: 64,
            input_w: 32,
            embed_dim: 4,
            num_classes: 3,
            state_size: 2,
            depths: [1, 1, 1, 1],
            ..ModelConfig::default()
        },
    ];
    configs
        .into_iter()
        .map(|cfg| {
            case(format!("{}x{} C={}", cfg.input_h, cfg.input_w, cfg.embed_dim), move || {
                let model = MambaUnet::new(cfg.clone()).map_err(|e| e.to_string())?;
                let w = model.init_weights(0).map_err(|e| e.to_string())?;
                let mut g = crate::graph::Eager;
                let p = w.bind(&mut g);
                let x = g.constant(Array::zeros(&[cfg.input_h, cfg.input_w, cfg.in_channels]));
                let (_, trace) = model.forward_traced(&mut g, &p, &x).map_err(|e| e.to_string())?;
                let p0 = cfg.patch_size;
                for s in 0..3 {
                    let want = vec![cfg.input_h / (p0 << s), cfg.input_w / (p0 << s), cfg.embed_dim << s];
                    let got = &trace.iter().find(|t| t.name == format!("encoder{s}")).ok_or("missing stage")?.shape;
                    ensure(*got == want, || format!("encoder{s}: {got:?} vs {want:?}"))?;
                }
                let last = &trace.last().ok_or("empty trace")?.shape;
                ensure(*last == vec![cfg.input_h, cfg.input_w, cfg.num_classes], || format!("logits {last:?}"))
            })
        })
        .collect()
}

fn serialization_cases(opts: &SelftestOptions) -> Vec<Case> {
    let mut cases = vec![
        case("round trip", || {
            let model = MambaUnet::new(ModelConfig::tiny(2)).map_err(|e| e.to_string())?;
            let w = model.init_weights(3).map_err(|e| e.to_string())?;
            let bytes = encode_weights(&model, &w).map_err(|e| e.to_string())?;
            let (m2, w2) = decode_weights(&bytes).map_err(|e| e.to_string())?;
            ensure(w2 == w && m2.config() == model.config(), || "decoded weights differ".into())?;
            let again = encode_weights(&m2, &w2).map_err(|e| e.to_string())?;
            ensure(again == bytes, || "re-encoding is not byte-identical".into())
        }),
        case("corruption rejected", || {
            let model = MambaUnet::new(ModelConfig::tiny(2)).map_err(|e| e.to_string())?;
            let w = model.init_weights(3).map_err(|e| e.to_string())?;
            let bytes = encode_weights(&model, &w).map_err(|e| e.to_string())?;
            for at in [0, 5, 20, bytes.len() / 2, bytes.len() - 1] {
                let mut bad = bytes.clone();
                bad[at] ^= 0x10;
                ensure(decode_weights(&bad).is_err(), || format!("flip at byte {at} accepted"))?;
            }
            ensure(decode_weights(&bytes[..bytes.len() - 8]).is_err(), || "truncation accepted".into())
        }),
    ];
    if let Some(path) = opts.weights.clone() {
        cases.push(case(format!("load {}", path.display()), move || {
            let (model, w) = load_weights(&path).map_err(|e| e.to_string())?;
            let bytes = encode_weights(&model, &w).map_err(|e| e.to_string())?;
            let on_disk = std::fs::read(&path).map_err(|e| e.to_string())?;
            ensure(bytes == on_disk, || "re-encoding differs from file".into())
        }));
    }
    cases
}

pub fn run_selftest(opts: &SelftestOptions) -> SelftestSummary {
    SelftestSummary {
        suites: vec![
            run_suite("gradients", gradient_cases()),
            run_suite("scan", scan_cases()),
            run_suite("metrics", metric_cases()),
            run_suite("shapes", shape_cases()),
            run_suite("serialization", serialization_cases(opts)),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pristine_selftest_passes() {
        let s = run_selftest(&SelftestOptions::default());
        assert!(s.all_passed(), "{}", s.to_text());
        assert_eq!(s.suites.len(), 5);
    }

    #[test]
    fn corrupt_fixture_fails_serialization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.munt");
        std::fs::write(&path, b"MUNT not really").unwrap();
        let s = run_selftest(&SelftestOptions { weights: Some(path) });
        assert!(!s.all_passed());
        let ser = s.suites.iter().find(|x| x.name == "serialization").unwrap();
        assert_eq!(ser.passed + 1, ser.total);
    }
}
