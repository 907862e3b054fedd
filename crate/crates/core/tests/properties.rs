//! Property suites for interventions, slab decoding, paths, permutations and
//! the truncated-normal sampler.

use mechlab::align::{apply_permutation, PermutationMap};
use mechlab::cbft::sample_trunc_normal;
use mechlab::connect::{eval_path, point_on_path, PathSpec};
use mechlab::grid::{CounterfactualKind, GridConfig, GridDataset};
use mechlab::mechanism::{composition_check, Threshold};
use mechlab::nn::{evaluate, init_model, train, Schedule};
use mechlab::rng::stream;
use mechlab::slab::{decode_attribute, sample_tk, InterventionSpec, NoiseFamily, SlabAttribute, SlabConfig, SlabDataset};
use mechlab::{Architecture, Dataset, LossKind, ModelParams, TrainConfig};
use ndarray::Array2;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn slab_config(dim: usize, ks: &[u32], samples: usize, seed: u64) -> SlabConfig {
    SlabConfig {
        dim,
        attributes: ks.iter().enumerate().map(|(i, &k)| SlabAttribute { k, predictive: i % 2 == 0 }).collect(),
        delta: 0.1,
        noise: NoiseFamily::Uniform,
        num_samples: samples,
        seed,
        boundary: Default::default(),
    }
}

fn random_inputs(n: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut r = stream(seed, &[77]);
    Array2::from_shape_simple_fn((n, dim), || r.random_range(-1.0..1.0))
}

fn random_dataset(n: usize, dim: usize, classes: usize, seed: u64) -> Dataset {
    let mut r = stream(seed, &[78]);
    let labels = (0..n).map(|_| r.random_range(0..classes)).collect();
    Dataset::new(random_inputs(n, dim, seed), labels).unwrap()
}

fn widths() -> impl Strategy<Value = Vec<usize>> {
    (1usize..8, prop::collection::vec(1usize..12, 1..4), 2usize..5).prop_map(|(i, h, o)| {
        let mut w = vec![i];
        w.extend(h);
        w.push(o);
        w
    })
}

#[test]
fn slab_decoding_round_trips_over_the_full_sweep() {
    let dim = 128;
    let mut failures = 0;
    for k in [0, 2, 4, 6] {
        for z in [0u8, 1] {
            for delta in [0.0, 0.1, 0.25, 0.49] {
                let mut r = stream(k as u64 * 10 + u64::from(z), &[(delta * 100.0) as u64]);
                for _ in 0..10_000 {
                    let v = sample_tk(k, z, delta, dim, &mut r).unwrap().value;
                    failures += usize::from(decode_attribute(v, k, dim).unwrap() != z);
                }
            }
        }
    }
    assert_eq!(failures, 0);
}

/// Kolmogorov-Smirnov statistic of two samples.
fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

#[test]
fn composing_interventions_in_either_order_gives_the_same_distribution() {
    let ds = SlabDataset::generate(&slab_config(12, &[0, 4, 2], 6000, 9)).unwrap();
    let (a, b) = (InterventionSpec::randomize(0), InterventionSpec::randomize(1));
    let ab = ds.intervene_all(&[a, b], 1).unwrap();
    let ba = ds.intervene_all(&[b, a], 2).unwrap();
    assert_eq!(ab.data.labels(), ba.data.labels());
    // Critical value of the two-sample test at level 0.001.
    let crit = 1.95 * (2.0 / ds.len() as f64).sqrt();
    for c in 0..ds.config.dim {
        let x: Vec<f64> = ab.data.inputs().column(c).to_vec();
        let y: Vec<f64> = ba.data.inputs().column(c).to_vec();
        let d = ks_statistic(&x, &y);
        assert!(d < crit, "column {c}: KS statistic {d} >= {crit}");
    }
}

fn trained_slab_model() -> (ModelParams, SlabDataset) {
    let ds = SlabDataset::generate(&SlabConfig {
        attributes: vec![
            SlabAttribute { k: 0, predictive: true },
            SlabAttribute { k: 4, predictive: true },
            SlabAttribute { k: 2, predictive: false },
        ],
        ..slab_config(16, &[], 3000, 4)
    })
    .unwrap();
    let cfg = TrainConfig {
        lr: 0.05,
        momentum: 0.9,
        weight_decay: 0.0,
        batch_size: 64,
        epochs: 8,
        schedule: Schedule::Cosine,
        seed: 1,
    };
    let m = init_model(&Architecture::mlp(&[16, 64, 2]), 3).unwrap();
    (train(m, &ds.data, LossKind::CrossEntropy, &cfg).unwrap().model, ds)
}

#[test]
fn composition_of_invariances_holds_in_both_directions_on_a_trained_model() {
    let (m, ds) = trained_slab_model();
    let eps = Threshold::Absolute(0.02);
    let r = |i| vec![InterventionSpec::randomize(i)];
    let both = composition_check(&m, &ds, &r(1), &r(2), eps, LossKind::CrossEntropy, 4, 0).unwrap();
    assert!(both.invariant_a && both.invariant_b, "{both:?}");
    assert!(both.consistent && both.gap_composed <= 2.0 * both.tolerance + both.noise, "{both:?}");
    let one = composition_check(&m, &ds, &r(0), &r(1), eps, LossKind::CrossEntropy, 4, 0).unwrap();
    assert!(!one.invariant_a && one.invariant_b, "{one:?}");
    assert!(one.gap_a > 10.0 * one.tolerance, "{one:?}");
    assert!(one.consistent && one.gap_composed >= one.gap_a - 2.0 * one.tolerance - one.noise, "{one:?}");
    let rev = composition_check(&m, &ds, &r(2), &r(0), eps, LossKind::CrossEntropy, 4, 0).unwrap();
    assert!(rev.invariant_a && !rev.invariant_b && rev.consistent, "{rev:?}");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn slab_interventions_touch_only_their_column(
        dim in 4usize..24,
        ks in prop::collection::vec(prop::sample::select(vec![0u32, 2, 4, 6]), 1..4),
        target_pick in 0usize..8,
        set in prop::option::of(0u8..2),
        seed in any::<u64>(),
    ) {
        let ds = SlabDataset::generate(&slab_config(dim, &ks, 64, seed)).unwrap();
        let target = target_pick % ks.len();
        let spec = match set {
            Some(z) => InterventionSpec::set_to(target, z),
            None => InterventionSpec::randomize(target),
        };
        let cf = ds.intervene(&spec, seed ^ 1).unwrap();
        prop_assert_eq!(cf.data.labels(), ds.data.labels());
        for c in (0..dim).filter(|&c| c != target) {
            for (x, y) in cf.data.inputs().column(c).iter().zip(ds.data.inputs().column(c)) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        if let Some(z) = set {
            for v in cf.data.inputs().column(target) {
                prop_assert_eq!(decode_attribute(*v, ks[target], dim).unwrap(), z);
            }
        }
    }

    #[test]
    fn grid_counterfactuals_touch_only_their_region(seed in any::<u64>(), p in 0.0f64..=1.0, kind_pick in 0usize..4) {
        let cfg = GridConfig { num_samples: 40, cue_proportion: p, seed, ..GridConfig::default() };
        let ds = GridDataset::generate(&cfg).unwrap();
        let kind = CounterfactualKind::ALL[kind_pick];
        let cf = ds.counterfactual(kind, seed ^ 7).unwrap();
        prop_assert_eq!(cf.data.labels(), ds.data.labels());
        let (side, cue) = (cfg.side, cfg.cue_size);
        let in_patch = |(r0, c0): (usize, usize), px: usize| {
            let (u, v) = (px / side, px % side);
            (r0..r0 + cue).contains(&u) && (c0..c0 + cue).contains(&v)
        };
        let locs = ds.cue_locations();
        for i in 0..ds.len() {
            let (a, b) = (ds.data.inputs().row(i).to_vec(), cf.data.inputs().row(i).to_vec());
            for px in 0..a.len() {
                let any_cue = locs.iter().any(|&l| in_patch(l, px));
                match kind {
                    CounterfactualKind::RandImage => {
                        if let Some(k) = ds.latents[i].cue {
                            if in_patch(locs[k], px) {
                                prop_assert_eq!(a[px], b[px]);
                            }
                        }
                    }
                    _ => {
                        if !any_cue {
                            prop_assert_eq!(a[px].to_bits(), b[px].to_bits());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn composition_check_is_exact_for_blind_models(seed in any::<u64>(), hidden in 2usize..16) {
        let ds = SlabDataset::generate(&slab_config(8, &[0, 4, 2], 200, seed)).unwrap();
        let mut m = init_model(&Architecture::mlp(&[8, hidden, 2]), seed).unwrap();
        m.layers_mut()[0].weights.row_mut(1).fill(0.0);
        m.layers_mut()[0].weights.row_mut(2).fill(0.0);
        let r = |i| vec![InterventionSpec::randomize(i)];
        let eps = Threshold::Absolute(0.01);
        let c = composition_check(&m, &ds, &r(1), &r(2), eps, LossKind::CrossEntropy, 2, seed).unwrap();
        prop_assert_eq!(c.gap_a, 0.0);
        prop_assert_eq!(c.gap_b, 0.0);
        prop_assert_eq!(c.gap_composed, 0.0);
        prop_assert!(c.consistent);
        // Adding a blind intervention changes nothing the model can see.
        let single = composition_check(&m, &ds, &r(0), &r(1), eps, LossKind::CrossEntropy, 2, seed).unwrap();
        prop_assert!(single.consistent, "{:?}", single);
    }

    #[test]
    fn path_endpoints_match_direct_evaluation(w in widths(), s1 in any::<u64>(), s2 in any::<u64>(), quadratic in any::<bool>()) {
        let (a, b) = (init_model(&Architecture::mlp(&w), s1).unwrap(), init_model(&Architecture::mlp(&w), s2).unwrap());
        let data = random_dataset(50, w[0], *w.last().unwrap(), s1 ^ s2);
        let spec = if quadratic {
            let mid = init_model(&Architecture::mlp(&w), s1.wrapping_add(s2)).unwrap();
            PathSpec::bezier(a.clone(), mid, b.clone()).unwrap()
        } else {
            PathSpec::linear(a.clone(), b.clone()).unwrap()
        };
        let rep = eval_path(&spec, &[("d", &data)], 7, LossKind::CrossEntropy).unwrap();
        let curve = &rep.curves[0];
        let (ea, eb) = (evaluate(&a, &data, LossKind::CrossEntropy).unwrap(), evaluate(&b, &data, LossKind::CrossEntropy).unwrap());
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-12 * y.abs().max(f64::MIN_POSITIVE);
        prop_assert!(close(curve.start_loss(), ea.loss), "{} vs {}", curve.start_loss(), ea.loss);
        prop_assert!(close(curve.end_loss(), eb.loss), "{} vs {}", curve.end_loss(), eb.loss);
        prop_assert_eq!(curve.accuracies[0], ea.accuracy);
        prop_assert_eq!(*curve.accuracies.last().unwrap(), eb.accuracy);
    }

    #[test]
    fn bezier_through_the_midpoint_is_the_linear_path(w in widths(), s1 in any::<u64>(), s2 in any::<u64>(), t in 0.0f64..=1.0) {
        let (a, b) = (init_model(&Architecture::mlp(&w), s1).unwrap(), init_model(&Architecture::mlp(&w), s2).unwrap());
        let mid = a.lerp(&b, 0.5).unwrap();
        let p = point_on_path(&PathSpec::bezier(a.clone(), mid, b.clone()).unwrap(), t).unwrap();
        let q = point_on_path(&PathSpec::linear(a, b).unwrap(), t).unwrap();
        for (x, y) in p.to_flat().iter().zip(q.to_flat()) {
            prop_assert!((x - y).abs() <= 1e-14 * (1.0 + y.abs()), "{} vs {}", x, y);
        }
    }

    #[test]
    fn permuted_models_compute_the_same_function(w in widths(), seed in any::<u64>()) {
        let m = init_model(&Architecture::mlp(&w), seed).unwrap();
        let mut r = stream(seed, &[5]);
        let map = PermutationMap {
            layers: m.hidden_widths().into_iter().map(|n| {
                let mut p: Vec<usize> = (0..n).collect();
                p.shuffle(&mut r);
                p
            }).collect(),
        };
        let pm = apply_permutation(&m, &map).unwrap();
        let x = random_inputs(20, w[0], seed);
        let (y0, y1) = (m.forward(x.view()).unwrap(), pm.forward(x.view()).unwrap());
        for (a, b) in y0.iter().zip(y1.iter()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{} vs {}", a, b);
        }
        let back = apply_permutation(&pm, &map.inverse()).unwrap();
        prop_assert_eq!(back, m);
    }
}

/// `erf` by its Maclaurin series, accurate to rounding for |x| <= 1.
fn erf(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    for n in 1..40 {
        term *= -x * x / n as f64;
        sum += term / (2 * n + 1) as f64;
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

#[test]
fn truncated_normal_sampler_matches_its_moments() {
    // N(0.5, 0.5^2) restricted to [0, 1], i.e. one standard deviation each side.
    let (mu, sigma) = (0.5, 0.5);
    let phi1 = (-0.5f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mass = erf(1.0 / 2f64.sqrt());
    let var = sigma * sigma * (1.0 - 2.0 * phi1 / mass);
    let n = 200_000;
    let mut r = stream(11, &[]);
    let xs: Vec<f64> = (0..n).map(|_| sample_trunc_normal(&mut r)).collect();
    assert!(xs.iter().all(|&x| (0.0..=1.0).contains(&x)));
    let mean = xs.iter().sum::<f64>() / n as f64;
    let v = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    assert!((mean - mu).abs() < 4.0 * se, "mean {mean}");
    // The sample variance has variance (m4 - var^2) / n, and m4 < 3 var^2 for this law.
    assert!((v - var).abs() < 4.0 * (2.0 * var * var / n as f64).sqrt(), "variance {v} vs {var}");
    // Mass below 0.25 matches (Phi(-0.5) - Phi(-1)) / (Phi(1) - Phi(-1)).
    let below = xs.iter().filter(|&&x| x < 0.25).count() as f64 / n as f64;
    let expect = 0.5 * (erf(1.0 / 2f64.sqrt()) - erf(0.5 / 2f64.sqrt())) / mass;
    assert!((below - expect).abs() < 4.0 * (expect * (1.0 - expect) / n as f64).sqrt(), "{below} vs {expect}");
}
