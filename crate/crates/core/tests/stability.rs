use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use stacklab::eval::{CoinFlipPredictor, OraclePredictor, SequenceScorer};
use stacklab::lang::{ProfileAction, Task};
use stacklab::nn::{InputEncoding, ModelSpec, StackRnn};
use stacklab::stability::*;

fn curve(ts: &[f64], f: impl Fn(f64) -> f64) -> LossCurve {
    LossCurve::from_pairs(&ts.iter().map(|&t| (t, f(t))).collect::<Vec<_>>()).unwrap()
}

fn curve_se(ts: &[f64], se: f64, f: impl Fn(f64) -> f64) -> LossCurve {
    LossCurve::new(
        ts.iter()
            .map(|&t| CurvePoint { length: t, loss: f(t), stderr: se, n: 100 })
            .collect(),
    )
    .unwrap()
}

const SWEEP: [f64; 8] = [50.0, 75.0, 100.0, 150.0, 200.0, 250.0, 300.0, 400.0];

#[test]
fn fit_recovers_three_halves_power() {
    let c = curve(&[50.0, 100.0, 200.0, 400.0], |t| 2.0 * t.powf(1.5) + 1.0);
    let g = growth_fit(&c, &FitOptions::default()).unwrap();
    assert!((g.b - 1.5).abs() <= 0.1, "{g:?}");
    assert!(g.a >= 0.0 && g.c >= 0.0);
}

#[test]
fn fit_constant_is_sublinear() {
    let c = curve(&SWEEP, |_| 0.7);
    let g = growth_fit(&c, &FitOptions::default()).unwrap();
    assert!(g.a.abs() < 1e-9, "{g:?}");
    assert_eq!(g.class, GrowthClass::SubLinear);
    assert!((g.c - 0.7).abs() < 1e-12);
}

#[test]
fn fit_linear() {
    let c = curve(&SWEEP, |t| 3.0 * t);
    let g = growth_fit(&c, &FitOptions::default()).unwrap();
    assert!((g.b - 1.0).abs() <= 0.1, "{g:?}");
}

#[test]
fn fit_rejects_short_or_negative() {
    let c = curve(&[1.0, 2.0, 3.0], |t| t);
    assert!(matches!(
        growth_fit(&c, &FitOptions::default()),
        Err(StabilityError::TooFewPoints { .. })
    ));
}

#[test]
fn fit_at_search_boundary_is_nonconvergent() {
    // growth steeper than the largest exponent searched
    let c = curve(&SWEEP, |t| (t / 100.0).powi(7));
    let e = growth_fit(&c, &FitOptions::default()).unwrap_err();
    assert!(matches!(e, StabilityError::NonConvergent(_)), "{e}");
    let r = StabilityReport::assess(&c, &FitOptions::default(), &ReportInputs::default()).unwrap();
    assert_eq!(r.verdict, Verdict::Inconclusive);
    assert!(r.growth.is_none() && r.growth_error.is_some());
}

#[test]
fn noisy_recovery_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ok = 0;
    let trials = 100;
    let sweep: Vec<f64> = default_sweep().iter().map(|&t| t as f64).collect();
    for i in 0..trials {
        let b: f64 = [0.0, 1.0, 1.5, 2.0][i % 4];
        let a = rng.random_range(0.5..3.0);
        let c = rng.random_range(0.0..1.0);
        let pts: Vec<(f64, f64)> = sweep
            .iter()
            .map(|&t| {
                let e: f64 = StandardNormal.sample(&mut rng);
                (t, (a * t.powf(b) + c) * (1.0 + 0.05 * e))
            })
            .collect();
        let curve = LossCurve::from_pairs(&pts).unwrap();
        let opts = FitOptions { seed: i as u64, bootstrap: 0, ..FitOptions::default() };
        if let Ok(g) = growth_fit(&curve, &opts) {
            if (g.b - b).abs() <= 0.1 {
                ok += 1;
            }
        }
    }
    println!("recovered {ok}/{trials}");
    assert!(ok >= 95, "recovered {ok}/{trials}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn noiseless_recovery(a in 0.05f64..5.0, b in 0.3f64..2.5, c in 0.0f64..2.0) {
        let cv = curve(&SWEEP, |t| a * t.powf(b) + c);
        let opts = FitOptions { bootstrap: 0, ..FitOptions::default() };
        let g = growth_fit(&cv, &opts).unwrap();
        prop_assert!((g.b - b).abs() <= 1e-3 * b, "b {} vs {}", g.b, b);
        prop_assert!((g.a - a).abs() <= 1e-3 * a, "a {} vs {}", g.a, a);
        let scale = a * 400f64.powf(b);
        prop_assert!((g.c - c).abs() <= 1e-3 * c.max(1e-3 * scale), "c {} vs {}", g.c, c);
    }

    #[test]
    fn relabel_invariance(losses in prop::collection::vec(0.0f64..3.0, 2..8),
                          other in prop::collection::vec(0.0f64..3.0, 8),
                          ses in prop::collection::vec(0.0f64..0.2, 8),
                          shift in 1.0f64..50.0, power in 0.5f64..3.0) {
        let n = losses.len();
        let ts: Vec<f64> = (0..n).map(|i| 50.0 + 25.0 * i as f64).collect();
        // any strictly increasing relabeling of the buckets
        let us: Vec<f64> = ts.iter().map(|t| t.powf(power) + shift).collect();
        let mk = |xs: &[f64], ys: &[f64]| LossCurve::new(
            xs.iter().zip(ys).zip(&ses).map(|((&length, &loss), &stderr)| CurvePoint { length, loss, stderr, n: 10 }).collect()
        ).unwrap();
        let (a1, b1) = (mk(&ts, &losses), mk(&ts, &other[..n]));
        let (a2, b2) = (mk(&us, &losses), mk(&us, &other[..n]));
        let idx = |c: &LossCurve, w: Option<Window>| w.map(|w| {
            let p = |x: f64| c.points.iter().position(|q| q.length == x).unwrap();
            (p(w.t_low), p(w.t_high))
        });
        prop_assert_eq!(idx(&a1, advantage_window(&a1, &b1).unwrap()), idx(&a2, advantage_window(&a2, &b2).unwrap()));
        let ends = |c: &LossCurve| (
            BinSummary { loss: c.points[0].loss, accuracy: None },
            BinSummary { loss: c.points[n - 1].loss, accuracy: None },
        );
        let (s1, l1) = ends(&a1);
        let (s2, l2) = ends(&a2);
        prop_assert_eq!(degradation_ratio(s1, l1), degradation_ratio(s2, l2));
    }

    #[test]
    fn bound_matches_brute_force(ls in prop::collection::vec(0.0f64..5.0, 1..10), c in 0.0f64..5.0) {
        let cv = LossCurve::from_pairs(&ls.iter().enumerate().map(|(i, &l)| (i as f64, l)).collect::<Vec<_>>()).unwrap();
        let brute = ls.iter().all(|&l| l <= c);
        prop_assert_eq!(error_bound_check(&cv, c).pass, brute);
    }

    #[test]
    fn report_json_round_trip(ls in prop::collection::vec(0.01f64..5.0, 4..8), seed in 0u64..1000) {
        let cv = LossCurve::from_pairs(&ls.iter().enumerate().map(|(i, &l)| (50.0 * (i + 1) as f64, l)).collect::<Vec<_>>()).unwrap();
        let opts = FitOptions { seed, bootstrap: 20, ..FitOptions::default() };
        let r = StabilityReport::assess(&cv, &opts, &ReportInputs::default()).unwrap();
        let back = StabilityReport::from_json(&r.to_json()).unwrap();
        prop_assert_eq!(&back, &r);
        let again = StabilityReport::assess(&cv, &opts, &ReportInputs::default()).unwrap();
        prop_assert_eq!(again, r);
    }
}

#[test]
fn crossing_curves_window_starts_past_crossing() {
    let ts = [50.0, 100.0, 150.0, 200.0, 250.0, 300.0];
    let a = curve_se(&ts, 0.01, |t| 0.01 * t + 0.5);
    let b = curve_se(&ts, 0.01, |t| 2.0 * (t / 150.0).powi(2));
    let w = advantage_window(&a, &b).unwrap().unwrap();
    assert_eq!((w.t_low, w.t_high), (200.0, 300.0));
}

#[test]
fn chance_plateau_is_random_equivalent() {
    let trained = curve_se(&[70.0, 150.0, 300.0], 0.01, |_| 0.50);
    let chance = curve_se(&[70.0, 150.0, 300.0], 0.0, |_| 0.50);
    assert!(random_equivalence(&trained, &chance).unwrap().equivalent);
}

#[test]
fn verdict_rules() {
    let c = curve(&SWEEP, |_| 0.3);
    let flat = StabilityReport::assess(&c, &FitOptions::default(), &ReportInputs::default()).unwrap();
    assert_eq!(flat.verdict, Verdict::Stable);
    let c = curve(&SWEEP, |t| 1e-4 * t.powf(2.0) + 0.1);
    let sup = StabilityReport::assess(&c, &FitOptions::default(), &ReportInputs::default()).unwrap();
    assert_eq!(sup.growth.as_ref().unwrap().class, GrowthClass::SuperLinear);
    assert_eq!(sup.verdict, Verdict::Unstable);
    let inputs = ReportInputs {
        short: Some(BinSummary { loss: 0.3, accuracy: Some(0.98) }),
        long: Some(BinSummary { loss: 0.3, accuracy: Some(0.75) }),
        ..Default::default()
    };
    let c = curve(&SWEEP, |_| 0.3);
    let deg = StabilityReport::assess(&c, &FitOptions::default(), &inputs).unwrap();
    assert_eq!(deg.verdict, Verdict::Unstable);
}

#[test]
fn zero_flips_change_nothing() {
    let t = Task::MarkedCopy;
    let strings = vec![t.parse_string("0110#0110").unwrap()];
    let p = perturbation_robustness(&OraclePredictor { task: t }, t, &strings, 0, 1).unwrap();
    assert_eq!(p.mean_abs_delta, 0.0);
    assert_eq!(p.max_abs_delta, 0.0);
}

#[test]
fn oracle_spike_at_mirrored_position() {
    let t = Task::MarkedCopy;
    let s = t.parse_string("0110#0110").unwrap();
    let o = OraclePredictor { task: t };
    let mut f = s.clone();
    f[1] = 0;
    let before = positional_ce(&o, t, &s).unwrap();
    let after = positional_ce(&o, t, &f).unwrap();
    let d: Vec<f64> = after.iter().zip(&before).map(|(a, b)| a - b).collect();
    let peak = (0..d.len()).max_by(|&i, &j| d[i].total_cmp(&d[j])).unwrap();
    assert_eq!(peak, 5 + 1);
    assert!(d[..6].iter().all(|x| x.abs() < 1e-9));
}

fn brute_single_flip(scorer: &dyn SequenceScorer, task: Task, strings: &[Vec<usize>]) -> f64 {
    let ce = |s: &[usize]| {
        let mut inputs = vec![task.eos()];
        inputs.extend_from_slice(s);
        let mut targets = s.to_vec();
        targets.push(task.eos());
        let rows = scorer.score(&inputs).unwrap();
        let mut tot = 0.0;
        for (r, &y) in rows.iter().zip(&targets) {
            let z: f64 = r.iter().map(|v| v.exp()).sum();
            tot += -(r[y].exp() / z).ln();
        }
        tot / targets.len() as f64
    };
    let content: Vec<usize> = (0..task.vocab_size())
        .filter(|&x| x != task.eos() && Some(x) != task.marker())
        .collect();
    let mut per = Vec::new();
    for s in strings {
        let base = ce(s);
        let mut ds = Vec::new();
        for p in 0..s.len() / 2 {
            if Some(s[p]) == task.marker() {
                continue;
            }
            for &x in &content {
                if x != s[p] {
                    let mut t = s.clone();
                    t[p] = x;
                    ds.push(ce(&t) - base);
                }
            }
        }
        if !ds.is_empty() {
            per.push(ds.iter().sum::<f64>() / ds.len() as f64);
        }
    }
    per.iter().sum::<f64>() / per.len() as f64
}

#[test]
fn exhaustive_flip_matches_brute_force() {
    for task in [Task::MarkedCopy, Task::Count3, Task::MarkedReverseAndCopy] {
        let strings = stacklab::lang::sample(task, &stacklab::lang::SampleSpec::new(3, 12, 20, 4)).unwrap();
        let o = OraclePredictor { task };
        let e = exhaustive_single_flip(&o, task, &strings).unwrap();
        let brute = brute_single_flip(&o, task, &strings);
        assert!((e.mean_delta - brute).abs() < 1e-9, "{task}: {} vs {brute}", e.mean_delta);
        // the sampled estimate converges to the exhaustive mean
        let many: Vec<Vec<usize>> = strings.iter().cycle().take(4000).cloned().collect();
        let r = perturbation_robustness(&o, task, &many, 1, 11).unwrap();
        assert!((r.mean_delta - e.mean_delta).abs() < 0.05 * e.mean_delta.abs().max(1.0), "{task}");
    }
}

#[test]
fn short_strings_are_skipped() {
    let t = Task::MarkedCopy;
    let strings = vec![t.parse_string("#").unwrap(), t.parse_string("01#01").unwrap()];
    let p = perturbation_robustness(&OraclePredictor { task: t }, t, &strings, 2, 0).unwrap();
    assert_eq!((p.n_scored, p.n_skipped), (1, 1));
}

fn stack_model(task: Task, act_bias: [f32; 3]) -> StackRnn {
    let spec = ModelSpec::from_name("jm-4", 8, task.vocab_size(), InputEncoding::OneHot).unwrap();
    let mut m = StackRnn::new(spec, 3).unwrap();
    for p in m.params_mut() {
        if p.name.ends_with("w_act") {
            p.tensor.data_mut().fill(0.0);
        }
        if p.name.ends_with("b_act") {
            p.tensor.data_mut().copy_from_slice(&act_bias);
        }
    }
    m
}

#[test]
fn push_everywhere_on_a_block() {
    let t = Task::Count3;
    let m = stack_model(t, [10.0, 0.0, 0.0]);
    let s = t.parse_string("aaabbbccc").unwrap();
    let (profile, _) = t.reference_profile(&s);
    let a_only: Vec<ProfileAction> = profile
        .iter()
        .enumerate()
        .map(|(i, &p)| if s[i] == 0 { p } else { ProfileAction::Unconstrained })
        .collect();
    let mut inputs = vec![t.eos()];
    inputs.extend(&s);
    let acts: Vec<[f64; 3]> = m.trace(&inputs).unwrap().actions.iter().map(|a| a[0]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(action_agreement(&acts, &a_only, &mut rng), (3, 3));
}

#[test]
fn uniform_actions_agree_a_third() {
    let t = Task::Count3;
    let m = stack_model(t, [0.0; 3]);
    let strings = stacklab::lang::sample(t, &stacklab::lang::SampleSpec::new(6, 30, 500, 2)).unwrap();
    let r = stack_action_agreement(&m, t, &strings, 5).unwrap();
    assert!((r - 1.0 / 3.0).abs() <= 0.05, "{r}");
}

#[test]
fn agreement_guards() {
    let t = Task::Count3;
    let spec = ModelSpec::from_name("lstm", 4, 4, InputEncoding::OneHot).unwrap();
    let lstm = StackRnn::<f32>::new(spec, 0).unwrap();
    let s = vec![t.parse_string("abc").unwrap()];
    assert!(matches!(stack_action_agreement(&lstm, t, &s, 0), Err(StabilityError::NoStack)));
    let m = stack_model(t, [0.0; 3]);
    assert!(matches!(
        stack_action_agreement(&m, t, &[], 0),
        Err(StabilityError::NoConstrainedPositions)
    ));
    let u = Task::UnmarkedCopy;
    let mu = stack_model(u, [0.0; 3]);
    assert!(matches!(stack_action_agreement(&mu, u, &s, 0), Err(StabilityError::NoProfile(_))));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(action_agreement(&[[1.0, 0.0, 0.0]; 3], &[ProfileAction::Unconstrained; 2], &mut rng), (0, 0));
}

#[test]
fn coin_flip_accuracy_near_half() {
    let t = Task::MarkedCopy;
    let bin = stacklab::eval::BinSpec::new("b", 40, 100);
    let strings = stacklab::lang::sample(t, &stacklab::lang::SampleSpec::new(40, 100, 200, 9)).unwrap();
    let coin = CoinFlipPredictor { vocab: 4, symbols: vec![0, 1], seed: 1 };
    let m = stacklab::eval::evaluate_strings(&coin, t, &bin, &strings).unwrap();
    assert!((m.accuracy.unwrap() - 0.5).abs() <= 0.02, "{:?}", m.accuracy);
}

#[test]
fn hidden_noise_zero_sigma_is_exact() {
    let t = Task::Count3;
    let m = stack_model(t, [0.0; 3]);
    let strings = vec![t.parse_string("aabbcc").unwrap()];
    let p = hidden_noise_robustness(&m, t, &strings, 0.0, 1).unwrap();
    assert_eq!(p.max_abs_delta, 0.0);
    let p = hidden_noise_robustness(&m, t, &strings, 0.5, 1).unwrap();
    assert!(p.max_abs_delta > 0.0);
}
