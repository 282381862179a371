mod common;

use common::oracle::{check_task, members};
use proptest::prelude::*;
use stacklab::lang::{sample, SampleSpec, Task};
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn oracle_agreement_short_strings() {
    for task in Task::ALL {
        check_task(task, 8).unwrap();
    }
}

#[test]
fn enumerated_members_pass_membership() {
    for task in Task::ALL {
        for s in members(task, 6) {
            assert!(task.membership(&s), "{task} {s:?}");
        }
    }
}

#[test]
fn length_histogram_is_uniform_over_attainable_lengths() {
    for task in [Task::MarkedCopy, Task::Count3, Task::MarkedReverseAndCopy] {
        let spec = SampleSpec::new(40, 80, 1000, 2024);
        let lengths = task.attainable_lengths(40, 80);
        let mut counts = vec![0f64; lengths.len()];
        for s in sample(task, &spec).unwrap() {
            counts[lengths.iter().position(|&l| l == s.len()).unwrap()] += 1.0;
        }
        let expected = 1000.0 / lengths.len() as f64;
        let stat: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        let dist = ChiSquared::new((lengths.len() - 1) as f64).unwrap();
        let p = 1.0 - dist.cdf(stat);
        assert!(p > 0.01, "{task}: chi2 {stat} p {p}");
    }
}

#[test]
fn copied_content_is_balanced() {
    let spec = SampleSpec::new(40, 80, 500, 3);
    let strings = sample(Task::MarkedCopy, &spec).unwrap();
    let (mut ones, mut total) = (0usize, 0usize);
    for s in &strings {
        let m = s.len() / 2;
        ones += s[..m].iter().filter(|&&x| x == 1).count();
        total += m;
    }
    let frac = ones as f64 / total as f64;
    assert!((frac - 0.5).abs() < 0.02, "fraction of ones {frac}");
}

fn any_task() -> impl Strategy<Value = Task> {
    prop::sample::select(Task::ALL.to_vec())
}

proptest! {
    #[test]
    fn sampled_strings_are_members(task in any_task(), seed in any::<u64>(), lo in 1usize..60, span in 0usize..40) {
        let spec = SampleSpec::new(lo, lo + span, 5, seed);
        if let Ok(strings) = sample(task, &spec) {
            for s in strings {
                prop_assert!(task.membership(&s));
                prop_assert!(s.len() >= lo && s.len() <= lo + span);
            }
        }
    }

    #[test]
    fn corruption_at_determined_position_breaks_membership(
        task in any_task(), seed in any::<u64>(), pick in any::<prop::sample::Index>(), sub in 1usize..4
    ) {
        let s = &sample(task, &SampleSpec::new(6, 30, 1, seed)).unwrap()[0];
        let det: Vec<usize> = task.determined_positions(s).into_iter().filter(|&p| p < s.len()).collect();
        if !det.is_empty() {
            let p = det[pick.index(det.len())];
            let content = task.vocab_size() - 1;
            let mut t = s.clone();
            t[p] = (t[p] + sub % content.max(2)) % content;
            if t[p] != s[p] {
                prop_assert!(!task.membership(&t));
            }
        }
    }

    #[test]
    fn length_congruences(seed in any::<u64>()) {
        let spec = SampleSpec::new(10, 60, 10, seed);
        for s in sample(Task::CountAndCopy, &spec).unwrap() { prop_assert_eq!(s.len() % 3, 0); }
        for s in sample(Task::Count3, &spec).unwrap() { prop_assert_eq!(s.len() % 3, 0); }
        for s in sample(Task::MarkedCopy, &spec).unwrap() { prop_assert_eq!(s.len() % 2, 1); }
    }

    #[test]
    fn members_end_with_forced_eos(task in any_task(), seed in any::<u64>()) {
        let s = &sample(task, &SampleSpec::new(6, 30, 1, seed)).unwrap()[0];
        prop_assert!(task.valid_next(s).contains(&task.eos()));
    }
}
