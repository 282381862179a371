use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LangError, Task};

/// Length range (inclusive, end-of-sequence excluded), count and seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub min_len: usize,
    pub max_len: usize,
    pub count: usize,
    pub seed: u64,
}

impl SampleSpec {
    pub fn new(min_len: usize, max_len: usize, count: usize, seed: u64) -> Self {
        Self {
            min_len,
            max_len,
            count,
            seed,
        }
    }
}

/// Draws `spec.count` members: a length uniformly from the attainable
/// lengths in range, then a member of that length uniformly.
pub fn sample(task: Task, spec: &SampleSpec) -> Result<Vec<Vec<usize>>, LangError> {
    if spec.min_len > spec.max_len {
        return Err(LangError::InvalidSpec(format!(
            "min_len {} > max_len {}",
            spec.min_len, spec.max_len
        )));
    }
    let lengths = task.attainable_lengths(spec.min_len, spec.max_len);
    if lengths.is_empty() {
        let below = (0..spec.min_len)
            .rev()
            .find(|&l| task.param_for_length(l).is_some());
        let above = (spec.max_len + 1..spec.max_len + 8).find(|&l| task.param_for_length(l).is_some());
        return Err(LangError::NoAttainableLength {
            task,
            min: spec.min_len,
            max: spec.max_len,
            below,
            above,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..spec.count)
        .map(|_| {
            let len = lengths[rng.random_range(0..lengths.len())];
            let k = task.param_for_length(len).expect("attainable");
            let w: Vec<usize> = match task {
                Task::Count3 => Vec::new(),
                _ => (0..k).map(|_| rng.random_range(0..2)).collect(),
            };
            task.build(k, &w)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lengths_in_range_and_members() {
        for task in Task::ALL {
            let spec = SampleSpec::new(40, 80, 200, 7);
            for s in sample(task, &spec).unwrap() {
                assert!((40..=80).contains(&s.len()));
                assert!(task.membership(&s), "{task}: {}", task.render(&s));
            }
        }
    }

    #[test]
    fn same_seed_same_samples() {
        let spec = SampleSpec::new(10, 30, 50, 99);
        assert_eq!(
            sample(Task::MarkedCopy, &spec).unwrap(),
            sample(Task::MarkedCopy, &spec).unwrap()
        );
    }

    #[test]
    fn unattainable_range_reports_neighbours() {
        let err = sample(Task::Count3, &SampleSpec::new(4, 5, 1, 0)).unwrap_err();
        match err {
            LangError::NoAttainableLength { below, above, .. } => {
                assert_eq!(below, Some(3));
                assert_eq!(above, Some(6));
            }
            other => panic!("unexpected {other}"),
        }
    }
}
