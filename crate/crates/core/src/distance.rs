//! The one distance definition shared by the ranking loss and the index.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Euclidean,
    SquaredEuclidean,
}

thread_local! {
    static EVALUATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of distance evaluations performed on this thread so far.
pub fn evaluations() -> u64 {
    EVALUATIONS.with(Cell::get)
}

pub fn reset_evaluations() {
    EVALUATIONS.with(|c| c.set(0));
}

fn squared(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

pub fn between(metric: Metric, a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    EVALUATIONS.with(|c| c.set(c.get() + 1));
    match metric {
        Metric::Euclidean => squared(a, b).sqrt(),
        Metric::SquaredEuclidean => squared(a, b),
    }
}

/// Gradient of `between(metric, a, b)` with respect to `a` (the gradient
/// with respect to `b` is its negation). Zero at `a == b` for Euclidean.
pub fn gradient(metric: Metric, a: &[f64], b: &[f64]) -> Vec<f64> {
    match metric {
        Metric::Euclidean => {
            let d = squared(a, b).sqrt();
            if d == 0.0 {
                vec![0.0; a.len()]
            } else {
                a.iter().zip(b).map(|(x, y)| (x - y) / d).collect()
            }
        }
        Metric::SquaredEuclidean => a.iter().zip(b).map(|(x, y)| 2.0 * (x - y)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn euclidean_3_4_5() {
        assert_eq!(between(Metric::Euclidean, &[0.0, 0.0], &[3.0, 4.0]), 5.0);
        assert_eq!(between(Metric::SquaredEuclidean, &[0.0, 0.0], &[3.0, 4.0]), 25.0);
        assert_eq!(gradient(Metric::Euclidean, &[3.0, 4.0], &[0.0, 0.0]), vec![0.6, 0.8]);
        assert_eq!(gradient(Metric::Euclidean, &[1.0], &[1.0]), vec![0.0]);
    }

    #[test]
    fn counter_tracks_calls() {
        reset_evaluations();
        for _ in 0..7 {
            between(Metric::Euclidean, &[1.0], &[2.0]);
        }
        assert_eq!(evaluations(), 7);
    }
}
