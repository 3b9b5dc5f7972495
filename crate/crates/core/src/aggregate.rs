//! Node functions that reduce a neuron's incoming edge activations to one value.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{KanError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    Sum,
    Mean,
    Std,
    Var,
    Median,
    Norm,
    Min,
    Max,
    Multiply,
}

impl Aggregator {
    pub const ALL: [Aggregator; 9] = [
        Aggregator::Sum,
        Aggregator::Mean,
        Aggregator::Std,
        Aggregator::Var,
        Aggregator::Median,
        Aggregator::Norm,
        Aggregator::Min,
        Aggregator::Max,
        Aggregator::Multiply,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Aggregator::Sum => "sum",
            Aggregator::Mean => "mean",
            Aggregator::Std => "std",
            Aggregator::Var => "var",
            Aggregator::Median => "median",
            Aggregator::Norm => "norm",
            Aggregator::Min => "min",
            Aggregator::Max => "max",
            Aggregator::Multiply => "multiply",
        }
    }

    pub fn apply(self, values: &[f64]) -> Result<f64> {
        aggregate(values, self)
    }

    pub fn backward(self, values: &[f64], upstream: f64) -> Result<Vec<f64>> {
        aggregate_backward(values, self, upstream)
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Aggregator {
    type Err = KanError;

    fn from_str(s: &str) -> Result<Self> {
        Aggregator::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| KanError::invalid(format!("unknown aggregator `{s}`")))
    }
}

pub fn aggregate(values: &[f64], kind: Aggregator) -> Result<f64> {
    if values.is_empty() {
        return Err(KanError::invalid("cannot aggregate an empty vector"));
    }
    Ok(forward_unchecked(values, kind))
}

/// Subgradient of [`aggregate`] with respect to each input, times `upstream`.
pub fn aggregate_backward(values: &[f64], kind: Aggregator, upstream: f64) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(KanError::invalid("cannot aggregate an empty vector"));
    }
    let mut grad = vec![0.0; values.len()];
    backward_into(values, kind, upstream, &mut grad);
    Ok(grad)
}

pub(crate) fn forward_unchecked(v: &[f64], kind: Aggregator) -> f64 {
    let n = v.len() as f64;
    match kind {
        Aggregator::Sum => v.iter().sum(),
        Aggregator::Mean => v.iter().sum::<f64>() / n,
        Aggregator::Var => variance(v),
        Aggregator::Std => variance(v).sqrt(),
        Aggregator::Median => {
            let order = sorted_order(v);
            let m = v.len();
            if m % 2 == 1 {
                v[order[m / 2]]
            } else {
                0.5 * (v[order[m / 2 - 1]] + v[order[m / 2]])
            }
        }
        Aggregator::Norm => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        Aggregator::Min => v[arg_extreme(v, |a, b| a < b)],
        Aggregator::Max => v[arg_extreme(v, |a, b| a > b)],
        Aggregator::Multiply => v.iter().product(),
    }
}

/// Writes the subgradient into `grad` (overwriting it).
pub(crate) fn backward_into(v: &[f64], kind: Aggregator, upstream: f64, grad: &mut [f64]) {
    let m = v.len();
    let n = m as f64;
    grad.fill(0.0);
    match kind {
        Aggregator::Sum => grad.fill(upstream),
        Aggregator::Mean => grad.fill(upstream / n),
        Aggregator::Var => {
            let mean = v.iter().sum::<f64>() / n;
            for (g, x) in grad.iter_mut().zip(v) {
                *g = 2.0 * (x - mean) * upstream / n;
            }
        }
        Aggregator::Std => {
            let mean = v.iter().sum::<f64>() / n;
            let std = variance(v).sqrt();
            if std > 0.0 {
                for (g, x) in grad.iter_mut().zip(v) {
                    *g = (x - mean) * upstream / (n * std);
                }
            }
        }
        Aggregator::Norm => {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                for (g, x) in grad.iter_mut().zip(v) {
                    *g = x * upstream / norm;
                }
            }
        }
        Aggregator::Median => {
            let order = sorted_order(v);
            if m % 2 == 1 {
                grad[order[m / 2]] = upstream;
            } else {
                grad[order[m / 2 - 1]] += 0.5 * upstream;
                grad[order[m / 2]] += 0.5 * upstream;
            }
        }
        Aggregator::Min => grad[arg_extreme(v, |a, b| a < b)] = upstream,
        Aggregator::Max => grad[arg_extreme(v, |a, b| a > b)] = upstream,
        Aggregator::Multiply => {
            // prefix/suffix products keep this exact when some inputs are zero
            let mut prefix = 1.0;
            for (g, x) in grad.iter_mut().zip(v) {
                *g = prefix;
                prefix *= x;
            }
            let mut suffix = 1.0;
            for (g, x) in grad.iter_mut().zip(v).rev() {
                *g *= suffix * upstream;
                suffix *= x;
            }
        }
    }
}

/// Population variance.
fn variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

/// First index whose value beats every earlier one under `better`.
fn arg_extreme(v: &[f64], better: impl Fn(f64, f64) -> bool) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if better(x, v[best]) {
            best = i;
        }
    }
    best
}

/// Indices sorted by value; equal values keep their original order.
fn sorted_order(v: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn agg(v: &[f64], k: Aggregator) -> f64 {
        aggregate(v, k).unwrap()
    }

    #[test]
    fn forward_examples() {
        assert_eq!(agg(&[1.0, 2.0, 3.0], Aggregator::Sum), 6.0);
        assert_eq!(agg(&[2.0, 4.0], Aggregator::Mean), 3.0);
        assert_eq!(agg(&[1.0, 3.0], Aggregator::Std), 1.0);
        assert_eq!(agg(&[3.0, 4.0], Aggregator::Norm), 5.0);
        assert_eq!(agg(&[2.0, 3.0, 4.0], Aggregator::Multiply), 24.0);
        assert_eq!(agg(&[1.0, 2.0, 3.0, 4.0], Aggregator::Median), 2.5);
        assert_eq!(agg(&[3.0, 1.0, 2.0], Aggregator::Median), 2.0);
        assert_eq!(agg(&[3.0, -1.0, 2.0], Aggregator::Min), -1.0);
        assert_eq!(agg(&[3.0, -1.0, 2.0], Aggregator::Max), 3.0);
        assert_eq!(agg(&[1.0, 3.0], Aggregator::Var), 1.0);
        assert_eq!(agg(&[7.0], Aggregator::Var), 0.0);
    }

    #[test]
    fn empty_input_is_rejected() {
        for k in Aggregator::ALL {
            assert!(aggregate(&[], k).is_err());
            assert!(aggregate_backward(&[], k, 1.0).is_err());
        }
    }

    #[test]
    fn backward_examples() {
        assert_eq!(aggregate_backward(&[5.0, 7.0], Aggregator::Mean, 2.0).unwrap(), vec![1.0, 1.0]);
        assert_eq!(
            aggregate_backward(&[1.0, 3.0, 2.0], Aggregator::Max, 1.0).unwrap(),
            vec![0.0, 1.0, 0.0]
        );
        assert_eq!(
            aggregate_backward(&[2.0, 1.0, 1.0], Aggregator::Min, 3.0).unwrap(),
            vec![0.0, 3.0, 0.0]
        );
        assert_eq!(
            aggregate_backward(&[4.0, 1.0, 3.0, 2.0], Aggregator::Median, 1.0).unwrap(),
            vec![0.0, 0.0, 0.5, 0.5]
        );
        assert_eq!(
            aggregate_backward(&[2.0, 0.0, 4.0], Aggregator::Multiply, 1.0).unwrap(),
            vec![0.0, 8.0, 0.0]
        );
    }

    #[test]
    fn degenerate_points_give_zero_gradients() {
        for k in [Aggregator::Std, Aggregator::Norm] {
            let g = aggregate_backward(&[0.0, 0.0, 0.0], k, 1.0).unwrap();
            assert!(g.iter().all(|x| *x == 0.0));
        }
        let g = aggregate_backward(&[2.5, 2.5], Aggregator::Std, 1.0).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn names_round_trip() {
        for k in Aggregator::ALL {
            assert_eq!(k.name().parse::<Aggregator>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.name()));
        }
        assert!("avg".parse::<Aggregator>().is_err());
    }

    fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-3.0f64..3.0, 1..9)
    }

    proptest! {
        #[test]
        fn algebraic_identities(v in vec_strategy(), c in -2.0f64..2.0, alpha in -2.0f64..2.0) {
            let n = v.len() as f64;
            prop_assert_eq!(agg(&v, Aggregator::Mean), agg(&v, Aggregator::Sum) / n);
            let std = agg(&v, Aggregator::Std);
            prop_assert!((agg(&v, Aggregator::Var) - std * std).abs() < 1e-12);
            let sq: f64 = v.iter().map(|x| x * x).sum();
            prop_assert!((agg(&v, Aggregator::Norm).powi(2) - sq).abs() < 1e-10);

            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            prop_assert!((agg(&shifted, Aggregator::Mean) - agg(&v, Aggregator::Mean) - c).abs() < 1e-12);
            prop_assert!((agg(&shifted, Aggregator::Std) - std).abs() < 1e-9);
            let scaled: Vec<f64> = v.iter().map(|x| x * alpha).collect();
            prop_assert!((agg(&scaled, Aggregator::Sum) - alpha * agg(&v, Aggregator::Sum)).abs() < 1e-12);
        }

        #[test]
        fn smooth_kinds_match_finite_differences(v in prop::collection::vec(0.2f64..2.0, 2..7), up in -2.0f64..2.0) {
            // strictly positive, spread-out inputs keep Std/Norm away from their singular points
            let mut v = v;
            for (i, x) in v.iter_mut().enumerate() {
                *x += 0.5 * i as f64;
            }
            let h = 1e-6;
            for k in [Aggregator::Sum, Aggregator::Mean, Aggregator::Std, Aggregator::Var, Aggregator::Norm, Aggregator::Multiply] {
                let g = aggregate_backward(&v, k, up).unwrap();
                for i in 0..v.len() {
                    let mut p = v.clone();
                    p[i] += h;
                    let mut m = v.clone();
                    m[i] -= h;
                    let fd = up * (agg(&p, k) - agg(&m, k)) / (2.0 * h);
                    let scale = fd.abs().max(g[i].abs()).max(1e-8);
                    prop_assert!((fd - g[i]).abs() / scale < 1e-4 || (fd - g[i]).abs() < 1e-8,
                        "{} i={} fd={} an={}", k, i, fd, g[i]);
                }
            }
        }

        #[test]
        fn piecewise_kinds_match_directional_derivative(v in prop::collection::vec(-3.0f64..3.0, 1..8), dir in prop::collection::vec(-1.0f64..1.0, 8)) {
            // ties make min/max/median non-differentiable; skip those draws
            let mut sorted = v.clone();
            sorted.sort_by(f64::total_cmp);
            prop_assume!(sorted.windows(2).all(|w| w[1] - w[0] > 1e-3));
            let h = 1e-7;
            for k in [Aggregator::Min, Aggregator::Max, Aggregator::Median] {
                let g = aggregate_backward(&v, k, 1.0).unwrap();
                let p: Vec<f64> = v.iter().zip(&dir).map(|(x, d)| x + h * d).collect();
                let fd = (agg(&p, k) - agg(&v, k)) / h;
                let an: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
                prop_assert!((fd - an).abs() < 1e-5, "{} fd={} an={}", k, fd, an);
            }
        }
    }

    #[test]
    fn multiply_backward_matches_brute_product() {
        let v = [1.5, -0.5, 2.0, 0.25];
        let g = aggregate_backward(&v, Aggregator::Multiply, 2.0).unwrap();
        for i in 0..v.len() {
            let p: f64 = v.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, x)| x).product();
            assert_relative_eq!(g[i], 2.0 * p, epsilon = 1e-14);
        }
    }
}
