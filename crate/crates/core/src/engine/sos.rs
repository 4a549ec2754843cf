//! Stochastic outlier selection over 2-D points.
//!
//! Each point spreads a Gaussian affinity over all other points, with a
//! per-point precision chosen so that the normalised affinities (binding
//! probabilities) have the configured perplexity. A point's outlier
//! probability is the chance that no other point binds to it:
//! `phi(i) = prod_{j != i} (1 - b(j, i))`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SosParams {
    pub perplexity: f64,
    /// Accepted absolute error of a row's entropy (nats) against `ln(perplexity)`.
    pub tolerance: f64,
    pub max_iterations: u32,
}

impl Default for SosParams {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            tolerance: 1e-5,
            max_iterations: 100,
        }
    }
}

impl SosParams {
    pub fn validate(&self, window: usize) -> Result<(), String> {
        if !(self.perplexity > 1.0 && self.perplexity < window as f64) {
            return Err(format!(
                "perplexity {} must lie strictly between 1 and the window size {window}",
                self.perplexity
            ));
        }
        if !(self.tolerance > 0.0) {
            return Err(format!("tolerance {} must be positive", self.tolerance));
        }
        if self.max_iterations == 0 {
            return Err("max_iterations must be at least 1".into());
        }
        Ok(())
    }
}

/// True when every point coincides with every other.
pub fn is_degenerate(points: &[[f64; 2]]) -> bool {
    match points.first() {
        Some(p0) => points.iter().all(|p| p == p0),
        None => true,
    }
}

fn squared_distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// Fills `out` with the binding probabilities of one row given its shifted
/// dissimilarities (`min == 0`, `diagonal == NAN`), returning the row entropy.
fn bind_row(shifted: &[f64], beta: f64, out: &mut [f64]) -> f64 {
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for (d, o) in shifted.iter().zip(out.iter_mut()) {
        if d.is_nan() {
            *o = 0.0;
            continue;
        }
        let a = (-beta * d).exp();
        *o = a;
        sum += a;
        weighted += d * a;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    sum.ln() + beta * weighted / sum
}

/// Binding probability matrix, row-major: `b[i * n + j]` is how strongly `i` binds to `j`.
pub fn binding_matrix(points: &[[f64; 2]], params: &SosParams) -> Vec<f64> {
    let n = points.len();
    let mut binding = vec![0.0; n * n];
    if n < 2 {
        return binding;
    }
    let target = params.perplexity.ln();
    let mut shifted = vec![0.0; n];
    for i in 0..n {
        let mut nearest = f64::INFINITY;
        for j in 0..n {
            if j != i {
                let d = squared_distance(points[i], points[j]);
                shifted[j] = d;
                nearest = nearest.min(d);
            }
        }
        let mut total = 0.0;
        for (j, d) in shifted.iter_mut().enumerate() {
            if j == i {
                *d = f64::NAN;
            } else {
                *d -= nearest;
                total += *d;
            }
        }
        let row = &mut binding[i * n..(i + 1) * n];
        if total == 0.0 {
            // every neighbour equidistant: the binding is uniform for any precision
            bind_row(&shifted, 0.0, row);
            continue;
        }
        // bisection on ln(beta) = -ln(2 sigma^2), expanding by e until bracketed
        let mut log_beta = -(total / (n - 1) as f64).ln();
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for _ in 0..params.max_iterations {
            let entropy = bind_row(&shifted, log_beta.exp(), row);
            let diff = entropy - target;
            if diff.abs() < params.tolerance {
                break;
            }
            if diff > 0.0 {
                lo = log_beta;
                log_beta = if hi.is_finite() { 0.5 * (lo + hi) } else { log_beta + 1.0 };
            } else {
                hi = log_beta;
                log_beta = if lo.is_finite() { 0.5 * (lo + hi) } else { log_beta - 1.0 };
            }
        }
        // leave the row at the final precision even if the last step moved it
        bind_row(&shifted, log_beta.exp(), row);
    }
    binding
}

/// Outlier probability of every point.
pub fn outlier_probabilities(points: &[[f64; 2]], params: &SosParams) -> Vec<f64> {
    let n = points.len();
    let binding = binding_matrix(points, params);
    (0..n)
        .map(|j| {
            (0..n)
                .filter(|&i| i != j)
                .map(|i| 1.0 - binding[i * n + j])
                .product::<f64>()
                .clamp(0.0, 1.0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(h: f64) -> SosParams {
        SosParams {
            perplexity: h,
            tolerance: 1e-10,
            max_iterations: 200,
        }
    }

    #[test]
    fn two_identical_points_have_zero_probability() {
        let phi = outlier_probabilities(&[[3.0, 4.0], [3.0, 4.0]], &params(1.5));
        assert_eq!(phi, vec![0.0, 0.0]);
    }

    #[test]
    fn rows_are_distributions_with_target_perplexity() {
        let points: Vec<[f64; 2]> = (0..40)
            .map(|i| [(i * 37 % 101) as f64, (i * 53 % 97) as f64])
            .collect();
        let p = params(10.0);
        let b = binding_matrix(&points, &p);
        let n = points.len();
        for i in 0..n {
            let row = &b[i * n..(i + 1) * n];
            assert_eq!(row[i], 0.0);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            let entropy: f64 = -row.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>();
            assert!((entropy.exp() - 10.0).abs() < 1e-6, "row {i}: {}", entropy.exp());
        }
    }

    #[test]
    fn far_point_is_most_outlying() {
        let mut points: Vec<[f64; 2]> = (0..49)
            .map(|i| [9000.0 + (i % 7) as f64 * 3.0, 9000.0 + (i / 7) as f64 * 3.0])
            .collect();
        points.push([60000.0, 60000.0]);
        let phi = outlier_probabilities(&points, &params(10.0));
        let (argmax, max) = phi
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        assert_eq!(argmax, 49);
        assert!(*max > 0.99);
    }

    fn cloud() -> impl Strategy<Value = Vec<[f64; 2]>> {
        proptest::collection::vec((0u32..50, 0u32..50), 6..16)
            .prop_map(|v| v.into_iter().map(|(x, y)| [x as f64, y as f64]).collect::<Vec<_>>())
            .prop_filter("not all coincident", |v: &Vec<[f64; 2]>| !is_degenerate(v))
    }

    proptest! {
        #[test]
        fn probabilities_are_permutation_invariant(points in cloud(), shift in 1usize..5) {
            let p = params(4.0);
            let phi = outlier_probabilities(&points, &p);
            let mut rotated = points.clone();
            rotated.rotate_left(shift % points.len());
            let rphi = outlier_probabilities(&rotated, &p);
            for (i, v) in phi.iter().enumerate() {
                let j = (i + points.len() - shift % points.len()) % points.len();
                prop_assert!((v - rphi[j]).abs() < 1e-9);
                prop_assert!((0.0..=1.0).contains(v));
            }
        }

        #[test]
        fn duplicates_agree_with_dense_reference(points in cloud(), pick in 0usize..16) {
            let p = params(4.0);
            let mut more = points.clone();
            more.push(points[pick % points.len()]);
            for window in [&points, &more] {
                let pairs: Vec<(f64, f64)> = window.iter().map(|q| (q[0], q[1])).collect();
                let reference = crate::validator::dense::outlier_probabilities(&pairs, 4.0);
                for (a, b) in outlier_probabilities(window, &p).iter().zip(&reference) {
                    prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
                }
            }
        }
    }

    #[test]
    fn duplicate_can_raise_probability() {
        // the other points split their binding between the original and its copy
        let points = [[0.0, 0.0], [3.0, 25.0], [0.0, 0.0], [0.0, 0.0], [18.0, 0.0], [0.0, 20.0], [33.0, 4.0], [6.0, 33.0]];
        let before = outlier_probabilities(&points, &params(4.0))[0];
        let mut more = points.to_vec();
        more.push([0.0, 0.0]);
        let after = outlier_probabilities(&more, &params(4.0))[0];
        assert!((before - 0.233199).abs() < 1e-6, "{before}");
        assert!((after - 0.236174).abs() < 1e-6, "{after}");
    }

    #[test]
    fn degenerate_detection() {
        assert!(is_degenerate(&[[1.0, 1.0]; 5]));
        assert!(!is_degenerate(&[[1.0, 1.0], [1.0, 2.0]]));
    }

    #[test]
    fn parameter_validation() {
        assert!(SosParams::default().validate(500).is_ok());
        assert!(SosParams::default().validate(30).is_err());
        let flat = SosParams {
            perplexity: 1.0,
            ..SosParams::default()
        };
        assert!(flat.validate(500).is_err());
    }
}
