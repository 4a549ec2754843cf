//! Dense stochastic outlier selection used as the Q2 reference.
//!
//! Affinities are computed in log space from the raw squared distances and
//! each row's variance is found by plain bisection on `ln(sigma^2)` over a
//! fixed bracket, run to machine precision.

const LOG_VAR_BRACKET: (f64, f64) = (-60.0, 60.0);

/// Outlier probability of every point for perplexity `h`.
pub fn outlier_probabilities(points: &[(f64, f64)], h: f64) -> Vec<f64> {
    let n = points.len();
    let d: Vec<Vec<f64>> = points
        .iter()
        .map(|a| {
            points
                .iter()
                .map(|b| (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2))
                .collect()
        })
        .collect();
    let b: Vec<Vec<f64>> = (0..n).map(|i| binding_row(&d[i], i, h)).collect();
    (0..n)
        .map(|j| {
            let mut phi = 1.0;
            for (i, row) in b.iter().enumerate() {
                if i != j {
                    phi *= 1.0 - row[j];
                }
            }
            phi.clamp(0.0, 1.0)
        })
        .collect()
}

fn softmax(d: &[f64], skip: usize, log_var: f64) -> Vec<f64> {
    let scale = 0.5 * (-log_var).exp();
    let logits: Vec<f64> = d
        .iter()
        .enumerate()
        .map(|(j, &x)| if j == skip { f64::NEG_INFINITY } else { -x * scale })
        .collect();
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|&l| (l - top).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

fn binding_row(d: &[f64], i: usize, h: f64) -> Vec<f64> {
    if d.len() < 2 {
        return vec![0.0; d.len()];
    }
    let target = h.ln();
    let (mut lo, mut hi) = LOG_VAR_BRACKET;
    // entropy grows with the variance
    while hi - lo > 1e-13 {
        let mid = 0.5 * (lo + hi);
        let e = entropy(&softmax(d, i, mid));
        if e == target {
            return softmax(d, i, mid);
        }
        if e < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    softmax(d, i, 0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_of_identical_points() {
        assert_eq!(outlier_probabilities(&[(1.0, 1.0), (1.0, 1.0)], 1.5), vec![0.0, 0.0]);
    }

    #[test]
    fn far_point_dominates() {
        let mut pts: Vec<(f64, f64)> = (0..20).map(|i| ((i % 5) as f64, (i / 5) as f64)).collect();
        pts.push((500.0, 500.0));
        let phi = outlier_probabilities(&pts, 5.0);
        let max = phi.iter().copied().fold(0.0, f64::max);
        assert_eq!(phi[20], max);
        assert!(phi.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}
