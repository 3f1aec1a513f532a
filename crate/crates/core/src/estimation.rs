//! Debiased histogram estimators and error metrics.
//!
//! Estimates are raw unbiased frequencies: entries may be negative or exceed
//! one. Clamping is left to callers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accounting::FragmentPlan;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("epsilon = {0} makes the estimator degenerate")]
    Degenerate(f64),
    #[error("dimension mismatch: {0}")]
    Format(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, EstimationError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramEstimate {
    /// Estimated fraction of respondents holding each value.
    pub h_hat: Vec<f64>,
    pub n: u64,
    pub epsilon_used: f64,
}

impl HistogramEstimate {
    pub fn k(&self) -> usize {
        self.h_hat.len()
    }

    /// The estimate in respondent counts.
    pub fn counts(&self) -> Vec<f64> {
        self.h_hat.iter().map(|h| h * self.n as f64).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub linf: f64,
    pub rmse: f64,
    pub topk_recall: f64,
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(EstimationError::Degenerate(epsilon));
    }
    Ok(())
}

// (S/n) (e^eps + 1)/(e^eps - 1) - 1/(e^eps - 1), written to stay exact as
// eps grows
fn debias(rate: f64, epsilon: f64) -> f64 {
    rate / (epsilon / 2.0).tanh() - 1.0 / epsilon.exp_m1()
}

/// Debias per-attribute sums of k-RAPPOR bits from `n` respondents.
pub fn estimate_histogram(sums: &[u64], n: u64, epsilon: f64) -> Result<HistogramEstimate> {
    check_epsilon(epsilon)?;
    if n == 0 {
        return Err(EstimationError::InvalidArgument("n must be positive".into()));
    }
    if sums.is_empty() {
        return Err(EstimationError::Format("empty sums vector".into()));
    }
    if let Some(&s) = sums.iter().find(|&&s| s > n) {
        return Err(EstimationError::InvalidArgument(format!(
            "sum {s} exceeds the respondent count {n}"
        )));
    }
    let nf = n as f64;
    Ok(HistogramEstimate {
        h_hat: sums.iter().map(|&s| debias(s as f64 / nf, epsilon)).collect(),
        n,
        epsilon_used: epsilon,
    })
}

/// Estimate from a `tau x k` matrix of fragment sums: debias each fragment
/// row at `epsilon_fragment`, average the rows with equal weight, then
/// debias the backstop layer at `epsilon_backstop`.
pub fn estimate_from_fragments(fragment_sums: &[Vec<u64>], n: u64, plan: &FragmentPlan) -> Result<HistogramEstimate> {
    check_epsilon(plan.epsilon_fragment)?;
    check_epsilon(plan.epsilon_backstop)?;
    if fragment_sums.len() != plan.tau as usize {
        return Err(EstimationError::Format(format!(
            "expected {} fragment rows, got {}",
            plan.tau,
            fragment_sums.len()
        )));
    }
    let k = fragment_sums[0].len();
    if k == 0 || fragment_sums.iter().any(|row| row.len() != k) {
        return Err(EstimationError::Format("fragment rows differ in length".into()));
    }
    let mut backstop_rate = vec![0.0; k];
    for row in fragment_sums {
        let est = estimate_histogram(row, n, plan.epsilon_fragment)?;
        for (acc, h) in backstop_rate.iter_mut().zip(est.h_hat) {
            *acc += h;
        }
    }
    let tau = plan.tau as f64;
    Ok(HistogramEstimate {
        h_hat: backstop_rate
            .into_iter()
            .map(|b| debias(b / tau, plan.epsilon_backstop))
            .collect(),
        n,
        epsilon_used: plan.epsilon_backstop,
    })
}

/// Estimator for the sampled-attribute variant, where each respondent
/// reports one uniformly chosen attribute: `sums[j]` set bits out of
/// `reports[j]` reports on attribute `j`,
/// `h_j = (k/n) (S_j - n_j p) / (1 - 2p)`.
pub fn estimate_sampled(sums: &[u64], reports: &[u64], n: u64, epsilon: f64) -> Result<HistogramEstimate> {
    check_epsilon(epsilon)?;
    if sums.len() != reports.len() || sums.is_empty() {
        return Err(EstimationError::Format(format!(
            "{} sums against {} report counts",
            sums.len(),
            reports.len()
        )));
    }
    if n == 0 {
        return Err(EstimationError::InvalidArgument("n must be positive".into()));
    }
    let k = sums.len() as f64;
    let p = 1.0 / (1.0 + epsilon.exp());
    let gain = (epsilon / 2.0).tanh();
    Ok(HistogramEstimate {
        h_hat: sums
            .iter()
            .zip(reports)
            .map(|(&s, &m)| k / n as f64 * (s as f64 - m as f64 * p) / gain)
            .collect(),
        n,
        epsilon_used: epsilon,
    })
}

/// Indices of the `k` largest values, ties broken toward the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// l-infinity error, RMSE (in the units of the inputs) and top-k recall.
pub fn error_metrics(estimate: &[f64], truth: &[f64], topk: usize) -> Result<ErrorReport> {
    if estimate.len() != truth.len() {
        return Err(EstimationError::Format(format!(
            "estimate has {} entries, truth has {}",
            estimate.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(EstimationError::Format("empty vectors".into()));
    }
    let mut linf: f64 = 0.0;
    let mut sq = 0.0;
    for (e, t) in estimate.iter().zip(truth) {
        let d = (e - t).abs();
        linf = linf.max(d);
        sq += d * d;
    }
    let topk = topk.min(truth.len());
    let topk_recall = if topk == 0 {
        1.0
    } else {
        let mut hit = vec![false; truth.len()];
        for i in top_k_indices(truth, topk) {
            hit[i] = true;
        }
        top_k_indices(estimate, topk).into_iter().filter(|&i| hit[i]).count() as f64 / topk as f64
    };
    Ok(ErrorReport {
        linf,
        rmse: (sq / truth.len() as f64).sqrt(),
        topk_recall,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::randomizers::{aggregate_fragment_sums, aggregate_krappor_sums};
    use crate::RandomStream;

    #[test]
    fn noiseless_limit() {
        let sums = [0, 3, 10, 7];
        let est = estimate_histogram(&sums, 20, 50.0).unwrap();
        for (h, s) in est.h_hat.iter().zip(sums) {
            assert!((h - s as f64 / 20.0).abs() < 1e-15);
        }
        assert!(matches!(
            estimate_histogram(&sums, 20, 0.0),
            Err(EstimationError::Degenerate(_))
        ));
        assert!(estimate_histogram(&[21], 20, 1.0).is_err());
    }

    #[test]
    fn matches_textbook_form() {
        let eps = 1.3f64;
        let e = eps.exp();
        let est = estimate_histogram(&[40], 100, eps).unwrap().h_hat[0];
        let textbook = (1.0 / 100.0) * ((e + 1.0) / (e - 1.0)) * 40.0 - 1.0 / (e - 1.0);
        assert!((est - textbook).abs() < 1e-14);
    }

    #[test]
    fn linear_in_sums() {
        let a = estimate_histogram(&[10, 20], 100, 2.0).unwrap().h_hat;
        let b = estimate_histogram(&[30, 0], 100, 2.0).unwrap().h_hat;
        let ab = estimate_histogram(&[40, 20], 100, 2.0).unwrap().h_hat;
        let c = estimate_histogram(&[0, 0], 100, 2.0).unwrap().h_hat;
        for j in 0..2 {
            assert!((ab[j] - (a[j] + b[j] - c[j])).abs() < 1e-14);
        }
    }

    #[test]
    fn single_item_population() {
        let mut rng = RandomStream::new(11, 0);
        let n = 100_000u64;
        let mut counts = vec![0u64; 16];
        counts[0] = n;
        let eps = 4.0f64;
        let est = estimate_histogram(&aggregate_krappor_sums(&counts, eps, &mut rng).unwrap(), n, eps).unwrap();
        let p = 1.0 / (1.0 + eps.exp());
        let sd = ((eps.exp() + 1.0) / eps.exp_m1()) * (p * (1.0 - p) / n as f64).sqrt();
        assert!((est.h_hat[0] - 1.0).abs() < 4.0 * sd);
        for h in &est.h_hat[1..] {
            assert!(h.abs() < 4.0 * sd);
        }
    }

    #[test]
    fn fragment_estimator_limits() {
        let mut rng = RandomStream::new(12, 0);
        let counts = vec![500u64, 300, 200];
        let plan = FragmentPlan::all_exposed(1, 60.0, 1.5).unwrap();
        let rows = aggregate_fragment_sums(&counts, &plan, &mut rng).unwrap();
        let a = estimate_from_fragments(&rows, 1000, &plan).unwrap();
        let b = estimate_histogram(&rows[0], 1000, 1.5).unwrap();
        for (x, y) in a.h_hat.iter().zip(&b.h_hat) {
            assert!((x - y).abs() < 1e-12);
        }
        let plan = FragmentPlan::all_exposed(5, 1.5, 60.0).unwrap();
        let rows = aggregate_fragment_sums(&counts, &plan, &mut rng).unwrap();
        assert!(rows.iter().all(|r| r == &rows[0]));
        let a = estimate_from_fragments(&rows, 1000, &plan).unwrap();
        let b = estimate_histogram(&rows[0], 1000, 1.5).unwrap();
        for (x, y) in a.h_hat.iter().zip(&b.h_hat) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(estimate_from_fragments(&rows[..3], 1000, &plan).is_err());
    }

    #[test]
    fn metric_examples() {
        let r = error_metrics(&[0.2, 0.8], &[0.2, 0.8], 1).unwrap();
        assert_eq!((r.linf, r.rmse, r.topk_recall), (0.0, 0.0, 1.0));
        let r = error_metrics(&[0.6, 0.4], &[1.0, 0.0], 1).unwrap();
        assert!((r.linf - 0.4).abs() < 1e-15);
        assert!((r.rmse - 0.4).abs() < 1e-15);
        assert_eq!(r.topk_recall, 1.0);
        let r = error_metrics(&[0.4, 0.6], &[1.0, 0.0], 1).unwrap();
        assert_eq!(r.topk_recall, 0.0);
        assert!(error_metrics(&[1.0], &[1.0, 2.0], 1).is_err());
    }

    #[test]
    fn ties_break_toward_lower_index() {
        assert_eq!(top_k_indices(&[1.0, 3.0, 3.0, 0.0], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[2.0, 2.0, 2.0], 1), vec![0]);
    }

    #[test]
    fn sampled_estimator_noiseless() {
        // every respondent holds item 1; with eps large each report is exact
        let est = estimate_sampled(&[0, 25, 0, 0], &[25, 25, 25, 25], 100, 60.0).unwrap();
        assert!((est.h_hat[1] - 1.0).abs() < 1e-12);
        assert!(est.h_hat[0].abs() < 1e-12);
    }
}
