//! Depth-map evaluation metrics.
//!
//! Standard monocular-depth error measures over masked prediction /
//! ground-truth pairs: absolute relative error, threshold accuracies δ_i at
//! 1.25^i, RMSE in linear and log space, mean log10 error, scale-invariant
//! log error (variance form), and squared relative error.

use crate::error::{QdkError, Result};
use crate::tensor::Tensor;

/// A masked prediction / ground-truth pair, both strictly positive on the
/// mask.
#[derive(Debug, Clone)]
pub struct DepthPair {
    pub prediction: Tensor,
    pub ground_truth: Tensor,
    /// One flag per pixel; false pixels are excluded from every metric.
    pub valid_mask: Vec<bool>,
}

impl DepthPair {
    /// Pair two equally shaped maps, masking out non-positive pixels.
    pub fn new(prediction: Tensor, ground_truth: Tensor) -> Result<Self> {
        if prediction.shape() != ground_truth.shape() {
            return Err(QdkError::Shape(format!(
                "prediction {:?} vs ground truth {:?}",
                prediction.shape(),
                ground_truth.shape()
            )));
        }
        let valid_mask = prediction
            .data()
            .iter()
            .zip(ground_truth.data())
            .map(|(&p, &g)| p > 0.0 && g > 0.0)
            .collect();
        Ok(Self {
            prediction,
            ground_truth,
            valid_mask,
        })
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.prediction.len() {
            return Err(QdkError::Shape("mask length mismatch".into()));
        }
        self.valid_mask = mask;
        Ok(self)
    }

    fn valid_pairs(&self) -> Result<Vec<(f64, f64)>> {
        let pairs: Vec<(f64, f64)> = self
            .prediction
            .data()
            .iter()
            .zip(self.ground_truth.data())
            .zip(&self.valid_mask)
            .filter(|(_, &m)| m)
            .map(|((&p, &g), _)| (p, g))
            .collect();
        if pairs.is_empty() {
            return Err(QdkError::Domain("empty valid mask".into()));
        }
        if let Some(&(p, g)) = pairs.iter().find(|&&(p, g)| p <= 0.0 || g <= 0.0) {
            return Err(QdkError::Domain(format!(
                "non-positive masked depth: prediction {p}, truth {g}"
            )));
        }
        Ok(pairs)
    }
}

/// One row of depth metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRecord {
    pub absrel: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub log10: f64,
    pub silog: f64,
    pub sqrel: f64,
}

impl MetricRecord {
    pub const CSV_HEADER: &'static str =
        "absrel,delta1,delta2,delta3,rmse,rmse_log,log10,silog,sqrel";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
            self.absrel,
            self.delta1,
            self.delta2,
            self.delta3,
            self.rmse,
            self.rmse_log,
            self.log10,
            self.silog,
            self.sqrel
        )
    }
}

/// Evaluate every metric over the masked pixels.
pub fn evaluate(pair: &DepthPair) -> Result<MetricRecord> {
    let pairs = pair.valid_pairs()?;
    let n = pairs.len() as f64;
    let mut absrel = 0.0;
    let mut sqrel = 0.0;
    let mut rmse = 0.0;
    let mut rmse_log = 0.0;
    let mut log10 = 0.0;
    let mut deltas = [0usize; 3];
    let thresholds = [1.25, 1.25f64.powi(2), 1.25f64.powi(3)];
    let log_diffs: Vec<f64> = pairs.iter().map(|&(p, g)| p.ln() - g.ln()).collect();
    for &(p, g) in &pairs {
        let diff = p - g;
        absrel += diff.abs() / g;
        sqrel += diff * diff / g;
        rmse += diff * diff;
        log10 += (p.log10() - g.log10()).abs();
        let ratio = (p / g).max(g / p);
        for (i, &t) in thresholds.iter().enumerate() {
            if ratio < t {
                deltas[i] += 1;
            }
        }
    }
    let mean_d = log_diffs.iter().sum::<f64>() / n;
    // Two-pass variance; the one-pass form cancels catastrophically when the
    // prediction is a constant multiple of the truth.
    let silog_var = log_diffs
        .iter()
        .map(|d| (d - mean_d) * (d - mean_d))
        .sum::<f64>()
        / n;
    for &d in &log_diffs {
        rmse_log += d * d;
    }
    Ok(MetricRecord {
        absrel: absrel / n,
        delta1: deltas[0] as f64 / n,
        delta2: deltas[1] as f64 / n,
        delta3: deltas[2] as f64 / n,
        rmse: (rmse / n).sqrt(),
        rmse_log: (rmse_log / n).sqrt(),
        log10: log10 / n,
        silog: silog_var.sqrt(),
        sqrel: sqrel / n,
    })
}

/// Mean of metric records (e.g. across evaluation images).
pub fn mean_record(records: &[MetricRecord]) -> Option<MetricRecord> {
    if records.is_empty() {
        return None;
    }
    let n = records.len() as f64;
    let mut acc = MetricRecord {
        absrel: 0.0,
        delta1: 0.0,
        delta2: 0.0,
        delta3: 0.0,
        rmse: 0.0,
        rmse_log: 0.0,
        log10: 0.0,
        silog: 0.0,
        sqrel: 0.0,
    };
    for r in records {
        acc.absrel += r.absrel;
        acc.delta1 += r.delta1;
        acc.delta2 += r.delta2;
        acc.delta3 += r.delta3;
        acc.rmse += r.rmse;
        acc.rmse_log += r.rmse_log;
        acc.log10 += r.log10;
        acc.silog += r.silog;
        acc.sqrel += r.sqrel;
    }
    Some(MetricRecord {
        absrel: acc.absrel / n,
        delta1: acc.delta1 / n,
        delta2: acc.delta2 / n,
        delta3: acc.delta3 / n,
        rmse: acc.rmse / n,
        rmse_log: acc.rmse_log / n,
        log10: acc.log10 / n,
        silog: acc.silog / n,
        sqrel: acc.sqrel / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(values: Vec<f64>) -> Tensor {
        let n = values.len();
        Tensor::new(vec![1, n], values).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let g = map(vec![1.0, 2.0, 3.0, 4.0]);
        let pair = DepthPair::new(g.clone(), g).unwrap();
        let m = evaluate(&pair).unwrap();
        assert_eq!(m.absrel, 0.0);
        assert_eq!(m.delta1, 1.0);
        assert_eq!(m.delta2, 1.0);
        assert_eq!(m.delta3, 1.0);
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.silog, 0.0);
    }

    #[test]
    fn doubled_prediction() {
        // p = 2g: absrel = 1, every delta fails (2 > 1.25^3 = 1.953125),
        // silog = 0 because the ratio is constant.
        let g = map(vec![0.5, 1.0, 2.0, 4.0]);
        let p = g.scale(2.0);
        let m = evaluate(&DepthPair::new(p, g).unwrap()).unwrap();
        assert_abs_diff_eq!(m.absrel, 1.0, epsilon = 1e-12);
        assert_eq!(m.delta1, 0.0);
        assert_eq!(m.delta2, 0.0);
        assert_eq!(m.delta3, 0.0);
        assert_abs_diff_eq!(m.silog, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn single_pixel_example() {
        let m = evaluate(&DepthPair::new(map(vec![1.2]), map(vec![1.0])).unwrap()).unwrap();
        assert_abs_diff_eq!(m.absrel, 0.2, epsilon = 1e-12);
        assert_eq!(m.delta1, 1.0);
    }

    #[test]
    fn delta_ordering_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        for _ in 0..20 {
            let g = map((0..32).map(|_| 0.5 + rng.random::<f64>() * 5.0).collect());
            let p = map((0..32).map(|_| 0.5 + rng.random::<f64>() * 5.0).collect());
            let m = evaluate(&DepthPair::new(p, g).unwrap()).unwrap();
            assert!(m.delta1 <= m.delta2 && m.delta2 <= m.delta3);
        }
    }

    #[test]
    fn silog_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let g = map((0..32).map(|_| 0.5 + rng.random::<f64>() * 5.0).collect());
        let p = map((0..32).map(|_| 0.5 + rng.random::<f64>() * 5.0).collect());
        let base = evaluate(&DepthPair::new(p.clone(), g.clone()).unwrap()).unwrap();
        let scaled = evaluate(&DepthPair::new(p.scale(3.7), g).unwrap()).unwrap();
        assert_abs_diff_eq!(base.silog, scaled.silog, epsilon = 1e-12);
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let gv: Vec<f64> = (0..16).map(|_| 0.5 + rng.random::<f64>() * 5.0).collect();
        let pv: Vec<f64> = (0..16).map(|_| 0.5 + rng.random::<f64>() * 5.0).collect();
        let m1 = evaluate(&DepthPair::new(map(pv.clone()), map(gv.clone())).unwrap()).unwrap();
        let rp: Vec<f64> = pv.iter().rev().cloned().collect();
        let rg: Vec<f64> = gv.iter().rev().cloned().collect();
        let m2 = evaluate(&DepthPair::new(map(rp), map(rg)).unwrap()).unwrap();
        assert_abs_diff_eq!(m1.absrel, m2.absrel, epsilon = 1e-12);
        assert_abs_diff_eq!(m1.silog, m2.silog, epsilon = 1e-12);
        assert_eq!(m1.delta1, m2.delta1);
    }

    #[test]
    fn empty_mask_errors() {
        let g = map(vec![1.0, 2.0]);
        let pair = DepthPair::new(g.clone(), g)
            .unwrap()
            .with_mask(vec![false, false])
            .unwrap();
        assert!(evaluate(&pair).is_err());
    }
}
