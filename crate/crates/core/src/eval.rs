//! Scoring helpers shared by the experiments and the CLI.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Sample mean and sample standard deviation (n - 1 denominator).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4} (n={})", self.mean, self.std, self.n)
    }
}

/// `sign(w · x + b)` boundary fit by L2-regularised logistic regression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSeparator {
    pub weights: Vec<f64>,
    pub bias: f64,
}

const RIDGE: f64 = 1e-3;
const NEWTON_STEPS: usize = 50;

impl LinearSeparator {
    /// Returns `None` for empty input, ragged points or a single class.
    pub fn fit(points: &[Vec<f64>], labels: &[bool]) -> Option<Self> {
        let n = points.len();
        if n == 0 || labels.len() != n || labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            return None;
        }
        let d = points[0].len();
        if points.iter().any(|p| p.len() != d || p.iter().any(|v| !v.is_finite())) {
            return None;
        }
        // Standardise so the ridge is scale-free.
        let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let v = points.iter().map(|p| (p[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
                if v > 0.0 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let x = DMatrix::from_fn(n, d + 1, |i, j| if j == d { 1.0 } else { (points[i][j] - mean[j]) / scale[j] });
        let y = DVector::from_iterator(n, labels.iter().map(|&l| if l { 1.0 } else { 0.0 }));
        let mut w = DVector::zeros(d + 1);
        for _ in 0..NEWTON_STEPS {
            let z = &x * &w;
            let p = z.map(|v| 1.0 / (1.0 + (-v).exp()));
            let mut grad = x.transpose() * (&p - &y);
            let mut hess = DMatrix::zeros(d + 1, d + 1);
            for i in 0..n {
                let r = x.row(i);
                hess += r.transpose() * r * (p[i] * (1.0 - p[i]));
            }
            for j in 0..d {
                grad[j] += RIDGE * w[j];
                hess[(j, j)] += RIDGE;
            }
            hess[(d, d)] += 1e-9;
            let Some(step) = hess.lu().solve(&grad) else { break };
            w -= &step;
            if step.norm() < 1e-10 {
                break;
            }
        }
        let weights: Vec<f64> = (0..d).map(|j| w[j] / scale[j]).collect();
        let bias = w[d] - (0..d).map(|j| weights[j] * mean[j]).sum::<f64>();
        Some(Self { weights, bias })
    }

    pub fn decision(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        self.decision(x) > 0.0
    }

    /// Fraction of `points` whose predicted side matches `labels`.
    pub fn accuracy(&self, points: &[Vec<f64>], labels: &[bool]) -> f64 {
        if points.is_empty() {
            return 0.0;
        }
        let hits = points.iter().zip(labels).filter(|(p, &l)| self.predict(p) == l).count();
        hits as f64 / points.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_uses_sample_stddev() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(Summary::of(&[7.0]).unwrap().std, 0.0);
        assert!(Summary::of(&[]).is_none());
    }

    #[test]
    fn separates_shifted_clusters() {
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let t = i as f64 * 0.1;
            pts.push(vec![1.0 + t.sin() * 0.3, 5.0 + t]);
            labels.push(true);
            pts.push(vec![-1.0 + t.cos() * 0.3, 5.0 - t]);
            labels.push(false);
        }
        let sep = LinearSeparator::fit(&pts, &labels).unwrap();
        assert_eq!(sep.accuracy(&pts, &labels), 1.0);
        assert!(sep.predict(&[2.0, 0.0]));
        assert!(!sep.predict(&[-2.0, 0.0]));
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(LinearSeparator::fit(&[vec![0.0], vec![1.0]], &[true, true]).is_none());
        assert!(LinearSeparator::fit(&[], &[]).is_none());
    }
}
