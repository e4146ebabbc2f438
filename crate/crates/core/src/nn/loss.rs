use ndarray::{Array1, Array2, ArrayView2, Axis};

/// Row-wise softmax, computed with the max-shift for stability.
pub fn softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Per-sample softmax cross-entropy together with the probabilities needed
/// for its gradient.
#[derive(Clone, Debug)]
pub struct CrossEntropy {
    pub losses: Array1<f64>,
    pub probs: Array2<f64>,
}

impl CrossEntropy {
    pub fn new(logits: ArrayView2<f64>, labels: &[usize]) -> Self {
        assert_eq!(logits.nrows(), labels.len(), "one label per row");
        let logp = log_softmax(logits);
        let losses = labels.iter().enumerate().map(|(i, &y)| -logp[[i, y]]).collect();
        Self {
            losses,
            probs: logp.mapv(f64::exp),
        }
    }

    pub fn mean(&self) -> f64 {
        self.losses.mean().unwrap_or(0.0)
    }

    /// Gradient of `Σ_i weight_i · loss_i` with respect to the logits.
    pub fn grad_weighted(&self, labels: &[usize], weights: &[f64]) -> Array2<f64> {
        let mut g = self.probs.clone();
        for (i, (&y, &w)) in labels.iter().zip(weights).enumerate() {
            g[[i, y]] -= 1.0;
            g.row_mut(i).mapv_inplace(|v| v * w);
        }
        g
    }

    /// Gradient of the batch mean.
    pub fn grad_mean(&self, labels: &[usize]) -> Array2<f64> {
        let w = vec![1.0 / labels.len().max(1) as f64; labels.len()];
        self.grad_weighted(labels, &w)
    }
}

/// Mean KL divergence `KL(softmax(teacher/T) ‖ softmax(student/T))`, scaled by
/// `T²`, with its gradient with respect to the student logits.
pub fn distillation(student: ArrayView2<f64>, teacher: ArrayView2<f64>, temperature: f64) -> (f64, Array2<f64>) {
    let t = temperature;
    let n = student.nrows().max(1) as f64;
    let ls = log_softmax((&student / t).view());
    let lt = log_softmax((&teacher / t).view());
    let pt = lt.mapv(f64::exp);
    let kl = (&pt * &(&lt - &ls)).sum_axis(Axis(1));
    let value = t * t * kl.sum() / n;
    let grad = (ls.mapv(f64::exp) - &pt) * (t / n);
    (value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn uniform_logits_give_log_classes() {
        let ce = CrossEntropy::new(arr2(&[[0.0, 0.0, 0.0]]).view(), &[1]);
        assert!((ce.mean() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn distillation_zero_when_equal() {
        let z = arr2(&[[1.0, -2.0], [0.3, 0.1]]);
        let (v, g) = distillation(z.view(), z.view(), 2.0);
        assert!(v.abs() < 1e-12);
        assert!(g.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn distillation_gradient_matches_finite_differences() {
        let s = arr2(&[[0.5, -0.2, 0.1]]);
        let t = arr2(&[[1.0, 0.0, -1.0]]);
        let (_, g) = distillation(s.view(), t.view(), 2.0);
        let h = 1e-6;
        for j in 0..3 {
            let mut sp = s.clone();
            sp[[0, j]] += h;
            let mut sm = s.clone();
            sm[[0, j]] -= h;
            let fd = (distillation(sp.view(), t.view(), 2.0).0 - distillation(sm.view(), t.view(), 2.0).0) / (2.0 * h);
            assert!((fd - g[[0, j]]).abs() < 1e-7);
        }
    }
}
