//! Task-agnostic evaluation over the test sets of all tasks seen so far.

use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::DataView;
use crate::error::{Error, Result};
use crate::nn::DenseNet;

/// Anything that maps inputs to global class ids without being told the task.
pub trait Predictor {
    fn predict(&self, inputs: ArrayView2<f64>) -> Result<Vec<usize>>;
}

/// Argmax of `head(extractor(x))` mapped through `classes`; ties go to the lowest column.
pub fn predict_argmax(extractor: &DenseNet, head: &DenseNet, classes: &[usize], inputs: ArrayView2<f64>) -> Result<Vec<usize>> {
    if classes.is_empty() {
        return Err(Error::Training("no classes learned yet".into()));
    }
    if head.spec().output_width() != classes.len() {
        return Err(Error::Shape(format!("head has {} outputs for {} classes", head.spec().output_width(), classes.len())));
    }
    let mut out = Vec::with_capacity(inputs.nrows());
    for chunk in inputs.axis_chunks_iter(Axis(0), 2048) {
        let logits = head.forward(extractor.forward(chunk)?.view())?;
        for row in logits.rows() {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            out.push(classes[best]);
        }
    }
    Ok(out)
}

/// Accuracies measured right after training stage `stage` (1-based).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    /// Example-weighted accuracy over the union of the seen test sets.
    pub cumulative_accuracy: f64,
    pub per_task_accuracy: Vec<f64>,
    pub per_task_counts: Vec<usize>,
}

impl StageRecord {
    /// Build a record from per-task correct counts and test-set sizes.
    pub fn from_counts(stage: usize, correct: &[usize], counts: &[usize]) -> Result<Self> {
        if correct.len() != counts.len() || counts.len() != stage {
            return Err(Error::Shape(format!(
                "stage {stage} needs {stage} task counts, got {} correct and {} totals",
                correct.len(),
                counts.len()
            )));
        }
        if let Some(i) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Empty(format!("test set of task {} is empty", i + 1)));
        }
        let total: usize = counts.iter().sum();
        let hits: usize = correct.iter().sum();
        Ok(StageRecord {
            stage,
            cumulative_accuracy: hits as f64 / total as f64,
            per_task_accuracy: correct.iter().zip(counts).map(|(&c, &n)| c as f64 / n as f64).collect(),
            per_task_counts: counts.to_vec(),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub after_task: Vec<StageRecord>,
}

impl AccuracyMatrix {
    pub fn push(&mut self, record: StageRecord) {
        self.after_task.push(record);
    }

    pub fn cumulative(&self) -> Vec<f64> {
        self.after_task.iter().map(|r| r.cumulative_accuracy).collect()
    }

    pub fn a_last(&self) -> Result<f64> {
        a_last(&self.cumulative())
    }

    pub fn a_inc(&self) -> Result<f64> {
        a_inc(&self.cumulative())
    }
}

/// Accuracy after the final stage.
pub fn a_last(cumulative: &[f64]) -> Result<f64> {
    cumulative.last().copied().ok_or_else(|| Error::Empty("no stages evaluated".into()))
}

/// Mean of the per-stage cumulative accuracies.
pub fn a_inc(cumulative: &[f64]) -> Result<f64> {
    if cumulative.is_empty() {
        return Err(Error::Empty("no stages evaluated".into()));
    }
    Ok(mean(cumulative))
}

/// Mean with a compensated sum and a remainder-corrected division, so short
/// sequences get the correctly rounded result (plain summation of
/// `[0.9, 0.8, 0.7]` divided by 3 misses 0.8 by two ulps).
fn mean(values: &[f64]) -> f64 {
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    for &v in values {
        let t = sum + v;
        carry += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    let n = values.len() as f64;
    let q = sum / n;
    let remainder = (-q).mul_add(n, sum) + carry;
    q + remainder / n
}

/// Evaluate `model` on each seen task's test set.
pub fn evaluate_stage<P: Predictor + ?Sized>(model: &P, tests: &[&DataView]) -> Result<StageRecord> {
    let mut correct = Vec::with_capacity(tests.len());
    let mut counts = Vec::with_capacity(tests.len());
    for (i, test) in tests.iter().enumerate() {
        if test.is_empty() {
            return Err(Error::Empty(format!("test set of task {} is empty", i + 1)));
        }
        let predicted = model.predict(test.to_batch().inputs.view())?;
        correct.push(predicted.iter().zip(test.labels()).filter(|(p, l)| **p == *l).count());
        counts.push(test.len());
    }
    StageRecord::from_counts(tests.len(), &correct, &counts)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    use super::*;
    use crate::data::Dataset;

    struct Constant(usize);

    impl Predictor for Constant {
        fn predict(&self, inputs: ArrayView2<f64>) -> Result<Vec<usize>> {
            Ok(vec![self.0; inputs.nrows()])
        }
    }

    /// Predicts the label stored in the first input column.
    struct Oracle;

    impl Predictor for Oracle {
        fn predict(&self, inputs: ArrayView2<f64>) -> Result<Vec<usize>> {
            Ok(inputs.column(0).iter().map(|&v| (v * 10.0).round() as usize).collect())
        }
    }

    fn view(labels: &[usize]) -> DataView {
        let x = Array2::from_shape_fn((labels.len(), 2), |(i, j)| if j == 0 { labels[i] as f64 / 10.0 } else { 0.5 });
        DataView::all(Arc::new(Dataset::new(x, labels.to_vec(), 10, "toy").unwrap()))
    }

    #[test]
    fn summary_metrics() {
        assert_eq!(a_last(&[0.9, 0.8, 0.7]).unwrap(), 0.7);
        assert_eq!(a_inc(&[0.9, 0.8, 0.7]).unwrap(), 0.8);
        assert_eq!(a_last(&[0.42]).unwrap(), 0.42);
        assert_eq!(a_inc(&[0.3; 4]).unwrap(), 0.3);
        assert!(a_last(&[]).is_err());
        assert!(a_inc(&[]).is_err());
    }

    #[test]
    fn mean_is_accurate() {
        assert_eq!(mean(&[0.1, 0.2, 0.3]), 0.2);
        assert_eq!(mean(&[1e16, 1.0, -1e16]), 1.0 / 3.0);
        assert_eq!(mean(&[0.7; 7]), 0.7);
    }

    #[test]
    fn weighted_cumulative() {
        let r = StageRecord::from_counts(3, &[90, 160, 70], &[100, 200, 100]).unwrap();
        assert_eq!(r.per_task_accuracy, vec![0.9, 0.8, 0.7]);
        assert_eq!(r.cumulative_accuracy, 0.8);
        assert!(StageRecord::from_counts(2, &[1, 1], &[1, 0]).is_err());
        assert!(StageRecord::from_counts(3, &[1, 1], &[1, 1]).is_err());
    }

    #[test]
    fn constant_and_oracle_predictors() {
        let a = view(&[0, 1, 0, 1]);
        let b = view(&[2, 3, 0, 3]);
        let r = evaluate_stage(&Constant(0), &[&a, &b]).unwrap();
        assert_eq!(r.cumulative_accuracy, 3.0 / 8.0);
        assert_eq!(r.per_task_accuracy, vec![0.5, 0.25]);
        let r = evaluate_stage(&Oracle, &[&a, &b]).unwrap();
        assert_eq!(r.cumulative_accuracy, 1.0);
        assert_eq!(r.per_task_accuracy, vec![1.0, 1.0]);
        assert!(evaluate_stage(&Oracle, &[&a, &view(&[])]).is_err());
    }

    #[test]
    fn brute_force_recount() {
        let tasks = [view(&[0, 1, 1, 0, 1]), view(&[2, 3, 3]), view(&[4, 5, 4, 4, 5, 5, 5])];
        let model = Constant(1);
        let mut matrix = AccuracyMatrix::default();
        for k in 1..=3 {
            let seen: Vec<&DataView> = tasks[..k].iter().collect();
            matrix.push(evaluate_stage(&model, &seen).unwrap());
        }
        let mut hits = 0;
        let mut total = 0;
        for (k, task) in tasks.iter().enumerate() {
            hits += task.labels().iter().filter(|&&l| l == 1).count();
            total += task.len();
            let r = &matrix.after_task[k];
            assert_eq!(r.stage, k + 1);
            assert_eq!(r.per_task_accuracy.len(), k + 1);
            assert_eq!(r.cumulative_accuracy, hits as f64 / total as f64);
            let weighted: f64 = r.per_task_accuracy.iter().zip(&r.per_task_counts).map(|(a, &n)| a * n as f64).sum::<f64>()
                / r.per_task_counts.iter().sum::<usize>() as f64;
            assert_abs_diff_eq!(weighted, r.cumulative_accuracy, epsilon = 1e-12);
        }
        assert_eq!(matrix.a_last().unwrap(), 3.0 / 15.0);
    }

    #[test]
    fn argmax_tie_goes_to_lowest_column() {
        use crate::nn::{Activation, LayerSpec};
        let ext = DenseNet::zeros(LayerSpec::new(vec![3, 2], Activation::Relu).unwrap()).unwrap();
        let head = DenseNet::zeros(LayerSpec::linear(2, 3).unwrap()).unwrap();
        let x = Array2::ones((2, 3));
        assert_eq!(predict_argmax(&ext, &head, &[7, 2, 5], x.view()).unwrap(), vec![7, 7]);
        assert!(predict_argmax(&ext, &head, &[7, 2], x.view()).is_err());
    }
}
