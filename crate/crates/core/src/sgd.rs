//! Minibatch gradient descent for an extractor followed by a linear head.
//! Used for the first task, the fine-tuning baseline and joint training.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::DataView;
use crate::error::{Error, Result};
use crate::nn::{backprop, DenseNet, Loss};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { epochs: 5, lr: 0.1, batch_size: 64 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("sgd batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("sgd lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Map global class ids to head columns through the ordered list of seen classes.
pub fn class_columns(seen: &[usize], labels: &[usize]) -> Result<Vec<usize>> {
    labels.iter().map(|l| seen.iter().position(|c| c == l).ok_or(Error::Label { label: *l, classes: seen.len() })).collect()
}

/// Cross-entropy of `head(extractor(x))` and the gradients of both networks.
pub fn classifier_gradients(
    extractor: &DenseNet,
    head: &DenseNet,
    x: ArrayView2<f64>,
    columns: &[usize],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let latent = extractor.forward(x)?;
    let logits = head.forward(latent.view())?;
    let (loss, dlogits) = Loss::CrossEntropy(columns).value_and_grad(logits.view())?;
    let (head_grad, dlatent) = backprop(head.spec(), head.params(), latent.view(), dlogits, true)?;
    let dlatent: Array2<f64> = dlatent.expect("input gradient requested");
    let (ext_grad, _) = backprop(extractor.spec(), extractor.params(), x, dlatent, false)?;
    Ok((loss, ext_grad, head_grad))
}

/// Train extractor and head jointly on `data`. Returns the mean loss of the last epoch.
pub fn train_classifier(
    extractor: &mut DenseNet,
    head: &mut DenseNet,
    data: &DataView,
    seen: &[usize],
    cfg: &SgdConfig,
    seed: u64,
) -> Result<f64> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("no training examples".into()));
    }
    let mut last = f64::NAN;
    let mut positions: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        positions.shuffle(&mut rng::stream(seed, &[rng::tag::SGD, epoch as u64]));
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in positions.chunks(cfg.batch_size) {
            let batch = data.batch(chunk);
            let columns = class_columns(seen, batch.labels.as_deref().unwrap_or_default())?;
            let (loss, ext_grad, head_grad) = classifier_gradients(extractor, head, batch.inputs.view(), &columns)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("loss diverged in epoch {epoch}")));
            }
            extractor.sgd_step(&ext_grad, cfg.lr)?;
            head.sgd_step(&head_grad, cfg.lr)?;
            total += loss;
            batches += 1;
        }
        last = total / batches as f64;
        log::debug!("sgd epoch {epoch}: mean loss {last:.4}");
    }
    Ok(last)
}
