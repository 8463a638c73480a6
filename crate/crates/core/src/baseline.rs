//! Reference learners: sequential fine-tuning with no protection against
//! forgetting, and joint training on everything seen so far.

use ndarray::ArrayView2;

use crate::data::{DataView, Task};
use crate::error::Result;
use crate::eval::{predict_argmax, Predictor};
use crate::nn::{DenseNet, LayerSpec};
use crate::rng::{self, tag};
use crate::sgd::{train_classifier, SgdConfig};

/// Extractor plus linear head over an ordered list of classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub extractor: DenseNet,
    pub head: DenseNet,
    pub classes: Vec<usize>,
}

impl Classifier {
    pub fn new(extractor_spec: LayerSpec, seed: u64) -> Result<Self> {
        let latent = extractor_spec.output_width();
        Ok(Classifier {
            extractor: DenseNet::init(extractor_spec, rng::derive(seed, &[tag::EXTRACTOR]))?,
            head: DenseNet::zeros(LayerSpec::linear(latent, 1)?)?,
            classes: Vec::new(),
        })
    }

    /// Add output columns for `classes`, keeping the trained columns as they are.
    pub fn grow_head(&mut self, classes: &[usize], seed: u64) -> Result<()> {
        let old = self.classes.len();
        self.classes.extend_from_slice(classes);
        let latent = self.extractor.spec().output_width();
        let mut head = DenseNet::init(LayerSpec::linear(latent, self.classes.len())?, seed)?;
        if old > 0 {
            let (mut w, mut b) = head.layer_mut(0);
            let (w_old, b_old) = (self.head.weights(0), self.head.biases(0));
            for i in 0..latent {
                for j in 0..old {
                    w[[i, j]] = w_old[[i, j]];
                }
            }
            for j in 0..old {
                b[j] = b_old[j];
            }
        }
        self.head = head;
        Ok(())
    }

    pub fn fit(&mut self, data: &DataView, cfg: &SgdConfig, seed: u64) -> Result<f64> {
        train_classifier(&mut self.extractor, &mut self.head, data, &self.classes, cfg, seed)
    }
}

impl Predictor for Classifier {
    fn predict(&self, inputs: ArrayView2<f64>) -> Result<Vec<usize>> {
        predict_argmax(&self.extractor, &self.head, &self.classes, inputs)
    }
}

/// Train on `task` alone after growing the head for its classes.
pub fn finetune_task(model: &mut Classifier, task: &Task, stage: usize, cfg: &SgdConfig, seed: u64) -> Result<f64> {
    model.grow_head(&task.classes, rng::derive(seed, &[tag::HEAD, stage as u64]))?;
    model.fit(&task.train, cfg, rng::derive(seed, &[stage as u64]))
}

/// Train a fresh model on the pooled training data of `tasks`.
pub fn joint_fit(extractor_spec: &LayerSpec, tasks: &[Task], cfg: &SgdConfig, seed: u64) -> Result<(Classifier, f64)> {
    let stage = tasks.len() as u64;
    let mut model = Classifier::new(extractor_spec.clone(), rng::derive(seed, &[stage]))?;
    let classes: Vec<usize> = tasks.iter().flat_map(|t| t.classes.iter().copied()).collect();
    model.grow_head(&classes, rng::derive(seed, &[tag::HEAD, stage]))?;
    let pooled = DataView::concat(tasks.iter().map(|t| &t.train))?;
    let loss = model.fit(&pooled, cfg, rng::derive(seed, &[tag::SGD, stage]))?;
    Ok((model, loss))
}
