//! Exemplar-free class-incremental learning with a gradient-free optimizer.
//!
//! Past classes survive only as `N` stored latent vectors per class. When a
//! new task arrives, the previous extractor is frozen and an adapter learns to
//! map its latent space into the current one. The past-task loss is then
//! approximated by classifying adapted memory features, and the whole
//! objective
//!
//! ```text
//! CE(head(F_t(x_new)), y_new) + CE(head(adapter(m)), y_m) + alpha * MSE(adapter(F_{t-1}(x_new)), F_t(x_new))
//! ```
//!
//! is minimized over `[extractor | head | adapter]` with the evolution
//! strategy in [`crate::es`]. No gradient flows through the memory term, so a
//! gradient-free optimizer is what lets it shape the extractor.

use std::collections::BTreeMap;
use std::ops::Range;
use std::time::Instant;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{DataView, Task};
use crate::error::{Error, Result};
use crate::es::{es_step, EsConfig, EsState, Objective};
use crate::eval::{predict_argmax, Predictor};
use crate::nn::{
    backprop, bias_view, forward_params, mse, softmax_cross_entropy, weight_view, Activation, DenseNet, Layer, LayerSpec, Loss,
};
use crate::rng::{self, tag};
use crate::sgd::{class_columns, train_classifier, SgdConfig};

/// Latent vectors kept per class, always expressed in the latest extractor's space.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMemory {
    per_class: usize,
    latent_dim: usize,
    entries: BTreeMap<usize, Array2<f64>>,
}

impl FeatureMemory {
    pub fn new(per_class: usize, latent_dim: usize) -> Result<Self> {
        if per_class == 0 || latent_dim == 0 {
            return Err(Error::Config("memory needs N >= 1 vectors of dimension S >= 1".into()));
        }
        Ok(FeatureMemory { per_class, latent_dim, entries: BTreeMap::new() })
    }

    pub fn per_class(&self) -> usize {
        self.per_class
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn classes(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    pub fn get(&self, class: usize) -> Option<&Array2<f64>> {
        self.entries.get(&class)
    }

    pub fn num_classes(&self) -> usize {
        self.entries.len()
    }

    pub fn total_vectors(&self) -> usize {
        self.entries.values().map(|m| m.nrows()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, class: usize, latents: Array2<f64>) -> Result<()> {
        if latents.dim() != (self.per_class, self.latent_dim) {
            return Err(Error::Shape(format!(
                "class {class}: memory expects {}x{} latents, got {:?}",
                self.per_class,
                self.latent_dim,
                latents.dim()
            )));
        }
        self.entries.insert(class, latents);
        Ok(())
    }

    /// Every stored vector with its class, classes in ascending order.
    pub fn pooled(&self) -> (Array2<f64>, Vec<usize>) {
        let views: Vec<ArrayView2<f64>> = self.entries.values().map(|m| m.view()).collect();
        let latents = if views.is_empty() {
            Array2::zeros((0, self.latent_dim))
        } else {
            concatenate(Axis(0), &views).expect("all entries share the latent width")
        };
        let labels = self.entries.keys().flat_map(|&c| std::iter::repeat_n(c, self.per_class)).collect();
        (latents, labels)
    }

    /// Pass every stored vector through `adapter`.
    pub fn remap(&self, adapter: &DenseNet) -> Result<FeatureMemory> {
        let spec = adapter.spec();
        if spec.input_width() != self.latent_dim || spec.output_width() != self.latent_dim {
            return Err(Error::Shape(format!(
                "adapter maps {} -> {}, memory holds {}-dimensional latents",
                spec.input_width(),
                spec.output_width(),
                self.latent_dim
            )));
        }
        let entries = self.entries.iter().map(|(&c, m)| Ok((c, adapter.forward(m.view())?))).collect::<Result<_>>()?;
        Ok(FeatureMemory { entries, ..*self })
    }

    /// Store `N` latents for each class of `classes`, chosen from the examples
    /// of that class in `data`. Classes with fewer than `N` examples store each
    /// example once and fill up by sampling with replacement.
    pub fn store_features(&mut self, extractor: &DenseNet, data: &DataView, classes: &[usize], seed: u64) -> Result<()> {
        if extractor.spec().output_width() != self.latent_dim {
            return Err(Error::Shape(format!(
                "extractor emits {} features, memory holds {}",
                extractor.spec().output_width(),
                self.latent_dim
            )));
        }
        let labels = data.labels();
        for &class in classes {
            let mut positions: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
            if positions.is_empty() {
                return Err(Error::Empty(format!("class {class} has no examples to memorize")));
            }
            let mut rng = rng::stream(seed, &[tag::MEMORY, class as u64]);
            let chosen: Vec<usize> = if positions.len() >= self.per_class {
                index::sample(&mut rng, positions.len(), self.per_class).into_iter().map(|i| positions[i]).collect()
            } else {
                positions.shuffle(&mut rng);
                let extra: Vec<usize> =
                    (positions.len()..self.per_class).map(|_| positions[rng.random_range(0..positions.len())]).collect();
                positions.into_iter().chain(extra).collect()
            };
            let latents = extractor.forward(data.inputs_at(&chosen).view())?;
            self.insert(class, latents)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    /// One hidden relu layer of width `2S`.
    Mlp,
    Linear,
}

/// How the adapter is trained during a task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    /// Adapter parameters are part of the evolved vector.
    JointEs,
    /// The adapter takes one gradient step on the alignment loss after every
    /// generation and stays out of the evolved vector.
    Alternating,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstTaskOptimizer {
    Gradient,
    Es,
}

/// How the classification head is trained while the extractor evolves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadOptimizer {
    /// Part of the evolved vector.
    Es,
    /// One gradient step on both cross-entropy terms after every generation.
    Gradient,
}

/// A near-identity adapter on `latent_dim` features plus Gaussian noise of scale `noise`.
///
/// The MLP form realizes the identity exactly through `relu(x) - relu(-x)`.
pub fn init_adapter(kind: AdapterKind, latent_dim: usize, noise: f64, seed: u64) -> Result<DenseNet> {
    let s = latent_dim;
    let mut net = match kind {
        AdapterKind::Mlp => {
            let mut net = DenseNet::zeros(LayerSpec::new(vec![s, 2 * s, s], Activation::Relu)?)?;
            let (mut w1, _) = net.layer_mut(0);
            for j in 0..s {
                w1[[j, j]] = 1.0;
                w1[[j, s + j]] = -1.0;
            }
            let (mut w2, _) = net.layer_mut(1);
            for j in 0..s {
                w2[[j, j]] = 1.0;
                w2[[s + j, j]] = -1.0;
            }
            net
        }
        AdapterKind::Linear => {
            let mut net = DenseNet::zeros(LayerSpec::linear(s, s)?)?;
            let (mut w, _) = net.layer_mut(0);
            for j in 0..s {
                w[[j, j]] = 1.0;
            }
            net
        }
    };
    if noise > 0.0 {
        let mut rng = rng::stream(seed, &[]);
        let mut params = net.flatten_params();
        for p in &mut params {
            let z: f64 = StandardNormal.sample(&mut rng);
            *p += noise * z;
        }
        net.set_params(&params)?;
    }
    Ok(net)
}

pub fn extract_features(extractor: &DenseNet, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
    extractor.forward(inputs)
}

pub fn adapt_features(adapter: &DenseNet, latents: ArrayView2<f64>) -> Result<Array2<f64>> {
    adapter.forward(latents)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the adapter alignment term.
    pub alpha: f64,
    pub batch_new: usize,
    pub batch_mem: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 1.0, batch_new: 128, batch_mem: 128 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be a nonnegative number, got {}", self.alpha)));
        }
        if self.batch_new == 0 || self.batch_mem == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Everything `train_task` needs besides the state and the task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub es: EsConfig,
    pub loss: LossConfig,
    pub adapter: AdapterKind,
    pub adapter_mode: AdapterMode,
    pub adapter_init_noise: f64,
    pub first_task: FirstTaskOptimizer,
    pub head: HeadOptimizer,
    pub sgd: SgdConfig,
    /// Progress is logged every this many generations.
    pub log_every: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            es: EsConfig::default(),
            loss: LossConfig::default(),
            adapter: AdapterKind::Mlp,
            adapter_mode: AdapterMode::Alternating,
            adapter_init_noise: 1e-3,
            first_task: FirstTaskOptimizer::Gradient,
            head: HeadOptimizer::Gradient,
            sgd: SgdConfig::default(),
            log_every: 50,
        }
    }
}

/// Slices of the evolved vector `[extractor | head | adapter]`.
#[derive(Clone, Debug)]
/// Parts left out of the vector are supplied separately.
pub struct ParamLayout {
    pub extractor: Range<usize>,
    pub head: Option<Range<usize>>,
    pub adapter: Option<Range<usize>>,
}

impl ParamLayout {
    pub fn new(extractor: usize, head: Option<usize>, adapter: Option<usize>) -> Self {
        let head = head.map(|h| extractor..extractor + h);
        let end = head.as_ref().map_or(extractor, |h| h.end);
        let adapter = adapter.map(|a| end..end + a);
        ParamLayout { extractor: 0..extractor, head, adapter }
    }

    pub fn len(&self) -> usize {
        self.adapter.as_ref().or(self.head.as_ref()).map_or(self.extractor.end, |r| r.end)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Values of the three loss terms for one candidate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub new_task: f64,
    pub past_tasks: f64,
    pub alignment: f64,
    pub total: f64,
}

/// The past-task half of the objective: memory and frozen-extractor outputs
/// for one batch, plus the adapter architecture.
pub struct PastTerm<'a> {
    pub adapter_spec: &'a LayerSpec,
    /// Adapter parameters when they are not part of the candidate vector.
    pub fixed_adapter: Option<&'a [f64]>,
    pub frozen_latents: ArrayView2<'a, f64>,
    pub mem_latents: ArrayView2<'a, f64>,
    pub mem_columns: &'a [usize],
}

/// Adapter outputs for one generation's batches when the adapter is not
/// being evolved.
struct AdaptedBatch {
    mem: Array2<f64>,
    frozen: Array2<f64>,
}

/// Evaluate the composite loss of `candidate`. `past` is `None` on the first
/// task, where only the new-task cross-entropy applies.
#[allow(clippy::too_many_arguments)]
pub fn composite_loss(
    candidate: &[f64],
    layout: &ParamLayout,
    extractor_spec: &LayerSpec,
    head_spec: &LayerSpec,
    fixed_head: Option<&[f64]>,
    new_inputs: ArrayView2<f64>,
    new_columns: &[usize],
    past: Option<&PastTerm<'_>>,
    alpha: f64,
) -> Result<LossParts> {
    check_layout(candidate, layout)?;
    let latent = forward_params(extractor_spec, &candidate[layout.extractor.clone()], new_inputs)?;
    let head = Head { spec: head_spec, fixed: fixed_head };
    loss_from_latent(latent.view(), candidate, layout, &head, new_columns, past, None, alpha)
}

/// Head architecture, with its parameters when they are not in the candidate.
struct Head<'a> {
    spec: &'a LayerSpec,
    fixed: Option<&'a [f64]>,
}

fn check_layout(candidate: &[f64], layout: &ParamLayout) -> Result<()> {
    if candidate.len() != layout.len() {
        return Err(Error::Shape(format!("candidate has {} parameters, layout needs {}", candidate.len(), layout.len())));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn loss_from_latent(
    latent: ArrayView2<f64>,
    candidate: &[f64],
    layout: &ParamLayout,
    head: &Head<'_>,
    new_columns: &[usize],
    past: Option<&PastTerm<'_>>,
    adapted: Option<&AdaptedBatch>,
    alpha: f64,
) -> Result<LossParts> {
    let (head_spec, head) = match (&layout.head, head.fixed) {
        (Some(r), _) => (head.spec, &candidate[r.clone()]),
        (None, Some(p)) => (head.spec, p),
        (None, None) => return Err(Error::Shape("no head parameters".into())),
    };
    let logits = forward_params(head_spec, head, latent)?;
    let new_task = softmax_cross_entropy(logits.view(), new_columns)?;
    let Some(past) = past else {
        return Ok(LossParts { new_task, past_tasks: 0.0, alignment: 0.0, total: new_task });
    };
    if past.mem_latents.nrows() == 0 {
        return Err(Error::Empty("memory batch is empty after the first task".into()));
    }
    let adapter = match (&layout.adapter, past.fixed_adapter) {
        (Some(r), _) => &candidate[r.clone()],
        (None, Some(p)) => p,
        (None, None) => return Err(Error::Shape("no adapter parameters for the past-task term".into())),
    };
    let computed;
    let adapted = match adapted {
        Some(a) if layout.adapter.is_none() => a,
        _ => {
            let mem = forward_params(past.adapter_spec, adapter, past.mem_latents)?;
            let frozen = if alpha > 0.0 { forward_params(past.adapter_spec, adapter, past.frozen_latents)? } else { Array2::zeros((0, 0)) };
            computed = AdaptedBatch { mem, frozen };
            &computed
        }
    };
    let mem_logits = forward_params(head_spec, head, adapted.mem.view())?;
    let past_tasks = softmax_cross_entropy(mem_logits.view(), past.mem_columns)?;
    let alignment = if alpha > 0.0 { mse(adapted.frozen.view(), latent)? } else { 0.0 };
    Ok(LossParts { new_task, past_tasks, alignment, total: new_task + past_tasks + alpha * alignment })
}

/// Learner state across the task sequence.
#[derive(Clone, Debug)]
pub struct ClState {
    pub extractor: DenseNet,
    pub head: DenseNet,
    pub memory: FeatureMemory,
    pub seen_classes: Vec<usize>,
    /// Number of completed tasks.
    pub task_index: usize,
    /// Extractor as it was before the current/most recent task.
    pub frozen_prev: Option<DenseNet>,
    pub adapter: Option<DenseNet>,
    pub seed: u64,
}

impl ClState {
    pub fn new(extractor_spec: LayerSpec, memory_per_class: usize, seed: u64) -> Result<Self> {
        let latent = extractor_spec.output_width();
        let extractor = DenseNet::init(extractor_spec, rng::derive(seed, &[tag::EXTRACTOR]))?;
        Ok(ClState {
            head: DenseNet::zeros(LayerSpec::linear(latent, 1)?)?,
            extractor,
            memory: FeatureMemory::new(memory_per_class, latent)?,
            seen_classes: Vec::new(),
            task_index: 0,
            frozen_prev: None,
            adapter: None,
            seed,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.extractor.spec().output_width()
    }

    /// Seed of the head created for task `task_index`.
    pub fn head_seed(&self, task_index: usize) -> u64 {
        rng::derive(self.seed, &[tag::HEAD, task_index as u64])
    }

    /// Append `classes` to the seen list, rejecting repeats.
    pub fn extend_classes(&mut self, classes: &[usize]) -> Result<()> {
        if classes.is_empty() {
            return Err(Error::Empty("task has no classes".into()));
        }
        if let Some(c) = classes.iter().find(|c| self.seen_classes.contains(c)) {
            return Err(Error::Config(format!("class {c} was already learned in an earlier task")));
        }
        self.seen_classes.extend_from_slice(classes);
        Ok(())
    }

    /// Task-agnostic prediction over every seen class; ties go to the lowest column.
    pub fn predict(&self, inputs: ArrayView2<f64>) -> Result<Vec<usize>> {
        predict_argmax(&self.extractor, &self.head, &self.seen_classes, inputs)
    }

    /// Composite loss of `candidate` (`[extractor | head | adapter]`) on the
    /// given new-data batch and memory batch. Labels are global class ids.
    pub fn combined_loss(
        &self,
        candidate: &[f64],
        new_inputs: ArrayView2<f64>,
        new_labels: &[usize],
        mem: Option<(ArrayView2<f64>, &[usize])>,
        cfg: &LossConfig,
    ) -> Result<f64> {
        let new_columns = class_columns(&self.seen_classes, new_labels)?;
        match &self.frozen_prev {
            None => {
                let layout = ParamLayout::new(self.extractor.param_count(), Some(self.head.param_count()), None);
                composite_loss(candidate, &layout, self.extractor.spec(), self.head.spec(), None, new_inputs, &new_columns, None, cfg.alpha)
                    .map(|p| p.total)
            }
            Some(frozen) => {
                let adapter = self.adapter.as_ref().ok_or_else(|| Error::Training("adapter missing".into()))?;
                let (mem_latents, mem_labels) = mem.ok_or_else(|| Error::Empty("memory batch is required after the first task".into()))?;
                let mem_columns = class_columns(&self.seen_classes, mem_labels)?;
                let frozen_latents = frozen.forward(new_inputs)?;
                let layout = ParamLayout::new(self.extractor.param_count(), Some(self.head.param_count()), Some(adapter.param_count()));
                let past = PastTerm {
                    adapter_spec: adapter.spec(),
                    fixed_adapter: None,
                    frozen_latents: frozen_latents.view(),
                    mem_latents,
                    mem_columns: &mem_columns,
                };
                composite_loss(
                    candidate,
                    &layout,
                    self.extractor.spec(),
                    self.head.spec(),
                    None,
                    new_inputs,
                    &new_columns,
                    Some(&past),
                    cfg.alpha,
                )
                .map(|p| p.total)
            }
        }
    }

    /// Current parameters in evolved-vector order.
    pub fn concatenated_params(&self, include_adapter: bool) -> Vec<f64> {
        let mut v = self.extractor.flatten_params();
        v.extend_from_slice(self.head.params());
        if include_adapter {
            if let Some(a) = &self.adapter {
                v.extend_from_slice(a.params());
            }
        }
        v
    }
}

impl Predictor for ClState {
    fn predict(&self, inputs: ArrayView2<f64>) -> Result<Vec<usize>> {
        ClState::predict(self, inputs)
    }
}

/// Black-box objective over `[extractor | head | adapter]` for one task. All
/// candidates of a generation share one new-data and one memory minibatch.
struct TaskObjective<'a> {
    state: &'a ClState,
    layout: ParamLayout,
    data: &'a DataView,
    mem_latents: Array2<f64>,
    mem_columns: Vec<usize>,
    loss: &'a LossConfig,
    fixed_head: Option<Vec<f64>>,
    fixed_adapter: Option<Vec<f64>>,
    seed: u64,
    batch_inputs: Array2<f64>,
    batch_columns: Vec<usize>,
    batch_frozen: Option<Array2<f64>>,
    batch_mem: Vec<usize>,
    batch_mem_latents: Array2<f64>,
    batch_mem_columns: Vec<usize>,
    // Antithetic candidates share the first layer's product with the batch:
    // X(W + sE) = XW + sXE, so XW is formed once per generation.
    first: Layer,
    tail: Option<LayerSpec>,
    base_pre: Array2<f64>,
    adapted: Option<AdaptedBatch>,
}

impl<'a> TaskObjective<'a> {
    fn new(
        state: &'a ClState,
        data: &'a DataView,
        loss: &'a LossConfig,
        layout: ParamLayout,
        fixed_head: Option<Vec<f64>>,
        fixed_adapter: Option<Vec<f64>>,
        seed: u64,
    ) -> Result<Self> {
        let (mem_latents, mem_labels) = state.memory.pooled();
        let mem_columns = class_columns(&state.seen_classes, &mem_labels)?;
        Ok(TaskObjective {
            state,
            layout,
            data,
            mem_latents,
            mem_columns,
            loss,
            fixed_head,
            fixed_adapter,
            seed,
            batch_inputs: Array2::zeros((0, data.input_dim())),
            batch_columns: Vec::new(),
            batch_frozen: None,
            batch_mem: Vec::new(),
            batch_mem_latents: Array2::zeros((0, state.latent_dim())),
            batch_mem_columns: Vec::new(),
            first: state.extractor.spec().layers().swap_remove(0),
            tail: state.extractor.spec().tail(),
            base_pre: Array2::zeros((0, 0)),
            adapted: None,
        })
    }

    fn head(&self) -> Head<'_> {
        Head { spec: self.state.head.spec(), fixed: self.fixed_head.as_deref() }
    }

    fn past(&self) -> Option<PastTerm<'_>> {
        self.batch_frozen.as_ref().map(|frozen| PastTerm {
            adapter_spec: self.state.adapter.as_ref().expect("adapter exists after the first task").spec(),
            fixed_adapter: self.fixed_adapter.as_deref(),
            frozen_latents: frozen.view(),
            mem_latents: self.batch_mem_latents.view(),
            mem_columns: &self.batch_mem_columns,
        })
    }

    /// Recompute the cached adapter outputs after the fixed adapter changed.
    fn refresh_adapted(&mut self) -> Result<()> {
        self.adapted = match (&self.fixed_adapter, &self.batch_frozen, &self.state.adapter) {
            (Some(params), Some(frozen), Some(adapter)) => Some(AdaptedBatch {
                mem: forward_params(adapter.spec(), params, self.batch_mem_latents.view())?,
                frozen: forward_params(adapter.spec(), params, frozen.view())?,
            }),
            _ => None,
        };
        Ok(())
    }

    fn shared_pair_loss(&self, candidate: &[f64], delta: &Array2<f64>, scale: f64) -> Result<f64> {
        check_layout(candidate, &self.layout)?;
        let mut z = self.base_pre.clone();
        z.scaled_add(scale, delta);
        self.first.activation.apply(&mut z);
        let ext = &candidate[self.layout.extractor.clone()];
        let latent = match &self.tail {
            Some(tail) => forward_params(tail, &ext[self.first.biases.end..], z.view())?,
            None => z,
        };
        let past = self.past();
        let parts = loss_from_latent(
            latent.view(),
            candidate,
            &self.layout,
            &self.head(),
            &self.batch_columns,
            past.as_ref(),
            self.adapted.as_ref(),
            self.loss.alpha,
        )?;
        Ok(parts.total)
    }

    fn parts(&self, candidate: &[f64]) -> Result<LossParts> {
        let past = self.past();
        composite_loss(
            candidate,
            &self.layout,
            self.state.extractor.spec(),
            self.state.head.spec(),
            self.fixed_head.as_deref(),
            self.batch_inputs.view(),
            &self.batch_columns,
            past.as_ref(),
            self.loss.alpha,
        )
    }
}

impl Objective for TaskObjective<'_> {
    fn begin_generation(&mut self, generation: u64, theta: &[f64]) -> Result<()> {
        let t = self.state.task_index as u64;
        let n = self.data.len();
        let mut rng = rng::stream(self.seed, &[tag::BATCH_NEW, t, generation]);
        let positions = index::sample(&mut rng, n, self.loss.batch_new.min(n)).into_vec();
        let batch = self.data.batch(&positions);
        self.batch_columns = class_columns(&self.state.seen_classes, batch.labels.as_deref().unwrap_or_default())?;
        self.batch_frozen = match &self.state.frozen_prev {
            Some(f) => Some(f.forward(batch.inputs.view())?),
            None => None,
        };
        self.batch_inputs = batch.inputs;

        let pool = self.mem_latents.nrows();
        if pool > 0 {
            self.batch_mem = if pool <= self.loss.batch_mem {
                (0..pool).collect()
            } else {
                let mut rng = rng::stream(self.seed, &[tag::BATCH_MEM, t, generation]);
                index::sample(&mut rng, pool, self.loss.batch_mem).into_vec()
            };
            self.batch_mem_latents = self.mem_latents.select(Axis(0), &self.batch_mem);
            self.batch_mem_columns = self.batch_mem.iter().map(|&i| self.mem_columns[i]).collect();
        }
        check_layout(theta, &self.layout)?;
        let ext = &theta[self.layout.extractor.clone()];
        self.base_pre = self.batch_inputs.dot(&weight_view(&self.first, ext));
        self.base_pre += &bias_view(&self.first, ext);
        self.refresh_adapted()
    }

    fn loss(&self, params: &[f64]) -> f64 {
        self.parts(params).map_or(f64::NAN, |p| p.total)
    }

    fn pair_losses(&self, theta: &[f64], eps: &[f64], sigma: f64) -> (f64, f64) {
        let e = &eps[self.layout.extractor.clone()];
        let mut delta = self.batch_inputs.dot(&weight_view(&self.first, e));
        delta += &bias_view(&self.first, e);
        let mut candidate = vec![0.0; theta.len()];
        let mut eval = |sign: f64| {
            for ((c, t), e) in candidate.iter_mut().zip(theta).zip(eps) {
                *c = t + sign * sigma * e;
            }
            self.shared_pair_loss(&candidate, &delta, sign * sigma).unwrap_or(f64::NAN)
        };
        (eval(1.0), eval(-1.0))
    }
}

/// Summary of one `train_task` call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: usize,
    pub classes: Vec<usize>,
    pub optimizer: String,
    pub generations: u64,
    pub final_loss: f64,
    pub seconds: f64,
}

/// Learn one task: freeze the previous extractor, grow and reset the head,
/// evolve `[extractor | head | adapter]`, move memory into the new latent
/// space and memorize the new classes.
pub fn train_task(state: &mut ClState, task: &Task, settings: &TrainSettings) -> Result<TaskReport> {
    settings.es.validate()?;
    settings.loss.validate()?;
    if task.train.is_empty() {
        return Err(Error::Empty(format!("task {} has no training data", state.task_index + 1)));
    }
    let started = Instant::now();
    let t = state.task_index;
    let first = t == 0;
    let latent = state.latent_dim();

    state.frozen_prev = if first { None } else { Some(state.extractor.clone()) };
    state.extend_classes(&task.classes)?;
    state.head = DenseNet::init(LayerSpec::linear(latent, state.seen_classes.len())?, state.head_seed(t))?;
    state.adapter = if first {
        None
    } else {
        Some(init_adapter(settings.adapter, latent, settings.adapter_init_noise, rng::derive(state.seed, &[tag::ADAPTER, t as u64]))?)
    };
    let task_seed = rng::derive(state.seed, &[t as u64]);

    let (optimizer, generations, final_loss) = if first && settings.first_task == FirstTaskOptimizer::Gradient {
        let loss = train_classifier(&mut state.extractor, &mut state.head, &task.train, &state.seen_classes, &settings.sgd, task_seed)?;
        log::info!("task {}: gradient training done, loss {loss:.4}", t + 1);
        ("gradient".to_string(), 0, loss)
    } else {
        let (theta, generations, loss) = evolve(state, task, settings, task_seed)?;
        let mut rest = theta.as_slice();
        let mut take = |net: &mut DenseNet| -> Result<()> {
            let (mine, tail) = rest.split_at(net.param_count());
            rest = tail;
            net.set_params(mine)
        };
        take(&mut state.extractor)?;
        if settings.head == HeadOptimizer::Es {
            take(&mut state.head)?;
        }
        if let (Some(adapter), AdapterMode::JointEs) = (&mut state.adapter, settings.adapter_mode) {
            take(adapter)?;
        }
        ("es".to_string(), generations, loss)
    };

    if let Some(adapter) = &state.adapter {
        state.memory = state.memory.remap(adapter)?;
    }
    state.memory.store_features(&state.extractor, &task.train, &task.classes, task_seed)?;
    state.task_index += 1;
    Ok(TaskReport {
        task: t + 1,
        classes: task.classes.clone(),
        optimizer,
        generations,
        final_loss,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Run the evolution strategy for the current task. Parts trained by
/// gradient (the adapter in alternating mode, the head unless it is evolved)
/// step once after every generation on that generation's batches, and are
/// written back into `state`. Returns the evolved vector.
fn evolve(state: &mut ClState, task: &Task, settings: &TrainSettings, seed: u64) -> Result<(Vec<f64>, u64, f64)> {
    let t = state.task_index;
    let evolve_head = settings.head == HeadOptimizer::Es;
    let evolve_adapter = settings.adapter_mode == AdapterMode::JointEs && state.adapter.is_some();
    let ext_len = state.extractor.param_count();
    let layout = ParamLayout::new(
        ext_len,
        evolve_head.then(|| state.head.param_count()),
        state.adapter.as_ref().filter(|_| evolve_adapter).map(|a| a.param_count()),
    );
    let mut theta0 = state.extractor.flatten_params();
    if evolve_head {
        theta0.extend_from_slice(state.head.params());
    }
    if let (true, Some(a)) = (evolve_adapter, &state.adapter) {
        theta0.extend_from_slice(a.params());
    }
    let es_cfg = EsConfig { seed: rng::derive(settings.es.seed, &[tag::ES, t as u64]), ..settings.es.clone() };
    let log_every = settings.log_every.max(1);

    let mut head = state.head.clone();
    let mut adapter = state.adapter.clone();
    let fixed_adapter = adapter.as_ref().filter(|_| !evolve_adapter).map(|a| a.flatten_params());
    let fixed_head = (!evolve_head).then(|| head.flatten_params());
    let mut objective = TaskObjective::new(state, &task.train, &settings.loss, layout, fixed_head, fixed_adapter, seed)?;
    let mut es = EsState::new(theta0, es_cfg)?;
    let gradient_steps = !evolve_head || (adapter.is_some() && !evolve_adapter);
    for g in 0..settings.es.generations {
        es_step(&mut es, &mut objective)?;
        if gradient_steps {
            let latent = forward_params(state.extractor.spec(), &es.theta[..ext_len], objective.batch_inputs.view())?;
            if let (false, Some(adapter), Some(frozen)) = (evolve_adapter, adapter.as_mut(), &objective.batch_frozen) {
                let (_, grad) = adapter.loss_and_gradient(frozen.view(), Loss::Mse(latent.view()))?;
                adapter.sgd_step(&grad, settings.sgd.lr)?;
                objective.fixed_adapter = Some(adapter.flatten_params());
            }
            if !evolve_head {
                let adapted_mem = match (&adapter, &objective.layout.adapter) {
                    (_, Some(r)) => Some(forward_params(
                        adapter.as_ref().expect("evolved adapter exists").spec(),
                        &es.theta[r.clone()],
                        objective.batch_mem_latents.view(),
                    )?),
                    (Some(a), None) => Some(a.forward(objective.batch_mem_latents.view())?),
                    (None, None) => None,
                };
                let (_, mut grad) = head.loss_and_gradient(latent.view(), Loss::CrossEntropy(&objective.batch_columns))?;
                if let Some(mem) = &adapted_mem {
                    let (_, g_mem) = head.loss_and_gradient(mem.view(), Loss::CrossEntropy(&objective.batch_mem_columns))?;
                    grad.iter_mut().zip(&g_mem).for_each(|(a, b)| *a += b);
                }
                head.sgd_step(&grad, settings.sgd.lr)?;
                objective.fixed_head = Some(head.flatten_params());
            }
            objective.refresh_adapted()?;
        }
        if (g + 1) % log_every == 0 {
            log::info!("task {} generation {}: objective {:.4}", t + 1, g + 1, objective.loss(&es.theta));
        }
    }
    let last = objective.loss(&es.theta);
    drop(objective);
    state.head = head;
    state.adapter = adapter;
    Ok((es.theta, es.generation, last))
}

/// Gradient of the composite loss with respect to the adapter only; exposed
/// for checking the alternating mode.
pub fn adapter_alignment_gradient(adapter: &DenseNet, frozen_latents: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<Vec<f64>> {
    let out = adapter.forward(frozen_latents)?;
    let (_, dout) = Loss::Mse(target).value_and_grad(out.view())?;
    backprop(adapter.spec(), adapter.params(), frozen_latents, dout, false).map(|(g, _)| g)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use approx::assert_abs_diff_eq;
    use ndarray::array;

    use super::*;
    use crate::data::{class_order, make_synthetic, split_tasks};

    fn blob_view(classes: usize, per_class: usize, dim: usize, seed: u64) -> DataView {
        DataView::all(Arc::new(make_synthetic(classes, per_class, dim, 0.05, seed).unwrap()))
    }

    #[test]
    fn memory_counts_and_determinism() {
        let view = blob_view(4, 30, 6, 1);
        let ext = DenseNet::init(LayerSpec::new(vec![6, 8, 3], Activation::Relu).unwrap(), 2).unwrap();
        let mut mem = FeatureMemory::new(20, 3).unwrap();
        mem.store_features(&ext, &view, &[1, 3], 9).unwrap();
        assert_eq!(mem.total_vectors(), 40);
        assert_eq!(mem.classes(), vec![1, 3]);
        let mut again = FeatureMemory::new(20, 3).unwrap();
        again.store_features(&ext, &view, &[1, 3], 9).unwrap();
        assert_eq!(mem, again);
        let mut other = FeatureMemory::new(20, 3).unwrap();
        other.store_features(&ext, &view, &[1, 3], 10).unwrap();
        assert_ne!(mem, other);
    }

    #[test]
    fn small_class_is_sampled_with_replacement() {
        let view = blob_view(2, 5, 4, 3);
        let ext = DenseNet::init(LayerSpec::new(vec![4, 6, 3], Activation::Relu).unwrap(), 1).unwrap();
        let mut mem = FeatureMemory::new(20, 3).unwrap();
        mem.store_features(&ext, &view, &[0], 0).unwrap();
        let stored = mem.get(0).unwrap();
        assert_eq!(stored.nrows(), 20);
        let candidates = ext.forward(view.inputs_at(&[0, 1, 2, 3, 4]).view()).unwrap();
        let mut distinct: Vec<usize> = stored
            .rows()
            .into_iter()
            .map(|r| candidates.rows().into_iter().position(|c| c == r).expect("stored latent comes from the class"))
            .collect();
        distinct.sort_unstable();
        distinct.dedup();
        assert_eq!(distinct.len(), 5);
    }

    #[test]
    fn missing_class_is_named() {
        let view = blob_view(2, 5, 4, 3);
        let ext = DenseNet::init(LayerSpec::new(vec![4, 3], Activation::Relu).unwrap(), 1).unwrap();
        let mut mem = FeatureMemory::new(4, 3).unwrap();
        let err = mem.store_features(&ext, &view, &[7], 0).unwrap_err();
        assert!(err.to_string().contains("class 7"), "{err}");
    }

    #[test]
    fn identity_adapters() {
        let x = Array2::from_shape_fn((5, 4), |(i, j)| (i as f64 - 2.0) * 0.3 + j as f64 * 0.1);
        for kind in [AdapterKind::Mlp, AdapterKind::Linear] {
            let a = init_adapter(kind, 4, 0.0, 0).unwrap();
            let y = adapt_features(&a, x.view()).unwrap();
            assert_eq!(y.dim(), (5, 4));
            assert_eq!(y, x, "{kind:?}");
            assert_eq!(y, a.forward(x.view()).unwrap());
        }
        assert_eq!(init_adapter(AdapterKind::Mlp, 4, 0.0, 0).unwrap().spec().widths, vec![4, 8, 4]);
        let noisy = init_adapter(AdapterKind::Mlp, 4, 1e-3, 5).unwrap();
        let y = noisy.forward(x.view()).unwrap();
        assert!((&y - &x).iter().all(|d| d.abs() < 0.05));
        assert_ne!(y, x);
    }

    #[test]
    fn extraction_delegates_to_forward() {
        let ext = DenseNet::init(LayerSpec::new(vec![4, 5, 3], Activation::Relu).unwrap(), 8).unwrap();
        let x = Array2::from_shape_fn((6, 4), |(i, j)| ((i + j) % 3) as f64 * 0.4);
        let f = extract_features(&ext, x.view()).unwrap();
        assert_eq!(f.ncols(), 3);
        assert_eq!(f, ext.forward(x.view()).unwrap());
        let zero = DenseNet::zeros(ext.spec().clone()).unwrap();
        assert!(extract_features(&zero, x.view()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn remap_identity_and_composition() {
        let view = blob_view(3, 10, 5, 2);
        let ext = DenseNet::init(LayerSpec::new(vec![5, 6, 4], Activation::Relu).unwrap(), 3).unwrap();
        let mut mem = FeatureMemory::new(6, 4).unwrap();
        mem.store_features(&ext, &view, &[0, 1, 2], 1).unwrap();

        let id = init_adapter(AdapterKind::Mlp, 4, 0.0, 0).unwrap();
        assert_eq!(mem.remap(&id).unwrap(), mem);

        let a = DenseNet::init(LayerSpec::linear(4, 4).unwrap(), 10).unwrap();
        let b = DenseNet::init(LayerSpec::linear(4, 4).unwrap(), 11).unwrap();
        let chained = mem.remap(&a).unwrap().remap(&b).unwrap();
        // B(A x) = x Wa Wb + (ba Wb + bb)
        let w = a.weights(0).dot(&b.weights(0));
        let bias = a.biases(0).dot(&b.weights(0)) + b.biases(0);
        let mut params = w.iter().copied().collect::<Vec<_>>();
        params.extend(bias.iter());
        let composed = DenseNet::from_params(LayerSpec::linear(4, 4).unwrap(), params).unwrap();
        let direct = mem.remap(&composed).unwrap();
        assert_eq!(chained.classes(), mem.classes());
        for c in mem.classes() {
            assert_eq!(chained.get(c).unwrap().nrows(), 6);
            for (x, y) in chained.get(c).unwrap().iter().zip(direct.get(c).unwrap()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-10);
            }
        }
    }

    /// Hand-built toy: 2 inputs, extractor with one hidden relu unit and a
    /// 1-dimensional latent, a 2-class head, a 1x1 linear adapter.
    fn toy_state() -> ClState {
        let ext_spec = LayerSpec::new(vec![2, 1, 1], Activation::Relu).unwrap();
        // hidden = relu(0.5 x0 - 0.25 x1 + 0.1); latent = 2 hidden - 0.3
        let ext = DenseNet::from_params(ext_spec.clone(), vec![0.5, -0.25, 0.1, 2.0, -0.3]).unwrap();
        let frozen = DenseNet::from_params(ext_spec, vec![1.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let head = DenseNet::from_params(LayerSpec::linear(1, 2).unwrap(), vec![1.5, -1.0, 0.2, 0.0]).unwrap();
        let adapter = DenseNet::from_params(LayerSpec::linear(1, 1).unwrap(), vec![0.8, 0.1]).unwrap();
        let mut memory = FeatureMemory::new(1, 1).unwrap();
        memory.insert(0, array![[0.7]]).unwrap();
        ClState {
            extractor: ext,
            head,
            memory,
            seen_classes: vec![0, 1],
            task_index: 1,
            frozen_prev: Some(frozen),
            adapter: Some(adapter),
            seed: 0,
        }
    }

    #[test]
    fn composite_loss_matches_hand_computation() {
        let state = toy_state();
        let x = array![[1.0, 2.0]];
        let cfg = LossConfig { alpha: 0.7, batch_new: 1, batch_mem: 1 };
        let candidate = state.concatenated_params(true);
        let got = state.combined_loss(&candidate, x.view(), &[1], Some((array![[0.7]].view(), &[0])), &cfg).unwrap();

        let ce = |z0: f64, z1: f64, label: usize| {
            let lse = (z0.exp() + z1.exp()).ln();
            lse - if label == 0 { z0 } else { z1 }
        };
        let hidden = (0.5 * 1.0 - 0.25 * 2.0 + 0.1f64).max(0.0);
        let latent = 2.0 * hidden - 0.3;
        let new_term = ce(1.5 * latent + 0.2, -latent, 1);
        let m = 0.8 * 0.7 + 0.1;
        let past_term = ce(1.5 * m + 0.2, -m, 0);
        let frozen_latent = (1.0f64 * 1.0).max(0.0);
        let aligned = 0.8 * frozen_latent + 0.1;
        let mse_term = (aligned - latent).powi(2);
        assert_abs_diff_eq!(got, new_term + past_term + 0.7 * mse_term, epsilon = 1e-10);
    }

    #[test]
    fn first_task_loss_is_plain_cross_entropy() {
        let mut state = toy_state();
        state.frozen_prev = None;
        state.adapter = None;
        state.task_index = 0;
        let x = array![[1.0, 2.0], [0.3, -0.4]];
        let cfg = LossConfig::default();
        let candidate = state.concatenated_params(false);
        let got = state.combined_loss(&candidate, x.view(), &[1, 0], None, &cfg).unwrap();
        let logits = state.head.forward(state.extractor.forward(x.view()).unwrap().view()).unwrap();
        assert_eq!(got, softmax_cross_entropy(logits.view(), &[1, 0]).unwrap());
    }

    #[test]
    fn zero_alpha_ignores_the_frozen_extractor() {
        let mut state = toy_state();
        let x = array![[1.0, 2.0], [0.5, 0.1]];
        let cfg = LossConfig { alpha: 0.0, batch_new: 2, batch_mem: 1 };
        let candidate = state.concatenated_params(true);
        let mem = array![[0.7]];
        let before = state.combined_loss(&candidate, x.view(), &[1, 0], Some((mem.view(), &[0])), &cfg).unwrap();
        state.frozen_prev = Some(DenseNet::init(state.extractor.spec().clone(), 99).unwrap());
        let after = state.combined_loss(&candidate, x.view(), &[1, 0], Some((mem.view(), &[0])), &cfg).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn alpha_enters_affinely() {
        let state = toy_state();
        let x = array![[1.0, 2.0]];
        let mem = array![[0.7]];
        let candidate = state.concatenated_params(true);
        let at = |alpha: f64| {
            let cfg = LossConfig { alpha, batch_new: 1, batch_mem: 1 };
            state.combined_loss(&candidate, x.view(), &[1], Some((mem.view(), &[0])), &cfg).unwrap()
        };
        let (l0, l1, l2) = (at(0.0), at(1.0), at(2.0));
        assert!(l1 >= l0 && l2 >= l1);
        assert_abs_diff_eq!(l2 - l1, l1 - l0, epsilon = 1e-12);
    }

    #[test]
    fn loss_errors() {
        let state = toy_state();
        let x = array![[1.0, 2.0]];
        let cfg = LossConfig::default();
        let short = vec![0.0; 3];
        assert!(matches!(state.combined_loss(&short, x.view(), &[1], Some((array![[0.7]].view(), &[0])), &cfg), Err(Error::Shape(_))));
        let candidate = state.concatenated_params(true);
        assert!(state.combined_loss(&candidate, x.view(), &[1], None, &cfg).is_err());
        let empty = Array2::<f64>::zeros((0, 1));
        assert!(matches!(state.combined_loss(&candidate, x.view(), &[1], Some((empty.view(), &[])), &cfg), Err(Error::Empty(_))));
    }

    #[test]
    fn prediction_ties_and_single_class() {
        let mut state = ClState::new(LayerSpec::new(vec![3, 4, 2], Activation::Relu).unwrap(), 2, 0).unwrap();
        state.seen_classes = vec![5];
        state.head = DenseNet::init(LayerSpec::linear(2, 1).unwrap(), 1).unwrap();
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i * j) as f64);
        assert_eq!(state.predict(x.view()).unwrap(), vec![5; 4]);

        state.seen_classes = vec![3, 1, 2];
        state.extractor = DenseNet::zeros(state.extractor.spec().clone()).unwrap();
        state.head = DenseNet::zeros(LayerSpec::linear(2, 3).unwrap()).unwrap();
        assert_eq!(state.predict(x.view()).unwrap(), vec![3; 4]);
    }

    fn blob_stream(seed: u64) -> crate::data::TaskStream {
        let train = Arc::new(make_synthetic(4, 60, 8, 0.05, seed).unwrap());
        let test = Arc::new(make_synthetic(4, 30, 8, 0.05, seed + 100).unwrap());
        split_tasks(train, test, 2, &class_order(4, None), seed).unwrap()
    }

    fn small_settings() -> TrainSettings {
        TrainSettings {
            es: EsConfig { population: 16, sigma: 0.05, lr: 0.05, generations: 30, seed: 1 },
            loss: LossConfig { alpha: 1.0, batch_new: 32, batch_mem: 32 },
            sgd: SgdConfig { epochs: 20, lr: 0.1, batch_size: 16 },
            ..TrainSettings::default()
        }
    }

    #[test]
    fn protocol_bookkeeping() {
        let stream = blob_stream(4);
        let mut state = ClState::new(LayerSpec::new(vec![8, 12, 6], Activation::Relu).unwrap(), 5, 3).unwrap();
        let settings = small_settings();

        let r1 = train_task(&mut state, &stream.tasks[0], &settings).unwrap();
        assert_eq!(r1.optimizer, "gradient");
        assert_eq!(state.head.spec().output_width(), 2);
        assert_eq!(state.memory.classes(), vec![0, 1]);
        assert!(state.frozen_prev.is_none());
        assert_eq!(state.task_index, 1);

        let before = state.extractor.clone();
        let r2 = train_task(&mut state, &stream.tasks[1], &settings).unwrap();
        assert_eq!(r2.generations, 30);
        assert_eq!(state.frozen_prev.as_ref().unwrap(), &before);
        assert_ne!(state.extractor, before);
        assert_eq!(state.head.spec().output_width(), 4);
        assert_eq!(state.memory.classes(), vec![0, 1, 2, 3]);
        for c in 0..4 {
            assert_eq!(state.memory.get(c).unwrap().dim(), (5, 6));
        }
        assert!(train_task(&mut state, &stream.tasks[1], &settings).is_err());
    }

    #[test]
    fn adapter_modes() {
        let stream = blob_stream(5);
        let initial = init_adapter(AdapterKind::Mlp, 6, 1e-3, rng::derive(3, &[tag::ADAPTER, 1])).unwrap();
        for mode in [AdapterMode::Alternating, AdapterMode::JointEs] {
            let mut state = ClState::new(LayerSpec::new(vec![8, 12, 6], Activation::Relu).unwrap(), 5, 3).unwrap();
            let settings = TrainSettings { adapter_mode: mode, ..small_settings() };
            train_task(&mut state, &stream.tasks[0], &settings).unwrap();
            let r = train_task(&mut state, &stream.tasks[1], &settings).unwrap();
            assert_eq!(r.generations, 30);
            assert!(r.final_loss.is_finite());
            assert_ne!(state.adapter.as_ref().unwrap(), &initial, "{mode:?}");
        }
    }

    #[test]
    fn adapter_gradient_matches_finite_differences() {
        let adapter = init_adapter(AdapterKind::Mlp, 3, 0.1, 4).unwrap();
        let x = Array2::from_shape_fn((4, 3), |(i, j)| ((i * 3 + j) as f64).cos());
        let target = Array2::from_shape_fn((4, 3), |(i, j)| ((i + 2 * j) as f64).sin());
        let g = adapter_alignment_gradient(&adapter, x.view(), target.view()).unwrap();
        let h = 1e-6;
        for i in 0..adapter.param_count() {
            let mut p = adapter.flatten_params();
            p[i] += h;
            let up = mse(forward_params(adapter.spec(), &p, x.view()).unwrap().view(), target.view()).unwrap();
            p[i] -= 2.0 * h;
            let down = mse(forward_params(adapter.spec(), &p, x.view()).unwrap().view(), target.view()).unwrap();
            assert!(((up - down) / (2.0 * h) - g[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn es_first_task_option() {
        let stream = blob_stream(6);
        let mut state = ClState::new(LayerSpec::new(vec![8, 12, 6], Activation::Relu).unwrap(), 5, 3).unwrap();
        let settings = TrainSettings { first_task: FirstTaskOptimizer::Es, ..small_settings() };
        let r = train_task(&mut state, &stream.tasks[0], &settings).unwrap();
        assert_eq!(r.optimizer, "es");
        assert_eq!(r.generations, 30);
    }

    #[test]
    fn head_optimizers() {
        let stream = blob_stream(8);
        for head in [HeadOptimizer::Es, HeadOptimizer::Gradient] {
            let mut state = ClState::new(LayerSpec::new(vec![8, 12, 6], Activation::Relu).unwrap(), 5, 3).unwrap();
            let settings = TrainSettings { head, adapter_mode: AdapterMode::Alternating, ..small_settings() };
            train_task(&mut state, &stream.tasks[0], &settings).unwrap();
            let fresh = DenseNet::init(LayerSpec::linear(6, 4).unwrap(), state.head_seed(1)).unwrap();
            let r = train_task(&mut state, &stream.tasks[1], &settings).unwrap();
            assert!(r.final_loss.is_finite());
            assert_ne!(state.head, fresh, "{head:?}");
            if head == HeadOptimizer::Gradient {
                let (m, labels) = state.memory.pooled();
                let logits = state.head.forward(m.view()).unwrap();
                let hits = logits
                    .rows()
                    .into_iter()
                    .zip(&labels)
                    .filter(|(row, &l)| row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0 == l)
                    .count();
                assert!(hits as f64 >= 0.9 * labels.len() as f64, "{hits} of {}", labels.len());
            }
        }
    }

    /// Put `state` in the position `train_task` reaches just before evolving task 2.
    fn second_task_state(widths: Vec<usize>, stream: &crate::data::TaskStream) -> ClState {
        let mut state = ClState::new(LayerSpec::new(widths, Activation::Relu).unwrap(), 5, 3).unwrap();
        train_task(&mut state, &stream.tasks[0], &small_settings()).unwrap();
        state.frozen_prev = Some(state.extractor.clone());
        state.extend_classes(&stream.tasks[1].classes).unwrap();
        let latent = state.latent_dim();
        state.head = DenseNet::init(LayerSpec::linear(latent, 4).unwrap(), 8).unwrap();
        state.adapter = Some(init_adapter(AdapterKind::Mlp, latent, 0.1, 9).unwrap());
        state
    }

    #[test]
    fn shared_first_layer_matches_direct_evaluation() {
        let stream = blob_stream(7);
        let loss = LossConfig { alpha: 0.7, batch_new: 16, batch_mem: 8 };
        for widths in [vec![8, 12, 6], vec![8, 6]] {
            let state = second_task_state(widths, &stream);
            let adapter = state.adapter.as_ref().unwrap();
            for (joint, evolve_head) in [(true, true), (false, true), (false, false), (true, false)] {
                let layout = ParamLayout::new(
                    state.extractor.param_count(),
                    evolve_head.then(|| state.head.param_count()),
                    joint.then(|| adapter.param_count()),
                );
                let fixed_head = (!evolve_head).then(|| state.head.flatten_params());
                let fixed_adapter = (!joint).then(|| adapter.flatten_params());
                let mut objective =
                    TaskObjective::new(&state, &stream.tasks[1].train, &loss, layout, fixed_head, fixed_adapter, 11).unwrap();
                let mut theta = state.extractor.flatten_params();
                if evolve_head {
                    theta.extend_from_slice(state.head.params());
                }
                if joint {
                    theta.extend_from_slice(adapter.params());
                }
                objective.begin_generation(3, &theta).unwrap();
                let mut rng = rng::stream(5, &[]);
                let eps: Vec<f64> = (0..theta.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
                let sigma = 0.03;
                let (plus, minus) = objective.pair_losses(&theta, &eps, sigma);
                let shifted = |sign: f64| -> Vec<f64> { theta.iter().zip(&eps).map(|(t, e)| t + sign * sigma * e).collect() };
                assert_abs_diff_eq!(plus, objective.loss(&shifted(1.0)), epsilon = 1e-10);
                assert_abs_diff_eq!(minus, objective.loss(&shifted(-1.0)), epsilon = 1e-10);
                assert!(objective.parts(&theta).unwrap().alignment > 0.0);
            }
        }
    }
}
