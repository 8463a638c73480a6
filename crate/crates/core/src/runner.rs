//! End-to-end experiments: data, task stream, method dispatch, evaluation.

use std::sync::Arc;
use std::time::Instant;

use crate::baseline::{finetune_task, joint_fit, Classifier};
use crate::cl::{train_task, ClState, TaskReport};
use crate::config::{ExperimentConfig, Method};
use crate::data::{class_order, load_benchmark, make_synthetic, split_tasks, DataView, Dataset, DatasetKind, TaskStream};
use crate::error::{Error, Result};
use crate::eval::{evaluate_stage, AccuracyMatrix};
use crate::results::{RunResult, Summary};
use crate::rng::{self, tag};

/// Train and test sets for `cfg.dataset`.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Arc<Dataset>, Arc<Dataset>)> {
    let (train, test) = match cfg.dataset {
        DatasetKind::Synthetic => {
            let s = &cfg.synthetic;
            let seed = rng::derive(cfg.seed, &[tag::SYNTHETIC]);
            (
                make_synthetic(s.num_classes, s.train_per_class, s.input_dim, s.blob_spread, rng::derive(seed, &[0]))?,
                make_synthetic(s.num_classes, s.test_per_class, s.input_dim, s.blob_spread, rng::derive(seed, &[1]))?,
            )
        }
        kind => {
            let dir = cfg.data_dir.as_deref().ok_or_else(|| Error::Config("no data directory".into()))?;
            load_benchmark(kind, dir)?
        }
    };
    Ok((Arc::new(train), Arc::new(test)))
}

pub fn build_stream(cfg: &ExperimentConfig, train: Arc<Dataset>, test: Arc<Dataset>) -> Result<TaskStream> {
    let order = class_order(train.num_classes, cfg.class_order_seed);
    split_tasks(train, test, cfg.tasks, &order, rng::derive(cfg.seed, &[tag::SPLIT]))
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))
}

/// Run `cfg` on already loaded data.
pub fn run_with_data(cfg: &ExperimentConfig, train: Arc<Dataset>, test: Arc<Dataset>) -> Result<RunResult> {
    cfg.validate()?;
    let stream = build_stream(cfg, train, test)?;
    thread_pool(cfg.threads)?.install(|| run_stream(cfg, &stream))
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    let (train, test) = load_datasets(cfg)?;
    run_with_data(cfg, train, test)
}

/// Run `repeat` seeds starting at `cfg.seed`, loading the data once.
pub fn run_repeated(cfg: &ExperimentConfig, repeat: usize) -> Result<Summary> {
    if repeat == 0 {
        return Err(Error::Config("repeat must be at least 1".into()));
    }
    cfg.validate()?;
    let (train, test) = load_datasets(cfg)?;
    let mut runs = Vec::with_capacity(repeat);
    for i in 0..repeat as u64 {
        let run_cfg = ExperimentConfig { seed: cfg.seed + i, ..cfg.clone() };
        let (train, test) = if cfg.dataset == DatasetKind::Synthetic { load_datasets(&run_cfg)? } else { (train.clone(), test.clone()) };
        runs.push(run_with_data(&run_cfg, train, test)?);
    }
    Summary::new(runs)
}

fn run_stream(cfg: &ExperimentConfig, stream: &TaskStream) -> Result<RunResult> {
    let started = Instant::now();
    let input_dim = stream.tasks[0].train.input_dim();
    let spec = cfg.net.extractor_spec(input_dim)?;
    let tests: Vec<&DataView> = stream.tasks.iter().map(|t| &t.test).collect();
    let mut matrix = AccuracyMatrix::default();
    let mut reports = Vec::with_capacity(stream.len());

    match cfg.method {
        Method::Evocl => {
            let settings = cfg.train_settings(cfg.seed);
            let mut state = ClState::new(spec, cfg.memory.per_class, cfg.seed)?;
            for (k, task) in stream.tasks.iter().enumerate() {
                let report = train_task(&mut state, task, &settings)?;
                matrix.push(evaluate_stage(&state, &tests[..=k])?);
                log_stage(&report, &matrix);
                reports.push(report);
            }
        }
        Method::Finetune => {
            let mut model = Classifier::new(spec, cfg.seed)?;
            for (k, task) in stream.tasks.iter().enumerate() {
                let t0 = Instant::now();
                let loss = finetune_task(&mut model, task, k, &cfg.sgd, cfg.seed)?;
                let report = sgd_report(k, &task.classes, loss, t0);
                matrix.push(evaluate_stage(&model, &tests[..=k])?);
                log_stage(&report, &matrix);
                reports.push(report);
            }
        }
        Method::Joint => {
            for k in 0..stream.len() {
                let t0 = Instant::now();
                let (model, loss) = joint_fit(&spec, &stream.tasks[..=k], &cfg.sgd, cfg.seed)?;
                let report = sgd_report(k, &stream.tasks[k].classes, loss, t0);
                matrix.push(evaluate_stage(&model, &tests[..=k])?);
                log_stage(&report, &matrix);
                reports.push(report);
            }
        }
    }

    Ok(RunResult {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        class_order: stream.class_order.clone(),
        task_classes: stream.tasks.iter().map(|t| t.classes.clone()).collect(),
        a_last: matrix.a_last()?,
        a_inc: matrix.a_inc()?,
        matrix,
        tasks: reports,
        total_seconds: started.elapsed().as_secs_f64(),
    })
}

fn sgd_report(stage: usize, classes: &[usize], loss: f64, started: Instant) -> TaskReport {
    TaskReport {
        task: stage + 1,
        classes: classes.to_vec(),
        optimizer: "gradient".into(),
        generations: 0,
        final_loss: loss,
        seconds: started.elapsed().as_secs_f64(),
    }
}

fn log_stage(report: &TaskReport, matrix: &AccuracyMatrix) {
    let rec = matrix.after_task.last().expect("stage just evaluated");
    let per_task: Vec<String> = rec.per_task_accuracy.iter().map(|a| format!("{:.3}", a)).collect();
    log::info!(
        "task {} done in {:.1}s: cumulative accuracy {:.4} [{}]",
        report.task,
        report.seconds,
        rec.cumulative_accuracy,
        per_task.join(" ")
    );
}
