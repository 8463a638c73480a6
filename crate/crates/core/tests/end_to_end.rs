use std::sync::Arc;

use evocl::cl::{train_task, ClState, TrainSettings};
use evocl::config::{parse_config, ExperimentConfig, Method, Overrides};
use evocl::data::{class_order, make_synthetic, split_tasks, synthetic_center, DatasetKind};
use evocl::es::EsConfig;
use evocl::eval::evaluate_stage;
use evocl::nn::{Activation, LayerSpec};
use evocl::runner::{run_experiment, run_repeated};
use evocl::sgd::SgdConfig;

fn synthetic(method: Method) -> ExperimentConfig {
    let text = "tasks = 2\n[net]\nhidden = [24, 24]\nlatent = 8\n[es]\ngenerations = 60\npopulation = 16\n[sgd]\nepochs = 30\n\
                [synthetic]\ntrain_per_class = 80\ntest_per_class = 40\ninput_dim = 8\n";
    let overrides = Overrides { dataset: Some(DatasetKind::Synthetic), method: Some(method), ..Overrides::default() };
    parse_config(text, &overrides).unwrap()
}

#[test]
fn same_seed_same_result_at_any_thread_count() {
    let cfg = synthetic(Method::Evocl);
    let a = run_experiment(&ExperimentConfig { threads: 1, ..cfg.clone() }).unwrap();
    let b = run_experiment(&ExperimentConfig { threads: 3, ..cfg.clone() }).unwrap();
    let mut b = b.without_timing();
    b.config.threads = 1;
    assert_eq!(a.without_timing(), b);
    let c = run_experiment(&ExperimentConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.tasks[1].final_loss, c.tasks[1].final_loss);
}

#[test]
fn joint_beats_finetune_on_blobs() {
    let joint = run_experiment(&synthetic(Method::Joint)).unwrap();
    let finetune = run_experiment(&synthetic(Method::Finetune)).unwrap();
    assert!(joint.a_last >= 0.99, "joint {}", joint.a_last);
    assert!(finetune.a_last < joint.a_last);
    let per_task = &finetune.matrix.after_task[1].per_task_accuracy;
    assert!(per_task[0] < 0.5, "fine-tuning should forget task 1: {per_task:?}");
}

#[test]
fn metrics_follow_the_matrix() {
    let r = run_experiment(&synthetic(Method::Finetune)).unwrap();
    let cum = r.matrix.cumulative();
    assert_eq!(r.a_last, *cum.last().unwrap());
    assert!((r.a_inc - cum.iter().sum::<f64>() / cum.len() as f64).abs() < 1e-12);
    if cum.windows(2).all(|w| w[1] <= w[0]) {
        assert!(r.a_inc >= r.a_last);
    }
    for (k, rec) in r.matrix.after_task.iter().enumerate() {
        assert_eq!(rec.per_task_accuracy.len(), k + 1);
        assert!(rec.per_task_accuracy.iter().all(|a| (0.0..=1.0).contains(a)));
    }
}

#[test]
fn repeated_runs_summarize() {
    let s = run_repeated(&synthetic(Method::Joint), 3).unwrap();
    assert_eq!(s.runs.len(), 3);
    let values: Vec<f64> = s.runs.iter().map(|r| r.a_last).collect();
    let mean = values.iter().sum::<f64>() / 3.0;
    assert!((s.a_last.mean - mean).abs() < 1e-15);
}

#[test]
fn trained_model_agrees_with_nearest_center() {
    let train = Arc::new(make_synthetic(4, 100, 10, 0.08, 1).unwrap());
    let test = Arc::new(make_synthetic(4, 100, 10, 0.08, 2).unwrap());
    let stream = split_tasks(train, test.clone(), 1, &class_order(4, None), 0).unwrap();
    let mut state = ClState::new(LayerSpec::new(vec![10, 32, 32, 8], Activation::Relu).unwrap(), 5, 7).unwrap();
    let settings = TrainSettings { sgd: SgdConfig { epochs: 20, lr: 0.1, batch_size: 32 }, ..TrainSettings::default() };
    train_task(&mut state, &stream.tasks[0], &settings).unwrap();

    let centers: Vec<Vec<f64>> = (0..4).map(|c| synthetic_center(c, 10)).collect();
    let nearest: Vec<usize> = test
        .inputs
        .rows()
        .into_iter()
        .map(|x| {
            let dist = |c: &Vec<f64>| x.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            (0..4).min_by(|&a, &b| dist(&centers[a]).total_cmp(&dist(&centers[b]))).unwrap()
        })
        .collect();
    let predicted = state.predict(test.inputs.view()).unwrap();
    let agree = predicted.iter().zip(&nearest).filter(|(a, b)| a == b).count() as f64 / nearest.len() as f64;
    assert!(agree >= 0.95, "agreement with nearest center {agree}");
}

#[test]
fn es_first_task_learns_blobs() {
    let train = Arc::new(make_synthetic(2, 60, 6, 0.05, 3).unwrap());
    let test = Arc::new(make_synthetic(2, 30, 6, 0.05, 4).unwrap());
    let stream = split_tasks(train, test, 1, &class_order(2, None), 0).unwrap();
    let mut state = ClState::new(LayerSpec::new(vec![6, 12, 4], Activation::Relu).unwrap(), 5, 1).unwrap();
    let settings = TrainSettings {
        first_task: evocl::cl::FirstTaskOptimizer::Es,
        es: EsConfig { population: 32, sigma: 0.05, lr: 0.05, generations: 150, seed: 2 },
        ..TrainSettings::default()
    };
    let report = train_task(&mut state, &stream.tasks[0], &settings).unwrap();
    assert_eq!(report.optimizer, "es");
    let acc = evaluate_stage(&state, &[&stream.tasks[0].test]).unwrap().cumulative_accuracy;
    assert!(acc >= 0.95, "accuracy {acc}");
}
