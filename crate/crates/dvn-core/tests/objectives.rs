//! Objective construction, gradient aggregation, and the training loops on
//! desk-scale synthetic tasks.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dvn_core::backbone::{init_params, mlp_preset, BackboneSpec, ModelParams, TaskInfo};
use dvn_core::data::gen_blobs_counts;
use dvn_core::partition::{TaskId, UnitPartition, VirtualNetConfig};
use dvn_core::trainer::{
    distill_targets, evaluate, eval_objective, grad_objective, joint_grad, joint_loss,
    joint_term_plan, sequential_loss, train_joint, train_single, Batch, Feeds, TaskBundle,
    TaskData, TermKind, TrainConfig,
};

fn fixture(
    k: usize,
    classes: usize,
) -> (
    BackboneSpec,
    UnitPartition,
    Vec<VirtualNetConfig>,
    TaskBundle,
) {
    let mut tasks = Vec::new();
    let mut infos = Vec::new();
    for i in 1..=k {
        let (train, test) =
            gen_blobs_counts(classes, 30, 10, &[2], 1.0, 40 + i as u64, i).unwrap();
        infos.push(TaskInfo {
            id: TaskId(i),
            class_count: classes,
            input_shape: vec![2],
        });
        tasks.push(TaskData {
            task: TaskId(i),
            train,
            test,
        });
    }
    let (spec, partition, configs) = mlp_preset(infos, k).unwrap();
    (spec, partition, configs, TaskBundle { tasks })
}

fn batches_for(bundle: &TaskBundle, n: usize) -> Vec<Batch> {
    bundle
        .tasks
        .iter()
        .map(|t| {
            let idx: Vec<usize> = (0..n).collect();
            let (features, labels) = t.train.gather(&idx).unwrap();
            Batch {
                features,
                labels,
                indices: idx,
            }
        })
        .collect()
}

fn grads_snapshot(params: &ModelParams) -> BTreeMap<String, Vec<f64>> {
    params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.grad_or_zeros()))
        .collect()
}

#[test]
fn joint_objective_has_k_times_levels_terms() {
    let (spec, partition, configs, bundle) = fixture(2, 3);
    let params = init_params(&spec, 7).unwrap();
    let batches = batches_for(&bundle, 8);
    let breakdown = joint_loss(&params, &spec, &partition, &configs, &batches, 0.01).unwrap();
    assert_eq!(breakdown.terms.len(), 4);
    let sum: f64 = breakdown.terms.iter().map(|t| t.value).sum();
    assert!((breakdown.total - (sum + breakdown.decay)).abs() <= 1e-12);
    assert!(breakdown.decay > 0.0);
}

#[test]
fn single_task_reduces_to_per_level_sum() {
    let (spec, partition, configs, bundle) = fixture(1, 3);
    let params = init_params(&spec, 7).unwrap();
    let batches = batches_for(&bundle, 8);
    let breakdown = joint_loss(&params, &spec, &partition, &configs, &batches, 0.0).unwrap();
    assert_eq!(breakdown.terms.len(), 1); // k = 1 means one unit, one level
    assert_eq!(breakdown.decay, 0.0);
}

#[test]
fn full_gradient_equals_sum_of_per_term_gradients() {
    let (spec, partition, configs, bundle) = fixture(3, 3);
    let batches = batches_for(&bundle, 6);

    let mut full = init_params(&spec, 11).unwrap();
    joint_grad(&mut full, &spec, &partition, &configs, &batches, 0.0).unwrap();
    let full_grads = grads_snapshot(&full);

    let terms = joint_term_plan(&partition, &configs).unwrap();
    let mut summed: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for term in &terms {
        let mut p = init_params(&spec, 11).unwrap();
        let feeds = Feeds::labeled(
            configs
                .iter()
                .map(|c| c.task)
                .zip(batches.iter())
                .collect(),
        );
        grad_objective(&mut p, &spec, std::slice::from_ref(term), &feeds, 0.0).unwrap();
        for (name, g) in grads_snapshot(&p) {
            let acc = summed.entry(name).or_insert_with(|| vec![0.0; g.len()]);
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += v;
            }
        }
    }

    for (name, f) in &full_grads {
        let s = &summed[name];
        for (a, b) in f.iter().zip(s) {
            let diff = (a - b).abs();
            assert!(
                diff <= 1e-10 * a.abs().max(b.abs()).max(1.0),
                "{}: {} vs {}",
                name,
                a,
                b
            );
        }
    }
}

#[test]
fn single_term_gradient_respects_entry_levels() {
    // term (level 1, task 2) with k = 3 touches only unit 2's blocks
    let (spec, partition, configs, bundle) = fixture(3, 3);
    let batches = batches_for(&bundle, 6);
    let terms = joint_term_plan(&partition, &configs).unwrap();
    let term = terms
        .iter()
        .find(|t| t.task == TaskId(2) && t.level == 1)
        .unwrap();
    let mut params = init_params(&spec, 13).unwrap();
    let feeds = Feeds::labeled(
        configs
            .iter()
            .map(|c| c.task)
            .zip(batches.iter())
            .collect(),
    );
    grad_objective(&mut params, &spec, std::slice::from_ref(term), &feeds, 0.0).unwrap();
    let grads = grads_snapshot(&params);

    // units own 8-channel groups: unit 1 -> 0..8, unit 2 -> 8..16, unit 3 -> 16..24
    for layer in ["body.0.weight", "body.1.weight"] {
        let g = &grads[layer];
        let mut nonzero_in_unit2 = false;
        for i in 0..24 {
            for o in 0..24 {
                let v = g[i * 24 + o];
                let in2 = (8..16).contains(&i) && (8..16).contains(&o);
                if in2 {
                    nonzero_in_unit2 |= v != 0.0;
                } else {
                    assert_eq!(v, 0.0, "{} entry ({}, {}) leaked gradient", layer, i, o);
                }
            }
        }
        assert!(nonzero_in_unit2, "{} got no gradient at all", layer);
    }
}

#[test]
fn sequential_breakdown_counts_terms() {
    let (spec, partition, configs, bundle) = fixture(2, 3);
    let mut params = init_params(&spec, 17).unwrap();
    let new_train = &bundle.tasks[1].train;
    let all: Vec<usize> = (0..new_train.samples).collect();
    let (new_features, _) = new_train.gather(&all).unwrap();
    let targets = distill_targets(&params, &spec, &partition, &configs[..1], &new_features, 2.0)
        .unwrap();
    let idx: Vec<usize> = (0..8).collect();
    let (features, labels) = new_train.gather(&idx).unwrap();
    let batch = Batch {
        features,
        labels,
        indices: idx,
    };
    let breakdown = sequential_loss(
        &mut params,
        &spec,
        &partition,
        &configs,
        TaskId(2),
        &batch,
        &targets,
        2.0,
        0.0,
    )
    .unwrap();
    assert_eq!(breakdown.terms.len(), 4);
    let distill_count = breakdown
        .terms
        .iter()
        .filter(|t| t.kind == TermKind::Distill)
        .count();
    assert_eq!(distill_count, 2);
}

#[test]
fn distill_targets_are_deterministic_and_missing_targets_error() {
    let (spec, partition, configs, bundle) = fixture(2, 3);
    let params = init_params(&spec, 19).unwrap();
    let all: Vec<usize> = (0..bundle.tasks[1].train.samples).collect();
    let (features, _) = bundle.tasks[1].train.gather(&all).unwrap();
    let a = distill_targets(&params, &spec, &partition, &configs[..1], &features, 2.0).unwrap();
    let b = distill_targets(&params, &spec, &partition, &configs[..1], &features, 2.0).unwrap();
    assert_eq!(a, b);
    assert!(a.row(TaskId(1), 1, 0).is_ok());
    assert!(a.row(TaskId(1), 1, 10_000).is_err());
    assert!(a.row(TaskId(2), 1, 0).is_err());
}

#[test]
fn evaluate_scores_separable_data_perfectly_and_shuffled_labels_near_chance() {
    // near-zero spread: any trained model should be perfect at the top level
    let (train, test) = gen_blobs_counts(4, 40, 25, &[2], 1e-3, 5, 1).unwrap();
    let infos = vec![TaskInfo {
        id: TaskId(1),
        class_count: 4,
        input_shape: vec![2],
    }];
    let (spec, partition, configs) = mlp_preset(infos, 1).unwrap();
    let bundle = TaskBundle {
        tasks: vec![TaskData {
            task: TaskId(1),
            train,
            test,
        }],
    };
    let cfg = TrainConfig {
        epochs: 40,
        batch_size: 16,
        schedule: vec![(0, 0.1)],
        weight_decay: 0.0,
        seed: 3,
        ..TrainConfig::default()
    };
    let out = train_joint(&bundle, &spec, &partition, &configs, &cfg).unwrap();
    let acc = evaluate(
        &out.params,
        &spec,
        &partition,
        &configs,
        &bundle,
        TaskId(1),
        1,
    )
    .unwrap();
    assert_eq!(acc, 1.0);
    let again = evaluate(
        &out.params,
        &spec,
        &partition,
        &configs,
        &bundle,
        TaskId(1),
        1,
    )
    .unwrap();
    assert_eq!(acc, again);

    // destroying the label assignment drops the same model to chance
    let mut shuffled = bundle.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    shuffled.tasks[0].test.labels.shuffle(&mut rng);
    let chance = evaluate(
        &out.params,
        &spec,
        &partition,
        &configs,
        &shuffled,
        TaskId(1),
        1,
    )
    .unwrap();
    assert!(
        chance < 0.5,
        "label destruction should land near 1/classes, got {}",
        chance
    );
}

#[test]
fn joint_metrics_cover_every_task_and_level() {
    let (spec, partition, configs, bundle) = fixture(2, 3);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 10,
        seed: 23,
        ..TrainConfig::default()
    };
    let out = train_joint(&bundle, &spec, &partition, &configs, &cfg).unwrap();
    for task in 1..=2 {
        for level in 1..=2 {
            assert!(out
                .metrics
                .iter()
                .any(|r| r.task == TaskId(task) && r.level == level));
        }
    }
    assert_eq!(out.final_accuracy.len(), 4);
}

#[test]
fn rerun_with_same_seed_is_bitwise_identical() {
    let (spec, partition, configs, bundle) = fixture(2, 3);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 10,
        seed: 29,
        ..TrainConfig::default()
    };
    let a = train_joint(&bundle, &spec, &partition, &configs, &cfg).unwrap();
    let b = train_joint(&bundle, &spec, &partition, &configs, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn k1_joint_equals_single_task_trajectory() {
    let (spec, partition, _configs, bundle) = fixture(1, 3);
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 10,
        seed: 31,
        ..TrainConfig::default()
    };
    let joint = train_joint(
        &bundle,
        &spec,
        &partition,
        &dvn_core::partition::derive_orders(1).unwrap(),
        &cfg,
    )
    .unwrap();
    let single = train_single(&bundle, &spec, &partition, &cfg).unwrap();
    let jt = joint.params.named_tensors();
    let st = single.params.named_tensors();
    for ((an, at), (bn, bt)) in jt.iter().zip(st.iter()) {
        assert_eq!(an, bn);
        for (x, y) in at.data().iter().zip(bt.data()) {
            assert!((x - y).abs() <= 1e-12, "{}: {} vs {}", an, x, y);
        }
    }
    assert_eq!(joint.metrics, single.metrics);
}

#[test]
fn eval_objective_is_pure() {
    let (spec, partition, configs, bundle) = fixture(2, 3);
    let params = init_params(&spec, 37).unwrap();
    let before = params.clone();
    let batches = batches_for(&bundle, 8);
    let terms = joint_term_plan(&partition, &configs).unwrap();
    let feeds = Feeds::labeled(
        configs
            .iter()
            .map(|c| c.task)
            .zip(batches.iter())
            .collect(),
    );
    eval_objective(&params, &spec, &terms, &feeds, 0.1).unwrap();
    assert_eq!(params, before);
}
