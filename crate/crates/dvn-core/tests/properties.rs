//! Property tests over randomized partitions, backbones, and datasets.

use proptest::prelude::*;

use dvn_core::backbone::{BackboneSpec, LayerSpec, TaskInfo};
use dvn_core::budget::{budget_table, count_breakdown, select_level, LatencyConfig};
use dvn_core::data::{gen_blobs, load, save};
use dvn_core::partition::{
    derive_orders, entry_level, level_mask, validate, TaskId, UnitId, UnitPartition,
};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn equal_partitions_validate_for_all_k(
        k in 1usize..=6,
        layers in 1usize..=4,
        extra in 0usize..=7,
    ) {
        let width = k + extra + 1;
        let dims: Vec<(usize, usize)> = (0..layers).map(|_| (width, width)).collect();
        let partition = UnitPartition::equal(&dims, k).unwrap();
        let configs = derive_orders(k).unwrap();
        let report = validate(&partition, &configs);
        prop_assert!(report.passed(), "{:?}", report.violations);
        for j in 1..=k {
            prop_assert_eq!(entry_level(&configs, UnitId(j), TaskId(j)).unwrap(), 1);
        }
    }

    #[test]
    fn masks_nest_and_block_counts_follow_the_formula(
        k in 1usize..=5,
        kernel in prop::sample::select(vec![1usize, 3, 5]),
        extra in 0usize..=5,
    ) {
        let width = 2 * k + extra;
        let dims = vec![(width, width), (width, width)];
        let partition = UnitPartition::equal(&dims, k).unwrap();
        let configs = derive_orders(k).unwrap();
        let body: Vec<LayerSpec> = (0..2)
            .map(|_| {
                if kernel == 1 {
                    LayerSpec::dense(width, width, false, true)
                } else {
                    LayerSpec::conv(width, width, kernel, 1, false, true)
                }
            })
            .collect();
        let tasks: Vec<TaskInfo> = (1..=k)
            .map(|i| TaskInfo {
                id: TaskId(i),
                class_count: 2,
                input_shape: if kernel == 1 { vec![3] } else { vec![1, 4 * kernel, 4 * kernel] },
            })
            .collect();
        let inputs: Vec<LayerSpec> = tasks
            .iter()
            .map(|_| {
                if kernel == 1 {
                    LayerSpec::dense(3, width, false, true)
                } else {
                    LayerSpec::conv(1, width, kernel, 1, false, true)
                }
            })
            .collect();
        let spec = BackboneSpec::assemble(body, inputs, tasks, &partition, &configs).unwrap();

        for config in &configs {
            let mut prev_weights = 0usize;
            for l in 1..=config.level_count() {
                let mask = level_mask(&partition, config, l).unwrap();
                // nesting
                if l > 1 {
                    let smaller = level_mask(&partition, config, l - 1).unwrap();
                    for (a, b) in smaller.layers.iter().zip(&mask.layers) {
                        prop_assert!(a.inputs.iter().all(|i| b.inputs.contains(i)));
                        prop_assert!(a.outputs.iter().all(|o| b.outputs.contains(o)));
                    }
                }
                // block arithmetic: sum over layers of |in| x |out| x k^2
                let expect: usize = mask
                    .layers
                    .iter()
                    .map(|m| m.inputs.len() * m.outputs.len() * kernel * kernel)
                    .sum();
                let got = count_breakdown(&spec, &mask).unwrap().body_weights;
                prop_assert_eq!(got, expect);
                prop_assert!(got > prev_weights);
                prev_weights = got;
            }
        }
    }

    #[test]
    fn select_level_is_monotone(budget_steps in prop::collection::vec(0usize..6000, 1..40)) {
        let dims = vec![(8, 8)];
        let partition = UnitPartition::equal(&dims, 4).unwrap();
        let configs = derive_orders(4).unwrap();
        let tasks: Vec<TaskInfo> = (1..=4)
            .map(|i| TaskInfo { id: TaskId(i), class_count: 2, input_shape: vec![1, 8, 8] })
            .collect();
        let inputs: Vec<LayerSpec> = tasks.iter().map(|_| LayerSpec::conv(1, 8, 3, 1, false, true)).collect();
        let body = vec![LayerSpec::conv(8, 8, 3, 1, false, true)];
        let spec = BackboneSpec::assemble(body, inputs, tasks, &partition, &configs).unwrap();
        let report = budget_table(&spec, &partition, &configs, None, &LatencyConfig::default()).unwrap();

        let mut budgets = budget_steps;
        budgets.sort_unstable();
        let minimum = report.row(TaskId(1), 1).unwrap().total_params;
        let mut prev_level = 0usize;
        for b in budgets {
            if b < minimum {
                prop_assert!(select_level(&report, TaskId(1), b).is_err());
                continue;
            }
            let level = select_level(&report, TaskId(1), b).unwrap();
            prop_assert!(level >= prev_level);
            prev_level = level;
        }
    }

    #[test]
    fn dataset_files_roundtrip_bitwise(
        classes in 2usize..5,
        per_class in 10usize..30,
        seed in 0u64..500,
    ) {
        let (train, test) = gen_blobs(classes, per_class, &[2], 1.0, seed, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for (name, ds) in [("train", &train), ("test", &test)] {
            let stem = dir.path().join(name);
            save(ds, &stem).unwrap();
            let loaded = load(&stem.with_extension("json")).unwrap();
            prop_assert_eq!(ds, &loaded);
        }
    }

    #[test]
    fn different_seeds_give_different_data(seed in 0u64..1000) {
        let a = gen_blobs(2, 10, &[2], 1.0, seed, 1).unwrap();
        let b = gen_blobs(2, 10, &[2], 1.0, seed + 1, 1).unwrap();
        prop_assert_ne!(a.0.features, b.0.features);
    }
}
