//! Masked forward correctness against a standalone-extraction oracle.
//!
//! The oracle materializes the masked blocks into a plain dense network and
//! runs an independent loop-nest forward (direct convolution, no patch
//! expansion, no tape). Logits must agree within 1e-12 at every
//! (task, level). Also checks that parameters outside a mask are never read.

use dvn_core::backbone::{
    conv_preset, eval_logits, forward_logits, init_params, mlp_preset, BackboneSpec, ForwardMode,
    LayerKind, ModelParams, NormKey, NormSite, TaskInfo,
};
use dvn_core::partition::{level_mask, LevelMask, TaskId, UnitPartition, VirtualNetConfig};
use dvn_core::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;

// ---------------------------------------------------------------- oracle --

struct PlainLayer {
    dense: bool,
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    weight: Vec<f64>, // dense: in_c x out_c; conv: k x k x in_c x out_c
    bias: Vec<f64>,
    norm: Option<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)>, // scale, shift, mean, var
    relu: bool,
}

struct PlainNet {
    layers: Vec<PlainLayer>,
    head_w: Vec<f64>,
    head_b: Vec<f64>,
    head_in: usize,
    classes: usize,
}

/// Copies exactly the masked blocks out of the parameter store.
fn extract(
    spec: &BackboneSpec,
    params: &ModelParams,
    mask: &LevelMask,
) -> PlainNet {
    let ti = mask.task.index();
    let mut layers = Vec::new();

    // input layer: all rows, masked output columns
    let stem = &spec.input_layers[ti];
    let stem_cols = &mask.layers[0].inputs;
    layers.push(extract_layer(
        stem.kind == LayerKind::Dense,
        stem.in_channels,
        stem.out_channels,
        stem.kernel.unwrap_or(1),
        stem.stride.unwrap_or(1),
        params.input[ti].weight.data(),
        params.input[ti].bias.data(),
        &(0..stem.in_channels).collect::<Vec<_>>(),
        stem_cols,
        stem.followed_by_norm.then(|| norm_tuple(params, mask, NormSite::Input)),
        stem.followed_by_relu,
    ));

    for (r, layer) in spec.body.iter().enumerate() {
        layers.push(extract_layer(
            layer.kind == LayerKind::Dense,
            layer.in_channels,
            layer.out_channels,
            layer.kernel.unwrap_or(1),
            layer.stride.unwrap_or(1),
            params.body[r].weight.data(),
            params.body[r].bias.data(),
            &mask.layers[r].inputs,
            &mask.layers[r].outputs,
            layer
                .followed_by_norm
                .then(|| norm_tuple(params, mask, NormSite::Body(r))),
            layer.followed_by_relu,
        ));
    }

    let head = &params.heads[ti][mask.level - 1];
    PlainNet {
        layers,
        head_w: head.weight.data().to_vec(),
        head_b: head.bias.data().to_vec(),
        head_in: head.weight.shape()[0],
        classes: head.weight.shape()[1],
    }
}

fn norm_tuple(
    params: &ModelParams,
    mask: &LevelMask,
    site: NormSite,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let np = params
        .norm(NormKey {
            task: mask.task,
            level: mask.level,
            site,
        })
        .expect("norm params exist");
    (
        np.scale.data().to_vec(),
        np.shift.data().to_vec(),
        np.running_mean.clone(),
        np.running_var.clone(),
    )
}

#[allow(clippy::too_many_arguments)]
fn extract_layer(
    dense: bool,
    full_in: usize,
    _full_out: usize,
    kernel: usize,
    stride: usize,
    weight: &[f64],
    bias: &[f64],
    rows: &[usize],
    cols: &[usize],
    norm: Option<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)>,
    relu: bool,
) -> PlainLayer {
    let (ni, no) = (rows.len(), cols.len());
    let mut w = Vec::new();
    if dense {
        for &i in rows {
            for &o in cols {
                w.push(weight[i * _full_out + o]);
            }
        }
    } else {
        for ky in 0..kernel {
            for kx in 0..kernel {
                for &i in rows {
                    for &o in cols {
                        w.push(weight[((ky * kernel + kx) * full_in + i) * _full_out + o]);
                    }
                }
            }
        }
    }
    let b: Vec<f64> = cols.iter().map(|&o| bias[o]).collect();
    PlainLayer {
        dense,
        in_c: ni,
        out_c: no,
        kernel,
        stride,
        weight: w,
        bias: b,
        norm,
        relu,
    }
}

/// Independent forward: straight loop nests, direct convolution.
fn plain_forward(net: &PlainNet, batch: &[f64], batch_n: usize, in_shape: &[usize]) -> Vec<f64> {
    let mut x = batch.to_vec();
    let mut shape: Vec<usize> = in_shape.to_vec();
    for layer in &net.layers {
        if layer.dense {
            let mut y = vec![0.0; batch_n * layer.out_c];
            for b in 0..batch_n {
                for o in 0..layer.out_c {
                    let mut acc = 0.0;
                    for i in 0..layer.in_c {
                        acc += x[b * layer.in_c + i] * layer.weight[i * layer.out_c + o];
                    }
                    y[b * layer.out_c + o] = acc + layer.bias[o];
                }
            }
            x = y;
            shape = vec![layer.out_c];
        } else {
            let (h, w) = (shape[1], shape[2]);
            let k = layer.kernel;
            let s = layer.stride;
            let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
            let mut y = vec![0.0; batch_n * layer.out_c * oh * ow];
            for b in 0..batch_n {
                for o in 0..layer.out_c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0.0;
                            for ky in 0..k {
                                for kx in 0..k {
                                    for ci in 0..layer.in_c {
                                        let xv = x[((b * layer.in_c + ci) * h + oy * s + ky) * w
                                            + ox * s
                                            + kx];
                                        let wv = layer.weight
                                            [((ky * k + kx) * layer.in_c + ci) * layer.out_c + o];
                                        acc += xv * wv;
                                    }
                                }
                            }
                            y[((b * layer.out_c + o) * oh + oy) * ow + ox] = acc + layer.bias[o];
                        }
                    }
                }
            }
            x = y;
            shape = vec![layer.out_c, oh, ow];
        }
        if let Some((scale, shift, mean, var)) = &layer.norm {
            let c = layer.out_c;
            let spatial: usize = shape[1..].iter().product::<usize>().max(1);
            for b in 0..batch_n {
                for ch in 0..c {
                    for sp in 0..spatial {
                        let idx = (b * c + ch) * spatial + sp;
                        x[idx] = scale[ch] * (x[idx] - mean[ch]) / (var[ch] + NORM_EPS).sqrt()
                            + shift[ch];
                    }
                }
            }
        }
        if layer.relu {
            for v in x.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    }
    // global mean pool
    let c = shape[0];
    let spatial: usize = shape[1..].iter().product::<usize>().max(1);
    let mut pooled = vec![0.0; batch_n * c];
    for b in 0..batch_n {
        for ch in 0..c {
            let mut acc = 0.0;
            for sp in 0..spatial {
                acc += x[(b * c + ch) * spatial + sp];
            }
            pooled[b * c + ch] = acc / spatial as f64;
        }
    }
    assert_eq!(c, net.head_in);
    let mut logits = vec![0.0; batch_n * net.classes];
    for b in 0..batch_n {
        for o in 0..net.classes {
            let mut acc = 0.0;
            for i in 0..net.head_in {
                acc += pooled[b * net.head_in + i] * net.head_w[i * net.classes + o];
            }
            logits[b * net.classes + o] = acc + net.head_b[o];
        }
    }
    logits
}

// ----------------------------------------------------------------- tests --

fn pseudo_batch(n: usize, shape: &[usize], seed: u64) -> Tensor {
    let numel: usize = n * shape.iter().product::<usize>();
    let data: Vec<f64> = (0..numel)
        .map(|i| {
            let x = (i as u64).wrapping_mul(6364136223846793005).wrapping_add(seed);
            ((x >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        })
        .collect();
    let mut full = vec![n];
    full.extend_from_slice(shape);
    Tensor::new(full, data).unwrap()
}

fn mlp_fixture(k: usize) -> (BackboneSpec, UnitPartition, Vec<VirtualNetConfig>, ModelParams) {
    let tasks: Vec<TaskInfo> = (1..=k)
        .map(|i| TaskInfo {
            id: TaskId(i),
            class_count: 3,
            input_shape: vec![2],
        })
        .collect();
    let (spec, partition, configs) = mlp_preset(tasks, k).unwrap();
    let params = init_params(&spec, 21).unwrap();
    (spec, partition, configs, params)
}

#[test]
fn mlp_matches_extraction_oracle_at_every_level() {
    let (spec, partition, configs, params) = mlp_fixture(3);
    let batch = pseudo_batch(5, &[2], 9);
    for config in &configs {
        for level in 1..=config.level_count() {
            let mask = level_mask(&partition, config, level).unwrap();
            let logits = eval_logits(&params, &spec, &mask, &batch).unwrap();
            let net = extract(&spec, &params, &mask);
            let want = plain_forward(&net, batch.data(), 5, &[2]);
            for (a, b) in logits.data().iter().zip(&want) {
                assert!(
                    (a - b).abs() <= 1e-12,
                    "task {} level {}: {} vs {}",
                    config.task,
                    level,
                    a,
                    b
                );
            }
        }
    }
}

#[test]
fn conv_with_norm_matches_extraction_oracle() {
    let tasks: Vec<TaskInfo> = (1..=2)
        .map(|i| TaskInfo {
            id: TaskId(i),
            class_count: 4,
            input_shape: vec![1, 14, 14],
        })
        .collect();
    let (spec, partition, configs) = conv_preset(tasks, 2).unwrap();
    let mut params = init_params(&spec, 33).unwrap();
    // move the running statistics off their initial values first
    let warm = pseudo_batch(6, &[1, 14, 14], 3);
    for config in &configs {
        for level in 1..=config.level_count() {
            let mask = level_mask(&partition, config, level).unwrap();
            forward_logits(&mut params, &spec, &mask, &warm, ForwardMode::Train).unwrap();
        }
    }
    let batch = pseudo_batch(4, &[1, 14, 14], 17);
    for config in &configs {
        for level in 1..=config.level_count() {
            let mask = level_mask(&partition, config, level).unwrap();
            let logits = eval_logits(&params, &spec, &mask, &batch).unwrap();
            let net = extract(&spec, &params, &mask);
            let want = plain_forward(&net, batch.data(), 4, &[1, 14, 14]);
            for (a, b) in logits.data().iter().zip(&want) {
                assert!(
                    (a - b).abs() <= 1e-12,
                    "task {} level {}: {} vs {}",
                    config.task,
                    level,
                    a,
                    b
                );
            }
        }
    }
}

#[test]
fn identity_blocks_pass_masked_channels_through() {
    // one dense body layer, no relu; identity weights on the masked block
    // and an identity head: logits must equal the masked slice of the input
    let tasks = vec![
        TaskInfo {
            id: TaskId(1),
            class_count: 2,
            input_shape: vec![4],
        },
        TaskInfo {
            id: TaskId(2),
            class_count: 2,
            input_shape: vec![4],
        },
    ];
    let body = vec![dvn_core::backbone::LayerSpec::dense(4, 4, false, false)];
    let inputs = vec![
        dvn_core::backbone::LayerSpec::dense(4, 4, false, false),
        dvn_core::backbone::LayerSpec::dense(4, 4, false, false),
    ];
    let partition = UnitPartition::equal(&[(4, 4)], 2).unwrap();
    let configs = dvn_core::partition::derive_orders(2).unwrap();
    let spec = BackboneSpec::assemble(body, inputs, tasks, &partition, &configs).unwrap();
    let mut params = init_params(&spec, 1).unwrap();

    let eye4: Vec<f64> = (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
    params.input[0].weight = Tensor::new(vec![4, 4], eye4.clone()).unwrap();
    params.body[0].weight = Tensor::new(vec![4, 4], eye4).unwrap();
    params.heads[0][0].weight =
        Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    params.heads[0][0].bias = Tensor::zeros(vec![2]);

    let mask = level_mask(&partition, &configs[0], 1).unwrap();
    let batch = Tensor::new(vec![2, 4], vec![0.3, -1.2, 9.0, 7.0, 2.5, 0.5, -3.0, 4.0]).unwrap();
    let logits = eval_logits(&params, &spec, &mask, &batch).unwrap();
    assert_eq!(logits.data(), &[0.3, -1.2, 2.5, 0.5]);
}

#[test]
fn parameters_outside_the_mask_are_never_read() {
    let (spec, partition, configs, params) = mlp_fixture(3);
    let batch = pseudo_batch(4, &[2], 5);
    // task 2 at level 2 includes units {2, 1}; unit 3 and everything owned
    // by task 3 stay outside
    let mask = level_mask(&partition, &configs[1], 2).unwrap();
    let baseline = eval_logits(&params, &spec, &mask, &batch).unwrap();

    let mut poked = params.clone();
    // unit 3 diagonal block of body layer 0 (channels 16..24 both sides)
    {
        let w = poked.body[0].weight.data_mut();
        for i in 16..24 {
            for o in 16..24 {
                w[i * 24 + o] += 1000.0;
            }
        }
    }
    // interconnection blocks touching unit 3
    {
        let w = poked.body[1].weight.data_mut();
        for i in 0..24 {
            for o in 16..24 {
                w[i * 24 + o] -= 500.0;
                w[o * 24 + i] += 250.0;
            }
        }
    }
    // another task's input layer and another level's head
    for v in poked.input[2].weight.data_mut() {
        *v = -9.0;
    }
    for v in poked.heads[1][2].weight.data_mut() {
        *v = 99.0;
    }
    for v in poked.heads[0][0].weight.data_mut() {
        *v = -99.0;
    }

    let after = eval_logits(&poked, &spec, &mask, &batch).unwrap();
    assert!(baseline
        .data()
        .iter()
        .zip(after.data())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn top_level_mask_equals_unmasked_network() {
    // with every unit included the gathers become identity selections, so
    // the masked forward must equal a flat spec's forward over the same
    // weights at the same head
    let (spec, partition, configs, params) = mlp_fixture(2);
    let batch = pseudo_batch(3, &[2], 11);
    let mask = level_mask(&partition, &configs[0], 2).unwrap();
    let logits = eval_logits(&params, &spec, &mask, &batch).unwrap();

    let net = extract(&spec, &params, &mask);
    // extraction at the top level copies the whole tensors
    assert_eq!(net.layers[1].weight.len(), 24 * 24);
    let want = plain_forward(&net, batch.data(), 3, &[2]);
    for (a, b) in logits.data().iter().zip(&want) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn eval_forward_is_deterministic_and_pure() {
    let tasks = vec![TaskInfo {
        id: TaskId(1),
        class_count: 3,
        input_shape: vec![1, 14, 14],
    }];
    let (spec, partition, configs) = conv_preset(tasks, 1).unwrap();
    let params = init_params(&spec, 3).unwrap();
    let before = params.clone();
    let mask = level_mask(&partition, &configs[0], 1).unwrap();
    let batch = pseudo_batch(2, &[1, 14, 14], 23);
    let a = eval_logits(&params, &spec, &mask, &batch).unwrap();
    let b = eval_logits(&params, &spec, &mask, &batch).unwrap();
    assert!(a
        .data()
        .iter()
        .zip(b.data())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(params, before);
}

#[test]
fn train_mode_updates_running_statistics() {
    let tasks = vec![TaskInfo {
        id: TaskId(1),
        class_count: 3,
        input_shape: vec![1, 14, 14],
    }];
    let (spec, partition, configs) = conv_preset(tasks, 1).unwrap();
    let mut params = init_params(&spec, 3).unwrap();
    let mask = level_mask(&partition, &configs[0], 1).unwrap();
    let batch = pseudo_batch(4, &[1, 14, 14], 29);
    let key = NormKey {
        task: TaskId(1),
        level: 1,
        site: NormSite::Input,
    };
    let before = params.norm(key).unwrap().running_mean.clone();
    forward_logits(&mut params, &spec, &mask, &batch, ForwardMode::Train).unwrap();
    let after = &params.norm(key).unwrap().running_mean;
    assert_ne!(&before, after);
    assert!(params
        .norm(key)
        .unwrap()
        .running_var
        .iter()
        .all(|&v| v > 0.0));
}
