//! Acceptance suite: one test per release criterion, each printing a
//! `[PASS]`/`[FAIL]` line with the measured values (visible with
//! `cargo test --test acceptance -- --nocapture`).
//!
//! The heavy end-to-end criteria (desk-scale training, augmentation trend,
//! fine-tuning) train the full 78x78 architecture and take a few minutes
//! each on a laptop-class CPU.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cellcnn_core::dataset::{
    augment_labeled, split, synth_in_memory, CellSample, DatasetManifest, LabeledImage,
    SplitSpec, SynthOptions, SynthStyle, ChannelMode,
};
use cellcnn_core::imageproc::{contrast_normalize, resize, AugmentationPlan, GrayImage};
use cellcnn_core::inference::{argmax, ensemble_predict, predict_single, Ensemble};
use cellcnn_core::metrics::{aca, mca, ConfusionMatrix};
use cellcnn_core::network::{
    backward, deserialize, forward, init_params, param_count, serialize, DropoutConfig,
    LayerParams, Mode, NetworkParams, NetworkSpec, StageShape, TensorRole,
};
use cellcnn_core::trainer::{
    cross_entropy_index, evaluate_model, finetune, fit, train_epoch, update_step, Snapshot,
    TrainConfig, TrainState,
};

fn report(name: &str, pass: bool, detail: &str) {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

fn random_image(rng: &mut ChaCha8Rng, n: usize) -> GrayImage {
    GrayImage::new(n, n, (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

/// Preprocesses a generated corpus the standard way (normalize + resize).
fn labeled_set(
    corpus: &[(GrayImage, cellcnn_core::imageproc::BinaryMask, usize)],
    target: usize,
) -> Vec<LabeledImage> {
    corpus
        .iter()
        .enumerate()
        .map(|(i, (image, _, label))| {
            let (normalized, _) = contrast_normalize(image);
            LabeledImage {
                id: format!("s{i}"),
                image: resize(&normalized, target, target),
                label: *label,
            }
        })
        .collect()
}

fn class_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("class{i}")).collect()
}

#[test]
fn architecture_conformance() {
    let start = Instant::now();
    let spec = NetworkSpec::reference(6);
    let shapes = spec.validate().unwrap();
    let expected = [
        StageShape::Maps { maps: 6, height: 72, width: 72 },
        StageShape::Maps { maps: 6, height: 36, width: 36 },
        StageShape::Maps { maps: 16, height: 33, width: 33 },
        StageShape::Maps { maps: 16, height: 11, width: 11 },
        StageShape::Maps { maps: 32, height: 9, width: 9 },
        StageShape::Maps { maps: 32, height: 3, width: 3 },
        StageShape::Vector { length: 150 },
        StageShape::Vector { length: 6 },
    ];
    let chain_ok = shapes == expected;
    let count = param_count(&spec).unwrap();
    let pass = chain_ok && count == 50_748 && count > 50_000 && start.elapsed().as_secs() < 1;
    report(
        "architecture-conformance",
        pass,
        &format!("stage chain exact, param_count = {count} (expected 50748)"),
    );
}

/// Whole-network central finite differences on the reduced architecture.
fn gradient_check_worst_error(seed: u64) -> f64 {
    let spec = NetworkSpec::reduced();
    let params = init_params(&spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let image = random_image(&mut rng, spec.input_size);
    let true_class = (seed % 3) as usize;
    let mut label = vec![0.0; 3];
    label[true_class] = 1.0;

    let loss = |params: &NetworkParams| -> f64 {
        let trace = forward(
            params,
            &spec,
            &image,
            &DropoutConfig::disabled(),
            Mode::Eval,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        cross_entropy_index(&trace.probabilities, true_class)
    };

    let trace = forward(
        &params,
        &spec,
        &image,
        &DropoutConfig::disabled(),
        Mode::Train,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    let grads = backward(&trace, &params, &spec, &label).unwrap();

    let flatten = |p: &NetworkParams| -> Vec<f64> {
        p.tensors().iter().flat_map(|(_, t)| t.iter().copied()).collect()
    };
    let analytic = flatten(&grads);
    let flat_params = flatten(&params);

    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for index in 0..flat_params.len() {
        let mut probe = params.clone();
        let set = |p: &mut NetworkParams, value: f64| {
            let mut i = index;
            for (_, t) in p.tensors_mut() {
                if i < t.len() {
                    t[i] = value;
                    return;
                }
                i -= t.len();
            }
        };
        set(&mut probe, flat_params[index] + eps);
        let plus = loss(&probe);
        set(&mut probe, flat_params[index] - eps);
        let minus = loss(&probe);
        let fd = (plus - minus) / (2.0 * eps);
        let a = analytic[index];
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
    }
    worst
}

#[test]
fn gradient_correctness() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in [101, 202, 303, 404, 505] {
        worst = worst.max(gradient_check_worst_error(seed));
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-4 && elapsed.as_secs() < 120;
    report(
        "gradient-correctness",
        pass,
        &format!("max relative error {worst:.3e} over 5 seeds in {elapsed:?} (tolerance 1e-4)"),
    );
}

#[test]
fn optimizer_conformance() {
    // Two-step hand iteration of the momentum/decay rule on one scalar.
    let spec = NetworkSpec {
        input_size: 1,
        layers: vec![cellcnn_core::network::LayerSpec::SoftmaxOutput { classes: 1 }],
    };
    let config = TrainConfig {
        learning_rate: 0.01,
        momentum: 0.9,
        weight_decay: 0.0005,
        ..TrainConfig::default()
    };
    let mut params = init_params(&spec, 0).unwrap();
    if let LayerParams::Dense { weights, .. } = &mut params.layers[0] {
        weights[0] = 1.0;
    }
    let mut state = TrainState::new(params, spec.clone(), &config);
    let mut grads = state.params.zeros_like();
    if let LayerParams::Dense { weights, .. } = &mut grads.layers[0] {
        weights[0] = 1.0;
    }
    let (eta, alpha, beta, g) = (0.01f64, 0.9f64, 0.0005f64, 1.0f64);
    let (mut w, mut v) = (1.0f64, 0.0f64);
    for _ in 0..2 {
        v = alpha * v - beta * eta * w - eta * g;
        w += v;
        update_step(&mut state, &grads, &config).unwrap();
    }
    let LayerParams::Dense { weights, .. } = &state.params.layers[0] else { panic!() };
    let LayerParams::Dense { weights: vel, .. } = &state.velocity.layers[0] else { panic!() };
    let hand_ok = (weights[0] - w).abs() < 1e-12 && (vel[0] - v).abs() < 1e-12;
    let published_ok = (vel[0] - (-0.01900945)).abs() < 1e-8 && (weights[0] - 0.97098555).abs() < 1e-8;

    // alpha = 0, beta = 0 equals plain SGD bit for bit.
    let reduced = NetworkSpec::reduced();
    let initial = init_params(&reduced, 3).unwrap();
    let sgd_config = TrainConfig {
        momentum: 0.0,
        weight_decay: 0.0,
        learning_rate: 0.02,
        ..TrainConfig::default()
    };
    let mut sgd_state = TrainState::new(initial.clone(), reduced.clone(), &sgd_config);
    let mut random_grads = initial.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (_, t) in random_grads.tensors_mut() {
        for x in t {
            *x = rng.random_range(-1.0..1.0);
        }
    }
    update_step(&mut sgd_state, &random_grads, &sgd_config).unwrap();
    let mut bitwise_ok = true;
    for (((_, after), (_, before)), (_, grad)) in sgd_state
        .params
        .tensors()
        .iter()
        .zip(initial.tensors().iter())
        .zip(random_grads.tensors().iter())
    {
        for ((&a, &b), &g) in after.iter().zip(before.iter()).zip(grad.iter()) {
            if a.to_bits() != (b - 0.02 * g).to_bits() {
                bitwise_ok = false;
            }
        }
    }

    // Biases are fixed points of pure decay (zero gradients, zero velocity).
    let decay_config = TrainConfig {
        weight_decay: 0.01,
        ..TrainConfig::default()
    };
    let mut decay_state = TrainState::new(initial.clone(), reduced, &decay_config);
    for (role, t) in decay_state.params.tensors_mut() {
        if role == TensorRole::Bias {
            for x in t {
                *x = 0.5;
            }
        }
    }
    let before = decay_state.params.clone();
    let zero = decay_state.params.zeros_like();
    for _ in 0..3 {
        update_step(&mut decay_state, &zero, &decay_config).unwrap();
    }
    let mut bias_fixed = true;
    let mut weights_shrunk = true;
    for ((role, after), (_, orig)) in decay_state
        .params
        .tensors()
        .iter()
        .zip(before.tensors().iter())
    {
        match role {
            TensorRole::Bias => {
                if after.iter().zip(orig.iter()).any(|(a, o)| a != o) {
                    bias_fixed = false;
                }
            }
            TensorRole::Weight => {
                if after.iter().zip(orig.iter()).any(|(a, o)| a.abs() > o.abs()) {
                    weights_shrunk = false;
                }
            }
        }
    }

    let pass = hand_ok && published_ok && bitwise_ok && bias_fixed && weights_shrunk;
    report(
        "optimizer-conformance",
        pass,
        &format!(
            "hand iteration {hand_ok}, published values {published_ok}, \
             plain-SGD bitwise {bitwise_ok}, bias decay-free {bias_fixed}"
        ),
    );
}

#[test]
fn ensemble_conformance() {
    let start = Instant::now();
    let spec = NetworkSpec::reduced();
    let plan = AugmentationPlan::new(90).unwrap(); // m = 4
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    let mut argmax_mismatches = 0usize;
    for trial in 0..100u64 {
        let a = init_params(&spec, 1000 + 2 * trial).unwrap();
        let b = init_params(&spec, 1001 + 2 * trial).unwrap();
        let ensemble = Ensemble::new(
            vec![(a.clone(), spec.clone()), (b.clone(), spec.clone())],
            class_names(3),
        )
        .unwrap();
        let image = random_image(&mut rng, spec.input_size);

        // Brute force: materialize all 2 x 4 vectors and average them.
        let variants = cellcnn_core::imageproc::augment(&image, &plan);
        let mut expected = vec![0.0; 3];
        let mut count = 0;
        for variant in &variants {
            for params in [&a, &b] {
                let p = predict_single(params, &spec, variant).unwrap();
                for (e, x) in expected.iter_mut().zip(&p) {
                    *e += x;
                }
                count += 1;
            }
        }
        for e in &mut expected {
            *e /= f64::from(count);
        }

        let (predicted, averaged) = ensemble_predict(&ensemble, &image, &plan).unwrap();
        for (x, y) in averaged.iter().zip(&expected) {
            worst = worst.max((x - y).abs());
        }
        if predicted != argmax(&expected) {
            argmax_mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-12 && argmax_mismatches == 0 && elapsed.as_secs() < 10;
    report(
        "ensemble-conformance",
        pass,
        &format!(
            "max deviation {worst:.3e} from brute force over 100 trials, \
             {argmax_mismatches} argmax mismatches, {elapsed:?}"
        ),
    );
}

#[test]
fn metrics_conformance() {
    let start = Instant::now();
    // Hand-computed imbalance example: class 0 with 10 samples all correct,
    // class 1 with 90 samples half correct.
    let mut cm = ConfusionMatrix::new(2).unwrap();
    for _ in 0..10 {
        cm.accumulate(0, 0).unwrap();
    }
    for _ in 0..45 {
        cm.accumulate(1, 1).unwrap();
        cm.accumulate(1, 0).unwrap();
    }
    let imbalance_ok = (mca(&cm).unwrap() - 0.75).abs() == 0.0 && (aca(&cm).unwrap() - 0.55).abs() == 0.0;

    // Independent recomputation on random matrices.
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2usize..7);
        let mut cm = ConfusionMatrix::new(n).unwrap();
        for k in 0..n {
            cm.accumulate(k, rng.random_range(0..n)).unwrap(); // at least one per class
            for _ in 0..rng.random_range(0usize..30) {
                cm.accumulate(k, rng.random_range(0..n)).unwrap();
            }
        }
        let mut sum = 0.0;
        for k in 0..n {
            sum += cm.count(k, k) as f64 / cm.row_sum(k) as f64;
        }
        let independent = sum / n as f64;
        worst = worst.max((mca(&cm).unwrap() - independent).abs());
    }
    let elapsed = start.elapsed();
    let pass = imbalance_ok && worst < 1e-12 && elapsed.as_secs() < 5;
    report(
        "metrics-conformance",
        pass,
        &format!("imbalance example exact, max deviation {worst:.3e} over 1000 matrices"),
    );
}

#[test]
fn protocol_constants() {
    // Split counts on a 13,596-record manifest.
    let classes = class_names(6);
    let samples: Vec<CellSample> = (0..13_596)
        .map(|i| CellSample {
            id: format!("cell{i}"),
            image_path: "unused.png".into(),
            mask_path: None,
            label: i % 6,
        })
        .collect();
    let manifest = DatasetManifest {
        classes,
        samples,
        channel_mode: ChannelMode::Grayscale,
    };
    let (train, val, test) = split(&manifest, &SplitSpec::default()).unwrap();
    let split_ok = (train.len(), val.len(), test.len()) == (8701, 2175, 2720);

    // 8701 samples at batch 113 give exactly 77 updates in one epoch
    // (run on the reduced architecture to keep this fast).
    let spec = NetworkSpec::reduced();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let epoch_set: Vec<LabeledImage> = (0..8701)
        .map(|i| LabeledImage {
            id: format!("e{i}"),
            image: random_image(&mut rng, spec.input_size),
            label: i % 3,
        })
        .collect();
    let config = TrainConfig {
        mini_batch_size: 113,
        max_epochs: 1,
        snapshot_epochs: vec![],
        learning_rate: 0.0,
        seed: 1,
        ..TrainConfig::default()
    };
    let params = init_params(&spec, 1).unwrap();
    let mut state = TrainState::new(params, spec, &config);
    let stats = train_epoch(&mut state, &epoch_set, &config).unwrap();
    let updates_ok = stats.update_steps == 77;

    // Augmentation factors for the three published angle steps.
    let factors: Vec<usize> = [36u32, 18, 9]
        .iter()
        .map(|&step| AugmentationPlan::new(step).unwrap().variant_count())
        .collect();
    let factors_ok = factors == vec![10, 20, 40];

    let pass = split_ok && updates_ok && factors_ok;
    report(
        "protocol-constants",
        pass,
        &format!(
            "split {}/{}/{}, {} updates/epoch, factors {factors:?}",
            train.len(),
            val.len(),
            test.len(),
            stats.update_steps
        ),
    );
}

#[test]
fn desk_scale_training() {
    let start = Instant::now();
    let train_opts = SynthOptions {
        classes: 6,
        per_class: 80,
        image_size: 78,
        seed: 1000,
        orientation_degrees: (0.0, 360.0),
        style: SynthStyle::standard(),
    };
    let test_opts = SynthOptions {
        per_class: 20,
        seed: 2000,
        ..train_opts.clone()
    };
    let train = labeled_set(&synth_in_memory(&train_opts).unwrap(), 78);
    let test = labeled_set(&synth_in_memory(&test_opts).unwrap(), 78);

    let spec = NetworkSpec::reference(6);
    let config = TrainConfig {
        max_epochs: 50,
        snapshot_epochs: vec![50],
        seed: 7,
        ..TrainConfig::default()
    };
    let (state, _) = fit(&spec, &config, &train, &[]).unwrap();
    let best_train_mca = state
        .history
        .iter()
        .map(|p| p.train_mca)
        .fold(0.0f64, f64::max);
    let (_, held_out) = evaluate_model(&state.params, &state.spec, &test).unwrap();
    let elapsed = start.elapsed();
    let pass = best_train_mca >= 0.95 && held_out >= 0.80 && elapsed.as_secs() <= 1200;
    report(
        "desk-scale-training",
        pass,
        &format!(
            "train MCA {best_train_mca:.4} (>= 0.95) by epoch 50, held-out MCA {held_out:.4} \
             (>= 0.80), {elapsed:?} (<= 20 min)"
        ),
    );
}

#[test]
fn augmentation_trend() {
    let start = Instant::now();
    let mut results = Vec::new();
    let mut pass = true;
    for seed in [41u64, 42, 43] {
        // Orientation-biased training corpus, uniformly oriented test corpus.
        let train_opts = SynthOptions {
            classes: 6,
            per_class: 20,
            image_size: 78,
            seed: 3000 + seed,
            orientation_degrees: (-10.0, 10.0),
            style: SynthStyle::standard(),
        };
        let test_opts = SynthOptions {
            per_class: 20,
            seed: 4000 + seed,
            orientation_degrees: (0.0, 360.0),
            ..train_opts.clone()
        };
        let train = labeled_set(&synth_in_memory(&train_opts).unwrap(), 78);
        let test = labeled_set(&synth_in_memory(&test_opts).unwrap(), 78);
        let spec = NetworkSpec::reference(6);
        let config = TrainConfig {
            max_epochs: 20,
            snapshot_epochs: vec![20],
            seed,
            ..TrainConfig::default()
        };

        // No augmentation.
        let (plain_state, _) = fit(&spec, &config, &train, &[]).unwrap();
        let (_, mca_plain) = evaluate_model(&plain_state.params, &plain_state.spec, &test).unwrap();

        // 36-degree augmentation, with the same rotations applied at test
        // time through the ensemble average.
        let plan = AugmentationPlan::new(36).unwrap();
        let train_augmented = augment_labeled(&train, &plan);
        let (aug_state, _) = fit(&spec, &config, &train_augmented, &[]).unwrap();
        let ensemble = Ensemble::new(
            vec![(aug_state.params.clone(), aug_state.spec.clone())],
            class_names(6),
        )
        .unwrap();
        let mut cm = ConfusionMatrix::new(6).unwrap();
        for s in &test {
            let (pred, _) = ensemble_predict(&ensemble, &s.image, &plan).unwrap();
            cm.accumulate(s.label, pred).unwrap();
        }
        let mca_aug = mca(&cm).unwrap();

        pass &= mca_aug >= mca_plain;
        results.push(format!("seed {seed}: {mca_plain:.4} -> {mca_aug:.4}"));
    }
    let elapsed = start.elapsed();
    pass &= elapsed.as_secs() <= 2700;
    report(
        "augmentation-trend",
        pass,
        &format!("no-aug vs aug36 MCA [{}] in {elapsed:?}", results.join("; ")),
    );
}

#[test]
fn finetune_protocol() {
    let start = Instant::now();
    // Pretrain on the standard-style corpus.
    let base_opts = SynthOptions {
        classes: 6,
        per_class: 60,
        image_size: 78,
        seed: 5000,
        orientation_degrees: (0.0, 360.0),
        style: SynthStyle::standard(),
    };
    let base_train = labeled_set(&synth_in_memory(&base_opts).unwrap(), 78);
    let spec = NetworkSpec::reference(6);
    let pretrain_config = TrainConfig {
        max_epochs: 30,
        snapshot_epochs: vec![30],
        seed: 9,
        ..TrainConfig::default()
    };
    let (_, snapshots) = fit(&spec, &pretrain_config, &base_train, &[]).unwrap();
    let snapshot: &Snapshot = &snapshots[0];

    // The shifted corpus stands in for a second laboratory.
    let shifted_train_opts = SynthOptions {
        per_class: 40,
        seed: 6000,
        style: SynthStyle::shifted(),
        ..base_opts.clone()
    };
    let shifted_test_opts = SynthOptions {
        per_class: 20,
        seed: 7000,
        ..shifted_train_opts.clone()
    };
    let shifted_train = labeled_set(&synth_in_memory(&shifted_train_opts).unwrap(), 78);
    let shifted_test = labeled_set(&synth_in_memory(&shifted_test_opts).unwrap(), 78);

    let eval_loss = |params: &NetworkParams, spec: &NetworkSpec| -> f64 {
        shifted_train
            .iter()
            .map(|s| {
                let probs = predict_single(params, spec, &s.image).unwrap();
                cross_entropy_index(&probs, s.label)
            })
            .sum::<f64>()
            / shifted_train.len() as f64
    };

    let (params0, spec0) = snapshot.params_and_spec().unwrap();
    let loss_before = eval_loss(&params0, &spec0);

    // Ten fine-tuning epochs with dropout 0.5, per the adaptation protocol.
    let finetune_config = TrainConfig {
        max_epochs: 10,
        snapshot_epochs: vec![10],
        dropout_ratio: 0.5,
        seed: 10,
        ..TrainConfig::default()
    };
    let (ft_state, _) = finetune(snapshot, 6, &finetune_config, &shifted_train, &[]).unwrap();
    let loss_after = eval_loss(&ft_state.params, &ft_state.spec);
    let (_, mca_finetuned) = evaluate_model(&ft_state.params, &ft_state.spec, &shifted_test).unwrap();

    // From-scratch baseline with the same budget.
    let scratch_config = TrainConfig {
        seed: 11,
        ..finetune_config.clone()
    };
    let (scratch_state, _) = fit(&spec, &scratch_config, &shifted_train, &[]).unwrap();
    let (_, mca_scratch) =
        evaluate_model(&scratch_state.params, &scratch_state.spec, &shifted_test).unwrap();

    let elapsed = start.elapsed();
    let pass = loss_after < loss_before && mca_scratch <= mca_finetuned;
    report(
        "finetune-protocol",
        pass,
        &format!(
            "loss {loss_before:.4} -> {loss_after:.4} (strictly lower), \
             scratch MCA {mca_scratch:.4} <= finetuned MCA {mca_finetuned:.4}, {elapsed:?}"
        ),
    );
}

#[test]
fn serialization_round_trip() {
    let spec = NetworkSpec::reference(6);
    let params = init_params(&spec, 31).unwrap();
    let bytes = serialize(&params, &spec).unwrap();
    let (params2, spec2) = deserialize(&bytes).unwrap();
    let bytes2 = serialize(&params2, &spec2).unwrap();
    let bytes_ok = bytes == bytes2;

    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let image = random_image(&mut rng, 78);
        let a = predict_single(&params, &spec, &image).unwrap();
        let b = predict_single(&params2, &spec2, &image).unwrap();
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x - y).abs());
        }
    }
    let pass = bytes_ok && worst < 1e-6;
    report(
        "serialization",
        pass,
        &format!("double round trip byte-identical {bytes_ok}, max prediction deviation {worst:.3e}"),
    );
}
