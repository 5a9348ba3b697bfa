use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqprompt::backbone::{pretrain_backbone, PretrainConfig};
use vqprompt::cil::{
    calibrate_classifier, run_continual, sample_pseudo_features, CalibrationConfig, ClassGaussian, Learner,
};
use vqprompt::data::{generate_benchmark, Benchmark, Sample, Split, Task};
use vqprompt::optim::AdamWConfig;
use vqprompt::{
    BackboneConfig, BenchmarkParams, ClassStatistics, ClassifierHead, Error, FrozenBackbone, Graph, PromptMode,
    TaskDataset, TaskSequence, Tensor, TrainConfig,
};

fn tiny_config() -> BackboneConfig {
    BackboneConfig {
        depth: 2,
        d_model: 8,
        heads: 2,
        seq_len: 5,
        d_ff: 12,
        token_dim: 3,
        prompt_blocks: vec![0, 1],
    }
}

fn tiny_benchmark(tasks: usize, seed: u64) -> Benchmark {
    generate_benchmark(&BenchmarkParams {
        seed,
        tasks,
        samples_per_class: 10,
        pretrain_classes: 2,
        pretrain_samples_per_class: 10,
        seq_len: 4,
        token_dim: 3,
        ..Default::default()
    })
    .unwrap()
}

fn tiny_backbone(seed: u64) -> FrozenBackbone {
    let mut b = FrozenBackbone::init(tiny_config(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    b.freeze();
    b
}

fn tiny_train(mode: PromptMode) -> TrainConfig {
    TrainConfig {
        mode,
        epochs: 2,
        batch_size: 8,
        pool_size: 4,
        prompt_len: 2,
        calibration: CalibrationConfig {
            epochs: 2,
            per_class: 16,
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Default benchmark plus a pretrained backbone, shared by the slower tests.
fn desk() -> &'static (Benchmark, FrozenBackbone) {
    static DESK: OnceLock<(Benchmark, FrozenBackbone)> = OnceLock::new();
    DESK.get_or_init(|| {
        let bench = generate_benchmark(&BenchmarkParams::default()).unwrap();
        let (backbone, _) = pretrain_backbone(
            &bench.pretrain_train,
            None,
            BackboneConfig::default(),
            &PretrainConfig::default(),
        )
        .unwrap();
        (bench, backbone)
    })
}

#[test]
fn head_only_mode_leaves_backbone_untouched() {
    let bench = tiny_benchmark(2, 1);
    let backbone = tiny_backbone(1);
    let before = backbone.checksum();
    let run = run_continual(&backbone, &bench.sequence, &tiny_train(PromptMode::None)).unwrap();
    assert_eq!(run.backbone_checksum, before);
    assert!(run.snapshots.iter().all(|s| s.pool.is_none()));
}

#[test]
fn same_seed_gives_identical_pool_and_matrix() {
    let bench = tiny_benchmark(2, 2);
    let backbone = tiny_backbone(2);
    let cfg = tiny_train(PromptMode::Vq);
    let a = run_continual(&backbone, &bench.sequence, &cfg).unwrap();
    let b = run_continual(&backbone, &bench.sequence, &cfg).unwrap();
    assert_eq!(a.snapshots, b.snapshots);
    assert_eq!(a.matrix, b.matrix);
    assert_eq!(a.matrix.to_csv(), b.matrix.to_csv());
}

#[test]
fn inactive_head_rows_get_no_gradient_during_task_training() {
    let bench = tiny_benchmark(2, 3);
    let mut learner = Learner::new(tiny_backbone(3), 4, tiny_train(PromptMode::Vq)).unwrap();
    let before = learner.head.clone();
    let task = &bench.sequence.tasks[1];
    let cfg = TrainConfig {
        optimizer: AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        },
        ..learner.config.clone()
    };
    learner.config = cfg;
    learner.train_task(&task.train, task.classes.clone()).unwrap();
    let d = learner.head.dim();
    for c in 0..2 {
        assert_eq!(learner.head.weight.row(c)[..d], before.weight.row(c)[..d]);
        assert_eq!(learner.head.bias.data()[c], before.bias.data()[c]);
    }
    assert_ne!(learner.head.weight.row(2), before.weight.row(2));
}

#[test]
fn training_rejects_labels_outside_the_task() {
    let bench = tiny_benchmark(2, 4);
    let mut learner = Learner::new(tiny_backbone(4), 4, tiny_train(PromptMode::Vq)).unwrap();
    let err = learner.train_task(&bench.sequence.tasks[1].train, 0..2).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
}

#[test]
fn unfrozen_backbone_is_refused() {
    let b = FrozenBackbone::init(tiny_config(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(matches!(Learner::new(b, 4, TrainConfig::default()), Err(Error::Contract(_))));
}

#[test]
fn overlapping_tasks_are_a_protocol_error() {
    let mut bench = tiny_benchmark(2, 5);
    bench.sequence.tasks[1].classes = 1..4;
    let err = run_continual(&tiny_backbone(5), &bench.sequence, &tiny_train(PromptMode::None)).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)));
}

#[test]
fn one_task_gives_a_one_by_one_matrix() {
    let bench = tiny_benchmark(1, 6);
    let run = run_continual(&tiny_backbone(6), &bench.sequence, &tiny_train(PromptMode::Vq)).unwrap();
    assert_eq!(run.matrix.tasks(), 1);
    assert_eq!(run.matrix.faa().unwrap(), run.matrix.caa().unwrap());
    assert_eq!(run.traces.len(), 1);
    assert_eq!(run.traces[0].len(), 2);
}

#[test]
fn column_t_covers_exactly_t_tasks() {
    let bench = tiny_benchmark(3, 7);
    let run = run_continual(&tiny_backbone(7), &bench.sequence, &tiny_train(PromptMode::Soft)).unwrap();
    for j in 0..3 {
        for i in 0..3 {
            assert_eq!(run.matrix.get(i, j).is_some(), i <= j, "entry ({i}, {j})");
        }
    }
}

#[test]
fn duplicated_samples_get_the_variance_floor() {
    let feats = Tensor::new(vec![3, 2], vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
    let mut stats = ClassStatistics::default();
    stats.extend_from_features(&feats, &[4, 4, 4], 1e-6).unwrap();
    assert_eq!(stats.classes[&4].variance, vec![1e-6, 1e-6]);
    assert_eq!(stats.classes[&4].mean, vec![1.0, 2.0]);

    let single = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
    stats.extend_from_features(&single, &[7], 1e-6).unwrap();
    assert_eq!(stats.classes[&7].variance, vec![1e-6, 1e-6]);
}

#[test]
fn statistics_match_a_two_pass_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (n, d) = (60, 5);
    let data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-3.0..3.0)).collect();
    let labels: Vec<u32> = (0..n).map(|i| (i % 3) as u32).collect();
    let feats = Tensor::new(vec![n, d], data.clone()).unwrap();
    let mut stats = ClassStatistics::default();
    stats.extend_from_features(&feats, &labels, 1e-6).unwrap();
    for c in 0..3u32 {
        let rows: Vec<&[f64]> = (0..n).filter(|&i| labels[i] == c).map(|i| &data[i * d..(i + 1) * d]).collect();
        for k in 0..d {
            let mean = rows.iter().map(|r| r[k]).sum::<f64>() / rows.len() as f64;
            let var = rows.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / rows.len() as f64;
            assert!((stats.classes[&c].mean[k] - mean).abs() < 1e-12);
            assert!((stats.classes[&c].variance[k] - var).abs() < 1e-12);
        }
    }
}

#[test]
fn old_class_statistics_are_never_recomputed() {
    let mut stats = ClassStatistics::default();
    let a = Tensor::new(vec![2, 1], vec![0.0, 2.0]).unwrap();
    stats.extend_from_features(&a, &[0, 0], 1e-6).unwrap();
    let b = Tensor::new(vec![2, 1], vec![10.0, 12.0]).unwrap();
    stats.extend_from_features(&b, &[0, 1], 1e-6).unwrap();
    assert_eq!(stats.classes[&0].mean, vec![1.0]);
    assert_eq!(stats.classes[&1].mean, vec![12.0]);
}

fn gaussian_stats(means: &[(u32, Vec<f64>)], variance: f64) -> ClassStatistics {
    ClassStatistics {
        classes: means
            .iter()
            .map(|(c, m)| {
                (
                    *c,
                    ClassGaussian {
                        mean: m.clone(),
                        variance: vec![variance; m.len()],
                        count: 10,
                    },
                )
            })
            .collect(),
    }
}

#[test]
fn pseudo_features_are_balanced_and_centred() {
    let stats = gaussian_stats(&[(1, vec![0.5, -1.0]), (3, vec![2.0, 0.0])], 0.25);
    let (feats, labels) = sample_pseudo_features(&stats, 10_000, 9).unwrap();
    assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 10_000);
    assert_eq!(labels.iter().filter(|&&l| l == 3).count(), 10_000);
    for (c, g) in &stats.classes {
        for k in 0..2 {
            let mean = (0..labels.len())
                .filter(|&i| labels[i] == *c)
                .map(|i| feats.row(i)[k])
                .sum::<f64>()
                / 10_000.0;
            assert!((mean - g.mean[k]).abs() < 3.0 * 0.5 / 100.0, "class {c} coord {k}: {mean}");
        }
    }
    assert!(matches!(sample_pseudo_features(&stats, 0, 0), Err(Error::Contract(_))));
    assert!(sample_pseudo_features(&ClassStatistics::default(), 1, 0).is_err());
}

#[test]
fn floored_classes_sample_tightly() {
    let stats = gaussian_stats(&[(0, vec![1.0, 2.0, 3.0])], 1e-6);
    let (feats, _) = sample_pseudo_features(&stats, 20_000, 10).unwrap();
    let bound = 6.0 * 1e-3;
    for i in 0..20_000 {
        for (k, m) in [1.0, 2.0, 3.0].iter().enumerate() {
            assert!((feats.row(i)[k] - m).abs() < bound + 1e-1 * bound);
        }
    }
}

/// Four classes in two tasks; the head has only ever seen the second task.
fn biased_scenario() -> (ClassifierHead, ClassStatistics) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = 6;
    let means: Vec<(u32, Vec<f64>)> =
        (0..4).map(|c| (c, (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())).collect();
    let stats = gaussian_stats(&means, 0.05);
    let mut head = ClassifierHead::init(4, d, &mut rng);
    let recent = gaussian_stats(&means[2..], 0.05);
    let (x, y) = sample_pseudo_features(&recent, 100, 12).unwrap();
    let targets: Vec<usize> = y.iter().map(|&c| c as usize).collect();
    let mut opt = vqprompt::optim::AdamW::new(AdamWConfig::default());
    for _ in 0..200 {
        let mut g = Graph::new();
        let vars = head.bind(&mut g);
        let xv = g.constant(x.clone());
        let logits = ClassifierHead::logits(&mut g, vars, xv).unwrap();
        let loss = g.masked_cross_entropy(logits, &targets, &[true; 4]).unwrap();
        g.backward(loss).unwrap();
        head.accumulate_grads(&g, vars).unwrap();
        opt.step(&mut head.parameters_mut(), 0.05);
    }
    (head, stats)
}

fn accuracy_on(head: &ClassifierHead, stats: &ClassStatistics, classes: &[u32]) -> f64 {
    let subset = ClassStatistics {
        classes: stats.classes.iter().filter(|(c, _)| classes.contains(c)).map(|(c, g)| (*c, g.clone())).collect(),
    };
    let (x, y) = sample_pseudo_features(&subset, 200, 13).unwrap();
    let all: Vec<u32> = stats.labels();
    let hits = (0..y.len()).filter(|&i| head.predict(x.row(i), &all) == y[i]).count();
    hits as f64 / y.len() as f64
}

#[test]
fn calibration_repairs_recency_bias() {
    let (mut head, stats) = biased_scenario();
    let before = accuracy_on(&head, &stats, &[0, 1]);
    calibrate_classifier(&mut head, &stats, &CalibrationConfig::default(), AdamWConfig::default(), 14).unwrap();
    let after = accuracy_on(&head, &stats, &[0, 1]);
    assert!(after > before, "{before} -> {after}");
}

#[test]
fn zero_calibration_epochs_is_a_no_op() {
    let (mut head, stats) = biased_scenario();
    let before = head.clone();
    let cfg = CalibrationConfig {
        epochs: 0,
        ..Default::default()
    };
    calibrate_classifier(&mut head, &stats, &cfg, AdamWConfig::default(), 0).unwrap();
    assert_eq!(head, before);
}

#[test]
fn calibration_touches_only_the_head() {
    let bench = tiny_benchmark(2, 15);
    let backbone = tiny_backbone(15);
    let mut learner = Learner::new(backbone.clone(), 4, tiny_train(PromptMode::Vq)).unwrap();
    let task = &bench.sequence.tasks[0];
    learner.train_task(&task.train, task.classes.clone()).unwrap();
    learner.collect_class_statistics(&task.train).unwrap();
    let pool = learner.pool.as_ref().unwrap().checksum();
    let head = learner.head.checksum();
    learner.calibrate().unwrap();
    assert_eq!(learner.pool.as_ref().unwrap().checksum(), pool);
    assert_eq!(learner.backbone().checksum(), backbone.checksum());
    assert_ne!(learner.head.checksum(), head);
}

fn dataset(task_id: u32, samples: Vec<(u32, Vec<f64>)>) -> TaskDataset {
    TaskDataset {
        task_id,
        split: Split::Test,
        seq_len: 4,
        token_dim: 3,
        samples: samples
            .into_iter()
            .enumerate()
            .map(|(i, (label, tokens))| Sample {
                id: i as u64,
                label,
                tokens,
            })
            .collect(),
    }
}

#[test]
fn prediction_considers_every_seen_class() {
    // The head prefers a task-1 class for every input; restricted to task 0's
    // classes it would still get the class-0 samples right.
    let backbone = tiny_backbone(16);
    let mut learner = Learner::new(backbone, 4, tiny_train(PromptMode::None)).unwrap();
    let bench = tiny_benchmark(2, 16);
    for task in &bench.sequence.tasks {
        learner.train_task(&task.train, task.classes.clone()).unwrap();
    }
    let test = &bench.sequence.tasks[0].test;
    let d = learner.head.dim();
    let weight = vec![0.0; 4 * d];
    let mut bias = vec![0.0; 4];
    bias[0] = 1.0;
    bias[3] = 2.0;
    learner.head = ClassifierHead::from_parts(
        Tensor::new(vec![4, d], weight).unwrap(),
        Tensor::new(vec![4], bias).unwrap(),
    )
    .unwrap();
    let full = learner.predict(test).unwrap();
    assert!(full.iter().all(|&p| p == 3));
    let feats = learner.features(test).unwrap();
    let restricted = (0..test.len())
        .filter(|&i| learner.head.predict(feats.row(i), &[0, 1]) == test.samples[i].label)
        .count();
    let full_hits = full.iter().zip(&test.samples).filter(|(p, s)| **p == s.label).count();
    assert_eq!(full_hits, 0);
    assert!(restricted > full_hits);
}

#[test]
fn memorised_degenerate_data_scores_perfectly() {
    let (_, backbone) = desk();
    let bench = generate_benchmark(&BenchmarkParams {
        seed: 17,
        tasks: 2,
        samples_per_class: 10,
        noise_scale: 0.0,
        ..Default::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        mode: PromptMode::None,
        epochs: 50,
        learning_rate: 0.05,
        ..TrainConfig::default()
    };
    let run = run_continual(backbone, &bench.sequence, &cfg).unwrap();
    assert_eq!(run.matrix.get(0, 0), Some(1.0));
    assert_eq!(run.matrix.get(0, 1), Some(1.0));
    assert_eq!(run.matrix.get(1, 1), Some(1.0));
}

#[test]
fn random_head_is_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let classes = 4u32;
    let samples: Vec<(u32, Vec<f64>)> = (0..800)
        .map(|i| (i % classes, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect();
    let test = dataset(0, samples.clone());
    let train = TaskDataset {
        split: Split::Train,
        ..test.clone()
    };
    let seq = TaskSequence {
        tasks: vec![Task {
            classes: 0..classes,
            train,
            test,
        }],
        num_classes: classes as usize,
        seed: 0,
    };
    seq.validate().unwrap();
    let learner = {
        let mut l = Learner::new(tiny_backbone(18), 4, tiny_train(PromptMode::None)).unwrap();
        // one step at a negligible rate registers the classes without learning
        l.config.learning_rate = 1e-12;
        l.config.epochs = 1;
        l.train_task(&seq.tasks[0].train, 0..classes).unwrap();
        l
    };
    let predicted = learner.predict(&seq.tasks[0].test).unwrap();
    let acc = predicted.iter().zip(&samples).filter(|(p, s)| **p == s.0).count() as f64 / 800.0;
    assert!((acc - 0.25).abs() < 0.05, "{acc}");
}

#[test]
fn epoch_loss_decreases_early_on_the_default_task() {
    let (bench, backbone) = desk();
    let mut learner = Learner::new(backbone.clone(), bench.sequence.num_classes, TrainConfig::default()).unwrap();
    let task = &bench.sequence.tasks[0];
    let cfg = TrainConfig {
        epochs: 5,
        ..TrainConfig::default()
    };
    learner.config = cfg;
    let trace = learner.train_task(&task.train, task.classes.clone()).unwrap();
    for w in trace.windows(2) {
        assert!(w[1].total <= w[0].total, "{trace:?}");
    }
}

#[test]
fn joint_linear_probe_leaves_headroom() {
    let (bench, backbone) = desk();
    let mut train = bench.sequence.tasks[0].train.clone();
    let mut test = bench.sequence.tasks[0].test.clone();
    for task in &bench.sequence.tasks[1..] {
        train.samples.extend(task.train.samples.iter().cloned());
        test.samples.extend(task.test.samples.iter().cloned());
    }
    let cfg = TrainConfig {
        mode: PromptMode::None,
        calibrate: false,
        ..TrainConfig::default()
    };
    let mut learner = Learner::new(backbone.clone(), bench.sequence.num_classes, cfg).unwrap();
    learner.train_task(&train, 0..bench.sequence.num_classes as u32).unwrap();
    let predicted = learner.predict(&test).unwrap();
    let acc = predicted.iter().zip(&test.samples).filter(|(p, s)| **p == s.label).count() as f64 / test.len() as f64;
    assert!(acc > 0.85, "joint probe accuracy {acc}");
}

#[test]
fn encode_with_empty_prompt_map_equals_query() {
    let backbone = tiny_backbone(19);
    let x = Tensor::uniform(vec![4, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(19));
    let q = vqprompt::prompt::compute_query(&backbone, &x).unwrap();
    assert_eq!(q, backbone.encode(&x, &BTreeMap::new()).unwrap());
}
