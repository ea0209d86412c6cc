mod common;

use common::*;
use fewshot_ssl::config::{RotationMode, SslTask, TrainConfig, TrainMode};
use fewshot_ssl::data::{ImageTensor, LabeledImage};
use fewshot_ssl::model::{BackboneKind, BnPolicy, ModelBundle};
use fewshot_ssl::permset::PermutationSet;
use fewshot_ssl::trainer::{total_steps, train, validate, StepLog, TrainData};
use fewshot_ssl::Error;

fn shifts(count: usize) -> PermutationSet {
    PermutationSet::from_perms((0..count).map(|s| (0..9).map(|i| (i + s) % 9).collect()).collect()).unwrap()
}

fn tiny(ssl: SslTask) -> TrainConfig {
    TrainConfig {
        ssl_task: ssl,
        n_way: 3,
        k_shot: 2,
        m_query: 2,
        episodes: 12,
        backbone: BackboneKind::SmallConv,
        widths: vec![3, 4, 5],
        image_size: 8,
        jigsaw_tile: 4,
        permset_size: 5,
        val_every: 5,
        val_episodes: 4,
        seed: 3,
        ..Default::default()
    }
}

fn run(config: &TrainConfig, data: &[LabeledImage<f64>], val: &[LabeledImage<f64>]) -> (Vec<StepLog>, fewshot_ssl::TrainOutcome<f64>) {
    let set = shifts(5);
    let mut logs = Vec::new();
    let out = train(
        config,
        TrainData { train: data, val, num_classes: 6 },
        Some(&set),
        &mut |l: &StepLog| logs.push(l.clone()),
    )
    .unwrap();
    (logs, out)
}

fn without_clock(logs: &[StepLog]) -> Vec<StepLog> {
    logs.iter().cloned().map(|mut l| {
        l.wallclock = 0.0;
        l
    }).collect()
}

#[test]
fn every_step_logs_both_losses() {
    let data = noise_dataset(1, 4, 6, 8);
    for ssl in [SslTask::Jigsaw, SslTask::Rotation] {
        let (logs, out) = run(&tiny(ssl), &data, &[]);
        assert_eq!(logs.len(), 12);
        assert_eq!(out.steps, 12);
        for l in &logs {
            assert!(l.loss_ssl > 0.0);
            assert_eq!(l.loss_total, l.loss_sup + l.loss_ssl);
            let acc = l.acc_ssl.expect("ssl accuracy");
            assert!((0.0..=1.0).contains(&acc) && (0.0..=1.0).contains(&l.acc_sup));
        }
        let line = serde_json::to_value(&logs[0]).unwrap();
        for key in ["step", "loss_total", "loss_sup", "loss_ssl", "acc_sup", "acc_ssl", "wallclock"] {
            assert!(line.get(key).is_some(), "{key}");
        }
    }
    let (logs, _) = run(&tiny(SslTask::None), &data, &[]);
    assert!(logs.iter().all(|l| l.loss_ssl == 0.0 && l.acc_ssl.is_none() && l.loss_total == l.loss_sup));
}

#[test]
fn same_seed_replays_identically() {
    let data = noise_dataset(2, 4, 6, 8);
    let mut cfg = tiny(SslTask::Rotation);
    cfg.episodes = 100;
    let (a, oa) = run(&cfg, &data, &[]);
    let (b, ob) = run(&cfg, &data, &[]);
    assert_eq!(without_clock(&a), without_clock(&b));
    assert_eq!(oa.last.bundle.params().tensors(), ob.last.bundle.params().tensors());
    cfg.seed += 1;
    let (c, _) = run(&cfg, &data, &[]);
    assert_ne!(without_clock(&a), without_clock(&c));
}

#[test]
fn ssl_inputs_are_the_supervised_batch() {
    let data = noise_dataset(3, 4, 6, 8);
    for ssl in [SslTask::Jigsaw, SslTask::Rotation] {
        let mut cfg = tiny(ssl);
        cfg.log_image_ids = true;
        let (logs, _) = run(&cfg, &data, &[]);
        for l in &logs {
            assert_eq!(l.image_ids.len(), 3 * (2 + 2));
            assert_eq!(l.ssl_image_ids, l.image_ids);
        }
    }
    let mut cfg = tiny(SslTask::Rotation);
    cfg.mode = TrainMode::Standard;
    cfg.epochs = 1;
    cfg.batch_size = 5;
    cfg.log_image_ids = true;
    let (logs, _) = run(&cfg, &data, &[]);
    assert!(logs.iter().all(|l| !l.image_ids.is_empty() && l.ssl_image_ids == l.image_ids));
}

#[test]
fn standard_mode_step_count() {
    let data = noise_dataset(4, 4, 5, 8);
    let mut cfg = tiny(SslTask::None);
    cfg.mode = TrainMode::Standard;
    cfg.epochs = 3;
    cfg.batch_size = 6;
    assert_eq!(total_steps(&cfg, data.len()), 3 * 4);
    let (logs, out) = run(&cfg, &data, &data[..6]);
    assert_eq!(logs.len(), 12);
    assert_eq!(out.validations.len(), 3);
    assert_eq!(logs.iter().map(|l| l.step).collect::<Vec<_>>(), (0..12).collect::<Vec<_>>());
}

#[test]
fn all_four_rotations() {
    let data = noise_dataset(5, 4, 6, 8);
    let mut cfg = tiny(SslTask::Rotation);
    cfg.rotation_mode = RotationMode::AllFour;
    cfg.episodes = 3;
    let (logs, _) = run(&cfg, &data, &[]);
    assert_eq!(logs.len(), 3);
}

#[test]
fn best_checkpoint_has_the_best_validation() {
    let data = noise_dataset(6, 4, 6, 8);
    let val = noise_dataset(7, 3, 4, 8);
    let mut cfg = tiny(SslTask::None);
    cfg.episodes = 20;
    let (_, out) = run(&cfg, &data, &val);
    assert_eq!(out.validations.iter().map(|v| v.step).collect::<Vec<_>>(), vec![5, 10, 15, 20]);
    let best = out.validations.iter().map(|v| v.accuracy).fold(f64::MIN, f64::max);
    assert_eq!(out.best.best_val_accuracy, Some(best));
    assert_eq!(validate(&out.best.bundle, &val, &cfg).unwrap(), best);
    assert_eq!(out.last.step, 20);
}

#[test]
fn start_up_errors() {
    let data = noise_dataset(8, 2, 6, 8);
    let set = shifts(5);
    let too_few = train(&tiny(SslTask::None), TrainData { train: &data, val: &[], num_classes: 2 }, None, &mut |_| {});
    assert!(matches!(too_few, Err(Error::TooFewClasses { .. })));

    let small = noise_dataset(8, 4, 3, 8);
    let short = train(&tiny(SslTask::None), TrainData { train: &small, val: &[], num_classes: 4 }, None, &mut |_| {});
    assert!(matches!(short, Err(Error::InsufficientImages { .. })));

    let data = noise_dataset(8, 4, 6, 8);
    let no_set = train(&tiny(SslTask::Jigsaw), TrainData { train: &data, val: &[], num_classes: 4 }, None, &mut |_| {});
    assert!(matches!(no_set, Err(Error::Config(_))));

    let mut bn = tiny(SslTask::Rotation);
    bn.bn_policy = BnPolicy::RunningStats;
    let rejected = train(&bn, TrainData { train: &data, val: &[], num_classes: 4 }, Some(&set), &mut |_| {});
    assert!(matches!(rejected, Err(Error::Config(_))));
}

#[test]
fn exploding_learning_rate_aborts_with_step() {
    let data: Vec<LabeledImage<f32>> = noise_dataset(9, 4, 6, 8)
        .into_iter()
        .map(|i| LabeledImage { image: i.image.cast(), class_id: i.class_id, source_path: i.source_path })
        .collect();
    let mut cfg = tiny(SslTask::None);
    cfg.learning_rate = 1e38;
    cfg.episodes = 50;
    let err = train(&cfg, TrainData { train: &data, val: &[], num_classes: 4 }, None, &mut |_| {}).unwrap_err();
    match err {
        Error::NonFiniteLoss { step, .. } => assert!(step < 50),
        other => panic!("{other}"),
    }
}

fn constant_class_images(classes: usize, per_class: usize) -> Vec<LabeledImage<f64>> {
    (0..classes * per_class)
        .map(|i| {
            let c = i / per_class;
            let v = (c + 1) as f64 / (classes + 1) as f64;
            LabeledImage {
                image: ImageTensor::from_fn(8, 8, 3, |y, x, ch| if ch == 0 { v } else { ((y + x) % 2) as f64 * v }),
                class_id: c,
                source_path: format!("{c}/{i}"),
            }
        })
        .collect()
}

#[test]
fn validation_metric_examples() {
    let mut cfg = tiny(SslTask::None);
    cfg.val_episodes = 20;
    let model = ModelBundle::<f64>::new(cfg.model_config(0, 0), 1).unwrap();
    let separable = constant_class_images(3, 4);
    assert_eq!(validate(&model, &separable, &cfg).unwrap(), 1.0);

    let noise = noise_dataset(10, 5, 21, 8);
    let mut five = tiny(SslTask::None);
    five.n_way = 5;
    five.k_shot = 5;
    five.m_query = 16;
    five.val_episodes = 100;
    let acc = validate(&model, &noise, &five).unwrap();
    assert!((acc - 0.2).abs() < 0.05, "{acc}");
    assert_eq!(validate(&model, &noise, &five).unwrap(), acc);
    assert!(validate(&model, &[], &five).is_err());
}
