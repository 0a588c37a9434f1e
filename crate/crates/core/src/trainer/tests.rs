use super::checkpoint::{decode, encode};
use super::*;
use crate::dataset::{render_index, GenConfig};
use crate::error::CheckpointError;
use crate::model::{build_model, ModelConfig};
use crate::rng::Pcg32;
use crate::tensor::grad_check;

fn samples(count: usize, seed: u64) -> Vec<Sample> {
    let cfg = GenConfig {
        image_size: 16,
        seed,
        ..GenConfig::default()
    };
    (0..count)
        .map(|id| {
            let (image, annotations) = render_index(&cfg, id).unwrap();
            Sample {
                id,
                image,
                annotations,
            }
        })
        .collect()
}

fn tiny_model(seed: u64) -> Model {
    let cfg = ModelConfig::default()
        .with_widths(4, 2)
        .with_input_size(16, 16);
    build_model(cfg, seed).unwrap()
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 3,
        seed: 11,
        ..TrainConfig::default()
    }
}

// ------------------------------------------------------------------ loss

#[test]
fn loss_examples() {
    let g = Tensor::new([1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    assert!(seg_loss(&g, &g, 1.0, 1.0).unwrap() <= 2e-6);
    let half = Tensor::full([1, 1, 2, 2], 0.5);
    let loss = seg_loss(&half, &g, 1.0, 1.0).unwrap();
    assert!((loss - (2f64.ln() + 0.4)).abs() < 1e-12);
    assert!((loss - 1.093147).abs() < 1e-6);
    assert!(seg_loss(&half, &Tensor::zeros([1, 1, 2, 3]), 1.0, 1.0).is_err());

    for seed in 0..20 {
        let mut rng = Pcg32::new(seed, 8);
        let shape = if seed % 2 == 0 {
            [1, 1, 4, 4]
        } else {
            [3, 1, 4, 4]
        };
        let p = Tensor::uniform(shape, 0.05, 0.95, &mut rng);
        let t: Vec<f64> = (0..p.len())
            .map(|_| (rng.next_f64() < 0.5) as u8 as f64)
            .collect();
        let target = Tensor::new(shape, t).unwrap();
        let report = grad_check(
            |tape, x| {
                let g = tape.constant(target.clone());
                tape.seg_loss(x, g, 1.0, 1.0)
            },
            &p,
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-5, "seed {seed}: {report:?}");
    }
}

#[test]
fn batch_loss_is_the_mean_of_sample_losses() {
    let mut rng = Pcg32::new(3, 3);
    let p = Tensor::uniform([4, 1, 5, 5], 0.01, 0.99, &mut rng);
    let g = Tensor::new(
        [4, 1, 5, 5],
        (0..100).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect(),
    )
    .unwrap();
    let whole = seg_loss(&p, &g, 1.0, 1.0).unwrap();
    let mean = (0..4)
        .map(|i| seg_loss(&p.sample(i), &g.sample(i), 1.0, 1.0).unwrap())
        .sum::<f64>()
        / 4.0;
    assert!((whole - mean).abs() < 1e-14);
}

// ------------------------------------------------------------------ optimizers

fn one_param(value: f64) -> ParamSet {
    let mut set = ParamSet::new();
    set.insert("w", Tensor::full([1, 1, 1, 1], value)).unwrap();
    set
}

fn grads(g: f64) -> BTreeMap<String, Tensor> {
    [("w".to_string(), Tensor::full([1, 1, 1, 1], g))]
        .into_iter()
        .collect()
}

fn value(set: &ParamSet) -> f64 {
    set.get("w").unwrap().data()[0]
}

#[test]
fn sgd_examples() {
    let c = TrainConfig {
        lr: Some(0.1),
        momentum: 0.0,
        ..TrainConfig::default()
    };
    let mut p = one_param(1.0);
    let mut st = OptState::new(OptimizerKind::Sgd, &p);
    optimizer_step(&mut p, &grads(2.0), &mut st, &c).unwrap();
    assert!((value(&p) - 0.8).abs() < 1e-15);
    optimizer_step(&mut p, &grads(0.0), &mut st, &c).unwrap();
    assert!((value(&p) - 0.8).abs() < 1e-15);

    let c = TrainConfig {
        lr: Some(0.1),
        ..TrainConfig::default()
    };
    let mut p = one_param(0.0);
    let mut st = OptState::new(OptimizerKind::Sgd, &p);
    optimizer_step(&mut p, &grads(1.0), &mut st, &c).unwrap();
    optimizer_step(&mut p, &grads(1.0), &mut st, &c).unwrap();
    // v = 1 then 1.9.
    assert!((value(&p) + 0.29).abs() < 1e-15);
}

#[test]
fn adam_first_step_is_about_lr() {
    let c = TrainConfig {
        optimizer: OptimizerKind::Adam,
        ..TrainConfig::default()
    };
    let lr = c.learning_rate();
    for g in [1e-6, -0.3, 1.0, 250.0, -1e6] {
        let mut p = one_param(2.0);
        let mut st = OptState::new(OptimizerKind::Adam, &p);
        optimizer_step(&mut p, &grads(g), &mut st, &c).unwrap();
        let delta = (value(&p) - 2.0).abs();
        assert!(delta >= 0.9 * lr && delta <= lr, "g={g}: {delta}");
        assert!((value(&p) - 2.0).signum() == -g.signum());
    }
}

#[test]
fn optimizer_rejects_non_finite_gradients_untouched() {
    let c = TrainConfig::default();
    let mut p = one_param(1.0);
    p.insert("a", Tensor::full([1, 1, 1, 1], 3.0)).unwrap();
    let mut st = OptState::new(OptimizerKind::Sgd, &p);
    let mut g = grads(f64::NAN);
    g.insert("a".into(), Tensor::full([1, 1, 1, 1], 1.0));
    let err = optimizer_step(&mut p, &g, &mut st, &c).unwrap_err();
    assert!(
        matches!(&err, Error::NonFiniteGrad(name) if name == "w"),
        "{err}"
    );
    assert_eq!(p.get("a").unwrap().data()[0], 3.0);
    assert_eq!(st.step, 0);
}

#[test]
fn tiny_learning_rate_barely_moves_parameters() {
    let model = tiny_model(1);
    let data = samples(3, 1);
    let before = model.params().clone();
    let mut t = Trainer::new(
        model,
        TrainConfig {
            lr: Some(1e-12),
            epochs: 1,
            ..cfg(1)
        },
    )
    .unwrap();
    t.run_epoch(&data).unwrap();
    for ((_, a), (_, b)) in before.iter().zip(t.model.params().iter()) {
        assert!(a.max_abs_diff(b) <= 1e-9);
    }
}

// ------------------------------------------------------------------ training

#[test]
fn training_is_deterministic_and_lr_zero_is_flat() {
    let data = samples(7, 2);
    let (m1, log1) = train(tiny_model(3), &data, &cfg(3)).unwrap();
    let (m2, log2) = train(tiny_model(3), &data, &cfg(3)).unwrap();
    assert_eq!(m1, m2);
    let losses = |log: &[EpochLog]| log.iter().map(|e| e.mean_loss).collect::<Vec<_>>();
    assert_eq!(losses(&log1), losses(&log2));
    assert!(losses(&log1).iter().all(|&l| l >= 0.0));
    assert_eq!(log1.iter().map(|e| e.epoch).collect::<Vec<_>>(), [1, 2, 3]);

    let flat = TrainConfig {
        lr: Some(0.0),
        ..cfg(3)
    };
    let (_, log) = train(tiny_model(3), &data, &flat).unwrap();
    let l = losses(&log);
    assert!(l.iter().all(|&v| (v - l[0]).abs() < 1e-12), "{l:?}");

    let csv = format_log(&log1);
    assert!(csv.starts_with("epoch,mean_loss,seconds\n1,"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn non_finite_loss_reports_epoch_and_batch() {
    let data = samples(4, 5);
    let mut model = tiny_model(5);
    model
        .params_mut()
        .get_mut("head.out.w")
        .unwrap()
        .data_mut()
        .fill(f64::NAN);
    let mut t = Trainer::new(model, cfg(1)).unwrap();
    match t.run_epoch(&data) {
        Err(Error::NonFiniteLoss { epoch, batch }) => assert_eq!((epoch, batch), (1, 0)),
        other => panic!("expected a non-finite loss, got {other:?}"),
    }
}

// ------------------------------------------------------------------ checkpoints

fn trained(epochs: usize) -> (Trainer, Vec<Sample>) {
    let data = samples(5, 4);
    let mut t = Trainer::new(tiny_model(4), cfg(epochs)).unwrap();
    t.train(&data, |_| {}).unwrap();
    (t, data)
}

#[test]
fn checkpoint_round_trip_is_exact() {
    for optimizer in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        let data = samples(4, 4);
        let mut t = Trainer::new(
            tiny_model(4),
            TrainConfig {
                optimizer,
                ..cfg(1)
            },
        )
        .unwrap();
        t.train(&data, |_| {}).unwrap();
        let bytes = encode(&t.checkpoint());
        assert_eq!(&bytes[..4], b"ATSK");
        let back = decode(&bytes).unwrap();
        assert_eq!(back.model, t.model);
        assert_eq!(back.optimizer, t.opt);
        assert_eq!(back.rng, t.rng.raw());
        assert_eq!(back.epoch, 1);
        assert_eq!(encode(&back), bytes);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &back).unwrap();
        let again = load_checkpoint(&path).unwrap();
        save_checkpoint(dir.path().join("n.ckpt"), &again).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(dir.path().join("n.ckpt")).unwrap()
        );
    }
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let (full, data) = trained(3);
    let mut full_log = Vec::new();
    let mut again = Trainer::new(tiny_model(4), cfg(3)).unwrap();
    again.train(&data, |e| full_log.push(e.mean_loss)).unwrap();

    let (half, _) = trained(2);
    let bytes = encode(&half.checkpoint());
    let mut resumed = Trainer::resume(decode(&bytes).unwrap(), cfg(3)).unwrap();
    let log = resumed.train(&data, |_| {}).unwrap();
    assert_eq!(log.len(), 1);
    assert_eq!(log[0].epoch, 3);
    assert_eq!(log[0].mean_loss, full_log[2]);
    assert_eq!(resumed.model, full.model);
    assert_eq!(encode(&resumed.checkpoint()), encode(&full.checkpoint()));
}

#[test]
fn periodic_checkpoints_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    let data = samples(3, 6);
    let c = TrainConfig {
        checkpoint: Some(path.clone()),
        checkpoint_every: 1,
        ..cfg(2)
    };
    let mut t = Trainer::new(tiny_model(6), c.clone()).unwrap();
    let mut seen = Vec::new();
    t.train(&data, |e| seen.push(e.epoch)).unwrap();
    assert_eq!(seen, [1, 2]);
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.epoch, 2);
    assert_eq!(ck.train, Some(c));
}

fn checkpoint_error(bytes: &[u8]) -> CheckpointError {
    match decode(bytes) {
        Err(Error::Checkpoint(e)) => e,
        Err(other) => panic!("unexpected error {other}"),
        Ok(_) => panic!("corrupt bytes decoded"),
    }
}

#[test]
fn corrupt_checkpoints_fail_cleanly() {
    let (t, _) = trained(1);
    let bytes = encode(&t.checkpoint());

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(checkpoint_error(&bad), CheckpointError::BadMagic);

    let mut bad = bytes.clone();
    bad[4] = 9;
    assert_eq!(
        checkpoint_error(&bad),
        CheckpointError::Version {
            found: 9,
            expected: CHECKPOINT_VERSION
        }
    );

    for cut in [0, 3, 8, 11, 12, 40, bytes.len() / 2, bytes.len() - 1] {
        assert_eq!(
            checkpoint_error(&bytes[..cut]),
            CheckpointError::Truncated,
            "cut at {cut}"
        );
    }

    // First entry's name length field.
    let mut bad = bytes.clone();
    bad[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
    assert_eq!(checkpoint_error(&bad), CheckpointError::Truncated);

    let mut bad = bytes.clone();
    bad.push(0);
    assert!(matches!(
        checkpoint_error(&bad),
        CheckpointError::Corrupt(_)
    ));

    // Same-length edit of the embedded config: the stored tensors no longer fit.
    let text = String::from_utf8_lossy(&bytes).into_owned();
    let at = text.find("\"base_width\":4").unwrap() + "\"base_width\":".len();
    let mut bad = bytes.clone();
    bad[at] = b'6';
    assert!(matches!(
        checkpoint_error(&bad),
        CheckpointError::ShapeMismatch(_)
    ));

    let dir = tempfile::tempdir().unwrap();
    assert!(load_checkpoint(dir.path().join("none"))
        .unwrap_err()
        .is_io());
}
