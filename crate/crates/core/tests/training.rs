mod common;

use kbgn::harness::train::{read_log, train_until, RecordKind, RunFiles};
use kbgn::harness::{evaluate_checkpoint, train, Checkpoint, ClueMode};
use kbgn::{Ablation, Error, Kbgn};

use common::{dataset, small_run};

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let ds = dataset(1, 20, ClueMode::Mixed);
    let mut cfg = small_run(1);
    cfg.resolve(&ds).unwrap();
    let eps = ds.encode().unwrap();
    let (model, params) = Kbgn::new(cfg.model.clone()).unwrap();

    let full_dir = tempfile::tempdir().unwrap();
    let full = train(&model, params.clone(), &eps, &[], &cfg.train, Some(full_dir.path()), None).unwrap();

    let part_dir = tempfile::tempdir().unwrap();
    train_until(&model, params, &eps, &[], &cfg.train, Some(part_dir.path()), None, 1).unwrap();
    let ck = Checkpoint::load(&RunFiles::in_dir(part_dir.path()).last).unwrap();
    assert_eq!(ck.epoch, 1);
    let resumed = train(&model, ck.restore_stored().unwrap().1, &eps, &[], &cfg.train, Some(part_dir.path()), Some(&ck)).unwrap();

    let tail = full.step_losses()[ck.global_step..].to_vec();
    assert_eq!(resumed.step_losses(), tail);
    assert_eq!(read_log(&RunFiles::in_dir(part_dir.path()).log).unwrap(), full.log);
    assert_eq!(resumed.params, full.params);
}

#[test]
fn mismatched_checkpoint_is_refused() {
    let ds = dataset(2, 10, ClueMode::Vision);
    let mut cfg = small_run(2);
    cfg.train.epochs = 1;
    cfg.resolve(&ds).unwrap();
    let eps = ds.encode().unwrap();
    let (model, params) = Kbgn::new(cfg.model.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    train(&model, params, &eps, &[], &cfg.train, Some(dir.path()), None).unwrap();
    let ck = Checkpoint::load(&RunFiles::in_dir(dir.path()).best).unwrap();

    assert!(evaluate_checkpoint(&ck, &cfg.model, &eps, None).is_ok());
    let mut other = cfg.model.clone();
    other.ablation = Ablation::Vta;
    let err = evaluate_checkpoint(&ck, &other, &eps, None).unwrap_err();
    assert!(matches!(err, Error::Config(ref m) if m.contains("ablation KBGN vs VTA")), "{err}");
    let mut other = cfg.model.clone();
    other.hidden = 16;
    assert!(matches!(evaluate_checkpoint(&ck, &other, &eps, None), Err(Error::Config(_))));
}

#[test]
fn tampered_checkpoint_fails_to_load() {
    let ds = dataset(2, 5, ClueMode::Vision);
    let mut cfg = small_run(2);
    cfg.train.epochs = 1;
    cfg.resolve(&ds).unwrap();
    let (model, params) = Kbgn::new(cfg.model.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    train(&model, params, &ds.encode().unwrap(), &[], &cfg.train, Some(dir.path()), None).unwrap();
    let path = RunFiles::in_dir(dir.path()).last;
    let text = std::fs::read_to_string(&path).unwrap().replace("\"hidden\":8", "\"hidden\":9");
    std::fs::write(&path, text).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Data { .. })));
}

#[test]
fn non_finite_loss_stops_training() {
    let ds = dataset(3, 10, ClueMode::Vision);
    let mut cfg = small_run(3);
    cfg.resolve(&ds).unwrap();
    let (model, mut params) = Kbgn::new(cfg.model.clone()).unwrap();
    let name = params.names().find(|n| n.contains("decoder") || n.contains("embedding")).unwrap().to_string();
    params.get_mut(&name).unwrap().values_mut().iter_mut().for_each(|v| *v = f64::NAN);
    let err = train(&model, params, &ds.encode().unwrap(), &[], &cfg.train, None, None).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step: 0, .. }), "{err}");
}

#[test]
fn loss_falls_over_the_first_epochs() {
    let ds = dataset(4, 30, ClueMode::Vision);
    let mut cfg = small_run(4);
    cfg.model.embed_dim = 16;
    cfg.model.hidden = 16;
    cfg.train.epochs = 5;
    cfg.resolve(&ds).unwrap();
    let (model, params) = Kbgn::new(cfg.model.clone()).unwrap();
    let out = train(&model, params, &ds.encode().unwrap(), &[], &cfg.train, None, None).unwrap();
    let epochs: Vec<f64> = out.epoch_records().map(|r| r.loss).collect();
    assert_eq!(epochs.len(), 5);
    assert!(epochs[4] < epochs[0], "{epochs:?}");
}

#[test]
fn log_has_one_step_record_per_batch() {
    let ds = dataset(5, 12, ClueMode::Vision);
    let mut cfg = small_run(5);
    cfg.train.batch_size = 5;
    cfg.train.epochs = 2;
    cfg.resolve(&ds).unwrap();
    let (model, params) = Kbgn::new(cfg.model.clone()).unwrap();
    let val = dataset(6, 4, ClueMode::Vision).encode().unwrap();
    let out = train(&model, params, &ds.encode().unwrap(), &val, &cfg.train, None, None).unwrap();
    let steps = out.log.iter().filter(|r| r.kind == RecordKind::Step).count();
    assert_eq!(steps, 6);
    assert_eq!(out.global_step, 6);
    assert!(out.epoch_records().all(|r| r.val.is_some()));
    assert!(out.best_val.is_some());
}
