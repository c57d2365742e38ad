//! End-to-end behavior of the training harness on a tiny synthetic task.

mod common;

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use diffkd::checkpoint::Checkpoint;
use diffkd::config::ExperimentConfig;
use diffkd::metrics::{read_metrics, MetricsWriter, RecordKind};
use diffkd::train::{ensure_teacher, evaluate_checkpoint, train, Session, Trainer};
use diffkd::Error;

/// One teacher shared by every test in this binary.
fn teacher_dir() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        ensure_teacher(&common::tiny_config(dir.path())).unwrap();
        dir
    })
    .path()
}

/// Tiny config writing its outputs under `out`, sharing the teacher.
fn config(out: &Path) -> ExperimentConfig {
    let mut cfg = common::tiny_config(out);
    cfg.teacher.checkpoint = teacher_dir().join("teacher.safetensors");
    cfg
}

fn student_weights(path: &Path) -> Vec<(String, Vec<f32>)> {
    let ckpt = Checkpoint::load(path, &candle_core::Device::Cpu).unwrap();
    let mut v: Vec<_> = ckpt
        .tensors
        .iter()
        .filter(|(k, _)| k.starts_with("model."))
        .map(|(k, t)| (k.clone(), t.flatten_all().unwrap().to_vec1::<f32>().unwrap()))
        .collect();
    v.sort_by(|a, b| a.0.cmp(&b.0));
    v
}

#[test]
fn identical_seed_gives_identical_logs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train(config(a.path())).unwrap();
    train(config(b.path())).unwrap();
    let read = |d: &Path| std::fs::read(d.join("metrics.jsonl")).unwrap();
    assert!(!read(a.path()).is_empty());
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn resume_continues_the_uninterrupted_run() {
    let full = tempfile::tempdir().unwrap();
    let mut cfg = config(full.path());
    cfg.logging.keep_epoch_checkpoints = true;
    let summary = train(cfg).unwrap();

    let resumed_log = full.path().join("resumed.jsonl");
    let mut trainer = Trainer::resume(&full.path().join("student.epoch1.safetensors"), Some(resumed_log.clone())).unwrap();
    assert_eq!(trainer.epoch(), 1);
    let mut writer = MetricsWriter::create(&resumed_log).unwrap();
    let record = trainer.run_epoch(&mut writer).unwrap();
    let expected = &summary.final_record;
    assert_eq!(record.step, expected.step);
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-6 * y.abs().max(1.0);
    assert!(close(record.losses.total, expected.losses.total), "{record:?} vs {expected:?}");
    assert!(close(record.eval.unwrap().top1, expected.eval.unwrap().top1));
}

fn off_weights(cfg: diffkd::diffkd::DiffKdConfig) -> diffkd::diffkd::DiffKdConfig {
    diffkd::diffkd::DiffKdConfig { lambda_diff: 0.0, lambda_ae: 0.0, lambda_kd: 0.0, ..cfg }
}

#[test]
fn zero_weights_reduce_to_plain_training() {
    let (kd, plain) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut off = config(kd.path());
    off.diffkd = off_weights(off.diffkd);
    let a = train(off).unwrap();
    let mut none = config(plain.path());
    none.heads.clear();
    none.diffkd = off_weights(none.diffkd);
    let b = train(none).unwrap();
    assert_eq!(a.eval, b.eval);
    assert_eq!(
        student_weights(&kd.path().join("student.safetensors")),
        student_weights(&plain.path().join("student.safetensors"))
    );
}

#[test]
fn teacher_is_never_modified() {
    let dir = tempfile::tempdir().unwrap();
    let s = train(config(dir.path())).unwrap();
    assert!(s.teacher_fingerprint_before.is_some());
    assert_eq!(s.teacher_fingerprint_before, s.teacher_fingerprint_after);
}

#[test]
fn logged_total_is_the_weighted_sum() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.heads = vec![common::ae_head(4), diffkd::diffkd::HeadConfig::logits_kl()];
    cfg.diffkd.lambda_diff = 0.7;
    cfg.diffkd.lambda_ae = 1.3;
    cfg.diffkd.lambda_kd = 2.0;
    train(cfg.clone()).unwrap();
    let records = read_metrics(&cfg.logging.metrics_path).unwrap();
    let steps: Vec<_> = records.iter().filter(|r| r.kind == RecordKind::Step).collect();
    assert!(steps.len() >= 4);
    for w in records.windows(2) {
        assert!(w[1].step >= w[0].step);
    }
    for r in steps {
        let l = &r.losses;
        let expected = cfg.diffkd.weighted_total(l.task, l.diff, l.ae, l.diffkd);
        assert!((l.total - expected).abs() <= 1e-6 * expected.abs(), "{l:?}");
        assert!(l.diff > 0.0 && l.ae > 0.0 && l.diffkd > 0.0);
        let g = r.gamma_stats.as_ref().unwrap();
        assert!(g.min > 0.0 && g.max < 1.0);
    }
}

#[test]
fn teacher_evaluation_reproduces_recorded_accuracy() {
    let path = teacher_dir().join("teacher.safetensors");
    let recorded = Checkpoint::load(&path, &candle_core::Device::Cpu).unwrap().state.recorded.unwrap();
    let again = evaluate_checkpoint(&path).unwrap();
    assert!((again.top1 - recorded.top1).abs() <= 0.01);
    assert!((again.top5 - recorded.top5).abs() <= 0.01);
    assert!(again.top5 >= again.top1);
}

#[test]
fn student_checkpoint_evaluates_like_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let s = train(config(dir.path())).unwrap();
    let again = evaluate_checkpoint(&s.checkpoint).unwrap();
    assert_eq!(again, s.eval);
    assert!(s.eval.top5 >= s.eval.top1);
}

#[test]
fn architecture_mismatch_is_a_checkpoint_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.teacher.arch = "resnet8-w8".into();
    let session = Session::new(cfg, 3, 10).unwrap();
    assert!(matches!(session.load_teacher(), Err(Error::Checkpoint(_))));

    let mut cfg = config(dir.path());
    cfg.teacher.checkpoint = PathBuf::from("/nonexistent/teacher.safetensors");
    let session = Session::new(cfg, 3, 10).unwrap();
    assert!(matches!(session.load_teacher(), Err(Error::Checkpoint(_))));
}

#[test]
fn divergence_aborts_with_a_record() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.optimizer.lr = 1e12;
    let err = train(cfg.clone()).expect_err("run should diverge");
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
    let records = read_metrics(&cfg.logging.metrics_path).unwrap();
    assert_eq!(records.last().unwrap().kind, RecordKind::Divergence);
}
