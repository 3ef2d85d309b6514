use std::path::Path;

use ivasep::glu::archive::load_from_file;
use ivasep::mixsim::{make_dataset, DatasetManifest, MixtureSpec, SplitCounts};
use ivasep::train::{train, LogRecord, TrainConfig};
use ivasep::unroll::Loss;
use ivasep::Error;

fn dataset(dir: &Path, seed: u64) -> DatasetManifest {
    let spec = MixtureSpec { duration_s: 0.25, seed, ..MixtureSpec::default() };
    make_dataset(&spec, SplitCounts { train: 4, val: 2, test: 0 }, dir).unwrap()
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        n_iters_unrolled: 3,
        max_epochs: 2,
        frame_size: 64,
        hidden: 4,
        sample_length_s: None,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_freezes_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(&dir.path().join("data"), 1);
    let cfg = TrainConfig { learning_rate: 0.0, weight_decay: 0.0, ..tiny_config() };
    let report = train(&manifest, &cfg, &dir.path().join("w.ssma"), None).unwrap();
    assert_eq!(report.validation.len(), cfg.max_epochs + 1);
    for v in &report.validation {
        assert_eq!(*v, report.validation[0]);
    }
    assert_eq!(report.best_epoch, 0);

    let fresh = train(&manifest, &TrainConfig { max_epochs: 0, ..cfg }, &dir.path().join("w0.ssma"), None).unwrap();
    assert_eq!(fresh.params, report.params);
}

#[test]
fn same_seed_gives_the_same_archive_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(&dir.path().join("data"), 2);
    let cfg = tiny_config();
    let run = |name: &str| {
        let archive = dir.path().join(format!("{name}.ssma"));
        let log = dir.path().join(format!("{name}.jsonl"));
        let report = train(&manifest, &cfg, &archive, Some(&log)).unwrap();
        let records: Vec<LogRecord> = std::fs::read_to_string(&log)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        (report, std::fs::read(&archive).unwrap(), records)
    };
    let (a, bytes_a, log_a) = run("a");
    let (b, bytes_b, log_b) = run("b");
    assert_eq!(bytes_a, bytes_b);
    assert_eq!(a.validation, b.validation);
    let strip = |l: &[LogRecord]| l.iter().map(|r| (r.epoch, r.split.clone(), r.loss_name.clone(), r.value)).collect::<Vec<_>>();
    assert_eq!(strip(&log_a), strip(&log_b));
    assert_eq!(log_a, a.log);
}

#[test]
fn archive_holds_the_best_validation_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(&dir.path().join("data"), 3);
    let cfg = TrainConfig { max_epochs: 3, ..tiny_config() };
    let archive = dir.path().join("w.ssma");
    let report = train(&manifest, &cfg, &archive, None).unwrap();
    let best = report.validation.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(report.best_validation(), best);
    assert_eq!(report.validation.iter().position(|&v| v == best), Some(report.best_epoch));
    assert_eq!(load_from_file(&archive).unwrap(), report.params);
}

#[test]
fn log_names_the_losses() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(&dir.path().join("data"), 4);
    let cfg = TrainConfig { loss: Loss::Coherence, max_epochs: 1, ..tiny_config() };
    let report = train(&manifest, &cfg, &dir.path().join("w.ssma"), None).unwrap();
    let names: Vec<(&str, &str)> = report.log.iter().map(|r| (r.split.as_str(), r.loss_name.as_str())).collect();
    assert!(names.contains(&("train", "neg_pit_coherence")), "{names:?}");
    assert!(names.contains(&("val", "pit_si_sdr")), "{names:?}");
}

#[test]
fn empty_validation_split_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let spec = MixtureSpec { duration_s: 0.25, ..MixtureSpec::default() };
    let manifest = make_dataset(&spec, SplitCounts { train: 2, val: 0, test: 0 }, dir.path().join("data")).unwrap();
    let err = train(&manifest, &tiny_config(), &dir.path().join("w.ssma"), None).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err:?}");
}
