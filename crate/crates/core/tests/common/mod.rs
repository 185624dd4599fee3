#![allow(dead_code)]

use std::path::PathBuf;

use prunebench::calib::{load_corpus, CalibStats, DEFAULT_DAMPING_FRACTION};
use prunebench::fixture::{corpus_file, fixture_dir, task_file, MODEL_FILE, TASKS};
use prunebench::eval::TaskFile;
use prunebench::model::ModelBundle;
use prunebench::pipeline::{calibrate, CalibSettings};
use prunebench::util::file_sha256;

pub fn fixture_path(rel: &str) -> PathBuf {
    fixture_dir().join(rel)
}

pub fn fixture_model() -> ModelBundle {
    ModelBundle::load(&fixture_path(MODEL_FILE)).expect("shipped fixture model loads")
}

pub fn corpus(name: &str) -> Vec<String> {
    load_corpus(&fixture_path(&corpus_file(name))).expect("shipped corpus loads")
}

pub fn tasks() -> Vec<TaskFile> {
    TASKS
        .iter()
        .map(|t| TaskFile::load(&fixture_path(&task_file(t))).expect("shipped task loads"))
        .collect()
}

/// Calibration settings small enough for quick tests.
pub fn quick_settings(seed: u64) -> CalibSettings {
    CalibSettings {
        n_samples: 64,
        seq_len: 64,
        seed,
        damping_fraction: DEFAULT_DAMPING_FRACTION,
    }
}

pub fn calibrate_on(bundle: &ModelBundle, corpus_name: &str, settings: &CalibSettings) -> CalibStats {
    let path = fixture_path(&corpus_file(corpus_name));
    let lines = load_corpus(&path).unwrap();
    calibrate(bundle, &lines, &file_sha256(&path).unwrap(), settings).unwrap()
}
