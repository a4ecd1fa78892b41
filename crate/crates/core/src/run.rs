//! File-backed training runs: resolved configuration, JSON-lines metric log
//! and a checkpoint rewritten after every epoch.
//!
//! An output directory holds
//!
//! - `config.toml`: the resolved run configuration,
//! - `metrics.jsonl`: one [`MetricRecord`] per line,
//! - `checkpoint.ckpt`: the latest training state, with the resolved
//!   configuration (output directory blanked) as its metadata, so identical
//!   runs produce identical bytes wherever they are written.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::grad::{read_checkpoint, write_checkpoint, CheckpointError};
use crate::harness::{init_params, prepare_samples, train, HarnessError, MetricRecord, TrainState};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("{path}: {source}")]
    Checkpoint {
        path: PathBuf,
        source: CheckpointError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Mismatch(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` through a temporary sibling so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Loads a checkpoint together with the run configuration stored in it.
pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, TrainState), RunError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let ckpt = read_checkpoint(&bytes).map_err(|source| RunError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })?;
    let run = RunConfig::from_toml(&ckpt.meta)?;
    Ok((run, TrainState::from_checkpoint(ckpt)?))
}

/// Trains as configured, writing artifacts into `run.output`. With `resume`
/// the run continues from the directory's checkpoint, whose configuration
/// must match apart from the epoch budget; metric lines past the checkpoint
/// are dropped. `on_record` sees every record as it is logged.
pub fn train_run(
    run: &RunConfig,
    resume: bool,
    mut on_record: impl FnMut(&MetricRecord),
) -> Result<TrainState, RunError> {
    run.validate()?;
    let dir = &run.output;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let meta = RunConfig {
        output: PathBuf::new(),
        ..run.clone()
    }
    .to_toml();
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let metrics_path = dir.join(METRICS_FILE);

    let mut state = if resume {
        let (stored, state) = load_checkpoint(&ckpt_path)?;
        let comparable = RunConfig {
            train: crate::harness::TrainConfig {
                epochs: run.train.epochs,
                ..stored.train
            },
            output: run.output.clone(),
            ..stored
        };
        if &comparable != run {
            return Err(RunError::Mismatch(
                "checkpoint was written by a different configuration".into(),
            ));
        }
        let kept: String = match fs::read_to_string(&metrics_path) {
            Ok(text) => text
                .lines()
                .filter(|l| {
                    serde_json::from_str::<MetricRecord>(l).is_ok_and(|r| r.epoch <= state.epoch)
                })
                .map(|l| format!("{l}\n"))
                .collect(),
            Err(_) => String::new(),
        };
        write_atomic(&metrics_path, kept.as_bytes())?;
        state
    } else {
        fs::write(&metrics_path, b"").map_err(io_err(&metrics_path))?;
        TrainState::new(init_params(&run.model, &mut run.init_rng()))
    };
    write_atomic(&dir.join(CONFIG_FILE), run.to_toml().as_bytes())?;

    let train_set = prepare_samples(&run.model, &run.train_set()?)?;
    let test_set = prepare_samples(&run.model, &run.test_set()?)?;
    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(io_err(&metrics_path))?;
    let mut failure: Option<RunError> = None;
    train(
        &run.model,
        &run.train_config(),
        &mut state,
        &train_set,
        Some(&test_set),
        |rec, st| {
            if failure.is_some() {
                return;
            }
            let line = serde_json::to_string(rec).expect("metric records serialize");
            if let Err(e) = writeln!(log, "{line}") {
                failure = Some(RunError::Io {
                    path: metrics_path.clone(),
                    source: e,
                });
                return;
            }
            on_record(rec);
            if rec.kind == "train" {
                if let Err(e) = write_atomic(&ckpt_path, &write_checkpoint(&st.to_checkpoint(meta.clone()))) {
                    failure = Some(e);
                }
            }
        },
    )?;
    match failure {
        Some(e) => Err(e),
        None => Ok(state),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::SceneConfig;

    fn tiny(dir: &Path) -> RunConfig {
        let mut run = RunConfig {
            output: dir.to_path_buf(),
            scene: SceneConfig {
                width: 12,
                height: 12,
                min_size: 3.0,
                max_size: 5.0,
                ..Default::default()
            },
            ..Default::default()
        };
        run.data.train = 12;
        run.data.test = 4;
        run.train.epochs = 2;
        run.train.batch = 4;
        run.model.head.channels1 = 2;
        run.model.head.channels2 = 2;
        run
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let full = tiny(a.path());
        train_run(&full, false, |_| {}).unwrap();

        let mut half = tiny(b.path());
        half.train.epochs = 1;
        train_run(&half, false, |_| {}).unwrap();
        let rest = tiny(b.path());
        train_run(&rest, true, |_| {}).unwrap();

        for f in [CHECKPOINT_FILE, METRICS_FILE] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
        let (cfg, state) = load_checkpoint(&a.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(cfg, RunConfig { output: PathBuf::new(), ..full });
        assert_eq!(state.epoch, 2);
    }

    #[test]
    fn resume_rejects_other_configs() {
        let d = tempfile::tempdir().unwrap();
        let mut run = tiny(d.path());
        run.train.epochs = 1;
        train_run(&run, false, |_| {}).unwrap();
        run.seed = 9;
        assert!(matches!(train_run(&run, true, |_| {}), Err(RunError::Mismatch(_))));
    }
}
