//! Runs a configured experiment and persists its metrics, summary, plot data
//! and per-task checkpoints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{write_atomic, Blob};
use crate::config::{DatasetSource, ExperimentConfig};
use crate::data::{generate_synthetic_dataset, load_cifar100, Dataset};
use crate::error::{Error, Result};
use crate::protocol::{resume_schedule, RunMetrics, RunState, TaskRecord};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PLOT_FILE: &str = "plot_data.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_ECHO_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub num_tasks: usize,
    pub avg_incremental_nme: f64,
    pub avg_incremental_cnn: f64,
    pub final_nme: f64,
    pub final_cnn: f64,
    pub wall_time_secs: f64,
    pub tasks: Vec<TaskRecord>,
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let data = match cfg.dataset {
        DatasetSource::Synthetic => generate_synthetic_dataset(&cfg.synthetic_spec(), cfg.data_seed)?,
        DatasetSource::File => Dataset::load(cfg.dataset_path.as_deref().expect("validated"))?,
        DatasetSource::Cifar => load_cifar100(
            cfg.cifar_train.as_deref().expect("validated"),
            cfg.cifar_test.as_deref().expect("validated"),
            cfg.cifar_classes.as_deref(),
        )?,
    };
    if data.num_classes != cfg.num_classes {
        return Err(Error::Config(format!(
            "num_classes: {} but the dataset has {}",
            cfg.num_classes, data.num_classes
        )));
    }
    if data.image_shape() != cfg.image_shape {
        return Err(Error::Config(format!(
            "image_shape: {:?} but the dataset images are {:?}",
            cfg.image_shape,
            data.image_shape()
        )));
    }
    Ok(data)
}

pub fn metrics_csv(records: &[TaskRecord]) -> String {
    let mut s = String::from("task_index,seen_classes,nme_accuracy,cnn_accuracy\n");
    for r in records {
        writeln!(s, "{},{},{},{}", r.task_index, r.seen_classes, r.nme_accuracy, r.cnn_accuracy).unwrap();
    }
    s
}

/// Long format: one accuracy curve per inference mode, in percent.
pub fn plot_csv(records: &[TaskRecord]) -> String {
    let mut s = String::from("mode,task_index,seen_classes,accuracy_percent\n");
    for (mode, pick) in [("nme", 0), ("cnn", 1)] {
        for r in records {
            let acc = if pick == 0 { r.nme_accuracy } else { r.cnn_accuracy };
            writeln!(s, "{mode},{},{},{}", r.task_index, r.seen_classes, 100.0 * acc).unwrap();
        }
    }
    s
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Format(e.to_string())
}

/// Runs `cfg` to completion, writing every output file under `cfg.output_dir`.
///
/// With `resume`, continues from the checkpoint left by an earlier run of the
/// same config.
pub fn run_config(cfg: &ExperimentConfig, resume: bool) -> Result<Summary> {
    cfg.validate()?;
    let started = Instant::now();
    let dir = &cfg.output_dir;
    let protocol = cfg.protocol();
    let schedule = cfg.schedule()?;
    let dataset = load_dataset(cfg)?;
    std::fs::create_dir_all(dir)?;

    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let echo_path = dir.join(CONFIG_ECHO_FILE);
    let state = if resume && ckpt_path.exists() {
        let echoed: ExperimentConfig =
            serde_json::from_slice(&std::fs::read(&echo_path)?).map_err(json_err)?;
        if &echoed != cfg {
            return Err(Error::Config(format!(
                "cannot resume: {} was written by a different config",
                ckpt_path.display()
            )));
        }
        RunState::from_blob(&Blob::load(&ckpt_path)?, &protocol)?
    } else {
        RunState::fresh(&protocol, cfg.seed)?
    };
    write_atomic(&echo_path, serde_json::to_string_pretty(cfg).map_err(json_err)?.as_bytes())?;
    write_atomic(&dir.join(METRICS_FILE), metrics_csv(&state.records).as_bytes())?;

    let metrics = resume_schedule(state, &schedule, &protocol, &dataset, |_, st| {
        st.to_blob().save(&ckpt_path)?;
        write_atomic(&dir.join(METRICS_FILE), metrics_csv(&st.records).as_bytes())?;
        write_atomic(&dir.join(PLOT_FILE), plot_csv(&st.records).as_bytes())?;
        Ok(())
    })?;

    let summary = summarize_metrics(cfg, &metrics, started.elapsed().as_secs_f64());
    let json = serde_json::to_string_pretty(&summary).map_err(json_err)?;
    write_atomic(&dir.join(SUMMARY_FILE), json.as_bytes())?;
    Ok(summary)
}

pub fn run_experiment(config_path: &Path, resume: bool) -> Result<Summary> {
    run_config(&ExperimentConfig::load(config_path)?, resume)
}

fn summarize_metrics(cfg: &ExperimentConfig, m: &RunMetrics, wall: f64) -> Summary {
    let last = m.tasks.last().expect("at least one task");
    Summary {
        config: cfg.clone(),
        seed: cfg.seed,
        num_tasks: m.tasks.len(),
        avg_incremental_nme: m.avg_incremental_nme,
        avg_incremental_cnn: m.avg_incremental_cnn,
        final_nme: last.nme_accuracy,
        final_cnn: last.cnn_accuracy,
        wall_time_secs: wall,
        tasks: m.tasks.clone(),
    }
}

pub fn read_summary(dir: &Path) -> Result<Summary> {
    let path = dir.join(SUMMARY_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// One CSV row per run directory.
pub fn summarize(dirs: &[PathBuf]) -> Result<String> {
    let mut s = String::from(
        "run,seed,pod_mode,lambda_c,lambda_f,proxies_per_class,num_tasks,\
         avg_incremental_nme,avg_incremental_cnn,final_nme,final_cnn,wall_time_secs\n",
    );
    for d in dirs {
        let m = read_summary(d)?;
        let c = &m.config;
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{:.3}",
            d.display(),
            m.seed,
            c.pod_mode.name(),
            c.lambda_c,
            c.lambda_f,
            c.proxies_per_class,
            m.num_tasks,
            m.avg_incremental_nme,
            m.avg_incremental_cnn,
            m.final_nme,
            m.final_cnn,
            m.wall_time_secs
        )
        .unwrap();
    }
    Ok(s)
}
