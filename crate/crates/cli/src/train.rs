use std::path::PathBuf;

use serde::Serialize;

use scse_core::data::Dataset;
use scse_core::tensorfile::write_atomic;
use scse_core::train::{self, TrainReport};
use scse_core::zoo::{self, Network};
use scse_core::Result;

use crate::config::RunConfig;
use crate::dataset;

pub const CHECKPOINT: &str = "checkpoint.setf";
pub const LOG: &str = "log.csv";
pub const MANIFEST: &str = "manifest.toml";

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub architecture: String,
    pub se_variant: String,
    pub parameters: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub class_weights: Vec<f64>,
    pub checkpoint: String,
    pub log: String,
    pub config: RunConfig,
}

pub struct TrainOutcome {
    pub net: Network,
    pub report: TrainReport,
    pub dir: PathBuf,
}

pub fn run(cfg: &RunConfig) -> Result<TrainOutcome> {
    let data = dataset::obtain(cfg)?;
    run_with(cfg, &data)
}

pub fn run_with(cfg: &RunConfig, data: &Dataset) -> Result<TrainOutcome> {
    let mut net = zoo::build_network(&cfg.arch, cfg.train.seed)?;
    let report = train::train_network(&mut net, data, &cfg.train)?;
    let dir = cfg.output.dir.clone();
    net.save(&dir.join(CHECKPOINT))?;
    write_atomic(&dir.join(LOG), train::log_csv(&report.log).as_bytes())?;
    let manifest = Manifest {
        config_hash: cfg.hash(),
        seed: cfg.train.seed,
        architecture: cfg.arch.kind.to_string(),
        se_variant: cfg.arch.se_variant.to_string(),
        parameters: net.count_parameters(),
        epochs_run: report.log.len(),
        best_epoch: report.best_epoch,
        stopped_early: report.stopped_early,
        class_weights: report.class_weights.as_slice().to_vec(),
        checkpoint: CHECKPOINT.into(),
        log: LOG.into(),
        config: cfg.clone(),
    };
    let text = toml::to_string(&manifest).expect("manifest serializes");
    write_atomic(&dir.join(MANIFEST), text.as_bytes())?;
    Ok(TrainOutcome { net, report, dir })
}
