use std::path::{Path, PathBuf};

use scse_core::data::{Dataset, Split};
use scse_core::metrics::{self, DiceReport};
use scse_core::tensorfile::write_atomic;
use scse_core::train;
use scse_core::zoo;
use scse_core::{Error, LabelMap, Result};

use crate::config::RunConfig;
use crate::dataset;

pub struct EvalOutcome {
    pub report: DiceReport,
    pub summary_path: PathBuf,
    pub per_class_path: PathBuf,
    pub matrix_path: PathBuf,
}

/// Where predictions come from.
pub enum Predictor<'a> {
    Checkpoint(&'a Path),
    /// Ground truth scored against itself.
    PassThrough,
}

pub fn run(cfg: &RunConfig, predictor: Predictor<'_>, split: Split) -> Result<EvalOutcome> {
    let data = dataset::obtain(cfg)?;
    run_with(cfg, &data, predictor, split)
}

pub fn run_with(
    cfg: &RunConfig,
    data: &Dataset,
    predictor: Predictor<'_>,
    split: Split,
) -> Result<EvalOutcome> {
    let samples = data.split(split);
    if samples.is_empty() {
        return Err(Error::Data(format!(
            "the {} split is empty",
            split.as_str()
        )));
    }
    let gts: Vec<LabelMap> = samples.iter().map(|s| s.label.clone()).collect();
    let preds = match predictor {
        Predictor::PassThrough => gts.clone(),
        Predictor::Checkpoint(path) => {
            let mut net = zoo::build_network(&cfg.arch, cfg.train.seed)?;
            net.load(path)?;
            train::predict_split(&net, samples, cfg.train.batch_size)?
        }
    };
    let report = metrics::dice_report(
        &preds,
        &gts,
        cfg.arch.num_classes,
        cfg.output.exclude_background,
    )?;

    let dir = &cfg.output.dir;
    let name = split.as_str();
    let summary_path = dir.join(format!("eval_{name}_summary.csv"));
    let per_class_path = dir.join(format!("eval_{name}_per_class.csv"));
    let matrix_path = dir.join(format!("eval_{name}_matrix.csv"));
    write_atomic(
        &summary_path,
        summary_csv(&report, samples.len()).as_bytes(),
    )?;
    write_atomic(&per_class_path, report.per_class_csv().as_bytes())?;
    write_atomic(&matrix_path, report.class_by_sample_csv().as_bytes())?;
    Ok(EvalOutcome {
        report,
        summary_path,
        per_class_path,
        matrix_path,
    })
}

pub fn summary_csv(r: &DiceReport, samples: usize) -> String {
    let mut out = String::from("metric,value\n");
    out.push_str(&format!("samples,{samples}\n"));
    out.push_str(&format!("exclude_background,{}\n", r.exclude_background));
    out.push_str(&format!("mean,{:.6}\n", r.mean));
    out.push_str(&format!("std,{:.6}\n", r.std));
    out.push_str(&format!("cell,{}\n", r.cell()));
    for (c, d) in r.per_class.iter().enumerate() {
        out.push_str(&format!("class_{c},{d:.6}\n"));
    }
    out
}
