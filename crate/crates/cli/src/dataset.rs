//! Loading or generating the dataset a run configuration describes.

use scse_core::data::{self, Dataset, Split};
use scse_core::{Error, Result};

use crate::config::RunConfig;

const SPLITS: [Split; 3] = [Split::Train, Split::Val, Split::Test];

/// Reads the cached splits from `output.dataset_dir` when all three exist,
/// otherwise generates them (and caches them if a directory is configured).
pub fn obtain(cfg: &RunConfig) -> Result<Dataset> {
    let Some(dir) = &cfg.output.dataset_dir else {
        return data::generate_synthetic_dataset(&cfg.data);
    };
    let paths = SPLITS.map(|s| dir.join(format!("{}.setf", s.as_str())));
    if paths.iter().all(|p| p.exists()) {
        let [train, val, test] = paths.map(|p| data::load_split(&p));
        let dataset = Dataset {
            num_classes: cfg.data.num_classes,
            train: train?,
            val: val?,
            test: test?,
        };
        for split in SPLITS {
            for s in dataset.split(split) {
                s.label.check_range(dataset.num_classes).map_err(|e| {
                    Error::Data(format!(
                        "cached {} split in {}: {e}",
                        split.as_str(),
                        dir.display()
                    ))
                })?;
            }
        }
        return Ok(dataset);
    }
    let dataset = data::generate_synthetic_dataset(&cfg.data)?;
    for (split, path) in SPLITS.iter().zip(&paths) {
        data::save_split(path, dataset.split(*split))?;
    }
    Ok(dataset)
}
