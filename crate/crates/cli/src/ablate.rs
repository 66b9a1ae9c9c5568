//! The (architecture × SE variant) grid: train, evaluate and compare every cell.
//!
//! Files written under `output.dir`:
//!
//! | file          | contents                                                       |
//! |---------------|----------------------------------------------------------------|
//! | `grid.csv`    | one row per architecture, one `mean±std` test Dice per variant |
//! | `pvalues.csv` | Wilcoxon signed-rank of each variant against `none`            |
//! | `cells.csv`   | seed, parameter counts, epochs and Dice per cell               |
//! | `timing.csv`  | wall-clock seconds per cell                                    |
//! | `cells/<arch>_<variant>/` | checkpoint and epoch log                           |
//!
//! Everything except `timing.csv` is a pure function of the configuration.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Instant;

use scse_core::data::{Dataset, Split};
use scse_core::metrics::{self, DiceReport, SignificanceResult, WilcoxonMethod};
use scse_core::se::SeVariant;
use scse_core::tensorfile::write_atomic;
use scse_core::train::{self, TrainConfig};
use scse_core::zoo::{ArchKind, ArchSpec};
use scse_core::{Error, LabelMap, Result};

use crate::config::{cell_seed, RunConfig};
use crate::dataset;

pub const THREADS_VAR: &str = "SCSE_THREADS";

#[derive(Clone, Debug)]
pub struct Options {
    pub archs: Vec<ArchKind>,
    pub variants: Vec<SeVariant>,
    pub threads: usize,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            archs: ArchKind::ALL.to_vec(),
            variants: SeVariant::ALL.to_vec(),
            threads: 1,
        }
    }
}

/// Worker count from `SCSE_THREADS`, 1 when unset.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(1),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!(
                "{THREADS_VAR} must be a positive integer, got '{s}'"
            ))),
        },
    }
}

/// Parses a comma-separated list such as `unet,sdnet`.
pub fn parse_list<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<Vec<T>> {
    let items = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::parse)
        .collect::<Result<Vec<T>>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("empty list '{s}'")));
    }
    Ok(items)
}

#[derive(Clone, Debug)]
pub struct CellSummary {
    pub report: DiceReport,
    pub parameters: usize,
    pub se_parameters: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
}

#[derive(Clone, Debug)]
pub struct Cell {
    pub arch: ArchKind,
    pub variant: SeVariant,
    pub seed: u64,
    /// The error message when the cell failed.
    pub outcome: std::result::Result<CellSummary, String>,
    pub seconds: f64,
}

impl Cell {
    pub fn dir_name(&self) -> String {
        format!("{}_{}", self.arch, self.variant)
    }
}

/// Comparison of one variant against `none` for one architecture.
#[derive(Clone, Debug)]
pub struct Comparison {
    pub arch: ArchKind,
    pub variant: SeVariant,
    /// The reason no test was run, when none was.
    pub result: std::result::Result<SignificanceResult, String>,
}

#[derive(Clone, Debug)]
pub struct Grid {
    pub archs: Vec<ArchKind>,
    pub variants: Vec<SeVariant>,
    /// Row-major: architecture, then variant.
    pub cells: Vec<Cell>,
    pub comparisons: Vec<Comparison>,
}

impl Grid {
    pub fn cell(&self, arch: ArchKind, variant: SeVariant) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.arch == arch && c.variant == variant)
    }

    pub fn failed(&self) -> bool {
        self.cells.iter().any(|c| c.outcome.is_err())
    }

    pub fn grid_csv(&self) -> String {
        let mut out = String::from("architecture");
        for v in &self.variants {
            out.push(',');
            out.push_str(column_label(*v));
        }
        out.push('\n');
        for &a in &self.archs {
            out.push_str(a.as_str());
            for &v in &self.variants {
                out.push(',');
                match self.cell(a, v).map(|c| &c.outcome) {
                    Some(Ok(s)) => out.push_str(&s.report.cell()),
                    _ => out.push_str("FAILED"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn pvalues_csv(&self) -> String {
        let mut out = String::from("architecture,variant,baseline,n,statistic,p_value,method\n");
        for c in &self.comparisons {
            let (n, stat, p, method) = match &c.result {
                Ok(r) => (
                    r.n.to_string(),
                    format!("{}", r.statistic),
                    format!("{:.6e}", r.p_value),
                    match r.method {
                        WilcoxonMethod::Exact => "exact",
                        WilcoxonMethod::NormalApprox => "normal",
                    }
                    .to_string(),
                ),
                Err(_) => ("n/a".into(), "n/a".into(), "n/a".into(), "n/a".into()),
            };
            out.push_str(&format!(
                "{},{},none,{n},{stat},{p},{method}\n",
                c.arch, c.variant
            ));
        }
        out
    }

    pub fn cells_csv(&self) -> String {
        let mut out = String::from(
            "architecture,variant,seed,status,parameters,se_parameters,epochs_run,best_epoch,mean_dice,std_dice\n",
        );
        for c in &self.cells {
            match &c.outcome {
                Ok(s) => out.push_str(&format!(
                    "{},{},{},ok,{},{},{},{},{:.6},{:.6}\n",
                    c.arch,
                    c.variant,
                    c.seed,
                    s.parameters,
                    s.se_parameters,
                    s.epochs_run,
                    s.best_epoch,
                    s.report.mean,
                    s.report.std
                )),
                Err(_) => out.push_str(&format!(
                    "{},{},{},FAILED,,,,,,\n",
                    c.arch, c.variant, c.seed
                )),
            }
        }
        out
    }

    pub fn timing_csv(&self) -> String {
        let mut out = String::from("architecture,variant,seconds\n");
        for c in &self.cells {
            out.push_str(&format!("{},{},{:.3}\n", c.arch, c.variant, c.seconds));
        }
        out
    }

    /// Aligned text table for the terminal.
    pub fn render(&self) -> String {
        let csv = self.grid_csv();
        let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
        let cols = rows[0].len();
        let widths: Vec<usize> = (0..cols)
            .map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in &rows {
            let cells: Vec<String> = r
                .iter()
                .zip(&widths)
                .map(|(s, w)| format!("{s:<w$}"))
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        if !self.comparisons.is_empty() {
            out.push_str("\nWilcoxon signed-rank vs none (per-sample mean Dice)\n");
            for c in &self.comparisons {
                let p = match &c.result {
                    Ok(r) => format!("p = {:.4}", r.p_value),
                    Err(why) => format!("n/a ({why})"),
                };
                out.push_str(&format!(
                    "{:<9} {:<5} {p}\n",
                    c.arch.as_str(),
                    c.variant.as_str()
                ));
            }
        }
        for c in &self.cells {
            if let Err(why) = &c.outcome {
                out.push_str(&format!("FAILED {}: {why}\n", c.dir_name()));
            }
        }
        out
    }
}

/// Table header for a variant's column.
pub fn column_label(v: SeVariant) -> &'static str {
    match v {
        SeVariant::None => "No SE",
        SeVariant::Cse => "+cSE",
        SeVariant::Sse => "+sSE",
        SeVariant::Scse => "+scSE",
    }
}

pub fn run(cfg: &RunConfig, opts: &Options) -> Result<Grid> {
    let data = dataset::obtain(cfg)?;
    run_with(cfg, &data, opts)
}

pub fn run_with(cfg: &RunConfig, data: &Dataset, opts: &Options) -> Result<Grid> {
    if opts.archs.is_empty() || opts.variants.is_empty() || opts.threads == 0 {
        return Err(Error::Config(
            "ablation needs at least one architecture, one variant and one thread".into(),
        ));
    }
    let jobs: Vec<(ArchKind, SeVariant)> = opts
        .archs
        .iter()
        .flat_map(|&a| opts.variants.iter().map(move |&v| (a, v)))
        .collect();
    let slots: Mutex<Vec<Option<Cell>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    let workers = opts.threads.min(jobs.len());
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(arch, variant)) = jobs.get(i) else {
                    break;
                };
                let cell = run_cell(cfg, data, arch, variant);
                slots
                    .lock()
                    .expect("no worker panics while holding the lock")[i] = Some(cell);
            });
        }
    });
    let cells: Vec<Cell> = slots
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|c| c.expect("every job ran"))
        .collect();

    let mut grid = Grid {
        archs: opts.archs.clone(),
        variants: opts.variants.clone(),
        cells,
        comparisons: Vec::new(),
    };
    grid.comparisons = compare(&grid);

    let dir = &cfg.output.dir;
    write_atomic(&dir.join("grid.csv"), grid.grid_csv().as_bytes())?;
    write_atomic(&dir.join("pvalues.csv"), grid.pvalues_csv().as_bytes())?;
    write_atomic(&dir.join("cells.csv"), grid.cells_csv().as_bytes())?;
    write_atomic(&dir.join("timing.csv"), grid.timing_csv().as_bytes())?;
    Ok(grid)
}

fn compare(grid: &Grid) -> Vec<Comparison> {
    if !grid.variants.contains(&SeVariant::None) {
        return Vec::new();
    }
    let mut out = Vec::new();
    for &arch in &grid.archs {
        let base = grid.cell(arch, SeVariant::None).map(|c| &c.outcome);
        for &variant in grid.variants.iter().filter(|v| **v != SeVariant::None) {
            let other = grid.cell(arch, variant).map(|c| &c.outcome);
            let result = match (base, other) {
                (Some(Ok(b)), Some(Ok(o))) => metrics::wilcoxon_signed_rank(
                    &o.report.sample_means(),
                    &b.report.sample_means(),
                )
                .map_err(|e| e.to_string()),
                _ => Err("a cell failed".to_string()),
            };
            out.push(Comparison {
                arch,
                variant,
                result,
            });
        }
    }
    out
}

fn run_cell(cfg: &RunConfig, data: &Dataset, arch: ArchKind, variant: SeVariant) -> Cell {
    let seed = cell_seed(cfg.train.seed, arch, variant);
    let start = Instant::now();
    let outcome = panic::catch_unwind(AssertUnwindSafe(|| {
        train_cell(cfg, data, arch, variant, seed)
    }))
    .unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(Error::Data(format!("cell panicked: {msg}")))
    })
    .map_err(|e| e.to_string());
    Cell {
        arch,
        variant,
        seed,
        outcome,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn train_cell(
    cfg: &RunConfig,
    data: &Dataset,
    arch: ArchKind,
    variant: SeVariant,
    seed: u64,
) -> Result<CellSummary> {
    let spec = ArchSpec {
        kind: arch,
        ..cfg.arch.with_variant(variant)
    };
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let (net, report) = train::train_loop(&spec, data, &train_cfg)?;
    let dir = cell_dir(&cfg.output.dir, arch, variant);
    net.save(&dir.join(crate::train::CHECKPOINT))?;
    write_atomic(
        &dir.join(crate::train::LOG),
        train::log_csv(&report.log).as_bytes(),
    )?;

    let test = data.split(Split::Test);
    let preds = train::predict_split(&net, test, train_cfg.batch_size)?;
    let gts: Vec<LabelMap> = test.iter().map(|s| s.label.clone()).collect();
    let dice = metrics::dice_report(
        &preds,
        &gts,
        spec.num_classes,
        cfg.output.exclude_background,
    )?;
    Ok(CellSummary {
        report: dice,
        parameters: net.count_parameters(),
        se_parameters: spec.se_overhead()?,
        epochs_run: report.log.len(),
        best_epoch: report.best_epoch,
    })
}

pub fn cell_dir(out: &Path, arch: ArchKind, variant: SeVariant) -> std::path::PathBuf {
    out.join("cells").join(format!("{arch}_{variant}"))
}
