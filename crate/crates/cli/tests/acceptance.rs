//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scse_cli::ablate::{self, Grid, Options};
use scse_cli::config::RunConfig;
use scse_cli::dataset;
use scse_core::data::{self, DatasetSpec, Split};
use scse_core::gradcheck::DEFAULT_EPS;
use scse_core::gradsuite::{self, GradBlock, NETWORK_EPS};
use scse_core::kernels;
use scse_core::metrics::{self, dice_per_class, wilcoxon_signed_rank, WilcoxonMethod};
use scse_core::se::{self, SeParams, SeVariant};
use scse_core::tensorfile::{self, EntryData, TensorEntry};
use scse_core::train::{self, OptimState, TrainConfig};
use scse_core::zoo::{self, ArchKind, ArchSpec};
use scse_core::{Graph, LabelMap, Tensor};

struct Verdict {
    ok: bool,
    detail: String,
}

fn verdict(ok: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        ok,
        detail: detail.into(),
    }
}

fn criterion(n: usize, title: &str, budget: Duration, body: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let v = body();
    let took = start.elapsed();
    let ok = v.ok && took <= budget;
    println!(
        "criterion {n} {}: {title} ({:.1}s of {}s) {}",
        if ok { "PASS" } else { "FAIL" },
        took.as_secs_f64(),
        budget.as_secs(),
        v.detail
    );
    ok
}

fn random(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn complexity() -> Verdict {
    let blocks = se::network_se_overhead(&[64; 8], SeVariant::Scse, 2).unwrap();
    let spec = ArchSpec::paper_scale(ArchKind::Unet, SeVariant::Scse);
    let vanilla = zoo::build_network(&spec.with_variant(SeVariant::None), 0)
        .unwrap()
        .count_parameters();
    let overhead = spec.se_overhead().unwrap();
    let pct = 100.0 * overhead as f64 / vanilla as f64;
    verdict(
        blocks == 33280
            && overhead == 33280
            && (1_800_000..=2_400_000).contains(&vanilla)
            && (1.3..=1.9).contains(&pct),
        format!("overhead {overhead}, vanilla {vanilla}, increase {pct:.3}%"),
    )
}

fn equation_fidelity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_identity = 0.0f64;
    let mut failures = Vec::new();
    for i in 0..100 {
        let c = 2 * rng.random_range(1..9);
        let shape = [
            rng.random_range(1..3),
            c,
            rng.random_range(1..9),
            rng.random_range(1..9),
        ];
        let u = random(&shape, 3.0, &mut rng);

        let z = |v| SeParams::zeros(v, c, 2).unwrap().apply(&u).unwrap();
        let identity = z(SeVariant::Scse)
            .data()
            .iter()
            .zip(u.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst_identity = worst_identity.max(identity);
        let half = u.map(|v| 0.5 * v);
        if z(SeVariant::Cse) != half || z(SeVariant::Sse) != half {
            failures.push(format!("instance {i}: zero gate is not 0.5"));
        }

        let mut cp = SeParams::zeros(SeVariant::Cse, c, 2).unwrap();
        cp.squeeze = Some(random(&[c / 2, c], 2.0, &mut rng));
        cp.excite = Some(random(&[c, c / 2], 2.0, &mut rng));
        let mut sp = SeParams::zeros(SeVariant::Sse, c, 2).unwrap();
        sp.spatial = Some(random(&[1, c, 1, 1], 2.0, &mut rng));
        let mut g = Graph::new();
        let x = g.leaf(u.clone());
        let (vc, vs) = (cp.register(&mut g), sp.register(&mut g));
        let a = se::cse_forward(&mut g, x, &vc).unwrap();
        let b = se::sse_forward(&mut g, x, &vs).unwrap();
        let both = se::scse_forward(&mut g, x, &vc, &vs).unwrap();
        let (a, b, both) = (g.value(a), g.value(b), g.value(both));
        for j in 0..u.len() {
            let x = u.data()[j].abs();
            if both.data()[j].to_bits() != (a.data()[j] + b.data()[j]).to_bits() {
                failures.push(format!("instance {i}: scSE differs from cSE + sSE at {j}"));
                break;
            }
            if a.data()[j].abs() > x || both.data()[j].abs() > 2.0 * x {
                failures.push(format!("instance {i}: gate bound broken at {j}"));
                break;
            }
        }
    }
    if worst_identity > 1e-12 {
        failures.push(format!("zero-init scSE deviates by {worst_identity:e}"));
    }
    verdict(
        failures.is_empty(),
        failures
            .first()
            .cloned()
            .unwrap_or_else(|| format!("100 instances, identity error {worst_identity:.1e}")),
    )
}

fn gradient_suite() -> Verdict {
    let mut worst_block = (0.0f64, String::new());
    let mut failures = Vec::new();
    for block in GradBlock::ALL {
        let r = gradsuite::check_block(block, 0, DEFAULT_EPS).unwrap();
        if r.max_relative_error() > worst_block.0 {
            worst_block = (r.max_relative_error(), r.subject.clone());
        }
        if !r.passed() {
            failures.push(r.subject.clone());
        }
    }
    let mut worst_net = (0.0f64, String::new());
    for kind in ArchKind::ALL {
        for variant in SeVariant::ALL {
            let spec = ArchSpec::desk(kind, variant);
            let r = gradsuite::check_network(&spec, 0, NETWORK_EPS, 0.01, 16).unwrap();
            if r.max_relative_error() > worst_net.0 {
                worst_net = (r.max_relative_error(), r.subject.clone());
            }
            if !r.passed() {
                failures.push(r.subject.clone());
            }
        }
    }
    verdict(
        failures.is_empty(),
        format!(
            "{} blocks worst {:.1e} ({}), 12 networks worst {:.1e} ({}){}",
            GradBlock::ALL.len(),
            worst_block.0,
            worst_block.1,
            worst_net.0,
            worst_net.1,
            if failures.is_empty() {
                String::new()
            } else {
                format!("; failed: {}", failures.join(", "))
            }
        ),
    )
}

/// Cross-correlation with zero padding, one output element at a time.
fn reference_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [n, ci, h, wd]: [usize; 4] = x.shape().try_into().unwrap();
    let [co, _, kh, kw]: [usize; 4] = w.shape().try_into().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let at = |t: &Tensor, i: [usize; 4], d: [usize; 4]| {
        t.data()[((i[0] * d[1] + i[1]) * d[2] + i[2]) * d[3] + i[3]]
    };
    let mut out = Vec::new();
    for s in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xo * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += at(x, [s, c, iy as usize, ix as usize], [n, ci, h, wd])
                                    * at(w, [o, c, dy, dx], [co, ci, kh, kw]);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::new(vec![n, co, oh, ow], out).unwrap()
}

/// Two-sided p over all `2^n` sign flips of the average ranks.
fn enumerated_p(d: &[f64]) -> f64 {
    let d: Vec<f64> = d.iter().copied().filter(|v| *v != 0.0).collect();
    let ranks: Vec<f64> = d
        .iter()
        .map(|x| {
            let below = d.iter().filter(|y| y.abs() < x.abs()).count() as f64;
            let tied = d.iter().filter(|y| y.abs() == x.abs()).count() as f64;
            below + (tied + 1.0) / 2.0
        })
        .collect();
    let total: f64 = ranks.iter().sum();
    let plus: f64 = d
        .iter()
        .zip(&ranks)
        .filter(|(x, _)| **x > 0.0)
        .map(|(_, r)| r)
        .sum();
    let w = plus.min(total - plus);
    let n = d.len();
    let hits = (0u64..1 << n)
        .filter(|m| {
            (0..n)
                .filter(|i| m >> i & 1 == 1)
                .map(|i| ranks[i])
                .sum::<f64>()
                <= w + 1e-9
        })
        .count();
    (2.0 * hits as f64 / (1u64 << n) as f64).min(1.0)
}

fn oracle_equivalences() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut conv_err = 0.0f64;
    for _ in 0..20 {
        let (n, ci, co) = (
            rng.random_range(1..3),
            rng.random_range(1..4),
            rng.random_range(1..5),
        );
        let k = [1, 3, 5][rng.random_range(0..3)];
        let (stride, pad) = (rng.random_range(1..3), rng.random_range(0..=k / 2));
        // pick output extents, then the inputs that produce them exactly
        let side = |o: usize| (o - 1) * stride + k - 2 * pad;
        let (h, w) = (side(rng.random_range(1..6)), side(rng.random_range(1..6)));
        let x = random(&[n, ci, h, w], 1.0, &mut rng);
        let wt = random(&[co, ci, k, k], 1.0, &mut rng);
        let b = random(&[co], 1.0, &mut rng);
        let fast = kernels::conv2d(&x, &wt, Some(&b), stride, pad).unwrap();
        let slow = reference_conv(&x, &wt, &b, stride, pad);
        assert_eq!(fast.shape(), slow.shape());
        for (p, q) in fast.data().iter().zip(slow.data()) {
            conv_err = conv_err.max((p - q).abs());
        }
    }

    let mut fixtures = 0;
    let mut mismatches = 0;
    for n in 5..=12 {
        for case in 0..10 {
            let d: Vec<f64> = (0..n)
                .map(|_| {
                    let v: f64 = rng.random_range(-1.0..1.0) + 0.2;
                    if case % 2 == 1 {
                        (v * 4.0).round() / 4.0
                    } else {
                        v
                    }
                })
                .collect();
            if d.iter().filter(|v| **v != 0.0).count() < 5 {
                continue;
            }
            let r = wilcoxon_signed_rank(&d, &vec![0.0; n]).unwrap();
            fixtures += 1;
            if r.method != WilcoxonMethod::Exact || r.p_value != enumerated_p(&d) {
                mismatches += 1;
            }
        }
    }

    let m = |v: &[u32]| LabelMap::new(vec![2, 3], v.to_vec()).unwrap();
    let (p, g) = (m(&[1, 1, 0, 0, 2, 0]), m(&[1, 0, 1, 0, 0, 0]));
    let dice = [0, 1, 2, 3].map(|c| dice_per_class(&p, &g, c).unwrap());
    let dice_ok = dice == [4.0 / 7.0, 0.5, 0.0, 1.0];

    verdict(
        conv_err <= 1e-12 && mismatches == 0 && fixtures >= 60 && dice_ok,
        format!(
            "conv max error {conv_err:.1e}; {}/{fixtures} exact p-values identical; Dice fixture {dice:?}",
            fixtures - mismatches
        ),
    )
}

fn small_data() -> data::Dataset {
    data::generate_synthetic_dataset(&DatasetSpec {
        num_train: 12,
        num_val: 4,
        num_test: 4,
        ..DatasetSpec::default()
    })
    .unwrap()
}

fn training_recipe() -> Verdict {
    let cfg = TrainConfig::default();
    let lrs = [0, 10, 25].map(|e| train::lr_at_epoch(&cfg, e));
    let lr_ok = lrs
        .iter()
        .zip([0.01, 0.001, 0.0001])
        .all(|(a, b)| (a - b).abs() <= 1e-15 * b);

    let mut p = vec![Tensor::scalar(1.0)];
    let mut s = OptimState::new(&p, 0.01);
    s.velocity[0] = Tensor::scalar(0.2);
    train::sgd_update(&mut p, &[Tensor::scalar(0.0)], &mut s, 0.01, 0.95, 1e-4).unwrap();
    let (v, w) = (s.velocity[0].item().unwrap(), p[0].item().unwrap());
    let sgd_ok = (v - 0.1901).abs() <= 1e-12 && (w - 0.998099).abs() <= 1e-12;

    let labels = LabelMap::new(vec![10], vec![0, 0, 0, 0, 0, 1, 1, 1, 2, 2]).unwrap();
    let weights = train::median_frequency_weights(&[&labels], 3).unwrap();
    let median_ok = weights.as_slice() == [0.6, 1.0, 1.5];

    let data = small_data();
    let run_cfg = TrainConfig {
        max_epochs: 2,
        seed: 3,
        ..TrainConfig::default()
    };
    let spec = ArchSpec::desk(ArchKind::Unet, SeVariant::Scse);
    let (_, a) = train::train_loop(&spec, &data, &run_cfg).unwrap();
    let (_, b) = train::train_loop(&spec, &data, &run_cfg).unwrap();
    let logs_ok = train::log_csv(&a.log) == train::log_csv(&b.log);

    verdict(
        lr_ok && sgd_ok && median_ok && logs_ok,
        format!(
            "lr {lrs:?}; sgd v={v} p={w}; weights {:?}; logs identical: {logs_ok}",
            weights.as_slice()
        ),
    )
}

fn desk_learning(grid: &Grid) -> Verdict {
    let mut worst = (f64::INFINITY, String::new());
    let mut failures = Vec::new();
    let mut scse_unet = f64::NAN;
    for c in &grid.cells {
        match &c.outcome {
            Ok(s) => {
                let mean = s.report.mean;
                if mean < worst.0 {
                    worst = (mean, c.dir_name());
                }
                if mean < 0.80 || s.epochs_run > 30 {
                    failures.push(format!("{} {mean:.3}", c.dir_name()));
                }
                if c.arch == ArchKind::Unet && c.variant == SeVariant::Scse {
                    scse_unet = mean;
                }
            }
            Err(e) => failures.push(format!("{} failed: {e}", c.dir_name())),
        }
    }
    verdict(
        grid.cells.len() == 12 && failures.is_empty() && scse_unet >= 0.90,
        format!(
            "lowest cell {} at {:.3}, scSE unet {scse_unet:.3}{}",
            worst.1,
            worst.0,
            if failures.is_empty() {
                String::new()
            } else {
                format!("; below bound: {}", failures.join(", "))
            }
        ),
    )
}

fn is_cell(s: &str) -> bool {
    let Some((m, sd)) = s.split_once('±') else {
        return false;
    };
    [m, sd].iter().all(|p| {
        p.len() == 5
            && p.as_bytes()[1] == b'.'
            && p.parse::<f64>().is_ok_and(|v| (0.0..=1.0).contains(&v))
    })
}

fn report_shape(grid: &Grid) -> Verdict {
    let csv = grid.grid_csv();
    let lines: Vec<&str> = csv.lines().collect();
    let header_ok = lines.first() == Some(&"architecture,No SE,+cSE,+sSE,+scSE");
    let rows_ok = lines.len() == 4
        && lines[1..]
            .iter()
            .zip(["unet", "sdnet", "densenet"])
            .all(|(l, arch)| {
                let fields: Vec<&str> = l.split(',').collect();
                fields.len() == 5 && fields[0] == arch && fields[1..].iter().all(|f| is_cell(f))
            });
    let pvalues_ok = grid.comparisons.len() == 9
        && grid.comparisons.iter().all(|c| {
            c.variant != SeVariant::None
                && c.result
                    .as_ref()
                    .is_ok_and(|r| r.p_value > 0.0 && r.p_value <= 1.0)
        });
    let fixture = metrics::format_cell(0.842, 0.058);
    verdict(
        header_ok && rows_ok && pvalues_ok && fixture == "0.842±0.058",
        format!(
            "{} grid rows, {} p-values against No SE, fixture {fixture}",
            lines.len().saturating_sub(1),
            grid.comparisons.iter().filter(|c| c.result.is_ok()).count()
        ),
    )
}

fn special_bits(rng: &mut impl Rng) -> f64 {
    match rng.random_range(0..6) {
        0 => f64::NAN,
        1 => -0.0,
        2 => f64::NEG_INFINITY,
        3 => f64::MIN_POSITIVE / 3.0,
        _ => f64::from_bits(rng.random()),
    }
}

fn round_trips(cfg: &RunConfig, grid: &Grid) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let dir = tempfile::tempdir().unwrap();
    let mut entries = Vec::new();
    for rank in 0..=4 {
        let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..5)).collect();
        let len = shape.iter().product();
        let t = Tensor::new(
            shape.clone(),
            (0..len).map(|_| special_bits(&mut rng)).collect(),
        )
        .unwrap();
        let l = LabelMap::new(shape, (0..len).map(|_| rng.random()).collect()).unwrap();
        entries.push(TensorEntry::new(
            format!("f64_rank{rank}"),
            EntryData::F64(t),
        ));
        entries.push(TensorEntry::new(
            format!("u32_rank{rank}"),
            EntryData::U32(l),
        ));
    }
    let path = dir.path().join("mixed.setf");
    tensorfile::write_tensor_file(&path, &entries).unwrap();
    let back = tensorfile::read_tensor_file(&path).unwrap();
    let file_ok = back.len() == entries.len()
        && back
            .iter()
            .zip(&entries)
            .all(|(a, b)| a.name == b.name && a.data.bit_eq(&b.data));

    let data = dataset::obtain(cfg).unwrap();
    let test = data.split(Split::Test);
    let gts: Vec<LabelMap> = test.iter().map(|s| s.label.clone()).collect();
    let mut reproduced = 0;
    for c in &grid.cells {
        let Ok(summary) = &c.outcome else { continue };
        let spec = ArchSpec {
            kind: c.arch,
            ..cfg.arch.with_variant(c.variant)
        };
        let mut net = zoo::build_network(&spec, c.seed.wrapping_add(1)).unwrap();
        let ckpt = ablate::cell_dir(&cfg.output.dir, c.arch, c.variant).join("checkpoint.setf");
        net.load(&ckpt).unwrap();
        let preds = train::predict_split(&net, test, cfg.train.batch_size).unwrap();
        let report = metrics::dice_report(
            &preds,
            &gts,
            spec.num_classes,
            cfg.output.exclude_background,
        )
        .unwrap();
        if report == summary.report {
            reproduced += 1;
        }
    }
    verdict(
        file_ok && reproduced == grid.cells.len() && reproduced > 0,
        format!(
            "{} entries over ranks 0-4 and both dtypes bitwise: {file_ok}; {reproduced}/{} checkpoints reproduce test Dice",
            entries.len(),
            grid.cells.len()
        ),
    )
}

fn main() -> ExitCode {
    let out = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.output.dir = out.path().to_path_buf();

    let mut results = vec![
        criterion(
            1,
            "complexity reproduction",
            Duration::from_secs(1),
            complexity,
        ),
        criterion(
            2,
            "equation fidelity",
            Duration::from_secs(5),
            equation_fidelity,
        ),
        criterion(
            3,
            "gradient suite",
            Duration::from_secs(600),
            gradient_suite,
        ),
        criterion(
            4,
            "oracle equivalences",
            Duration::from_secs(60),
            oracle_equivalences,
        ),
        criterion(
            5,
            "training recipe",
            Duration::from_secs(120),
            training_recipe,
        ),
    ];
    let mut grid = None;
    results.push(criterion(
        6,
        "desk-scale learning",
        Duration::from_secs(1800),
        || {
            let opts = Options {
                threads: 1,
                ..Options::default()
            };
            let g = ablate::run(&cfg, &opts).unwrap();
            let v = desk_learning(&g);
            grid = Some(g);
            v
        },
    ));
    let grid = grid.expect("criterion 6 ran");
    results.push(criterion(7, "report shape", Duration::from_secs(1), || {
        report_shape(&grid)
    }));
    results.push(criterion(
        8,
        "format round trips",
        Duration::from_secs(120),
        || round_trips(&cfg, &grid),
    ));

    let passed = results.iter().filter(|ok| **ok).count();
    println!("acceptance: {passed}/{} criteria pass", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
