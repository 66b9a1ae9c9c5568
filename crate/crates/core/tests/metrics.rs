use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scse_core::metrics::{
    self, dice_per_class, dice_report, format_cell, wilcoxon_signed_rank,
    wilcoxon_signed_rank_with, WilcoxonMethod,
};
use scse_core::{Error, LabelMap};

/// Average ranks of `|d|` over the nonzero differences, with signs.
fn oracle_ranks(a: &[f64], b: &[f64]) -> Vec<(f64, bool)> {
    let d: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    d.iter()
        .map(|&x| {
            let below = d.iter().filter(|y| y.abs() < x.abs()).count() as f64;
            let tied = d.iter().filter(|y| y.abs() == x.abs()).count() as f64;
            (below + (tied + 1.0) / 2.0, x > 0.0)
        })
        .collect()
}

/// Two-sided p-value by visiting all `2^n` sign assignments.
fn enumerate_p(a: &[f64], b: &[f64]) -> (f64, f64) {
    let r = oracle_ranks(a, b);
    let n = r.len();
    let total: f64 = r.iter().map(|(x, _)| x).sum();
    let plus: f64 = r.iter().filter(|(_, s)| *s).map(|(x, _)| x).sum();
    let w = plus.min(total - plus);
    let mut hits = 0u64;
    for mask in 0u64..1 << n {
        let t: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| r[i].0).sum();
        if t <= w + 1e-9 {
            hits += 1;
        }
    }
    (w, (2.0 * hits as f64 / (1u64 << n) as f64).min(1.0))
}

fn fixture(n: usize, ties: bool, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    let b: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let shift = rng.random_range(-0.3..0.3);
    let a = b
        .iter()
        .map(|x| {
            let d: f64 = rng.random_range(-1.0..1.0) + shift;
            // rounding creates tied magnitudes (and the odd zero difference)
            x + if ties { (d * 4.0).round() / 4.0 } else { d }
        })
        .collect();
    (a, b)
}

#[test]
fn exact_p_equals_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut checked = 0;
    for n in 5..=12 {
        for case in 0..12 {
            let (a, b) = fixture(n, case % 2 == 1, &mut rng);
            let nonzero = oracle_ranks(&a, &b).len();
            if nonzero < 5 {
                assert!(matches!(
                    wilcoxon_signed_rank(&a, &b),
                    Err(Error::Underpowered(_))
                ));
                continue;
            }
            if nonzero > 12 {
                continue;
            }
            let r = wilcoxon_signed_rank(&a, &b).unwrap();
            let (w, p) = enumerate_p(&a, &b);
            assert_eq!(r.method, WilcoxonMethod::Exact);
            assert_eq!(r.n, nonzero);
            assert_eq!(r.statistic, w);
            assert!(
                (r.p_value - p).abs() <= 1e-14,
                "n={n} case {case}: {} vs {p}",
                r.p_value
            );
            checked += 1;
        }
    }
    assert!(checked >= 60, "{checked}");
}

/// Paired samples at n = 12 whose differences are ±1..±12 with the positive
/// ranks summing to `w`.
fn twelve_with_statistic(w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut left = w;
    let diffs: Vec<f64> = (1..=12)
        .rev()
        .map(|r| {
            if r <= left {
                left -= r;
                r as f64
            } else {
                -(r as f64)
            }
        })
        .collect();
    (diffs, vec![0.0; 12])
}

#[test]
fn normal_approximation_close_at_twelve() {
    for w in 0..=39 {
        let (a, b) = twelve_with_statistic(w);
        let exact = wilcoxon_signed_rank_with(&a, &b, WilcoxonMethod::Exact).unwrap();
        let approx = wilcoxon_signed_rank_with(&a, &b, WilcoxonMethod::NormalApprox).unwrap();
        assert_eq!(exact.statistic, w as f64);
        assert_eq!(approx.statistic, w as f64);
        let gap = (exact.p_value - approx.p_value).abs();
        // the continuity-corrected curve drifts up to ~0.014 in the flat middle
        let bound = if exact.p_value <= 0.2 { 0.01 } else { 0.015 };
        assert!(
            gap <= bound,
            "W={w}: {} vs {}",
            exact.p_value,
            approx.p_value
        );
    }
}

#[test]
fn shifted_samples_are_significant() {
    let b: Vec<f64> = (0..25).map(|i| (i as f64 * 0.37).sin()).collect();
    let a: Vec<f64> = b
        .iter()
        .enumerate()
        .map(|(i, x)| x + 0.5 + 0.01 * i as f64)
        .collect();
    let r = wilcoxon_signed_rank(&a, &b).unwrap();
    assert_eq!(r.method, WilcoxonMethod::NormalApprox);
    assert!(r.p_value < 1e-3);
    assert_eq!(r.statistic, 0.0);
}

fn labels(len: usize, k: u32, rng: &mut impl Rng) -> LabelMap {
    LabelMap::new(
        vec![len],
        (0..len).map(|_| rng.random_range(0..k)).collect(),
    )
    .unwrap()
}

proptest! {
    #[test]
    fn dice_is_symmetric(len in 1usize..40, k in 2u32..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, g) = (labels(len, k, &mut rng), labels(len, k, &mut rng));
        for c in 0..k {
            prop_assert_eq!(dice_per_class(&p, &g, c).unwrap(), dice_per_class(&g, &p, c).unwrap());
        }
    }

    #[test]
    fn dice_ignores_consistent_relabeling(len in 1usize..40, k in 2u32..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, g) = (labels(len, k, &mut rng), labels(len, k, &mut rng));
        let mut perm: Vec<u32> = (0..k).collect();
        perm.shuffle(&mut rng);
        let relabel = |m: &LabelMap| {
            LabelMap::new(m.shape().to_vec(), m.data().iter().map(|&l| perm[l as usize]).collect()).unwrap()
        };
        let (pp, gp) = (relabel(&p), relabel(&g));
        for c in 0..k {
            prop_assert_eq!(
                dice_per_class(&p, &g, c).unwrap(),
                dice_per_class(&pp, &gp, perm[c as usize]).unwrap()
            );
        }
    }

    #[test]
    fn self_report_is_perfect(n in 1usize..6, len in 1usize..30, seed in any::<u64>(), excl in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let maps: Vec<LabelMap> = (0..n).map(|_| labels(len, 4, &mut rng)).collect();
        let r = dice_report(&maps, &maps, 4, excl).unwrap();
        prop_assert_eq!(r.mean, 1.0);
        prop_assert_eq!(r.std, 0.0);
        prop_assert_eq!(r.cell(), "1.000±0.000");
    }
}

#[test]
fn hand_counted_fixtures() {
    let m = |v: &[u32]| LabelMap::new(vec![2, 3], v.to_vec()).unwrap();
    let p = m(&[1, 1, 0, 0, 2, 0]);
    let g = m(&[1, 0, 1, 0, 0, 0]);
    assert_eq!(dice_per_class(&p, &g, 1).unwrap(), 0.5);
    assert_eq!(dice_per_class(&p, &g, 2).unwrap(), 0.0);
    assert_eq!(dice_per_class(&p, &g, 3).unwrap(), 1.0);
    assert_eq!(dice_per_class(&p, &p, 2).unwrap(), 1.0);
    // background: P = {2,3,5}, G = {1,3,4,5}, overlap {3,5}
    assert_eq!(dice_per_class(&p, &g, 0).unwrap(), 4.0 / 7.0);
    assert!(dice_per_class(&p, &LabelMap::new(vec![6], vec![0; 6]).unwrap(), 0).is_err());
}

#[test]
fn report_csv_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let preds: Vec<LabelMap> = (0..7).map(|_| labels(16, 4, &mut rng)).collect();
    let gts: Vec<LabelMap> = (0..7).map(|_| labels(16, 4, &mut rng)).collect();
    let r = dice_report(&preds, &gts, 4, true).unwrap();
    assert_eq!(r.per_class_csv().lines().count(), 1 + 4 * 7);
    assert_eq!(r.sample_means().len(), 7);
    let (mean, std) = metrics::mean_std(&r.sample_means());
    assert_eq!((mean, std), (r.mean, r.std));
    assert_eq!(format_cell(0.842, 0.058), "0.842±0.058");
}
