//! Dice overlap and the Wilcoxon signed-rank test.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::{Error, LabelMap, Result};

/// Largest number of nonzero differences for which the exact null distribution is used.
pub const EXACT_MAX_N: usize = 12;

/// `2·|P ∩ G| / (|P| + |G|)` for class `class`; `1.0` when the class is absent from both.
pub fn dice_per_class(pred: &LabelMap, gt: &LabelMap, class: u32) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "dice: prediction {:?} and ground truth {:?} differ",
            pred.shape(),
            gt.shape()
        )));
    }
    let (mut both, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        let (in_p, in_g) = (a == class, b == class);
        p += usize::from(in_p);
        g += usize::from(in_g);
        both += usize::from(in_p && in_g);
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiceReport {
    pub num_classes: usize,
    pub exclude_background: bool,
    /// `samples × K`, Dice of every class in every sample.
    pub per_sample: Vec<Vec<f64>>,
    /// Mean over samples for every class (background included).
    pub per_class: Vec<f64>,
    /// Mean over samples of each sample's class-mean Dice.
    pub mean: f64,
    /// Population standard deviation of the per-sample class means.
    pub std: f64,
}

impl DiceReport {
    fn first_class(&self) -> usize {
        usize::from(self.exclude_background)
    }

    /// Class-mean Dice of every sample; the paired unit of significance tests.
    pub fn sample_means(&self) -> Vec<f64> {
        let from = self.first_class();
        self.per_sample
            .iter()
            .map(|row| row[from..].iter().sum::<f64>() / (row.len() - from) as f64)
            .collect()
    }

    /// The `mean±std` cell, three decimals.
    pub fn cell(&self) -> String {
        format_cell(self.mean, self.std)
    }

    /// Long-format table: one row per (class, sample).
    pub fn per_class_csv(&self) -> String {
        let mut out = String::from("class,sample,dice\n");
        for c in 0..self.num_classes {
            for (s, row) in self.per_sample.iter().enumerate() {
                out.push_str(&format!("{c},{s},{:.6}\n", row[c]));
            }
        }
        out
    }

    /// Wide table: rows are classes, columns are samples.
    pub fn class_by_sample_csv(&self) -> String {
        let mut out = String::from("class");
        for s in 0..self.per_sample.len() {
            out.push_str(&format!(",s{s}"));
        }
        out.push('\n');
        for c in 0..self.num_classes {
            out.push_str(&c.to_string());
            for row in &self.per_sample {
                out.push_str(&format!(",{:.6}", row[c]));
            }
            out.push('\n');
        }
        out
    }
}

/// Renders `0.842` and `0.058` as `0.842±0.058`.
pub fn format_cell(mean: f64, std: f64) -> String {
    format!("{mean:.3}±{std:.3}")
}

pub fn dice_report(
    preds: &[LabelMap],
    gts: &[LabelMap],
    num_classes: usize,
    exclude_background: bool,
) -> Result<DiceReport> {
    if preds.len() != gts.len() {
        return Err(Error::shape(format!(
            "dice_report: {} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Data("dice_report needs at least one sample".into()));
    }
    if exclude_background && num_classes < 2 {
        return Err(Error::config("excluding background leaves no classes"));
    }
    let per_sample = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| {
            (0..num_classes as u32)
                .map(|c| dice_per_class(p, g, c))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_sample.len() as f64;
    let per_class = (0..num_classes)
        .map(|c| per_sample.iter().map(|row| row[c]).sum::<f64>() / n)
        .collect();
    let mut report = DiceReport {
        num_classes,
        exclude_background,
        per_sample,
        per_class,
        mean: 0.0,
        std: 0.0,
    };
    let (mean, std) = mean_std(&report.sample_means());
    report.mean = mean;
    report.std = std;
    Ok(report)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WilcoxonMethod {
    Exact,
    NormalApprox,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SignificanceResult {
    /// `min(W+, W−)`.
    pub statistic: f64,
    /// Number of nonzero differences.
    pub n: usize,
    /// Two-sided.
    pub p_value: f64,
    pub method: WilcoxonMethod,
}

/// Paired two-sided Wilcoxon signed-rank test of `a` against `b`.
///
/// Zero differences are dropped and tied magnitudes share their average
/// rank. With at most [`EXACT_MAX_N`] nonzero differences the p-value is
/// exact over all `2^n` sign assignments; otherwise a normal approximation
/// with continuity and tie corrections is used.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<SignificanceResult> {
    let ranked = signed_ranks(a, b)?;
    let method = if ranked.len() <= EXACT_MAX_N {
        WilcoxonMethod::Exact
    } else {
        WilcoxonMethod::NormalApprox
    };
    Ok(test_ranks(&ranked, method))
}

/// Like [`wilcoxon_signed_rank`] with the p-value method forced.
pub fn wilcoxon_signed_rank_with(
    a: &[f64],
    b: &[f64],
    method: WilcoxonMethod,
) -> Result<SignificanceResult> {
    let ranked = signed_ranks(a, b)?;
    if method == WilcoxonMethod::Exact && ranked.len() > 24 {
        return Err(Error::config(format!(
            "exact Wilcoxon p-value requested for n = {}",
            ranked.len()
        )));
    }
    Ok(test_ranks(&ranked, method))
}

/// Ranks of |d| (average ranks on ties), each with the sign of its difference.
fn signed_ranks(a: &[f64], b: &[f64]) -> Result<Vec<(f64, bool)>> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "wilcoxon: samples of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::Data("wilcoxon: non-finite difference".into()));
    }
    if diffs.len() < 5 {
        return Err(Error::Underpowered(diffs.len()));
    }
    diffs.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    let mut ranked = Vec::with_capacity(diffs.len());
    let mut i = 0;
    while i < diffs.len() {
        let mut j = i;
        while j + 1 < diffs.len() && diffs[j + 1].abs() == diffs[i].abs() {
            j += 1;
        }
        let rank = (i + j + 2) as f64 / 2.0;
        for d in &diffs[i..=j] {
            ranked.push((rank, *d > 0.0));
        }
        i = j + 1;
    }
    Ok(ranked)
}

fn test_ranks(ranked: &[(f64, bool)], method: WilcoxonMethod) -> SignificanceResult {
    let n = ranked.len();
    let w_plus: f64 = ranked.iter().filter(|r| r.1).map(|r| r.0).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let statistic = w_plus.min(total - w_plus);
    let p_value = match method {
        WilcoxonMethod::Exact => exact_p(ranked, statistic),
        WilcoxonMethod::NormalApprox => normal_p(ranked, statistic),
    };
    SignificanceResult {
        statistic,
        n,
        p_value,
        method,
    }
}

/// `2 · P(W+ <= w)` under the null, from the exact distribution of the
/// positive-rank sum over all `2^n` equally likely sign patterns.
fn exact_p(ranked: &[(f64, bool)], w: f64) -> f64 {
    // average ranks are multiples of 1/2, so doubled ranks are integers
    let doubled: Vec<usize> = ranked
        .iter()
        .map(|r| (r.0 * 2.0).round() as usize)
        .collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0f64; max + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &d in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + d] += counts[s];
            }
        }
        reach += d;
    }
    let limit = (w * 2.0).round() as usize;
    let below: f64 = counts[..=limit.min(max)].iter().sum();
    let all = 2f64.powi(ranked.len() as i32);
    (2.0 * below / all).min(1.0)
}

fn normal_p(ranked: &[(f64, bool)], w: f64) -> f64 {
    let n = ranked.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < ranked.len() {
        let j = ranked[i..]
            .iter()
            .take_while(|r| r.0 == ranked[i].0)
            .count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * (1.0 - normal.cdf(z))).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(data: &[u32]) -> LabelMap {
        LabelMap::new(vec![data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn dice_fixtures() {
        let a = lm(&[1, 1, 0, 0, 2]);
        assert_eq!(dice_per_class(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dice_per_class(&a, &a, 2).unwrap(), 1.0);
        assert_eq!(
            dice_per_class(&lm(&[1, 1, 0, 0]), &lm(&[0, 0, 1, 1]), 1).unwrap(),
            0.0
        );
        assert_eq!(
            dice_per_class(&lm(&[1, 1, 0, 0]), &lm(&[0, 1, 1, 0]), 1).unwrap(),
            0.5
        );
        assert_eq!(dice_per_class(&lm(&[0, 0]), &lm(&[0, 0]), 3).unwrap(), 1.0);
        assert!(dice_per_class(&lm(&[0]), &lm(&[0, 0]), 0).is_err());
    }

    #[test]
    fn report_of_two_samples() {
        // sample 0: class-mean 0.8 (classes 1 and 2 at 1.0 and 0.6), sample 1: 0.6
        let gt0 = lm(&[1, 2, 2, 2, 2, 0]);
        let pr0 = lm(&[1, 2, 2, 2, 0, 0]); // class 2: 2·3/(3+4) = 6/7
        let r = dice_report(
            std::slice::from_ref(&pr0),
            std::slice::from_ref(&gt0),
            3,
            true,
        )
        .unwrap();
        assert!((r.mean - (1.0 + 6.0 / 7.0) / 2.0).abs() < 1e-15);

        let gt = lm(&[1, 1, 1, 1, 1]);
        let p08 = lm(&[1, 1, 1, 1, 0]); // 2·4/9
        let perfect = dice_report(
            std::slice::from_ref(&gt),
            std::slice::from_ref(&gt),
            2,
            true,
        )
        .unwrap();
        assert_eq!((perfect.mean, perfect.std), (1.0, 0.0));
        assert_eq!(perfect.cell(), "1.000±0.000");
        let r = dice_report(&[gt.clone(), p08], &[gt.clone(), gt], 2, true).unwrap();
        let second = 8.0 / 9.0;
        assert!((r.mean - (1.0 + second) / 2.0).abs() < 1e-15);
        assert!((r.std - (1.0 - second) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn cell_format() {
        assert_eq!(format_cell(0.842, 0.058), "0.842±0.058");
        assert_eq!(format_cell(0.7, 0.1), "0.700±0.100");
    }

    #[test]
    fn wilcoxon_all_positive_n5() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [0.0; 5];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.n, 5);
        assert_eq!(r.method, WilcoxonMethod::Exact);
        assert!((r.p_value - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn wilcoxon_rejects_underpowered() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut b = a;
        b[2] = 0.0;
        assert!(matches!(
            wilcoxon_signed_rank(&a, &b),
            Err(Error::Underpowered(1))
        ));
    }

    #[test]
    fn wilcoxon_antisymmetric_is_insignificant() {
        let d = [1.0, -1.0, 2.0, -2.0, 3.0, -3.0];
        let r = wilcoxon_signed_rank(&d, &[0.0; 6]).unwrap();
        assert_eq!(r.statistic, 10.5);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn large_samples_use_normal_approximation() {
        let a: Vec<f64> = (1..=25).map(|i| i as f64 * 0.1).collect();
        let b = vec![0.0; 25];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.method, WilcoxonMethod::NormalApprox);
        assert!(r.p_value < 1e-4);
    }
}
