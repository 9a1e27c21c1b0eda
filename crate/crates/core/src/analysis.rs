//! Classification metrics, calibration and the statistics behind the
//! consistency findings, assembled into a JSON report.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("{0}")]
    Input(String),
}

type Result<T> = std::result::Result<T, AnalysisError>;

fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(AnalysisError::Input(msg.into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Indexed by class: 0 real, 1 fake.
    pub precision: [f64; 2],
    pub recall: [f64; 2],
    pub f1: [f64; 2],
    /// Set when only one class occurs in the labels.
    pub degenerate: bool,
    pub warnings: Vec<String>,
}

pub fn classification_metrics(preds: &[u8], labels: &[u8]) -> Result<ClassMetrics> {
    if preds.is_empty() || preds.len() != labels.len() {
        return input(format!("{} predictions for {} labels", preds.len(), labels.len()));
    }
    let mut cm = [[0usize; 2]; 2]; // [label][pred]
    for (&p, &y) in preds.iter().zip(labels) {
        if p > 1 || y > 1 {
            return input("labels and predictions must be 0 or 1");
        }
        cm[y as usize][p as usize] += 1;
    }
    let n = preds.len() as f64;
    let mut warnings = Vec::new();
    let mut precision = [0.0; 2];
    let mut recall = [0.0; 2];
    let mut f1 = [0.0; 2];
    for c in 0..2 {
        let tp = cm[c][c] as f64;
        let pred_pos = (cm[0][c] + cm[1][c]) as f64;
        let actual = (cm[c][0] + cm[c][1]) as f64;
        precision[c] = if pred_pos > 0.0 {
            tp / pred_pos
        } else {
            warnings.push(format!("class {c}: no predictions, precision set to 0"));
            0.0
        };
        recall[c] = if actual > 0.0 {
            tp / actual
        } else {
            warnings.push(format!("class {c}: no samples, recall set to 0"));
            0.0
        };
        let s = precision[c] + recall[c];
        f1[c] = if s > 0.0 {
            2.0 * precision[c] * recall[c] / s
        } else {
            0.0
        };
    }
    let degenerate = labels.iter().all(|&y| y == labels[0]);
    if degenerate {
        warnings.push("single-class labels: macro-F1 is degenerate".into());
    }
    Ok(ClassMetrics {
        accuracy: (cm[0][0] + cm[1][1]) as f64 / n,
        macro_f1: (f1[0] + f1[1]) / 2.0,
        precision,
        recall,
        f1,
        degenerate,
        warnings,
    })
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mann-Whitney AUC of `scores` for the positive class (label 1).
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return input("scores and labels differ in length");
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return input("AUC needs both classes");
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

pub fn population_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p: f64,
}

/// Welch's unequal-variance t-test.
pub fn welch_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return input("Welch t-test needs at least two values per sample");
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (sample_variance(a) / na, sample_variance(b) / nb);
    let diff = mean(a) - mean(b);
    let se2 = va + vb;
    if se2 == 0.0 {
        return Ok(if diff == 0.0 {
            TTest {
                t: 0.0,
                df: na + nb - 2.0,
                p: 1.0,
            }
        } else {
            TTest {
                t: diff.signum() * f64::INFINITY,
                df: na + nb - 2.0,
                p: 0.0,
            }
        });
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| AnalysisError::Input(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest { t, df, p })
}

/// Pearson correlation; `None` when either input is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Coefficient of determination of the least-squares line of `y` on `x`.
pub fn r_squared(x: &[f64], y: &[f64]) -> Option<f64> {
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - (icpt + slope * a)).powi(2)).sum();
    Some(1.0 - sse / syy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub spearman: Option<f64>,
    pub pearson: Option<f64>,
    pub r2: Option<f64>,
}

impl Correlation {
    fn of(x: &[f64], y: &[f64]) -> Self {
        Self {
            spearman: spearman(x, y),
            pearson: pearson(x, y),
            r2: r_squared(x, y),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub raw: Correlation,
    /// Over per-decile means of `x` and `y`, deciles taken along `x`.
    pub decile_binned: Correlation,
}

/// Splits indices sorted by `x` into `k` contiguous groups whose sizes
/// differ by at most one.
fn equal_count_bins(x: &[f64], k: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    let n = x.len();
    (0..k).map(|b| idx[b * n / k..(b + 1) * n / k].to_vec()).collect()
}

pub fn correlation_analysis(x: &[f64], y: &[f64]) -> Result<CorrelationReport> {
    if x.len() != y.len() || x.len() < 3 {
        return input("correlation needs at least three paired values");
    }
    let k = 10.min(x.len());
    let bins = equal_count_bins(x, k);
    let bx: Vec<f64> = bins
        .iter()
        .map(|b| b.iter().map(|&i| x[i]).sum::<f64>() / b.len() as f64)
        .collect();
    let by: Vec<f64> = bins
        .iter()
        .map(|b| b.iter().map(|&i| y[i]).sum::<f64>() / b.len() as f64)
        .collect();
    Ok(CorrelationReport {
        raw: Correlation::of(x, y),
        decile_binned: Correlation::of(&bx, &by),
    })
}

/// Fake rate per equal-count bin of `x`, lowest `x` first.
pub fn quantile_fake_rates(x: &[f64], labels: &[u8], k: usize) -> Result<Vec<f64>> {
    if x.len() != labels.len() || k == 0 || x.len() < k {
        return input(format!("need at least {k} paired values"));
    }
    Ok(equal_count_bins(x, k)
        .iter()
        .map(|b| b.iter().filter(|&&i| labels[i] == 1).count() as f64 / b.len() as f64)
        .collect())
}

/// Number of adjacent increases in a sequence expected to be nonincreasing.
pub fn count_increases(rates: &[f64]) -> usize {
    rates.windows(2).filter(|w| w[1] > w[0]).count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleVariance {
    pub real: f64,
    pub fake: f64,
    /// One-sided bootstrap p for `fake > real`.
    pub p: f64,
}

pub const BOOTSTRAP_RESAMPLES: usize = 10_000;

/// Mean per-sample variance across views per class, with a seeded
/// bootstrap of the class difference. `views[i]` holds sample `i`'s scores
/// for the original text and every rewrite.
pub fn style_variance(views: &[Vec<f64>], labels: &[u8], resamples: usize, seed: u64) -> Result<StyleVariance> {
    if views.len() != labels.len() {
        return input("views and labels differ in length");
    }
    if views.iter().any(|v| v.len() < 2) {
        return input("style variance needs at least two views per sample");
    }
    let var: Vec<f64> = views.iter().map(|v| population_variance(v)).collect();
    let real: Vec<f64> = var
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == 0)
        .map(|(v, _)| *v)
        .collect();
    let fake: Vec<f64> = var
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == 1)
        .map(|(v, _)| *v)
        .collect();
    if real.is_empty() || fake.is_empty() {
        return input("style variance needs both classes");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut resample_mean =
        |xs: &[f64]| (0..xs.len()).map(|_| xs[rng.random_range(0..xs.len())]).sum::<f64>() / xs.len() as f64;
    let mut not_greater = 0usize;
    for _ in 0..resamples {
        let f = resample_mean(&fake);
        let r = resample_mean(&real);
        if f <= r {
            not_greater += 1;
        }
    }
    Ok(StyleVariance {
        real: mean(&real),
        fake: mean(&fake),
        p: (not_greater as f64 + 1.0) / (resamples as f64 + 1.0),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub midpoint: f64,
    pub mean_conf: f64,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub bins: Vec<CalibrationBin>,
    pub ece: f64,
}

/// Equal-width bins over `[0.5, 1]`; confidence 1 falls in the last bin.
pub fn calibration_bins(conf: &[f64], correct: &[bool], nbins: usize) -> Result<Calibration> {
    if conf.len() != correct.len() || conf.is_empty() || nbins == 0 {
        return input("calibration needs paired, nonempty inputs");
    }
    let width = 0.5 / nbins as f64;
    let mut count = vec![0usize; nbins];
    let mut hits = vec![0usize; nbins];
    let mut sum_conf = vec![0.0; nbins];
    for (&c, &ok) in conf.iter().zip(correct) {
        if !(0.5..=1.0).contains(&c) {
            return input(format!("confidence {c} outside [0.5, 1]"));
        }
        let b = (((c - 0.5) / width) as usize).min(nbins - 1);
        count[b] += 1;
        hits[b] += usize::from(ok);
        sum_conf[b] += c;
    }
    let n = conf.len() as f64;
    let mut ece = 0.0;
    let bins = (0..nbins)
        .map(|b| {
            let lo = 0.5 + b as f64 * width;
            let (acc, mc) = if count[b] > 0 {
                (hits[b] as f64 / count[b] as f64, sum_conf[b] / count[b] as f64)
            } else {
                (0.0, 0.0)
            };
            ece += count[b] as f64 / n * (acc - mc).abs();
            CalibrationBin {
                lo,
                hi: lo + width,
                midpoint: lo + width / 2.0,
                mean_conf: mc,
                accuracy: acc,
                count: count[b],
            }
        })
        .collect();
    Ok(Calibration { bins, ece })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub real_mean: f64,
    pub real_std: f64,
    pub fake_mean: f64,
    pub fake_std: f64,
    pub welch: TTest,
}

/// Per-class mean/std of `x` and a Welch test of real vs fake.
pub fn class_stats(x: &[f64], labels: &[u8]) -> Result<ClassStats> {
    let real: Vec<f64> = x.iter().zip(labels).filter(|(_, &y)| y == 0).map(|(v, _)| *v).collect();
    let fake: Vec<f64> = x.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(v, _)| *v).collect();
    let welch = welch_ttest(&real, &fake)?;
    Ok(ClassStats {
        real_mean: mean(&real),
        real_std: sample_variance(&real).sqrt(),
        fake_mean: mean(&fake),
        fake_std: sample_variance(&fake).sqrt(),
        welch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        let m = classification_metrics(&[1, 1, 0, 0], &[1, 1, 0, 0]).unwrap();
        assert_eq!((m.accuracy, m.macro_f1), (1.0, 1.0));
        // TP=3 FP=1 FN=1 TN=5
        let preds = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0];
        let labels = [1, 1, 1, 0, 1, 0, 0, 0, 0, 0];
        let m = classification_metrics(&preds, &labels).unwrap();
        assert_eq!((m.precision[1], m.recall[1], m.f1[1]), (0.75, 0.75, 0.75));
        let m = classification_metrics(&[0, 0], &[0, 0]).unwrap();
        assert!(m.degenerate);
        assert_eq!(m.precision[1], 0.0);
        assert!(!m.warnings.is_empty());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 4], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert!(auc(&[0.5; 2], &[1, 1]).is_err());
    }

    #[test]
    fn welch_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let t = welch_ttest(&a, &a).unwrap();
        assert_eq!((t.t, t.p), (0.0, 1.0));
        let b = [2.0, 4.5, 3.5, 6.0, 5.0];
        let ab = welch_ttest(&a, &b).unwrap();
        let ba = welch_ttest(&b, &a).unwrap();
        assert_eq!(ab.t, -ba.t);
        assert!((ab.p - ba.p).abs() < 1e-15);
        let c = welch_ttest(&[2.0, 2.0], &[2.0, 2.0]).unwrap();
        assert_eq!(c.p, 1.0);
    }

    #[test]
    fn correlation_examples() {
        let x: Vec<f64> = (0..20).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 - 2.0 * v).collect();
        let r = correlation_analysis(&x, &y).unwrap();
        assert!((r.raw.spearman.unwrap() + 1.0).abs() < 1e-12);
        assert!((r.raw.pearson.unwrap() + 1.0).abs() < 1e-12);
        assert!((r.raw.r2.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn quantile_and_calibration_examples() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let labels = [1, 1, 1, 1, 1, 0, 0, 0, 0, 0];
        let rates = quantile_fake_rates(&x, &labels, 5).unwrap();
        assert_eq!(rates, vec![1.0, 1.0, 0.5, 0.0, 0.0]);
        assert_eq!(count_increases(&rates), 0);

        let cal = calibration_bins(&[0.5; 4], &[true, false, true, false], 10).unwrap();
        assert_eq!(cal.bins.iter().filter(|b| b.count > 0).count(), 1);
        assert!(cal.ece.abs() < 1e-12);
        assert_eq!(cal.bins.iter().map(|b| b.count).sum::<usize>(), 4);
        assert_eq!(calibration_bins(&[1.0], &[true], 10).unwrap().bins[9].count, 1);
    }

    #[test]
    fn style_variance_identical_views() {
        let views = vec![vec![0.3; 4]; 6];
        let labels = [0, 1, 0, 1, 0, 1];
        let s = style_variance(&views, &labels, 1000, 1).unwrap();
        assert_eq!((s.real, s.fake), (0.0, 0.0));
        assert!(s.p > 0.05);
    }
}
