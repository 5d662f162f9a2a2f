//! Agreement statistics, confidence intervals and hypothesis tests.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{mean, sample_variance, Rate, Scalar};
use crate::util::seeded_rng;

pub const DEFAULT_BOOTSTRAP_ITERATIONS: usize = 10_000;
pub const DEFAULT_LEVEL: f64 = 0.95;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no pairs to score")]
    Empty,
    #[error("inputs differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("differences have zero variance; the t statistic is undefined")]
    Degenerate,
    #[error("label {0:?} is not in the option set")]
    UnknownLabel(String),
    #[error("no unit has two or more labels to pair")]
    NoPairableValues,
    #[error("need at least {needed} runs, got {got}")]
    TooFewRuns { needed: usize, got: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelPair {
    pub narrative_id: String,
    pub predicted: String,
    pub reference: String,
}

impl LabelPair {
    pub fn new(id: impl Into<String>, predicted: impl Into<String>, reference: impl Into<String>) -> Self {
        Self {
            narrative_id: id.into(),
            predicted: predicted.into(),
            reference: reference.into(),
        }
    }

    pub fn matches(&self) -> bool {
        self.predicted == self.reference
    }
}

/// Fraction of pairs whose labels match, kept exact.
pub fn agreement(pairs: &[LabelPair]) -> Result<Rate, MetricsError> {
    let hits = pairs.iter().filter(|p| p.matches()).count() as u64;
    Rate::new(hits, pairs.len() as u64).ok_or(MetricsError::Empty)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub positive_label: String,
}

/// Rates with a zero denominator are `None` rather than 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionRates {
    pub tpr: Option<Rate>,
    pub fpr: Option<Rate>,
    pub fnr: Option<Rate>,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> Option<Rate> {
        Rate::new(self.tp + self.tn, self.total())
    }

    pub fn rates(&self) -> ConfusionRates {
        let tpr = Rate::new(self.tp, self.tp + self.fn_);
        ConfusionRates {
            tpr,
            fpr: Rate::new(self.fp, self.fp + self.tn),
            fnr: tpr.map(|r| r.complement()),
        }
    }
}

/// Binary confusion counts against `positive_label`; every label must be in
/// `options`.
pub fn confusion(pairs: &[LabelPair], positive_label: &str, options: &[String]) -> Result<ConfusionCounts, MetricsError> {
    if !options.iter().any(|o| o == positive_label) {
        return Err(MetricsError::UnknownLabel(positive_label.to_string()));
    }
    let mut c = ConfusionCounts {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
        positive_label: positive_label.to_string(),
    };
    for p in pairs {
        for label in [&p.predicted, &p.reference] {
            if !options.contains(label) {
                return Err(MetricsError::UnknownLabel(label.clone()));
            }
        }
        match (p.predicted == positive_label, p.reference == positive_label) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassF1<F> {
    pub class: String,
    pub precision: F,
    pub recall: F,
    pub f1: F,
    pub support: usize,
}

fn ratio<F: Scalar>(num: usize, den: usize) -> F {
    if den == 0 {
        F::zero()
    } else {
        F::from_count(num) / F::from_count(den)
    }
}

/// Unweighted mean of per-class F1 over `classes`.
pub fn macro_f1<F: Scalar>(pairs: &[LabelPair], classes: &[String]) -> Result<(F, Vec<ClassF1<F>>), MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    if classes.is_empty() {
        return Err(MetricsError::InvalidParameter("no classes".into()));
    }
    let per_class: Vec<ClassF1<F>> = classes
        .iter()
        .map(|c| {
            let tp = pairs.iter().filter(|p| &p.predicted == c && &p.reference == c).count();
            let predicted = pairs.iter().filter(|p| &p.predicted == c).count();
            let actual = pairs.iter().filter(|p| &p.reference == c).count();
            let precision: F = ratio(tp, predicted);
            let recall: F = ratio(tp, actual);
            let f1 = if precision + recall == F::zero() {
                F::zero()
            } else {
                F::from_f64_lossy(2.0) * precision * recall / (precision + recall)
            };
            ClassF1 {
                class: c.clone(),
                precision,
                recall,
                f1,
                support: actual,
            }
        })
        .collect();
    let mean_f1 = per_class.iter().map(|c| c.f1).sum::<F>() / F::from_count(per_class.len());
    Ok((mean_f1, per_class))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport<F> {
    pub point: F,
    pub ci_low: F,
    pub ci_high: F,
    pub n: usize,
    pub bootstrap_iterations: usize,
    pub level: F,
    pub seed: u64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile<F: Scalar>(sorted: &[F], q: F) -> F {
    let h = q * F::from_count(sorted.len() - 1);
    let lo = h.floor();
    let i = lo.to_usize().unwrap_or(0).min(sorted.len() - 1);
    let j = (i + 1).min(sorted.len() - 1);
    sorted[i] + (h - lo) * (sorted[j] - sorted[i])
}

fn resample_mean<F: Scalar, R: Rng>(values: &[F], rng: &mut R) -> F {
    let n = values.len();
    let total: F = (0..n).map(|_| values[rng.random_range(0..n)]).sum();
    total / F::from_count(n)
}

/// Percentile bootstrap interval for the mean of `indicators`.
pub fn bootstrap_ci<F: Scalar>(
    indicators: &[bool],
    iterations: usize,
    level: F,
    seed: u64,
) -> Result<AgreementReport<F>, MetricsError> {
    if indicators.is_empty() {
        return Err(MetricsError::Empty);
    }
    if iterations == 0 || !(level > F::zero() && level < F::one()) {
        return Err(MetricsError::InvalidParameter(format!(
            "iterations {iterations}, level {level}"
        )));
    }
    let values: Vec<F> = indicators.iter().map(|&b| if b { F::one() } else { F::zero() }).collect();
    let point = mean(&values);
    let mut rng = seeded_rng(seed, 0xb007);
    let mut means: Vec<F> = (0..iterations).map(|_| resample_mean(&values, &mut rng)).collect();
    means.sort_by(|a, b| a.partial_cmp(b).expect("finite means"));
    let tail = (F::one() - level) / F::from_f64_lossy(2.0);
    Ok(AgreementReport {
        point,
        ci_low: quantile(&means, tail),
        ci_high: quantile(&means, F::one() - tail),
        n: indicators.len(),
        bootstrap_iterations: iterations,
        level,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest<F> {
    pub t: F,
    pub df: usize,
    pub p_two_sided: F,
}

/// Paired t-test on `a - b` with n-1 degrees of freedom.
pub fn paired_t_test<F: Scalar>(a: &[F], b: &[F]) -> Result<TTest<F>, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(MetricsError::InvalidParameter("need at least 2 paired units".into()));
    }
    let diffs: Vec<F> = a.iter().zip(b).map(|(x, y)| *x - *y).collect();
    let var = sample_variance(&diffs);
    if var <= F::zero() {
        return Err(MetricsError::Degenerate);
    }
    let n = F::from_count(diffs.len());
    let t = mean(&diffs) / (var.sqrt() / n.sqrt());
    let df = diffs.len() - 1;
    Ok(TTest {
        t,
        df,
        p_two_sided: t_two_sided_p(t, F::from_count(df)),
    })
}

/// Per-comparison significance threshold `base / k`.
pub fn bonferroni_alpha<F: Scalar>(base: F, k: usize) -> F {
    base / F::from_count(k.max(1))
}

const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// ln Γ(x) for x > 0 (Lanczos, g = 7).
pub fn ln_gamma<F: Scalar>(x: F) -> F {
    let half = F::from_f64_lossy(0.5);
    if x < half {
        // reflection
        let pi = F::from_f64_lossy(std::f64::consts::PI);
        return (pi / (pi * x).sin()).ln() - ln_gamma(F::one() - x);
    }
    let x = x - F::one();
    let mut acc = F::from_f64_lossy(LANCZOS[0]);
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc = acc + F::from_f64_lossy(*c) / (x + F::from_count(i));
    }
    let t = x + F::from_f64_lossy(7.5);
    let two_pi = F::from_f64_lossy(2.0 * std::f64::consts::PI);
    half * two_pi.ln() + (x + half) * t.ln() - t + acc.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf<F: Scalar>(a: F, b: F, x: F) -> F {
    let one = F::one();
    let two = F::from_f64_lossy(2.0);
    let tiny = F::min_positive_value() / F::epsilon();
    let eps = F::epsilon();
    let qab = a + b;
    let qap = a + one;
    let qam = a - one;
    let mut c = one;
    let mut d = one - qab * x / qap;
    if d.abs() < tiny {
        d = tiny;
    }
    d = one / d;
    let mut h = d;
    for m in 1..100_000usize {
        let m = F::from_count(m);
        let m2 = two * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = one + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = one + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = one / d;
        h = h * d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = one + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = one + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = one / d;
        let del = d * c;
        h = h * del;
        if (del - one).abs() <= eps {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b).
pub fn incomplete_beta<F: Scalar>(a: F, b: F, x: F) -> F {
    let one = F::one();
    if x <= F::zero() {
        return F::zero();
    }
    if x >= one {
        return one;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (one - x).ln();
    let front = ln_front.exp();
    if x < (a + one) / (a + b + F::from_f64_lossy(2.0)) {
        front * beta_cf(a, b, x) / a
    } else {
        one - front * beta_cf(b, a, one - x) / b
    }
}

/// Two-sided p-value of a Student t statistic.
pub fn t_two_sided_p<F: Scalar>(t: F, df: F) -> F {
    if t.is_nan() {
        return F::nan();
    }
    let x = df / (df + t * t);
    incomplete_beta(df / F::from_f64_lossy(2.0), F::from_f64_lossy(0.5), x)
}

/// Student t cumulative distribution function.
pub fn t_cdf<F: Scalar>(t: F, df: F) -> F {
    let tail = t_two_sided_p(t, df) / F::from_f64_lossy(2.0);
    if t >= F::zero() {
        F::one() - tail
    } else {
        tail
    }
}

fn as_unit(xs: &[bool]) -> Vec<f64> {
    xs.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

/// Two-sided bootstrap test that two 0/1 samples share a mean.
///
/// Both samples are shifted to the pooled mean before resampling; the
/// p-value is `(count + 1) / (iterations + 1)` where `count` is the number of
/// resampled differences at least as extreme as the observed one.
pub fn bootstrap_mean_equality_test(a: &[bool], b: &[bool], iterations: usize, seed: u64) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::Empty);
    }
    if iterations == 0 {
        return Err(MetricsError::InvalidParameter("iterations must be positive".into()));
    }
    let (xa, xb) = (as_unit(a), as_unit(b));
    let (ma, mb) = (mean(&xa), mean(&xb));
    let pooled = (xa.iter().sum::<f64>() + xb.iter().sum::<f64>()) / (xa.len() + xb.len()) as f64;
    let observed = (ma - mb).abs();
    let ca: Vec<f64> = xa.iter().map(|x| x - ma + pooled).collect();
    let cb: Vec<f64> = xb.iter().map(|x| x - mb + pooled).collect();
    let mut rng = seeded_rng(seed, 0xe9a1);
    // tolerance so that a resampled difference equal to the observed one counts
    let slack = 1e-12;
    let count = (0..iterations)
        .filter(|_| {
            let d = resample_mean(&ca, &mut rng) - resample_mean(&cb, &mut rng);
            d.abs() + slack >= observed
        })
        .count();
    Ok((count + 1) as f64 / (iterations + 1) as f64)
}

/// Nominal Krippendorff's alpha. `units[u][a]` is annotator `a`'s label for
/// unit `u`, `None` when missing.
///
/// When every pairable value falls in one category there is no expected
/// disagreement; that case is reported as perfect agreement, 1.0.
pub fn krippendorff_alpha<F: Scalar>(units: &[Vec<Option<String>>]) -> Result<F, MetricsError> {
    let mut categories = BTreeSet::new();
    for u in units {
        for v in u.iter().flatten() {
            categories.insert(v.as_str());
        }
    }
    let index: BTreeMap<&str, usize> = categories.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let q = index.len();
    let mut o = vec![vec![F::zero(); q]; q];
    for u in units {
        let values: Vec<usize> = u.iter().flatten().map(|v| index[v.as_str()]).collect();
        let m = values.len();
        if m < 2 {
            continue;
        }
        let w = F::one() / F::from_count(m - 1);
        for (i, &c) in values.iter().enumerate() {
            for (j, &k) in values.iter().enumerate() {
                if i != j {
                    o[c][k] = o[c][k] + w;
                }
            }
        }
    }
    let n_c: Vec<F> = o.iter().map(|row| row.iter().copied().sum()).collect();
    let n: F = n_c.iter().copied().sum();
    if n == F::zero() {
        return Err(MetricsError::NoPairableValues);
    }
    let mut observed = F::zero();
    let mut expected = F::zero();
    for c in 0..q {
        for k in 0..q {
            if c != k {
                observed = observed + o[c][k];
                expected = expected + n_c[c] * n_c[k];
            }
        }
    }
    if expected == F::zero() {
        return Ok(F::one());
    }
    Ok(F::one() - (n - F::one()) * observed / expected)
}

/// Fraction of positions on which every run gives the same label.
pub fn self_consistency(runs: &[Vec<String>]) -> Result<Rate, MetricsError> {
    if runs.len() < 2 {
        return Err(MetricsError::TooFewRuns { needed: 2, got: runs.len() });
    }
    let len = runs[0].len();
    if let Some(r) = runs.iter().find(|r| r.len() != len) {
        return Err(MetricsError::LengthMismatch(len, r.len()));
    }
    let same = (0..len).filter(|&i| runs.iter().all(|r| r[i] == runs[0][i])).count();
    Rate::new(same as u64, len as u64).ok_or(MetricsError::Empty)
}

/// Seeded samples of disagreeing and agreeing ids for expert review.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewQueues {
    pub disagreements: Vec<String>,
    pub agreements: Vec<String>,
    /// How many ids each request fell short by.
    pub disagreement_shortfall: usize,
    pub agreement_shortfall: usize,
}

fn sample_ids(mut ids: Vec<String>, limit: usize, seed: u64, stream: u64) -> (Vec<String>, usize) {
    ids.sort();
    ids.dedup();
    let mut rng = seeded_rng(seed, stream);
    ids.shuffle(&mut rng);
    let shortfall = limit.saturating_sub(ids.len());
    ids.truncate(limit);
    (ids, shortfall)
}

pub fn disagreement_queue(pairs: &[LabelPair], disagreements: usize, agreements: usize, seed: u64) -> ReviewQueues {
    let (diff, same): (Vec<&LabelPair>, Vec<&LabelPair>) = pairs.iter().partition(|p| !p.matches());
    let ids = |xs: Vec<&LabelPair>| xs.into_iter().map(|p| p.narrative_id.clone()).collect::<Vec<_>>();
    let (d, ds) = sample_ids(ids(diff), disagreements, seed, 0xd15a);
    let (a, as_) = sample_ids(ids(same), agreements, seed, 0xa9ee);
    ReviewQueues {
        disagreements: d,
        agreements: a,
        disagreement_shortfall: ds,
        agreement_shortfall: as_,
    }
}

/// One line of the per-variable report export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub variable: String,
    pub agreement: f64,
    pub ci: [f64; 2],
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    pub n: usize,
    pub seed: u64,
    pub bootstrap_iterations: usize,
    pub level: f64,
}

pub fn report_record(
    variable: &str,
    pairs: &[LabelPair],
    positive_label: Option<&str>,
    options: &[String],
    iterations: usize,
    level: f64,
    seed: u64,
) -> Result<ReportRecord, MetricsError> {
    let agree = agreement(pairs)?;
    let indicators: Vec<bool> = pairs.iter().map(LabelPair::matches).collect();
    let ci = bootstrap_ci::<f64>(&indicators, iterations, level, seed)?;
    let rates = match positive_label {
        Some(pos) => Some(confusion(pairs, pos, options)?.rates()),
        None => None,
    };
    let pick = |f: fn(&ConfusionRates) -> Option<Rate>| rates.as_ref().and_then(f).map(|r| r.as_f64());
    Ok(ReportRecord {
        variable: variable.to_string(),
        agreement: agree.as_f64(),
        ci: [ci.ci_low, ci.ci_high],
        tpr: pick(|r| r.tpr),
        fpr: pick(|r| r.fpr),
        fnr: pick(|r| r.fnr),
        n: pairs.len(),
        seed,
        bootstrap_iterations: iterations,
        level,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use statrs::distribution::{ContinuousCDF, StudentsT};

    fn opts() -> Vec<String> {
        vec!["0.0".into(), "1.0".into()]
    }

    fn pairs_from(counts: [(usize, &str, &str); 4]) -> Vec<LabelPair> {
        let mut out = Vec::new();
        for (n, p, r) in counts {
            for _ in 0..n {
                out.push(LabelPair::new(format!("n{}", out.len()), p, r));
            }
        }
        out
    }

    #[test]
    fn agreement_examples() {
        let all = pairs_from([(3, "1.0", "1.0"), (0, "", ""), (0, "", ""), (0, "", "")]);
        assert_eq!(agreement(&all).unwrap(), Rate::new(1, 1).unwrap());
        let three_of_four = pairs_from([(3, "1.0", "1.0"), (1, "0.0", "1.0"), (0, "", ""), (0, "", "")]);
        assert_eq!(agreement(&three_of_four).unwrap().as_f64(), 0.75);
        assert_eq!(agreement(&[]), Err(MetricsError::Empty));
    }

    #[test]
    fn confusion_zero_denominator_is_null() {
        let p = pairs_from([(3, "0.0", "0.0"), (1, "1.0", "0.0"), (0, "", ""), (0, "", "")]);
        let r = confusion(&p, "1.0", &opts()).unwrap().rates();
        assert_eq!(r.tpr, None);
        assert_eq!(r.fnr, None);
        assert_eq!(r.fpr, Rate::new(1, 4));
        assert!(matches!(confusion(&p, "2.0", &opts()), Err(MetricsError::UnknownLabel(_))));
    }

    #[test]
    fn macro_f1_single_predicted_class() {
        let classes: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let pairs: Vec<LabelPair> = (0..9).map(|i| LabelPair::new(format!("{i}"), "a", &classes[i / 3])).collect();
        let (m, per): (f64, _) = macro_f1(&pairs, &classes).unwrap();
        // class a: precision 3/9, recall 1 -> f1 = 2*(1/3)/(4/3) = 0.5
        assert!((per[0].f1 - 0.5).abs() < 1e-12);
        assert_eq!(per[1].f1, 0.0);
        assert!((m - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_degenerate_and_deterministic() {
        let r = bootstrap_ci::<f64>(&[true; 20], 500, 0.95, 3).unwrap();
        assert_eq!((r.ci_low, r.ci_high), (1.0, 1.0));
        let xs: Vec<bool> = (0..50).map(|i| i % 3 != 0).collect();
        assert_eq!(bootstrap_ci::<f64>(&xs, 800, 0.95, 9).unwrap(), bootstrap_ci::<f64>(&xs, 800, 0.95, 9).unwrap());
    }

    #[test]
    fn t_cdf_matches_statrs() {
        for &df in &[1.0, 2.0, 3.0, 7.5, 30.0, 1_000.0, 1_000_000.0] {
            let oracle = StudentsT::new(0.0, 1.0, df).unwrap();
            for &t in &[-6.0, -2.5, -0.3, 0.0, 0.4, 1.0, 2.1, 5.0, 12.0] {
                let got: f64 = t_cdf(t, df);
                assert!((got - oracle.cdf(t)).abs() < 1e-9, "df {df} t {t}: {got} vs {}", oracle.cdf(t));
            }
        }
    }

    #[test]
    fn ln_gamma_known_values() {
        let cases: [(f64, f64); 4] = [(1.0, 0.0), (0.5, 0.572_364_942_924_700_1), (5.0, 24f64.ln()), (10.5, 13.940_625_219_403_763)];
        for (x, want) in cases {
            assert!((ln_gamma(x) - want).abs() < 1e-12, "{x}");
        }
    }

    #[test]
    fn paired_t_example() {
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [0.0; 4];
        let r = paired_t_test(&a, &b).unwrap();
        // mean 2.5, sd sqrt(5/3), se sd/2
        assert_eq!(r.df, 3);
        assert!((r.t - 3.872_983_346_207_417).abs() < 1e-9);
        assert_eq!(paired_t_test(&a, &a), Err(MetricsError::Degenerate));
    }

    #[test]
    fn bonferroni_examples() {
        assert_eq!(bonferroni_alpha(0.05f64, 4), 0.0125);
        assert_eq!(bonferroni_alpha(0.05f64, 2), 0.025);
    }

    #[test]
    fn equality_test_examples() {
        let xs: Vec<bool> = (0..100).map(|i| i % 4 == 0).collect();
        assert!(bootstrap_mean_equality_test(&xs, &xs, 2000, 1).unwrap() > 0.95);
        let p = bootstrap_mean_equality_test(&[true; 50], &[false; 50], 2000, 1).unwrap();
        assert!(p < 0.001);
    }

    #[test]
    fn alpha_perfect_and_constant() {
        let s = |x: &str| Some(x.to_string());
        let units = vec![vec![s("a"), s("a")], vec![s("b"), s("b")], vec![s("c"), None, s("c")]];
        assert_eq!(krippendorff_alpha::<f64>(&units).unwrap(), 1.0);
        assert_eq!(krippendorff_alpha::<f64>(&[vec![s("a"), s("a")]]).unwrap(), 1.0);
        assert_eq!(krippendorff_alpha::<f64>(&[vec![s("a"), None]]), Err(MetricsError::NoPairableValues));
    }

    #[test]
    fn self_consistency_examples() {
        let base: Vec<String> = (0..100).map(|i| format!("{}", i % 2)).collect();
        let mut off = base.clone();
        off[7] = "x".into();
        assert_eq!(self_consistency(&[base.clone(), base.clone()]).unwrap().as_f64(), 1.0);
        assert_eq!(self_consistency(&[base.clone(), off, base.clone()]).unwrap().as_f64(), 0.99);
        let flipped: Vec<String> = base.iter().map(|l| if l == "0" { "1".into() } else { "0".into() }).collect();
        assert_eq!(self_consistency(&[base, flipped]).unwrap().as_f64(), 0.0);
    }

    #[test]
    fn review_queue_examples() {
        let pairs: Vec<LabelPair> = (0..500)
            .map(|i| LabelPair::new(format!("n{i:03}"), if i < 400 { "1.0" } else { "0.0" }, "0.0"))
            .collect();
        let q = disagreement_queue(&pairs, 150, 150, 4);
        assert_eq!(q.disagreements.len(), 150);
        assert_eq!(q.disagreements.iter().collect::<BTreeSet<_>>().len(), 150);
        assert!(q.disagreements.iter().all(|id| id.as_str() < "n400"));
        assert_eq!((q.agreements.len(), q.agreement_shortfall), (100, 50));
        let none = disagreement_queue(&pairs[400..], 10, 0, 4);
        assert!(none.disagreements.is_empty());
    }

    #[test]
    fn report_record_serializes_nulls() {
        let p = pairs_from([(3, "0.0", "0.0"), (0, "", ""), (0, "", ""), (0, "", "")]);
        let r = report_record("X", &p, Some("1.0"), &opts(), 100, 0.95, 1).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        assert!(v["tpr"].is_null());
        assert_eq!(v["ci"], serde_json::json!([1.0, 1.0]));
    }

    proptest! {
        #[test]
        fn agreement_equals_confusion_accuracy(labels in prop::collection::vec((any::<bool>(), any::<bool>()), 1..60)) {
            let pairs: Vec<LabelPair> = labels.iter().enumerate().map(|(i, (p, r))| {
                LabelPair::new(format!("{i}"), if *p { "1.0" } else { "0.0" }, if *r { "1.0" } else { "0.0" })
            }).collect();
            let c = confusion(&pairs, "1.0", &opts()).unwrap();
            prop_assert_eq!(Some(agreement(&pairs).unwrap()), c.accuracy());
        }

        #[test]
        fn balanced_identity(per_class in 1u64..80, tp_frac in 0.0f64..=1.0, fp_frac in 0.0f64..=1.0) {
            let tp = (tp_frac * per_class as f64).round() as u64;
            let fp = (fp_frac * per_class as f64).round() as u64;
            let c = ConfusionCounts { tp, fn_: per_class - tp, fp, tn: per_class - fp, positive_label: "1.0".into() };
            let r = c.rates();
            let identity = (r.tpr.unwrap().as_f64() + 1.0 - r.fpr.unwrap().as_f64()) / 2.0;
            prop_assert!((c.accuracy().unwrap().as_f64() - identity).abs() <= 1.0 / (2 * per_class) as f64);
        }

        #[test]
        fn macro_f1_invariant_under_relabeling(labels in prop::collection::vec((0usize..3, 0usize..3), 1..40), perm in Just([2usize, 0, 1])) {
            let names = ["x", "y", "z"];
            let classes: Vec<String> = names.iter().map(|s| s.to_string()).collect();
            let pairs: Vec<LabelPair> = labels.iter().enumerate().map(|(i, (p, r))| LabelPair::new(format!("{i}"), names[*p], names[*r])).collect();
            let moved: Vec<LabelPair> = labels.iter().enumerate().map(|(i, (p, r))| LabelPair::new(format!("{i}"), names[perm[*p]], names[perm[*r]])).collect();
            let (a, _): (f64, _) = macro_f1(&pairs, &classes).unwrap();
            let (b, _): (f64, _) = macro_f1(&moved, &classes).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn ci_contains_point(xs in prop::collection::vec(any::<bool>(), 1..80), seed in any::<u64>()) {
            let r = bootstrap_ci::<f64>(&xs, 300, 0.95, seed).unwrap();
            prop_assert!(r.ci_low <= r.point && r.point <= r.ci_high);
        }

        #[test]
        fn normalization_holds_for_f32(xs in prop::collection::vec(any::<bool>(), 2..40)) {
            let r = bootstrap_ci::<f32>(&xs, 200, 0.9, 1).unwrap();
            prop_assert!(r.ci_low <= r.ci_high);
        }
    }
}
