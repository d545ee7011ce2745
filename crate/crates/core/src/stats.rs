//! Group-level statistics: Wilcoxon rank-sum tests, ROC curves, Pearson
//! correlation, the fixed-effects volume model, the age-length-scale sweep
//! and the evaluation report that ties them together.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::io::{Cohort, ScoreTable};
use crate::kernels::AgeKernelParams;
use crate::metrics::NormativeModel;
use crate::scalar::Real;

/// Exact rank-sum p-values are used when the smaller group has at most this many members and there are no ties.
pub const EXACT_THRESHOLD: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankSumMethod {
    Exact,
    NormalApprox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankSumResult {
    /// Mann-Whitney U of the first group: pairs `(a, b)` with `a > b`, ties counted 1/2.
    pub u_statistic: f64,
    pub z_value: Option<f64>,
    /// Two-sided.
    pub p_value: f64,
    pub method: RankSumMethod,
}

/// Midranks (1-based) of `values` and the tie term `sum(t^3 - t)` over tie groups.
pub fn midranks(values: &[f64]) -> (Vec<f64>, f64) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = 0.0;
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = rank;
        }
        let t = (end - start) as f64;
        ties += t * t * t - t;
        start = end;
    }
    (ranks, ties)
}

/// Null distribution counts of U for group sizes `(n1, n2)`: coefficient `u`
/// is the number of labelings with that U. These are the coefficients of
/// the Gaussian binomial `[n1 + n2 choose n1]_q`. `None` on overflow.
pub fn u_null_counts(n1: usize, n2: usize) -> Option<Vec<i128>> {
    let k = n1.min(n2);
    let rest = n1.max(n2);
    let mut c = vec![1i128];
    for i in 1..=k {
        let a = rest + i;
        let mut next = vec![0i128; c.len() + a];
        next[..c.len()].copy_from_slice(&c);
        for (j, &v) in c.iter().enumerate() {
            next[j + a] = next[j + a].checked_sub(v)?;
        }
        for j in i..next.len() {
            next[j] = next[j].checked_add(next[j - i])?;
        }
        next.truncate(i * rest + 1);
        c = next;
    }
    Some(c)
}

fn exact_p(u: f64, n1: usize, n2: usize) -> Option<f64> {
    let counts = u_null_counts(n1, n2)?;
    let total: i128 = counts.iter().try_fold(0i128, |a, &b| a.checked_add(b))?;
    let u = u.round() as usize;
    let le: i128 = counts[..=u].iter().sum();
    let ge: i128 = counts[u..].iter().sum();
    let tail = le.min(ge);
    Some((2.0 * tail as f64 / total as f64).min(1.0))
}

pub fn rank_sum_test(a: &[f64], b: &[f64]) -> Result<RankSumResult> {
    rank_sum_test_with_threshold(a, b, EXACT_THRESHOLD)
}

/// As [`rank_sum_test`] with a custom exact-method cutoff; 0 forces the normal approximation.
pub fn rank_sum_test_with_threshold(a: &[f64], b: &[f64], exact_threshold: usize) -> Result<RankSumResult> {
    let (n1, n2) = (a.len(), b.len());
    if n1 == 0 || n2 == 0 {
        return Err(Error::contract("rank-sum test needs two non-empty groups"));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::contract("rank-sum input contains NaN"));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let r1: f64 = ranks[..n1].iter().sum();
    let (f1, f2) = (n1 as f64, n2 as f64);
    let u = r1 - f1 * (f1 + 1.0) / 2.0;

    if n1.min(n2) <= exact_threshold && ties == 0.0 {
        if let Some(p) = exact_p(u, n1, n2) {
            return Ok(RankSumResult {
                u_statistic: u,
                z_value: None,
                p_value: p,
                method: RankSumMethod::Exact,
            });
        }
    }

    let n = f1 + f2;
    let mu = f1 * f2 / 2.0;
    let var = f1 * f2 / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
    let (z, p) = if var > 0.0 {
        let dev = ((u - mu).abs() - 0.5).max(0.0);
        let z = dev / var.sqrt() * (u - mu).signum();
        (z, erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0))
    } else {
        (0.0, 1.0)
    };
    Ok(RankSumResult {
        u_statistic: u,
        z_value: Some(z),
        p_value: p,
        method: RankSumMethod::NormalApprox,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    /// Decision thresholds, descending; the first is `+inf` (serialized as null).
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
    pub auc: f64,
}

/// ROC curve over the sorted unique scores and its trapezoidal AUC.
/// `labels[i] == true` marks a positive. With `positive_is_high == false`
/// lower scores indicate positives.
pub fn roc_auc(scores: &[f64], labels: &[bool], positive_is_high: bool) -> Result<RocResult> {
    if scores.len() != labels.len() {
        return Err(Error::contract(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::contract("ROC scores contain NaN"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::contract("ROC needs both positive and negative samples"));
    }
    let oriented: Vec<f64> = if positive_is_high {
        scores.to_vec()
    } else {
        scores.iter().map(|s| -s).collect()
    };
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| oriented[b].total_cmp(&oriented[a]));

    let mut thresholds = vec![f64::INFINITY];
    let mut tpr = vec![0.0];
    let mut fpr = vec![0.0];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let t = oriented[idx[i]];
        while i < idx.len() && oriented[idx[i]] == t {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let (x, y) = (fp as f64 / n_neg as f64, tp as f64 / n_pos as f64);
        auc += (x - fpr.last().unwrap()) * (y + tpr.last().unwrap()) / 2.0;
        thresholds.push(if positive_is_high { t } else { -t });
        tpr.push(y);
        fpr.push(x);
    }
    Ok(RocResult {
        thresholds,
        tpr,
        fpr,
        auc,
    })
}

pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!("pearson_r: lengths {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::contract("pearson_r needs at least 2 observations"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::contract("pearson_r: constant input"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedEffectsOptions {
    pub normalize_age: bool,
    pub normalize_volume: bool,
}

impl Default for FixedEffectsOptions {
    fn default() -> Self {
        FixedEffectsOptions {
            normalize_age: true,
            normalize_volume: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub estimate: f64,
    pub std_error: f64,
    pub t_value: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedEffectsFit {
    pub intercept: Coefficient,
    pub age: Coefficient,
    pub sex: Coefficient,
    pub dx: Coefficient,
    pub age_x_dx: Coefficient,
    pub n: usize,
    pub residual_df: usize,
    pub residuals: Vec<f64>,
    /// Columns: intercept, age, sex, dx, age x dx.
    #[serde(skip)]
    pub design: Option<DMatrix<f64>>,
    #[serde(skip)]
    pub response: Option<DVector<f64>>,
}

pub const FIXED_EFFECTS_COLUMNS: [&str; 5] = ["intercept", "age", "sex", "dx", "age_x_dx"];

impl FixedEffectsFit {
    pub fn coefficients(&self) -> [&Coefficient; 5] {
        [&self.intercept, &self.age, &self.sex, &self.dx, &self.age_x_dx]
    }

    /// One row in the layout
    /// `structure, age coef, dx coef, age x dx coef, age p, dx p, age x dx p`.
    pub fn table_row(&self, structure: &str) -> String {
        format!(
            "{structure}\t{:.2}\t{:.2}\t{:.2}\t{:.2E}\t{:.2E}\t{:.2E}",
            self.age.estimate,
            self.dx.estimate,
            self.age_x_dx.estimate,
            self.age.p_value,
            self.dx.p_value,
            self.age_x_dx.p_value
        )
    }
}

fn zscore(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    if !(sd > 0.0) {
        return Err(Error::RankDeficient("cannot normalize a constant variable".into()));
    }
    Ok(v.iter().map(|x| (x - mean) / sd).collect())
}

/// OLS of volume on `[1, age, sex, dx, age*dx]` with two-sided t-tests.
/// `sex` is a 0/1 indicator (F = 0, M = 1), `dx` is 0 = healthy, 1 = disease.
pub fn fit_fixed_effects(
    volume: &[f64],
    age: &[f64],
    sex: &[f64],
    dx: &[f64],
    options: &FixedEffectsOptions,
) -> Result<FixedEffectsFit> {
    let n = volume.len();
    if age.len() != n || sex.len() != n || dx.len() != n {
        return Err(Error::contract("fixed-effects inputs have unequal lengths"));
    }
    if n <= 5 {
        return Err(Error::contract(format!("fixed-effects model needs more than 5 subjects, got {n}")));
    }
    if volume.iter().chain(age).chain(sex).chain(dx).any(|v| !v.is_finite()) {
        return Err(Error::contract("fixed-effects inputs must be finite"));
    }
    let age = if options.normalize_age { zscore(age)? } else { age.to_vec() };
    let y = if options.normalize_volume { zscore(volume)? } else { volume.to_vec() };
    let design = DMatrix::from_fn(n, 5, |i, j| match j {
        0 => 1.0,
        1 => age[i],
        2 => sex[i],
        3 => dx[i],
        _ => age[i] * dx[i],
    });
    let yv = DVector::from_vec(y);

    let qr = design.clone().qr();
    let r = qr.r();
    let rmax = r.diagonal().amax();
    for j in 0..5 {
        if r[(j, j)].abs() <= 1e-10 * rmax.max(1.0) {
            return Err(Error::RankDeficient(format!(
                "column {:?} is linearly dependent on the others",
                FIXED_EFFECTS_COLUMNS[j]
            )));
        }
    }
    let qty = qr.q().tr_mul(&yv);
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::RankDeficient("singular R factor".into()))?;
    let residuals = &yv - &design * &beta;
    let df = n - 5;
    let sigma2 = residuals.norm_squared() / df as f64;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(5, 5))
        .ok_or_else(|| Error::RankDeficient("singular R factor".into()))?;
    let cov_unscaled = &r_inv * r_inv.transpose();
    let t_dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::NumericalFailure(e.to_string()))?;
    let coef = |j: usize| {
        let se = (sigma2 * cov_unscaled[(j, j)]).sqrt();
        let t = beta[j] / se;
        let p = if t.is_finite() {
            (2.0 * (1.0 - t_dist.cdf(t.abs()))).clamp(0.0, 1.0)
        } else {
            0.0
        };
        Coefficient {
            estimate: beta[j],
            std_error: se,
            t_value: t,
            p_value: p,
        }
    };
    Ok(FixedEffectsFit {
        intercept: coef(0),
        age: coef(1),
        sex: coef(2),
        dx: coef(3),
        age_x_dx: coef(4),
        n,
        residual_df: df,
        residuals: residuals.iter().copied().collect(),
        design: Some(design),
        response: Some(yv),
    })
}

/// Grid covering the scales reported for the three experiments (1, 1e2, 1e5) plus the unweighted limit.
pub const DEFAULT_LY_GRID: [f64; 7] = [0.1, 1.0, 10.0, 100.0, 1000.0, 1e5, f64::INFINITY];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub age_length_scale: f64,
    pub auc: f64,
    pub best: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    /// Sorted by age length scale, ascending.
    pub rows: Vec<SweepRow>,
    pub best_index: usize,
    pub age_noise: f64,
}

impl SweepTable {
    pub fn best(&self) -> &SweepRow {
        &self.rows[self.best_index]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("age_length_scale,auc,best\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.age_length_scale, r.auc, r.best));
        }
        out
    }
}

/// Two-group labels for a cohort: `Some(true)` for `positive`, `Some(false)` for `negative`, `None` otherwise.
pub fn group_labels(diagnosis: &[String], negative: &str, positive: &str) -> Result<Vec<Option<bool>>> {
    if negative == positive {
        return Err(Error::contract("the two groups must differ"));
    }
    let labels: Vec<Option<bool>> = diagnosis
        .iter()
        .map(|d| {
            if d == positive {
                Some(true)
            } else if d == negative {
                Some(false)
            } else {
                None
            }
        })
        .collect();
    for (name, flag) in [(negative, false), (positive, true)] {
        if !labels.contains(&Some(flag)) {
            return Err(Error::Schema(format!("unknown group label {name:?}: no subjects carry it")));
        }
    }
    Ok(labels)
}

fn select_two_groups(values: &[f64], labels: &[Option<bool>]) -> (Vec<f64>, Vec<bool>) {
    values
        .iter()
        .zip(labels)
        .filter_map(|(&v, l)| l.map(|l| (v, l)))
        .unzip()
}

/// AUC of the age-weighted variance for each age length scale in `grid`.
/// The best row is the highest AUC, ties going to the smallest length scale.
pub fn ly_sweep<T: Real>(
    model: &NormativeModel<T>,
    cohort: &Cohort,
    grid: &[f64],
    age_noise: f64,
    negative: &str,
    positive: &str,
) -> Result<SweepTable> {
    if grid.is_empty() {
        return Err(Error::contract("age length scale grid is empty"));
    }
    if let Some(bad) = grid.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::contract(format!("age length scale {bad} must be > 0")));
    }
    let diagnosis = cohort
        .diagnosis
        .as_ref()
        .ok_or_else(|| Error::Schema("cohort has no diagnosis column".into()))?;
    let labels = group_labels(diagnosis, negative, positive)?;
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let x = model.model_inputs(cohort)?;
    let ages: Vec<T> = cohort.age.iter().map(|&a| T::lit(a)).collect();
    let aucs: Vec<f64> = grid
        .par_iter()
        .map(|&ly| {
            let ap = AgeKernelParams::new(T::lit(ly), T::lit(age_noise))?;
            let w = model.gp.weighted_posterior_cov(&x, &ages, &ap, false)?;
            let v: Vec<f64> = w.variance.iter().map(|v| v.as_f64()).collect();
            let (s, l) = select_two_groups(&v, &labels);
            Ok(roc_auc(&s, &l, true)?.auc)
        })
        .collect::<Result<_>>()?;
    let mut best_index = 0;
    for (i, &a) in aucs.iter().enumerate() {
        if a > aucs[best_index] {
            best_index = i;
        }
    }
    Ok(SweepTable {
        rows: grid
            .iter()
            .zip(&aucs)
            .enumerate()
            .map(|(i, (&ly, &auc))| SweepRow {
                age_length_scale: ly,
                auc,
                best: i == best_index,
            })
            .collect(),
        best_index,
        age_noise,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricEvaluation {
    pub metric: String,
    pub auc: f64,
    pub rank_sum: RankSumResult,
    pub mean_negative: f64,
    pub mean_positive: f64,
    pub roc: RocResult,
}

/// Pairwise Pearson correlations between the three metrics over both groups.
/// `None` when a metric is constant over the selected subjects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricCorrelations {
    pub cov_cov_w: Option<f64>,
    pub epsilon_cov: Option<f64>,
    pub epsilon_cov_w: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub negative_group: String,
    pub positive_group: String,
    pub n_negative: usize,
    pub n_positive: usize,
    pub absolute_epsilon: bool,
    pub metrics: Vec<MetricEvaluation>,
    pub correlations: MetricCorrelations,
}

impl EvaluationReport {
    pub fn metric(&self, name: &str) -> Option<&MetricEvaluation> {
        self.metrics.iter().find(|m| m.metric == name)
    }

    /// Plain-text AUC / p-value table.
    pub fn summary(&self) -> String {
        let mut out = format!(
            "{} (n={}) vs {} (n={})\nmetric\tAUC\tp-value\n",
            self.negative_group, self.n_negative, self.positive_group, self.n_positive
        );
        for m in &self.metrics {
            out.push_str(&format!("{}\t{:.3}\t{:.3E}\n", m.metric, m.auc, m.rank_sum.p_value));
        }
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |r| format!("{r:.3}"));
        out.push_str(&format!(
            "R(cov, cov_w)={}\tR(epsilon, cov)={}\tR(epsilon, cov_w)={}\n",
            fmt(self.correlations.cov_cov_w),
            fmt(self.correlations.epsilon_cov),
            fmt(self.correlations.epsilon_cov_w)
        ));
        out
    }
}

pub const METRICS: [&str; 3] = ["epsilon", "cov", "cov_w"];

/// Compares two diagnosis groups on each metric: AUC (higher score = the
/// positive group), rank-sum test, and inter-metric correlations.
pub fn evaluate(
    table: &ScoreTable,
    negative: &str,
    positive: &str,
    metrics: &[&str],
    absolute_epsilon: bool,
) -> Result<EvaluationReport> {
    table.validate()?;
    let labels = group_labels(&table.diagnosis, negative, positive)?;
    let column = |name: &str| -> Result<Vec<f64>> {
        let v = table
            .metric(name)
            .filter(|_| METRICS.contains(&name))
            .ok_or_else(|| Error::contract(format!("unknown metric {name:?} (expected epsilon|cov|cov_w)")))?;
        Ok(if name == "epsilon" && absolute_epsilon {
            v.iter().map(|e| e.abs()).collect()
        } else {
            v.to_vec()
        })
    };
    let mut evaluations = Vec::with_capacity(metrics.len());
    for &name in metrics {
        let (values, l) = select_two_groups(&column(name)?, &labels);
        let neg: Vec<f64> = values.iter().zip(&l).filter(|(_, &p)| !p).map(|(v, _)| *v).collect();
        let pos: Vec<f64> = values.iter().zip(&l).filter(|(_, &p)| p).map(|(v, _)| *v).collect();
        let roc = roc_auc(&values, &l, true)?;
        evaluations.push(MetricEvaluation {
            metric: name.to_string(),
            auc: roc.auc,
            rank_sum: rank_sum_test(&neg, &pos)?,
            mean_negative: neg.iter().sum::<f64>() / neg.len() as f64,
            mean_positive: pos.iter().sum::<f64>() / pos.len() as f64,
            roc,
        });
    }
    let both = |name: &str| column(name).map(|v| select_two_groups(&v, &labels).0);
    let (eps, cov, cov_w) = (both("epsilon")?, both("cov")?, both("cov_w")?);
    let n_positive = labels.iter().filter(|l| **l == Some(true)).count();
    let n_negative = labels.iter().filter(|l| **l == Some(false)).count();
    Ok(EvaluationReport {
        negative_group: negative.to_string(),
        positive_group: positive.to_string(),
        n_negative,
        n_positive,
        absolute_epsilon,
        metrics: evaluations,
        correlations: MetricCorrelations {
            cov_cov_w: pearson_r(&cov, &cov_w).ok(),
            epsilon_cov: pearson_r(&eps, &cov).ok(),
            epsilon_cov_w: pearson_r(&eps, &cov_w).ok(),
        },
    })
}
