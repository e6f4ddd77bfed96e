//! Analyses over performance grids and vector populations.
//!
//! The central object is the misalignment matrix: a grid of scores indexed
//! by (finetune period, evaluation period). This module normalizes such
//! grids (percent difference from the per-column mean), fits temporal
//! degradation rates by least squares, correlates weight-space similarity
//! with performance degradation, splits monthly grids into
//! aligned/stripe/other seasonality groups, normalizes online-training
//! similarity series, and projects vector populations to 2-D via PCA.
//!
//! All statistics run in F64 with deterministic chunked-pairwise
//! accumulation, so results are identical across runs and thread counts.

use std::fmt::Write as _;

use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::vecalg::{
    cosine_similarity, GroupSelector, ParamGroupRules, TimePeriod, TimeVector, VecAlgError,
};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("matrix dimensions do not match period lists")]
    DimensionMismatch,
    #[error("empty matrix")]
    EmptyMatrix,
    #[error("zero column mean for eval period {0}")]
    ZeroColumnMean(TimePeriod),
    #[error("degenerate eval column {0}: fewer than 2 distinct offsets")]
    DegenerateColumn(TimePeriod),
    #[error("similarity grid shape does not match the matrix period indexing")]
    PeriodIndexingMismatch,
    #[error("zero variance in correlation input")]
    ZeroVariance,
    #[error("need at least 3 samples for a p-value, got {0}")]
    TooFewSamples(usize),
    #[error("seasonality statistics require month-kind periods")]
    NonMonthPeriods,
    #[error("need at least 3 vectors to project, got {0}")]
    TooFewVectors(usize),
    #[error("zero-variance data: all vectors identical after centering")]
    ZeroVarianceData,
    #[error("csv line {line}: {reason}")]
    BadCsv { line: usize, reason: String },
    #[error(transparent)]
    VecAlg(#[from] VecAlgError),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// Performance grid over (finetune period × evaluation period).
#[derive(Debug, Clone, PartialEq)]
pub struct MisalignmentMatrix {
    pub train_periods: Vec<TimePeriod>,
    pub eval_periods: Vec<TimePeriod>,
    /// Row-major: `values[train][eval]`. No missing cells.
    pub values: Vec<Vec<f64>>,
    pub higher_is_better: bool,
    pub metric_name: String,
}

impl MisalignmentMatrix {
    pub fn new(
        train_periods: Vec<TimePeriod>,
        eval_periods: Vec<TimePeriod>,
        values: Vec<Vec<f64>>,
        higher_is_better: bool,
        metric_name: impl Into<String>,
    ) -> Result<MisalignmentMatrix> {
        if train_periods.is_empty() || eval_periods.is_empty() {
            return Err(AnalysisError::EmptyMatrix);
        }
        if values.len() != train_periods.len()
            || values.iter().any(|row| row.len() != eval_periods.len())
        {
            return Err(AnalysisError::DimensionMismatch);
        }
        Ok(MisalignmentMatrix {
            train_periods,
            eval_periods,
            values,
            higher_is_better,
            metric_name: metric_name.into(),
        })
    }

    /// One eval column, in train-period order.
    fn column(&self, e: usize) -> Vec<f64> {
        self.values.iter().map(|row| row[e]).collect()
    }
}

fn mean(xs: &[f64]) -> f64 {
    let mut acc = crate::vecalg::PairwiseSum::new();
    for x in xs {
        acc.push(*x);
    }
    acc.finish() / xs.len() as f64
}

// ---------------------------------------------------------------------------
// Matrix CSV
// ---------------------------------------------------------------------------

/// Serialize the grid: first cell is the literal `train\eval`, then eval
/// period labels; each following row is a train label and its values.
pub fn write_matrix_csv(m: &MisalignmentMatrix) -> String {
    let mut out = String::from("train\\eval");
    for e in &m.eval_periods {
        write!(out, ",{e}").unwrap();
    }
    out.push('\n');
    for (t, row) in m.train_periods.iter().zip(&m.values) {
        write!(out, "{t}").unwrap();
        for v in row {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Parse a grid written by [`write_matrix_csv`]. Metric name and
/// orientation are not stored in the CSV and must be supplied.
pub fn read_matrix_csv(
    text: &str,
    higher_is_better: bool,
    metric_name: &str,
) -> Result<MisalignmentMatrix> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(AnalysisError::BadCsv {
        line: 1,
        reason: "empty file".to_string(),
    })?;
    let mut cells = header.split(',');
    match cells.next() {
        Some("train\\eval") => {}
        other => {
            return Err(AnalysisError::BadCsv {
                line: 1,
                reason: format!("first cell must be train\\eval, got {other:?}"),
            })
        }
    }
    let eval_periods = cells
        .map(|c| {
            c.parse::<TimePeriod>().map_err(|_| AnalysisError::BadCsv {
                line: 1,
                reason: format!("bad period label {c:?}"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut train_periods = Vec::new();
    let mut values = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut cells = line.split(',');
        let label = cells.next().expect("split yields at least one cell");
        let period = label
            .parse::<TimePeriod>()
            .map_err(|_| AnalysisError::BadCsv {
                line: line_no,
                reason: format!("bad period label {label:?}"),
            })?;
        let row = cells
            .map(|c| {
                c.parse::<f64>().map_err(|_| AnalysisError::BadCsv {
                    line: line_no,
                    reason: format!("bad value {c:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if row.len() != eval_periods.len() {
            return Err(AnalysisError::BadCsv {
                line: line_no,
                reason: format!("expected {} values, got {}", eval_periods.len(), row.len()),
            });
        }
        train_periods.push(period);
        values.push(row);
    }
    MisalignmentMatrix::new(
        train_periods,
        eval_periods,
        values,
        higher_is_better,
        metric_name,
    )
}

// ---------------------------------------------------------------------------
// Normalization and regression
// ---------------------------------------------------------------------------

/// Percent difference from the per-eval-column mean:
/// `value' = 100 · (value − col_mean) / |col_mean|`. Each normalized column
/// sums to zero.
pub fn normalize_percent_from_mean(m: &MisalignmentMatrix) -> Result<MisalignmentMatrix> {
    let mut out = m.values.clone();
    for (e, period) in m.eval_periods.iter().enumerate() {
        let col_mean = mean(&m.column(e));
        if col_mean == 0.0 {
            return Err(AnalysisError::ZeroColumnMean(*period));
        }
        for row in &mut out {
            row[e] = 100.0 * (row[e] - col_mean) / col_mean.abs();
        }
    }
    MisalignmentMatrix::new(
        m.train_periods.clone(),
        m.eval_periods.clone(),
        out,
        m.higher_is_better,
        format!("{}%Δmean", m.metric_name),
    )
}

/// Temporal-degradation regression report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TdReport {
    /// Score change per unit of signed offset (per year for year-kind
    /// periods, per month for month-kind).
    pub slope: f64,
    pub r2: f64,
    /// Whether the input matrix was percent-from-mean normalized.
    pub normalized: bool,
}

struct Ols {
    slope: f64,
    r2: f64,
}

/// Least squares of y against x. Zero response variance yields slope 0 and
/// r² 0 by convention; zero predictor variance is the caller's error case.
fn ols(xs: &[f64], ys: &[f64]) -> Option<Ols> {
    let (mx, my) = (mean(xs), mean(ys));
    let mut sxx = crate::vecalg::PairwiseSum::new();
    let mut sxy = crate::vecalg::PairwiseSum::new();
    let mut syy = crate::vecalg::PairwiseSum::new();
    for (x, y) in xs.iter().zip(ys) {
        sxx.push((x - mx) * (x - mx));
        sxy.push((x - mx) * (y - my));
        syy.push((y - my) * (y - my));
    }
    let (sxx, sxy, syy) = (sxx.finish(), sxy.finish(), syy.finish());
    if sxx == 0.0 {
        return None;
    }
    if syy == 0.0 {
        return Some(Ols {
            slope: 0.0,
            r2: 0.0,
        });
    }
    Some(Ols {
        slope: sxy / sxx,
        r2: (sxy * sxy) / (sxx * syy),
    })
}

/// Fit score against signed misalignment offset `ordinal(f) − ordinal(e)`.
/// Per-column mode regresses each eval column separately and averages
/// slopes and r²; pooled mode runs one regression over every cell.
pub fn td_score(m: &MisalignmentMatrix, pooled: bool) -> Result<TdReport> {
    let normalized = m.metric_name.ends_with("%Δmean");
    let mut pooled_x = Vec::new();
    let mut pooled_y = Vec::new();
    let mut slopes = Vec::new();
    let mut r2s = Vec::new();
    for (e, eval_period) in m.eval_periods.iter().enumerate() {
        let xs: Vec<f64> = m
            .train_periods
            .iter()
            .map(|t| (t.ordinal() - eval_period.ordinal()) as f64)
            .collect();
        let ys = m.column(e);
        let fit = ols(&xs, &ys).ok_or(AnalysisError::DegenerateColumn(*eval_period))?;
        slopes.push(fit.slope);
        r2s.push(fit.r2);
        pooled_x.extend(xs);
        pooled_y.extend(ys);
    }
    if pooled {
        let fit = ols(&pooled_x, &pooled_y)
            .ok_or_else(|| AnalysisError::DegenerateColumn(m.eval_periods[0]))?;
        Ok(TdReport {
            slope: fit.slope,
            r2: fit.r2,
            normalized,
        })
    } else {
        Ok(TdReport {
            slope: mean(&slopes),
            r2: mean(&r2s),
            normalized,
        })
    }
}

// ---------------------------------------------------------------------------
// Correlation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationReport {
    pub pearson_r: f64,
    /// Two-sided p-value from the t transform with n−2 degrees of freedom.
    pub p_value: f64,
    pub n: usize,
}

/// Pearson correlation over paired samples.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<CorrelationReport> {
    let n = xs.len();
    assert_eq!(n, ys.len(), "paired samples must have equal length");
    if n < 3 {
        return Err(AnalysisError::TooFewSamples(n));
    }
    let (mx, my) = (mean(xs), mean(ys));
    let mut sxx = crate::vecalg::PairwiseSum::new();
    let mut sxy = crate::vecalg::PairwiseSum::new();
    let mut syy = crate::vecalg::PairwiseSum::new();
    for (x, y) in xs.iter().zip(ys) {
        sxx.push((x - mx) * (x - mx));
        sxy.push((x - mx) * (y - my));
        syy.push((y - my) * (y - my));
    }
    let (sxx, sxy, syy) = (sxx.finish(), sxy.finish(), syy.finish());
    if sxx == 0.0 || syy == 0.0 {
        return Err(AnalysisError::ZeroVariance);
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p_value = if 1.0 - r * r <= 0.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
        2.0 * dist.cdf(-t.abs())
    };
    Ok(CorrelationReport {
        pearson_r: r,
        p_value,
        n,
    })
}

/// Correlate pairwise vector similarity against (normalized) performance,
/// pairing every (f, e) cell including the diagonal.
pub fn correlate_similarity_degradation(
    sims: &[Vec<f64>],
    m: &MisalignmentMatrix,
) -> Result<CorrelationReport> {
    if m.train_periods != m.eval_periods
        || sims.len() != m.train_periods.len()
        || sims.iter().any(|row| row.len() != m.eval_periods.len())
    {
        return Err(AnalysisError::PeriodIndexingMismatch);
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (srow, vrow) in sims.iter().zip(&m.values) {
        xs.extend_from_slice(srow);
        ys.extend_from_slice(vrow);
    }
    pearson(&xs, &ys)
}

// ---------------------------------------------------------------------------
// Seasonality
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupStat {
    /// Mean of the group's cells; 0 when the group is empty (see count).
    pub mean: f64,
    pub count: usize,
}

/// Cell groups of a monthly grid: the diagonal, the off-diagonal stripes
/// that share month-of-year, and everything else.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeasonalityStats {
    pub aligned: GroupStat,
    pub stripe: GroupStat,
    pub other: GroupStat,
}

pub fn seasonality_stats(m: &MisalignmentMatrix) -> Result<SeasonalityStats> {
    let month_kind = |p: &TimePeriod| matches!(p, TimePeriod::Month { .. });
    if !m.train_periods.iter().all(month_kind) || !m.eval_periods.iter().all(month_kind) {
        return Err(AnalysisError::NonMonthPeriods);
    }
    let mut groups: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (f, frow) in m.train_periods.iter().zip(&m.values) {
        for (e, v) in m.eval_periods.iter().zip(frow) {
            let slot = if f == e {
                0
            } else if f.ordinal().rem_euclid(12) == e.ordinal().rem_euclid(12) {
                1
            } else {
                2
            };
            groups[slot].push(*v);
        }
    }
    let stat = |cells: &Vec<f64>| GroupStat {
        mean: if cells.is_empty() { 0.0 } else { mean(cells) },
        count: cells.len(),
    };
    Ok(SeasonalityStats {
        aligned: stat(&groups[0]),
        stripe: stat(&groups[1]),
        other: stat(&groups[2]),
    })
}

// ---------------------------------------------------------------------------
// Online-similarity normalization
// ---------------------------------------------------------------------------

/// Normalize a (checkpoint-month × year-vector) similarity grid by each
/// column's mean: `value'(m, y) = value(m, y) / mean_m' value(m', y)`.
pub fn normalize_online_similarity(series: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let Some(first) = series.first() else {
        return Err(AnalysisError::EmptyMatrix);
    };
    let cols = first.len();
    if cols == 0 || series.iter().any(|row| row.len() != cols) {
        return Err(AnalysisError::DimensionMismatch);
    }
    let mut out = series.to_vec();
    for c in 0..cols {
        let col: Vec<f64> = series.iter().map(|row| row[c]).collect();
        let m = mean(&col);
        if m == 0.0 {
            return Err(AnalysisError::ZeroColumnMean(TimePeriod::Index(c as i64)));
        }
        for row in &mut out {
            row[c] /= m;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// 2-D projection (PCA)
// ---------------------------------------------------------------------------

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvectors-as-rows), unsorted. Deterministic: fixed
/// sweep order, fixed convergence threshold.
#[allow(clippy::needless_range_loop)] // paired-column rotations need the raw indices
fn jacobi_eigh(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let scale: f64 = a
        .iter()
        .flat_map(|r| r.iter())
        .map(|x| x.abs())
        .fold(0.0, f64::max)
        .max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(a[p][q].abs());
            }
        }
        if off <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let values: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    // Transpose the accumulated rotation so each output row is one vector.
    let vectors: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| v[i][j]).collect()).collect();
    (values, vectors)
}

/// Project a vector population onto its top two principal directions.
/// Rows are the flattened selected deltas, column-centered; coordinates are
/// the PCA scores with a fixed sign convention (the largest-magnitude
/// coordinate on each axis is positive).
pub fn project_2d(
    vectors: &[TimeVector],
    filter: Option<(GroupSelector, &ParamGroupRules)>,
) -> Result<Vec<(f64, f64)>> {
    let n = vectors.len();
    if n < 3 {
        return Err(AnalysisError::TooFewVectors(n));
    }
    // Shared-inventory check rides on cosine_similarity's validation.
    for v in &vectors[1..] {
        cosine_similarity(&vectors[0], v, filter).or_else(|e| match e {
            VecAlgError::ZeroNorm => Ok(0.0),
            other => Err(other),
        })?;
    }
    let keep = |name: &str| match filter {
        Some((sel, rules)) => sel.matches(rules.classify(name)),
        None => true,
    };
    let rows: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| {
            v.delta
                .iter()
                .filter(|(name, _)| keep(name))
                .flat_map(|(_, t)| t.to_f32())
                .map(f64::from)
                .collect()
        })
        .collect();
    let dim = rows[0].len();
    let mut centered = rows;
    for d in 0..dim {
        let col: Vec<f64> = centered.iter().map(|r| r[d]).collect();
        let m = mean(&col);
        for r in &mut centered {
            r[d] -= m;
        }
    }
    // n×n Gram matrix; its eigenpairs give the PCA scores directly.
    let mut gram = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let mut acc = crate::vecalg::PairwiseSum::new();
            for (ci, cj) in centered[i].iter().zip(&centered[j]) {
                acc.push(ci * cj);
            }
            let g = acc.finish();
            gram[i][j] = g;
            gram[j][i] = g;
        }
    }
    let (values, vecs) = jacobi_eigh(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[j].partial_cmp(&values[i]).unwrap().then(i.cmp(&j)));
    let lead = values[order[0]].max(0.0);
    if lead <= 0.0 {
        return Err(AnalysisError::ZeroVarianceData);
    }
    let axis = |idx: usize| -> Vec<f64> {
        let sigma = values[order[idx]].max(0.0).sqrt();
        let mut coords: Vec<f64> = vecs[order[idx]].iter().map(|u| sigma * u).collect();
        let mut best = 0usize;
        for (i, c) in coords.iter().enumerate() {
            if c.abs() > coords[best].abs() {
                best = i;
            }
        }
        if coords[best] < 0.0 {
            for c in &mut coords {
                *c = -*c;
            }
        }
        coords
    };
    let xs = axis(0);
    let ys = axis(1);
    Ok(xs.into_iter().zip(ys).collect())
}
