//! SIS, FPSIS and RFPSIS solution paths.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor::{classical_dimension, classical_scores, fit_factor_model, FactorFit, FactorOptions, ObsFlag};
use crate::regression::{mm_estimator_with, RegressionFit, SOptions};
use crate::robust::{chi2_quantile, qn_scale, RobustScale, BISQUARE_EFFICIENT_C};
use crate::{par, rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    Sis,
    Fpsis,
    Rfpsis,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sis" => Ok(Method::Sis),
            "fpsis" => Ok(Method::Fpsis),
            "rfpsis" => Ok(Method::Rfpsis),
            other => Err(Error::Domain(format!("unknown method '{other}'"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Sis => "sis",
            Method::Fpsis => "fpsis",
            Method::Rfpsis => "rfpsis",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OutlierLabel {
    Regular,
    #[serde(rename = "LMV")]
    Lmv,
    PcGoodLeverage,
    PcBadLeverage,
    OcOutlier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierRow {
    pub index: usize,
    pub label: OutlierLabel,
    pub od: f64,
    pub sd: f64,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OutlierReport {
    pub rows: Vec<OutlierRow>,
}

impl OutlierReport {
    pub fn count(&self, label: OutlierLabel) -> usize {
        self.rows.iter().filter(|r| r.label == label).count()
    }
}

#[derive(Debug, Clone)]
pub struct SolutionPath {
    pub method: Method,
    /// Number of profiled-out factors (0 for SIS).
    pub d: usize,
    /// Predictor indices by decreasing absolute slope, ties by index.
    pub order: Vec<usize>,
    pub slopes: Vec<f64>,
    /// Rows regular under the factor model.
    pub i1: Vec<usize>,
    /// Rows used for the marginal regressions.
    pub i2: Vec<usize>,
    pub profiled_y: DVector<f64>,
    /// Profiled predictors, each column divided by its entry in `column_scales`.
    pub profiled_x: DMatrix<f64>,
    pub column_scales: Vec<f64>,
    pub factor: Option<FactorFit>,
    pub report: Option<OutlierReport>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRow {
    pub rank: usize,
    pub predictor: usize,
    pub slope: f64,
}

impl SolutionPath {
    pub fn rows(&self) -> Vec<PathRow> {
        self.order
            .iter()
            .enumerate()
            .map(|(k, &j)| PathRow { rank: k + 1, predictor: j, slope: self.slopes[j] })
            .collect()
    }
}

/// Indices sorted by decreasing absolute value, ties by ascending index.
pub fn order_by_magnitude(slopes: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..slopes.len()).collect();
    order.sort_by(|&a, &b| slopes[b].abs().total_cmp(&slopes[a].abs()).then(a.cmp(&b)));
    order
}

/// Column-wise mean/sd standardization and a centered response.
pub fn standardize_classical(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let mut xs = x.clone();
    for (j, mut col) in xs.column_iter_mut().enumerate() {
        let s = RobustScale::mean_sd(col.as_slice())?;
        if !(s.scale > 0.0) {
            return Err(Error::ZeroVarianceColumn(j));
        }
        col.apply(|v| *v = s.standardize(*v));
    }
    let mean = y.mean();
    Ok((xs, y.add_scalar(-mean)))
}

/// Column-wise median/Qn standardization; columns with zero Qn are centered only
/// and reported in the second return value.
pub fn standardize_robust(x: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let mut xs = x.clone();
    let mut degenerate = Vec::new();
    for (j, mut col) in xs.column_iter_mut().enumerate() {
        let s = RobustScale::median_qn(col.as_slice())?;
        let scale = if s.scale > 0.0 {
            s.scale
        } else {
            degenerate.push(j);
            1.0
        };
        col.apply(|v| *v = (*v - s.location) / scale);
    }
    Ok((xs, degenerate))
}

fn marginal_ls(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Vec<f64>> {
    x.column_iter()
        .enumerate()
        .map(|(j, c)| {
            let sxx = c.norm_squared();
            if sxx > 0.0 {
                Ok(c.dot(y) / sxx)
            } else {
                Err(Error::ZeroVarianceColumn(j))
            }
        })
        .collect()
}

fn check_shapes(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch(format!("{} rows in X, {} responses", x.nrows(), y.len())));
    }
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

/// Marginal least-squares screening on standardized predictors and a centered response.
pub fn sis_path(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<SolutionPath> {
    check_shapes(x, y)?;
    let slopes = marginal_ls(x, y)?;
    let all: Vec<usize> = (0..x.nrows()).collect();
    Ok(SolutionPath {
        method: Method::Sis,
        d: 0,
        order: order_by_magnitude(&slopes),
        slopes,
        i1: all.clone(),
        i2: all,
        profiled_y: y.clone(),
        profiled_x: x.clone(),
        column_scales: vec![1.0; x.ncols()],
        factor: None,
        report: None,
        warnings: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FpsisDimension {
    Auto { d_max: usize },
    Fixed(usize),
}

/// Factor-profiled screening with classical (untrimmed) factors.
pub fn fpsis_path(x: &DMatrix<f64>, y: &DVector<f64>, d: FpsisDimension) -> Result<SolutionPath> {
    check_shapes(x, y)?;
    let d = match d {
        FpsisDimension::Fixed(d) => d,
        FpsisDimension::Auto { d_max } => classical_dimension(x, d_max.min(x.nrows().min(x.ncols())))?,
    };
    if d == 0 {
        let mut path = sis_path(x, y)?;
        path.method = Method::Fpsis;
        return Ok(path);
    }
    let z = classical_scores(x, d)?;
    let mut px = x - &z * z.tr_mul(x);
    let py = y - &z * z.tr_mul(y);
    let n = x.nrows();
    let mut warnings = Vec::new();
    let mut column_scales = Vec::with_capacity(x.ncols());
    let slopes: Vec<f64> = px
        .column_iter_mut()
        .enumerate()
        .map(|(j, mut c)| {
            let sxx = c.norm_squared();
            // A column inside the factor span profiles to (numerically) zero.
            if sxx > 1e-20 * x.column(j).norm_squared() {
                let sd = (sxx / (n - 1) as f64).sqrt();
                c /= sd;
                column_scales.push(sd);
                c.dot(&py) / (n - 1) as f64
            } else {
                warnings.push(format!("column {j} has zero variance after profiling; slope set to 0"));
                column_scales.push(1.0);
                0.0
            }
        })
        .collect();
    let all: Vec<usize> = (0..n).collect();
    Ok(SolutionPath {
        method: Method::Fpsis,
        d,
        order: order_by_magnitude(&slopes),
        slopes,
        i1: all.clone(),
        i2: all,
        profiled_y: py,
        profiled_x: px,
        column_scales,
        factor: None,
        report: None,
        warnings,
    })
}

#[derive(Debug, Clone)]
pub struct ResponseProfile {
    pub gamma: DVector<f64>,
    pub mu_y: f64,
    pub profiled_y: DVector<f64>,
    pub i1: Vec<usize>,
    pub i2: Vec<usize>,
    pub initial: RegressionFit,
    pub report: OutlierReport,
}

fn rows_of(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

fn entries_of(v: &DVector<f64>, rows: &[usize]) -> DVector<f64> {
    DVector::from_iterator(rows.len(), rows.iter().map(|&i| v[i]))
}

/// Robust regression of the response on the factor scores, first over the
/// regular rows, then over the regular rows plus the good-leverage PC outliers.
pub fn profile_response(y: &DVector<f64>, fit: &FactorFit, seed: u64) -> Result<ResponseProfile> {
    let n = y.len();
    let z = &fit.scores;
    if z.nrows() != n {
        return Err(Error::DimensionMismatch(format!("{} scores, {} responses", z.nrows(), n)));
    }
    let d = fit.d;
    let i1 = fit.regular_rows();
    if i1.len() < 2 * (d + 1) {
        return Err(Error::TooFewRegularRows { got: i1.len(), needed: 2 * (d + 1) });
    }
    let opts = SOptions::for_slopes(d, rng::derive_seed(seed, &[0x5250]));
    let initial = mm_estimator_with(&rows_of(z, &i1), &entries_of(y, &i1), true, BISQUARE_EFFICIENT_C, &opts)?;
    if !(initial.scale > 0.0) {
        return Err(Error::ZeroScale("initial response profile"));
    }
    let resid0 = (y - z * &initial.slopes).add_scalar(-initial.intercept);
    let t: Vec<f64> = resid0.iter().map(|r| r / initial.scale).collect();
    let cut = chi2_quantile(0.975, 1)?;
    let mut in_i2 = vec![false; n];
    for &i in &i1 {
        in_i2[i] = true;
    }
    for i in 0..n {
        if fit.flags[i] == ObsFlag::PcOutlier && t[i] * t[i] <= cut {
            in_i2[i] = true;
        }
    }
    let i2: Vec<usize> = (0..n).filter(|&i| in_i2[i]).collect();
    let final_fit = if i2.len() == i1.len() {
        initial.clone()
    } else {
        mm_estimator_with(&rows_of(z, &i2), &entries_of(y, &i2), true, BISQUARE_EFFICIENT_C, &opts)?
    };
    let profiled_y = (y - z * &final_fit.slopes).add_scalar(-final_fit.intercept);
    let rows = (0..n)
        .map(|i| {
            let label = match fit.flags[i] {
                ObsFlag::OcOutlier => OutlierLabel::OcOutlier,
                ObsFlag::PcOutlier if in_i2[i] => OutlierLabel::PcGoodLeverage,
                ObsFlag::PcOutlier => OutlierLabel::PcBadLeverage,
                ObsFlag::Regular if t[i] * t[i] > cut => OutlierLabel::Lmv,
                ObsFlag::Regular => OutlierLabel::Regular,
            };
            OutlierRow { index: i, label, od: fit.od[i], sd: fit.sd[i], t: t[i] }
        })
        .collect();
    Ok(ResponseProfile {
        gamma: final_fit.slopes,
        mu_y: final_fit.intercept,
        profiled_y,
        i1,
        i2,
        initial,
        report: OutlierReport { rows },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfpsisOptions {
    pub factor: FactorOptions,
    /// Elemental starts for each marginal S-estimator.
    pub marginal_starts: usize,
    pub seed: u64,
}

impl Default for RfpsisOptions {
    fn default() -> Self {
        Self { factor: FactorOptions::default(), marginal_starts: 50, seed: 0 }
    }
}

/// Simple no-intercept MM slope of `y` on `x`; `None` for a degenerate column.
pub fn marginal_mm(x: &[f64], y: &[f64], n_starts: usize, seed: u64) -> Result<Option<RegressionFit>> {
    let xm = DMatrix::from_column_slice(x.len(), 1, x);
    if xm.iter().all(|v| *v == 0.0) {
        return Ok(None);
    }
    let yv = DVector::from_column_slice(y);
    let opts = SOptions { n_starts, ..SOptions::for_slopes(1, seed) };
    match mm_estimator_with(&xm, &yv, false, BISQUARE_EFFICIENT_C, &opts) {
        Ok(f) => Ok(Some(f)),
        Err(Error::NoValidStart | Error::RankDeficientWeighted | Error::RankDeficient) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Robust factor-profiled screening on raw predictors and response.
pub fn rfpsis_path(x: &DMatrix<f64>, y: &DVector<f64>, opts: &RfpsisOptions) -> Result<SolutionPath> {
    check_shapes(x, y)?;
    let (n, p) = x.shape();
    let mut warnings = Vec::new();
    let (xs, degenerate) = standardize_robust(x)?;
    for j in degenerate {
        warnings.push(format!("column {j} has zero Qn scale; centered only"));
    }
    let factor_opts = FactorOptions { seed: rng::derive_seed(opts.seed, &[0x4641]), ..opts.factor.clone() };
    let factor = fit_factor_model(&xs, &factor_opts)?;
    let mut profiled_x = factor.profiled(&xs);
    let prof = profile_response(y, &factor, rng::derive_seed(opts.seed, &[0x5052]))?;
    let i2 = prof.i2.clone();
    // Unit Qn scale over the screening rows, so slopes compare across columns.
    let mut column_scales = Vec::with_capacity(p);
    for (j, mut col) in profiled_x.column_iter_mut().enumerate() {
        let on_i2: Vec<f64> = i2.iter().map(|&i| col[i]).collect();
        let s = qn_scale(&on_i2)?;
        if s > 0.0 {
            col /= s;
            column_scales.push(s);
        } else {
            warnings.push(format!("column {j} has zero Qn scale on the screening rows"));
            column_scales.push(1.0);
        }
    }
    let y2: Vec<f64> = i2.iter().map(|&i| prof.profiled_y[i]).collect();
    let marg_seed = rng::derive_seed(opts.seed, &[0x4d41]);
    let fits = par::map_indexed(p, |j| {
        let xj: Vec<f64> = i2.iter().map(|&i| profiled_x[(i, j)]).collect();
        marginal_mm(&xj, &y2, opts.marginal_starts, rng::derive_seed(marg_seed, &[j as u64]))
    });
    let mut slopes = Vec::with_capacity(p);
    for (j, f) in fits.into_iter().enumerate() {
        match f? {
            Some(f) => slopes.push(f.slopes[0]),
            None => {
                warnings.push(format!("column {j} is degenerate on the screening rows; slope set to 0"));
                slopes.push(0.0);
            }
        }
    }
    debug_assert_eq!(profiled_x.nrows(), n);
    Ok(SolutionPath {
        method: Method::Rfpsis,
        d: factor.d,
        order: order_by_magnitude(&slopes),
        slopes,
        i1: prof.i1,
        i2,
        profiled_y: prof.profiled_y,
        profiled_x,
        column_scales,
        factor: Some(factor),
        report: Some(prof.report),
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenOptions {
    pub method: Method,
    /// Fixed dimension, or `None` for the PC criterion.
    pub d: Option<usize>,
    pub d_max: usize,
    pub rfpsis: RfpsisOptions,
}

impl Default for ScreenOptions {
    fn default() -> Self {
        Self { method: Method::Rfpsis, d: None, d_max: 10, rfpsis: RfpsisOptions::default() }
    }
}

/// Runs one method on raw data, applying the standardization it expects.
pub fn screen(x: &DMatrix<f64>, y: &DVector<f64>, opts: &ScreenOptions) -> Result<SolutionPath> {
    match opts.method {
        Method::Sis => {
            let (xs, yc) = standardize_classical(x, y)?;
            sis_path(&xs, &yc)
        }
        Method::Fpsis => {
            let (xs, yc) = standardize_classical(x, y)?;
            let d = opts.d.map_or(FpsisDimension::Auto { d_max: opts.d_max }, FpsisDimension::Fixed);
            fpsis_path(&xs, &yc, d)
        }
        Method::Rfpsis => {
            let mut ro = opts.rfpsis.clone();
            ro.factor.dimension = match opts.d {
                Some(d) => crate::factor::Dimension::Fixed(d),
                None => crate::factor::Dimension::Auto { d_max: opts.d_max },
            };
            rfpsis_path(x, y, &ro)
        }
    }
}
