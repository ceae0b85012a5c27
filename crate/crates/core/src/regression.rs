//! OLS, S-, M- and MM-regression with bisquare loss.
//!
//! Designs are passed as an `n x k` matrix plus an `intercept` flag; the
//! intercept column is implicit. One- and two-parameter problems (the marginal
//! screening hot loop) use closed-form weighted updates.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::rng;
use crate::robust::{mscale, Bisquare, BISQUARE_EFFICIENT_C, BISQUARE_S_C, S_SCALE_DELTA};

pub const COEF_TOL: f64 = 1e-8;
pub const M_STEP_MAX_ITER: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionFit {
    pub intercept: f64,
    pub slopes: DVector<f64>,
    pub scale: f64,
    /// Bisquare weights `W(r_i / scale)` at the final coefficients.
    pub weights: Vec<f64>,
    /// Tuning constant the weights were computed with (0 for OLS).
    pub tuning_c: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl RegressionFit {
    pub fn residuals(&self, x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
        let mut r = y - x * &self.slopes;
        r.add_scalar_mut(-self.intercept);
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SOptions {
    pub n_starts: usize,
    /// Refinement steps applied to every elemental start.
    pub n_refine: usize,
    /// Candidates iterated to convergence.
    pub n_best: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl SOptions {
    /// 500 starts, or 50 for problems with at most one slope.
    pub fn for_slopes(k: usize, seed: u64) -> Self {
        Self { n_starts: if k <= 1 { 50 } else { 500 }, n_refine: 2, n_best: 5, max_iter: 100, seed }
    }
}

struct Design<'a> {
    x: &'a DMatrix<f64>,
    intercept: bool,
}

impl Design<'_> {
    fn n(&self) -> usize {
        self.x.nrows()
    }

    fn k(&self) -> usize {
        self.x.ncols()
    }

    fn n_params(&self) -> usize {
        self.k() + usize::from(self.intercept)
    }

    /// Splits a full parameter vector into (intercept, slopes).
    fn split(&self, beta: &DVector<f64>) -> (f64, DVector<f64>) {
        if self.intercept {
            (beta[0], beta.rows(1, self.k()).into_owned())
        } else {
            (0.0, beta.clone())
        }
    }

    fn residuals_into(&self, y: &DVector<f64>, beta: &DVector<f64>, out: &mut Vec<f64>) {
        let (b0, slopes) = self.split(beta);
        out.clear();
        if self.k() == 1 {
            let s = slopes[0];
            out.extend(self.x.column(0).iter().zip(y.iter()).map(|(xi, yi)| yi - b0 - s * xi));
        } else {
            let fit = self.x * slopes;
            out.extend(y.iter().zip(fit.iter()).map(|(yi, fi)| yi - b0 - fi));
        }
    }

    /// Weighted least squares over the rows with nonzero weight; `None` when
    /// the weighted design is rank deficient.
    fn wls(&self, y: &DVector<f64>, w: &[f64]) -> Option<DVector<f64>> {
        let n = self.n();
        match (self.k(), self.intercept) {
            (0, true) => {
                let sw: f64 = w.iter().sum();
                (sw > 0.0)
                    .then(|| DVector::from_element(1, w.iter().zip(y.iter()).map(|(a, b)| a * b).sum::<f64>() / sw))
            }
            (1, false) => {
                let x = self.x.column(0);
                let (mut sxx, mut sxy, mut wmax) = (0.0, 0.0, 0.0f64);
                for i in 0..n {
                    sxx += w[i] * x[i] * x[i];
                    sxy += w[i] * x[i] * y[i];
                    wmax = wmax.max(w[i] * x[i].abs());
                }
                (sxx > 0.0 && wmax > 0.0).then(|| DVector::from_element(1, sxy / sxx))
            }
            (1, true) => {
                let x = self.x.column(0);
                let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    sw += w[i];
                    sx += w[i] * x[i];
                    sy += w[i] * y[i];
                }
                if !(sw > 0.0) {
                    return None;
                }
                let (mx, my) = (sx / sw, sy / sw);
                let (mut sxx, mut sxy) = (0.0, 0.0);
                for i in 0..n {
                    let dx = x[i] - mx;
                    sxx += w[i] * dx * dx;
                    sxy += w[i] * dx * (y[i] - my);
                }
                let spread: f64 = (0..n).map(|i| w[i] * (x[i] * x[i])).sum();
                if !(sxx > 1e-12 * spread) {
                    return None;
                }
                let b = sxy / sxx;
                Some(DVector::from_vec(vec![my - b * mx, b]))
            }
            _ => self.wls_general(y, w),
        }
    }

    fn wls_general(&self, y: &DVector<f64>, w: &[f64]) -> Option<DVector<f64>> {
        let rows: Vec<usize> = (0..self.n()).filter(|&i| w[i] > 0.0).collect();
        let q = self.n_params();
        if rows.len() < q {
            return None;
        }
        let off = usize::from(self.intercept);
        let mut a = DMatrix::<f64>::zeros(rows.len(), q);
        let mut b = DVector::<f64>::zeros(rows.len());
        for (r, &i) in rows.iter().enumerate() {
            let sw = w[i].sqrt();
            if self.intercept {
                a[(r, 0)] = sw;
            }
            for j in 0..self.k() {
                a[(r, j + off)] = sw * self.x[(i, j)];
            }
            b[r] = sw * y[i];
        }
        let xtx = a.tr_mul(&a);
        let xty = a.tr_mul(&b);
        let scale = xtx.diagonal().max();
        if !(scale > 0.0) {
            return None;
        }
        let chol = Cholesky::new(xtx)?;
        let l = chol.l_dirty();
        for j in 0..q {
            if l[(j, j)] * l[(j, j)] <= 1e-12 * scale {
                return None;
            }
        }
        Some(chol.solve(&xty))
    }

    fn fit(
        &self,
        beta: &DVector<f64>,
        scale: f64,
        weights: Vec<f64>,
        tuning_c: f64,
        iterations: usize,
        converged: bool,
    ) -> RegressionFit {
        let (intercept, slopes) = self.split(beta);
        RegressionFit { intercept, slopes, scale, weights, tuning_c, iterations, converged }
    }
}

fn check(x: &DMatrix<f64>, y: &DVector<f64>, intercept: bool) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch(format!("design has {} rows, response has {}", x.nrows(), y.len())));
    }
    if x.ncols() == 0 && !intercept {
        return Err(Error::Precondition("model has no parameters".into()));
    }
    if y.is_empty() {
        return Err(Error::EmptyInput);
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite value in regression input".into()));
    }
    Ok(())
}

fn bisquare_weights(rho: &Bisquare, r: &[f64], scale: f64) -> Vec<f64> {
    if scale > 0.0 {
        r.iter().map(|ri| rho.weight(ri / scale)).collect()
    } else {
        r.iter().map(|ri| if *ri == 0.0 { 1.0 } else { 0.0 }).collect()
    }
}

/// M-scale that treats residuals at rounding level as exact zeros.
fn s_scale(r: &[f64], tiny: f64) -> Result<f64> {
    let zeros = r.iter().filter(|v| v.abs() <= tiny).count() as f64;
    if zeros >= (1.0 - S_SCALE_DELTA) * r.len() as f64 {
        return Ok(0.0);
    }
    mscale(r, BISQUARE_S_C, S_SCALE_DELTA)
}

fn rel_change(old: &DVector<f64>, new: &DVector<f64>) -> f64 {
    let diff = (new - old).amax();
    diff / new.amax().max(old.amax()).max(f64::MIN_POSITIVE)
}

pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>, intercept: bool) -> Result<RegressionFit> {
    check(x, y, intercept)?;
    let design = Design { x, intercept };
    let q = design.n_params();
    if y.len() <= q {
        return Err(Error::InsufficientData { needed: q + 1, got: y.len() });
    }
    let beta = design.wls(y, &vec![1.0; y.len()]).ok_or(Error::RankDeficient)?;
    let mut r = Vec::new();
    design.residuals_into(y, &beta, &mut r);
    let rss: f64 = r.iter().map(|v| v * v).sum();
    let scale = (rss / (y.len() - q) as f64).sqrt();
    Ok(design.fit(&beta, scale, vec![1.0; y.len()], 0.0, 1, true))
}

/// Draws a nonsingular elemental subset and solves it exactly.
fn elemental_start(design: &Design, y: &DVector<f64>, seed: u64, start: usize) -> Option<DVector<f64>> {
    let n = design.n();
    let q = design.n_params();
    let mut w = vec![0.0; n];
    for attempt in 0..20u64 {
        let mut r = rng::stream(seed, &[start as u64, attempt]);
        let idx = sample(&mut r, n, q);
        for i in idx.iter() {
            w[i] = 1.0;
        }
        if let Some(beta) = design.wls(y, &w) {
            return Some(beta);
        }
        for i in idx.iter() {
            w[i] = 0.0;
        }
    }
    None
}

/// S-estimator with the bisquare M-scale (c = 1.547, delta = 0.5).
pub fn s_estimator(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    intercept: bool,
    n_starts: usize,
    seed: u64,
) -> Result<RegressionFit> {
    let opts = SOptions { n_starts, ..SOptions::for_slopes(x.ncols(), seed) };
    s_estimator_with(x, y, intercept, &opts)
}

pub fn s_estimator_with(x: &DMatrix<f64>, y: &DVector<f64>, intercept: bool, opts: &SOptions) -> Result<RegressionFit> {
    check(x, y, intercept)?;
    let design = Design { x, intercept };
    let q = design.n_params();
    let n = y.len();
    if n < 2 * q {
        return Err(Error::InsufficientData { needed: 2 * q, got: n });
    }
    let rho = Bisquare::s_scale();
    let delta = S_SCALE_DELTA;
    let mut r = Vec::with_capacity(n);
    let mut w = vec![0.0; n];
    let mut best: Vec<(f64, DVector<f64>)> = Vec::with_capacity(opts.n_best + 1);
    let n_best = opts.n_best.max(1);
    let tiny = 1e-12 * y.amax().max(f64::MIN_POSITIVE);

    for start in 0..opts.n_starts.max(1) {
        let Some(mut beta) = elemental_start(&design, y, opts.seed, start) else { continue };
        design.residuals_into(y, &beta, &mut r);
        let mut s = s_scale(&r, tiny)?;
        if s == 0.0 {
            // At least half the points lie exactly on this fit: the scale cannot go lower.
            let weights = r.iter().map(|v| if v.abs() <= tiny { 1.0 } else { 0.0 }).collect();
            return Ok(design.fit(&beta, 0.0, weights, BISQUARE_S_C, start + 1, true));
        }
        for _ in 0..opts.n_refine {
            for i in 0..n {
                w[i] = rho.weight(r[i] / s);
            }
            let Some(next) = design.wls(y, &w) else { break };
            beta = next;
            design.residuals_into(y, &beta, &mut r);
            // One-step scale update; the exact M-scale is only computed for contenders.
            let m = r.iter().map(|ri| rho.rho(ri / s)).sum::<f64>() / n as f64;
            s *= (m / delta).sqrt();
            if !(s > 0.0) {
                break;
            }
        }
        let contender = best.len() < n_best || {
            let worst = best[best.len() - 1].0;
            r.iter().map(|ri| rho.rho(ri / worst)).sum::<f64>() / (n as f64) < delta
        };
        if contender {
            let s_full = s_scale(&r, tiny)?;
            let pos = best.partition_point(|(b, _)| *b <= s_full);
            best.insert(pos, (s_full, beta));
            best.truncate(n_best);
        }
    }
    if best.is_empty() {
        return Err(Error::NoValidStart);
    }

    let mut winner: Option<(f64, DVector<f64>, usize, bool)> = None;
    for (mut s, mut beta) in best {
        let mut iterations = 0;
        let mut converged = false;
        design.residuals_into(y, &beta, &mut r);
        while iterations < opts.max_iter {
            if s == 0.0 {
                converged = true;
                break;
            }
            iterations += 1;
            for i in 0..n {
                w[i] = rho.weight(r[i] / s);
            }
            let Some(next) = design.wls(y, &w) else { break };
            let mut r_next = Vec::with_capacity(n);
            design.residuals_into(y, &next, &mut r_next);
            let s_next = s_scale(&r_next, tiny)?;
            if s_next > s {
                converged = true;
                break;
            }
            let change = rel_change(&beta, &next);
            beta = next;
            r = r_next;
            s = s_next;
            if change < COEF_TOL {
                converged = true;
                break;
            }
        }
        if winner.as_ref().is_none_or(|(ws, ..)| s < *ws) {
            winner = Some((s, beta, iterations, converged));
        }
    }
    let (s, beta, iterations, converged) = winner.expect("nonempty candidate list");
    design.residuals_into(y, &beta, &mut r);
    let weights = if s > 0.0 {
        bisquare_weights(&rho, &r, s)
    } else {
        r.iter().map(|v| if v.abs() <= tiny { 1.0 } else { 0.0 }).collect()
    };
    Ok(design.fit(&beta, s, weights, BISQUARE_S_C, iterations, converged))
}

/// IRWLS M-step at a fixed scale.
pub fn m_step(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    intercept: bool,
    init_intercept: f64,
    init_slopes: &DVector<f64>,
    init_scale: f64,
    c: f64,
) -> Result<RegressionFit> {
    m_step_traced(x, y, intercept, init_intercept, init_slopes, init_scale, c).map(|(fit, _)| fit)
}

/// [`m_step`] that also returns the objective `sum rho(r_i / scale)` after every iteration
/// (first entry: the starting value).
pub fn m_step_traced(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    intercept: bool,
    init_intercept: f64,
    init_slopes: &DVector<f64>,
    init_scale: f64,
    c: f64,
) -> Result<(RegressionFit, Vec<f64>)> {
    check(x, y, intercept)?;
    if init_slopes.len() != x.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{} initial slopes for {} columns",
            init_slopes.len(),
            x.ncols()
        )));
    }
    if !(init_scale > 0.0) {
        return Err(Error::ZeroScale("M-step initial scale"));
    }
    let rho = Bisquare::new(c)?;
    let design = Design { x, intercept };
    let n = y.len();
    let mut beta = if intercept {
        let mut b = DVector::zeros(x.ncols() + 1);
        b[0] = init_intercept;
        b.rows_mut(1, x.ncols()).copy_from(init_slopes);
        b
    } else {
        init_slopes.clone()
    };
    let mut r = Vec::with_capacity(n);
    design.residuals_into(y, &beta, &mut r);
    let objective = |r: &[f64]| r.iter().map(|ri| rho.rho(ri / init_scale)).sum::<f64>();
    let mut trace = vec![objective(&r)];
    let mut w = vec![0.0; n];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < M_STEP_MAX_ITER {
        iterations += 1;
        for i in 0..n {
            w[i] = rho.weight(r[i] / init_scale);
        }
        let next = design.wls(y, &w).ok_or(Error::RankDeficientWeighted)?;
        let change = rel_change(&beta, &next);
        beta = next;
        design.residuals_into(y, &beta, &mut r);
        trace.push(objective(&r));
        if change < COEF_TOL {
            converged = true;
            break;
        }
    }
    let weights = bisquare_weights(&rho, &r, init_scale);
    Ok((design.fit(&beta, init_scale, weights, c, iterations, converged), trace))
}

/// S-estimator followed by an M-step at the S-scale.
pub fn mm_estimator(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    intercept: bool,
    efficiency_c: f64,
    n_starts: usize,
    seed: u64,
) -> Result<RegressionFit> {
    let opts = SOptions { n_starts, ..SOptions::for_slopes(x.ncols(), seed) };
    mm_estimator_with(x, y, intercept, efficiency_c, &opts)
}

pub fn mm_estimator_with(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    intercept: bool,
    efficiency_c: f64,
    opts: &SOptions,
) -> Result<RegressionFit> {
    let s = s_estimator_with(x, y, intercept, opts)?;
    if s.scale == 0.0 {
        return Ok(s);
    }
    let mut fit = m_step(x, y, intercept, s.intercept, &s.slopes, s.scale, efficiency_c)?;
    fit.iterations += s.iterations;
    Ok(fit)
}

/// MM fit with the default 95%-efficiency constant and start schedule.
pub fn mm_default(x: &DMatrix<f64>, y: &DVector<f64>, intercept: bool, seed: u64) -> Result<RegressionFit> {
    mm_estimator_with(x, y, intercept, BISQUARE_EFFICIENT_C, &SOptions::for_slopes(x.ncols(), seed))
}

pub fn standardized_residuals(fit: &RegressionFit, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    if !(fit.scale > 0.0) {
        return Err(Error::ZeroScale("regression scale"));
    }
    Ok(fit.residuals(x, y) / fit.scale)
}
