//! Robust latent factor model: LTS subspace fit, Yeo-Johnson based orthogonal
//! outlier flagging, score reweighting with MCD and dimension selection.
//!
//! Subspace fits work on any data matrix whose rows live in the coordinates of
//! the fit. The pipeline runs them on the SVD pre-projection and maps the
//! result back to predictor space at the end; distances are identical in both.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{mahalanobis_sq, mean_rows, smallest_indices, sym_sqrt_pair};
use crate::mcd::{self, McdOptions};
use crate::robust::{chi2_quantile, median, normal_quantile, qn_scale};
use crate::{par, rng};

/// Below this many rows or columns a subset fit uses a dense eigensolver.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObsFlag {
    Regular,
    PcOutlier,
    OcOutlier,
}

/// How the LTS trimming count `h` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum HRule {
    /// `floor((n - d + 2) / 2)`.
    MaxBreakdown,
    /// `ceil(fraction * n)`.
    Fraction(f64),
    Fixed(usize),
}

impl HRule {
    pub fn resolve(self, n: usize, d: usize) -> usize {
        match self {
            HRule::MaxBreakdown => (n + 2).saturating_sub(d) / 2,
            HRule::Fraction(f) => (f * n as f64).ceil() as usize,
            HRule::Fixed(h) => h,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Dimension {
    Auto { d_max: usize },
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorOptions {
    pub dimension: Dimension,
    pub h: HRule,
    pub lts_starts: usize,
    pub lts_best: usize,
    pub lts_max_steps: usize,
    pub mcd_starts: usize,
    pub seed: u64,
}

impl Default for FactorOptions {
    fn default() -> Self {
        Self {
            dimension: Dimension::Auto { d_max: 10 },
            h: HRule::MaxBreakdown,
            lts_starts: 100,
            lts_best: 10,
            lts_max_steps: 100,
            mcd_starts: 500,
            seed: 0,
        }
    }
}

/// Affine subspace `center + span(basis)` with orthonormal basis columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Subspace {
    pub center: DVector<f64>,
    pub basis: DMatrix<f64>,
}

impl Subspace {
    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    /// Scores `(x_i - center)' basis` of every row.
    pub fn scores(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        centered(x, &self.center) * &self.basis
    }

    /// Squared orthogonal distances of every row.
    pub fn residual_sq(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let xc = centered(x, &self.center);
        let fitted = (&xc * &self.basis) * self.basis.transpose();
        (0..x.nrows()).map(|i| (xc.row(i) - fitted.row(i)).norm_squared()).collect()
    }
}

fn centered(x: &DMatrix<f64>, center: &DVector<f64>) -> DMatrix<f64> {
    let mut xc = x.clone();
    for (j, mut col) in xc.column_iter_mut().enumerate() {
        col.add_scalar_mut(-center[j]);
    }
    xc
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preprojection {
    /// `n x r` coordinates of the centered rows.
    pub xstar: DMatrix<f64>,
    /// `p x r` orthonormal basis of the row space of the centered data.
    pub p: DMatrix<f64>,
    pub xbar: DVector<f64>,
}

impl Preprojection {
    pub fn rank(&self) -> usize {
        self.xstar.ncols()
    }

    /// Maps a subspace in projected coordinates back to predictor space.
    pub fn lift(&self, s: &Subspace) -> Subspace {
        Subspace { center: &self.p * &s.center + &self.xbar, basis: &self.p * &s.basis }
    }
}

/// Reduces the centered data to its row space with an SVD.
pub fn svd_preproject(x: &DMatrix<f64>) -> Result<Preprojection> {
    let (n, p) = x.shape();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let xbar = DVector::from_iterator(p, x.column_iter().map(|c| c.mean()));
    let xc = centered(x, &xbar);
    // Factor the narrower side: the SVD of the n x p matrix via its transpose when p < n.
    let svd = xc.clone().svd(true, true);
    let (u, vt) = (svd.u.expect("requested U"), svd.v_t.expect("requested V'"));
    let s = &svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let s_max = order.first().map_or(0.0, |&k| s[k]);
    let tol = s_max * n.max(p) as f64 * f64::EPSILON;
    let keep: Vec<usize> = order.into_iter().filter(|&k| s[k] > tol && s_max > 0.0).collect();
    let r = keep.len();
    let mut xstar = DMatrix::zeros(n, r);
    let mut proj = DMatrix::zeros(p, r);
    for (c, &k) in keep.iter().enumerate() {
        xstar.set_column(c, &(u.column(k) * s[k]));
        proj.set_column(c, &vt.row(k).transpose());
    }
    Ok(Preprojection { xstar, p: proj, xbar })
}

/// Least-squares rank-`d` affine fit to the given rows.
pub fn fit_subspace(x: &DMatrix<f64>, rows: &[usize], d: usize) -> Result<Subspace> {
    let m = rows.len();
    let r = x.ncols();
    if d == 0 || d > r || m <= d {
        return Err(Error::RankDeficientSubset { dim: d });
    }
    let center = mean_rows(x, rows);
    let y = DMatrix::from_fn(m, r, |i, j| x[(rows[i], j)] - center[j]);
    let total = y.norm_squared();
    if !(total > 0.0) {
        return Err(Error::RankDeficientSubset { dim: d });
    }
    let basis = exact_basis(&y, d, total)?;
    Ok(Subspace { center, basis })
}

fn exact_basis(y: &DMatrix<f64>, d: usize, total: f64) -> Result<DMatrix<f64>> {
    let (m, r) = y.shape();
    let rank_tol = 1e-12 * total;
    if m < r {
        // Left singular vectors from the m x m Gram matrix, mapped to the right ones.
        let (vals, vecs) = eigen_desc(y * y.transpose());
        if vals[d - 1] <= rank_tol {
            return Err(Error::RankDeficientSubset { dim: d });
        }
        let mut v = y.tr_mul(&vecs.columns(0, d));
        for (j, val) in vals.iter().take(d).enumerate() {
            v.column_mut(j).scale_mut(1.0 / val.sqrt());
        }
        Ok(reorthonormalize(v))
    } else {
        let (vals, vecs) = eigen_desc(y.tr_mul(y));
        if vals[d - 1] <= rank_tol {
            return Err(Error::RankDeficientSubset { dim: d });
        }
        Ok(vecs.columns(0, d).into_owned())
    }
}

fn eigen_desc(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vecs = DMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    (vals, vecs)
}

fn reorthonormalize(v: DMatrix<f64>) -> DMatrix<f64> {
    let d = v.ncols();
    let qr = v.clone().qr();
    let q = qr.q();
    let rdiag = qr.r().diagonal();
    // Keep the orientation of the input columns.
    let mut q = q.columns(0, d).into_owned();
    for j in 0..d {
        if rdiag[j] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

#[derive(Debug, Clone, PartialEq)]
pub struct LtsState {
    /// Sorted indices of the `h` rows with the smallest residuals under the fit.
    pub subset: Vec<usize>,
    /// Sum of the `h` smallest squared orthogonal distances.
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct LtsFit {
    pub subspace: Subspace,
    /// `n x d` scores of all rows.
    pub scores: DMatrix<f64>,
    pub state: LtsState,
    /// Objective after every accepted concentration step of the winning start.
    pub trace: Vec<f64>,
}

fn trimmed_sum(res: &[f64], h: usize) -> (Vec<usize>, f64) {
    let subset = smallest_indices(res, h);
    let obj = subset.iter().map(|&i| res[i]).sum();
    (subset, obj)
}

struct Candidate {
    fit: Subspace,
    subset: Vec<usize>,
    objective: f64,
    trace: Vec<f64>,
}

fn concentrate(x: &DMatrix<f64>, mut cand: Candidate, h: usize, steps: usize) -> Candidate {
    let d = cand.fit.dim();
    for _ in 0..steps {
        let Ok(next) = fit_subspace(x, &cand.subset, d) else { break };
        let (subset, objective) = trimmed_sum(&next.residual_sq(x), h);
        if objective >= cand.objective {
            break;
        }
        cand.trace.push(objective);
        let fixed = subset == cand.subset;
        cand = Candidate { fit: next, subset, objective, trace: cand.trace };
        if fixed {
            break;
        }
    }
    cand
}

/// LTS estimate of a `d`-dimensional affine subspace (FAST-LTS schedule).
pub fn fit_lts_subspace(xstar: &DMatrix<f64>, d: usize, h: usize, n_starts: usize, seed: u64) -> Result<LtsFit> {
    fit_lts_subspace_with(xstar, d, h, n_starts, 10, 100, seed)
}

pub fn fit_lts_subspace_with(
    xstar: &DMatrix<f64>,
    d: usize,
    h: usize,
    n_starts: usize,
    n_best: usize,
    max_steps: usize,
    seed: u64,
) -> Result<LtsFit> {
    let (n, r) = xstar.shape();
    let lo = (n + 2).saturating_sub(d) / 2;
    if h < lo || h >= n {
        return Err(Error::BadTrim { h, lo, hi: n });
    }
    if d == 0 || d > r || d + 1 > h {
        return Err(Error::RankDeficientSubset { dim: d });
    }
    let starts = par::map_indexed(n_starts.max(1), |s| {
        let mut g = rng::stream(seed, &[s as u64]);
        let rows = sample(&mut g, n, d + 1).into_vec();
        let fit = fit_subspace(xstar, &rows, d).ok()?;
        let (subset, objective) = trimmed_sum(&fit.residual_sq(xstar), h);
        Some(concentrate(xstar, Candidate { fit, subset, objective, trace: vec![objective] }, h, 2))
    });
    let mut cands: Vec<Candidate> = starts.into_iter().flatten().collect();
    if cands.is_empty() {
        return Err(Error::RankDeficientSubset { dim: d });
    }
    cands.sort_by(|a, b| a.objective.total_cmp(&b.objective).then_with(|| a.subset.cmp(&b.subset)));
    cands.dedup_by(|a, b| a.subset == b.subset);
    cands.truncate(n_best.max(1));
    let refined = par::map_indexed(cands.len(), |i| {
        let c = &cands[i];
        let copy =
            Candidate { fit: c.fit.clone(), subset: c.subset.clone(), objective: c.objective, trace: c.trace.clone() };
        concentrate(xstar, copy, h, max_steps)
    });
    let best = refined
        .into_iter()
        .min_by(|a, b| a.objective.total_cmp(&b.objective).then_with(|| a.subset.cmp(&b.subset)))
        .expect("nonempty");
    let scores = best.fit.scores(xstar);
    Ok(LtsFit {
        scores,
        state: LtsState { subset: best.subset, objective: best.objective },
        trace: best.trace,
        subspace: best.fit,
    })
}

/// Yeo-Johnson transformation.
pub fn transform_yeo_johnson(lambda: f64, d: f64) -> f64 {
    if d >= 0.0 {
        if lambda.abs() < 1e-12 {
            d.ln_1p()
        } else {
            (lambda * d.ln_1p()).exp_m1() / lambda
        }
    } else if (lambda - 2.0).abs() < 1e-12 {
        -(-d).ln_1p()
    } else {
        let a = 2.0 - lambda;
        -(a * (-d).ln_1p()).exp_m1() / a
    }
}

/// Grid of candidate transformation parameters, `0, 0.02, ..., 1`.
pub fn lambda_grid() -> impl Iterator<Item = f64> {
    (0..=50).map(|k| k as f64 * 0.02)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LambdaSelection {
    pub lambda_opt: f64,
    /// `psi(lambda_opt, d_i)` for every observation.
    pub transformed: Vec<f64>,
    /// Robustly standardized input `d_i`.
    pub standardized: Vec<f64>,
    /// Median and Qn used to standardize the input.
    pub location: f64,
    pub scale: f64,
    /// Trimmed log-likelihood at every grid point.
    pub profile: Vec<(f64, f64)>,
}

/// Trimmed log-likelihood of the transformed standardized distances.
pub fn trimmed_likelihood(lambda: f64, standardized: &[f64], h: usize) -> Result<f64> {
    let psi: Vec<f64> = standardized.iter().map(|&d| transform_yeo_johnson(lambda, d)).collect();
    let mu = median(&psi)?;
    let sigma = qn_scale(&psi)?;
    if !(sigma > 0.0) {
        return Err(Error::ZeroScale("transformed orthogonal distances"));
    }
    let c = -0.5 * (2.0 * std::f64::consts::PI).ln() - sigma.ln();
    let mut l: Vec<f64> = psi
        .iter()
        .zip(standardized)
        .map(|(&t, &d)| c - (t - mu).powi(2) / (2.0 * sigma * sigma) + (lambda - 1.0) * d.signum() * d.abs().ln_1p())
        .collect();
    // Sum of the h smallest contributions.
    l.sort_by(|a, b| a.total_cmp(b));
    Ok(l[..h.min(l.len())].iter().sum())
}

pub fn select_lambda(od: &[f64], h: usize) -> Result<LambdaSelection> {
    if od.len() < 4 {
        return Err(Error::InsufficientData { needed: 4, got: od.len() });
    }
    let location = median(od)?;
    let scale = qn_scale(od)?;
    if !(scale > 0.0) {
        return Err(Error::ZeroScale("orthogonal distances"));
    }
    let standardized: Vec<f64> = od.iter().map(|v| (v - location) / scale).collect();
    let mut profile = Vec::with_capacity(51);
    let mut best = (f64::NEG_INFINITY, 0.0);
    for lambda in lambda_grid() {
        let v = trimmed_likelihood(lambda, &standardized, h)?;
        profile.push((lambda, v));
        if v > best.0 {
            best = (v, lambda);
        }
    }
    let lambda_opt = best.1;
    let transformed = standardized.iter().map(|&d| transform_yeo_johnson(lambda_opt, d)).collect();
    Ok(LambdaSelection { lambda_opt, transformed, standardized, location, scale, profile })
}

/// Cutoff on the transformed orthogonal distance.
pub fn od_cutoff() -> f64 {
    normal_quantile(0.975).expect("valid probability")
}

#[derive(Debug, Clone)]
pub struct SubspaceReweight {
    pub subspace: Subspace,
    pub lambda: LambdaSelection,
    /// Orthogonal distances under the refitted subspace.
    pub od: Vec<f64>,
    /// Refreshed distances standardized by their own median/Qn and transformed with `lambda_opt`.
    pub transformed: Vec<f64>,
    pub oc: Vec<bool>,
}

/// Flags OC outliers from the transformed distances, refits the subspace by
/// least squares on the remaining rows and flags again with the refreshed distances.
pub fn reweight_subspace(x: &DMatrix<f64>, fit: &Subspace, h: usize) -> Result<SubspaceReweight> {
    let n = x.nrows();
    let d = fit.dim();
    let od0: Vec<f64> = fit.residual_sq(x).into_iter().map(f64::sqrt).collect();
    let lambda = select_lambda(&od0, h)?;
    let cut = od_cutoff();
    let keep: Vec<usize> = (0..n).filter(|&i| lambda.transformed[i] <= cut).collect();
    if keep.len() < d + 1 {
        return Err(Error::AllFlagged { kept: keep.len(), needed: d + 1 });
    }
    let subspace = fit_subspace(x, &keep, d)?;
    let od: Vec<f64> = subspace.residual_sq(x).into_iter().map(f64::sqrt).collect();
    let loc = median(&od)?;
    let scale = qn_scale(&od)?;
    if !(scale > 0.0) {
        return Err(Error::ZeroScale("refitted orthogonal distances"));
    }
    let transformed: Vec<f64> =
        od.iter().map(|v| transform_yeo_johnson(lambda.lambda_opt, (v - loc) / scale)).collect();
    let oc = transformed.iter().map(|&t| t > cut).collect();
    Ok(SubspaceReweight { subspace, lambda, od, transformed, oc })
}

#[derive(Debug, Clone)]
pub struct ScoreReweight {
    /// Weighted location of the scores.
    pub mu_z: DVector<f64>,
    /// Weighted scatter of the scores.
    pub sigma_z: DMatrix<f64>,
    /// Rows with both a small robust distance and no OC flag.
    pub weights: Vec<bool>,
    pub robust_distances: Vec<f64>,
}

/// Reweighted location/scatter of the scores; rows flagged in `oc` get weight zero.
pub fn reweight_scores(scores: &DMatrix<f64>, oc: &[bool], mcd_starts: usize, mcd_seed: u64) -> Result<ScoreReweight> {
    let (n, d) = scores.shape();
    // OC rows have no meaningful scores; a tight cluster of them would capture the MCD subset.
    let inner: Vec<usize> = (0..n).filter(|&i| !oc[i]).collect();
    let sub = DMatrix::from_fn(inner.len(), d, |i, j| scores[(inner[i], j)]);
    let opts = McdOptions { h: None, n_starts: mcd_starts, seed: mcd_seed, ..McdOptions::default() };
    let fit = mcd::fit_mcd_with(&sub, &opts).map_err(|e| match e {
        Error::DegenerateScatter { .. } => Error::SingularScatter,
        e => e,
    })?;
    let chol = fit.scatter.clone().cholesky().ok_or(Error::SingularScatter)?;
    let robust_distances: Vec<f64> = mahalanobis_sq(scores, &fit.location, &chol).into_iter().map(f64::sqrt).collect();
    let c_sd = chi2_quantile(0.975, d)?.sqrt();
    let weights: Vec<bool> = (0..n).map(|i| robust_distances[i] <= c_sd && !oc[i]).collect();
    let rows: Vec<usize> = (0..n).filter(|&i| weights[i]).collect();
    if rows.len() <= d {
        return Err(Error::SingularScatter);
    }
    let mu_z = mean_rows(scores, &rows);
    let sigma_z = crate::linalg::scatter_rows(scores, &rows, &mu_z, rows.len() as f64);
    Ok(ScoreReweight { mu_z, sigma_z, weights, robust_distances })
}

/// Robust factor model fit in predictor space.
#[derive(Debug, Clone)]
pub struct FactorFit {
    pub mu: DVector<f64>,
    /// `p x d` loadings.
    pub loadings: DMatrix<f64>,
    /// `n x d` standardized scores.
    pub scores: DMatrix<f64>,
    pub d: usize,
    pub h: usize,
    pub od: Vec<f64>,
    pub sd: Vec<f64>,
    pub transformed_od: Vec<f64>,
    pub flags: Vec<ObsFlag>,
    pub lambda_opt: f64,
    pub od_cutoff: f64,
    pub sd_cutoff: f64,
    /// LTS objective of the initial fit.
    pub lts_objective: f64,
    /// `(d, PC(d))` for every dimension tried when the dimension was selected.
    pub pc_values: Vec<(usize, f64)>,
}

impl FactorFit {
    pub fn regular_rows(&self) -> Vec<usize> {
        (0..self.flags.len()).filter(|&i| self.flags[i] == ObsFlag::Regular).collect()
    }

    /// `x - 1 mu' - Z B'`.
    pub fn profiled(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = centered(x, &self.mu);
        out.gemm(-1.0, &self.scores, &self.loadings.transpose(), 1.0);
        out
    }

    pub fn diagnostics(&self) -> Vec<DiagnosticRow> {
        (0..self.flags.len())
            .map(|i| DiagnosticRow {
                index: i,
                od: self.od[i],
                sd: self.sd[i],
                transformed_od: self.transformed_od[i],
                flag: self.flags[i],
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub index: usize,
    pub od: f64,
    pub sd: f64,
    pub transformed_od: f64,
    pub flag: ObsFlag,
}

/// A robust fit in projected coordinates, before lifting to predictor space.
struct ProjectedFit {
    center: DVector<f64>,
    loadings: DMatrix<f64>,
    scores: DMatrix<f64>,
    h: usize,
    od: Vec<f64>,
    sd: Vec<f64>,
    transformed_od: Vec<f64>,
    flags: Vec<ObsFlag>,
    lambda_opt: f64,
    lts_objective: f64,
}

fn fit_projected(xs: &DMatrix<f64>, d: usize, opts: &FactorOptions) -> Result<ProjectedFit> {
    let n = xs.nrows();
    let h = opts.h.resolve(n, d);
    let lts_seed = rng::derive_seed(opts.seed, &[0x004c_5453, d as u64]);
    let lts = fit_lts_subspace_with(xs, d, h, opts.lts_starts, opts.lts_best, opts.lts_max_steps, lts_seed)?;
    let rw = reweight_subspace(xs, &lts.subspace, h)?;
    let z0 = rw.subspace.scores(xs);
    let mcd_seed = rng::derive_seed(opts.seed, &[0x004d_4344, d as u64]);
    let sr = reweight_scores(&z0, &rw.oc, opts.mcd_starts, mcd_seed)?;
    let (sqrt, inv_sqrt) = sym_sqrt_pair(&sr.sigma_z)?;
    let center = &rw.subspace.center + &rw.subspace.basis * &sr.mu_z;
    let loadings = &rw.subspace.basis * &sqrt;
    let mut zc = z0;
    for i in 0..n {
        for j in 0..d {
            zc[(i, j)] -= sr.mu_z[j];
        }
    }
    let scores = zc * inv_sqrt;
    let od: Vec<f64> = (0..n)
        .map(|i| {
            let fitted = &loadings * scores.row(i).transpose();
            (0..xs.ncols()).map(|j| (xs[(i, j)] - center[j] - fitted[j]).powi(2)).sum::<f64>().sqrt()
        })
        .collect();
    let sd: Vec<f64> = (0..n).map(|i| scores.row(i).norm()).collect();
    let c_sd = chi2_quantile(0.975, d)?.sqrt();
    let flags = (0..n)
        .map(|i| {
            if rw.oc[i] {
                ObsFlag::OcOutlier
            } else if sd[i] > c_sd {
                ObsFlag::PcOutlier
            } else {
                ObsFlag::Regular
            }
        })
        .collect();
    Ok(ProjectedFit {
        center,
        loadings,
        scores,
        h,
        od,
        sd,
        transformed_od: rw.transformed,
        flags,
        lambda_opt: rw.lambda.lambda_opt,
        lts_objective: lts.state.objective,
    })
}

/// Weighted dimension criterion over regular rows.
fn pc_criterion(xs: &DMatrix<f64>, fit: &ProjectedFit, p: usize) -> Option<f64> {
    let regular: Vec<usize> = (0..xs.nrows()).filter(|&i| fit.flags[i] == ObsFlag::Regular).collect();
    let m = regular.len() as f64;
    if m == 0.0 {
        return None;
    }
    let resid: f64 = regular.iter().map(|&i| fit.od[i] * fit.od[i]).sum();
    let spread: f64 =
        regular.iter().map(|&i| (0..xs.ncols()).map(|j| (xs[(i, j)] - fit.center[j]).powi(2)).sum::<f64>()).sum();
    Some(pc_value(resid, spread, m, p as f64, fit.scores.ncols()))
}

/// `resid / (n p) + spread / (n p) * d (n + p) / (n p) * log(n p / (n + p))`.
pub fn pc_value(resid: f64, spread: f64, n: f64, p: f64, d: usize) -> f64 {
    let np = n * p;
    resid / np + spread / np * d as f64 * ((n + p) / np) * (np / (n + p)).ln()
}

fn lift(pre: &Preprojection, f: ProjectedFit, pc_values: Vec<(usize, f64)>) -> Result<FactorFit> {
    let d = f.scores.ncols();
    Ok(FactorFit {
        mu: &pre.p * &f.center + &pre.xbar,
        loadings: &pre.p * &f.loadings,
        scores: f.scores,
        d,
        h: f.h,
        od: f.od,
        sd: f.sd,
        transformed_od: f.transformed_od,
        flags: f.flags,
        lambda_opt: f.lambda_opt,
        od_cutoff: od_cutoff(),
        sd_cutoff: chi2_quantile(0.975, d)?.sqrt(),
        lts_objective: f.lts_objective,
        pc_values,
    })
}

/// Fits every dimension `1..=d_max` and keeps the minimizer of the PC criterion.
pub fn select_dimension(x: &DMatrix<f64>, d_max: usize, opts: &FactorOptions) -> Result<(usize, FactorFit)> {
    let (n, p) = x.shape();
    if d_max == 0 || d_max + 2 > n.min(p) {
        return Err(Error::Precondition(format!("d_max = {d_max} must lie in [1, min(n, p) - 2]")));
    }
    let pre = svd_preproject(x)?;
    let fits = par::map_indexed(d_max, |k| fit_projected(&pre.xstar, k + 1, opts));
    let mut pc_values = Vec::new();
    let mut best: Option<(f64, ProjectedFit)> = None;
    for fit in fits.into_iter().flatten() {
        let d = fit.scores.ncols();
        let Some(v) = pc_criterion(&pre.xstar, &fit, p) else { continue };
        pc_values.push((d, v));
        if best.as_ref().is_none_or(|(b, _)| v < *b) {
            best = Some((v, fit));
        }
    }
    let (_, fit) = best.ok_or(Error::NoValidDimension)?;
    let d = fit.scores.ncols();
    Ok((d, lift(&pre, fit, pc_values)?))
}

/// Full robust factor model fit on (already standardized) predictors.
pub fn fit_factor_model(x: &DMatrix<f64>, opts: &FactorOptions) -> Result<FactorFit> {
    match opts.dimension {
        Dimension::Auto { d_max } => select_dimension(x, d_max, opts).map(|(_, f)| f),
        Dimension::Fixed(d) => {
            let pre = svd_preproject(x)?;
            let fit = fit_projected(&pre.xstar, d, opts)?;
            let pc = pc_criterion(&pre.xstar, &fit, x.ncols()).map(|v| vec![(d, v)]).unwrap_or_default();
            lift(&pre, fit, pc)
        }
    }
}

/// Classical factor estimate: the `d` leading eigenvectors of `x x'` as scores.
pub fn classical_scores(x: &DMatrix<f64>, d: usize) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    if d > n {
        return Err(Error::Precondition(format!("d = {d} exceeds n = {n}")));
    }
    let (_, vecs) = eigen_desc(x * x.transpose());
    Ok(vecs.columns(0, d).into_owned())
}

/// Unweighted PC criterion for the classical fit, minimized over `1..=d_max`.
pub fn classical_dimension(x: &DMatrix<f64>, d_max: usize) -> Result<usize> {
    let (n, p) = x.shape();
    if d_max == 0 || d_max > n.min(p) {
        return Err(Error::Precondition(format!("d_max = {d_max} must lie in [1, min(n, p)]")));
    }
    let (vals, _) = eigen_desc(x * x.transpose());
    let total: f64 = x.norm_squared();
    let mut best = (f64::INFINITY, 1);
    for d in 1..=d_max {
        let resid = (total - vals[..d].iter().sum::<f64>()).max(0.0);
        let v = pc_value(resid, total, n as f64, p as f64, d);
        if v < best.0 {
            best = (v, d);
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn normal(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut g = rng::stream(seed, &[77]);
        DMatrix::from_fn(n, p, |_, _| g.sample(StandardNormal))
    }

    fn factor_data(n: usize, p: usize, d: usize, noise: f64, seed: u64) -> DMatrix<f64> {
        let z = normal(n, d, seed);
        let b = normal(p, d, seed + 1);
        &z * b.transpose() + normal(n, p, seed + 2) * noise
    }

    #[test]
    fn preprojection_reconstructs() {
        let x = normal(50, 1000, 1);
        let pre = svd_preproject(&x).unwrap();
        assert_eq!(pre.rank(), 49);
        let mut rec = &pre.xstar * pre.p.transpose();
        for mut row in rec.row_iter_mut() {
            row += pre.xbar.transpose();
        }
        assert!((rec - &x).amax() < 1e-8);
        let id = pre.p.tr_mul(&pre.p);
        assert!((id - DMatrix::identity(49, 49)).amax() < 1e-10);
    }

    #[test]
    fn preprojection_low_rank_and_constant() {
        let x = factor_data(20, 100, 2, 0.0, 4);
        let pre = svd_preproject(&x).unwrap();
        assert_eq!(pre.rank(), 2);
        let rec = &pre.xstar * pre.p.transpose();
        let mut err = 0.0f64;
        for i in 0..20 {
            for j in 0..100 {
                err = err.max((rec[(i, j)] + pre.xbar[j] - x[(i, j)]).abs());
            }
        }
        assert!(err < 1e-10);
        let same = DMatrix::from_fn(5, 3, |_, j| j as f64);
        assert_eq!(svd_preproject(&same).unwrap().rank(), 0);
    }

    #[test]
    fn yeo_johnson_branches() {
        let e1 = std::f64::consts::E - 1.0;
        assert!((transform_yeo_johnson(1.0, 3.7) - 3.7).abs() < 1e-12);
        assert!((transform_yeo_johnson(1.0, -2.2) + 2.2).abs() < 1e-12);
        assert!((transform_yeo_johnson(0.0, e1) - 1.0).abs() < 1e-12);
        assert!((transform_yeo_johnson(2.0, -e1) + 1.0).abs() < 1e-12);
        // Continuity in lambda and at d = 0.
        assert!((transform_yeo_johnson(1e-9, 2.0) - transform_yeo_johnson(0.0, 2.0)).abs() < 1e-8);
        assert_eq!(transform_yeo_johnson(0.3, 0.0), 0.0);
        assert!(transform_yeo_johnson(0.3, -1e-12).abs() < 1e-11);
    }

    #[test]
    fn lambda_selection_examples() {
        let mut g = rng::stream(3, &[]);
        let z: Vec<f64> = (0..500).map(|_| g.sample(StandardNormal)).collect();
        let std = {
            let m = median(&z).unwrap();
            let s = qn_scale(&z).unwrap();
            z.iter().map(|v| (v - m) / s).collect::<Vec<_>>()
        };
        assert!(trimmed_likelihood(1.0, &std, 375).unwrap() >= trimmed_likelihood(0.0, &std, 375).unwrap());

        let skew: Vec<f64> = (0..500).map(|_| g.sample::<f64, _>(StandardNormal).exp() - 1.0).collect();
        let sel = select_lambda(&skew, 375).unwrap();
        assert!(sel.lambda_opt < 0.5, "{}", sel.lambda_opt);
        assert!(matches!(select_lambda(&[2.0; 10], 6), Err(Error::ZeroScale(_))));
    }

    /// Minimum over all h-subsets of the residual sum of squares of their own LS fit.
    fn exhaustive_lts(x: &DMatrix<f64>, d: usize, h: usize) -> f64 {
        let n = x.nrows();
        let mut best = f64::INFINITY;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != h {
                continue;
            }
            let rows: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
            let m = rows.len() as f64;
            let c: Vec<f64> = (0..x.ncols()).map(|j| rows.iter().map(|&i| x[(i, j)]).sum::<f64>() / m).collect();
            let y = DMatrix::from_fn(rows.len(), x.ncols(), |a, j| x[(rows[a], j)] - c[j]);
            let eig = SymmetricEigen::new(y.tr_mul(&y));
            let mut v: Vec<f64> = eig.eigenvalues.iter().copied().collect();
            v.sort_by(|a, b| a.total_cmp(b));
            best = best.min(v[..x.ncols() - d].iter().sum());
        }
        best
    }

    #[test]
    fn lts_matches_exhaustive_on_small_problem() {
        for seed in 0..5 {
            let mut x = normal(8, 2, 100 + seed);
            x[(0, 1)] += 6.0;
            let fit = fit_lts_subspace(&x, 1, 5, 200, seed).unwrap();
            let oracle = exhaustive_lts(&x, 1, 5);
            assert!(fit.state.objective <= oracle + 1e-8, "{} vs {}", fit.state.objective, oracle);
            assert!(fit.trace.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn lts_noiseless_and_far_row() {
        let x = factor_data(30, 10, 2, 0.0, 9);
        let fit = fit_lts_subspace(&x, 2, 20, 20, 1).unwrap();
        assert!(fit.state.objective < 1e-16);
        assert!(fit.subspace.residual_sq(&x).iter().all(|r| r.sqrt() < 1e-8));

        let mut x = factor_data(30, 10, 2, 0.1, 10);
        for j in 0..10 {
            x[(7, j)] += if j % 2 == 0 { 1e6 } else { -1e6 };
        }
        let fit = fit_lts_subspace(&x, 2, 29, 50, 1).unwrap();
        assert!(!fit.state.subset.contains(&7));
    }

    #[test]
    fn lts_rejects_bad_trim() {
        let x = normal(10, 3, 1);
        assert!(matches!(fit_lts_subspace(&x, 1, 10, 5, 1), Err(Error::BadTrim { .. })));
        assert!(matches!(fit_lts_subspace(&x, 1, 4, 5, 1), Err(Error::BadTrim { .. })));
    }

    #[test]
    fn reweight_subspace_flags_displaced_rows() {
        let n = 100;
        let mut x = factor_data(n, 20, 2, 0.3, 30);
        let clean = fit_subspace(&x, &(0..n).collect::<Vec<_>>(), 2).unwrap();
        let normal_dir = {
            let mut v = normal(20, 1, 2).column(0).into_owned();
            v -= &clean.basis * (clean.basis.tr_mul(&v));
            v.normalize()
        };
        for i in 0..5 {
            for j in 0..20 {
                x[(i, j)] += 50.0 * normal_dir[j];
            }
        }
        let initial = fit_lts_subspace(&x, 2, 50, 100, 3).unwrap().subspace;
        let rw = reweight_subspace(&x, &initial, 50).unwrap();
        assert!((0..5).all(|i| rw.oc[i]));
        let angle = |a: &DMatrix<f64>| (a * a.transpose() - &clean.basis * clean.basis.transpose()).norm();
        assert!(angle(&rw.subspace.basis) < angle(&initial.basis));
    }

    #[test]
    fn reweight_subspace_all_flagged() {
        // Half the rows on a line, the other half scattered: with tiny h nothing survives.
        let x = DMatrix::from_fn(
            6,
            2,
            |i, j| if i < 3 { (i * (j + 1)) as f64 } else { 1e3 * (i as f64).powi(j as i32 + 1) },
        );
        let fit = fit_subspace(&x, &[0, 1, 2], 1).unwrap();
        match reweight_subspace(&x, &fit, 4) {
            Err(Error::AllFlagged { .. }) | Ok(_) | Err(Error::ZeroScale(_)) => {}
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn factor_fit_invariants() {
        let x = factor_data(120, 60, 2, 1.0, 40);
        let opts =
            FactorOptions { dimension: Dimension::Fixed(2), mcd_starts: 100, seed: 3, ..FactorOptions::default() };
        let fit = fit_factor_model(&x, &opts).unwrap();
        // Stored distances are recomputable from (mu, B, Z).
        for i in 0..120 {
            let r = x.row(i).transpose() - &fit.mu - &fit.loadings * fit.scores.row(i).transpose();
            assert!((r.norm() - fit.od[i]).abs() < 1e-8);
            assert!((fit.scores.row(i).norm() - fit.sd[i]).abs() < 1e-12);
        }
        let flagged = fit.flags.iter().filter(|f| **f != ObsFlag::Regular).count();
        assert!(flagged <= 20, "{flagged}");
    }

    #[test]
    fn score_weighted_covariance_is_identity() {
        let x = factor_data(150, 40, 2, 1.0, 41);
        let pre = svd_preproject(&x).unwrap();
        let opts =
            FactorOptions { dimension: Dimension::Fixed(2), mcd_starts: 100, seed: 1, ..FactorOptions::default() };
        let lts = fit_lts_subspace(&pre.xstar, 2, 75, 50, 2).unwrap();
        let rw = reweight_subspace(&pre.xstar, &lts.subspace, 75).unwrap();
        let z0 = rw.subspace.scores(&pre.xstar);
        let sr = reweight_scores(&z0, &rw.oc, opts.mcd_starts, 5).unwrap();
        let (sqrt, inv) = sym_sqrt_pair(&sr.sigma_z).unwrap();
        let mut z = z0.clone();
        for mut row in z.row_iter_mut() {
            row -= sr.mu_z.transpose();
        }
        let z = z * inv;
        let rows: Vec<usize> = (0..150).filter(|&i| sr.weights[i]).collect();
        let m = mean_rows(&z, &rows);
        let c = crate::linalg::scatter_rows(&z, &rows, &m, rows.len() as f64);
        assert!(m.amax() < 1e-10);
        assert!((c - DMatrix::identity(2, 2)).amax() < 1e-10);
        // Fitted values are unchanged by the change of basis.
        let before = &z0 * rw.subspace.basis.transpose();
        let mut after = &z * (&rw.subspace.basis * &sqrt).transpose();
        let shift = &rw.subspace.basis * &sr.mu_z;
        for mut row in after.row_iter_mut() {
            row += shift.transpose();
        }
        assert!((before - after).amax() < 1e-8);
    }

    #[test]
    fn noiseless_rank_two_dimension() {
        let x = factor_data(60, 30, 2, 0.0, 50);
        let opts = FactorOptions {
            dimension: Dimension::Auto { d_max: 3 },
            mcd_starts: 50,
            lts_starts: 30,
            seed: 2,
            ..FactorOptions::default()
        };
        match select_dimension(&x, 3, &opts) {
            Ok((d, fit)) => {
                assert!(d <= 2);
                assert!(fit.od.iter().all(|v| *v < 1e-8));
            }
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn pure_noise_dimension_is_total() {
        let x = normal(60, 40, 8);
        let opts = FactorOptions { mcd_starts: 50, lts_starts: 30, seed: 2, ..FactorOptions::default() };
        let (d, fit) = select_dimension(&x, 3, &opts).unwrap();
        assert!((1..=3).contains(&d));
        assert_eq!(fit.pc_values.len(), 3);
    }

    #[test]
    fn orthogonal_invariance_of_distances() {
        let x = factor_data(50, 6, 1, 0.5, 60);
        let q = normal(6, 6, 61).qr().q();
        let xq = &x * &q;
        let opts = FactorOptions {
            dimension: Dimension::Fixed(1),
            mcd_starts: 50,
            lts_starts: 40,
            seed: 9,
            ..FactorOptions::default()
        };
        let a = fit_factor_model(&x, &opts).unwrap();
        let b = fit_factor_model(&xq, &opts).unwrap();
        for i in 0..50 {
            assert!((a.od[i] - b.od[i]).abs() < 1e-6);
        }
    }
}
