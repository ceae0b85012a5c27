//! Reweighted Minimum Covariance Determinant estimation (FAST-MCD schedule).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::index::sample;
use statrs::function::gamma::gamma_lr;

use crate::error::{Error, Result};
use crate::linalg::{mahalanobis_sq, mean_rows, scatter_rows, smallest_indices};
use crate::robust::{chi2_quantile, median_in_place};
use crate::{par, rng};

#[derive(Debug, Clone, PartialEq)]
pub struct McdOptions {
    /// Subset size; `None` means `(n + d + 1) / 2`.
    pub h: Option<usize>,
    pub n_starts: usize,
    /// Candidates carried from the two-step screening to full convergence.
    pub n_best: usize,
    pub max_csteps: usize,
    pub seed: u64,
}

impl Default for McdOptions {
    fn default() -> Self {
        Self { h: None, n_starts: 500, n_best: 10, max_csteps: 100, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct McdFit {
    /// Reweighted location.
    pub location: DVector<f64>,
    /// Reweighted, consistency-corrected scatter.
    pub scatter: DMatrix<f64>,
    pub raw_location: DVector<f64>,
    /// Scatter of the optimal h-subset times the median-ratio consistency factor.
    pub raw_scatter: DMatrix<f64>,
    /// Sorted indices of the optimal h-subset.
    pub raw_subset: Vec<usize>,
    /// Determinant of the optimal subset's covariance (divisor h).
    pub raw_determinant: f64,
    /// Observations kept by the reweighting step.
    pub reweighted: Vec<bool>,
    /// Mahalanobis distances under the reweighted estimates.
    pub robust_distances: Vec<f64>,
    pub h: usize,
}

pub fn default_h(n: usize, d: usize) -> usize {
    (n + d).div_ceil(2)
}

pub fn fit_mcd(scores: &DMatrix<f64>, h_mcd: usize, n_starts: usize, seed: u64) -> Result<McdFit> {
    fit_mcd_with(scores, &McdOptions { h: Some(h_mcd), n_starts, seed, ..McdOptions::default() })
}

struct SubsetFit {
    center: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    det: f64,
}

/// Mean and covariance (divisor = subset size) of `rows`; `None` when singular.
fn subset_fit(x: &DMatrix<f64>, rows: &[usize]) -> Option<SubsetFit> {
    let center = mean_rows(x, rows);
    let cov = scatter_rows(x, rows, &center, rows.len() as f64);
    let scale = cov.diagonal().max();
    if !(scale > 0.0) {
        return None;
    }
    let chol = Cholesky::new(cov)?;
    let l = chol.l_dirty();
    let mut det = 1.0;
    for j in 0..x.ncols() {
        let v = l[(j, j)] * l[(j, j)];
        if v <= 1e-12 * scale {
            return None;
        }
        det *= v;
    }
    Some(SubsetFit { center, chol, det })
}

/// Runs concentration steps from `subset` and returns the final subset with the
/// determinant after every step (first entry: the starting subset).
///
/// Stops when the subset repeats, the determinant stops decreasing or the
/// subset becomes singular. Errors if the starting subset is singular.
pub fn concentrate(x: &DMatrix<f64>, subset: Vec<usize>, max_steps: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let d = x.ncols();
    let mut fit = subset_fit(x, &subset).ok_or(Error::DegenerateScatter { dim: d })?;
    let mut current = subset;
    let mut dets = vec![fit.det];
    let h = current.len();
    for _ in 0..max_steps {
        let dist = mahalanobis_sq(x, &fit.center, &fit.chol);
        let next = smallest_indices(&dist, h);
        if next == current {
            break;
        }
        let Some(next_fit) = subset_fit(x, &next) else {
            // An exact-fit subset has determinant zero; nothing can beat it.
            dets.push(0.0);
            return Ok((next, dets));
        };
        if next_fit.det >= fit.det {
            break;
        }
        dets.push(next_fit.det);
        current = next;
        fit = next_fit;
    }
    Ok((current, dets))
}

fn initial_subset(x: &DMatrix<f64>, h: usize, seed: u64, start: usize) -> Option<Vec<usize>> {
    let (n, d) = x.shape();
    let mut rng = rng::stream(seed, &[0x006d_6364, start as u64]);
    let perm: Vec<usize> = sample(&mut rng, n, n.min(d + 1 + 64)).into_vec();
    let mut size = d + 1;
    loop {
        let rows: Vec<usize> = perm[..size].to_vec();
        if let Some(fit) = subset_fit(x, &rows) {
            let dist = mahalanobis_sq(x, &fit.center, &fit.chol);
            return Some(smallest_indices(&dist, h));
        }
        size += 1;
        if size > perm.len() {
            return None;
        }
    }
}

pub fn fit_mcd_with(x: &DMatrix<f64>, opts: &McdOptions) -> Result<McdFit> {
    let (n, d) = x.shape();
    if d == 0 || n <= d {
        return Err(Error::InsufficientData { needed: d + 1, got: n });
    }
    let lo = default_h(n, d);
    let h = opts.h.unwrap_or(lo);
    if h < lo || h > n {
        return Err(Error::BadSubsetSize { h, lo, hi: n });
    }

    let (best, best_det) = if h == n {
        let all: Vec<usize> = (0..n).collect();
        let fit = subset_fit(x, &all).ok_or(Error::DegenerateScatter { dim: d })?;
        (all, fit.det)
    } else {
        let starts = par::map_indexed(opts.n_starts.max(1), |s| {
            let subset = initial_subset(x, h, opts.seed, s)?;
            concentrate(x, subset, 2).ok().map(|(sub, dets)| (*dets.last().unwrap(), sub))
        });
        let mut cands: Vec<(f64, Vec<usize>)> = starts.into_iter().flatten().collect();
        if cands.is_empty() {
            return Err(Error::DegenerateScatter { dim: d });
        }
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        cands.dedup_by(|a, b| a.1 == b.1);
        cands.truncate(opts.n_best.max(1));
        let refined = par::map_indexed(cands.len(), |i| {
            concentrate(x, cands[i].1.clone(), opts.max_csteps).ok().map(|(sub, dets)| (*dets.last().unwrap(), sub))
        });
        let mut refined: Vec<(f64, Vec<usize>)> = refined.into_iter().flatten().collect();
        refined.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        let (det, sub) = refined.into_iter().next().ok_or(Error::DegenerateScatter { dim: d })?;
        (sub, det)
    };
    if !(best_det > 0.0) {
        return Err(Error::DegenerateScatter { dim: d });
    }
    let raw = subset_fit(x, &best).ok_or(Error::DegenerateScatter { dim: d })?;
    let raw_cov = scatter_rows(x, &best, &raw.center, h as f64);

    // Consistency at the normal model via the ratio of the median distance.
    let mut d2 = mahalanobis_sq(x, &raw.center, &raw.chol);
    let factor = median_in_place(&mut d2) / chi2_quantile(0.5, d)?;
    if !(factor > 0.0) {
        return Err(Error::DegenerateScatter { dim: d });
    }
    let raw_scatter = raw_cov * factor;
    let raw_chol = Cholesky::new(raw_scatter.clone()).ok_or(Error::DegenerateScatter { dim: d })?;
    let raw_d2 = mahalanobis_sq(x, &raw.center, &raw_chol);

    let q = chi2_quantile(0.975, d)?;
    let reweighted: Vec<bool> = raw_d2.iter().map(|&v| v <= q).collect();
    let kept: Vec<usize> = (0..n).filter(|&i| reweighted[i]).collect();
    let location = mean_rows(x, &kept);
    let cons = 0.975 / gamma_lr(0.5 * (d + 2) as f64, 0.5 * q);
    let scatter = scatter_rows(x, &kept, &location, kept.len() as f64) * cons;
    let chol = Cholesky::new(scatter.clone()).ok_or(Error::DegenerateScatter { dim: d })?;
    let robust_distances = mahalanobis_sq(x, &location, &chol).into_iter().map(f64::sqrt).collect();

    Ok(McdFit {
        location,
        scatter,
        raw_location: raw.center,
        raw_scatter,
        raw_subset: best,
        raw_determinant: best_det,
        reweighted,
        robust_distances,
        h,
    })
}
