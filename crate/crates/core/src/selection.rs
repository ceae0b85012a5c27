//! Final model choice along a solution path with robust BIC-type criteria.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regression::{m_step, RegressionFit};
use crate::robust::{mscale, Bisquare, BISQUARE_EFFICIENT_C, BISQUARE_S_C, S_SCALE_DELTA};
use crate::screening::SolutionPath;

/// Floor applied before taking the log of a weighted residual sum of squares.
pub const WRSS_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Criterion {
    Bic,
    Ebic,
    Fpbic,
    RBic,
    REbic,
    RFpbic,
}

impl Criterion {
    pub const ALL: [Criterion; 6] =
        [Criterion::Bic, Criterion::Ebic, Criterion::Fpbic, Criterion::RBic, Criterion::REbic, Criterion::RFpbic];

    pub fn is_reordered(self) -> bool {
        matches!(self, Criterion::RBic | Criterion::REbic | Criterion::RFpbic)
    }

    /// Per-predictor penalty weight `P`; the penalty is `size * P / n`.
    pub fn penalty_weight(self, n: usize, p: usize) -> f64 {
        let (ln, lp) = ((n as f64).ln(), (p as f64).ln());
        match self {
            Criterion::Bic | Criterion::RBic => ln,
            Criterion::Ebic | Criterion::REbic => ln + lp,
            Criterion::Fpbic | Criterion::RFpbic => ln * lp,
        }
    }

    pub fn penalty(self, size: usize, n: usize, p: usize) -> f64 {
        size as f64 * self.penalty_weight(n, p) / n as f64
    }

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Bic => "BIC",
            Criterion::Ebic => "EBIC",
            Criterion::Fpbic => "FPBIC",
            Criterion::RBic => "R-BIC",
            Criterion::REbic => "R-EBIC",
            Criterion::RFpbic => "R-FPBIC",
        }
    }
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Ok(match key.as_str() {
            "bic" => Criterion::Bic,
            "ebic" => Criterion::Ebic,
            "fpbic" => Criterion::Fpbic,
            "rbic" => Criterion::RBic,
            "rebic" => Criterion::REbic,
            "rfpbic" => Criterion::RFpbic,
            _ => return Err(Error::Domain(format!("unknown criterion '{s}'"))),
        })
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionValue {
    pub criterion: Criterion,
    /// Predictor indices in the order their coefficients were entered.
    pub model: Vec<usize>,
    pub value: f64,
    pub wrss: f64,
    pub coefs: Vec<f64>,
}

/// Refit of the first `k` path predictors over the rows `i2` of the path.
#[derive(Debug, Clone)]
pub struct Refit {
    pub predictors: Vec<usize>,
    /// Weights are aligned with `path.i2`.
    pub fit: RegressionFit,
}

pub fn default_k_max(n: usize, p: usize) -> usize {
    (n / 2).min(100).min(p)
}

fn design(path: &SolutionPath, predictors: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
    let i2 = &path.i2;
    let x = DMatrix::from_fn(i2.len(), predictors.len(), |i, j| path.profiled_x[(i2[i], predictors[j])]);
    let y = DVector::from_iterator(i2.len(), i2.iter().map(|&i| path.profiled_y[i]));
    (x, y)
}

fn fixed_scale_fit(x: &DMatrix<f64>, y: &DVector<f64>, init: DVector<f64>) -> Result<RegressionFit> {
    let r: Vec<f64> = (y - x * &init).iter().copied().collect();
    let scale = mscale(&r, BISQUARE_S_C, S_SCALE_DELTA)?;
    if scale > 0.0 {
        return m_step(x, y, false, 0.0, &init, scale, BISQUARE_EFFICIENT_C);
    }
    // Exact fit of at least half the rows: keep the warm start.
    let tiny = 1e-12 * y.amax().max(1.0);
    Ok(RegressionFit {
        intercept: 0.0,
        slopes: init,
        scale: 0.0,
        weights: r.iter().map(|v| if v.abs() <= tiny { 1.0 } else { 0.0 }).collect(),
        tuning_c: BISQUARE_EFFICIENT_C,
        iterations: 0,
        converged: true,
    })
}

/// M-step refits of the nested path models of size `1..=k_max`.
///
/// Stops early (with a warning) at the first rank-deficient weighted design.
pub fn refit_path(path: &SolutionPath, k_max: usize) -> Result<(Vec<Refit>, Vec<String>)> {
    let p = path.slopes.len();
    if k_max == 0 || k_max > p || 2 * k_max > path.i2.len() {
        return Err(Error::Precondition(format!(
            "k_max = {k_max} must lie in 1..=min(|i2|/2, p) = {}",
            (path.i2.len() / 2).min(p)
        )));
    }
    let mut out = Vec::with_capacity(k_max);
    let mut warnings = Vec::new();
    for k in 1..=k_max {
        let predictors = path.order[..k].to_vec();
        let (x, y) = design(path, &predictors);
        let init = DVector::from_iterator(k, predictors.iter().map(|&j| path.slopes[j]));
        match fixed_scale_fit(&x, &y, init) {
            Ok(fit) => out.push(Refit { predictors, fit }),
            Err(Error::RankDeficientWeighted) => {
                warnings.push(format!("weighted design rank deficient at k = {k}; path truncated at k = {}", k - 1));
                break;
            }
            Err(e) => return Err(e),
        }
    }
    if out.is_empty() {
        return Err(Error::RankDeficientWeighted);
    }
    Ok((out, warnings))
}

/// `sum_i w_i (y_i - x_i' coefs)^2`.
pub fn wrss(coefs: &DVector<f64>, weights: &[f64], x: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let r = y - x * coefs;
    r.iter().zip(weights).map(|(ri, wi)| wi * ri * ri).sum()
}

/// WRSS of the empty model: bisquare weights at the M-scale of the profiled response.
pub fn empty_model_wrss(path: &SolutionPath) -> Result<f64> {
    let y: Vec<f64> = path.i2.iter().map(|&i| path.profiled_y[i]).collect();
    let s = mscale(&y, BISQUARE_S_C, S_SCALE_DELTA)?;
    if !(s > 0.0) {
        return Ok(0.0);
    }
    let w = Bisquare::efficient();
    Ok(y.iter().map(|v| w.weight(v / s) * v * v).sum())
}

/// One nested candidate: the refit of size `k` truncated to its `l` largest coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub k: usize,
    pub l: usize,
    pub model: Vec<usize>,
    pub coefs: Vec<f64>,
    pub wrss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub k: usize,
    pub wrss: f64,
    /// Criterion values in [`Criterion::ALL`] order; R-variants minimize over `l`.
    pub values: [f64; 6],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub chosen: Vec<CriterionValue>,
    pub table: Vec<TableRow>,
    pub warnings: Vec<String>,
}

impl Selection {
    pub fn get(&self, c: Criterion) -> Option<&CriterionValue> {
        self.chosen.iter().find(|v| v.criterion == c)
    }
}

/// Plain path candidates (`l = k`) and, for every `k`, the nested sub-models
/// after reordering the refit coefficients by magnitude.
pub fn candidates(path: &SolutionPath, refits: &[Refit], empty_wrss: f64) -> (Vec<Candidate>, Vec<Candidate>) {
    let empty = Candidate { k: 0, l: 0, model: Vec::new(), coefs: Vec::new(), wrss: empty_wrss };
    let mut plain = vec![empty.clone()];
    let mut nested = vec![empty];
    for r in refits {
        let k = r.predictors.len();
        let (x, y) = design(path, &r.predictors);
        let w = &r.fit.weights;
        let coefs = &r.fit.slopes;
        plain.push(Candidate {
            k,
            l: k,
            model: r.predictors.clone(),
            coefs: coefs.iter().copied().collect(),
            wrss: wrss(coefs, w, &x, &y),
        });
        let mut pos: Vec<usize> = (0..k).collect();
        pos.sort_by(|&a, &b| coefs[b].abs().total_cmp(&coefs[a].abs()).then(a.cmp(&b)));
        let mut resid = y.clone();
        for l in 1..=k {
            let j = pos[l - 1];
            resid.axpy(-coefs[j], &x.column(j), 1.0);
            let value: f64 = resid.iter().zip(w).map(|(ri, wi)| wi * ri * ri).sum();
            nested.push(Candidate {
                k,
                l,
                model: pos[..l].iter().map(|&q| r.predictors[q]).collect(),
                coefs: pos[..l].iter().map(|&q| coefs[q]).collect(),
                wrss: value,
            });
        }
    }
    (plain, nested)
}

pub fn criterion_value(c: Criterion, wrss: f64, size: usize, n: usize, p: usize) -> f64 {
    wrss.max(WRSS_FLOOR).ln() + c.penalty(size, n, p)
}

fn argmin(c: Criterion, cands: &[Candidate], n: usize, p: usize) -> (&Candidate, f64) {
    let mut best: Option<(&Candidate, f64)> = None;
    for cand in cands {
        let v = criterion_value(c, cand.wrss, cand.model.len(), n, p);
        let better = match best {
            None => true,
            Some((b, bv)) => v
                .total_cmp(&bv)
                .then(cand.model.len().cmp(&b.model.len()))
                .then_with(|| cand.model.cmp(&b.model))
                .is_lt(),
        };
        if better {
            best = Some((cand, v));
        }
    }
    best.expect("candidate list always holds the empty model")
}

/// Evaluates the requested criteria over the refits; `n` and `p` enter the penalties.
pub fn select_model(
    path: &SolutionPath,
    refits: &[Refit],
    criteria: &[Criterion],
    n: usize,
    p: usize,
) -> Result<Selection> {
    if refits.is_empty() {
        return Err(Error::EmptyInput);
    }
    let empty = empty_model_wrss(path)?;
    let (plain, nested) = candidates(path, refits, empty);
    let mut warnings = Vec::new();
    if plain.iter().chain(&nested).any(|c| c.wrss < WRSS_FLOOR) {
        warnings.push("perfect fit: WRSS floored before taking logs".to_string());
    }
    let chosen = criteria
        .iter()
        .map(|&c| {
            let pool = if c.is_reordered() { &nested } else { &plain };
            let (cand, value) = argmin(c, pool, n, p);
            CriterionValue {
                criterion: c,
                model: cand.model.clone(),
                value,
                wrss: cand.wrss,
                coefs: cand.coefs.clone(),
            }
        })
        .collect();
    let table = plain
        .iter()
        .map(|pc| {
            let mut values = [0.0; 6];
            for (slot, c) in values.iter_mut().zip(Criterion::ALL) {
                *slot = if c.is_reordered() {
                    nested
                        .iter()
                        .filter(|q| q.k == pc.k)
                        .map(|q| criterion_value(c, q.wrss, q.l, n, p))
                        .fold(f64::INFINITY, f64::min)
                } else {
                    criterion_value(c, pc.wrss, pc.k, n, p)
                };
            }
            TableRow { k: pc.k, wrss: pc.wrss, values }
        })
        .collect();
    Ok(Selection { chosen, table, warnings })
}
