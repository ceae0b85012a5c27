//! Data generation, contamination schemes and screening metrics for simulation studies.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::robust::quantile_sorted;
use crate::screening::{screen, Method, ScreenOptions, SolutionPath};
use crate::selection::{default_k_max, refit_path, select_model, Criterion};
use crate::{par, rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LeverageKind {
    None,
    PcGood,
    PcBad,
    OcGood,
    OcBad,
}

impl std::str::FromStr for LeverageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Ok(match key.as_str() {
            "none" => LeverageKind::None,
            "pcgood" | "pclmg" => LeverageKind::PcGood,
            "pcbad" | "pclmb" => LeverageKind::PcBad,
            "ocgood" | "oclmg" => LeverageKind::OcGood,
            "ocbad" | "oclmb" => LeverageKind::OcBad,
            _ => return Err(Error::Domain(format!("unknown leverage kind '{s}'"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RowLabel {
    Regular,
    PcGood,
    PcBad,
    OcGood,
    OcBad,
    Vertical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub n: usize,
    pub p: usize,
    pub d: usize,
    /// Signal-to-noise ratio.
    pub c: f64,
    pub eps_leverage: f64,
    pub eps_vertical: f64,
    pub leverage_kind: LeverageKind,
    pub seed: u64,
    pub m_true: usize,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        Self {
            n: 200,
            p: 1000,
            d: 2,
            c: 5.0,
            eps_leverage: 0.0,
            eps_vertical: 0.0,
            leverage_kind: LeverageKind::None,
            seed: 0,
            m_true: 8,
        }
    }
}

impl SimulationSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::SpecInvalid(msg));
        if !(self.c > 0.0 && self.c.is_finite()) {
            return bad(format!("c must be positive, got {}", self.c));
        }
        if !(0.0..1.0).contains(&self.eps_leverage) || !(0.0..1.0).contains(&self.eps_vertical) {
            return bad("contamination fractions must lie in [0, 1)".into());
        }
        if self.eps_leverage + self.eps_vertical >= 0.5 {
            return bad(format!("total contamination {} must stay below 0.5", self.eps_leverage + self.eps_vertical));
        }
        if self.eps_leverage > 0.0 && self.leverage_kind == LeverageKind::None {
            return bad("eps_leverage > 0 needs a leverage kind".into());
        }
        if self.n <= 2 * self.d {
            return bad(format!("n = {} must exceed 2d = {}", self.n, 2 * self.d));
        }
        if self.m_true == 0 || self.m_true > self.p {
            return bad(format!("m_true = {} must lie in 1..=p", self.m_true));
        }
        Ok(())
    }

    pub fn n_leverage(&self) -> usize {
        if self.leverage_kind == LeverageKind::None {
            0
        } else {
            (self.eps_leverage * self.n as f64).round() as usize
        }
    }

    pub fn n_vertical(&self) -> usize {
        (self.eps_vertical * self.n as f64).round() as usize
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedDataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub theta0: DVector<f64>,
    pub true_model: Vec<usize>,
    pub labels: Vec<RowLabel>,
    /// Factor scores used for each row (shifted for PC outliers).
    pub z: DMatrix<f64>,
    /// Full model errors `z' alpha0 + e`.
    pub errors: DVector<f64>,
    pub sigma_eps: f64,
}

fn normal_matrix(rows: usize, cols: usize, g: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| g.sample(StandardNormal))
}

pub fn generate(spec: &SimulationSpec) -> Result<SimulatedDataset> {
    spec.validate()?;
    let SimulationSpec { n, p, d, .. } = *spec;
    let stream = |tag: u64| rng::stream(spec.seed, &[0x0053_494d, tag]);

    let mut z = normal_matrix(n, d, &mut stream(1));
    let b = normal_matrix(p, d, &mut stream(2));
    let noise = normal_matrix(n, p, &mut stream(3));
    let mut x = &z * b.transpose() + &noise;

    let mut g = stream(4);
    let flip = Bernoulli::new(0.4).expect("valid probability");
    let floor = 4.0 * (n as f64).ln() / (n as f64).sqrt();
    let mut theta0 = DVector::zeros(p);
    for j in 0..spec.m_true {
        let sign = if flip.sample(&mut g) { -1.0 } else { 1.0 };
        let rb: f64 = g.sample(StandardNormal);
        theta0[j] = sign * (floor + rb.abs());
    }
    let true_model: Vec<usize> = (0..spec.m_true).collect();

    let signal = &x * &theta0;
    let mean = signal.mean();
    let var = signal.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sigma_eps = (var / spec.c).sqrt();
    let alpha0 = DVector::from_element(d, 0.8 * sigma_eps * std::f64::consts::SQRT_2);
    let mut g = stream(5);
    let e_tilde = DVector::from_fn(n, |_, _| 0.6 * sigma_eps * g.sample::<f64, _>(StandardNormal));

    let mut labels = vec![RowLabel::Regular; n];
    let n_lev = spec.n_leverage();
    let n_vert = spec.n_vertical();
    let mut g = stream(6);
    let picked = sample(&mut g, n, n_lev + n_vert).into_vec();
    let (lev_rows, vert_rows) = picked.split_at(n_lev);
    let mut lev_rows = lev_rows.to_vec();
    let mut vert_rows = vert_rows.to_vec();
    lev_rows.sort_unstable();
    vert_rows.sort_unstable();

    let mut g = stream(7);
    let label = match spec.leverage_kind {
        LeverageKind::None => RowLabel::Regular,
        LeverageKind::PcGood => RowLabel::PcGood,
        LeverageKind::PcBad => RowLabel::PcBad,
        LeverageKind::OcGood => RowLabel::OcGood,
        LeverageKind::OcBad => RowLabel::OcBad,
    };
    let oc_cols = (0.2 * p as f64).round() as usize;
    for &i in &lev_rows {
        labels[i] = label;
        match spec.leverage_kind {
            LeverageKind::PcGood | LeverageKind::PcBad => {
                for k in 0..d {
                    z[(i, k)] = 5.0 + g.sample::<f64, _>(StandardNormal);
                }
                let row = z.row(i) * b.transpose() + noise.row(i);
                x.set_row(i, &row);
            }
            LeverageKind::OcGood | LeverageKind::OcBad => {
                for j in 0..p {
                    let mu = if j < oc_cols { 10.0 } else { 0.0 };
                    x[(i, j)] = mu + g.sample::<f64, _>(StandardNormal);
                }
            }
            LeverageKind::None => {}
        }
    }
    for &i in &vert_rows {
        labels[i] = RowLabel::Vertical;
    }

    let errors = &z * &alpha0 + &e_tilde;
    let mut y = &x * &theta0 + &errors;

    let regular: Vec<f64> = (0..n).filter(|&i| labels[i] == RowLabel::Regular).map(|i| y[i]).collect();
    let y_min = regular.iter().copied().fold(f64::INFINITY, f64::min);
    let y_max = regular.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mid = 0.5 * (y_min + y_max);
    for i in 0..n {
        if matches!(labels[i], RowLabel::PcBad | RowLabel::OcBad | RowLabel::Vertical) {
            let mu = if y[i] <= mid { y_max } else { y_min };
            y[i] = Normal::new(mu, 1.0).expect("unit variance").sample(&mut g);
        }
    }

    Ok(SimulatedDataset { x, y, theta0, true_model, labels, z, errors, sigma_eps })
}

/// `MMS(m)` for `m = 1..=|true_model|`: the shortest path prefix holding `m` true predictors.
pub fn minimal_model_size(order: &[usize], true_model: &[usize]) -> Result<Vec<usize>> {
    let p = order.len();
    let mut is_true = vec![false; p];
    for &j in true_model {
        if j >= p {
            return Err(Error::TrueModelNotInPath);
        }
        is_true[j] = true;
    }
    let mut out = Vec::with_capacity(true_model.len());
    for (k, &j) in order.iter().enumerate() {
        if j < p && std::mem::take(&mut is_true[j]) {
            out.push(k + 1);
        }
    }
    if out.len() != true_model.len() {
        return Err(Error::TrueModelNotInPath);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOptions {
    pub methods: Vec<Method>,
    pub screen: ScreenOptions,
    /// Criteria evaluated on every path; empty skips model selection.
    pub criteria: Vec<Criterion>,
    pub k_max: Option<usize>,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self {
            methods: vec![Method::Sis, Method::Fpsis, Method::Rfpsis],
            screen: ScreenOptions::default(),
            criteria: Vec::new(),
            k_max: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub criterion: Criterion,
    pub size: usize,
    pub tp: usize,
    pub fp: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub method: Method,
    pub mms: Vec<usize>,
    pub d_hat: Option<usize>,
    pub selections: Vec<SelectionOutcome>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmsSummary {
    pub method: Method,
    pub m: usize,
    pub median: f64,
    pub q95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub method: Method,
    pub criterion: Criterion,
    pub mean_tp: f64,
    pub mean_fp: f64,
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub spec: SimulationSpec,
    pub replicates: Vec<ReplicateResult>,
    pub mms: Vec<MmsSummary>,
    pub selection: Vec<SelectionSummary>,
}

impl SimulationReport {
    pub fn mms_of(&self, method: Method, m: usize) -> Vec<usize> {
        self.replicates.iter().filter(|r| r.method == method && r.error.is_none()).map(|r| r.mms[m - 1]).collect()
    }

    pub fn summary(&self, method: Method, m: usize) -> Option<&MmsSummary> {
        self.mms.iter().find(|s| s.method == method && s.m == m)
    }

    pub fn selection_of(&self, method: Method, c: Criterion) -> Option<&SelectionSummary> {
        self.selection.iter().find(|s| s.method == method && s.criterion == c)
    }
}

/// Type-7 median and 95% quantile.
pub fn median_q95(values: &[usize]) -> (f64, f64) {
    let mut v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
    v.sort_by(f64::total_cmp);
    (quantile_sorted(&v, 0.5), quantile_sorted(&v, 0.95))
}

/// Selection outcomes of one path against the true model.
pub fn evaluate_selection(
    path: &SolutionPath,
    criteria: &[Criterion],
    k_max: usize,
    n: usize,
    p: usize,
    true_model: &[usize],
) -> Result<Vec<SelectionOutcome>> {
    let k_max = k_max.min(path.i2.len() / 2).min(p);
    let (refits, _) = refit_path(path, k_max)?;
    let sel = select_model(path, &refits, criteria, n, p)?;
    Ok(sel
        .chosen
        .iter()
        .map(|v| {
            let tp = v.model.iter().filter(|j| true_model.contains(j)).count();
            SelectionOutcome { criterion: v.criterion, size: v.model.len(), tp, fp: v.model.len() - tp }
        })
        .collect())
}

fn run_replicate(spec: &SimulationSpec, opts: &ExperimentOptions, r: usize) -> Vec<ReplicateResult> {
    let rep_spec = SimulationSpec { seed: rng::derive_seed(spec.seed, &[0x0052_4550, r as u64]), ..spec.clone() };
    let data = match generate(&rep_spec) {
        Ok(d) => d,
        Err(e) => {
            return opts
                .methods
                .iter()
                .map(|&method| ReplicateResult {
                    replicate: r,
                    method,
                    mms: Vec::new(),
                    d_hat: None,
                    selections: Vec::new(),
                    error: Some(e.to_string()),
                })
                .collect()
        }
    };
    let k_max = opts.k_max.unwrap_or_else(|| default_k_max(spec.n, spec.p));
    opts.methods
        .iter()
        .map(|&method| {
            let mut so = opts.screen.clone();
            so.method = method;
            so.rfpsis.seed = rng::derive_seed(rep_spec.seed, &[0x004d_4554, method as u64]);
            let outcome = screen(&data.x, &data.y, &so).and_then(|path| {
                let mms = minimal_model_size(&path.order, &data.true_model)?;
                let selections = if opts.criteria.is_empty() {
                    Vec::new()
                } else {
                    evaluate_selection(&path, &opts.criteria, k_max, spec.n, spec.p, &data.true_model)?
                };
                Ok((mms, path.factor.as_ref().map(|f| f.d), selections))
            });
            match outcome {
                Ok((mms, d_hat, selections)) => {
                    ReplicateResult { replicate: r, method, mms, d_hat, selections, error: None }
                }
                Err(e) => ReplicateResult {
                    replicate: r,
                    method,
                    mms: Vec::new(),
                    d_hat: None,
                    selections: Vec::new(),
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

/// Runs `n_replicates` independent replicates; failed replicates are recorded, not fatal.
pub fn run_experiment(
    spec: &SimulationSpec,
    opts: &ExperimentOptions,
    n_replicates: usize,
) -> Result<SimulationReport> {
    if n_replicates == 0 {
        return Err(Error::Precondition("n_replicates must be at least 1".into()));
    }
    spec.validate()?;
    let replicates: Vec<ReplicateResult> =
        par::map_indexed(n_replicates, |r| run_replicate(spec, opts, r)).into_iter().flatten().collect();
    Ok(summarize(spec.clone(), replicates, opts))
}

pub fn summarize(spec: SimulationSpec, replicates: Vec<ReplicateResult>, opts: &ExperimentOptions) -> SimulationReport {
    let mut mms = Vec::new();
    let mut selection = Vec::new();
    for &method in &opts.methods {
        let ok: Vec<&ReplicateResult> = replicates.iter().filter(|r| r.method == method && r.error.is_none()).collect();
        if ok.is_empty() {
            continue;
        }
        for m in 1..=spec.m_true {
            let vals: Vec<usize> = ok.iter().map(|r| r.mms[m - 1]).collect();
            let (median, q95) = median_q95(&vals);
            mms.push(MmsSummary { method, m, median, q95 });
        }
        for &c in &opts.criteria {
            let outs: Vec<&SelectionOutcome> =
                ok.iter().filter_map(|r| r.selections.iter().find(|s| s.criterion == c)).collect();
            if outs.is_empty() {
                continue;
            }
            let k = outs.len() as f64;
            selection.push(SelectionSummary {
                method,
                criterion: c,
                mean_tp: outs.iter().map(|s| s.tp as f64).sum::<f64>() / k,
                mean_fp: outs.iter().map(|s| s.fp as f64).sum::<f64>() / k,
                replicates: outs.len(),
            });
        }
    }
    SimulationReport { spec, replicates, mms, selection }
}
