//! Browser bindings: each export takes a JSON settings string, simulates a
//! dataset from it and returns JSON for the page to draw.

use rfpsis::factor::{fit_factor_model, FactorOptions, ObsFlag};
use rfpsis::rng::derive_seed;
use rfpsis::screening::{screen, standardize_robust, Method, ScreenOptions, SolutionPath};
use rfpsis::selection::{default_k_max, refit_path, select_model, Criterion};
use rfpsis::simulation::{generate, minimal_model_size, LeverageKind, RowLabel, SimulatedDataset, SimulationSpec};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct DemoSettings {
    pub n: usize,
    pub p: usize,
    pub c: f64,
    pub contamination: String,
    pub eps: f64,
    pub seed: u64,
}

impl Default for DemoSettings {
    fn default() -> Self {
        Self { n: 100, p: 200, c: 5.0, contamination: "none".into(), eps: 0.0, seed: 1 }
    }
}

impl DemoSettings {
    fn spec(&self) -> Result<SimulationSpec, String> {
        let kind: LeverageKind = self.contamination.parse().map_err(|e: rfpsis::Error| e.to_string())?;
        let eps = if kind == LeverageKind::None { 0.0 } else { self.eps };
        let spec = SimulationSpec {
            n: self.n,
            p: self.p,
            c: self.c,
            eps_leverage: eps,
            leverage_kind: kind,
            seed: self.seed,
            ..SimulationSpec::default()
        };
        spec.validate().map_err(|e| e.to_string())?;
        if self.n > 400 || self.p > 1000 {
            return Err("keep n <= 400 and p <= 1000 in the browser".into());
        }
        Ok(spec)
    }

    fn data(&self) -> Result<(SimulationSpec, SimulatedDataset), String> {
        let spec = self.spec()?;
        let data = generate(&spec).map_err(|e| e.to_string())?;
        Ok((spec, data))
    }
}

fn parse(json: &str) -> Result<DemoSettings, String> {
    if json.trim().is_empty() {
        return Ok(DemoSettings::default());
    }
    serde_json::from_str(json).map_err(|e| format!("settings: {e}"))
}

fn to_json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

fn label_name(l: RowLabel) -> &'static str {
    match l {
        RowLabel::Regular => "regular",
        RowLabel::PcGood | RowLabel::PcBad => "pc",
        RowLabel::OcGood | RowLabel::OcBad => "oc",
        RowLabel::Vertical => "vertical",
    }
}

#[derive(Debug, Serialize)]
pub struct DiagnosticPoint {
    pub sd: f64,
    pub od: f64,
    pub flag: &'static str,
    pub truth: &'static str,
}

#[derive(Debug, Serialize)]
pub struct DiagnosticsOut {
    pub d: usize,
    pub lambda_opt: f64,
    pub od_cutoff: f64,
    pub sd_cutoff: f64,
    pub points: Vec<DiagnosticPoint>,
}

pub fn diagnostics_json(settings: &str) -> Result<String, String> {
    let (spec, data) = parse(settings)?.data()?;
    let (xs, _) = standardize_robust(&data.x).map_err(|e| e.to_string())?;
    let opts = FactorOptions {
        dimension: rfpsis::factor::Dimension::Auto { d_max: 5 },
        lts_starts: 50,
        mcd_starts: 100,
        seed: derive_seed(spec.seed, &[0x4641]),
        ..FactorOptions::default()
    };
    let fit = fit_factor_model(&xs, &opts).map_err(|e| format!("factor model: {e}"))?;
    let points = (0..spec.n)
        .map(|i| DiagnosticPoint {
            sd: fit.sd[i],
            od: fit.transformed_od[i],
            flag: match fit.flags[i] {
                ObsFlag::Regular => "regular",
                ObsFlag::PcOutlier => "pc",
                ObsFlag::OcOutlier => "oc",
            },
            truth: label_name(data.labels[i]),
        })
        .collect();
    to_json(&DiagnosticsOut {
        d: fit.d,
        lambda_opt: fit.lambda_opt,
        od_cutoff: fit.od_cutoff,
        sd_cutoff: fit.sd_cutoff,
        points,
    })
}

#[derive(Debug, Serialize)]
pub struct PathOut {
    pub method: String,
    pub d: usize,
    /// Path positions at which the true predictors appear.
    pub true_ranks: Vec<usize>,
    pub top: Vec<(usize, bool)>,
}

fn screen_with(data: &SimulatedDataset, seed: u64, method: Method) -> Result<SolutionPath, String> {
    let mut so = ScreenOptions { method, d_max: 5, ..ScreenOptions::default() };
    so.rfpsis.factor.lts_starts = 50;
    so.rfpsis.factor.mcd_starts = 100;
    so.rfpsis.marginal_starts = 20;
    so.rfpsis.seed = derive_seed(seed, &[method as u64]);
    screen(&data.x, &data.y, &so).map_err(|e| format!("{method}: {e}"))
}

pub fn screening_json(settings: &str) -> Result<String, String> {
    let (spec, data) = parse(settings)?.data()?;
    let mut out = Vec::new();
    for method in [Method::Sis, Method::Fpsis, Method::Rfpsis] {
        let path = screen_with(&data, spec.seed, method)?;
        let true_ranks = minimal_model_size(&path.order, &data.true_model).map_err(|e| e.to_string())?;
        let top = path.order.iter().take(20).map(|&j| (j, data.true_model.contains(&j))).collect();
        out.push(PathOut { method: method.to_string(), d: path.d, true_ranks, top });
    }
    to_json(&out)
}

#[derive(Debug, Serialize)]
pub struct SelectionOut {
    pub criterion: &'static str,
    pub model: Vec<usize>,
    pub tp: usize,
    pub fp: usize,
}

pub fn selection_json(settings: &str) -> Result<String, String> {
    let (spec, data) = parse(settings)?.data()?;
    let path = screen_with(&data, spec.seed, Method::Rfpsis)?;
    let k_max = default_k_max(spec.n, spec.p).min(path.i2.len() / 2).min(30);
    let (refits, _) = refit_path(&path, k_max).map_err(|e| format!("refit: {e}"))?;
    let sel = select_model(&path, &refits, &Criterion::ALL, spec.n, spec.p).map_err(|e| format!("selection: {e}"))?;
    let out: Vec<SelectionOut> = sel
        .chosen
        .iter()
        .map(|c| {
            let tp = c.model.iter().filter(|j| data.true_model.contains(j)).count();
            SelectionOut { criterion: c.criterion.name(), model: c.model.clone(), tp, fp: c.model.len() - tp }
        })
        .collect();
    to_json(&out)
}

#[wasm_bindgen]
pub fn diagnostics(settings: &str) -> Result<String, JsValue> {
    diagnostics_json(settings).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn screening(settings: &str) -> Result<String, JsValue> {
    screening_json(settings).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn selection(settings: &str) -> Result<String, JsValue> {
    selection_json(settings).map_err(|e| JsValue::from_str(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"{"n": 60, "p": 40, "contamination": "pc-bad", "eps": 0.1, "seed": 3}"#;

    #[test]
    fn diagnostics_cover_every_row() {
        let v: serde_json::Value = serde_json::from_str(&diagnostics_json(SMALL).unwrap()).unwrap();
        assert_eq!(v["points"].as_array().unwrap().len(), 60);
        assert!(v["od_cutoff"].as_f64().unwrap() > 0.0);
    }

    #[test]
    fn screening_and_selection_report_all_methods() {
        let v: serde_json::Value = serde_json::from_str(&screening_json(SMALL).unwrap()).unwrap();
        assert_eq!(v.as_array().unwrap().len(), 3);
        assert_eq!(v[0]["true_ranks"].as_array().unwrap().len(), 8);
        let s: serde_json::Value = serde_json::from_str(&selection_json(SMALL).unwrap()).unwrap();
        assert_eq!(s.as_array().unwrap().len(), 6);
    }

    #[test]
    fn rejects_bad_settings() {
        assert!(screening_json(r#"{"contamination": "weird"}"#).is_err());
        assert!(screening_json(r#"{"n": 5000}"#).is_err());
        assert!(screening_json("not json").is_err());
    }
}
