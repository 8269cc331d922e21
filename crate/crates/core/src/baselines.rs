//! Tabular baselines: logistic regression and logistic regression with
//! L2-penalized per-site intercept offsets.
//!
//! Both fits run penalized Newton (IRLS) iterations with step halving, so the
//! penalized log-likelihood never decreases from one iteration to the next.
//! The global intercept is never penalized.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    AgeGroup, Gender, GreenInterval, GreenOnsetInterval, Label, LandUse, PedestrianObservation, SiteRecord,
    WalkingContext, Weather, LANES_RANGE, SIDEWALK_RANGE, SPEED_LIMITS,
};
use crate::eval::Prediction;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("no training rows")]
    Empty,
    #[error("{rows} feature rows but {labels} labels")]
    Misaligned { rows: usize, labels: usize },
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("feature vector has {actual} entries, model expects {expected}")]
    SchemaMismatch { expected: usize, actual: usize },
    #[error("penalties must be finite and >= 0 (got {0})")]
    BadPenalty(f64),
    #[error("observation {obs_id} references unknown site {site_id}")]
    UnknownSite { obs_id: String, site_id: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

/// Dense encoded observation.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

fn one_hot<T: PartialEq>(out: &mut Vec<f64>, all: &[T], v: &T) {
    out.extend(all.iter().map(|x| (x == v) as u8 as f64));
}

fn min_max(v: f64, lo: f64, hi: f64) -> f64 {
    (v - lo) / (hi - lo)
}

/// Push-button effect as a three-way category.
const PUSH_EFFECT: [&str; 3] = ["yes", "no", "not_applicable"];

fn push_effect(o: &PedestrianObservation) -> &'static str {
    match o.push_button_affects_time {
        Some(true) if o.push_button_available => "yes",
        Some(false) if o.push_button_available => "no",
        _ => "not_applicable",
    }
}

/// Column names of [`encode`], in order.
pub fn feature_names() -> Vec<String> {
    let mut names = Vec::new();
    let group = |names: &mut Vec<String>, prefix: &str, values: Vec<String>| {
        names.extend(values.into_iter().map(|v| format!("{prefix}={v}")));
    };
    group(&mut names, "age_group", AgeGroup::ALL.iter().map(|x| x.to_string()).collect());
    group(&mut names, "gender", Gender::ALL.iter().map(|x| x.to_string()).collect());
    group(&mut names, "walking_context", WalkingContext::ALL.iter().map(|x| x.to_string()).collect());
    group(&mut names, "weather", Weather::ALL.iter().map(|x| x.to_string()).collect());
    names.push("lighting_intersection".into());
    names.push("lighting_midblock".into());
    group(&mut names, "green_onset_interval", GreenOnsetInterval::ALL.iter().map(|x| x.to_string()).collect());
    group(&mut names, "green_interval", GreenInterval::ALL.iter().map(|x| x.to_string()).collect());
    names.push("push_button_available".into());
    group(&mut names, "push_button_affects_time", PUSH_EFFECT.iter().map(|x| x.to_string()).collect());
    names.push("left_turn_protection".into());
    names.push("lanes".into());
    names.push("speed_limit_mph".into());
    names.push("sidewalk_width_ft".into());
    names.push("raised_median".into());
    names.push("transit_station".into());
    group(&mut names, "land_use", LandUse::ALL.iter().map(|x| x.to_string()).collect());
    names
}

/// One-hot categoricals, 0/1 booleans, and min-max scaled numerics
/// (lanes over [2, 10], speed over [25, 35], sidewalk width over [10, 14]).
pub fn encode(obs: &PedestrianObservation, site: &SiteRecord) -> FeatureVector {
    let mut v = Vec::with_capacity(44);
    one_hot(&mut v, AgeGroup::ALL, &obs.age_group);
    one_hot(&mut v, Gender::ALL, &obs.gender);
    one_hot(&mut v, WalkingContext::ALL, &obs.walking_context);
    one_hot(&mut v, Weather::ALL, &obs.weather);
    v.push(obs.lighting_intersection as u8 as f64);
    v.push(obs.lighting_midblock as u8 as f64);
    one_hot(&mut v, GreenOnsetInterval::ALL, &obs.green_onset_interval);
    one_hot(&mut v, GreenInterval::ALL, &obs.green_interval);
    v.push(obs.push_button_available as u8 as f64);
    one_hot(&mut v, &PUSH_EFFECT, &push_effect(obs));
    v.push(obs.left_turn_protection as u8 as f64);
    v.push(min_max(site.lanes as f64, LANES_RANGE.0 as f64, LANES_RANGE.1 as f64));
    v.push(min_max(site.speed_limit_mph as f64, SPEED_LIMITS[0] as f64, SPEED_LIMITS[2] as f64));
    v.push(min_max(site.sidewalk_width_ft, SIDEWALK_RANGE.0, SIDEWALK_RANGE.1));
    v.push(site.raised_median as u8 as f64);
    v.push(site.transit_station as u8 as f64);
    one_hot(&mut v, LandUse::ALL, &site.land_use);
    FeatureVector(v)
}

/// Encode observations against their sites, returning features, labels and site ids.
pub fn encode_all(
    obs: &[&PedestrianObservation],
    sites: &[SiteRecord],
) -> Result<(Vec<FeatureVector>, Vec<Label>, Vec<String>), BaselineError> {
    let index = crate::corpus::site_index(sites);
    let mut xs = Vec::with_capacity(obs.len());
    for o in obs {
        let site = index.get(o.site_id.as_str()).ok_or_else(|| BaselineError::UnknownSite {
            obs_id: o.obs_id.clone(),
            site_id: o.site_id.clone(),
        })?;
        xs.push(encode(o, site));
    }
    Ok((xs, obs.iter().map(|o| o.label).collect(), obs.iter().map(|o| o.site_id.clone()).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub l2: f64,
    pub max_iter: usize,
    /// Stop when the penalized gradient's Euclidean norm falls below this.
    pub tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { l2: 1.0, max_iter: 100, tol: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
    /// Penalized log-likelihood after each accepted iteration, starting at the initial point.
    pub objective: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub kind: String,
    pub l2: f64,
    pub l2_site: Option<f64>,
    pub max_iter: usize,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub feature_names: Vec<String>,
    pub weights: Vec<f64>,
    pub intercept: f64,
    /// Per-site intercept offsets (empty for the plain model).
    pub site_offsets: BTreeMap<String, f64>,
    pub hyperparameters: Hyperparameters,
    pub diagnostics: FitDiagnostics,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl LogisticModel {
    /// `w·x + b`, plus the site offset when the site was seen in training.
    pub fn linear(&self, x: &FeatureVector, site_id: Option<&str>) -> Result<f64, BaselineError> {
        if x.0.len() != self.weights.len() {
            return Err(BaselineError::SchemaMismatch { expected: self.weights.len(), actual: x.0.len() });
        }
        let offset = site_id.and_then(|s| self.site_offsets.get(s)).copied().unwrap_or(0.0);
        Ok(self.weights.iter().zip(&x.0).map(|(w, v)| w * v).sum::<f64>() + self.intercept + offset)
    }

    /// Probability of mid-block.
    pub fn predict_proba(&self, x: &FeatureVector, site_id: Option<&str>) -> Result<f64, BaselineError> {
        self.linear(x, site_id).map(sigmoid)
    }

    /// Mid-block when the probability exceeds one half.
    pub fn predict(&self, obs_id: &str, x: &FeatureVector, site_id: Option<&str>) -> Result<Prediction, BaselineError> {
        let p = self.predict_proba(x, site_id)?;
        let predicted = if p > 0.5 { Label::Midblock } else { Label::Intersection };
        let confidence = if predicted.is_midblock() { p } else { 1.0 - p };
        Ok(Prediction { obs_id: obs_id.to_string(), predicted, confidence, p_midblock: p })
    }

    pub fn save(&self, path: &Path) -> Result<(), BaselineError> {
        let text = serde_json::to_string_pretty(self).map_err(|source| BaselineError::Json { path: path.into(), source })?;
        std::fs::write(path, text + "\n").map_err(|source| BaselineError::Io { path: path.into(), source })
    }

    pub fn load(path: &Path) -> Result<Self, BaselineError> {
        let text = std::fs::read_to_string(path).map_err(|source| BaselineError::Io { path: path.into(), source })?;
        serde_json::from_str(&text).map_err(|source| BaselineError::Json { path: path.into(), source })
    }
}

/// Design for the joint fit: parameters are `[intercept, w (p), u (groups)]`.
struct Problem<'a> {
    x: &'a [FeatureVector],
    y: Vec<f64>,
    group: Vec<Option<usize>>,
    p: usize,
    groups: usize,
    l2: f64,
    l2_site: f64,
}

impl Problem<'_> {
    fn dim(&self) -> usize {
        1 + self.p + self.groups
    }

    fn eta(&self, theta: &DVector<f64>, i: usize) -> f64 {
        let xi = &self.x[i].0;
        let mut z = theta[0];
        for j in 0..self.p {
            z += theta[1 + j] * xi[j];
        }
        if let Some(g) = self.group[i] {
            z += theta[1 + self.p + g];
        }
        z
    }

    fn penalty(&self, theta: &DVector<f64>) -> f64 {
        let w: f64 = (0..self.p).map(|j| theta[1 + j].powi(2)).sum();
        let u: f64 = (0..self.groups).map(|g| theta[1 + self.p + g].powi(2)).sum();
        0.5 * self.l2 * w + 0.5 * self.l2_site * u
    }

    /// Penalized log-likelihood.
    fn objective(&self, theta: &DVector<f64>) -> f64 {
        let ll: f64 = (0..self.x.len())
            .map(|i| {
                let z = self.eta(theta, i);
                self.y[i] * z - softplus(z)
            })
            .sum();
        ll - self.penalty(theta)
    }

    /// Gradient and negative Hessian of the objective.
    fn derivatives(&self, theta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.dim();
        let mut grad = DVector::zeros(d);
        let mut hess = DMatrix::zeros(d, d);
        let mut idx: Vec<(usize, f64)> = Vec::with_capacity(self.p + 2);
        for i in 0..self.x.len() {
            let mu = sigmoid(self.eta(theta, i));
            let r = self.y[i] - mu;
            let w = mu * (1.0 - mu);
            idx.clear();
            idx.push((0, 1.0));
            for (j, &v) in self.x[i].0.iter().enumerate() {
                if v != 0.0 {
                    idx.push((1 + j, v));
                }
            }
            if let Some(g) = self.group[i] {
                idx.push((1 + self.p + g, 1.0));
            }
            for &(a, va) in &idx {
                grad[a] += r * va;
                for &(b, vb) in &idx {
                    hess[(a, b)] += w * va * vb;
                }
            }
        }
        for j in 0..self.p {
            grad[1 + j] -= self.l2 * theta[1 + j];
            hess[(1 + j, 1 + j)] += self.l2;
        }
        for g in 0..self.groups {
            let k = 1 + self.p + g;
            grad[k] -= self.l2_site * theta[k];
            hess[(k, k)] += self.l2_site;
        }
        (grad, hess)
    }
}

fn newton_direction(hess: DMatrix<f64>, grad: &DVector<f64>) -> DVector<f64> {
    let mut jitter = 0.0;
    loop {
        let mut h = hess.clone();
        if jitter > 0.0 {
            for k in 0..h.nrows() {
                h[(k, k)] += jitter;
            }
        }
        if let Some(ch) = h.cholesky() {
            return ch.solve(grad);
        }
        jitter = if jitter == 0.0 { 1e-10 } else { jitter * 100.0 };
        if jitter > 1e6 {
            return grad.clone();
        }
    }
}

fn solve(pr: &Problem<'_>, opts: &FitOptions) -> (DVector<f64>, FitDiagnostics) {
    let mut theta = DVector::zeros(pr.dim());
    let base = pr.y.iter().sum::<f64>() / pr.y.len() as f64;
    theta[0] = (base / (1.0 - base)).ln();
    let mut obj = pr.objective(&theta);
    let mut trace = vec![obj];
    let mut iterations = 0;
    let (mut grad, mut hess) = pr.derivatives(&theta);
    while grad.norm() >= opts.tol && iterations < opts.max_iter {
        let step = newton_direction(hess, &grad);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &theta + &step * t;
            let o = pr.objective(&cand);
            if o.is_finite() && o >= obj {
                theta = cand;
                obj = o;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        if !accepted {
            break;
        }
        trace.push(obj);
        (grad, hess) = pr.derivatives(&theta);
    }
    let gradient_norm = grad.norm();
    let diagnostics = FitDiagnostics { iterations, converged: gradient_norm < opts.tol, gradient_norm, objective: trace };
    if !diagnostics.converged {
        log::warn!("logistic fit stopped after {iterations} iterations with gradient norm {gradient_norm:.3e}");
    }
    (theta, diagnostics)
}

fn check_inputs(x: &[FeatureVector], y: &[Label], penalties: &[f64]) -> Result<usize, BaselineError> {
    if x.is_empty() {
        return Err(BaselineError::Empty);
    }
    if x.len() != y.len() {
        return Err(BaselineError::Misaligned { rows: x.len(), labels: y.len() });
    }
    if let Some(&bad) = penalties.iter().find(|l| !l.is_finite() || **l < 0.0) {
        return Err(BaselineError::BadPenalty(bad));
    }
    let p = x[0].0.len();
    if let Some(v) = x.iter().find(|v| v.0.len() != p) {
        return Err(BaselineError::SchemaMismatch { expected: p, actual: v.0.len() });
    }
    if y.iter().all(|l| l.is_midblock()) || !y.iter().any(|l| l.is_midblock()) {
        return Err(BaselineError::SingleClass);
    }
    Ok(p)
}

fn names_for(p: usize) -> Vec<String> {
    let names = feature_names();
    if names.len() == p {
        names
    } else {
        (0..p).map(|j| format!("x{j}")).collect()
    }
}

/// L2-penalized logistic regression.
pub fn fit_logistic(x: &[FeatureVector], y: &[Label], opts: &FitOptions) -> Result<LogisticModel, BaselineError> {
    let p = check_inputs(x, y, &[opts.l2])?;
    let pr = Problem {
        x,
        y: y.iter().map(|l| l.is_midblock() as u8 as f64).collect(),
        group: vec![None; x.len()],
        p,
        groups: 0,
        l2: opts.l2,
        l2_site: 0.0,
    };
    let (theta, diagnostics) = solve(&pr, opts);
    Ok(LogisticModel {
        feature_names: names_for(p),
        weights: (0..p).map(|j| theta[1 + j]).collect(),
        intercept: theta[0],
        site_offsets: BTreeMap::new(),
        hyperparameters: Hyperparameters {
            kind: "logistic".into(),
            l2: opts.l2,
            l2_site: None,
            max_iter: opts.max_iter,
            tol: opts.tol,
        },
        diagnostics,
    })
}

/// Logistic regression with per-site intercept offsets penalized by `l2_site`.
/// Sites absent from training get offset 0 at prediction time.
pub fn fit_hierarchical(
    x: &[FeatureVector],
    y: &[Label],
    site_ids: &[String],
    l2_site: f64,
    opts: &FitOptions,
) -> Result<LogisticModel, BaselineError> {
    let p = check_inputs(x, y, &[opts.l2, l2_site])?;
    if site_ids.len() != x.len() {
        return Err(BaselineError::Misaligned { rows: x.len(), labels: site_ids.len() });
    }
    let sites: Vec<String> = site_ids.iter().cloned().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let slot: BTreeMap<&str, usize> = sites.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let pr = Problem {
        x,
        y: y.iter().map(|l| l.is_midblock() as u8 as f64).collect(),
        group: site_ids.iter().map(|s| Some(slot[s.as_str()])).collect(),
        p,
        groups: sites.len(),
        l2: opts.l2,
        l2_site,
    };
    let (theta, diagnostics) = solve(&pr, opts);
    Ok(LogisticModel {
        feature_names: names_for(p),
        weights: (0..p).map(|j| theta[1 + j]).collect(),
        intercept: theta[0],
        site_offsets: sites.iter().enumerate().map(|(g, s)| (s.clone(), theta[1 + p + g])).collect(),
        hyperparameters: Hyperparameters {
            kind: "hierarchical".into(),
            l2: opts.l2,
            l2_site: Some(l2_site),
            max_iter: opts.max_iter,
            tol: opts.tol,
        },
        diagnostics,
    })
}

/// Penalized log-likelihood of `model` on a data set (used by oracles and reports).
pub fn penalized_log_likelihood(model: &LogisticModel, x: &[FeatureVector], y: &[Label], site_ids: Option<&[String]>) -> f64 {
    let mut ll = 0.0;
    for (i, (xi, yi)) in x.iter().zip(y).enumerate() {
        let site = site_ids.map(|s| s[i].as_str());
        let z = model.linear(xi, site).expect("schema checked by caller");
        ll += yi.is_midblock() as u8 as f64 * z - softplus(z);
    }
    let w: f64 = model.weights.iter().map(|w| w * w).sum();
    let u: f64 = model.site_offsets.values().map(|u| u * u).sum();
    ll - 0.5 * model.hyperparameters.l2 * w - 0.5 * model.hyperparameters.l2_site.unwrap_or(0.0) * u
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_match_encoding_width() {
        let names = feature_names();
        let o = PedestrianObservation {
            obs_id: "o".into(),
            site_id: "s".into(),
            age_group: AgeGroup::Adult,
            gender: Gender::Male,
            walking_context: WalkingContext::Alone,
            weather: Weather::Cloudy,
            lighting_intersection: true,
            lighting_midblock: false,
            green_onset_interval: GreenOnsetInterval::Short,
            green_interval: GreenInterval::Long,
            push_button_available: true,
            push_button_affects_time: Some(false),
            left_turn_protection: false,
            label: Label::Midblock,
        };
        let s = SiteRecord {
            site_id: "s".into(),
            location_name: "x".into(),
            lanes: 4,
            speed_limit_mph: 30,
            raised_median: false,
            transit_station: true,
            sidewalk_width_ft: 12.0,
            land_use: LandUse::OfficeResidential,
        };
        let v = encode(&o, &s);
        assert_eq!(v.0.len(), names.len());
        let at = |n: &str| v.0[names.iter().position(|x| x == n).unwrap()];
        assert_eq!(at("lanes"), 0.25);
        assert_eq!(at("speed_limit_mph"), 0.5);
        assert_eq!(at("sidewalk_width_ft"), 0.5);
        assert_eq!(at("push_button_affects_time=no"), 1.0);
        assert_eq!(at("weather=cloudy"), 1.0);
    }

    #[test]
    fn sigmoid_arithmetic() {
        let m = LogisticModel {
            feature_names: vec!["a".into()],
            weights: vec![0.0],
            intercept: 0.0,
            site_offsets: BTreeMap::new(),
            hyperparameters: Hyperparameters { kind: "logistic".into(), l2: 0.0, l2_site: None, max_iter: 0, tol: 0.0 },
            diagnostics: FitDiagnostics { iterations: 0, converged: true, gradient_norm: 0.0, objective: vec![] },
        };
        assert_eq!(m.predict_proba(&FeatureVector(vec![3.0]), None).unwrap(), 0.5);
        let m = LogisticModel { intercept: 3f64.ln(), ..m };
        assert!((m.predict_proba(&FeatureVector(vec![1.0]), None).unwrap() - 0.75).abs() < 1e-15);
        assert!(matches!(
            m.predict_proba(&FeatureVector(vec![1.0, 2.0]), None),
            Err(BaselineError::SchemaMismatch { expected: 1, actual: 2 })
        ));
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
