//! Decoding, metrics and the evaluation protocols.
//!
//! Mid-block is the positive class throughout. A prediction compares the two
//! answer-token logits at the final position; ties go to intersection.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Label, PedestrianObservation, SiteRecord, SplitAssignment};
use crate::lm::{last_logits, ModelError, ModelParams};
use crate::prompting::{encode_prompt, FewShotExample, Prompt, PromptError, Vocabulary};
use crate::real::Real;
use crate::seeds;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no predictions to evaluate")]
    Empty,
    #[error("{preds} predictions for {gold} gold labels")]
    Misaligned { preds: usize, gold: usize },
    #[error("gold labels contain a single class; balanced accuracy is undefined")]
    SingleClass,
    #[error("need {needed} validation examples for few-shot selection, have {available}")]
    InsufficientValidation { needed: usize, available: usize },
    #[error("leakage: test observation {obs_id} appears in {role}")]
    Leakage { obs_id: String, role: &'static str },
    #[error("repeated evaluation needs at least 2 runs, got {0}")]
    TooFewRuns(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

/// Vocabulary ids of the two answer tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnswerTokens {
    pub intersection: u32,
    pub midblock: u32,
}

impl AnswerTokens {
    pub fn of(vocab: &Vocabulary) -> Self {
        AnswerTokens { intersection: vocab.intersection(), midblock: vocab.midblock() }
    }

    pub fn label_of(&self, token: u32) -> Option<Label> {
        if token == self.midblock {
            Some(Label::Midblock)
        } else if token == self.intersection {
            Some(Label::Intersection)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub obs_id: String,
    pub predicted: Label,
    /// Probability of `predicted` under the two-way softmax, in [0.5, 1].
    pub confidence: f64,
    /// Two-way probability of mid-block.
    pub p_midblock: f64,
}

/// Decision rule on the two answer logits.
pub fn decide(obs_id: &str, logit_intersection: f64, logit_midblock: f64) -> Prediction {
    let diff = logit_midblock - logit_intersection;
    let p_midblock = 1.0 / (1.0 + (-diff).exp());
    let predicted = if diff > 0.0 { Label::Midblock } else { Label::Intersection };
    let confidence = match predicted {
        Label::Midblock => p_midblock,
        Label::Intersection => 1.0 - p_midblock,
    };
    Prediction { obs_id: obs_id.to_string(), predicted, confidence, p_midblock }
}

/// Predict from already-encoded context tokens (`<BOS>` + prompt).
pub fn predict_tokens<F: Real>(
    model: &ModelParams<F>,
    obs_id: &str,
    context: &[u32],
    answers: AnswerTokens,
) -> Result<Prediction, EvalError> {
    let logits = last_logits(model, context)?;
    Ok(decide(
        obs_id,
        logits[answers.intersection as usize].f64(),
        logits[answers.midblock as usize].f64(),
    ))
}

pub fn predict<F: Real>(model: &ModelParams<F>, prompt: &Prompt, vocab: &Vocabulary) -> Result<Prediction, EvalError> {
    let tokens = encode_prompt(prompt, vocab, model.config.max_seq_len, 0)?;
    predict_tokens(model, &prompt.obs_id, &tokens, AnswerTokens::of(vocab))
}

/// Predict a batch of contexts, splitting the work across `threads` workers.
/// Output order follows the input order.
pub fn predict_batch<F: Real>(
    model: &ModelParams<F>,
    items: &[(String, Vec<u32>)],
    answers: AnswerTokens,
    threads: usize,
) -> Result<Vec<Prediction>, EvalError> {
    let threads = effective_threads(threads).min(items.len().max(1));
    if threads <= 1 {
        return items.iter().map(|(id, t)| predict_tokens(model, id, t, answers)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let parts: Vec<Result<Vec<Prediction>, EvalError>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || part.iter().map(|(id, t)| predict_tokens(model, id, t, answers)).collect())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("prediction worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// `0` means one worker per available core.
pub fn effective_threads(requested: usize) -> usize {
    if requested > 0 {
        requested
    } else {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub accuracy: f64,
    /// 0 when nothing is predicted mid-block.
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    /// 0 when precision and recall are both 0.
    pub f1: f64,
    pub balanced_accuracy: f64,
    pub support_midblock: usize,
    pub support_intersection: usize,
}

impl MetricReport {
    pub fn from_confusion(tp: usize, fp: usize, tn: usize, fn_: usize) -> Result<Self, EvalError> {
        let total = tp + fp + tn + fn_;
        if total == 0 {
            return Err(EvalError::Empty);
        }
        if tp + fn_ == 0 || tn + fp == 0 {
            return Err(EvalError::SingleClass);
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let specificity = ratio(tn, tn + fp);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Ok(MetricReport {
            tp,
            fp,
            tn,
            fn_,
            accuracy: ratio(tp + tn, total),
            precision,
            recall,
            specificity,
            f1,
            balanced_accuracy: (recall + specificity) / 2.0,
            support_midblock: tp + fn_,
            support_intersection: tn + fp,
        })
    }
}

pub fn evaluate_labels(predicted: &[Label], gold: &[Label]) -> Result<MetricReport, EvalError> {
    if predicted.len() != gold.len() {
        return Err(EvalError::Misaligned { preds: predicted.len(), gold: gold.len() });
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (p, g) in predicted.iter().zip(gold) {
        match (p.is_midblock(), g.is_midblock()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    MetricReport::from_confusion(tp, fp, tn, fn_)
}

pub fn evaluate(preds: &[Prediction], gold: &[Label]) -> Result<MetricReport, EvalError> {
    let predicted: Vec<Label> = preds.iter().map(|p| p.predicted).collect();
    evaluate_labels(&predicted, gold)
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: f64,
    pub precision: f64,
    pub f1: f64,
    pub balanced_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatedSummary {
    pub runs: Vec<MetricReport>,
    pub mean: MetricSummary,
    pub std: MetricSummary,
}

impl RepeatedSummary {
    /// Like [`RepeatedSummary::from_runs`] but accepts a single run, whose
    /// std entries are NaN.
    pub fn from_any(runs: Vec<MetricReport>) -> Result<Self, EvalError> {
        match runs.len() {
            0 => Err(EvalError::TooFewRuns(0)),
            1 => {
                let r = &runs[0];
                let mean = MetricSummary {
                    accuracy: r.accuracy,
                    precision: r.precision,
                    f1: r.f1,
                    balanced_accuracy: r.balanced_accuracy,
                };
                let nan = MetricSummary { accuracy: f64::NAN, precision: f64::NAN, f1: f64::NAN, balanced_accuracy: f64::NAN };
                Ok(RepeatedSummary { runs, mean, std: nan })
            }
            _ => Self::from_runs(runs),
        }
    }

    pub fn from_runs(runs: Vec<MetricReport>) -> Result<Self, EvalError> {
        if runs.len() < 2 {
            return Err(EvalError::TooFewRuns(runs.len()));
        }
        let col = |f: fn(&MetricReport) -> f64| mean_std(&runs.iter().map(f).collect::<Vec<_>>());
        let (a, sa) = col(|r| r.accuracy);
        let (p, sp) = col(|r| r.precision);
        let (f, sf) = col(|r| r.f1);
        let (b, sb) = col(|r| r.balanced_accuracy);
        Ok(RepeatedSummary {
            runs,
            mean: MetricSummary { accuracy: a, precision: p, f1: f, balanced_accuracy: b },
            std: MetricSummary { accuracy: sa, precision: sp, f1: sf, balanced_accuracy: sb },
        })
    }
}

/// Run `run` once per seed (each seed draws its own split) and summarize.
pub fn repeated_stratified_eval<E>(
    seeds: &[u64],
    mut run: impl FnMut(u64) -> Result<MetricReport, E>,
) -> Result<RepeatedSummary, E>
where
    E: From<EvalError>,
{
    if seeds.len() < 2 {
        return Err(EvalError::TooFewRuns(seeds.len()).into());
    }
    let runs = seeds.iter().map(|s| run(*s)).collect::<Result<Vec<_>, E>>()?;
    Ok(RepeatedSummary::from_runs(runs)?)
}

pub const TABLE5_HEADER: [&str; 6] = ["Model", "Accuracy", "Precision", "F1", "Balanced Accuracy", "Std Dev"];

/// Rows of `(model name, summary)` in the stratified-results layout; the
/// Std Dev column is the sample std of balanced accuracy (`n/a` for one run).
pub fn write_table5(path: &Path, rows: &[(String, RepeatedSummary)]) -> Result<(), EvalError> {
    let mut w = csv_writer(path)?;
    let csv_err = |source| EvalError::Csv { path: path.into(), source };
    w.write_record(TABLE5_HEADER).map_err(csv_err)?;
    for (name, s) in rows {
        w.write_record([
            name.clone(),
            pct(s.mean.accuracy),
            pct(s.mean.precision),
            pct(s.mean.f1),
            pct(s.mean.balanced_accuracy),
            cell(s.std.balanced_accuracy.is_finite().then_some(s.std.balanced_accuracy)),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|source| EvalError::Io { path: path.into(), source })
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>, EvalError> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|source| EvalError::Csv { path: path.into(), source })
}

/// Uniform random choice of `k` validation observations without replacement.
pub fn few_shot_context(
    validation: &[(&PedestrianObservation, &SiteRecord)],
    k: usize,
    seed: u64,
) -> Result<Vec<FewShotExample>, EvalError> {
    if k == 0 {
        return Ok(Vec::new());
    }
    if validation.len() < k {
        return Err(EvalError::InsufficientValidation { needed: k, available: validation.len() });
    }
    let mut rng = seeds::labeled_rng(seed, "few-shot");
    let chosen: Vec<FewShotExample> = sample(&mut rng, validation.len(), k)
        .into_iter()
        .map(|i| FewShotExample::new(validation[i].0, validation[i].1))
        .collect();
    let mid = chosen.iter().filter(|e| e.answer.is_midblock()).count();
    log::info!("few-shot exemplars: {} mid-block, {} intersection", mid, k - mid);
    Ok(chosen)
}

/// Hard failure when any test observation feeds training or exemplar selection.
pub fn check_leakage<'a>(
    split: &SplitAssignment,
    training_ids: impl IntoIterator<Item = &'a str>,
    exemplar_ids: impl IntoIterator<Item = &'a str>,
) -> Result<(), EvalError> {
    for id in training_ids {
        if split.test.contains(id) {
            return Err(EvalError::Leakage { obs_id: id.to_string(), role: "training inputs" });
        }
    }
    for id in exemplar_ids {
        if split.test.contains(id) {
            return Err(EvalError::Leakage { obs_id: id.to_string(), role: "few-shot exemplars" });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossSiteRow {
    pub site_id: String,
    pub location_name: String,
    pub lanes: u32,
    pub n_obs: usize,
    /// One entry per variant; `None` when the site's gold labels are single-class.
    pub balanced_accuracy: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossSiteReport {
    pub variants: Vec<String>,
    pub rows: Vec<CrossSiteRow>,
    /// Mean over sites with a defined value.
    pub mean: Vec<f64>,
    /// Sample std over the same sites.
    pub std: Vec<f64>,
    /// Balanced accuracy pooled over every test observation.
    pub pooled: Vec<MetricReport>,
}

/// Per-site balanced accuracy for each variant's test predictions.
pub fn cross_site_eval(
    split: &SplitAssignment,
    sites: &[SiteRecord],
    observations: &[PedestrianObservation],
    variants: &[(String, Vec<Prediction>)],
) -> Result<CrossSiteReport, EvalError> {
    let gold: BTreeMap<&str, (&str, Label)> = observations
        .iter()
        .filter(|o| split.test.contains(&o.obs_id))
        .map(|o| (o.obs_id.as_str(), (o.site_id.as_str(), o.label)))
        .collect();
    let mut per_variant: Vec<BTreeMap<&str, Prediction>> = Vec::new();
    let mut pooled = Vec::new();
    for (_, preds) in variants {
        let map: BTreeMap<&str, Prediction> = preds.iter().map(|p| (p.obs_id.as_str(), p.clone())).collect();
        let ids: BTreeSet<&str> = map.keys().copied().collect();
        let expected: BTreeSet<&str> = gold.keys().copied().collect();
        if ids != expected {
            return Err(EvalError::Misaligned { preds: ids.len(), gold: expected.len() });
        }
        let (p, g): (Vec<Label>, Vec<Label>) = gold.iter().map(|(id, (_, l))| (map[id].predicted, *l)).unzip();
        pooled.push(evaluate_labels(&p, &g)?);
        per_variant.push(map);
    }
    let mut rows = Vec::new();
    for site_id in &split.test_sites {
        let site = sites.iter().find(|s| &s.site_id == site_id);
        let ids: Vec<&str> = gold.iter().filter(|(_, (s, _))| s == site_id).map(|(id, _)| *id).collect();
        let bas = per_variant
            .iter()
            .map(|map| {
                let p: Vec<Label> = ids.iter().map(|id| map[id].predicted).collect();
                let g: Vec<Label> = ids.iter().map(|id| gold[id].1).collect();
                evaluate_labels(&p, &g).ok().map(|r| r.balanced_accuracy)
            })
            .collect();
        rows.push(CrossSiteRow {
            site_id: site_id.clone(),
            location_name: site.map(|s| s.location_name.clone()).unwrap_or_default(),
            lanes: site.map(|s| s.lanes).unwrap_or_default(),
            n_obs: ids.len(),
            balanced_accuracy: bas,
        });
    }
    let (mut mean, mut std) = (Vec::new(), Vec::new());
    for v in 0..variants.len() {
        let xs: Vec<f64> = rows.iter().filter_map(|r| r.balanced_accuracy[v]).collect();
        let (m, s) = if xs.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(&xs) };
        mean.push(m);
        std.push(s);
    }
    Ok(CrossSiteReport {
        variants: variants.iter().map(|(n, _)| n.clone()).collect(),
        rows,
        mean,
        std,
        pooled,
    })
}

fn cell(x: Option<f64>) -> String {
    x.map(pct).unwrap_or_else(|| "n/a".to_string())
}

impl CrossSiteReport {
    /// Per-site rows followed by Mean and Std Dev rows.
    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = csv_writer(path)?;
        let csv_err = |source| EvalError::Csv { path: path.into(), source };
        let mut header = vec!["Site".to_string(), "Location".to_string(), "Lanes".to_string(), "N".to_string()];
        header.extend(self.variants.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.site_id.clone(), r.location_name.clone(), r.lanes.to_string(), r.n_obs.to_string()];
            rec.extend(r.balanced_accuracy.iter().map(|x| cell(*x)));
            w.write_record(&rec).map_err(csv_err)?;
        }
        for (label, vals) in [("Mean", &self.mean), ("Std Dev", &self.std)] {
            let mut rec = vec![label.to_string(), String::new(), String::new(), String::new()];
            rec.extend(vals.iter().map(|x| cell(x.is_finite().then_some(*x))));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|source| EvalError::Io { path: path.into(), source })
    }

    /// Zero-shot/few-shot comparison: pooled balanced accuracy and the
    /// across-site std dev per variant.
    pub fn write_table7(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = csv_writer(path)?;
        let csv_err = |source| EvalError::Csv { path: path.into(), source };
        w.write_record(["Configuration", "Balanced Accuracy", "Std Dev"]).map_err(csv_err)?;
        for (i, v) in self.variants.iter().enumerate() {
            w.write_record([v.clone(), pct(self.pooled[i].balanced_accuracy), cell(self.std[i].is_finite().then_some(self.std[i]))])
                .map_err(csv_err)?;
        }
        w.flush().map_err(|source| EvalError::Io { path: path.into(), source })
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<8} {:<28} {:>5} {:>4}", "Site", "Location", "Lanes", "N");
        for v in &self.variants {
            let _ = write!(out, " {:>12}", v);
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<8} {:<28} {:>5} {:>4}", r.site_id, r.location_name, r.lanes, r.n_obs);
            for x in &r.balanced_accuracy {
                let _ = write!(out, " {:>12}", cell(*x));
            }
            out.push('\n');
        }
        for (label, vals) in [("Mean", &self.mean), ("Std Dev", &self.std)] {
            let _ = write!(out, "{:<8} {:<28} {:>5} {:>4}", label, "", "", "");
            for x in vals.iter() {
                let _ = write!(out, " {:>12}", cell(x.is_finite().then_some(*x)));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRow<'a> {
    obs_id: &'a str,
    predicted: &'a str,
    confidence: f64,
    gold: &'a str,
}

/// `obs_id,predicted,confidence,gold`.
pub fn write_predictions(path: &Path, preds: &[Prediction], gold: &[Label]) -> Result<(), EvalError> {
    if preds.len() != gold.len() {
        return Err(EvalError::Misaligned { preds: preds.len(), gold: gold.len() });
    }
    let mut w = csv_writer(path)?;
    for (p, g) in preds.iter().zip(gold) {
        w.serialize(PredictionRow {
            obs_id: &p.obs_id,
            predicted: p.predicted.as_str(),
            confidence: p.confidence,
            gold: g.as_str(),
        })
        .map_err(|source| EvalError::Csv { path: path.into(), source })?;
    }
    w.flush().map_err(|source| EvalError::Io { path: path.into(), source })
}

pub fn render_metrics(name: &str, r: &MetricReport) -> String {
    format!(
        "{name}: accuracy {:.1}%, precision {:.1}%, recall {:.1}%, specificity {:.1}%, F1 {:.1}%, balanced accuracy {:.1}% (tp {}, fp {}, tn {}, fn {})",
        100.0 * r.accuracy,
        100.0 * r.precision,
        100.0 * r.recall,
        100.0 * r.specificity,
        100.0 * r.f1,
        100.0 * r.balanced_accuracy,
        r.tp,
        r.fp,
        r.tn,
        r.fn_
    )
}
