//! Exact Shapley attribution over the seven prompt components.
//!
//! The game's players are the [`PromptComponentKind`]s. A coalition `S` is a
//! bitmask indexed by [`PromptComponentKind::index`]; its value `v(S)` is the
//! model's two-way mid-block probability on the prompt rendered with only the
//! components in `S` shown. Positive φ favors mid-block, negative favors
//! intersection.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;
use crate::eval::{effective_threads, predict_tokens, AnswerTokens, EvalError};
use crate::lm::ModelParams;
use crate::prompting::{AbsenceMode, Prompt, PromptComponentKind, Vocabulary};
use crate::real::Real;

pub const N_COMPONENTS: usize = 7;
pub const N_SUBSETS: usize = 1 << N_COMPONENTS;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("game over {n} players has {got} values, expected {expected}")]
    MissingSubset { n: usize, got: usize, expected: usize },
    #[error("games are limited to 1..=16 players, got {0}")]
    BadGameSize(usize),
    #[error("v({mask:#b}) = {value} is not finite")]
    NonFinite { mask: usize, value: f64 },
    #[error("no cases to aggregate")]
    Empty,
    #[error("prompt {obs_id} has {len} tokens after substitution, limit {limit}")]
    TooLong { obs_id: String, len: usize, limit: usize },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

/// A cooperative game given by its full characteristic table.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentGame {
    n: usize,
    values: Vec<f64>,
}

impl ComponentGame {
    /// `values[mask]` is `v` of the coalition whose members are the set bits of `mask`.
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self, AttributionError> {
        if n == 0 || n > 16 {
            return Err(AttributionError::BadGameSize(n));
        }
        if values.len() != 1 << n {
            return Err(AttributionError::MissingSubset { n, got: values.len(), expected: 1 << n });
        }
        if let Some((mask, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(AttributionError::NonFinite { mask, value });
        }
        Ok(ComponentGame { n, values })
    }

    pub fn from_fn(n: usize, v: impl Fn(usize) -> f64) -> Result<Self, AttributionError> {
        if n == 0 || n > 16 {
            return Err(AttributionError::BadGameSize(n));
        }
        Self::new(n, (0..1usize << n).map(v).collect())
    }

    pub fn players(&self) -> usize {
        self.n
    }

    pub fn value(&self, mask: usize) -> f64 {
        self.values[mask]
    }

    pub fn full(&self) -> f64 {
        self.values[(1 << self.n) - 1]
    }

    pub fn empty(&self) -> f64 {
        self.values[0]
    }
}

/// Exact Shapley values by enumerating every coalition.
///
/// `φᵢ = Σ_{S∌i} |S|!(n−1−|S|)!/n! · (v(S∪{i}) − v(S))`
pub fn shapley_exact(game: &ComponentGame) -> Vec<f64> {
    let n = game.n;
    let fact: Vec<f64> = (0..=n).scan(1.0, |acc, k| {
        if k > 0 {
            *acc *= k as f64;
        }
        Some(*acc)
    })
    .collect();
    let weight: Vec<f64> = (0..n).map(|s| fact[s] * fact[n - 1 - s] / fact[n]).collect();
    (0..n)
        .map(|i| {
            let bit = 1usize << i;
            (0..1usize << n)
                .filter(|m| m & bit == 0)
                .map(|m| weight[m.count_ones() as usize] * (game.values[m | bit] - game.values[m]))
                .sum()
        })
        .collect()
}

/// Maps a rendered prompt to its mid-block probability.
pub trait PromptScorer: Sync {
    fn p_midblock(&self, obs_id: &str, text: &str) -> Result<f64, AttributionError>;
}

/// Scores text with a model: `<BOS>` plus the tokenized text, two-way softmax
/// over the answer tokens at the last position.
pub struct ModelScorer<'a, F> {
    pub model: &'a ModelParams<F>,
    pub vocab: &'a Vocabulary,
}

impl<F: Real> PromptScorer for ModelScorer<'_, F> {
    fn p_midblock(&self, obs_id: &str, text: &str) -> Result<f64, AttributionError> {
        let mut ids = vec![self.vocab.bos()];
        ids.extend(self.vocab.tokenize(text));
        let limit = self.model.config.max_seq_len;
        if ids.len() > limit {
            return Err(AttributionError::TooLong { obs_id: obs_id.to_string(), len: ids.len(), limit });
        }
        Ok(predict_tokens(self.model, obs_id, &ids, AnswerTokens::of(self.vocab))?.p_midblock)
    }
}

pub fn is_member(mask: usize, kind: PromptComponentKind) -> bool {
    mask & (1 << kind.index()) != 0
}

/// `v(S)`: the prompt rendered with components outside `mask` withheld.
pub fn characteristic(
    scorer: &dyn PromptScorer,
    prompt: &Prompt,
    mask: usize,
    mode: AbsenceMode,
) -> Result<f64, AttributionError> {
    let text = prompt.render_with(|k| is_member(mask, k), mode);
    scorer.p_midblock(&prompt.obs_id, &text)
}

/// All 128 characteristic values of one prompt, spread over `threads` workers.
pub fn component_game(
    scorer: &dyn PromptScorer,
    prompt: &Prompt,
    mode: AbsenceMode,
    threads: usize,
) -> Result<ComponentGame, AttributionError> {
    let masks: Vec<usize> = (0..N_SUBSETS).collect();
    let threads = effective_threads(threads);
    let values: Vec<f64> = if threads <= 1 {
        masks.iter().map(|&m| characteristic(scorer, prompt, m, mode)).collect::<Result<_, _>>()?
    } else {
        let chunk = N_SUBSETS.div_ceil(threads);
        let parts: Vec<Result<Vec<f64>, AttributionError>> = std::thread::scope(|s| {
            let handles: Vec<_> = masks
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|&m| characteristic(scorer, prompt, m, mode)).collect()))
                .collect();
            handles.into_iter().map(|h| h.join().expect("attribution worker panicked")).collect()
        });
        let mut out = Vec::with_capacity(N_SUBSETS);
        for p in parts {
            out.extend(p?);
        }
        out
    };
    ComponentGame::new(N_COMPONENTS, values)
}

/// Per-case attribution record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub obs_id: String,
    pub predicted: Label,
    /// Probability of `predicted` with every component present.
    pub confidence: f64,
    /// Signed φ keyed by component key.
    pub phi: BTreeMap<String, f64>,
    pub v_full: f64,
    pub v_empty: f64,
    pub absence: AbsenceMode,
}

impl CaseReport {
    /// φ in [`PromptComponentKind::ALL`] order.
    pub fn phi_vector(&self) -> Vec<f64> {
        PromptComponentKind::ALL.iter().map(|k| self.phi.get(k.key()).copied().unwrap_or(0.0)).collect()
    }

    /// `|Σφ − (v(full) − v(∅))|`.
    pub fn efficiency_residual(&self) -> f64 {
        (self.phi.values().sum::<f64>() - (self.v_full - self.v_empty)).abs()
    }

    /// Signed bar table: component, φ, direction.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{}: predicted {} (confidence {:.3}), v(full) {:.4}, v(empty) {:.4}, absence {}",
            self.obs_id,
            self.predicted,
            self.confidence,
            self.v_full,
            self.v_empty,
            absence_name(self.absence)
        );
        let _ = writeln!(out, "{:<28} {:>9}  {:<12} bar", "component", "phi", "direction");
        let peak = self.phi.values().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        for kind in PromptComponentKind::ALL {
            let phi = self.phi[kind.key()];
            let width = ((phi.abs() / peak) * 20.0).round() as usize;
            let bar = if phi < 0.0 { format!("{:>20}|", "-".repeat(width)) } else { format!("{:>20}|{}", "", "+".repeat(width)) };
            let _ = writeln!(out, "{:<28} {:>+9.4}  {:<12} {bar}", kind.name(), phi, direction(phi));
        }
        out
    }
}

pub fn direction(phi: f64) -> &'static str {
    if phi > 0.0 {
        "mid-block"
    } else if phi < 0.0 {
        "intersection"
    } else {
        "neutral"
    }
}

pub fn absence_name(mode: AbsenceMode) -> &'static str {
    match mode {
        AbsenceMode::Placeholder => "placeholder",
        AbsenceMode::Delete => "delete",
    }
}

pub fn case_from_game(obs_id: &str, game: &ComponentGame, mode: AbsenceMode) -> CaseReport {
    let phi = shapley_exact(game);
    let v_full = game.full();
    let predicted = if v_full > 0.5 { Label::Midblock } else { Label::Intersection };
    let confidence = if predicted.is_midblock() { v_full } else { 1.0 - v_full };
    CaseReport {
        obs_id: obs_id.to_string(),
        predicted,
        confidence,
        phi: PromptComponentKind::ALL.iter().zip(phi).map(|(k, v)| (k.key().to_string(), v)).collect(),
        v_full,
        v_empty: game.empty(),
        absence: mode,
    }
}

/// Attribute one prompt. The prompt should already fit the model's context.
pub fn case_report(
    scorer: &dyn PromptScorer,
    prompt: &Prompt,
    mode: AbsenceMode,
    threads: usize,
) -> Result<CaseReport, AttributionError> {
    let game = component_game(scorer, prompt, mode, threads)?;
    Ok(case_from_game(&prompt.obs_id, &game, mode))
}

/// One row of the aggregate table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub rank: usize,
    pub component: String,
    pub mean_abs_shapley: f64,
    pub contribution_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyReport {
    /// Sorted by descending mean |φ|.
    pub rows: Vec<AggregateRow>,
    pub n_cases: usize,
    pub max_efficiency_residual: f64,
    pub absence: AbsenceMode,
}

pub const TABLE9_HEADER: &str = "rank,component,mean_abs_shapley,contribution_percent";

/// Mean |φ| per component across cases, ranked, with percentages of the
/// total. When every φ is zero the percentages are all zero.
pub fn aggregate_cases(cases: &[CaseReport]) -> Result<ShapleyReport, AttributionError> {
    let first = cases.first().ok_or(AttributionError::Empty)?;
    let n = cases.len() as f64;
    let mut means: Vec<(PromptComponentKind, f64)> = PromptComponentKind::ALL
        .iter()
        .map(|&k| (k, cases.iter().map(|c| c.phi.get(k.key()).copied().unwrap_or(0.0).abs()).sum::<f64>() / n))
        .collect();
    means.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.index().cmp(&b.0.index())));
    let total: f64 = means.iter().map(|m| m.1).sum();
    let rows = means
        .iter()
        .enumerate()
        .map(|(i, &(k, m))| AggregateRow {
            rank: i + 1,
            component: k.name().to_string(),
            mean_abs_shapley: m,
            contribution_percent: if total > 0.0 { 100.0 * m / total } else { 0.0 },
        })
        .collect();
    Ok(ShapleyReport {
        rows,
        n_cases: cases.len(),
        max_efficiency_residual: cases.iter().map(CaseReport::efficiency_residual).fold(0.0, f64::max),
        absence: first.absence,
    })
}

/// Attribute every prompt and aggregate. Returns the per-case records too.
pub fn aggregate_report(
    scorer: &dyn PromptScorer,
    prompts: &[Prompt],
    mode: AbsenceMode,
    threads: usize,
) -> Result<(ShapleyReport, Vec<CaseReport>), AttributionError> {
    if prompts.is_empty() {
        return Err(AttributionError::Empty);
    }
    let cases = prompts
        .iter()
        .map(|p| case_report(scorer, p, mode, threads))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((aggregate_cases(&cases)?, cases))
}

impl ShapleyReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{TABLE9_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.1}",
                r.rank,
                csv_field(&r.component),
                r.mean_abs_shapley,
                r.contribution_percent
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), AttributionError> {
        std::fs::write(path, self.to_csv()).map_err(|source| AttributionError::Io { path: path.into(), source })
    }

    pub fn render_text(&self) -> String {
        let mut out = format!(
            "Shapley attribution over {} cases (absence: {}, max efficiency residual {:.2e})\n",
            self.n_cases,
            absence_name(self.absence),
            self.max_efficiency_residual
        );
        let _ = writeln!(out, "{:>4}  {:<28} {:>12} {:>8}", "rank", "component", "mean |phi|", "percent");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>4}  {:<28} {:>12.6} {:>7.1}%",
                r.rank, r.component, r.mean_abs_shapley, r.contribution_percent
            );
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_case_json(path: &Path, case: &CaseReport) -> Result<(), AttributionError> {
    let mut f = std::fs::File::create(path).map_err(|source| AttributionError::Io { path: path.into(), source })?;
    serde_json::to_writer_pretty(&mut f, case).map_err(|source| AttributionError::Json { path: path.into(), source })?;
    writeln!(f).map_err(|source| AttributionError::Io { path: path.into(), source })
}
