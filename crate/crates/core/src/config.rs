//! Run configuration: one TOML document with a section per module.
//!
//! Every key has a default, so an empty file is a valid configuration for a
//! synthetic desk-scale run. Errors always name the offending key as
//! `section.key`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::FitOptions;
use crate::corpus::{GeneratorConfig, GroundTruth, Marginals};
use crate::lm::ModelConfig;
use crate::lora::LoraConfig;
use crate::prompting::{AbsenceMode, KnowledgeConfig, DEFAULT_MAX_LEN};
use crate::training::TrainConfig;
use crate::vision::VisionServiceConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config key `{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl ConfigError {
    fn invalid(key: &str, message: impl Into<String>) -> Self {
        ConfigError::Invalid { key: key.to_string(), message: message.into() }
    }

    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid { key, .. } => Some(key),
            ConfigError::Io { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Run seed; every random stream is a labeled sub-seed of it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpus: CorpusSection,
    pub vision: VisionSection,
    pub knowledge: KnowledgeConfig,
    pub prompting: PromptingSection,
    pub model: ModelConfig,
    pub lora: LoraConfig,
    pub quantization: QuantizationSection,
    pub training: TrainConfig,
    pub split: SplitSection,
    pub eval: EvalSection,
    pub attribution: AttributionSection,
    pub baselines: BaselineSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            corpus: CorpusSection::default(),
            vision: VisionSection::default(),
            knowledge: KnowledgeConfig::all(),
            prompting: PromptingSection::default(),
            model: ModelConfig::default(),
            lora: LoraConfig::default(),
            quantization: QuantizationSection::default(),
            training: TrainConfig::default(),
            split: SplitSection::default(),
            eval: EvalSection::default(),
            attribution: AttributionSection::default(),
            baselines: BaselineSection::default(),
        }
    }
}

/// Either CSV files (`sites` and `observations`) or a `[corpus.synthetic]` block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub sites: Option<PathBuf>,
    pub observations: Option<PathBuf>,
    pub synthetic: Option<SyntheticSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub n_sites: usize,
    pub n_observations: usize,
    pub truth: GroundTruth,
    pub marginals: Marginals,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection {
            n_sites: 35,
            n_observations: 687,
            truth: GroundTruth::default(),
            marginals: Marginals::default(),
        }
    }
}

impl SyntheticSection {
    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig { truth: self.truth.clone(), marginals: self.marginals.clone() }
    }
}

/// Resolved corpus source.
#[derive(Debug, Clone, PartialEq)]
pub enum CorpusSource<'a> {
    Files { sites: &'a Path, observations: &'a Path },
    Synthetic(&'a SyntheticSection),
}

impl CorpusSection {
    pub fn source(&self) -> Result<CorpusSource<'_>, ConfigError> {
        match (&self.sites, &self.observations, &self.synthetic) {
            (Some(s), Some(o), None) => Ok(CorpusSource::Files { sites: s, observations: o }),
            (None, None, Some(syn)) => Ok(CorpusSource::Synthetic(syn)),
            (None, None, None) => Err(ConfigError::invalid(
                "corpus",
                "no corpus source: set corpus.sites and corpus.observations, or add [corpus.synthetic]",
            )),
            (Some(_), None, _) => Err(ConfigError::invalid("corpus.observations", "missing (corpus.sites is set)")),
            (None, Some(_), _) => Err(ConfigError::invalid("corpus.sites", "missing (corpus.observations is set)")),
            (Some(_), Some(_), Some(_)) => Err(ConfigError::invalid(
                "corpus.synthetic",
                "only one corpus source may be given; remove the CSV paths or the synthetic block",
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VisionSourceKind {
    #[default]
    Stub,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct VisionSection {
    pub source: VisionSourceKind,
    /// Required when `source = "external"`.
    pub service: Option<VisionServiceConfig>,
    /// Description cache (JSON); defaults to `<output_dir>/vision_cache.json`.
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptingSection {
    pub max_len: usize,
}

impl Default for PromptingSection {
    fn default() -> Self {
        PromptingSection { max_len: DEFAULT_MAX_LEN }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizationSection {
    /// Quantize the frozen base to nf4 before attaching adapters.
    pub enabled: bool,
    pub block_size: usize,
}

impl Default for QuantizationSection {
    fn default() -> Self {
        QuantizationSection { enabled: false, block_size: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    #[default]
    Stratified,
    SiteBased,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub strategy: SplitKind,
    /// Train/validation/test fractions for the stratified protocol.
    pub ratios: [f64; 3],
    /// Train/validation/test site counts for the site-based protocol.
    pub site_counts: [usize; 3],
    /// One stratified run per seed; their metrics are averaged.
    pub seeds: Vec<u64>,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            strategy: SplitKind::Stratified,
            ratios: [0.70, 0.15, 0.15],
            site_counts: [22, 5, 5],
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// In-context exemplars for cross-site evaluation (0 = zero-shot).
    pub few_shot: usize,
    /// Worker threads for prediction and attribution; 0 = all cores.
    pub threads: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { few_shot: 0, threads: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionSection {
    pub absence: AbsenceMode,
    /// Cases attributed by the aggregate report (taken from the test partition
    /// in id order); 0 means all.
    pub max_cases: usize,
}

impl Default for AttributionSection {
    fn default() -> Self {
        AttributionSection { absence: AbsenceMode::Placeholder, max_cases: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub l2: f64,
    pub l2_site: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for BaselineSection {
    fn default() -> Self {
        BaselineSection { l2: 1.0, l2_site: 1.0, max_iter: 100, tol: 1e-8 }
    }
}

impl BaselineSection {
    pub fn fit_options(&self) -> FitOptions {
        FitOptions { l2: self.l2, max_iter: self.max_iter, tol: self.tol }
    }
}

/// Dotted key of the `key = value` line containing byte `offset`, using the
/// closest preceding `[table]` header as prefix.
fn key_at(text: &str, offset: usize) -> Option<String> {
    let offset = offset.min(text.len());
    let line_start = text[..offset].rfind('\n').map_or(0, |i| i + 1);
    let line_end = text[offset..].find('\n').map_or(text.len(), |i| offset + i);
    let line = text[line_start..line_end].trim();
    let mut table = String::new();
    for l in text[..line_start].lines() {
        let l = l.trim();
        if l.starts_with('[') && l.ends_with(']') {
            table = l.trim_matches(|c| c == '[' || c == ']').trim().to_string();
        }
    }
    if line.starts_with('[') {
        return Some(line.trim_matches(|c| c == '[' || c == ']').trim().to_string());
    }
    let key = line.split('=').next()?.trim().trim_matches('"');
    if key.is_empty() {
        return None;
    }
    Some(if table.is_empty() { key.to_string() } else { format!("{table}.{key}") })
}

/// Extract the field name from a serde message such as "unknown field `x`".
fn quoted(message: &str) -> Option<&str> {
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(&message[start..start + len])
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            let mut key = e.span().and_then(|s| key_at(text, s.start)).unwrap_or_else(|| "<root>".into());
            if message.starts_with("unknown field") || message.starts_with("missing field") {
                if let Some(field) = quoted(&message) {
                    let table = key.rsplit_once('.').map(|(t, _)| t.to_string());
                    let is_header = text.contains(&format!("[{key}]"));
                    key = match (is_header, table) {
                        (true, _) => format!("{key}.{field}"),
                        (false, Some(t)) => format!("{t}.{field}"),
                        (false, None) => field.to_string(),
                    };
                }
            }
            ConfigError::Invalid { key, message }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    /// Default configuration with the synthetic corpus enabled.
    pub fn synthetic_default() -> Self {
        let mut c = RunConfig::default();
        c.corpus.synthetic = Some(SyntheticSection::default());
        c
    }

    /// Semantic checks beyond parsing. Paths are checked for existence.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |k: &str, m: &str| Err(ConfigError::invalid(k, m));
        match self.corpus.source()? {
            CorpusSource::Files { sites, observations } => {
                if !sites.exists() {
                    return bad("corpus.sites", &format!("{} does not exist", sites.display()));
                }
                if !observations.exists() {
                    return bad("corpus.observations", &format!("{} does not exist", observations.display()));
                }
            }
            CorpusSource::Synthetic(s) => {
                if s.n_sites == 0 {
                    return bad("corpus.synthetic.n_sites", "must be >= 1");
                }
                if s.n_observations == 0 {
                    return bad("corpus.synthetic.n_observations", "must be >= 1");
                }
                let r = s.truth.target_midblock_rate;
                if !(r > 0.0 && r < 1.0) {
                    return bad("corpus.synthetic.truth.target_midblock_rate", "must be in (0, 1)");
                }
                if !(s.truth.site_effect_sd >= 0.0) {
                    return bad("corpus.synthetic.truth.site_effect_sd", "must be >= 0");
                }
            }
        }
        match (self.vision.source, &self.vision.service) {
            (VisionSourceKind::External, None) => {
                return bad("vision.service", "required when vision.source = \"external\"");
            }
            (VisionSourceKind::External, Some(s)) => {
                s.validate().map_err(|e| ConfigError::invalid("vision.service", e.to_string()))?;
            }
            (VisionSourceKind::Stub, _) => {}
        }
        if self.prompting.max_len < 16 {
            return bad("prompting.max_len", "must be >= 16");
        }
        if self.prompting.max_len > self.model.max_seq_len {
            return bad("prompting.max_len", "exceeds model.max_seq_len");
        }
        let m = &self.model;
        if m.n_layers == 0 {
            return bad("model.n_layers", "must be >= 1");
        }
        if m.n_heads == 0 || m.d_model % m.n_heads != 0 {
            return bad("model.n_heads", "must be >= 1 and divide model.d_model");
        }
        if m.d_ff == 0 {
            return bad("model.d_ff", "must be >= 1");
        }
        if m.max_seq_len == 0 {
            return bad("model.max_seq_len", "must be >= 1");
        }
        if self.lora.rank == 0 {
            return bad("lora.rank", "must be >= 1");
        }
        if !(self.lora.alpha > 0.0) {
            return bad("lora.alpha", "must be > 0");
        }
        if !(0.0..1.0).contains(&self.lora.dropout) {
            return bad("lora.dropout", "must be in [0, 1)");
        }
        if self.lora.target_modules.is_empty() {
            return bad("lora.target_modules", "must name at least one of q, k, v, o");
        }
        if self.quantization.block_size == 0 {
            return bad("quantization.block_size", "must be >= 1");
        }
        let t = &self.training;
        if !(t.learning_rate > 0.0) {
            return bad("training.learning_rate", "must be > 0");
        }
        if !(t.weight_decay >= 0.0) {
            return bad("training.weight_decay", "must be >= 0");
        }
        if t.effective_batch == 0 {
            return bad("training.effective_batch", "must be >= 1");
        }
        if t.micro_batch == 0 || t.effective_batch % t.micro_batch != 0 {
            return bad("training.micro_batch", "must be >= 1 and divide training.effective_batch");
        }
        if t.max_epochs == 0 {
            return bad("training.max_epochs", "must be >= 1");
        }
        if t.patience == 0 {
            return bad("training.patience", "must be >= 1");
        }
        if !(t.clip_norm > 0.0) {
            return bad("training.clip_norm", "must be > 0");
        }
        if !(0.0..1.0).contains(&t.beta1) {
            return bad("training.beta1", "must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&t.beta2) {
            return bad("training.beta2", "must be in [0, 1)");
        }
        if !(t.eps > 0.0) {
            return bad("training.eps", "must be > 0");
        }
        let r = self.split.ratios;
        if r.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || r.iter().sum::<f64>() <= 0.0 {
            return bad("split.ratios", "must be three non-negative fractions with a positive sum");
        }
        if self.split.site_counts.iter().any(|c| *c == 0) {
            return bad("split.site_counts", "each partition needs at least one site");
        }
        if self.split.seeds.is_empty() {
            return bad("split.seeds", "must list at least one seed");
        }
        let b = &self.baselines;
        if !(b.l2 >= 0.0 && b.l2.is_finite()) {
            return bad("baselines.l2", "must be finite and >= 0");
        }
        if !(b.l2_site >= 0.0 && b.l2_site.is_finite()) {
            return bad("baselines.l2_site", "must be finite and >= 0");
        }
        if !(b.tol > 0.0) {
            return bad("baselines.tol", "must be > 0");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn err_key(text: &str) -> String {
        RunConfig::from_toml(text).unwrap_err().key().unwrap().to_string()
    }

    #[test]
    fn synthetic_block_is_enough() {
        let c = RunConfig::from_toml("[corpus.synthetic]\n").unwrap();
        assert_eq!(c.corpus.synthetic.as_ref().unwrap().n_observations, 687);
        assert_eq!(c.training.patience, 15);
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig::synthetic_default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(err_key(""), "corpus");
        assert_eq!(err_key("[corpus.synthetic]\n[training]\nlearning_rate = -1.0\n"), "training.learning_rate");
        assert_eq!(err_key("[corpus.synthetic]\n[training]\nlearning_rate = \"fast\"\n"), "training.learning_rate");
        assert_eq!(err_key("[corpus.synthetic]\n[training]\nlr = 0.1\n"), "training.lr");
        assert_eq!(err_key("[corpus.synthetic]\n[training]\nmicro_batch = 5\n"), "training.micro_batch");
        assert_eq!(err_key("[corpus.synthetic]\n[vision]\nsource = \"external\"\n"), "vision.service");
        assert_eq!(err_key("colour = 1\n[corpus.synthetic]\n"), "colour");
        assert_eq!(err_key("[corpus.synthetic]\nbogus = 1\n"), "corpus.synthetic.bogus");
        assert_eq!(err_key("[corpus.synthetic.truth]\nmale = \"x\"\n"), "corpus.synthetic.truth.male");
        assert_eq!(
            err_key("[corpus]\nsites = \"/nonexistent/sites.csv\"\nobservations = \"/nonexistent/o.csv\"\n"),
            "corpus.sites"
        );
    }
}
