//! End-to-end orchestration behind the command-line subcommands.
//!
//! Every artifact lives under one output directory:
//!
//! ```text
//! <output>/
//!   sites.csv, observations.csv      generate
//!   vision_cache.json                external vision descriptions
//!   vocab.json, prompts_<arm>.jsonl  build-prompts
//!   runs/<protocol>/<arm>/seed-<s>/  train (base.json, adapters.json,
//!                                    train_log.csv, train_state.json,
//!                                    split.json, manifest.json)
//!   reports/                         eval, attribute, report
//! ```
//!
//! `<arm>` names the knowledge configuration (`full`, `none`, `individual`,
//! `environment` or `custom`).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attribution::{self, CaseReport, ModelScorer, ShapleyReport};
use crate::baselines::{self, LogisticModel};
use crate::config::{CorpusSource, RunConfig, SplitKind, VisionSourceKind};
use crate::corpus::{self, Partition, PedestrianObservation, SiteRecord, SplitAssignment};
use crate::eval::{self, AnswerTokens, CrossSiteReport, MetricReport, Prediction, RepeatedSummary};
use crate::lm::{self, ModelParams};
use crate::lora;
use crate::nf4;
use crate::prompting::{self, FewShotExample, KnowledgeConfig, Prompt, PromptDumpRecord, TokenizedPrompt, Vocabulary};
use crate::seeds::sub_seed;
use crate::training::{self, TrainOptions, TrainState};
use crate::vision::{self, VisionDescription};
use crate::{Error, Result};

/// Paths of every artifact under the output directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn sites_csv(&self) -> PathBuf {
        self.root.join("sites.csv")
    }

    pub fn observations_csv(&self) -> PathBuf {
        self.root.join("observations.csv")
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.json")
    }

    pub fn prompts(&self, arm: &str) -> PathBuf {
        self.root.join(format!("prompts_{arm}.jsonl"))
    }

    pub fn run_dir(&self, protocol: SplitKind, arm: &str, split_seed: u64) -> PathBuf {
        self.root.join("runs").join(protocol_name(protocol)).join(arm).join(format!("seed-{split_seed}"))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    fn ensure(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
    }
}

pub fn protocol_name(p: SplitKind) -> &'static str {
    match p {
        SplitKind::Stratified => "stratified",
        SplitKind::SiteBased => "cross_site",
    }
}

/// Name of a knowledge configuration's ablation arm.
pub fn arm_name(k: &KnowledgeConfig) -> &'static str {
    for name in ["full", "none", "individual", "environment"] {
        if KnowledgeConfig::ablation(name).as_ref() == Some(k) {
            return name;
        }
    }
    "custom"
}

/// Exclusive hold on an output directory; released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = root.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub sites: Vec<SiteRecord>,
    pub observations: Vec<PedestrianObservation>,
}

impl Corpus {
    pub fn site(&self, site_id: &str) -> Option<&SiteRecord> {
        self.sites.iter().find(|s| s.site_id == site_id)
    }
}

/// Load the configured corpus. A synthetic block is regenerated from the run
/// seed, which reproduces the files `generate` writes.
pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    match cfg.corpus.source()? {
        CorpusSource::Files { sites, observations } => {
            let (sites, observations) = corpus::load_corpus(sites, observations)?;
            Ok(Corpus { sites, observations })
        }
        CorpusSource::Synthetic(syn) => {
            let c = corpus::generate_with(&syn.generator(), syn.n_sites, syn.n_observations, sub_seed(cfg.seed, "data"))?;
            Ok(Corpus { sites: c.sites, observations: c.observations })
        }
    }
}

/// Write the synthetic corpus as `sites.csv` and `observations.csv`.
pub fn generate(cfg: &RunConfig, ws: &Workspace, force: bool) -> Result<Corpus> {
    if !matches!(cfg.corpus.source()?, CorpusSource::Synthetic(_)) {
        return Err(crate::config::ConfigError::Invalid {
            key: "corpus.synthetic".into(),
            message: "generate needs a [corpus.synthetic] block".into(),
        }
        .into());
    }
    let (sp, op) = (ws.sites_csv(), ws.observations_csv());
    for p in [&sp, &op] {
        if p.exists() && !force {
            return Err(Error::Exists(p.clone()));
        }
    }
    ws.ensure(&ws.root)?;
    let c = load_corpus(cfg)?;
    corpus::write_corpus(&sp, &op, &c.sites, &c.observations)?;
    log::info!("wrote {} sites and {} observations to {}", c.sites.len(), c.observations.len(), ws.root.display());
    Ok(c)
}

/// One description per site, keyed by site id.
///
/// The stub is computed on the fly. External descriptions are read from the
/// cache; sites missing from it are fetched and the cache is rewritten.
pub fn vision_descriptions(cfg: &RunConfig, ws: &Workspace, sites: &[SiteRecord]) -> Result<BTreeMap<String, VisionDescription>> {
    let mut out = BTreeMap::new();
    match cfg.vision.source {
        VisionSourceKind::Stub => {
            let seed = sub_seed(cfg.seed, "vision");
            for s in sites {
                out.insert(s.site_id.clone(), vision::stub_description(s, seed));
            }
        }
        VisionSourceKind::External => {
            let service = cfg.vision.service.as_ref().ok_or_else(|| crate::config::ConfigError::Invalid {
                key: "vision.service".into(),
                message: "required when vision.source = \"external\"".into(),
            })?;
            let cache = cfg.vision.cache.clone().unwrap_or_else(|| ws.root.join("vision_cache.json"));
            if cache.exists() {
                for d in vision::read_cache(&cache)? {
                    out.insert(d.site_id.clone(), d);
                }
            }
            let missing: Vec<SiteRecord> = sites.iter().filter(|s| !out.contains_key(&s.site_id)).cloned().collect();
            if !missing.is_empty() {
                log::info!("fetching {} vision descriptions", missing.len());
                for r in vision::fetch_all(service, &missing) {
                    let d = r?;
                    out.insert(d.site_id.clone(), d);
                }
                if let Some(dir) = cache.parent() {
                    ws.ensure(dir)?;
                }
                let all: Vec<VisionDescription> = out.values().cloned().collect();
                vision::write_cache(&cache, &all, &chrono::Utc::now().to_rfc3339())?;
            }
        }
    }
    for d in out.values() {
        for w in vision::validate_description(d) {
            log::warn!("vision description for {}: {:?}", d.site_id, w);
        }
    }
    Ok(out)
}

/// Corpus plus everything derived from it that does not depend on a split.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub corpus: Corpus,
    pub vision: BTreeMap<String, VisionDescription>,
    pub vocab: Vocabulary,
}

impl Prepared {
    pub fn load(cfg: &RunConfig, ws: &Workspace) -> Result<Self> {
        let corpus = load_corpus(cfg)?;
        let vision = vision_descriptions(cfg, ws, &corpus.sites)?;
        let vocab = vocabulary(&corpus, &vision)?;
        Ok(Prepared { corpus, vision, vocab })
    }

    pub fn prompt(&self, obs: &PedestrianObservation, k: &KnowledgeConfig, few_shot: &[FewShotExample]) -> Result<Prompt> {
        let site = self.corpus.site(&obs.site_id).ok_or_else(|| corpus::CorpusError::DanglingSite {
            file: "observations".into(),
            row: self.corpus.observations.iter().position(|o| o.obs_id == obs.obs_id).map_or(0, |i| i + 1),
            site_id: obs.site_id.clone(),
        })?;
        let vision = self.vision.get(&obs.site_id).ok_or_else(|| vision::VisionError::Cache {
            path: PathBuf::from("vision descriptions"),
            message: format!("no description for site {}", obs.site_id),
        })?;
        Ok(prompting::build_prompt(obs, site, vision, k, few_shot)?)
    }

    pub fn observation(&self, obs_id: &str) -> Result<&PedestrianObservation> {
        self.corpus
            .observations
            .iter()
            .find(|o| o.obs_id == obs_id)
            .ok_or_else(|| Error::UnknownObservation(obs_id.to_string()))
    }

    fn pairs<'a>(&'a self, obs: &[&'a PedestrianObservation]) -> Vec<(&'a PedestrianObservation, &'a SiteRecord)> {
        obs.iter().filter_map(|o| self.corpus.site(&o.site_id).map(|s| (*o, s))).collect()
    }
}

/// Vocabulary over every rendered prompt with the full knowledge block.
///
/// It does not depend on the ablation arm, so one vocabulary (and hash)
/// serves every run of a corpus.
pub fn vocabulary(corpus: &Corpus, vision: &BTreeMap<String, VisionDescription>) -> Result<Vocabulary> {
    let prep = Prepared { corpus: corpus.clone(), vision: vision.clone(), vocab: Vocabulary::from_tokens(Vec::new()) };
    let mut texts = Vec::with_capacity(corpus.observations.len());
    for o in &corpus.observations {
        texts.push(prep.prompt(o, &KnowledgeConfig::all(), &[])?.render());
    }
    Ok(prompting::build_vocabulary(&texts)?)
}

/// Write `vocab.json` and one prompt dump per observation for `knowledge`.
pub fn build_prompts(cfg: &RunConfig, ws: &Workspace, prep: &Prepared, knowledge: &KnowledgeConfig, force: bool) -> Result<PathBuf> {
    let arm = arm_name(knowledge);
    let dump = ws.prompts(arm);
    if dump.exists() && !force {
        return Err(Error::Exists(dump));
    }
    ws.ensure(&ws.root)?;
    prep.vocab.save(&ws.vocab())?;
    let mut out = String::new();
    for o in &prep.corpus.observations {
        let p = prep.prompt(o, knowledge, &[])?;
        let (fitted, _) = prompting::fit_prompt(&p, &prep.vocab, cfg.prompting.max_len, 1)?;
        let tp = prompting::tokenize_for_training(&fitted, &prep.vocab, o.label, cfg.prompting.max_len)?;
        let line = serde_json::to_string(&PromptDumpRecord::new(&fitted, &tp)).map_err(|e| Error::json(&dump, e))?;
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(&dump, out).map_err(|e| Error::io(&dump, e))?;
    Ok(dump)
}

/// The split for one protocol and split seed.
pub fn split_for(cfg: &RunConfig, corpus: &Corpus, protocol: SplitKind, split_seed: u64) -> Result<SplitAssignment> {
    let seed = sub_seed(cfg.seed, &format!("split:{split_seed}"));
    Ok(match protocol {
        SplitKind::Stratified => corpus::stratified_split(&corpus.observations, cfg.split.ratios, seed)?,
        SplitKind::SiteBased => corpus::site_split(&corpus.sites, &corpus.observations, cfg.split.site_counts, seed)?,
    })
}

fn tokenize(cfg: &RunConfig, prep: &Prepared, obs: &[&PedestrianObservation], k: &KnowledgeConfig) -> Result<Vec<TokenizedPrompt>> {
    obs.iter()
        .map(|o| {
            let p = prep.prompt(o, k, &[])?;
            Ok(prompting::tokenize_for_training(&p, &prep.vocab, o.label, cfg.prompting.max_len)?)
        })
        .collect()
}

/// Frozen base model for this run: fresh init from the run seed, quantized
/// when configured.
pub fn base_model(cfg: &RunConfig, vocab: &Vocabulary) -> Result<ModelParams<f32>> {
    let mut mc = cfg.model.clone();
    mc.vocab_size = vocab.len();
    mc.seed = sub_seed(cfg.seed, &format!("init:{}", cfg.model.seed));
    mc.max_seq_len = mc.max_seq_len.max(cfg.prompting.max_len);
    let mut base = lm::init_model::<f32>(&mc)?;
    if cfg.quantization.enabled {
        base = nf4::quantize_frozen(base, cfg.quantization.block_size)?;
    }
    Ok(base)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub protocol: String,
    pub arm: String,
    pub knowledge: KnowledgeConfig,
    pub split_seed: u64,
    pub vocab_hash: String,
    pub frozen_hash: String,
    pub quantized: bool,
    pub trainable_parameters: usize,
    pub total_parameters: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_balanced_accuracy: f64,
    pub stopped_early: bool,
}

/// Which runs a command addresses.
#[derive(Debug, Clone)]
pub struct RunSelector {
    pub protocol: SplitKind,
    pub knowledge: KnowledgeConfig,
}

impl RunSelector {
    pub fn from_config(cfg: &RunConfig) -> Self {
        RunSelector { protocol: cfg.split.strategy, knowledge: cfg.knowledge }
    }

    pub fn arm(&self) -> &'static str {
        arm_name(&self.knowledge)
    }
}

/// Train one adapter set per split seed.
///
/// With `resume`, a run whose directory holds a training state continues
/// from it; otherwise an existing run is an error unless `force` is set.
pub fn train(cfg: &RunConfig, ws: &Workspace, prep: &Prepared, sel: &RunSelector, resume: bool, force: bool) -> Result<Vec<RunManifest>> {
    let mut out = Vec::new();
    for &split_seed in &cfg.split.seeds {
        out.push(train_one(cfg, ws, prep, sel, split_seed, resume, force)?);
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn train_one(
    cfg: &RunConfig,
    ws: &Workspace,
    prep: &Prepared,
    sel: &RunSelector,
    split_seed: u64,
    resume: bool,
    force: bool,
) -> Result<RunManifest> {
    let dir = ws.run_dir(sel.protocol, sel.arm(), split_seed);
    let state_path = dir.join("train_state.json");
    let resuming = resume && state_path.exists();
    if dir.join("manifest.json").exists() && !force && !resuming {
        return Err(Error::Exists(dir));
    }
    ws.ensure(&dir)?;
    let split = split_for(cfg, &prep.corpus, sel.protocol, split_seed)?;
    let train_obs = split.select(&prep.corpus.observations, Partition::Train);
    let val_obs = split.select(&prep.corpus.observations, Partition::Validation);
    eval::check_leakage(
        &split,
        train_obs.iter().chain(&val_obs).map(|o| o.obs_id.as_str()),
        std::iter::empty(),
    )?;
    let train_set = tokenize(cfg, prep, &train_obs, &sel.knowledge)?;
    let val_set = tokenize(cfg, prep, &val_obs, &sel.knowledge)?;

    let base = base_model(cfg, &prep.vocab)?;
    let vocab_hash = prep.vocab.hash();
    lm::save_checkpoint(&base, &vocab_hash, &dir.join("base.json"))?;
    write_json(&dir.join("split.json"), &split)?;
    let model = lora::attach(base, &cfg.lora, sub_seed(cfg.seed, "lora"))?;
    let frozen_hash = model.frozen_hash();

    let mut tc = cfg.training.clone();
    tc.seed = sub_seed(cfg.seed, &format!("train:{}:{split_seed}", cfg.training.seed));
    let resume_state = if resuming { Some(TrainState::load(&state_path)?) } else { None };
    let log_path = dir.join("train_log.csv");
    log::info!(
        "training {} / {} / seed {split_seed}: {} train, {} validation",
        protocol_name(sel.protocol),
        sel.arm(),
        train_set.len(),
        val_set.len()
    );
    let outcome = training::train(
        model,
        &train_set,
        &val_set,
        AnswerTokens::of(&prep.vocab),
        &tc,
        TrainOptions { log_path: Some(&log_path), resume: resume_state, epoch_limit: None },
    )?;
    lora::save_adapters(&outcome.model, &dir.join("adapters.json"))?;
    outcome.state.save(&state_path)?;
    let manifest = RunManifest {
        protocol: protocol_name(sel.protocol).into(),
        arm: sel.arm().into(),
        knowledge: sel.knowledge,
        split_seed,
        vocab_hash,
        frozen_hash,
        quantized: cfg.quantization.enabled,
        trainable_parameters: outcome.model.count_trainable(),
        total_parameters: outcome.model.count_all(),
        epochs_run: outcome.history.len(),
        best_epoch: outcome.best_epoch,
        best_val_balanced_accuracy: outcome.best_score,
        stopped_early: outcome.stopped_early,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Base checkpoint plus adapters of a finished run.
pub fn load_run(ws: &Workspace, prep: &Prepared, sel: &RunSelector, split_seed: u64) -> Result<(ModelParams<f32>, RunManifest)> {
    let dir = ws.run_dir(sel.protocol, sel.arm(), split_seed);
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::MissingRun(dir));
    }
    let manifest: RunManifest = read_json(&manifest_path)?;
    let (base, vocab_hash) = lm::load_checkpoint::<f32>(&dir.join("base.json"))?;
    if vocab_hash != prep.vocab.hash() {
        return Err(lm::ModelError::Checkpoint(format!(
            "{} was trained with vocabulary {vocab_hash}, current corpus gives {}",
            dir.display(),
            prep.vocab.hash()
        ))
        .into());
    }
    let model = lora::load_adapters(base, &dir.join("adapters.json"))?;
    Ok((model, manifest))
}

fn predict(cfg: &RunConfig, prep: &Prepared, model: &ModelParams<f32>, prompts: &[Prompt]) -> Result<Vec<Prediction>> {
    let items = prompts
        .iter()
        .map(|p| Ok((p.obs_id.clone(), prompting::encode_prompt(p, &prep.vocab, model.config.max_seq_len, 0)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(eval::predict_batch(model, &items, AnswerTokens::of(&prep.vocab), cfg.eval.threads)?)
}

/// Per-seed results of one model under the stratified protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedResult {
    pub arm: String,
    pub seeds: Vec<u64>,
    pub model: Vec<MetricReport>,
    pub logistic: Vec<MetricReport>,
    pub hierarchical: Vec<MetricReport>,
}

pub const MODEL_ROW: &str = "Tiny LM + LoRA";
pub const LOGISTIC_ROW: &str = "Logistic regression";
pub const HIERARCHICAL_ROW: &str = "Hierarchical logistic";

fn fit_baselines(
    cfg: &RunConfig,
    prep: &Prepared,
    split: &SplitAssignment,
    dir: &Path,
) -> Result<(LogisticModel, LogisticModel)> {
    let train_obs = split.select(&prep.corpus.observations, Partition::Train);
    let (x, y, sites) = baselines::encode_all(&train_obs, &prep.corpus.sites)?;
    let opts = cfg.baselines.fit_options();
    let plain = baselines::fit_logistic(&x, &y, &opts)?;
    let hier = baselines::fit_hierarchical(&x, &y, &sites, cfg.baselines.l2_site, &opts)?;
    plain.save(&dir.join("logistic.json"))?;
    hier.save(&dir.join("hierarchical.json"))?;
    Ok((plain, hier))
}

fn baseline_predictions(model: &LogisticModel, prep: &Prepared, obs: &[&PedestrianObservation]) -> Result<Vec<Prediction>> {
    let (x, _, sites) = baselines::encode_all(obs, &prep.corpus.sites)?;
    obs.iter()
        .zip(x.iter().zip(&sites))
        .map(|(o, (x, s))| Ok(model.predict(&o.obs_id, x, Some(s))?))
        .collect()
}

fn gold(obs: &[&PedestrianObservation]) -> Vec<corpus::Label> {
    obs.iter().map(|o| o.label).collect()
}

/// Test-partition metrics per split seed for the model and both baselines;
/// writes predictions, `stratified_<arm>.json` and `table5_<arm>.csv`.
pub fn eval_stratified(cfg: &RunConfig, ws: &Workspace, prep: &Prepared, knowledge: &KnowledgeConfig) -> Result<StratifiedResult> {
    let sel = RunSelector { protocol: SplitKind::Stratified, knowledge: *knowledge };
    let reports = ws.reports();
    ws.ensure(&reports)?;
    let mut res = StratifiedResult {
        arm: sel.arm().into(),
        seeds: cfg.split.seeds.clone(),
        model: Vec::new(),
        logistic: Vec::new(),
        hierarchical: Vec::new(),
    };
    for &s in &cfg.split.seeds {
        let (model, _) = load_run(ws, prep, &sel, s)?;
        let dir = ws.run_dir(sel.protocol, sel.arm(), s);
        let split = split_for(cfg, &prep.corpus, sel.protocol, s)?;
        let test = split.select(&prep.corpus.observations, Partition::Test);
        let g = gold(&test);
        let prompts = test.iter().map(|o| prep.prompt(o, knowledge, &[])).collect::<Result<Vec<_>>>()?;
        let preds = predict(cfg, prep, &model, &prompts)?;
        eval::write_predictions(&dir.join("test_predictions.csv"), &preds, &g)?;
        res.model.push(eval::evaluate(&preds, &g)?);

        let (plain, hier) = fit_baselines(cfg, prep, &split, &dir)?;
        res.logistic.push(eval::evaluate(&baseline_predictions(&plain, prep, &test)?, &g)?);
        res.hierarchical.push(eval::evaluate(&baseline_predictions(&hier, prep, &test)?, &g)?);
    }
    write_json(&reports.join(format!("stratified_{}.json", res.arm)), &res)?;
    eval::write_table5(&reports.join(format!("table5_{}.csv", res.arm)), &table5_rows(&res)?)?;
    Ok(res)
}

pub fn table5_rows(res: &StratifiedResult) -> Result<Vec<(String, RepeatedSummary)>> {
    Ok(vec![
        (LOGISTIC_ROW.to_string(), RepeatedSummary::from_any(res.logistic.clone())?),
        (HIERARCHICAL_ROW.to_string(), RepeatedSummary::from_any(res.hierarchical.clone())?),
        (format!("{MODEL_ROW} ({})", res.arm), RepeatedSummary::from_any(res.model.clone())?),
    ])
}

/// Site-held-out evaluation: zero-shot and, when `few_shot > 0`, `few_shot`
/// exemplars drawn from validation sites. One report per split seed.
pub fn eval_cross_site(
    cfg: &RunConfig,
    ws: &Workspace,
    prep: &Prepared,
    knowledge: &KnowledgeConfig,
    few_shot: usize,
) -> Result<Vec<CrossSiteReport>> {
    let sel = RunSelector { protocol: SplitKind::SiteBased, knowledge: *knowledge };
    let reports = ws.reports();
    ws.ensure(&reports)?;
    let mut out = Vec::new();
    for &s in &cfg.split.seeds {
        let (model, _) = load_run(ws, prep, &sel, s)?;
        let split = split_for(cfg, &prep.corpus, sel.protocol, s)?;
        let report = cross_site_report(cfg, prep, &model, &split, knowledge, few_shot)?;
        let tag = format!("{}_seed{s}", sel.arm());
        report.write_csv(&reports.join(format!("table8_{tag}.csv")))?;
        report.write_table7(&reports.join(format!("table7_{tag}.csv")))?;
        write_json(&reports.join(format!("cross_site_{tag}.json")), &report)?;
        out.push(report);
    }
    Ok(out)
}

/// Exemplars for one split, after the leakage guard has cleared them.
pub fn exemplars(cfg: &RunConfig, prep: &Prepared, split: &SplitAssignment, k: usize) -> Result<Vec<FewShotExample>> {
    let val = split.select(&prep.corpus.observations, Partition::Validation);
    let pairs = prep.pairs(&val);
    let chosen = eval::few_shot_context(&pairs, k, sub_seed(cfg.seed, &format!("few-shot:{}", split.seed)))?;
    let train = split.select(&prep.corpus.observations, Partition::Train);
    eval::check_leakage(split, train.iter().map(|o| o.obs_id.as_str()), chosen.iter().map(|e| e.obs_id.as_str()))?;
    Ok(chosen)
}

pub fn cross_site_report(
    cfg: &RunConfig,
    prep: &Prepared,
    model: &ModelParams<f32>,
    split: &SplitAssignment,
    knowledge: &KnowledgeConfig,
    few_shot: usize,
) -> Result<CrossSiteReport> {
    let test = split.select(&prep.corpus.observations, Partition::Test);
    let mut variants = Vec::new();
    let shots: Vec<usize> = if few_shot > 0 { vec![0, few_shot] } else { vec![0] };
    for k in shots {
        let ex = exemplars(cfg, prep, split, k)?;
        let prompts = test.iter().map(|o| prep.prompt(o, knowledge, &ex)).collect::<Result<Vec<_>>>()?;
        let name = if k == 0 { "Zero-shot".to_string() } else { format!("Few-shot (k={k})") };
        variants.push((name, predict(cfg, prep, model, &prompts)?));
    }
    Ok(eval::cross_site_eval(split, &prep.corpus.sites, &prep.corpus.observations, &variants)?)
}

/// Attribution for one observation of the first split seed's run.
pub fn attribute_case(cfg: &RunConfig, ws: &Workspace, prep: &Prepared, sel: &RunSelector, obs_id: &str) -> Result<CaseReport> {
    let obs = prep.observation(obs_id)?;
    let (model, _) = load_run(ws, prep, sel, first_seed(cfg)?)?;
    let prompt = prep.prompt(obs, &sel.knowledge, &[])?;
    let scorer = ModelScorer { model: &model, vocab: &prep.vocab };
    let case = attribution::case_report(&scorer, &prompt, cfg.attribution.absence, cfg.eval.threads)?;
    let dir = ws.reports().join("attribution");
    ws.ensure(&dir)?;
    attribution::write_case_json(&dir.join(format!("case_{}.json", sanitize(obs_id))), &case)?;
    Ok(case)
}

/// Corpus-level attribution over the first `max_cases` test observations (id
/// order); writes `table9_<arm>.csv` and the per-case records.
pub fn attribute_aggregate(cfg: &RunConfig, ws: &Workspace, prep: &Prepared, sel: &RunSelector) -> Result<ShapleyReport> {
    let seed = first_seed(cfg)?;
    let (model, _) = load_run(ws, prep, sel, seed)?;
    let split = split_for(cfg, &prep.corpus, sel.protocol, seed)?;
    let mut test = split.select(&prep.corpus.observations, Partition::Test);
    test.sort_by(|a, b| a.obs_id.cmp(&b.obs_id));
    if cfg.attribution.max_cases > 0 {
        test.truncate(cfg.attribution.max_cases);
    }
    let prompts = test.iter().map(|o| prep.prompt(o, &sel.knowledge, &[])).collect::<Result<Vec<_>>>()?;
    let scorer = ModelScorer { model: &model, vocab: &prep.vocab };
    let (report, cases) = attribution::aggregate_report(&scorer, &prompts, cfg.attribution.absence, cfg.eval.threads)?;
    let reports = ws.reports();
    ws.ensure(&reports)?;
    report.write_csv(&reports.join(format!("table9_{}.csv", sel.arm())))?;
    let path = reports.join(format!("attribution_cases_{}.jsonl", sel.arm()));
    let mut lines = String::new();
    for c in &cases {
        lines.push_str(&serde_json::to_string(c).map_err(|e| Error::json(&path, e))?);
        lines.push('\n');
    }
    fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

fn first_seed(cfg: &RunConfig) -> Result<u64> {
    cfg.split.seeds.first().copied().ok_or_else(|| {
        crate::config::ConfigError::Invalid { key: "split.seeds".into(), message: "empty".into() }.into()
    })
}

fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Collect every report under `reports/` into `summary.txt`, building the
/// knowledge-ablation table from the stratified results found.
pub fn report(ws: &Workspace) -> Result<String> {
    let dir = ws.reports();
    if !dir.exists() {
        return Err(Error::MissingRun(dir));
    }
    let mut names: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    names.sort();
    let mut out = String::new();
    let mut ablation: Vec<(String, RepeatedSummary)> = Vec::new();
    for p in &names {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if name.starts_with("stratified_") && name.ends_with(".json") {
            let r: StratifiedResult = read_json(p)?;
            ablation.push((r.arm.clone(), RepeatedSummary::from_any(r.model.clone())?));
        }
    }
    if !ablation.is_empty() {
        let order = |a: &str| ["none", "individual", "environment", "full"].iter().position(|n| *n == a).unwrap_or(4);
        ablation.sort_by_key(|(a, _)| order(a));
        let rows: Vec<(String, RepeatedSummary)> = ablation.into_iter().map(|(a, s)| (format!("Knowledge: {a}"), s)).collect();
        eval::write_table5(&dir.join("table6.csv"), &rows)?;
        names.push(dir.join("table6.csv"));
        names.sort();
        names.dedup();
    }
    for p in &names {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.ends_with(".csv") {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            out.push_str(&format!("== {name}\n{text}\n"));
        }
    }
    let summary = dir.join("summary.txt");
    fs::write(&summary, &out).map_err(|e| Error::io(&summary, e))?;
    Ok(out)
}

/// Observation ids per partition, keyed for lookups.
pub fn partition_index(split: &SplitAssignment) -> HashMap<&str, Partition> {
    let mut m = HashMap::new();
    for (set, part) in [(&split.train, Partition::Train), (&split.validation, Partition::Validation), (&split.test, Partition::Test)] {
        for id in set {
            m.insert(id.as_str(), part);
        }
    }
    m
}

/// Sites appearing in each partition.
pub fn partition_sites(split: &SplitAssignment, obs: &[PedestrianObservation]) -> [BTreeSet<String>; 3] {
    let mut out: [BTreeSet<String>; 3] = Default::default();
    for o in obs {
        let i = match split.partition_of(&o.obs_id) {
            Some(Partition::Train) => 0,
            Some(Partition::Validation) => 1,
            Some(Partition::Test) => 2,
            None => continue,
        };
        out[i].insert(o.site_id.clone());
    }
    out
}
