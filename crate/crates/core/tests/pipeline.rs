//! The whole pipeline on a tiny synthetic corpus and model.

use std::fs;
use std::path::Path;

use xwalk_core::config::{RunConfig, SplitKind, SyntheticSection};
use xwalk_core::corpus::Partition;
use xwalk_core::lm::ModelConfig;
use xwalk_core::pipeline::{self, Prepared, RunLock, RunSelector, Workspace};
use xwalk_core::prompting::KnowledgeConfig;
use xwalk_core::{eval, nf4, Error};

fn tiny(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::synthetic_default();
    cfg.output_dir = root.to_path_buf();
    cfg.seed = 5;
    cfg.corpus.synthetic = Some(SyntheticSection { n_sites: 10, n_observations: 160, ..SyntheticSection::default() });
    cfg.model = ModelConfig { n_layers: 1, n_heads: 2, d_model: 16, d_ff: 32, ..ModelConfig::default() };
    cfg.training.max_epochs = 2;
    cfg.training.warmup_steps = 2;
    cfg.split.site_counts = [6, 2, 2];
    cfg.split.seeds = vec![0, 1];
    cfg.attribution.max_cases = 2;
    cfg.eval.threads = 1;
    cfg
}

fn stratified(k: KnowledgeConfig) -> RunSelector {
    RunSelector { protocol: SplitKind::Stratified, knowledge: k }
}

#[test]
fn end_to_end_on_a_tiny_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let ws = Workspace::new(dir.path());

    let corpus = pipeline::generate(&cfg, &ws, false).unwrap();
    assert_eq!((corpus.sites.len(), corpus.observations.len()), (10, 160));
    assert!(matches!(pipeline::generate(&cfg, &ws, false), Err(Error::Exists(_))));
    pipeline::generate(&cfg, &ws, true).unwrap();

    let prep = Prepared::load(&cfg, &ws).unwrap();
    let dump = pipeline::build_prompts(&cfg, &ws, &prep, &KnowledgeConfig::all(), false).unwrap();
    assert_eq!(fs::read_to_string(&dump).unwrap().lines().count(), 160);
    assert!(ws.vocab().exists());

    // stratified, two arms
    let full = stratified(KnowledgeConfig::all());
    let manifests = pipeline::train(&cfg, &ws, &prep, &full, false, false).unwrap();
    assert_eq!(manifests.len(), 2);
    for m in &manifests {
        assert_eq!(m.epochs_run, 2);
        assert!(m.trainable_parameters < m.total_parameters);
        for f in ["base.json", "adapters.json", "train_state.json", "manifest.json", "split.json", "train_log.csv"] {
            assert!(ws.run_dir(SplitKind::Stratified, "full", m.split_seed).join(f).exists(), "{f}");
        }
    }
    assert!(matches!(pipeline::train(&cfg, &ws, &prep, &full, false, false), Err(Error::Exists(_))));
    pipeline::train(&cfg, &ws, &prep, &stratified(KnowledgeConfig::none()), false, false).unwrap();

    let res = pipeline::eval_stratified(&cfg, &ws, &prep, &KnowledgeConfig::all()).unwrap();
    assert_eq!(res.model.len(), 2);
    assert_eq!(res.logistic.len(), 2);
    let table5 = fs::read_to_string(ws.reports().join("table5_full.csv")).unwrap();
    assert_eq!(table5.lines().count(), 4);
    pipeline::eval_stratified(&cfg, &ws, &prep, &KnowledgeConfig::none()).unwrap();

    // cross-site with exemplars
    let cross = RunSelector { protocol: SplitKind::SiteBased, knowledge: KnowledgeConfig::all() };
    pipeline::train(&cfg, &ws, &prep, &cross, false, false).unwrap();
    let reports = pipeline::eval_cross_site(&cfg, &ws, &prep, &KnowledgeConfig::all(), 2).unwrap();
    assert_eq!(reports.len(), 2);
    for s in [0, 1] {
        for t in ["table7", "table8"] {
            assert!(ws.reports().join(format!("{t}_full_seed{s}.csv")).exists());
        }
    }

    // attribution
    let split = pipeline::split_for(&cfg, &prep.corpus, SplitKind::Stratified, 0).unwrap();
    let case_id = split.test.iter().next().unwrap().clone();
    let case = pipeline::attribute_case(&cfg, &ws, &prep, &full, &case_id).unwrap();
    assert!(case.efficiency_residual() < 1e-9);
    assert!(ws.reports().join("attribution").join(format!("case_{case_id}.json")).exists());
    assert!(matches!(pipeline::attribute_case(&cfg, &ws, &prep, &full, "nope"), Err(Error::UnknownObservation(id)) if id == "nope"));
    let agg = pipeline::attribute_aggregate(&cfg, &ws, &prep, &full).unwrap();
    assert_eq!(agg.n_cases, 2);
    let pct: f64 = agg.rows.iter().map(|r| r.contribution_percent).sum();
    assert!((pct - 100.0).abs() < 0.1 || pct == 0.0);

    let summary = pipeline::report(&ws).unwrap();
    assert!(summary.contains("== table6.csv"));
    let table6 = fs::read_to_string(ws.reports().join("table6.csv")).unwrap();
    let none_at = table6.find("Knowledge: none").unwrap();
    let full_at = table6.find("Knowledge: full").unwrap();
    assert!(none_at < full_at);

    // quantizing the trained base keeps the answer-token decision
    let (model, _) = pipeline::load_run(&ws, &prep, &full, 0).unwrap();
    let quantized = nf4::quantize_frozen(model.clone(), 64).unwrap();
    let test = split.select(&prep.corpus.observations, Partition::Test);
    let mut agree = 0;
    for o in &test {
        let p = prep.prompt(o, &KnowledgeConfig::all(), &[]).unwrap();
        let a = eval::predict(&model, &p, &prep.vocab).unwrap();
        let b = eval::predict(&quantized, &p, &prep.vocab).unwrap();
        agree += (a.predicted == b.predicted) as usize;
    }
    assert!(agree as f64 >= 0.95 * test.len() as f64, "{agree} of {}", test.len());
}

#[test]
fn identical_configs_give_identical_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for dir in [a.path(), b.path()] {
        let mut cfg = tiny(dir);
        cfg.split.seeds = vec![0];
        let ws = Workspace::new(dir);
        pipeline::generate(&cfg, &ws, false).unwrap();
        let prep = Prepared::load(&cfg, &ws).unwrap();
        pipeline::train(&cfg, &ws, &prep, &stratified(KnowledgeConfig::all()), false, false).unwrap();
        let run = ws.run_dir(SplitKind::Stratified, "full", 0);
        bytes.push([
            fs::read(ws.observations_csv()).unwrap(),
            fs::read(ws.sites_csv()).unwrap(),
            fs::read(run.join("adapters.json")).unwrap(),
            fs::read(run.join("split.json")).unwrap(),
        ]);
    }
    assert!(bytes[0] == bytes[1]);
}

#[test]
fn missing_runs_and_held_locks_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let ws = Workspace::new(dir.path());
    let prep = Prepared::load(&cfg, &ws).unwrap();
    assert!(matches!(pipeline::report(&ws), Err(Error::MissingRun(_))));
    assert!(matches!(pipeline::eval_stratified(&cfg, &ws, &prep, &KnowledgeConfig::all()), Err(Error::MissingRun(_))));

    let lock = RunLock::acquire(dir.path()).unwrap();
    assert!(matches!(RunLock::acquire(dir.path()), Err(Error::Locked(_))));
    drop(lock);
    RunLock::acquire(dir.path()).unwrap();
}
