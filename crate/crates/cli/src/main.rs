//! `xwalk`: generate a corpus, build prompts, fine-tune, evaluate, attribute.
//!
//! Exit status: 0 success, 1 usage or configuration error, 2 data or runtime
//! error, 3 leakage guard tripped.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use xwalk_core::config::{RunConfig, SplitKind};
use xwalk_core::pipeline::{self, Prepared, RunLock, RunSelector, Workspace};
use xwalk_core::prompting::KnowledgeConfig;
use xwalk_core::{eval, Error, Result};

#[derive(Debug, Parser)]
#[command(name = "xwalk", version, about = "Pedestrian crossing-location inference with a LoRA-adapted toy language model")]
struct Cli {
    /// TOML run configuration; without it the synthetic defaults are used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overwrite existing artifacts.
    #[arg(long, global = true)]
    force: bool,
    /// Override the output directory.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Protocol {
    Stratified,
    CrossSite,
}

impl From<Protocol> for SplitKind {
    fn from(p: Protocol) -> Self {
        match p {
            Protocol::Stratified => SplitKind::Stratified,
            Protocol::CrossSite => SplitKind::SiteBased,
        }
    }
}

#[derive(Debug, Args)]
struct Arm {
    /// Knowledge arm: full, none, individual or environment (default: the config's flags).
    #[arg(long)]
    ablation: Option<String>,
}

impl Arm {
    fn knowledge(&self, cfg: &RunConfig) -> Result<KnowledgeConfig> {
        match &self.ablation {
            None => Ok(cfg.knowledge),
            Some(name) => KnowledgeConfig::ablation(name)
                .ok_or_else(|| Error::Usage(format!("unknown --ablation {name:?}; expected full, none, individual or environment"))),
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic corpus (sites.csv, observations.csv).
    Generate,
    /// Write the vocabulary and the prompt dump.
    BuildPrompts {
        #[command(flatten)]
        arm: Arm,
    },
    /// Fine-tune adapters, one run per split seed.
    Train {
        #[command(flatten)]
        arm: Arm,
        /// Split protocol (default: split.strategy from the config).
        #[arg(long, value_enum)]
        protocol: Option<Protocol>,
        /// Continue from the saved training state if one exists.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate trained runs on their test partitions.
    Eval {
        #[command(flatten)]
        arm: Arm,
        #[arg(long, value_enum)]
        protocol: Option<Protocol>,
        /// In-context exemplars for cross-site evaluation (default: eval.few_shot).
        #[arg(long)]
        few_shot: Option<usize>,
    },
    /// Shapley attribution over the seven prompt components.
    Attribute {
        #[command(flatten)]
        arm: Arm,
        #[arg(long, value_enum)]
        protocol: Option<Protocol>,
        /// Attribute one observation.
        #[arg(long, conflicts_with = "aggregate", required_unless_present = "aggregate")]
        case: Option<String>,
        /// Attribute the test partition and write the ranking table.
        #[arg(long)]
        aggregate: bool,
    },
    /// Collect the tables under reports/ into summary.txt.
    Report,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::synthetic_default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.output {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn selector(cfg: &RunConfig, arm: &Arm, protocol: Option<Protocol>) -> Result<RunSelector> {
    Ok(RunSelector {
        protocol: protocol.map(SplitKind::from).unwrap_or(cfg.split.strategy),
        knowledge: arm.knowledge(cfg)?,
    })
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let ws = Workspace::new(&cfg.output_dir);
    let _lock = RunLock::acquire(&ws.root)?;
    match &cli.command {
        Command::Generate => {
            let c = pipeline::generate(&cfg, &ws, cli.force)?;
            println!(
                "{} sites, {} observations ({:.1}% mid-block) -> {}",
                c.sites.len(),
                c.observations.len(),
                100.0 * xwalk_core::corpus::midblock_fraction(&c.observations),
                ws.root.display()
            );
        }
        Command::BuildPrompts { arm } => {
            let k = arm.knowledge(&cfg)?;
            let prep = Prepared::load(&cfg, &ws)?;
            let path = pipeline::build_prompts(&cfg, &ws, &prep, &k, cli.force)?;
            println!("vocabulary {} tokens ({}), prompts -> {}", prep.vocab.len(), prep.vocab.hash(), path.display());
        }
        Command::Train { arm, protocol, resume } => {
            let sel = selector(&cfg, arm, *protocol)?;
            let prep = Prepared::load(&cfg, &ws)?;
            for m in pipeline::train(&cfg, &ws, &prep, &sel, *resume, cli.force)? {
                println!(
                    "{} / {} / seed {}: best validation balanced accuracy {:.1}% at epoch {} of {}{} ({} trainable of {} parameters)",
                    m.protocol,
                    m.arm,
                    m.split_seed,
                    100.0 * m.best_val_balanced_accuracy,
                    m.best_epoch,
                    m.epochs_run,
                    if m.stopped_early { ", stopped early" } else { "" },
                    m.trainable_parameters,
                    m.total_parameters
                );
            }
        }
        Command::Eval { arm, protocol, few_shot } => {
            let sel = selector(&cfg, arm, *protocol)?;
            let prep = Prepared::load(&cfg, &ws)?;
            match sel.protocol {
                SplitKind::Stratified => {
                    let res = pipeline::eval_stratified(&cfg, &ws, &prep, &sel.knowledge)?;
                    for (name, s) in pipeline::table5_rows(&res)? {
                        for (seed, r) in res.seeds.iter().zip(&s.runs) {
                            println!("{}", eval::render_metrics(&format!("{name} [seed {seed}]"), r));
                        }
                    }
                }
                SplitKind::SiteBased => {
                    let k = few_shot.unwrap_or(cfg.eval.few_shot);
                    for (seed, r) in cfg.split.seeds.iter().zip(pipeline::eval_cross_site(&cfg, &ws, &prep, &sel.knowledge, k)?) {
                        println!("split seed {seed}\n{}", r.render_text());
                    }
                }
            }
            println!("reports -> {}", ws.reports().display());
        }
        Command::Attribute { arm, protocol, case, aggregate } => {
            let sel = selector(&cfg, arm, *protocol)?;
            let prep = Prepared::load(&cfg, &ws)?;
            if let Some(id) = case {
                let c = pipeline::attribute_case(&cfg, &ws, &prep, &sel, id)?;
                print!("{}", c.render_table());
            } else if *aggregate {
                let r = pipeline::attribute_aggregate(&cfg, &ws, &prep, &sel)?;
                print!("{}", r.render_text());
            }
        }
        Command::Report => print!("{}", pipeline::report(&ws)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
