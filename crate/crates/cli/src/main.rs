//! `oshp`: data preparation, meta-training and meta-testing from the shell.
//!
//! Relative output paths are resolved against `$OSHP_OUTPUT_ROOT` when it is
//! set. Every command that writes output also writes a run manifest holding
//! the resolved configuration and seed.

mod run;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use oshp_core::episodic_data::{
    build_meta_test_list, generate_synthetic_dataset, read_test_list, tailor_dataset, tailor_samples,
    write_test_list, SyntheticConfig,
};
use oshp_core::evaluation::{run_meta_test, FoldRow};
use oshp_core::trainer::{BetaPolicy, FgsInference, StepRecord};
use oshp_core::{
    Checkpoint, Dataset, DatasetManifest, Episode, EvalReport, FoldSpec, LabelMap, OneShotParser, Phase,
    TrainConfig, Trainer, Way,
};

use run::{output_path, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "oshp", version, about = "One-shot human parsing toolkit")]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a procedural dataset of part-labelled figures.
    GenSynthetic(GenSyntheticArgs),
    /// Merge classes and hide novel classes for one phase of a fold.
    Tailor(TailorArgs),
    /// Draw the meta-test support/query pair list of a fold.
    MakeTestlist(MakeTestlistArgs),
    /// Meta-train a model.
    Train(TrainArgs),
    /// Meta-test a checkpoint and add its scores to a report.
    Eval(EvalArgs),
    /// Print a report as a table with fold averages.
    Report(ReportArgs),
}

#[derive(Debug, clap::Args)]
struct GenSyntheticArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    image_size: Option<usize>,
    /// Comma-separated class names for the novel set of the emitted fold.
    #[arg(long, value_delimiter = ',', default_value = "hat,skirt")]
    novel: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PhaseArg {
    MetaTrain,
    MetaTest,
}

impl From<PhaseArg> for Phase {
    fn from(p: PhaseArg) -> Self {
        match p {
            PhaseArg::MetaTrain => Phase::MetaTrain,
            PhaseArg::MetaTest => Phase::MetaTest,
        }
    }
}

#[derive(Debug, clap::Args)]
struct TailorArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    fold: PathBuf,
    #[arg(long, value_enum)]
    phase: PhaseArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, clap::Args)]
struct MakeTestlistArgs {
    /// Untailored dataset manifest.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    fold: PathBuf,
    #[arg(long, default_value_t = 150)]
    min_evals: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, clap::Args)]
struct TrainArgs {
    /// Untailored dataset manifest.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    fold: PathBuf,
    /// TOML training configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epoch: Option<usize>,
    #[arg(long)]
    episodes_per_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// `linear` or a constant value in [0, 1].
    #[arg(long)]
    beta: Option<String>,
    #[arg(long, value_enum)]
    inference: Option<InferenceArg>,
    /// Output directory for the checkpoint, log and run manifest.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum InferenceArg {
    Npm,
    Agm,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProtocolArg {
    KWay,
    OneWay,
}

impl From<ProtocolArg> for Way {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::KWay => Way::KWay,
            ProtocolArg::OneWay => Way::OneWay,
        }
    }
}

#[derive(Debug, clap::Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Score the ground truth itself; a harness check.
    #[arg(long, conflicts_with = "checkpoint")]
    oracle: bool,
    /// Untailored dataset manifest, the one the test list was drawn from.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    fold: PathBuf,
    #[arg(long)]
    test_list: PathBuf,
    #[arg(long, value_enum, default_value = "k-way")]
    protocol: ProtocolArg,
    /// Report JSON to create or update.
    #[arg(long)]
    report: PathBuf,
    /// Row label; defaults to the fold's name.
    #[arg(long)]
    fold_name: Option<String>,
    /// Write predicted label maps here.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct ReportArgs {
    #[arg(long)]
    report: PathBuf,
    /// Also write the table to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log_level).init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            eprintln!("\n{}", Cli::command().render_usage());
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::Tailor(a) => tailor(a),
        Command::MakeTestlist(a) => make_testlist(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
    }
}

fn gen_synthetic(a: GenSyntheticArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<SyntheticConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SyntheticConfig::default(),
    };
    if let Some(s) = a.image_size {
        config.image_size = s;
    }
    config.validate()?;
    let out = output_path(&a.out);
    let manifest = generate_synthetic_dataset(&config, a.seed, &out)?;
    let mut novel = BTreeSet::new();
    for name in &a.novel {
        match manifest.class_names.iter().position(|n| n == name) {
            Some(id) if id > 0 => novel.insert(id as u8),
            _ => bail!("--novel names unknown class '{name}' (classes: {:?})", manifest.class_names),
        };
    }
    let mut fold = FoldSpec::identity(manifest.class_names.len(), novel);
    fold.name = "synthetic".into();
    fold.save(&out.join("fold.toml"))?;
    RunManifest::new("gen-synthetic", Some(a.seed), &config)?
        .with_input("novel", &a.novel)?
        .save(&out.join("run.json"))?;
    log::info!(
        "wrote {} samples and fold.toml to {}",
        manifest.entries.len(),
        out.display()
    );
    Ok(())
}

fn tailor(a: TailorArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let fold = FoldSpec::load(&a.fold)?;
    let out = output_path(&a.out);
    let phase: Phase = a.phase.into();
    let tailored = tailor_dataset(&manifest, &fold, phase, &out)?;
    RunManifest::new("tailor", None, &fold)?
        .with_input("manifest", &a.manifest)?
        .with_input("phase", phase)?
        .save(&out.join("run.json"))?;
    log::info!("wrote {} tailored entries to {}", tailored.entries.len(), out.display());
    Ok(())
}

fn load_phase(manifest: &Path, fold: &FoldSpec, phase: Phase) -> Result<Dataset> {
    let m = DatasetManifest::load(manifest)?;
    let raw = Dataset::load(&m)?;
    Ok(tailor_samples(&raw, fold, phase)?)
}

fn make_testlist(a: MakeTestlistArgs) -> Result<()> {
    let fold = FoldSpec::load(&a.fold)?;
    let data = load_phase(&a.manifest, &fold, Phase::MetaTest)?;
    let pairs = build_meta_test_list(&data, &fold, a.min_evals, a.seed)?;
    let out = output_path(&a.out);
    write_test_list(&out, &pairs)?;
    RunManifest::new("make-testlist", Some(a.seed), &fold)?
        .with_input("manifest", &a.manifest)?
        .with_input("min_evals", a.min_evals)?
        .save(&run::sidecar(&out))?;
    log::info!("wrote {} pairs to {}", pairs.len(), out.display());
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut c = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.max_epoch {
        c.max_epoch = v;
    }
    if let Some(v) = a.episodes_per_epoch {
        c.episodes_per_epoch = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = a.lr {
        c.initial_lr = v;
    }
    if let Some(v) = a.alpha {
        c.alpha = v;
    }
    if let Some(b) = &a.beta {
        c.beta = match b.as_str() {
            "linear" => BetaPolicy::Linear,
            v => BetaPolicy::Constant(
                v.parse()
                    .with_context(|| format!("--beta expects 'linear' or a number, got '{v}'"))?,
            ),
        };
    }
    if let Some(i) = a.inference {
        c.inference = match i {
            InferenceArg::Npm => FgsInference::Npm,
            InferenceArg::Agm => FgsInference::Agm,
        };
    }
    c.validate()?;
    Ok(c)
}

fn train(a: TrainArgs) -> Result<()> {
    let config = resolve_train_config(&a)?;
    let fold = FoldSpec::load(&a.fold)?;
    let data = load_phase(&a.manifest, &fold, Phase::MetaTrain)?;
    let out = output_path(&a.out);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    RunManifest::new("train", Some(config.seed), &config)?
        .with_input("manifest", &a.manifest)?
        .with_input("fold", &fold)?
        .save(&out.join("run.json"))?;

    let mut trainer = Trainer::new(config, fold.base_classes.clone())?;
    trainer.diagnostics_dir = Some(out.join("diagnostics"));
    let log_path = out.join("train_log.jsonl");
    let mut log_file = std::io::BufWriter::new(
        std::fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    let mut write_record = |r: &StepRecord| -> oshp_core::Result<()> {
        use std::io::Write;
        let line = serde_json::to_string(r).map_err(|e| oshp_core::Error::Contract(e.to_string()))?;
        writeln!(log_file, "{line}").map_err(|e| oshp_core::Error::io(&log_path, e))
    };
    trainer.train(&data, &mut write_record, &mut |s| {
        log::info!(
            "epoch {} beta {:.4} loss {:.4} steps {} skipped {}",
            s.epoch,
            s.beta,
            s.mean_loss.total,
            s.steps,
            s.skipped_episodes
        )
    })?;
    drop(write_record);
    std::io::Write::flush(&mut log_file)?;
    let ck_path = out.join("checkpoint.json");
    trainer.checkpoint().save(&ck_path)?;
    log::info!("wrote {}", ck_path.display());
    Ok(())
}

/// Predicts the ground truth.
struct Oracle;

impl OneShotParser for Oracle {
    fn parse(&self, episode: &Episode) -> oshp_core::Result<LabelMap> {
        episode
            .query_mask
            .clone()
            .ok_or_else(|| oshp_core::Error::Contract("the oracle needs ground truth".into()))
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let fold = FoldSpec::load(&a.fold)?;
    let data = load_phase(&a.manifest, &fold, Phase::MetaTest)?;
    let pairs = read_test_list(&a.test_list)?;
    let protocol: Way = a.protocol.into();
    let model;
    let parser: &dyn OneShotParser = match &a.checkpoint {
        Some(p) => {
            model = Trainer::from_checkpoint(Checkpoint::load(p)?)?.model;
            &model
        }
        None => &Oracle,
    };
    let dump = a.dump.as_deref().map(output_path);
    let scores = run_meta_test(parser, &data, &pairs, protocol, &fold, dump.as_deref())?;
    let name = a.fold_name.clone().unwrap_or_else(|| fold.name.clone());
    let row = match protocol {
        Way::KWay => FoldRow::from_scores(&name, Some(&scores), None),
        Way::OneWay => FoldRow::from_scores(&name, None, Some(&scores)),
    };
    let report_path = output_path(&a.report);
    let mut report = if report_path.exists() {
        EvalReport::load(&report_path)?
    } else {
        EvalReport::default()
    };
    report.upsert(row);
    report.save(&report_path)?;
    for (c, iou) in &scores.per_class_iou {
        log::info!("class {c} ({}): IoU {:.2}", data.class_name(*c), 100.0 * iou);
    }
    RunManifest::new("eval", None, &fold)?
        .with_input("checkpoint", &a.checkpoint)?
        .with_input("test_list", &a.test_list)?
        .with_input("protocol", protocol)?
        .save(&run::sidecar(&report_path))?;
    print!("{}", report.to_table());
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let report = EvalReport::load(&a.report)?;
    let table = report.to_table();
    print!("{table}");
    if let Some(out) = &a.out {
        let out = output_path(out);
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&out, &table).with_context(|| format!("writing {}", out.display()))?;
        RunManifest::new("report", None, &())?
            .with_input("report", &a.report)?
            .save(&run::sidecar(&out))?;
    }
    Ok(())
}
