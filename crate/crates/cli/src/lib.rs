//! The `mbsl` command line: dataset generation, grouping, pretraining,
//! probing and ablations driven by one experiment configuration.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mbsl_core::datagen::{self, MultiModalDataset};
use mbsl_core::grouping::{embed_and_group, EmbedMethod, GroupingVariant, ThresholdPolicy};
use mbsl_core::trainer::{ablate, linear_probe, run_pipeline, AblationVariant, RunMode, Splits};
use mbsl_core::{Error, GroupEncoderBank, Result};
use serde::Serialize;

pub use config::{ExperimentConfig, OutputConfig};

pub const DATASET_DIR: &str = "dataset";
pub const GROUPING_FILE: &str = "grouping.json";
pub const PRETRAIN_DIR: &str = "pretrain";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const PROBE_FILE: &str = "probe.json";
pub const ABLATION_DIR: &str = "ablation";

#[derive(Debug, Parser)]
#[command(
    name = "mbsl",
    version,
    about = "Multi-modal contrastive representation learning on synthetic biosignals"
)]
pub struct Cli {
    /// Experiment configuration (TOML, or JSON by extension).
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,

    #[command(flatten)]
    pub overrides: Overrides,

    #[command(subcommand)]
    pub command: Command,
}

/// Flags that override values from the configuration file.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Training seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Dataset generator seed.
    #[arg(long, global = true)]
    pub data_seed: Option<u64>,
    /// Number of generated windows.
    #[arg(long, global = true)]
    pub n_windows: Option<usize>,
    /// Pretraining epochs.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    /// Stop pretraining after this many optimizer steps.
    #[arg(long, global = true)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset into <out>/dataset.
    Generate,
    /// Group modalities and write <out>/grouping.json.
    Group {
        #[command(flatten)]
        data: DataArg,
        /// tsne or pca.
        #[arg(long, value_parser = parse_snake::<EmbedMethod>)]
        method: Option<EmbedMethod>,
        /// "median", "inf" or a positive distance.
        #[arg(long, value_parser = parse_threshold)]
        threshold: Option<ThresholdPolicy>,
        /// img, none, random or full.
        #[arg(long, value_parser = parse_snake::<GroupingVariant>)]
        variant: Option<GroupingVariant>,
    },
    /// Pretrain, probe, and write <out>/pretrain.
    Pretrain {
        #[command(flatten)]
        data: DataArg,
    },
    /// Probe a saved checkpoint and write <out>/probe.json.
    Probe {
        #[command(flatten)]
        data: DataArg,
        /// Defaults to <out>/pretrain/checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run ablation variants and write <out>/ablation.
    Ablate {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        ablation: AblationArgs,
    },
    /// generate, group, pretrain, probe and ablate in sequence.
    All {
        #[command(flatten)]
        ablation: AblationArgs,
    },
}

#[derive(Debug, Default, Args)]
pub struct DataArg {
    /// Dataset directory; generated from the config when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    /// Variants to run in parallel threads.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Comma-separated variant names; all eleven by default.
    #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
    pub variants: Vec<AblationVariant>,
}

fn parse_snake<T: serde::de::DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_threshold(s: &str) -> std::result::Result<ThresholdPolicy, String> {
    let value = match s.parse::<f64>() {
        Ok(v) if v.is_finite() => serde_json::json!(v),
        _ if s.eq_ignore_ascii_case("inf") => serde_json::Value::String("inf".into()),
        _ => serde_json::Value::String(s.to_string()),
    };
    serde_json::from_value(value).map_err(|e| e.to_string())
}

fn parse_variant(s: &str) -> std::result::Result<AblationVariant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(v) = &self.out {
            cfg.output.dir = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.training.seed = v;
        }
        if let Some(v) = self.data_seed {
            cfg.dataset.seed = v;
        }
        if let Some(v) = self.n_windows {
            cfg.dataset.n_windows = v;
        }
        if let Some(v) = self.epochs {
            cfg.training.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.training.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.training.lr = v;
        }
        if let Some(v) = self.max_steps {
            cfg.training.max_steps = Some(v);
        }
    }
}

/// Resolve the configuration of `cli`: file (or defaults), then flags.
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cli.overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    write_text(path, &text)
}

fn dataset(cfg: &ExperimentConfig, data: &DataArg) -> Result<MultiModalDataset> {
    match &data.data {
        Some(dir) => datagen::load(dir),
        None => datagen::generate(&cfg.dataset),
    }
}

pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.output.dir.join(DATASET_DIR);
    let ds = datagen::generate(&cfg.dataset)?;
    datagen::save(&ds, &dir)?;
    Ok(dir)
}

#[derive(Serialize)]
struct GroupingOutput<'a> {
    modalities: Vec<&'a str>,
    #[serde(flatten)]
    result: &'a mbsl_core::GroupingResult,
    points: &'a [mbsl_core::grouping::EmbeddedPoint],
}

pub fn cmd_group(
    cfg: &ExperimentConfig,
    data: &DataArg,
    method: Option<EmbedMethod>,
    threshold: Option<ThresholdPolicy>,
    variant: Option<GroupingVariant>,
) -> Result<mbsl_core::GroupingResult> {
    let ds = dataset(cfg, data)?;
    let mut g = cfg.grouping.clone();
    g.method = method.unwrap_or(g.method);
    g.threshold = threshold.unwrap_or(g.threshold);
    g.variant = variant.unwrap_or(g.variant);
    let (result, embedding) = embed_and_group(&ds, &g, g.variant, cfg.training.seed)?;
    let out = GroupingOutput {
        modalities: ds.modalities.iter().map(|m| m.name.as_str()).collect(),
        result: &result,
        points: &embedding.points,
    };
    write_json(&cfg.output.dir.join(GROUPING_FILE), &out)?;
    Ok(result)
}

pub fn cmd_pretrain(cfg: &ExperimentConfig, data: &DataArg) -> Result<mbsl_core::RunReport> {
    let ds = dataset(cfg, data)?;
    let out = run_pipeline(&ds, &cfg.pipeline(), RunMode::Pretrain, "pretrain")?;
    let dir = cfg.output.dir.join(PRETRAIN_DIR);
    out.bank.save(&dir.join(CHECKPOINT_DIR))?;
    write_json(&dir.join("report.json"), &out.report)?;
    write_json(&dir.join(GROUPING_FILE), &out.grouping)?;
    write_text(&dir.join("loss.csv"), &out.report.loss_csv())?;
    Ok(out.report)
}

pub fn cmd_probe(
    cfg: &ExperimentConfig,
    data: &DataArg,
    checkpoint: Option<&Path>,
) -> Result<mbsl_core::trainer::ProbeOutcome> {
    let default_ckpt = cfg.output.dir.join(PRETRAIN_DIR).join(CHECKPOINT_DIR);
    let bank = GroupEncoderBank::load(checkpoint.unwrap_or(&default_ckpt))?;
    let ds = dataset(cfg, data)?;
    let splits = Splits::new(&ds, &cfg.training)?;
    let out = linear_probe(&bank, &splits, &cfg.training.probe)?;
    write_json(&cfg.output.dir.join(PROBE_FILE), &out)?;
    Ok(out)
}

pub fn cmd_ablate(cfg: &ExperimentConfig, data: &DataArg, args: &AblationArgs) -> Result<mbsl_core::AblationTable> {
    let ds = dataset(cfg, data)?;
    let variants = if args.variants.is_empty() {
        AblationVariant::ALL.to_vec()
    } else {
        args.variants.clone()
    };
    let (table, reports) = ablate(&ds, &cfg.pipeline(), &variants, args.jobs)?;
    let dir = cfg.output.dir.join(ABLATION_DIR);
    write_json(&dir.join("table.json"), &table)?;
    for r in &reports {
        write_text(&dir.join(format!("{}.loss.csv", r.tag)), &r.loss_csv())?;
    }
    Ok(table)
}

/// Runs every stage on a freshly generated dataset, printing as it goes.
pub fn cmd_all(cfg: &ExperimentConfig, args: &AblationArgs) -> Result<()> {
    let data = DataArg {
        data: Some(cmd_generate(cfg)?),
    };
    show_generated(&cfg.output.dir.join(DATASET_DIR))?;
    show_grouping(&cmd_group(cfg, &data, None, None, None)?);
    show_report(&cmd_pretrain(cfg, &data)?);
    show_metrics(&cmd_probe(cfg, &data, None)?.metrics.test);
    show_table(&cmd_ablate(cfg, &data, args)?);
    Ok(())
}

fn show_generated(dir: &Path) -> Result<()> {
    let manifest = dir.join(datagen::MANIFEST_FILE);
    let text = fs::read_to_string(&manifest).map_err(io_err(&manifest))?;
    println!("{}", text.trim_end());
    Ok(())
}

fn show_grouping(result: &mbsl_core::GroupingResult) {
    println!("groups {:?} threshold {}", result.groups, result.threshold);
}

fn show_metrics(m: &mbsl_core::MetricReport) {
    println!("test {}", serde_json::to_string(m).expect("metrics serialize"));
}

fn show_report(report: &mbsl_core::RunReport) {
    let curve = &report.loss_curve;
    println!(
        "groups {:?} steps {} loss {:.4} -> {:.4}",
        report.groups,
        curve.len(),
        curve.first().copied().unwrap_or(f64::NAN),
        curve.last().copied().unwrap_or(f64::NAN),
    );
    if let Some(m) = &report.metrics {
        show_metrics(&m.test);
    }
}

fn show_table(table: &mbsl_core::AblationTable) {
    for row in &table.rows {
        println!(
            "{:<22} groups {:<18} {}",
            row.variant.name(),
            format!("{:?}", row.groups),
            serde_json::to_string(&row.test).expect("metrics serialize")
        );
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Generate => show_generated(&cmd_generate(&cfg)?)?,
        Command::Group {
            data,
            method,
            threshold,
            variant,
        } => show_grouping(&cmd_group(&cfg, data, *method, *threshold, *variant)?),
        Command::Pretrain { data } => show_report(&cmd_pretrain(&cfg, data)?),
        Command::Probe { data, checkpoint } => {
            show_metrics(&cmd_probe(&cfg, data, checkpoint.as_deref())?.metrics.test)
        }
        Command::Ablate { data, ablation } => show_table(&cmd_ablate(&cfg, data, ablation)?),
        Command::All { ablation } => cmd_all(&cfg, ablation)?,
    }
    Ok(())
}
